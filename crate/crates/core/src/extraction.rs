//! Separation of rotating targets in the image plane.
//!
//! Centroids are seeded from an event-count heatmap, refined with Lloyd
//! iterations and the number of targets is picked by the Davies-Bouldin
//! index. Per target, far-away outliers are dropped and the blade count
//! (hence the angle of rotational symmetry) is estimated from a short burst
//! of events.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventSlice, Geometry};

pub type Point2 = [f64; 2];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("no events to cluster")]
    EmptyInput,

    #[error("only {available} heatmap cells qualify as centroids, {requested} requested")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("Davies-Bouldin index is undefined for {0} cluster(s)")]
    Undefined(usize),

    #[error("no candidate cluster count produced a valid partition")]
    ExtractionFailed,

    #[error("symmetry needs {needed} events, cluster has {available}")]
    SymmetryUndetermined { needed: usize, available: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[inline]
fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
fn dist2(a: Point2, b: Point2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn positions(events: &[Event]) -> Vec<Point2> {
    events.iter().map(Event::xy).collect()
}

/// Accumulated event counts on a grid of `grid_size` x `grid_size` pixel cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid_size: u32,
    pub cols: u32,
    pub rows: u32,
    geometry: Geometry,
    /// Row-major, `rows * cols` entries.
    counts: Vec<u32>,
}

impl Heatmap {
    pub fn new(geometry: Geometry, grid_size: u32) -> Self {
        assert!(grid_size >= 1, "grid_size must be at least 1");
        let cols = geometry.width.div_ceil(grid_size);
        let rows = geometry.height.div_ceil(grid_size);
        Heatmap {
            grid_size,
            cols,
            rows,
            geometry,
            counts: vec![0; (cols * rows) as usize],
        }
    }

    pub fn accumulate(&mut self, events: &[Event]) {
        for e in events {
            let (col, row) = self.cell_of(e.x, e.y);
            self.counts[(row * self.cols + col) as usize] += 1;
        }
    }

    /// `(col, row)` of the cell covering pixel `(x, y)`.
    pub fn cell_of(&self, x: u16, y: u16) -> (u32, u32) {
        (x as u32 / self.grid_size, y as u32 / self.grid_size)
    }

    pub fn count(&self, col: u32, row: u32) -> u32 {
        self.counts[(row * self.cols + col) as usize]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Pixel-space center of the pixels covered by a cell.
    pub fn cell_center(&self, col: u32, row: u32) -> Point2 {
        let g = self.grid_size;
        let x0 = col * g;
        let x1 = ((col + 1) * g).min(self.geometry.width);
        let y0 = row * g;
        let y1 = ((row + 1) * g).min(self.geometry.height);
        [(x0 + x1 - 1) as f64 / 2.0, (y0 + y1 - 1) as f64 / 2.0]
    }

    /// Counts as CSV, one grid row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| self.count(c, row).to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn build_heatmap(slice: &EventSlice<'_>, grid_size: u32) -> Heatmap {
    heatmap_of(slice.events(), slice.geometry(), grid_size)
}

pub fn heatmap_of(events: &[Event], geometry: Geometry, grid_size: u32) -> Heatmap {
    let mut map = Heatmap::new(geometry, grid_size);
    map.accumulate(events);
    map
}

/// Greedy farthest-cell seeding.
///
/// The first centroid is the densest cell. Each following one is the cell
/// with more than `epsilon * max` events whose mean distance to the already
/// chosen centroids is largest. Ties go to the lowest `(row, col)`.
pub fn init_centroids(heatmap: &Heatmap, k: usize, epsilon: f64) -> Result<Vec<Point2>, ExtractionError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ExtractionError::InvalidParameter(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let h = heatmap.max_count();
    if k == 0 || h == 0 {
        return Err(ExtractionError::InsufficientCandidates { requested: k, available: 0 });
    }
    let threshold = epsilon * h as f64;
    // Row-major scan gives lexicographic (row, col) order.
    let mut argmax = None;
    let mut candidates = Vec::new();
    for row in 0..heatmap.rows {
        for col in 0..heatmap.cols {
            let c = heatmap.count(col, row);
            if c == h && argmax.is_none() {
                argmax = Some(heatmap.cell_center(col, row));
            } else if c as f64 > threshold {
                candidates.push(heatmap.cell_center(col, row));
            }
        }
    }
    let available = candidates.len() + 1;
    if available < k {
        return Err(ExtractionError::InsufficientCandidates { requested: k, available });
    }

    let mut chosen = vec![argmax.expect("max cell exists")];
    // Running sum of distances from each candidate to the chosen set.
    let mut sums: Vec<f64> = candidates.iter().map(|&c| dist(c, chosen[0])).collect();
    let mut taken = vec![false; candidates.len()];
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for (i, &s) in sums.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| s > sums[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("enough candidates");
        taken[b] = true;
        let next = candidates[b];
        chosen.push(next);
        for (i, s) in sums.iter_mut().enumerate() {
            if !taken[i] {
                *s += dist(candidates[i], next);
            }
        }
    }
    Ok(chosen)
}

/// A partition of events into clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub centroids: Vec<Point2>,
    /// Cluster index of each event, in event order.
    pub assignment: Vec<usize>,
    /// `None` when `k == 1`.
    pub dbi: Option<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Events of cluster `index`, preserving order.
    pub fn members(&self, events: &[Event], index: usize) -> Vec<Event> {
        events
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &a)| a == index)
            .map(|(e, _)| *e)
            .collect()
    }
}

/// Lloyd iterations stop once no centroid moves by this many pixels.
pub const KMEANS_TOLERANCE_PX: f64 = 0.5;
pub const KMEANS_MAX_ITERATIONS: usize = 100;

#[inline]
fn nearest_centroid(p: Point2, centroids: &[Point2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// One assignment + update step. Empty clusters are dropped and the
/// assignment re-indexed. Returns the new centroids.
pub fn lloyd_step(points: &[Point2], centroids: &[Point2], assignment: &mut [usize]) -> Vec<Point2> {
    let k = centroids.len();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, a) in points.iter().zip(assignment.iter_mut()) {
        let c = nearest_centroid(*p, centroids);
        *a = c;
        sums[c][0] += p[0];
        sums[c][1] += p[1];
        counts[c] += 1;
    }
    let mut remap = vec![usize::MAX; k];
    let mut next = Vec::with_capacity(k);
    for i in 0..k {
        if counts[i] > 0 {
            remap[i] = next.len();
            let n = counts[i] as f64;
            next.push([sums[i][0] / n, sums[i][1] / n]);
        }
    }
    if next.len() < k {
        for a in assignment.iter_mut() {
            *a = remap[*a];
        }
    }
    next
}

/// Sum of squared distances of the points to their assigned centroids.
pub fn inertia(points: &[Point2], centroids: &[Point2], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(&p, &a)| dist2(p, centroids[a]))
        .sum()
}

fn lloyd(points: &[Point2], init: &[Point2]) -> (Vec<Point2>, Vec<usize>, usize) {
    let mut centroids = init.to_vec();
    let mut assignment = vec![0usize; points.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let previous = centroids.len();
        let next = lloyd_step(points, &centroids, &mut assignment);
        let settled = next.len() == previous
            && next
                .iter()
                .zip(&centroids)
                .all(|(&a, &b)| dist(a, b) < KMEANS_TOLERANCE_PX);
        centroids = next;
        if settled || iterations >= KMEANS_MAX_ITERATIONS {
            return (centroids, assignment, iterations);
        }
    }
}

fn cluster_points(points: &[Point2], init: &[Point2]) -> Result<ClusterResult, ExtractionError> {
    if points.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    if init.is_empty() {
        return Err(ExtractionError::InvalidParameter("at least one initial centroid is required".into()));
    }
    let (centroids, assignment, iterations) = lloyd(points, init);
    let k = centroids.len();
    let dbi = (k >= 2).then(|| dbi_points(points, &centroids, &assignment));
    Ok(ClusterResult {
        k,
        centroids,
        assignment,
        dbi,
        iterations,
    })
}

/// Lloyd k-means in the image plane starting from `init`.
pub fn kmeans(events: &[Event], init: &[Point2]) -> Result<ClusterResult, ExtractionError> {
    cluster_points(&positions(events), init)
}

fn dbi_points(points: &[Point2], centroids: &[Point2], assignment: &[usize]) -> f64 {
    let k = centroids.len();
    let mut spread = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&p, &a) in points.iter().zip(assignment) {
        spread[a] += dist(p, centroids[a]);
        counts[a] += 1;
    }
    let disp: Vec<f64> = spread
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    let worst_sum: f64 = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| {
                    let sep = dist(centroids[i], centroids[j]);
                    if sep == 0.0 {
                        f64::INFINITY
                    } else {
                        (disp[i] + disp[j]) / sep
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    worst_sum / k as f64
}

/// Davies-Bouldin index of a partition: mean over clusters of the worst
/// `(disp_i + disp_j) / sep_ij`, where `disp` is the mean distance of a
/// cluster's events to its centroid.
pub fn dbi(result: &ClusterResult, events: &[Event]) -> Result<f64, ExtractionError> {
    if result.k < 2 {
        return Err(ExtractionError::Undefined(result.k));
    }
    if events.len() != result.assignment.len() {
        return Err(ExtractionError::InvalidParameter(format!(
            "{} events but {} assignments",
            events.len(),
            result.assignment.len()
        )));
    }
    Ok(dbi_points(&positions(events), &result.centroids, &result.assignment))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    pub grid_size: u32,
    pub epsilon: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Above this best multi-cluster DBI the scene is treated as a single target.
    pub single_target_dbi: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            grid_size: 4,
            epsilon: 0.3,
            k_min: 2,
            k_max: 6,
            single_target_dbi: 0.6,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.grid_size == 0 {
            return Err(ExtractionError::InvalidParameter("grid_size must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ExtractionError::InvalidParameter(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(ExtractionError::InvalidParameter(format!(
                "cluster range {}..={} is invalid",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }
}

/// Clusters for every candidate k and keeps the one with the smallest DBI
/// (smaller k on ties). Falls back to one cluster when no multi-cluster
/// partition scores at or below `single_target_dbi`.
pub fn select_k(events: &[Event], geometry: Geometry, params: &ExtractionParams) -> Result<ClusterResult, ExtractionError> {
    params.validate()?;
    if events.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    let heatmap = heatmap_of(events, geometry, params.grid_size);
    let points = positions(events);

    let mut best: Option<ClusterResult> = None;
    for k in params.k_min..=params.k_max {
        let init = match init_centroids(&heatmap, k, params.epsilon) {
            Ok(init) => init,
            Err(ExtractionError::InsufficientCandidates { .. }) => continue,
            Err(e) => return Err(e),
        };
        let result = cluster_points(&points, &init)?;
        let Some(score) = result.dbi else { continue };
        if best.as_ref().is_none_or(|b| score < b.dbi.unwrap()) {
            best = Some(result);
        }
    }
    match best {
        Some(b) if b.dbi.unwrap() <= params.single_target_dbi => Ok(b),
        _ => {
            let init = init_centroids(&heatmap, 1, params.epsilon).map_err(|_| ExtractionError::ExtractionFailed)?;
            cluster_points(&points, &init)
        }
    }
}

/// Median of the distances (mean of the middle two for even counts).
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Median distance of the events to `centroid`.
pub fn median_distance(events: &[Event], centroid: Point2) -> Option<f64> {
    let mut d: Vec<f64> = events.iter().map(|e| dist(e.xy(), centroid)).collect();
    median(&mut d)
}

/// Drops events farther than three median distances from `centroid`.
/// The centroid is left as is.
pub fn remove_outliers(events: &[Event], centroid: Point2) -> Vec<Event> {
    let Some(d_m) = median_distance(events, centroid) else {
        return Vec::new();
    };
    let threshold = 3.0 * d_m;
    events
        .iter()
        .filter(|e| dist(e.xy(), centroid) <= threshold)
        .copied()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryInfo {
    pub n_repeats: u32,
    /// Angle of rotational symmetry, `2π / n_repeats`.
    pub theta_c: f64,
}

impl SymmetryInfo {
    pub fn new(n_repeats: u32) -> Self {
        assert!(n_repeats >= 1);
        SymmetryInfo {
            n_repeats,
            theta_c: 2.0 * PI / n_repeats as f64,
        }
    }

    /// No detectable repetition.
    pub fn asymmetric() -> Self {
        SymmetryInfo::new(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryParams {
    pub n_events: usize,
    pub max_repeats: usize,
    /// k-means++ restarts per candidate count; the lowest-inertia run is kept.
    pub restarts: usize,
    /// Inner radius, as a fraction of the median distance, excluded as hub.
    pub hub_fraction: f64,
    /// Above this best DBI the target is treated as having no repetition.
    pub single_target_dbi: f64,
    pub seed: u64,
}

impl Default for SymmetryParams {
    fn default() -> Self {
        SymmetryParams {
            n_events: 300,
            max_repeats: 6,
            restarts: 5,
            hub_fraction: 0.3,
            single_target_dbi: 0.4,
            seed: 0x5eed_b1ade,
        }
    }
}

fn kmeans_pp_seeds(points: &[Point2], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let mut seeds = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let s = points[pick];
        seeds.push(s);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, s));
        }
    }
    seeds
}

/// k-means++ clustering with restarts; deterministic in `seed`.
pub fn kmeans_plus_plus(points: &[Point2], k: usize, restarts: usize, seed: u64) -> Result<ClusterResult, ExtractionError> {
    if points.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut best: Option<(f64, ClusterResult)> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_pp_seeds(points, k, &mut rng);
        let result = cluster_points(points, &seeds)?;
        let score = inertia(points, &result.centroids, &result.assignment);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, result));
        }
    }
    Ok(best.unwrap().1)
}

/// Counts the repeated blades in the first `n_events` events of a target.
///
/// `events` are the target's events in time order and `centroid` its center.
/// Events within `hub_fraction` median distances of the centroid are dropped
/// (the hub is shared by every blade); the rest are projected radially onto
/// the circle of median radius, so each blade forms one compact arc
/// regardless of its length. Those points are clustered with k-means++ for
/// every candidate count and the lowest DBI wins. A best DBI above
/// `single_target_dbi` means no repetition was found.
pub fn symmetry_angle(events: &[Event], centroid: Point2, params: &SymmetryParams) -> Result<SymmetryInfo, ExtractionError> {
    let undetermined = |available| ExtractionError::SymmetryUndetermined {
        needed: params.n_events,
        available,
    };
    if params.n_events < 2 || events.len() < params.n_events {
        return Err(undetermined(events.len()));
    }
    let d_m = median_distance(events, centroid).ok_or(undetermined(0))?;
    if !(d_m > 0.0) {
        return Err(ExtractionError::SymmetryUndetermined {
            needed: params.n_events,
            available: 0,
        });
    }
    let hub = params.hub_fraction * d_m;
    let points: Vec<Point2> = events[..params.n_events]
        .iter()
        .map(|e| [e.xy()[0] - centroid[0], e.xy()[1] - centroid[1]])
        .filter(|v| v[0].hypot(v[1]) >= hub && v[0].hypot(v[1]) > 0.0)
        .map(|v| {
            let r = v[0].hypot(v[1]);
            [centroid[0] + v[0] / r * d_m, centroid[1] + v[1] / r * d_m]
        })
        .collect();
    if points.len() < 2 * params.max_repeats.max(2) {
        return Err(undetermined(points.len()));
    }

    let mut best: Option<(f64, usize)> = None;
    for b in 2..=params.max_repeats {
        let result = kmeans_plus_plus(&points, b, params.restarts, params.seed)?;
        let Some(score) = result.dbi else { continue };
        if result.k == b && best.is_none_or(|(s, _)| score < s) {
            best = Some((score, b));
        }
    }
    Ok(match best {
        Some((score, b)) if score <= params.single_target_dbi => SymmetryInfo::new(b as u32),
        _ => SymmetryInfo::asymmetric(),
    })
}
