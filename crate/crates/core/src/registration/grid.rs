//! Exact nearest-neighbor queries on a uniform 3D grid.
//!
//! Results are identical to a brute-force scan: distances are computed with
//! the same expression and ties go to the lowest target index.

use nalgebra::Point3;

#[inline]
pub(crate) fn dist2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest target and its squared distance, by exhaustive scan.
pub fn brute_force_nearest(query: &Point3<f64>, targets: &[Point3<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, t) in targets.iter().enumerate() {
        let d = dist2(query, t);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

pub struct GridIndex<'a> {
    points: &'a [Point3<f64>],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    /// Prefix offsets into `order` per cell (len = cells + 1).
    starts: Vec<u32>,
    /// Point indices sorted by cell, ascending within a cell.
    order: Vec<u32>,
}

impl<'a> GridIndex<'a> {
    /// Cell size is the density-based spacing estimate `(volume / n)^(1/d)`
    /// over the non-degenerate axes of the bounding box.
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let n = points.len() as f64;
        let extents: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).filter(|&e| e > 0.0).collect();
        let mut cell = if extents.is_empty() {
            1.0
        } else {
            let volume: f64 = extents.iter().product();
            (volume / n).powf(1.0 / extents.len() as f64)
        };
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        // Keep the dense grid at most a few cells per point.
        let max_cells = (4.0 * n).max(64.0);
        let mut dims;
        loop {
            dims = [0i64; 3];
            for a in 0..3 {
                dims[a] = ((hi[a] - lo[a]) / cell).floor() as i64 + 1;
            }
            if (dims[0] * dims[1] * dims[2]) as f64 <= max_cells {
                break;
            }
            cell *= 1.25;
        }

        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0u32; n_cells + 1];
        let cell_ids: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::coords(&lo, cell, &dims, p);
                Self::flat(&dims, c)
            })
            .collect();
        for &c in &cell_ids {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cell_ids.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        GridIndex {
            points,
            origin: lo,
            cell,
            dims,
            starts,
            order,
        }
    }

    fn coords(lo: &[f64; 3], cell: f64, dims: &[i64; 3], p: &Point3<f64>) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1);
        }
        c
    }

    #[inline]
    fn flat(dims: &[i64; 3], c: [i64; 3]) -> usize {
        ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    #[inline]
    fn scan_cell(&self, c: [i64; 3], query: &Point3<f64>, best: &mut (usize, f64)) {
        let f = Self::flat(&self.dims, c);
        let (s, e) = (self.starts[f] as usize, self.starts[f + 1] as usize);
        for &i in &self.order[s..e] {
            let i = i as usize;
            let d = dist2(query, &self.points[i]);
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        }
    }

    /// Nearest point index and squared distance.
    pub fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        // Unclamped cell of the query; may lie outside the grid.
        let mut q = [0i64; 3];
        let mut gap = [0i64; 3];
        for a in 0..3 {
            let raw = ((query[a] - self.origin[a]) / self.cell).floor();
            q[a] = raw.clamp(-1e12, 1e12) as i64;
            gap[a] = if q[a] < 0 {
                -q[a]
            } else if q[a] >= self.dims[a] {
                q[a] - self.dims[a] + 1
            } else {
                0
            };
        }
        let max_ring = (0..3)
            .map(|a| q[a].abs().max((q[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        let mut r = *gap.iter().max().unwrap();
        loop {
            self.scan_ring(q, r, query, &mut best);
            // Points outside the scanned cube are at least r * cell away.
            let bound = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1.sqrt() < bound * (1.0 - 1e-12) {
                break;
            }
            if r >= max_ring {
                break;
            }
            r += 1;
        }
        best
    }

    fn scan_ring(&self, q: [i64; 3], r: i64, query: &Point3<f64>, best: &mut (usize, f64)) {
        let lo: Vec<i64> = (0..3).map(|a| (q[a] - r).max(0)).collect();
        let hi: Vec<i64> = (0..3).map(|a| (q[a] + r).min(self.dims[a] - 1)).collect();
        if (0..3).any(|a| lo[a] > hi[a]) {
            return;
        }
        for z in lo[2]..=hi[2] {
            let z_edge = (z - q[2]).abs() == r;
            for y in lo[1]..=hi[1] {
                let y_edge = z_edge || (y - q[1]).abs() == r;
                if y_edge {
                    for x in lo[0]..=hi[0] {
                        self.scan_cell([x, y, z], query, best);
                    }
                } else {
                    for x in [q[0] - r, q[0] + r] {
                        if x >= lo[0] && x <= hi[0] {
                            self.scan_cell([x, y, z], query, best);
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}
