//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use nalgebra::Point3;

/// Davies-Bouldin index computed straight from the definitions: cluster
/// centroids are the member means, dispersion the mean member-to-centroid
/// distance, separation the centroid distance, similarity their ratio.
pub fn dbi_oracle(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let mut members: Vec<Vec<[f64; 2]>> = vec![Vec::new(); k];
    for (p, &l) in points.iter().zip(labels) {
        members[l].push(*p);
    }
    let centroids: Vec<[f64; 2]> = members
        .iter()
        .map(|m| {
            let n = m.len() as f64;
            [m.iter().map(|p| p[0]).sum::<f64>() / n, m.iter().map(|p| p[1]).sum::<f64>() / n]
        })
        .collect();
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let disp: Vec<f64> = (0..k)
        .map(|i| members[i].iter().map(|&p| d(p, centroids[i])).sum::<f64>() / members[i].len() as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i != j {
                let sim = (disp[i] + disp[j]) / d(centroids[i], centroids[j]);
                worst = worst.max(sim);
            }
        }
        total += worst;
    }
    total / k as f64
}

/// Member means of a labelled partition.
pub fn means(points: &[[f64; 2]], labels: &[usize], k: usize) -> Vec<[f64; 2]> {
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0.0; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1.0;
    }
    sums.iter().zip(&counts).map(|(s, n)| [s[0] / n, s[1] / n]).collect()
}

/// Indices kept by the three-median-distances rule.
pub fn outlier_oracle(distances: &[f64]) -> Vec<usize> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (0..n).filter(|&i| distances[i] <= 3.0 * median).collect()
}

/// O(n·m) nearest neighbor with lowest-index tie breaking.
pub fn nearest_oracle(source: &[Point3<f64>], target: &[Point3<f64>]) -> Vec<usize> {
    source
        .iter()
        .map(|s| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, t) in target.iter().enumerate() {
                let d = (s - t).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}
