use rand::Rng;

use crate::error::{Result, RunError};

/// Result of a k-means fit: per-point cluster assignment plus final
/// centroids.
#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Ties in nearest-centroid
/// assignment break toward the lowest index; a cluster that empties out is
/// re-seeded to the point farthest from its assigned centroid. All
/// randomness comes from `rng`, so fixed seeds give fixed fits.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut impl Rng,
    max_iters: usize,
) -> Result<KmeansFit> {
    if k == 0 {
        return Err(RunError::data("kmeans: k must be positive"));
    }
    if points.len() < k {
        return Err(RunError::data(format!(
            "kmeans: {} point(s) cannot fill {} clusters",
            points.len(),
            k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(RunError::data("kmeans: inconsistent point dimensions"));
    }

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass is on already-chosen positions.
            rng.gen_range(0..points.len())
        } else {
            let mut ticket = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if ticket < w {
                    chosen = i;
                    break;
                }
                ticket -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(p, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; points.len()];
    for _ in 0..max_iters {
        // Assignment step.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist_sq(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        // Update step.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed to the globally farthest point from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = dist_sq(&points[a], &centroids[assignments[a]]);
                        let db = dist_sq(&points[b], &centroids[assignments[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                changed = true;
            } else {
                for (s, out) in sums[c].iter().zip(centroids[c].iter_mut()) {
                    *out = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KmeansFit { assignments, centroids })
}
