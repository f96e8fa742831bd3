use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const MAX_ITERS: usize = 50;
const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `[C, dim]`
    pub centroids: Tensor<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations over the rows of `points`.
///
/// Stops when the relative change in inertia drops below 1e-6 or after 50
/// iterations. A cluster that loses all its members is re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(points: &Tensor<f64>, clusters: usize, rng: &mut Rng) -> Result<KMeans> {
    if points.rank() != 2 {
        return Err(Error::shape("kmeans", points.shape(), &[]));
    }
    let n = points.rows();
    if clusters == 0 || n < clusters {
        return Err(Error::TooFewPoints { points: n, clusters });
    }
    let dim = points.cols();
    let mut centroids = seed_plus_plus(points, clusters, rng);
    let mut assign = vec![0usize; n];
    let mut inertia = assign_points(points, &centroids, &mut assign);
    let mut iterations = 0;

    while iterations < MAX_ITERS {
        iterations += 1;

        let mut sums = vec![0.0; clusters * dim];
        let mut counts = vec![0usize; clusters];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..clusters {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            } else {
                let far = farthest_point(points, &centroids, &assign, &taken);
                taken[far] = true;
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }

        let prev = inertia;
        inertia = assign_points(points, &centroids, &mut assign);
        if inertia == 0.0 || (prev - inertia).abs() <= REL_TOL * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        inertia,
        iterations,
    })
}

fn seed_plus_plus(points: &Tensor<f64>, clusters: usize, rng: &mut Rng) -> Tensor<f64> {
    let n = points.rows();
    let mut centroids = Tensor::zeros(&[clusters, points.cols()]);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Nearest-centroid assignment (ties to the lowest index); returns inertia.
fn assign_points(points: &Tensor<f64>, centroids: &Tensor<f64>, assign: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, slot) in assign.iter_mut().enumerate() {
        let (best, d) = nearest(points.row(i), centroids);
        *slot = best;
        inertia += d;
    }
    inertia
}

pub(crate) fn nearest(point: &[f64], centroids: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn farthest_point(points: &Tensor<f64>, centroids: &Tensor<f64>, assign: &[usize], taken: &[bool]) -> usize {
    let mut best = (0, -1.0);
    for i in 0..points.rows() {
        if taken[i] {
            continue;
        }
        let d = sq_dist(points.row(i), centroids.row(assign[i]));
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}
