//! k-means++ seeding followed by Lloyd iterations.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    /// Independent seedings; the run with the lowest final SSE is kept.
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tolerance: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// Within-cluster SSE after each assignment step of the kept run.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.outer_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus<R: Rng>(z: ArrayView2<f64>, s: usize, rng: &mut R) -> Array2<f64> {
    let n = z.nrows();
    let mut centers = Array2::zeros((s, z.ncols()));
    centers.row_mut(0).assign(&z.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = z.outer_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for j in 1..s {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&z.row(pick));
        for (i, x) in z.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.row(j)));
        }
    }
    centers
}

fn lloyd(z: ArrayView2<f64>, mut centers: Array2<f64>, opts: &KMeansOptions) -> KMeansResult {
    let (n, dim) = z.dim();
    let s = centers.nrows();
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        for (i, x) in z.outer_iter().enumerate() {
            let (j, d) = nearest(x, &centers);
            assignments[i] = j;
            dists[i] = d;
        }
        sse_history.push(dists.iter().sum());
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros((s, dim));
        let mut sizes = vec![0usize; s];
        for (i, x) in z.outer_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &x);
            sizes[assignments[i]] += 1;
        }
        let mut movement: f64 = 0.0;
        for j in 0..s {
            let new = if sizes[j] > 0 {
                sums.row(j).mapv(|v| v / sizes[j] as f64)
            } else {
                // reseed at the point worst served by its current center
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).expect("n >= 1");
                dists[far] = 0.0;
                z.row(far).to_owned()
            };
            movement = movement.max(sq_dist(new.view(), centers.row(j)).sqrt());
            centers.row_mut(j).assign(&new);
        }
        if movement < opts.tolerance {
            for (i, x) in z.outer_iter().enumerate() {
                let (j, d) = nearest(x, &centers);
                assignments[i] = j;
                dists[i] = d;
            }
            sse_history.push(dists.iter().sum());
            break;
        }
    }
    KMeansResult {
        centers,
        assignments,
        sse: *sse_history.last().expect("at least one assignment step"),
        sse_history,
        iterations,
    }
}

/// Clusters the rows of `z` into `s` groups. Deterministic given `seed`.
pub fn kmeans_with(z: ArrayView2<f64>, s: usize, seed: u64, opts: &KMeansOptions) -> Result<KMeansResult> {
    let n = z.nrows();
    if s == 0 || n < s {
        return Err(Error::domain(format!("k-means needs 1 <= s <= n, got s = {s}, n = {n}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd(z, plus_plus(z, s, &mut rng), opts);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// [`kmeans_with`] using default options.
pub fn kmeans(z: ArrayView2<f64>, s: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(z, s, seed, &KMeansOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ari;
    use ndarray::Axis;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(per: usize, offsets: &[f64], seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = per * offsets.len();
        let mut z = Array2::zeros((n, 4));
        let mut labels = Vec::new();
        for (k, &off) in offsets.iter().enumerate() {
            for i in 0..per {
                for j in 0..4 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    z[[k * per + i, j]] = off + 0.3 * e;
                }
                labels.push(k);
            }
        }
        (z, labels)
    }

    #[test]
    fn single_cluster_center_is_the_mean() {
        let (z, _) = blobs(20, &[0.0, 3.0], 1);
        let r = kmeans(z.view(), 1, 0).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        for (a, b) in r.centers.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_clouds_are_recovered() {
        let (z, labels) = blobs(30, &[-5.0, 5.0], 2);
        let r = kmeans(z.view(), 2, 7).unwrap();
        assert_eq!(ari(&labels, &r.assignments).unwrap(), 1.0);
    }

    #[test]
    fn sse_never_increases() {
        let (z, _) = blobs(40, &[0.0, 1.0, 2.0], 3);
        for seed in 0..5 {
            let r = kmeans_with(z.view(), 4, seed, &KMeansOptions { restarts: 1, ..Default::default() }).unwrap();
            for w in r.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.sse_history);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (z, _) = blobs(25, &[0.0, 2.0, 4.0], 4);
        let a = kmeans(z.view(), 3, 11).unwrap();
        let b = kmeans(z.view(), 3, 11).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn duplicate_points_and_bad_input() {
        let z = Array2::ones((5, 2));
        let r = kmeans(z.view(), 3, 0).unwrap();
        assert!(r.sse.abs() < 1e-12);
        assert!(r.assignments.iter().all(|&a| a < 3));
        assert!(kmeans(z.view(), 6, 0).is_err());
        assert!(kmeans(z.view(), 0, 0).is_err());
    }
}
