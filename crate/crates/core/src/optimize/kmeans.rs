//! Mass-weighted Lloyd iterations with k-means++ seeding, used as the
//! clustering baseline: presets are the centroids of all variations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Method, SelectionResult};
use crate::coverage::{population_coverage, CoverageParams, PresetSet};
use crate::error::{Error, Result};
use crate::model::{Configuration, Dataset, TransferFunctionBank, BANDS};

pub const KMEANS_MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOutcome {
    pub centroids: Vec<Configuration>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Weighted within-cluster sum of squares after each iteration.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64; BANDS], b: &[f64; BANDS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64; BANDS], centroids: &[[f64; BANDS]]) -> (usize, f64) {
    let mut best = (0, sq_dist(p, &centroids[0]));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Draws an index with probability proportional to `weights`.
fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last_positive
}

fn distinct_count(points: &[(Configuration, f64)]) -> usize {
    let mut keys: Vec<[u64; BANDS]> = points.iter().map(|(c, _)| c.gains().map(f64::to_bits)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Clusters mass-weighted points into `n` groups.
pub fn kmeans_presets(points: &[(Configuration, f64)], n: usize, seed: u64) -> Result<KMeansOutcome> {
    if n == 0 {
        return Err(Error::param("cluster count must be at least 1"));
    }
    if points.iter().any(|(_, m)| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::param("point masses must be finite and nonnegative"));
    }
    let distinct = distinct_count(points);
    if n > distinct {
        return Err(Error::param(format!(
            "requested {n} clusters from {distinct} distinct points"
        )));
    }
    let gains: Vec<[f64; BANDS]> = points.iter().map(|(c, _)| *c.gains()).collect();
    let mass: Vec<f64> = points.iter().map(|(_, m)| *m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = draw(&mass, &mut rng).ok_or_else(|| Error::param("total point mass is zero"))?;
    let mut centroids = vec![gains[first]];
    let mut d2: Vec<f64> = gains.iter().map(|g| sq_dist(g, &centroids[0])).collect();
    while centroids.len() < n {
        let score: Vec<f64> = d2.iter().zip(&mass).map(|(d, m)| d * m).collect();
        let next = match draw(&score, &mut rng) {
            Some(i) => i,
            // every remaining positive-mass point coincides with a centroid;
            // fall back to the farthest point regardless of mass
            None => (0..gains.len())
                .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                .expect("points are nonempty"),
        };
        centroids.push(gains[next]);
        for (d, g) in d2.iter_mut().zip(&gains) {
            *d = d.min(sq_dist(g, &gains[next]));
        }
    }

    let mut assignments: Vec<usize> = vec![usize::MAX; gains.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        let assigned: Vec<(usize, f64)> = gains.par_iter().map(|g| nearest(g, &centroids)).collect();
        let new_assign: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        iterations += 1;
        let stable = new_assign == assignments;
        assignments = new_assign;

        let mut sums = vec![[0.0; BANDS]; n];
        let mut weights = vec![0.0; n];
        for ((g, &m), &k) in gains.iter().zip(&mass).zip(&assignments) {
            weights[k] += m;
            for (s, x) in sums[k].iter_mut().zip(g) {
                *s += m * x;
            }
        }
        for k in 0..n {
            if weights[k] > 0.0 {
                centroids[k] = sums[k].map(|s| s / weights[k]);
            }
        }
        inertia.push(
            gains
                .iter()
                .zip(&mass)
                .zip(&assignments)
                .map(|((g, m), &k)| m * sq_dist(g, &centroids[k]))
                .sum(),
        );
        if stable {
            break;
        }
    }

    Ok(KMeansOutcome {
        centroids: centroids
            .into_iter()
            .map(Configuration::new)
            .collect::<Result<_>>()?,
        assignments,
        iterations,
        inertia,
    })
}

/// Clusters every variation (weighted by `w_u * cl_j`) and scores the
/// centroids as presets.
pub fn kmeans_select(
    dataset: &Dataset,
    bank: &TransferFunctionBank,
    params: &CoverageParams,
    n: usize,
    seed: u64,
) -> Result<SelectionResult> {
    let points: Vec<(Configuration, f64)> = dataset.variations(bank).collect();
    let outcome = kmeans_presets(&points, n, seed)?;
    let presets = PresetSet::new(outcome.centroids);
    let coverage = population_coverage(dataset, &presets, bank, params).population_coverage;
    Ok(SelectionResult {
        method: Method::Kmeans,
        n,
        seed: Some(seed),
        coverage,
        indices: Vec::new(),
        presets,
        trace: outcome.inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn pt(g: [f64; BANDS], m: f64) -> (Configuration, f64) {
        (Configuration::from(g), m)
    }

    #[test]
    fn single_cluster_is_weighted_mean() {
        let pts = vec![pt([0.0; 6], 1.0), pt([10.0; 6], 3.0), pt([2.0, 4.0, 6.0, 8.0, 10.0, 12.0], 1.0)];
        let out = kmeans_presets(&pts, 1, 0).unwrap();
        let expect = [
            (30.0 + 2.0) / 5.0,
            (30.0 + 4.0) / 5.0,
            (30.0 + 6.0) / 5.0,
            (30.0 + 8.0) / 5.0,
            (30.0 + 10.0) / 5.0,
            (30.0 + 12.0) / 5.0,
        ];
        for f in 0..BANDS {
            assert!((out.centroids[0][f] - expect[f]).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_clouds_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut sums = [[0.0; BANDS]; 2];
        let mut masses = [0.0; 2];
        for i in 0..400 {
            let cloud = i % 2;
            let centre = if cloud == 0 { 0.0 } else { 100.0 };
            let g: [f64; BANDS] = std::array::from_fn(|_| centre + noise.sample(&mut rng));
            let m = 0.5 + (i % 7) as f64;
            for f in 0..BANDS {
                sums[cloud][f] += m * g[f];
            }
            masses[cloud] += m;
            pts.push(pt(g, m));
        }
        let out = kmeans_presets(&pts, 2, 11).unwrap();
        let mut cents: Vec<[f64; BANDS]> = out.centroids.iter().map(|c| *c.gains()).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for cloud in 0..2 {
            for f in 0..BANDS {
                assert!((cents[cloud][f] - sums[cloud][f] / masses[cloud]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let pts: Vec<_> = (0..50).map(|i| pt([(i * 7 % 13) as f64, i as f64, 0.0, 1.0, 2.0, 3.0], 1.0)).collect();
        assert_eq!(kmeans_presets(&pts, 4, 9).unwrap(), kmeans_presets(&pts, 4, 9).unwrap());
    }

    #[test]
    fn too_many_clusters_is_rejected() {
        let pts = vec![pt([1.0; 6], 1.0), pt([1.0; 6], 2.0), pt([2.0; 6], 1.0)];
        assert!(matches!(kmeans_presets(&pts, 3, 0), Err(Error::Parameter(_))));
        assert_eq!(kmeans_presets(&pts, 2, 0).unwrap().centroids.len(), 2);
    }
}
