//! Principal-component reduction of configurations and the candidate grid
//! laid over the reduced plane.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Configuration, Dataset, TransferFunctionBank, BANDS};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Centered linear projection onto the leading principal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: [f64; BANDS],
    pub components: Vec<[f64; BANDS]>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Fits `k` principal components from the sample covariance.
///
/// Components are ordered by decreasing variance; each is oriented so its
/// largest-magnitude coefficient is positive.
pub fn fit_pca(configs: &[Configuration], k: usize) -> Result<PcaModel> {
    if !(1..=BANDS).contains(&k) {
        return Err(Error::param(format!("component count must be in 1..=6, got {k}")));
    }
    if configs.len() < k + 1 {
        return Err(Error::Fit(format!(
            "need at least {} configurations for {k} components, got {}",
            k + 1,
            configs.len()
        )));
    }
    let n = configs.len() as f64;
    let mut mean = [0.0; BANDS];
    for c in configs {
        for (m, g) in mean.iter_mut().zip(c.gains()) {
            *m += g;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = Matrix6::<f64>::zeros();
    for c in configs {
        let d = Vector6::from_iterator(c.gains().iter().zip(&mean).map(|(g, m)| g - m));
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..BANDS).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * values[0]).count();
    if !(total > 0.0) || rank == 0 {
        return Err(Error::Fit(format!(
            "configurations are rank deficient: rank 0 of {k} requested dimensions"
        )));
    }
    if rank < k {
        log::warn!("configurations span {rank} dimensions; {} components carry no variance", k - rank);
    }

    let components = order[..k]
        .iter()
        .map(|&i| {
            let col = eig.eigenvectors.column(i);
            let mut v: [f64; BANDS] = std::array::from_fn(|r| col[r]);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let mut lead = 0;
            for r in 1..BANDS {
                if v[r].abs() > v[lead].abs() {
                    lead = r;
                }
            }
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let explained_variance_ratio = values[..k].iter().map(|v| v / total).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio,
    })
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of `config` along each component.
    pub fn transform(&self, config: &Configuration) -> Vec<f64> {
        self.components
            .iter()
            .map(|pc| {
                pc.iter()
                    .zip(config.gains())
                    .zip(&self.mean)
                    .map(|((p, g), m)| p * (g - m))
                    .sum()
            })
            .collect()
    }

    /// Projection onto a single component, ignoring the mean.
    fn transform_delta(&self, delta: &[f64; BANDS]) -> Vec<f64> {
        self.components
            .iter()
            .map(|pc| pc.iter().zip(delta).map(|(p, d)| p * d).sum())
            .collect()
    }

    /// Maps reduced coordinates back into gain space.
    pub fn inverse_transform(&self, point: &[f64]) -> Result<Configuration> {
        if point.len() != self.k() {
            return Err(Error::param(format!(
                "point has {} coordinates, model has {} components",
                point.len(),
                self.k()
            )));
        }
        let mut gains = self.mean;
        for (pc, &t) in self.components.iter().zip(point) {
            for (g, p) in gains.iter_mut().zip(pc) {
                *g += t * p;
            }
        }
        Configuration::new(gains)
    }

    fn transform2(&self, config: &Configuration) -> [f64; 2] {
        let t = self.transform(config);
        [t[0], t[1]]
    }

    fn require_planar(&self) -> Result<()> {
        if self.k() != 2 {
            return Err(Error::param(format!(
                "grid construction needs a 2-component model, got {}",
                self.k()
            )));
        }
        Ok(())
    }
}

/// Which configurations define the grid's bounding box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundingBoxSource {
    Prescriptions,
    #[default]
    Variations,
}

impl std::str::FromStr for BoundingBoxSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prescriptions" => Ok(BoundingBoxSource::Prescriptions),
            "variations" => Ok(BoundingBoxSource::Variations),
            other => Err(Error::param(format!("unknown bounding-box source {other:?}"))),
        }
    }
}

/// Reduced-plane coordinates of the bounding-box source set.
pub fn source_points(
    model: &PcaModel,
    dataset: &Dataset,
    bank: &TransferFunctionBank,
    source: BoundingBoxSource,
) -> Result<Vec<[f64; 2]>> {
    model.require_planar()?;
    let base: Vec<[f64; 2]> = dataset.prescriptions().map(|(_, _, c)| model.transform2(c)).collect();
    Ok(match source {
        BoundingBoxSource::Prescriptions => base,
        BoundingBoxSource::Variations => {
            // the projection is linear, so each variation is its
            // prescription's point shifted by the projected transfer function
            let shifts: Vec<Vec<f64>> = bank
                .functions()
                .iter()
                .map(|tf| model.transform_delta(&tf.values))
                .collect();
            base.iter()
                .flat_map(|p| shifts.iter().map(move |s| [p[0] + s[0], p[1] + s[1]]))
                .collect()
        }
    })
}

/// Closed uniform lattice over a bounding box in the reduced plane, with
/// every vertex lifted back to gain space.
///
/// Vertex `(ix, iy)` has index `iy * steps_x + ix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub steps: [usize; 2],
    pub points: Vec<[f64; 2]>,
    pub lifted: Vec<Configuration>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.steps[0] + ix
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.steps[0], index / self.steps[0])
    }

    /// Indices of the up to 8 surrounding vertices, ascending.
    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        let (ix, iy) = self.coords(index);
        let mut out = Vec::with_capacity(8);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let x = ix as i64 + dx;
                let y = iy as i64 + dy;
                if x >= 0 && y >= 0 && (x as usize) < self.steps[0] && (y as usize) < self.steps[1] {
                    out.push(self.index(x as usize, y as usize));
                }
            }
        }
        out
    }
}

fn bounding_box(points: &[[f64; 2]]) -> Result<([f64; 2], [f64; 2])> {
    if points.is_empty() {
        return Err(Error::param("no source points for the bounding box"));
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    if (0..2).any(|d| !(max[d] - min[d] > 1e-12)) {
        return Err(Error::param("degenerate bounding box"));
    }
    Ok((min, max))
}

/// `steps_x * steps_y` vertices spanning the bounding box of
/// `source_points`, both edges included.
pub fn build_grid(
    model: &PcaModel,
    source_points: &[[f64; 2]],
    steps_x: usize,
    steps_y: usize,
) -> Result<CandidateGrid> {
    model.require_planar()?;
    if steps_x < 2 || steps_y < 2 {
        return Err(Error::param(format!(
            "grid needs at least 2 steps per axis, got {steps_x}x{steps_y}"
        )));
    }
    let (min, max) = bounding_box(source_points)?;
    grid_over_box(model, min, max, [steps_x, steps_y])
}

/// Grid whose spacing is at most `step_size` reduced-space units per axis.
pub fn build_grid_with_step(
    model: &PcaModel,
    source_points: &[[f64; 2]],
    step_size: f64,
) -> Result<CandidateGrid> {
    model.require_planar()?;
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::param(format!("step size must be positive, got {step_size}")));
    }
    let (min, max) = bounding_box(source_points)?;
    let steps = [0, 1].map(|d| ((max[d] - min[d]) / step_size).ceil() as usize + 1);
    grid_over_box(model, min, max, [steps[0].max(2), steps[1].max(2)])
}

pub fn grid_over_box(
    model: &PcaModel,
    min: [f64; 2],
    max: [f64; 2],
    steps: [usize; 2],
) -> Result<CandidateGrid> {
    model.require_planar()?;
    if steps[0] < 2 || steps[1] < 2 {
        return Err(Error::param("grid needs at least 2 steps per axis"));
    }
    // t = i / (n - 1) keeps vertices of nested grids bit-identical
    let axis = |d: usize, i: usize| {
        let t = i as f64 / (steps[d] - 1) as f64;
        min[d] + (max[d] - min[d]) * t
    };
    let mut points = Vec::with_capacity(steps[0] * steps[1]);
    for iy in 0..steps[1] {
        for ix in 0..steps[0] {
            points.push([axis(0, ix), axis(1, iy)]);
        }
    }
    let lifted = points
        .iter()
        .map(|p| model.inverse_transform(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateGrid {
        min,
        max,
        steps,
        points,
        lifted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(g: [f64; BANDS]) -> Configuration {
        Configuration::new(g).unwrap()
    }

    fn gaussian_configs(seed: u64, n: usize) -> Vec<Configuration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| cfg(std::array::from_fn(|_| StandardNormal.sample(&mut rng))))
            .collect()
    }

    fn planar_configs() -> Vec<Configuration> {
        let a = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let b = [-2.0, -1.0, 0.0, 0.5, 1.0, 1.5];
        let base = [10.0, 15.0, 25.0, 30.0, 32.0, 30.0];
        (0..40)
            .map(|i| {
                let s = (i as f64 * 0.37).sin() * 8.0;
                let t = (i as f64 * 0.91).cos() * 4.0;
                cfg(std::array::from_fn(|f| base[f] + s * a[f] + t * b[f]))
            })
            .collect()
    }

    #[test]
    fn line_data_has_single_component() {
        let configs: Vec<_> = (0..10)
            .map(|i| cfg(std::array::from_fn(|f| i as f64 * (f as f64 + 1.0))))
            .collect();
        let m = fit_pca(&configs, 2).unwrap();
        assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        assert!(m.explained_variance_ratio[1].abs() < 1e-9);
    }

    #[test]
    fn isotropic_sample_splits_variance_evenly() {
        let m = fit_pca(&gaussian_configs(7, 20_000), 2).unwrap();
        for r in &m.explained_variance_ratio {
            assert!((r - 1.0 / 6.0).abs() < 0.02, "{r}");
        }
    }

    #[test]
    fn components_are_orthonormal_and_ratios_sorted() {
        let m = fit_pca(&gaussian_configs(3, 500), 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = m.components[i].iter().zip(&m.components[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9);
            }
        }
        assert!(m.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        for pc in &m.components {
            let lead = pc.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn projection_identity() {
        let configs = gaussian_configs(11, 200);
        let m = fit_pca(&configs, 2).unwrap();
        for c in configs.iter().take(20) {
            let back = m.inverse_transform(&m.transform(c)).unwrap();
            let residual: Vec<f64> = (0..BANDS).map(|f| c[f] - back[f]).collect();
            for pc in &m.components {
                let dot: f64 = pc.iter().zip(&residual).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn origin_maps_to_mean_and_round_trip_holds() {
        let m = fit_pca(&planar_configs(), 2).unwrap();
        assert_eq!(m.inverse_transform(&[0.0, 0.0]).unwrap().gains(), &m.mean);
        for p in [[1.5, -2.0], [-7.0, 3.25], [0.0, 12.0]] {
            let q = m.transform(&m.inverse_transform(&p).unwrap());
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_two_data_reconstructs() {
        let configs = planar_configs();
        let m = fit_pca(&configs, 2).unwrap();
        for c in &configs {
            let back = m.inverse_transform(&m.transform(c)).unwrap();
            assert!(c.chebyshev(&back) < 1e-6);
        }
    }

    #[test]
    fn constant_configs_are_rank_deficient() {
        let configs = vec![cfg([5.0; 6]); 10];
        let err = fit_pca(&configs, 2).unwrap_err();
        assert!(matches!(err, Error::Fit(_)));
        assert!(err.to_string().contains("rank 0"));
    }

    #[test]
    fn ratios_invariant_under_shift() {
        let configs = gaussian_configs(5, 300);
        let shifted: Vec<_> = configs
            .iter()
            .map(|c| cfg(std::array::from_fn(|f| c[f] + 40.0)))
            .collect();
        let a = fit_pca(&configs, 2).unwrap();
        let b = fit_pca(&shifted, 2).unwrap();
        for (x, y) in a.explained_variance_ratio.iter().zip(&b.explained_variance_ratio) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let configs = gaussian_configs(9, 100);
        assert_eq!(fit_pca(&configs, 2).unwrap(), fit_pca(&configs, 2).unwrap());
    }

    fn model() -> PcaModel {
        fit_pca(&planar_configs(), 2).unwrap()
    }

    #[test]
    fn two_by_two_grid_is_box_corners() {
        let pts = [[0.0, 0.0], [4.0, 1.0], [2.0, -3.0]];
        let g = build_grid(&model(), &pts, 2, 2).unwrap();
        assert_eq!(g.points, vec![[0.0, -3.0], [4.0, -3.0], [0.0, 1.0], [4.0, 1.0]]);
    }

    #[test]
    fn ten_by_ten_grid_spacing() {
        let pts = [[-9.0, 0.0], [9.0, 4.5]];
        let g = build_grid(&model(), &pts, 10, 10).unwrap();
        assert_eq!(g.len(), 100);
        for ix in 0..9 {
            let a = g.points[g.index(ix, 0)][0];
            let b = g.points[g.index(ix + 1, 0)][0];
            assert!((b - a - 2.0).abs() < 1e-12);
            let a = g.points[g.index(0, ix)][1];
            let b = g.points[g.index(0, ix + 1)][1];
            assert!((b - a - 0.5).abs() < 1e-12);
        }
        for (p, c) in g.points.iter().zip(&g.lifted) {
            assert_eq!(*c, model().inverse_transform(p).unwrap());
            assert!(p[0] >= g.min[0] && p[0] <= g.max[0] && p[1] >= g.min[1] && p[1] <= g.max[1]);
        }
    }

    #[test]
    fn lifted_rows_are_equally_spaced() {
        let g = build_grid(&model(), &[[-3.0, -1.0], [5.0, 2.0]], 7, 4).unwrap();
        let diff = |a: usize, b: usize| -> [f64; 6] { std::array::from_fn(|f| g.lifted[b][f] - g.lifted[a][f]) };
        for iy in 0..4 {
            let d0 = diff(g.index(0, iy), g.index(1, iy));
            for ix in 1..6 {
                let d = diff(g.index(ix, iy), g.index(ix + 1, iy));
                for f in 0..6 {
                    assert!((d[f] - d0[f]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let err = build_grid(&model(), &[[1.0, 1.0], [1.0, 1.0]], 3, 3).unwrap_err();
        assert!(err.to_string().contains("degenerate bounding box"));
        assert!(build_grid(&model(), &[[0.0, 0.0], [1.0, 1.0]], 1, 3).is_err());
    }

    #[test]
    fn odd_refinement_nests_vertices() {
        let pts = [[-2.3, 0.7], [5.9, 3.1]];
        let coarse = build_grid(&model(), &pts, 3, 3).unwrap();
        let fine = build_grid(&model(), &pts, 5, 5).unwrap();
        for p in &coarse.points {
            assert!(fine.points.contains(p));
        }
    }

    #[test]
    fn step_size_grid_respects_spacing() {
        let g = build_grid_with_step(&model(), &[[0.0, 0.0], [10.0, 3.0]], 2.5).unwrap();
        assert_eq!(g.steps, [5, 3]);
        assert_eq!(g.len(), 15);
    }

    #[test]
    fn neighbors_at_corner_and_interior() {
        let g = build_grid(&model(), &[[0.0, 0.0], [1.0, 1.0]], 4, 3).unwrap();
        assert_eq!(g.neighbors(0), vec![1, 4, 5]);
        assert_eq!(g.neighbors(g.index(1, 1)).len(), 8);
    }
}
