//! Two-slider interfaces: every slider position maps to one vertex of a
//! closed grid over the bounding box, and the reachable vertices form the
//! preset set.

use serde::{Deserialize, Serialize};

use crate::coverage::{population_coverage, CoverageParams, CoverageReport, PresetSet};
use crate::error::{Error, Result};
use crate::model::{Configuration, Dataset, TransferFunctionBank};
use crate::reduce::{build_grid, source_points, BoundingBoxSource, CandidateGrid, PcaModel};

pub const MAX_SLIDER_STEPS: usize = 200;

/// Vertex counts per slider axis (a slider with `steps` positions reaches
/// both ends of its axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliderSpec {
    pub steps_x: usize,
    pub steps_y: usize,
    pub bbox_source: BoundingBoxSource,
}

impl SliderSpec {
    pub fn new(steps_x: usize, steps_y: usize, bbox_source: BoundingBoxSource) -> Result<Self> {
        for (axis, s) in [("x", steps_x), ("y", steps_y)] {
            if !(2..=MAX_SLIDER_STEPS).contains(&s) {
                return Err(Error::param(format!(
                    "{axis} slider steps must be in 2..={MAX_SLIDER_STEPS}, got {s}"
                )));
            }
        }
        Ok(SliderSpec {
            steps_x,
            steps_y,
            bbox_source,
        })
    }
}

/// Controller grid over the bounding box of the `SliderSpec` source set.
pub fn slider_grid(
    model: &PcaModel,
    spec: &SliderSpec,
    dataset: &Dataset,
    bank: &TransferFunctionBank,
) -> Result<CandidateGrid> {
    let pts = source_points(model, dataset, bank, spec.bbox_source)?;
    build_grid(model, &pts, spec.steps_x, spec.steps_y)
}

pub fn slider_presets(
    model: &PcaModel,
    spec: &SliderSpec,
    dataset: &Dataset,
    bank: &TransferFunctionBank,
) -> Result<PresetSet> {
    Ok(PresetSet::new(slider_grid(model, spec, dataset, bank)?.lifted))
}

/// Configuration at controller position `(x, y)`; `(0, 0)` is the box
/// corner with the smallest coordinates on both axes.
pub fn position_to_config(grid: &CandidateGrid, x: usize, y: usize) -> Result<Configuration> {
    if x >= grid.steps[0] || y >= grid.steps[1] {
        return Err(Error::param(format!(
            "slider position ({x}, {y}) outside {}x{} grid",
            grid.steps[0], grid.steps[1]
        )));
    }
    Ok(grid.lifted[grid.index(x, y)])
}

pub fn slider_coverage(
    dataset: &Dataset,
    bank: &TransferFunctionBank,
    params: &CoverageParams,
    model: &PcaModel,
    spec: &SliderSpec,
) -> Result<CoverageReport> {
    let presets = slider_presets(model, spec, dataset, bank)?;
    Ok(population_coverage(dataset, &presets, bank, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_transfer_bank, DeviationModel};
    use crate::reduce::fit_pca;
    use crate::synth::{synth_dataset, SynthSpec};

    fn fixture() -> (Dataset, TransferFunctionBank, PcaModel) {
        let ds = synth_dataset(&SynthSpec {
            n_users: 40,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let bank = default_transfer_bank()
            .reweighted(&DeviationModel::new([0.0, 0.0], [2.0, 2.0], 1.0).unwrap());
        let configs: Vec<_> = ds.prescriptions().map(|(_, _, c)| *c).collect();
        let model = fit_pca(&configs, 2).unwrap();
        (ds, bank, model)
    }

    #[test]
    fn spec_bounds() {
        assert!(SliderSpec::new(1, 5, BoundingBoxSource::Variations).is_err());
        assert!(SliderSpec::new(5, 201, BoundingBoxSource::Variations).is_err());
        assert!(SliderSpec::new(2, 200, BoundingBoxSource::Prescriptions).is_ok());
    }

    #[test]
    fn corners_and_origin() {
        let (ds, bank, model) = fixture();
        let spec = SliderSpec::new(2, 2, BoundingBoxSource::Variations).unwrap();
        let grid = slider_grid(&model, &spec, &ds, &bank).unwrap();
        assert_eq!(slider_presets(&model, &spec, &ds, &bank).unwrap().len(), 4);
        let origin = position_to_config(&grid, 0, 0).unwrap();
        assert_eq!(origin, model.inverse_transform(&grid.min).unwrap());
        assert!(position_to_config(&grid, 2, 0).is_err());
    }

    #[test]
    fn interior_preset_is_affine_in_position() {
        let (ds, bank, model) = fixture();
        let spec = SliderSpec::new(10, 10, BoundingBoxSource::Prescriptions).unwrap();
        let grid = slider_grid(&model, &spec, &ds, &bank).unwrap();
        assert_eq!(grid.len(), 100);
        let (i, j) = (3, 7);
        let p = [
            grid.min[0] + (grid.max[0] - grid.min[0]) * i as f64 / 9.0,
            grid.min[1] + (grid.max[1] - grid.min[1]) * j as f64 / 9.0,
        ];
        let expect = model.inverse_transform(&p).unwrap();
        assert!(position_to_config(&grid, i, j).unwrap().chebyshev(&expect) < 1e-9);
        // distinct positions give distinct presets
        let presets = PresetSet::new(grid.lifted.clone());
        assert_eq!(presets.len(), 100);
    }

    #[test]
    fn coverage_matches_direct_evaluation_and_refines_monotonically() {
        let (ds, bank, model) = fixture();
        let params = CoverageParams::default();
        let coarse = SliderSpec::new(3, 3, BoundingBoxSource::Variations).unwrap();
        let fine = SliderSpec::new(5, 5, BoundingBoxSource::Variations).unwrap();
        let rc = slider_coverage(&ds, &bank, &params, &model, &coarse).unwrap();
        let direct = population_coverage(&ds, &slider_presets(&model, &coarse, &ds, &bank).unwrap(), &bank, &params);
        assert_eq!(rc, direct);
        let rf = slider_coverage(&ds, &bank, &params, &model, &fine).unwrap();
        assert!(rf.population_coverage >= rc.population_coverage);
    }
}
