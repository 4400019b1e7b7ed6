use rayon::prelude::*;

use super::{CoverageProblem, Method, SelectionResult};
use crate::error::Result;

/// Score used to rank candidates at each greedy step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GreedyScore {
    /// Population coverage of the set with the candidate added. Equal
    /// coverage (including the all-zero plateau before any user reaches the
    /// threshold) is broken by newly covered variation mass, then by index.
    #[default]
    Exact,
    /// Newly covered variation mass `Σ w_u cl_j` only, ignoring the user
    /// threshold.
    CoveredMass,
}

/// Greedy selection with exact marginal coverage.
pub fn greedy_select(problem: &CoverageProblem<'_>, n: usize) -> Result<SelectionResult> {
    greedy_select_with(problem, n, GreedyScore::Exact)
}

pub fn greedy_select_with(
    problem: &CoverageProblem<'_>,
    n: usize,
    score: GreedyScore,
) -> Result<SelectionResult> {
    problem.check_n(n)?;
    let matrix = problem.matrix();
    let params = problem.params;
    let g = problem.n_candidates();

    let mut chosen = vec![false; g];
    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut union = matrix.empty_union();
    let mut trace = Vec::with_capacity(n);

    for _ in 0..n {
        let scores: Vec<Option<(f64, f64)>> = (0..g)
            .into_par_iter()
            .map_init(
                || (matrix.evaluator(), Vec::with_capacity(n)),
                |(eval, trial), k| {
                    if chosen[k] {
                        return None;
                    }
                    let fresh = matrix.uncovered_mass(k, &union);
                    let pc = match score {
                        GreedyScore::Exact => {
                            trial.clear();
                            trial.extend_from_slice(&selected);
                            trial.push(k);
                            eval.coverage(trial, &params)
                        }
                        GreedyScore::CoveredMass => 0.0,
                    };
                    Some((pc, fresh))
                },
            )
            .collect();

        let mut best: Option<(usize, (f64, f64))> = None;
        for (k, s) in scores.iter().enumerate() {
            let Some(s) = *s else { continue };
            let better = match best {
                None => true,
                Some((_, b)) => s.0 > b.0 || (s.0 == b.0 && s.1 > b.1),
            };
            if better {
                best = Some((k, s));
            }
        }
        let (k, _) = best.expect("n <= candidate count leaves an unchosen candidate");
        chosen[k] = true;
        selected.push(k);
        matrix.add_to_union(k, &mut union);
        trace.push(problem.coverage_of(&selected));
    }

    Ok(problem.result(Method::Greedy, None, selected, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{population_coverage, CoverageParams, PresetSet};
    use crate::model::{Configuration, Dataset, FitType, LossType, Sex, TransferFunction, TransferFunctionBank, User};
    use crate::reduce::CandidateGrid;

    fn unilateral(id: &str, weight: f64, gain: f64) -> User {
        User {
            id: id.into(),
            weight,
            loss_type: LossType::Unilateral,
            age: 40.0,
            sex: Sex::Female,
            configs: [(FitType::UniLeft, Configuration::from([gain; 6]))].into_iter().collect(),
        }
    }

    /// A grid whose lifted candidates are given directly.
    fn grid_of(gains: &[f64]) -> CandidateGrid {
        CandidateGrid {
            min: [0.0, 0.0],
            max: [gains.len() as f64 - 1.0, 0.0],
            steps: [gains.len(), 1],
            points: (0..gains.len()).map(|i| [i as f64, 0.0]).collect(),
            lifted: gains.iter().map(|&g| Configuration::from([g; 6])).collect(),
        }
    }

    fn identity_bank() -> TransferFunctionBank {
        TransferFunctionBank::from_parts(vec![TransferFunction::from_values([0.0; 6])], vec![1.0]).unwrap()
    }

    #[test]
    fn picks_the_heaviest_user_first() {
        let ds = Dataset::new(vec![
            unilateral("light1", 0.05, 0.0),
            unilateral("heavy", 0.9, 50.0),
            unilateral("light2", 0.05, 100.0),
        ])
        .unwrap();
        let grid = grid_of(&[0.0, 50.0, 100.0]);
        let bank = identity_bank();
        let problem = CoverageProblem::new(&grid, &ds, &bank, CoverageParams::default()).unwrap();
        let r = greedy_select(&problem, 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.coverage - 0.9).abs() < 1e-12);
    }

    #[test]
    fn full_selection_and_prefix_property() {
        let ds = Dataset::new((0..6).map(|i| unilateral(&format!("u{i}"), 1.0 + i as f64, i as f64 * 7.0)).collect())
            .unwrap();
        let grid = grid_of(&[0.0, 9.0, 14.0, 21.0, 30.0]);
        let bank = identity_bank();
        let params = CoverageParams::default();
        let problem = CoverageProblem::new(&grid, &ds, &bank, params).unwrap();
        let all = greedy_select(&problem, 5).unwrap();
        let direct = population_coverage(&ds, &PresetSet::new(grid.lifted.clone()), &bank, &params);
        assert_eq!(all.coverage, direct.population_coverage);
        let mut last = 0.0;
        for n in 1..=5 {
            let r = greedy_select(&problem, n).unwrap();
            assert!(r.coverage >= last);
            assert_eq!(r.indices[..], all.indices[..n]);
            last = r.coverage;
        }
        assert!(greedy_select(&problem, 6).is_err());
        assert!(greedy_select(&problem, 0).is_err());
    }

    #[test]
    fn threshold_plateau_uses_covered_mass() {
        // two transfer functions of weight 1/2 each: one preset alone never
        // reaches gamma, so the first step is decided by covered mass
        let bank = TransferFunctionBank::from_parts(
            vec![TransferFunction::from_values([0.0; 6]), TransferFunction::from_values([20.0; 6])],
            vec![1.0, 1.0],
        )
        .unwrap();
        let ds = Dataset::new(vec![unilateral("a", 0.2, 0.0), unilateral("b", 0.8, 100.0)]).unwrap();
        let grid = grid_of(&[0.0, 20.0, 100.0, 120.0]);
        let problem = CoverageProblem::new(&grid, &ds, &bank, CoverageParams::default()).unwrap();
        let r = greedy_select(&problem, 2).unwrap();
        assert_eq!(r.indices, vec![2, 3]);
        assert!((r.coverage - 0.8).abs() < 1e-12);
        let shortcut = greedy_select_with(&problem, 2, GreedyScore::CoveredMass).unwrap();
        assert_eq!(shortcut.indices, vec![2, 3]);
    }
}
