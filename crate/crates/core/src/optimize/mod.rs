//! Preset selection over a candidate grid.

mod brute;
mod ga;
mod greedy;
mod kmeans;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMatrix, CoverageParams, PresetSet};
use crate::error::{Error, Result};
use crate::model::{Dataset, TransferFunctionBank};
use crate::reduce::CandidateGrid;

pub use brute::{brute_force_select, combination_count, DEFAULT_COMBINATION_LIMIT};
pub use ga::{ga_select, GaParams};
pub use greedy::{greedy_select, greedy_select_with, GreedyScore};
pub use kmeans::{kmeans_presets, kmeans_select, KMeansOutcome, KMEANS_MAX_ITERATIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Ga,
    Kmeans,
    Brute,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Ga => "ga",
            Method::Kmeans => "kmeans",
            Method::Brute => "brute",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" => Ok(Method::Greedy),
            "ga" => Ok(Method::Ga),
            "kmeans" => Ok(Method::Kmeans),
            "brute" => Ok(Method::Brute),
            other => Err(Error::param(format!("unknown method {other:?}"))),
        }
    }
}

/// Outcome of a preset-selection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: Option<u64>,
    pub coverage: f64,
    /// Grid indices of the chosen presets; empty for off-grid methods.
    #[serde(rename = "preset_indices")]
    pub indices: Vec<usize>,
    pub presets: PresetSet,
    /// Best fitness after each iteration or greedy step.
    pub trace: Vec<f64>,
}

/// A dataset, bank and candidate grid with the grid's coverage matrix.
pub struct CoverageProblem<'a> {
    pub grid: &'a CandidateGrid,
    pub dataset: &'a Dataset,
    pub bank: &'a TransferFunctionBank,
    pub params: CoverageParams,
    matrix: CoverageMatrix,
}

impl<'a> CoverageProblem<'a> {
    pub fn new(
        grid: &'a CandidateGrid,
        dataset: &'a Dataset,
        bank: &'a TransferFunctionBank,
        params: CoverageParams,
    ) -> Result<Self> {
        let matrix = CoverageMatrix::precompute(&grid.lifted, dataset, bank, &params)?;
        Ok(CoverageProblem {
            grid,
            dataset,
            bank,
            params,
            matrix,
        })
    }

    /// Same grid and dataset under a reweighted bank with identical functions.
    pub fn reweighted<'b>(&'b self, bank: &'b TransferFunctionBank) -> Result<CoverageProblem<'b>> {
        Ok(CoverageProblem {
            grid: self.grid,
            dataset: self.dataset,
            bank,
            params: self.params,
            matrix: self.matrix.reweighted(bank)?,
        })
    }

    pub fn matrix(&self) -> &CoverageMatrix {
        &self.matrix
    }

    pub fn n_candidates(&self) -> usize {
        self.matrix.n_candidates()
    }

    /// Population coverage of a candidate subset.
    pub fn coverage_of(&self, indices: &[usize]) -> f64 {
        self.matrix.evaluator().coverage(indices, &self.params)
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::param("preset count must be at least 1"));
        }
        if n > self.n_candidates() {
            return Err(Error::param(format!(
                "requested {n} presets from a grid of {} candidates",
                self.n_candidates()
            )));
        }
        Ok(())
    }

    fn result(&self, method: Method, seed: Option<u64>, mut indices: Vec<usize>, trace: Vec<f64>) -> SelectionResult {
        let coverage = self.coverage_of(&indices);
        let n = indices.len();
        if method != Method::Greedy {
            indices.sort_unstable();
        }
        SelectionResult {
            method,
            n,
            seed,
            coverage,
            presets: PresetSet::new(indices.iter().map(|&i| self.grid.lifted[i])),
            indices,
            trace,
        }
    }
}

/// Runs one of the grid-based methods, or k-means over all variations.
pub fn select(
    problem: &CoverageProblem<'_>,
    method: Method,
    n: usize,
    seed: u64,
    ga: &GaParams,
) -> Result<SelectionResult> {
    match method {
        Method::Greedy => greedy_select(problem, n),
        Method::Ga => ga_select(problem, n, &GaParams { seed, ..ga.clone() }),
        Method::Kmeans => kmeans_select(problem.dataset, problem.bank, &problem.params, n, seed),
        Method::Brute => brute_force_select(problem, n, DEFAULT_COMBINATION_LIMIT),
    }
}
