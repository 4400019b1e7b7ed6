//! Ball coverage, per-user covered likelihood mass and population coverage.
//!
//! A preset covers every configuration within its Chebyshev ball of radius
//! `R`. A user's variations (prescription plus each transfer function) are
//! covered when any preset covers them; the user counts as covered when the
//! likelihood mass of covered variations reaches `gamma` for every one of
//! the user's fit types. Population coverage is the population weight of
//! covered users.

mod matrix;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_transfer, Configuration, Dataset, FitType, TransferFunctionBank, User};

pub use matrix::{incremental_pc, CoverageEvaluator, CoverageMatrix, VariationRef};

/// Slack applied when comparing covered mass against `gamma`, absorbing the
/// rounding of weight normalization (a fully covered user has mass
/// `1 - O(eps)`).
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Coordinate tolerance for treating two presets as the same configuration.
pub const DUPLICATE_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_RADIUS_DB: f64 = 5.0;
pub const DEFAULT_GAMMA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageParams {
    pub radius: f64,
    pub gamma: f64,
}

impl Default for CoverageParams {
    fn default() -> Self {
        CoverageParams {
            radius: DEFAULT_RADIUS_DB,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl CoverageParams {
    pub fn new(radius: f64, gamma: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::param(format!("radius must be positive, got {radius}")));
        }
        if !(gamma > MASS_TOLERANCE && gamma <= 1.0) {
            return Err(Error::param(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(CoverageParams { radius, gamma })
    }

    /// Threshold test shared by every evaluation path.
    #[inline]
    pub fn meets_threshold(&self, mass: f64) -> bool {
        mass >= self.gamma - MASS_TOLERANCE
    }
}

/// A set of distinct preset configurations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PresetSet {
    presets: Vec<Configuration>,
}

impl PresetSet {
    /// Keeps the first of any presets that agree within
    /// [`DUPLICATE_TOLERANCE`] on every band.
    pub fn new(presets: impl IntoIterator<Item = Configuration>) -> Self {
        let mut kept: Vec<Configuration> = Vec::new();
        for p in presets {
            if !kept.iter().any(|q| q.chebyshev(&p) <= DUPLICATE_TOLERANCE) {
                kept.push(p);
            }
        }
        PresetSet { presets: kept }
    }

    pub fn as_slice(&self) -> &[Configuration] {
        &self.presets
    }

    pub fn len(&self) -> usize {
        self.presets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presets.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Configuration> {
        self.presets.iter()
    }

    fn covers(&self, config: &Configuration, radius: f64) -> bool {
        self.presets.iter().any(|p| config.chebyshev(p) <= radius)
    }
}

impl FromIterator<Configuration> for PresetSet {
    fn from_iter<I: IntoIterator<Item = Configuration>>(iter: I) -> Self {
        PresetSet::new(iter)
    }
}

/// Whether some preset lies within Chebyshev distance `radius` (inclusive).
pub fn is_covered(config: &Configuration, presets: &PresetSet, radius: f64) -> Result<bool> {
    if presets.is_empty() {
        return Err(Error::param("preset set is empty"));
    }
    Ok(presets.covers(config, radius))
}

/// Likelihood mass of the user's variations for `fit` that the presets cover.
pub fn user_covered_mass(
    user: &User,
    fit: FitType,
    presets: &PresetSet,
    bank: &TransferFunctionBank,
    params: &CoverageParams,
) -> Result<f64> {
    let config = user.config(fit)?;
    Ok(covered_mass(config, presets, bank, params.radius))
}

fn covered_mass(
    config: &Configuration,
    presets: &PresetSet,
    bank: &TransferFunctionBank,
    radius: f64,
) -> f64 {
    let mut mass = 0.0;
    for (tf, w) in bank.functions().iter().zip(bank.weights()) {
        if presets.covers(&apply_transfer(config, tf), radius) {
            mass += w;
        }
    }
    mass
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserCoverage {
    pub id: String,
    pub covered: bool,
    pub mass: BTreeMap<FitType, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub population_coverage: f64,
    pub params: CoverageParams,
    pub per_user: Vec<UserCoverage>,
}

/// Builds the candidate coverage matrix; see [`CoverageMatrix::precompute`].
pub fn precompute_matrix(
    candidates: &[Configuration],
    dataset: &Dataset,
    bank: &TransferFunctionBank,
    params: &CoverageParams,
) -> Result<CoverageMatrix> {
    CoverageMatrix::precompute(candidates, dataset, bank, params)
}

impl CoverageReport {
    pub fn covered_users(&self) -> impl Iterator<Item = &UserCoverage> {
        self.per_user.iter().filter(|u| u.covered)
    }
}

/// Population coverage of a preset set. An empty set covers nobody.
///
/// Users are evaluated in parallel; the weight sum runs in dataset order so
/// the result does not depend on the thread count.
pub fn population_coverage(
    dataset: &Dataset,
    presets: &PresetSet,
    bank: &TransferFunctionBank,
    params: &CoverageParams,
) -> CoverageReport {
    let per_user: Vec<UserCoverage> = dataset
        .users()
        .par_iter()
        .map(|u| {
            let mass: BTreeMap<FitType, f64> = u
                .configs
                .iter()
                .map(|(fit, c)| (*fit, covered_mass(c, presets, bank, params.radius)))
                .collect();
            let covered = mass.values().all(|&m| params.meets_threshold(m));
            UserCoverage {
                id: u.id.clone(),
                covered,
                mass,
            }
        })
        .collect();
    let mut total = 0.0;
    for (u, cov) in dataset.users().iter().zip(&per_user) {
        if cov.covered {
            total += u.weight;
        }
    }
    CoverageReport {
        population_coverage: total,
        params: *params,
        per_user,
    }
}
