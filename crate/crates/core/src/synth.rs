//! Seeded synthetic populations standing in for surveyed prescriptions.
//!
//! Each user's base prescription is a profile mean shifted along two latent
//! directions (a flat loudness offset and a log-frequency tilt), plus
//! isotropic noise. With in-plane profiles and small noise the population
//! lies close to a 2D affine subspace, so two principal components carry
//! most of the variance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Configuration, Dataset, DeviationModel, DeviationPoint, FitType, LossType, Sex, User, BANDS,
    FREQUENCIES_HZ,
};

/// Flat loudness direction (dB per unit).
pub const LOUDNESS: [f64; BANDS] = [1.0; BANDS];

/// Spectral tilt direction: `log2(f / 1000)` per band.
pub fn tilt_direction() -> [f64; BANDS] {
    FREQUENCIES_HZ.map(|f| (f / 1000.0).log2())
}

const BASE_PROFILE: [f64; BANDS] = [8.0, 12.0, 20.0, 24.0, 26.0, 24.0];

fn in_plane(loud: f64, tilt: f64) -> [f64; BANDS] {
    let t = tilt_direction();
    std::array::from_fn(|f| BASE_PROFILE[f] + loud * LOUDNESS[f] + tilt * t[f])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub bilateral_fraction: f64,
    /// Per-frequency mean gains of the mixture components.
    pub profiles: Vec<[f64; BANDS]>,
    pub loudness_std: f64,
    pub tilt_std: f64,
    /// Isotropic per-band noise added to every prescription.
    pub noise_std: f64,
    /// Loudness difference between a bilateral user's ears.
    pub ear_std: f64,
    /// Gain reduction of bilateral fittings relative to unilateral ones.
    pub bilateral_offset_db: f64,
    /// Gamma shape of the raw population weights; large values approach
    /// equal weights.
    pub weight_concentration: f64,
    pub male_fraction: f64,
    pub age_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 200,
            bilateral_fraction: 0.5,
            profiles: vec![in_plane(0.0, 0.0), in_plane(10.0, 3.0), in_plane(-4.0, 6.0)],
            loudness_std: 6.0,
            tilt_std: 2.5,
            noise_std: 0.5,
            ear_std: 2.0,
            bilateral_offset_db: 2.0,
            weight_concentration: 4.0,
            male_fraction: 0.5,
            age_range: [20.0, 85.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::param("n_users must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.bilateral_fraction) {
            return Err(Error::param("bilateral_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return Err(Error::param("male_fraction must lie in [0, 1]"));
        }
        if self.profiles.is_empty() {
            return Err(Error::param("at least one base profile is required"));
        }
        if self.profiles.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::param("profile gains must be finite"));
        }
        for (name, s) in [
            ("loudness_std", self.loudness_std),
            ("tilt_std", self.tilt_std),
            ("noise_std", self.noise_std),
            ("ear_std", self.ear_std),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.weight_concentration.is_finite() && self.weight_concentration > 0.0) {
            return Err(Error::param("weight_concentration must be positive"));
        }
        if !(self.age_range[0] <= self.age_range[1]) {
            return Err(Error::param("age_range must be ordered"));
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated as finite and nonnegative")
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let loud = normal(spec.loudness_std);
    let tilt = normal(spec.tilt_std);
    let noise = normal(spec.noise_std);
    let ear = normal(spec.ear_std);
    let weight = Gamma::new(spec.weight_concentration, 1.0)
        .map_err(|e| Error::param(format!("weight_concentration: {e}")))?;
    let tilt_dir = tilt_direction();

    let mut users = Vec::with_capacity(spec.n_users);
    for i in 0..spec.n_users {
        let profile = &spec.profiles[rng.random_range(0..spec.profiles.len())];
        let a = loud.sample(&mut rng);
        let b = tilt.sample(&mut rng);
        let base: [f64; BANDS] = std::array::from_fn(|f| profile[f] + a * LOUDNESS[f] + b * tilt_dir[f]);
        let prescription = |shift: f64, rng: &mut ChaCha8Rng| -> Result<Configuration> {
            Configuration::new(std::array::from_fn(|f| base[f] + shift * LOUDNESS[f] + noise.sample(rng)))
        };

        let bilateral = rng.random_bool(spec.bilateral_fraction);
        let mut configs = BTreeMap::new();
        if bilateral {
            let left = ear.sample(&mut rng);
            let right = ear.sample(&mut rng);
            configs.insert(FitType::UniLeft, prescription(left, &mut rng)?);
            configs.insert(FitType::UniRight, prescription(right, &mut rng)?);
            configs.insert(FitType::BiLeft, prescription(left - spec.bilateral_offset_db, &mut rng)?);
            configs.insert(FitType::BiRight, prescription(right - spec.bilateral_offset_db, &mut rng)?);
        } else {
            let fit = if rng.random_bool(0.5) { FitType::UniLeft } else { FitType::UniRight };
            configs.insert(fit, prescription(0.0, &mut rng)?);
        }

        let age = rng.random_range(spec.age_range[0]..=spec.age_range[1]).round();
        let sex = if rng.random_bool(spec.male_fraction) { Sex::Male } else { Sex::Female };
        users.push(User {
            id: format!("u{i:05}"),
            weight: weight.sample(&mut rng),
            loss_type: if bilateral { LossType::Bilateral } else { LossType::Unilateral },
            age,
            sex,
            configs,
        });
    }
    let total: f64 = users.iter().map(|u| u.weight).sum();
    for u in &mut users {
        u.weight /= total;
    }
    Dataset::new(users)
}

/// Draws `n` deviation measurements from the model's (unscaled) Gaussian.
pub fn synth_deviations(model: &DeviationModel, n: usize, seed: u64) -> Vec<DeviationPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = Normal::new(model.mean[0], model.std[0]).expect("model std is positive");
    let high = Normal::new(model.mean[1], model.std[1]).expect("model std is positive");
    (0..n)
        .map(|_| {
            let l = low.sample(&mut rng);
            DeviationPoint::new(l, high.sample(&mut rng))
        })
        .collect()
}
