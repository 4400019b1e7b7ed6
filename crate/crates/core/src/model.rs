//! Gain configurations, users, transfer-function banks and the Gaussian
//! deviation-likelihood model that weights them.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Index;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of frequency bands in a configuration.
pub const BANDS: usize = 6;

/// Band centre frequencies in Hz, in schema order.
pub const FREQUENCIES_HZ: [f64; BANDS] = [500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0];

const LOW_ANCHOR_HZ: f64 = 500.0;
const HIGH_ANCHOR_HZ: f64 = 4000.0;

/// Default half-width of the anchor range in dB.
pub const DEFAULT_TF_RANGE_DB: f64 = 15.0;
/// Default anchor spacing in dB.
pub const DEFAULT_TF_STEP_DB: f64 = 3.75;

/// A gain-frequency response: six insertion gains in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "GainRecord", into = "GainRecord")]
pub struct Configuration {
    gains: [f64; BANDS],
}

impl Configuration {
    pub fn new(gains: [f64; BANDS]) -> Result<Self> {
        if let Some(i) = gains.iter().position(|g| !g.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite gain at {} Hz",
                FREQUENCIES_HZ[i]
            )));
        }
        Ok(Configuration { gains })
    }

    pub const fn zero() -> Self {
        Configuration { gains: [0.0; BANDS] }
    }

    #[inline]
    pub fn gains(&self) -> &[f64; BANDS] {
        &self.gains
    }

    /// Gain at a schema frequency; `None` for any other frequency.
    pub fn at_frequency(&self, hz: f64) -> Option<f64> {
        FREQUENCIES_HZ
            .iter()
            .position(|&f| f == hz)
            .map(|i| self.gains[i])
    }

    /// Maximum absolute per-band difference.
    #[inline]
    pub fn chebyshev(&self, other: &Configuration) -> f64 {
        self.gains
            .iter()
            .zip(&other.gains)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for Configuration {
    type Output = f64;

    fn index(&self, band: usize) -> &f64 {
        &self.gains[band]
    }
}

impl From<[f64; BANDS]> for Configuration {
    fn from(gains: [f64; BANDS]) -> Self {
        Configuration { gains }
    }
}

/// Wire form of a configuration: one named field per frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct GainRecord {
    g500: f64,
    g1000: f64,
    g2000: f64,
    g3000: f64,
    g4000: f64,
    g6000: f64,
}

impl From<GainRecord> for Configuration {
    fn from(r: GainRecord) -> Self {
        Configuration {
            gains: [r.g500, r.g1000, r.g2000, r.g3000, r.g4000, r.g6000],
        }
    }
}

impl From<Configuration> for GainRecord {
    fn from(c: Configuration) -> Self {
        let [g500, g1000, g2000, g3000, g4000, g6000] = c.gains;
        GainRecord {
            g500,
            g1000,
            g2000,
            g3000,
            g4000,
            g6000,
        }
    }
}

/// A log-linear deviation from a prescription, anchored at 500 Hz and 4 kHz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub anchor_low: f64,
    pub anchor_high: f64,
    pub values: [f64; BANDS],
}

impl TransferFunction {
    /// The line through `(500, low)` and `(4000, high)` on a log2-frequency
    /// axis, evaluated at each band (6 kHz is extrapolated).
    pub fn log_linear(anchor_low: f64, anchor_high: f64, frequencies: &[f64; BANDS]) -> Self {
        let span = (HIGH_ANCHOR_HZ / LOW_ANCHOR_HZ).log2();
        let mut values = [0.0; BANDS];
        for (v, &f) in values.iter_mut().zip(frequencies) {
            *v = if f == LOW_ANCHOR_HZ {
                anchor_low
            } else if f == HIGH_ANCHOR_HZ {
                anchor_high
            } else {
                anchor_low + (anchor_high - anchor_low) * ((f / LOW_ANCHOR_HZ).log2() / span)
            };
        }
        TransferFunction {
            anchor_low,
            anchor_high,
            values,
        }
    }

    /// A function given directly by its six band values.
    pub fn from_values(values: [f64; BANDS]) -> Self {
        TransferFunction {
            anchor_low: values[0],
            anchor_high: values[4],
            values,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Mean deviation over the low bands (500, 1000 Hz) and the high bands
    /// (2, 3, 4 kHz).
    pub fn deviation_features(&self) -> (f64, f64) {
        let v = &self.values;
        let low = (v[0] + v[1]) / 2.0;
        let high = (v[2] + v[3] + v[4]) / 3.0;
        (low, high)
    }
}

/// `config[f] + tf[f]` for every band.
pub fn apply_transfer(config: &Configuration, tf: &TransferFunction) -> Configuration {
    let mut gains = config.gains;
    for (g, v) in gains.iter_mut().zip(&tf.values) {
        *g += v;
    }
    Configuration { gains }
}

/// Ordered transfer functions with their normalized likelihood weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionBank {
    functions: Vec<TransferFunction>,
    weights: Vec<f64>,
}

impl TransferFunctionBank {
    /// Builds a bank from explicit functions and raw weights; weights are
    /// normalized to sum to one.
    pub fn from_parts(functions: Vec<TransferFunction>, weights: Vec<f64>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::param("transfer bank needs at least one function"));
        }
        if functions.len() != weights.len() {
            return Err(Error::param(format!(
                "{} functions but {} weights",
                functions.len(),
                weights.len()
            )));
        }
        let weights = normalize(&weights)?;
        Ok(TransferFunctionBank { functions, weights })
    }

    pub fn functions(&self) -> &[TransferFunction] {
        &self.functions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn identity_index(&self) -> Option<usize> {
        self.functions.iter().position(TransferFunction::is_identity)
    }

    /// Same functions, new raw weights (normalized).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        TransferFunctionBank::from_parts(self.functions.clone(), weights)
    }

    /// Reweights the bank under a Gaussian deviation model.
    pub fn reweighted(&self, model: &DeviationModel) -> Self {
        variation_weights(self, model)
    }
}

fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::param("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::param("weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// One transfer function per (low, high) anchor pair on the lattice
/// `{-range, -range + step, ..., range}`, with uniform placeholder weights.
///
/// Functions are ordered by low anchor, then high anchor.
pub fn build_transfer_bank(
    range_db: f64,
    step_db: f64,
    frequencies: &[f64; BANDS],
) -> Result<TransferFunctionBank> {
    if !(range_db.is_finite() && range_db > 0.0) {
        return Err(Error::param(format!("tf range must be positive, got {range_db}")));
    }
    if !(step_db.is_finite() && step_db > 0.0) {
        return Err(Error::param(format!("tf step must be positive, got {step_db}")));
    }
    let ratio = range_db / step_db;
    let half = ratio.round();
    if (ratio - half).abs() > 1e-9 || half < 1.0 {
        return Err(Error::param(format!(
            "tf range {range_db} is not an integer multiple of step {step_db}"
        )));
    }
    if frequencies.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::param("frequencies must be strictly increasing"));
    }
    for anchor in [LOW_ANCHOR_HZ, HIGH_ANCHOR_HZ] {
        if !frequencies.contains(&anchor) {
            return Err(Error::param(format!(
                "frequencies must include the {anchor} Hz anchor"
            )));
        }
    }

    let half = half as i64;
    let levels: Vec<f64> = (-half..=half).map(|i| i as f64 * step_db).collect();
    let mut functions = Vec::with_capacity(levels.len() * levels.len());
    for &low in &levels {
        for &high in &levels {
            functions.push(TransferFunction::log_linear(low, high, frequencies));
        }
    }
    let weights = vec![1.0 / functions.len() as f64; functions.len()];
    Ok(TransferFunctionBank { functions, weights })
}

/// Bank at the default ±15 dB range and 3.75 dB step (81 functions).
pub fn default_transfer_bank() -> TransferFunctionBank {
    build_transfer_bank(DEFAULT_TF_RANGE_DB, DEFAULT_TF_STEP_DB, &FREQUENCIES_HZ)
        .expect("default transfer bank parameters are valid")
}

/// An empirical (low, high) deviation measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    #[serde(rename = "low_dev")]
    pub low: f64,
    #[serde(rename = "high_dev")]
    pub high: f64,
}

impl DeviationPoint {
    pub fn new(low: f64, high: f64) -> Self {
        DeviationPoint { low, high }
    }
}

/// Axis-aligned 2D Gaussian over (low, high) deviation features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationModel {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub scale: f64,
}

impl DeviationModel {
    pub fn new(mean: [f64; 2], std: [f64; 2], scale: f64) -> Result<Self> {
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("deviation mean must be finite"));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param(format!(
                "deviation std must be strictly positive, got {std:?}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::param(format!("std scale must be positive, got {scale}")));
        }
        Ok(DeviationModel { mean, std, scale })
    }

    /// Model used when no empirical deviations are supplied.
    pub fn synthetic_default() -> Self {
        DeviationModel {
            mean: [0.0, 0.0],
            std: [5.0, 5.0],
            scale: 1.0,
        }
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        DeviationModel::new(self.mean, self.std, scale)
    }

    /// Squared Mahalanobis distance with the scaled diagonal covariance.
    pub fn mahalanobis_sq(&self, low: f64, high: f64) -> f64 {
        let zl = (low - self.mean[0]) / (self.scale * self.std[0]);
        let zh = (high - self.mean[1]) / (self.scale * self.std[1]);
        zl * zl + zh * zh
    }
}

/// Sample mean and sample (n - 1) standard deviation per coordinate.
pub fn fit_deviation_model(points: &[DeviationPoint]) -> Result<DeviationModel> {
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 deviation points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_low = points.iter().map(|p| p.low).sum::<f64>() / n;
    let mean_high = points.iter().map(|p| p.high).sum::<f64>() / n;
    let var_low = points.iter().map(|p| (p.low - mean_low).powi(2)).sum::<f64>() / (n - 1.0);
    let var_high = points.iter().map(|p| (p.high - mean_high).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var_low > 0.0 && var_high > 0.0) {
        return Err(Error::Fit(format!(
            "zero variance in deviation points (low {var_low}, high {var_high})"
        )));
    }
    DeviationModel::new([mean_low, mean_high], [var_low.sqrt(), var_high.sqrt()], 1.0)
        .map_err(|e| Error::Fit(e.to_string()))
}

/// Weights each function by the model density at its deviation features,
/// normalized over the bank.
pub fn variation_weights(bank: &TransferFunctionBank, model: &DeviationModel) -> TransferFunctionBank {
    let exponents: Vec<f64> = bank
        .functions
        .iter()
        .map(|tf| {
            let (low, high) = tf.deviation_features();
            -0.5 * model.mahalanobis_sq(low, high)
        })
        .collect();
    let peak = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = exponents.iter().map(|e| (e - peak).exp()).collect();
    let total: f64 = raw.iter().sum();
    TransferFunctionBank {
        functions: bank.functions.clone(),
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    Unilateral,
    Bilateral,
}

/// Ear/fitting combination of a prescription. Ordering is the evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitType {
    UniLeft,
    UniRight,
    BiLeft,
    BiRight,
}

impl FitType {
    pub const ALL: [FitType; 4] = [
        FitType::UniLeft,
        FitType::UniRight,
        FitType::BiLeft,
        FitType::BiRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FitType::UniLeft => "uni_left",
            FitType::UniRight => "uni_right",
            FitType::BiLeft => "bi_left",
            FitType::BiRight => "bi_right",
        }
    }

    pub fn is_unilateral(self) -> bool {
        matches!(self, FitType::UniLeft | FitType::UniRight)
    }
}

impl fmt::Display for FitType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FitType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FitType::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown fit_type {s:?}")))
    }
}

impl LossType {
    pub fn as_str(self) -> &'static str {
        match self {
            LossType::Unilateral => "unilateral",
            LossType::Bilateral => "bilateral",
        }
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unilateral" => Ok(LossType::Unilateral),
            "bilateral" => Ok(LossType::Bilateral),
            other => Err(Error::invalid(format!("unknown loss_type {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" => Ok(Sex::Male),
            "female" => Ok(Sex::Female),
            other => Err(Error::invalid(format!("unknown sex {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub weight: f64,
    pub loss_type: LossType,
    pub age: f64,
    pub sex: Sex,
    pub configs: BTreeMap<FitType, Configuration>,
}

impl User {
    /// Checks the loss-type / fit-type shape and the weight.
    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::invalid(format!(
                "user {}: weight must be finite and nonnegative, got {}",
                self.id, self.weight
            )));
        }
        match self.loss_type {
            LossType::Unilateral => {
                if self.configs.len() != 1 {
                    return Err(Error::invalid(format!(
                        "user {}: unilateral users need exactly 1 fit row, found {}",
                        self.id,
                        self.configs.len()
                    )));
                }
                if let Some(fit) = self.configs.keys().find(|f| !f.is_unilateral()) {
                    return Err(Error::invalid(format!(
                        "user {}: unilateral user cannot have fit_type {fit}",
                        self.id
                    )));
                }
            }
            LossType::Bilateral => {
                if self.configs.len() != 4 {
                    return Err(Error::invalid(format!(
                        "user {}: bilateral users need exactly 4 fit rows, found {}",
                        self.id,
                        self.configs.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self, fit: FitType) -> Result<&Configuration> {
        self.configs
            .get(&fit)
            .ok_or_else(|| Error::Lookup(format!("user {} has no {fit} prescription", self.id)))
    }
}

/// A population of users whose weights sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    users: Vec<User>,
}

impl Dataset {
    /// Validates every user and normalizes population weights.
    pub fn new(mut users: Vec<User>) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::invalid("dataset has no users"));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &users {
            u.validate()?;
            if !seen.insert(u.id.as_str()) {
                return Err(Error::invalid(format!("duplicate user id {}", u.id)));
            }
        }
        let total: f64 = users.iter().map(|u| u.weight).sum();
        if total <= 0.0 {
            return Err(Error::invalid("user weights sum to zero"));
        }
        if (total - 1.0).abs() > 1e-6 {
            log::warn!("raw user weights sum to {total}; normalizing");
        }
        for u in &mut users {
            u.weight /= total;
        }
        Ok(Dataset { users })
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Number of (user, fit type) prescriptions.
    pub fn prescription_count(&self) -> usize {
        self.users.iter().map(|u| u.configs.len()).sum()
    }

    /// Every prescription in evaluation order.
    pub fn prescriptions(&self) -> impl Iterator<Item = (&User, FitType, &Configuration)> + '_ {
        self.users
            .iter()
            .flat_map(|u| u.configs.iter().map(move |(f, c)| (u, *f, c)))
    }

    /// Number of preferred-configuration variations under a bank.
    pub fn variation_count(&self, bank: &TransferFunctionBank) -> usize {
        self.prescription_count() * bank.len()
    }

    /// Every variation with its mass `w_u * cl_j`, in evaluation order.
    pub fn variations<'a>(
        &'a self,
        bank: &'a TransferFunctionBank,
    ) -> impl Iterator<Item = (Configuration, f64)> + 'a {
        self.prescriptions().flat_map(move |(u, _, c)| {
            bank.functions()
                .iter()
                .zip(bank.weights())
                .map(move |(tf, w)| (apply_transfer(c, tf), u.weight * w))
        })
    }

    /// Users matching `keep`, with weights renormalized within the subset.
    pub fn subset(&self, keep: impl Fn(&User) -> bool) -> Result<Dataset> {
        let users: Vec<User> = self.users.iter().filter(|u| keep(u)).cloned().collect();
        if users.len() == self.users.len() {
            // already normalized; dividing by a sum that rounds off 1 would
            // perturb the weights
            return Ok(self.clone());
        }
        if users.is_empty() {
            return Err(Error::invalid("subset selects no users"));
        }
        Dataset::new(users)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tf(low: f64, high: f64) -> TransferFunction {
        TransferFunction::log_linear(low, high, &FREQUENCIES_HZ)
    }

    #[test]
    fn default_bank_has_81_functions_and_one_identity() {
        let bank = default_transfer_bank();
        assert_eq!(bank.len(), 81);
        assert_eq!(bank.functions().iter().filter(|t| t.is_identity()).count(), 1);
        let sum: f64 = bank.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bank_count_follows_lattice_size() {
        let bank = build_transfer_bank(10.0, 5.0, &FREQUENCIES_HZ).unwrap();
        assert_eq!(bank.len(), 25);
    }

    #[test]
    fn bank_rejects_non_divisible_range() {
        assert!(matches!(
            build_transfer_bank(15.0, 4.0, &FREQUENCIES_HZ),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bank_rejects_missing_anchor_frequency() {
        let freqs = [250.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0];
        assert!(matches!(build_transfer_bank(15.0, 3.75, &freqs), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_anchors_give_zero_values() {
        assert_eq!(tf(0.0, 0.0).values, [0.0; 6]);
    }

    #[test]
    fn interpolated_value_at_2k() {
        // -15 + 30 * log2(4) / log2(8)
        let t = tf(-15.0, 15.0);
        assert!((t.values[2] - 5.0).abs() < 1e-12);
        assert!((t.values[1] + 5.0).abs() < 1e-12);
        assert_eq!(t.values[0], -15.0);
        assert_eq!(t.values[4], 15.0);
    }

    #[test]
    fn apply_transfer_examples() {
        let c = Configuration::new([20.0, 25.0, 30.0, 35.0, 40.0, 45.0]).unwrap();
        assert_eq!(apply_transfer(&c, &tf(0.0, 0.0)), c);
        let t = tf(-15.0, 15.0);
        assert_eq!(apply_transfer(&Configuration::zero(), &t).gains(), &t.values);
        let flat = apply_transfer(&c, &tf(3.75, 3.75));
        assert_eq!(flat.gains(), &[23.75, 28.75, 33.75, 38.75, 43.75, 48.75]);
    }

    #[test]
    fn deviation_feature_examples() {
        assert_eq!(tf(0.0, 0.0).deviation_features(), (0.0, 0.0));
        assert_eq!(tf(7.5, 7.5).deviation_features(), (7.5, 7.5));
        let (low, high) = tf(-15.0, 15.0).deviation_features();
        assert!((low + 10.0).abs() < 1e-12);
        let expected_high = (5.0 + (30.0 * 6f64.log2() / 3.0 - 15.0) + 15.0) / 3.0;
        assert!((high - expected_high).abs() < 1e-12);
    }

    #[test]
    fn fit_two_points() {
        let m = fit_deviation_model(&[DeviationPoint::new(0.0, 0.0), DeviationPoint::new(2.0, 2.0)])
            .unwrap();
        assert_eq!(m.mean, [1.0, 1.0]);
        assert!((m.std[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((m.std[1] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.scale, 1.0);
    }

    #[test]
    fn fit_symmetric_cross() {
        let pts: Vec<_> = [(-4.0, 0.0), (0.0, 0.0), (4.0, 0.0), (0.0, -4.0), (0.0, 4.0), (0.0, 0.0)]
            .into_iter()
            .map(|(l, h)| DeviationPoint::new(l, h))
            .collect();
        let m = fit_deviation_model(&pts).unwrap();
        assert_eq!(m.mean, [0.0, 0.0]);
        // 32 / 5 per coordinate
        assert!((m.std[0] - 6.4f64.sqrt()).abs() < 1e-12);
        assert!((m.std[1] - 6.4f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_points() {
        let same = vec![DeviationPoint::new(1.0, 1.0); 5];
        assert!(matches!(fit_deviation_model(&same), Err(Error::Fit(_))));
        assert!(matches!(
            fit_deviation_model(&[DeviationPoint::new(1.0, 2.0)]),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn identity_gets_largest_weight_at_zero_mean() {
        let bank = default_transfer_bank().reweighted(&DeviationModel::synthetic_default());
        let id = bank.identity_index().unwrap();
        let w = bank.weights();
        assert!(w.iter().enumerate().all(|(j, &x)| j == id || x < w[id]));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn narrower_model_concentrates_identity_weight() {
        let bank = default_transfer_bank();
        let base = DeviationModel::synthetic_default();
        let id = bank.identity_index().unwrap();
        let narrow = bank.reweighted(&base.with_scale(0.5).unwrap()).weights()[id];
        let wide = bank.reweighted(&base).weights()[id];
        assert!(narrow >= wide);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(DeviationModel::new([0.0, 0.0], [0.0, 1.0], 1.0).is_err());
        assert!(DeviationModel::new([0.0, 0.0], [1.0, 1.0], 0.0).is_err());
    }

    fn user(id: &str, loss: LossType, fits: &[FitType]) -> User {
        User {
            id: id.into(),
            weight: 1.0,
            loss_type: loss,
            age: 60.0,
            sex: Sex::Female,
            configs: fits.iter().map(|f| (*f, Configuration::zero())).collect(),
        }
    }

    #[test]
    fn dataset_normalizes_weights() {
        let mut u = user("a", LossType::Unilateral, &[FitType::UniLeft]);
        u.weight = 3.0;
        let ds = Dataset::new(vec![u]).unwrap();
        assert_eq!(ds.users()[0].weight, 1.0);
    }

    #[test]
    fn user_shape_is_enforced() {
        let bad = user("b", LossType::Bilateral, &[FitType::UniLeft, FitType::UniRight, FitType::BiLeft]);
        let err = Dataset::new(vec![bad]).unwrap_err().to_string();
        assert!(err.contains("user b"), "{err}");
        let bad = user("c", LossType::Unilateral, &[FitType::BiLeft]);
        assert!(Dataset::new(vec![bad]).is_err());
    }

    #[test]
    fn missing_fit_type_is_lookup_error() {
        let u = user("a", LossType::Unilateral, &[FitType::UniLeft]);
        assert!(matches!(u.config(FitType::BiLeft), Err(Error::Lookup(_))));
    }

    proptest! {
        #[test]
        fn transfer_functions_are_log_linear(i in 0usize..81, a in 0usize..6, b in 0usize..6, c in 0usize..6) {
            let bank = default_transfer_bank();
            let t = &bank.functions()[i];
            let mut idx = [a, b, c];
            idx.sort();
            prop_assume!(idx[0] < idx[1] && idx[1] < idx[2]);
            let x: Vec<f64> = idx.iter().map(|&k| FREQUENCIES_HZ[k].log2()).collect();
            let y: Vec<f64> = idx.iter().map(|&k| t.values[k]).collect();
            let interp = y[0] + (y[2] - y[0]) * (x[1] - x[0]) / (x[2] - x[0]);
            prop_assert!((interp - y[1]).abs() < 1e-9);
        }

        #[test]
        fn apply_transfer_is_additive(g in proptest::array::uniform6(-20.0f64..80.0), i in 0usize..81) {
            let bank = default_transfer_bank();
            let c = Configuration::new(g).unwrap();
            let t = &bank.functions()[i];
            let out = apply_transfer(&c, t);
            for k in 0..BANDS {
                prop_assert!((out[k] - c[k] - t.values[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn min_distance_weight_non_increasing_in_scale(
            ml in -10.0f64..10.0, mh in -10.0f64..10.0, sl in 1.0f64..8.0, sh in 1.0f64..8.0
        ) {
            let bank = default_transfer_bank();
            let base = DeviationModel::new([ml, mh], [sl, sh], 1.0).unwrap();
            let closest = (0..bank.len())
                .min_by(|&a, &b| {
                    let (la, ha) = bank.functions()[a].deviation_features();
                    let (lb, hb) = bank.functions()[b].deviation_features();
                    base.mahalanobis_sq(la, ha).total_cmp(&base.mahalanobis_sq(lb, hb))
                })
                .unwrap();
            let w: Vec<f64> = [0.5, 1.0, 1.5]
                .iter()
                .map(|&s| bank.reweighted(&base.with_scale(s).unwrap()).weights()[closest])
                .collect();
            prop_assert!(w[0] >= w[1] - 1e-15 && w[1] >= w[2] - 1e-15);
        }

        #[test]
        fn weights_are_permutation_equivariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let bank = default_transfer_bank();
            let mut order: Vec<usize> = (0..bank.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = TransferFunctionBank::from_parts(
                order.iter().map(|&i| bank.functions()[i]).collect(),
                vec![1.0; bank.len()],
            ).unwrap();
            let model = DeviationModel::new([1.0, -2.0], [4.0, 6.0], 1.0).unwrap();
            let a = bank.reweighted(&model);
            let b = shuffled.reweighted(&model);
            for (pos, &i) in order.iter().enumerate() {
                prop_assert!((a.weights()[i] - b.weights()[pos]).abs() < 1e-15);
            }
        }
    }
}
