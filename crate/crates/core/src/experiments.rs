//! Experiment harness: method/N sweeps, subgroup comparisons, bootstrap
//! over the deviation evidence, variance scaling and plot-data emission.
//!
//! Every coverage value written out is recomputed with
//! [`population_coverage`] from the selected presets and the raw inputs.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{population_coverage, CoverageParams, PresetSet};
use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::model::{
    apply_transfer, build_transfer_bank, fit_deviation_model, Dataset, DeviationModel, DeviationPoint,
    LossType, Sex, TransferFunctionBank, User, DEFAULT_TF_RANGE_DB, DEFAULT_TF_STEP_DB, FREQUENCIES_HZ,
};
use crate::optimize::{greedy_select, select, CoverageProblem, GaParams, Method};
use crate::reduce::{build_grid, fit_pca, source_points, BoundingBoxSource, CandidateGrid, PcaModel};
use crate::synth::{synth_dataset, synth_deviations, SynthSpec};

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 50;
pub const DEFAULT_SCALES: [f64; 3] = [0.5, 1.0, 1.5];

fn revalidate(problem: &CoverageProblem<'_>, presets: &PresetSet) -> f64 {
    population_coverage(problem.dataset, presets, problem.bank, &problem.params).population_coverage
}

fn check_ns(ns: &[usize]) -> Result<()> {
    if ns.is_empty() {
        return Err(Error::param("at least one preset count is required"));
    }
    if ns.contains(&0) {
        return Err(Error::param("preset count must be at least 1"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub coverage: f64,
    /// Seconds spent in the optimizer.
    pub wall_time: f64,
    pub seed: Option<u64>,
    pub presets: PresetSet,
}

fn seeded(method: Method) -> bool {
    matches!(method, Method::Ga | Method::Kmeans)
}

/// One row per (method, N, seed); greedy and brute force ignore the seed and
/// get a single row per N. Rows come back sorted by method, N, seed.
pub fn sweep(
    problem: &CoverageProblem<'_>,
    ns: &[usize],
    methods: &[Method],
    seeds: &[u64],
    ga: &GaParams,
) -> Result<Vec<SweepRow>> {
    if methods.is_empty() {
        return Err(Error::param("sweep needs at least one method"));
    }
    if seeds.is_empty() {
        return Err(Error::param("sweep needs at least one seed"));
    }
    check_ns(ns)?;
    let mut jobs: Vec<(Method, usize, Option<u64>)> = Vec::new();
    for &m in methods {
        for &n in ns {
            if seeded(m) {
                jobs.extend(seeds.iter().map(|&s| (m, n, Some(s))));
            } else {
                jobs.push((m, n, None));
            }
        }
    }
    jobs.sort_by(|a, b| a.cmp(b));
    jobs.dedup();

    let mut rows = Vec::with_capacity(jobs.len());
    for (method, n, seed) in jobs {
        let start = Instant::now();
        let sel = select(problem, method, n, seed.unwrap_or(0), ga)?;
        let wall_time = start.elapsed().as_secs_f64();
        let coverage = revalidate(problem, &sel.presets);
        log::info!("{method} N={n} seed={seed:?}: coverage {coverage:.6} in {wall_time:.2}s");
        rows.push(SweepRow {
            method,
            n,
            coverage,
            wall_time,
            seed,
            presets: sel.presets,
        });
    }
    Ok(rows)
}

/// Greedy once at the largest N, then each requested N as a prefix.
fn greedy_prefix_coverage(problem: &CoverageProblem<'_>, ns: &[usize]) -> Result<Vec<f64>> {
    check_ns(ns)?;
    let max_n = *ns.iter().max().expect("ns nonempty");
    let sel = greedy_select(problem, max_n)?;
    Ok(ns
        .iter()
        .map(|&n| {
            let presets = PresetSet::new(sel.indices[..n].iter().map(|&i| problem.grid.lifted[i]));
            revalidate(problem, &presets)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// subgroups

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Age,
    Sex,
    LossType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
        }
    }

    fn apply<T: PartialOrd>(self, a: T, b: T) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

/// A single `field op value` test on a user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: Field,
    pub op: CmpOp,
    pub value: String,
}

impl Predicate {
    pub fn new(field: Field, op: CmpOp, value: impl Into<String>) -> Result<Self> {
        let p = Predicate {
            field,
            op,
            value: value.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self.field {
            Field::Age => {
                let v: f64 = self
                    .value
                    .trim()
                    .parse()
                    .map_err(|_| Error::param(format!("predicate `{self}`: age must be a number")))?;
                if !v.is_finite() {
                    return Err(Error::param(format!("predicate `{self}`: age must be finite")));
                }
            }
            Field::Sex | Field::LossType => {
                if !matches!(self.op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(Error::param(format!(
                        "predicate `{self}`: only = and != apply to categorical fields"
                    )));
                }
                if self.field == Field::Sex {
                    self.value.trim().parse::<Sex>()?;
                } else {
                    self.value.trim().parse::<LossType>()?;
                }
            }
        }
        Ok(())
    }

    pub fn matches(&self, user: &User) -> bool {
        let v = self.value.trim();
        match self.field {
            Field::Age => self.op.apply(user.age, v.parse::<f64>().unwrap_or(f64::NAN)),
            Field::Sex => v.parse::<Sex>().is_ok_and(|s| self.op.apply(user.sex, s)),
            Field::LossType => v.parse::<LossType>().is_ok_and(|l| self.op.apply(user.loss_type, l)),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = match self.field {
            Field::Age => "age",
            Field::Sex => "sex",
            Field::LossType => "loss_type",
        };
        write!(f, "{field}{}{}", self.op.symbol(), self.value.trim())
    }
}

impl FromStr for Predicate {
    type Err = Error;

    /// Parses `age>65`, `sex=male`, `loss_type!=bilateral` and so on.
    fn from_str(s: &str) -> Result<Self> {
        const OPS: [(&str, CmpOp); 7] = [
            (">=", CmpOp::Ge),
            ("<=", CmpOp::Le),
            ("!=", CmpOp::Ne),
            ("==", CmpOp::Eq),
            ("=", CmpOp::Eq),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ];
        let (pos, sym, op) = OPS
            .iter()
            .filter_map(|(sym, op)| s.find(sym).map(|p| (p, *sym, *op)))
            .min_by_key(|(p, sym, _)| (*p, std::cmp::Reverse(sym.len())))
            .ok_or_else(|| Error::param(format!("predicate {s:?} has no comparison operator")))?;
        let field = match s[..pos].trim() {
            "age" => Field::Age,
            "sex" => Field::Sex,
            "loss_type" => Field::LossType,
            other => return Err(Error::param(format!("unknown predicate field {other:?}"))),
        };
        Predicate::new(field, op, s[pos + sym.len()..].trim())
    }
}

/// A conjunction of predicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub name: String,
    #[serde(rename = "where")]
    pub conditions: Vec<Predicate>,
}

impl Subgroup {
    pub fn matches(&self, user: &User) -> bool {
        self.conditions.iter().all(|p| p.matches(user))
    }

    pub fn describe(&self) -> String {
        if self.conditions.is_empty() {
            return "all users".to_string();
        }
        self.conditions.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" & ")
    }

    pub fn validate(&self) -> Result<()> {
        self.conditions.iter().try_for_each(Predicate::validate)
    }

    /// The four sex by age (at most 65 / over 65) groups.
    pub fn sex_by_age() -> Vec<Subgroup> {
        let mut out = Vec::new();
        for sex in ["male", "female"] {
            for (op, tag) in [(CmpOp::Le, "le65"), (CmpOp::Gt, "gt65")] {
                out.push(Subgroup {
                    name: format!("{sex}_{tag}"),
                    conditions: vec![
                        Predicate::new(Field::Sex, CmpOp::Eq, sex).expect("valid"),
                        Predicate::new(Field::Age, op, "65").expect("valid"),
                    ],
                });
            }
        }
        out
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    /// `sex=male&age>65`; the text itself becomes the name.
    fn from_str(s: &str) -> Result<Self> {
        let conditions = s
            .split('&')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Predicate>>>()?;
        Ok(Subgroup {
            name: s.trim().to_string(),
            conditions,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub subgroup: String,
    pub predicate: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub users: usize,
    /// Population weight of the subgroup within the full dataset.
    pub share: f64,
    /// Coverage of the globally optimized presets on the full population.
    pub global_coverage: f64,
    /// The same presets evaluated on the subgroup alone.
    pub global_on_subgroup: f64,
    /// Presets optimized for the subgroup, evaluated on the subgroup.
    pub subgroup_optimized: f64,
}

/// Compares global presets against subgroup-optimized presets on the same
/// grid. Subgroup weights are renormalized within each subgroup.
pub fn subgroup_analysis(
    problem: &CoverageProblem<'_>,
    subgroups: &[Subgroup],
    ns: &[usize],
    method: Method,
    seed: u64,
    ga: &GaParams,
) -> Result<Vec<SubgroupRow>> {
    check_ns(ns)?;
    let mut members = Vec::with_capacity(subgroups.len());
    for sg in subgroups {
        sg.validate()?;
        let share: f64 = problem.dataset.users().iter().filter(|u| sg.matches(u)).map(|u| u.weight).sum();
        let sub = problem.dataset.subset(|u| sg.matches(u)).map_err(|_| {
            Error::invalid(format!("subgroup {} ({}) selects no users", sg.name, sg.describe()))
        })?;
        members.push((sg, share, sub));
    }

    let global: Vec<PresetSet> = ns
        .iter()
        .map(|&n| select(problem, method, n, seed, ga).map(|s| s.presets))
        .collect::<Result<_>>()?;
    let global_cov: Vec<f64> = global.iter().map(|p| revalidate(problem, p)).collect();

    let mut rows = Vec::new();
    for (sg, share, sub) in &members {
        let sub_problem = CoverageProblem::new(problem.grid, sub, problem.bank, problem.params)?;
        for (i, &n) in ns.iter().enumerate() {
            let own = select(&sub_problem, method, n, seed, ga)?;
            rows.push(SubgroupRow {
                subgroup: sg.name.clone(),
                predicate: sg.describe(),
                n,
                users: sub.len(),
                share: *share,
                global_coverage: global_cov[i],
                global_on_subgroup: revalidate(&sub_problem, &global[i]),
                subgroup_optimized: revalidate(&sub_problem, &own.presets),
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// bootstrap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub index: usize,
    pub model: DeviationModel,
    /// Coverage per requested N, in request order.
    pub coverage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedReplicate {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two replicates.
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub requested: usize,
    pub seed: u64,
    #[serde(rename = "Ns")]
    pub ns: Vec<usize>,
    pub replicates: Vec<BootstrapReplicate>,
    pub skipped: Vec<SkippedReplicate>,
    pub summary: Vec<BootstrapSummary>,
}

fn summarize(n: usize, values: &[f64]) -> BootstrapSummary {
    let count = values.len();
    if count == 0 {
        return BootstrapSummary {
            n,
            count,
            mean: None,
            std: None,
            min: None,
            max: None,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = (count >= 2).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    });
    BootstrapSummary {
        n,
        count,
        mean: Some(mean),
        std,
        min: values.iter().copied().reduce(f64::min),
        max: values.iter().copied().reduce(f64::max),
    }
}

/// Resamples the deviation points `replicates` times, refits the Gaussian,
/// reweights the bank and reruns greedy. Replicate `b` draws from stream `b`
/// of the seeded generator, so results do not depend on scheduling.
/// Resamples whose fit fails are skipped and listed.
pub fn bootstrap_coverage(
    points: &[DeviationPoint],
    problem: &CoverageProblem<'_>,
    ns: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if replicates < 2 {
        return Err(Error::param(format!("bootstrap needs at least 2 replicates, got {replicates}")));
    }
    if points.is_empty() {
        return Err(Error::param("bootstrap needs deviation points"));
    }
    check_ns(ns)?;
    if let Some(&n) = ns.iter().find(|&&n| n > problem.n_candidates()) {
        return Err(Error::param(format!(
            "requested {n} presets from a grid of {} candidates",
            problem.n_candidates()
        )));
    }

    let outcomes: Vec<Result<std::result::Result<BootstrapReplicate, SkippedReplicate>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let sample: Vec<DeviationPoint> =
                (0..points.len()).map(|_| points[rng.random_range(0..points.len())]).collect();
            let model = match fit_deviation_model(&sample) {
                Ok(m) => m,
                Err(Error::Fit(reason)) => return Ok(Err(SkippedReplicate { index: b, reason })),
                Err(e) => return Err(e),
            };
            let bank = problem.bank.reweighted(&model);
            let replicate = problem.reweighted(&bank)?;
            Ok(Ok(BootstrapReplicate {
                index: b,
                model,
                coverage: greedy_prefix_coverage(&replicate, ns)?,
            }))
        })
        .collect();

    let mut done = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            Ok(r) => done.push(r),
            Err(s) => skipped.push(s),
        }
    }
    let summary = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| summarize(n, &done.iter().map(|r| r.coverage[i]).collect::<Vec<_>>()))
        .collect();
    Ok(BootstrapReport {
        requested: replicates,
        seed,
        ns: ns.to_vec(),
        replicates: done,
        skipped,
        summary,
    })
}

// ---------------------------------------------------------------------------
// variance scaling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub scale: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub coverage: f64,
}

/// Reruns greedy with the deviation Gaussian's std multiplied by each scale.
pub fn variance_scaling(
    problem: &CoverageProblem<'_>,
    model: &DeviationModel,
    scales: &[f64],
    ns: &[usize],
) -> Result<Vec<ScalingRow>> {
    if scales.is_empty() {
        return Err(Error::param("at least one scale is required"));
    }
    let mut rows = Vec::new();
    for &scale in scales {
        let scaled = model.with_scale(scale)?;
        let bank = problem.bank.reweighted(&scaled);
        let sub = problem.reweighted(&bank)?;
        for (&n, coverage) in ns.iter().zip(greedy_prefix_coverage(&sub, ns)?) {
            rows.push(ScalingRow { scale, n, coverage });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// plot data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    CoverageVsN,
    PcaScatter,
    CoverageExample,
    Bootstrap,
    VarianceScaling,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::CoverageVsN,
        PlotKind::PcaScatter,
        PlotKind::CoverageExample,
        PlotKind::Bootstrap,
        PlotKind::VarianceScaling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::CoverageVsN => "coverage-vs-n",
            PlotKind::PcaScatter => "pca-scatter",
            PlotKind::CoverageExample => "coverage-example",
            PlotKind::Bootstrap => "bootstrap",
            PlotKind::VarianceScaling => "variance-scaling",
        }
    }

    pub fn file_name(self) -> String {
        format!("plot_{}.csv", self.as_str().replace('-', "_"))
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            PlotKind::CoverageVsN => &["method", "N", "coverage"],
            PlotKind::PcaScatter => &["kind", "user_id", "fit_type", "tf_index", "pc1", "pc2", "covered"],
            PlotKind::CoverageExample => &[
                "user_id", "fit_type", "tf_index", "anchor_low", "anchor_high", "weight", "covered", "g500",
                "g1000", "g2000", "g3000", "g4000", "g6000",
            ],
            PlotKind::Bootstrap => &["replicate", "N", "coverage"],
            PlotKind::VarianceScaling => &["scale", "N", "coverage"],
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown plot kind {s:?}; expected one of {}",
                    PlotKind::ALL.map(PlotKind::as_str).join(", ")
                ))
            })
    }
}

/// Inputs for the scatter and per-user example plots.
#[derive(Clone, Copy)]
pub struct ScatterInput<'a> {
    pub model: &'a PcaModel,
    pub dataset: &'a Dataset,
    pub bank: &'a TransferFunctionBank,
    pub presets: &'a PresetSet,
    pub params: CoverageParams,
    /// User shown by the example plot; the first user when absent.
    pub example_user: Option<&'a str>,
}

/// Whatever results are available; missing parts produce header-only files.
#[derive(Clone, Copy, Default)]
pub struct PlotContext<'a> {
    pub sweep: &'a [SweepRow],
    pub bootstrap: Option<&'a BootstrapReport>,
    pub scaling: &'a [ScalingRow],
    pub scatter: Option<ScatterInput<'a>>,
}

fn within(presets: &PresetSet, config: &crate::model::Configuration, radius: f64) -> bool {
    presets.iter().any(|p| p.chebyshev(config) <= radius)
}

pub fn emit_plot_data(kind: PlotKind, ctx: &PlotContext<'_>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(kind.header())?;
    match kind {
        PlotKind::CoverageVsN => {
            for r in ctx.sweep {
                w.write_record([r.method.to_string(), r.n.to_string(), r.coverage.to_string()])?;
            }
        }
        PlotKind::Bootstrap => {
            if let Some(b) = ctx.bootstrap {
                for r in &b.replicates {
                    for (n, c) in b.ns.iter().zip(&r.coverage) {
                        w.write_record([r.index.to_string(), n.to_string(), c.to_string()])?;
                    }
                }
            }
        }
        PlotKind::VarianceScaling => {
            for r in ctx.scaling {
                w.write_record([r.scale.to_string(), r.n.to_string(), r.coverage.to_string()])?;
            }
        }
        PlotKind::PcaScatter => {
            if let Some(s) = &ctx.scatter {
                let report = population_coverage(s.dataset, s.presets, s.bank, &s.params);
                for (u, uc) in s.dataset.users().iter().zip(&report.per_user) {
                    for (fit, c) in &u.configs {
                        let p = s.model.transform(c);
                        w.write_record([
                            "prescription".to_string(),
                            u.id.clone(),
                            fit.to_string(),
                            String::new(),
                            p[0].to_string(),
                            p[1].to_string(),
                            uc.covered.to_string(),
                        ])?;
                        for (j, tf) in s.bank.functions().iter().enumerate() {
                            let v = apply_transfer(c, tf);
                            let p = s.model.transform(&v);
                            w.write_record([
                                "variation".to_string(),
                                u.id.clone(),
                                fit.to_string(),
                                j.to_string(),
                                p[0].to_string(),
                                p[1].to_string(),
                                within(s.presets, &v, s.params.radius).to_string(),
                            ])?;
                        }
                    }
                }
                for c in s.presets.iter() {
                    let p = s.model.transform(c);
                    w.write_record(["preset", "", "", "", &p[0].to_string(), &p[1].to_string(), ""])?;
                }
            }
        }
        PlotKind::CoverageExample => {
            if let Some(s) = &ctx.scatter {
                let user = match s.example_user {
                    Some(id) => s
                        .dataset
                        .users()
                        .iter()
                        .find(|u| u.id == id)
                        .ok_or_else(|| Error::Lookup(format!("no user with id {id:?}")))?,
                    None => &s.dataset.users()[0],
                };
                for (fit, c) in &user.configs {
                    for (j, (tf, wt)) in s.bank.functions().iter().zip(s.bank.weights()).enumerate() {
                        let v = apply_transfer(c, tf);
                        let mut row = vec![
                            user.id.clone(),
                            fit.to_string(),
                            j.to_string(),
                            tf.anchor_low.to_string(),
                            tf.anchor_high.to_string(),
                            wt.to_string(),
                            within(s.presets, &v, s.params.radius).to_string(),
                        ];
                        row.extend(v.gains().iter().map(f64::to_string));
                        w.write_record(&row)?;
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

/// Writes one file per kind into `dir`; returns the file names.
pub fn emit_plot_files(kinds: &[PlotKind], ctx: &PlotContext<'_>, dir: &Path) -> Result<Vec<String>> {
    io::ensure_dir(dir)?;
    let mut names = Vec::new();
    for &k in kinds {
        let path = dir.join(k.file_name());
        let file = std::fs::File::create(&path).map_err(|e| Error::write(&path, e))?;
        emit_plot_data(k, ctx, std::io::BufWriter::new(file))?;
        names.push(k.file_name());
    }
    Ok(names)
}

pub fn write_sweep_csv(rows: &[SweepRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "N", "coverage", "wall_time", "seed"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.n.to_string(),
            r.coverage.to_string(),
            format!("{:.3}", r.wall_time),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// configured runs

/// Everything a batch run needs, typically read from a TOML file. Relative
/// paths are resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset CSV; a synthetic population from `synth` when absent.
    pub dataset: Option<PathBuf>,
    /// Deviation CSV; the built-in model when absent.
    pub deviations: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Number of deviation points drawn from the built-in model for the
    /// bootstrap when no file is given.
    pub synthetic_deviation_count: usize,
    pub radius: f64,
    pub gamma: f64,
    pub tf_range: f64,
    pub tf_step: f64,
    pub grid_steps: [usize; 2],
    pub bbox_source: BoundingBoxSource,
    #[serde(rename = "Ns")]
    pub ns: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub ga: GaParams,
    pub scales: Vec<f64>,
    pub bootstrap_replicates: usize,
    #[serde(rename = "bootstrap_Ns")]
    pub bootstrap_ns: Vec<usize>,
    pub subgroup_method: Method,
    #[serde(rename = "subgroup_Ns")]
    pub subgroup_ns: Vec<usize>,
    pub subgroups: Vec<Subgroup>,
    pub plots: Vec<PlotKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            deviations: None,
            synth: SynthSpec::default(),
            synthetic_deviation_count: 200,
            radius: crate::coverage::DEFAULT_RADIUS_DB,
            gamma: crate::coverage::DEFAULT_GAMMA,
            tf_range: DEFAULT_TF_RANGE_DB,
            tf_step: DEFAULT_TF_STEP_DB,
            grid_steps: [20, 20],
            bbox_source: BoundingBoxSource::default(),
            ns: (1..=8).map(|i| 5 * i).collect(),
            methods: vec![Method::Greedy, Method::Ga, Method::Kmeans],
            seeds: vec![0],
            ga: GaParams::default(),
            scales: DEFAULT_SCALES.to_vec(),
            bootstrap_replicates: DEFAULT_BOOTSTRAP_REPLICATES,
            bootstrap_ns: vec![20],
            subgroup_method: Method::Ga,
            subgroup_ns: vec![20],
            subgroups: Vec::new(),
            plots: PlotKind::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.deviations].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn params(&self) -> Result<CoverageParams> {
        CoverageParams::new(self.radius, self.gamma)
    }
}

/// Loaded dataset, deviation evidence and the bank weighted by the fitted
/// (or built-in) deviation model.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub dataset: Dataset,
    pub deviation_points: Vec<DeviationPoint>,
    pub deviation_model: DeviationModel,
    /// `"synthetic"` or the deviation file path.
    pub deviation_source: String,
    pub bank: TransferFunctionBank,
}

impl Inputs {
    pub fn assemble(
        dataset: Dataset,
        deviations: Option<&Path>,
        synthetic_count: usize,
        seed: u64,
        tf_range: f64,
        tf_step: f64,
    ) -> Result<Self> {
        let (points, model, source) = match deviations {
            Some(path) => {
                let pts = io::load_deviations(path)?;
                let model = fit_deviation_model(&pts)?;
                (pts, model, path.display().to_string())
            }
            None => {
                let model = DeviationModel::synthetic_default();
                (synth_deviations(&model, synthetic_count, seed), model, "synthetic".to_string())
            }
        };
        let bank = build_transfer_bank(tf_range, tf_step, &FREQUENCIES_HZ)?.reweighted(&model);
        Ok(Inputs {
            dataset,
            deviation_points: points,
            deviation_model: model,
            deviation_source: source,
            bank,
        })
    }
}

/// Two-component model of the prescriptions and the candidate grid over the
/// chosen bounding box.
pub fn plane_and_grid(
    dataset: &Dataset,
    bank: &TransferFunctionBank,
    steps: [usize; 2],
    source: BoundingBoxSource,
) -> Result<(PcaModel, CandidateGrid)> {
    let configs: Vec<_> = dataset.prescriptions().map(|(_, _, c)| *c).collect();
    let model = fit_pca(&configs, 2)?;
    let pts = source_points(&model, dataset, bank, source)?;
    let grid = build_grid(&model, &pts, steps[0], steps[1])?;
    Ok((model, grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub sweep: Vec<SweepRow>,
    pub subgroups: Vec<SubgroupRow>,
    pub bootstrap: Option<BootstrapReport>,
    pub scaling: Vec<ScalingRow>,
}

/// Runs every configured experiment and writes results plus `manifest.json`
/// into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, argv: Vec<String>) -> Result<(ExperimentResults, Manifest)> {
    let params = cfg.params()?;
    cfg.ga.validate()?;
    cfg.subgroups.iter().try_for_each(Subgroup::validate)?;
    let dataset = match &cfg.dataset {
        Some(p) => io::load_dataset(p)?,
        None => synth_dataset(&cfg.synth)?,
    };
    let inputs = Inputs::assemble(
        dataset,
        cfg.deviations.as_deref(),
        cfg.synthetic_deviation_count,
        cfg.synth.seed,
        cfg.tf_range,
        cfg.tf_step,
    )?;
    let (model, grid) = plane_and_grid(&inputs.dataset, &inputs.bank, cfg.grid_steps, cfg.bbox_source)?;
    let problem = CoverageProblem::new(&grid, &inputs.dataset, &inputs.bank, params)?;

    io::ensure_dir(out_dir)?;
    let mut outputs = Vec::new();
    let sweep_rows = if cfg.methods.is_empty() {
        Vec::new()
    } else {
        sweep(&problem, &cfg.ns, &cfg.methods, &cfg.seeds, &cfg.ga)?
    };
    if !sweep_rows.is_empty() {
        let path = out_dir.join("sweep.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::write(&path, e))?;
        write_sweep_csv(&sweep_rows, f)?;
        io::write_json(out_dir.join("sweep.json"), &sweep_rows)?;
        outputs.extend(["sweep.csv".to_string(), "sweep.json".to_string()]);
    }

    let subgroup_rows = if cfg.subgroups.is_empty() {
        Vec::new()
    } else {
        let rows = subgroup_analysis(
            &problem,
            &cfg.subgroups,
            &cfg.subgroup_ns,
            cfg.subgroup_method,
            cfg.seeds[0],
            &cfg.ga,
        )?;
        io::write_json(out_dir.join("subgroups.json"), &rows)?;
        outputs.push("subgroups.json".to_string());
        rows
    };

    let bootstrap = if cfg.bootstrap_replicates == 0 {
        None
    } else {
        let rep = bootstrap_coverage(
            &inputs.deviation_points,
            &problem,
            &cfg.bootstrap_ns,
            cfg.bootstrap_replicates,
            cfg.seeds.first().copied().unwrap_or(0),
        )?;
        io::write_json(out_dir.join("bootstrap.json"), &rep)?;
        outputs.push("bootstrap.json".to_string());
        Some(rep)
    };

    let scaling = if cfg.scales.is_empty() {
        Vec::new()
    } else {
        let rows = variance_scaling(&problem, &inputs.deviation_model, &cfg.scales, &cfg.ns)?;
        io::write_json(out_dir.join("variance_scaling.json"), &rows)?;
        outputs.push("variance_scaling.json".to_string());
        rows
    };

    let best = sweep_rows
        .iter()
        .filter(|r| Some(r.n) == cfg.ns.iter().max().copied())
        .max_by(|a, b| a.coverage.total_cmp(&b.coverage));
    let empty = PresetSet::default();
    let ctx = PlotContext {
        sweep: &sweep_rows,
        bootstrap: bootstrap.as_ref(),
        scaling: &scaling,
        scatter: Some(ScatterInput {
            model: &model,
            dataset: &inputs.dataset,
            bank: &inputs.bank,
            presets: best.map_or(&empty, |r| &r.presets),
            params,
            example_user: None,
        }),
    };
    outputs.extend(emit_plot_files(&cfg.plots, &ctx, out_dir)?);
    io::write_json(out_dir.join("pca.json"), &model)?;
    outputs.push("pca.json".to_string());

    let mut manifest = Manifest::new(
        "run",
        argv,
        serde_json::to_value(cfg)?,
        inputs.deviation_source.clone(),
    );
    manifest.outputs = outputs;
    manifest.outputs.push("manifest.json".to_string());
    io::write_json(out_dir.join("manifest.json"), &manifest)?;
    Ok((
        ExperimentResults {
            sweep: sweep_rows,
            subgroups: subgroup_rows,
            bootstrap,
            scaling,
        },
        manifest,
    ))
}
