//! Command-line front end. Every subcommand writes its outputs and a
//! `manifest.json` echoing all parameters into `--out-dir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::coverage::{population_coverage, CoverageParams, PresetSet, DEFAULT_GAMMA, DEFAULT_RADIUS_DB};
use crate::error::{Error, Result};
use crate::experiments::{
    bootstrap_coverage, emit_plot_data, plane_and_grid, run_experiment, subgroup_analysis, sweep,
    variance_scaling, write_sweep_csv, BootstrapReport, ExperimentConfig, Inputs, PlotContext, PlotKind,
    ScalingRow, ScatterInput, Subgroup, SweepRow, DEFAULT_BOOTSTRAP_REPLICATES,
};
use crate::io::{self, Manifest};
use crate::model::{DeviationModel, DEFAULT_TF_RANGE_DB, DEFAULT_TF_STEP_DB};
use crate::optimize::{select, CoverageProblem, GaParams, Method};
use crate::reduce::{fit_pca, BoundingBoxSource};
use crate::slider::{slider_grid, SliderSpec};
use crate::synth::{synth_dataset, synth_deviations, SynthSpec};

/// Deviation points drawn from the built-in model when none are supplied.
const SYNTHETIC_DEVIATION_POINTS: usize = 200;

#[derive(Parser, Debug, Serialize)]
#[command(name = "hacover", version, about = "Preset coverage for hearing-aid self-fitting")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct GlobalArgs {
    /// Coverage ball radius in dB (Chebyshev distance, inclusive).
    #[arg(long, global = true, default_value_t = DEFAULT_RADIUS_DB)]
    radius: f64,
    /// Likelihood mass a user needs per fit type to count as covered.
    #[arg(long, global = true, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Transfer-function anchors span plus or minus this many dB.
    #[arg(long, global = true, default_value_t = DEFAULT_TF_RANGE_DB)]
    tf_range: f64,
    /// Spacing of the anchor lattice in dB.
    #[arg(long, global = true, default_value_t = DEFAULT_TF_STEP_DB)]
    tf_step: f64,
    /// CSV of measured (low_dev, high_dev) deviations; the built-in model
    /// is used when omitted.
    #[arg(long, global = true)]
    deviations: Option<PathBuf>,
    /// Directory receiving outputs and manifest.json.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    #[arg(long, default_value_t = 20)]
    x_steps: usize,
    #[arg(long, default_value_t = 20)]
    y_steps: usize,
    /// Bounding-box source: variations or prescriptions.
    #[arg(long, default_value = "variations")]
    bbox: BoundingBoxSource,
}

#[derive(Args, Debug, Serialize)]
struct GaArgs {
    #[arg(long, default_value_t = GaParams::default().population_size)]
    ga_population: usize,
    #[arg(long, default_value_t = GaParams::default().iterations)]
    ga_iterations: usize,
    #[arg(long, default_value_t = GaParams::default().elitism)]
    ga_elitism: usize,
    #[arg(long, default_value_t = GaParams::default().crossover_fraction)]
    ga_crossover_fraction: f64,
    /// Disable the neighbour-swap improvement of the elite.
    #[arg(long)]
    ga_no_local: bool,
}

impl GaArgs {
    fn params(&self, seed: u64) -> Result<GaParams> {
        let p = GaParams {
            population_size: self.ga_population,
            iterations: self.ga_iterations,
            elitism: self.ga_elitism,
            crossover_fraction: self.ga_crossover_fraction,
            local_improvement: !self.ga_no_local,
            seed,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a seeded synthetic dataset (dataset.csv, deviations.csv).
    Synth {
        #[arg(long, default_value_t = SynthSpec::default().n_users)]
        n_users: usize,
        #[arg(long, default_value_t = SynthSpec::default().bilateral_fraction)]
        bilateral_fraction: f64,
        #[arg(long, default_value_t = SynthSpec::default().noise_std)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML file with a full synthetic spec; flags above are ignored.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = SYNTHETIC_DEVIATION_POINTS)]
        deviation_points: usize,
    },
    /// Fit the two-component reduction (pca.json).
    Pca {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Build the candidate grid (grid.json).
    Grid {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Select N presets (selection.json, presets.json).
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "greedy")]
        method: Method,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ga: GaArgs,
    },
    /// Evaluate a presets file (report.json).
    Coverage {
        #[arg(long)]
        presets: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a two-slider grid (report.json, presets.json).
    Slider {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        x_steps: usize,
        #[arg(long, default_value_t = 10)]
        y_steps: usize,
        #[arg(long, default_value = "variations")]
        bbox: BoundingBoxSource,
    },
    /// Coverage for each method and N (sweep.csv, sweep.json).
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 15, 20, 25, 30, 35, 40])]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [Method::Greedy, Method::Ga, Method::Kmeans])]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_values_t = [0])]
        seeds: Vec<u64>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ga: GaArgs,
    },
    /// Resample the deviation evidence and rerun greedy (bootstrap.json).
    Bootstrap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_REPLICATES)]
        replicates: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [20])]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Rerun greedy with scaled deviation spread (variance_scaling.json).
    VarianceScale {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [20])]
        ns: Vec<usize>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Global versus subgroup-optimized presets (subgroups.json).
    Subgroup {
        #[arg(long)]
        dataset: PathBuf,
        /// Conjunction such as `sex=male&age>65`; repeatable. Defaults to
        /// the four sex by age groups.
        #[arg(long = "group")]
        groups: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [20])]
        ns: Vec<usize>,
        #[arg(long, default_value = "ga")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ga: GaArgs,
    },
    /// Write one plot-data CSV.
    PlotData {
        /// coverage-vs-n, pca-scatter, coverage-example, bootstrap or
        /// variance-scaling.
        #[arg(long)]
        kind: String,
        /// sweep.json, bootstrap.json or variance_scaling.json.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        presets: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
    },
    /// Run a TOML-configured experiment suite.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pca { .. } => "pca",
            Command::Grid { .. } => "grid",
            Command::Optimize { .. } => "optimize",
            Command::Coverage { .. } => "coverage",
            Command::Slider { .. } => "slider",
            Command::Sweep { .. } => "sweep",
            Command::Bootstrap { .. } => "bootstrap",
            Command::VarianceScale { .. } => "variance-scale",
            Command::Subgroup { .. } => "subgroup",
            Command::PlotData { .. } => "plot-data",
            Command::Run { .. } => "run",
        }
    }
}

fn init_runtime() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    if let Some(n) = std::env::var("HACOVER_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    init_runtime();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

struct Session<'a> {
    cli: &'a Cli,
    argv: Vec<String>,
    outputs: Vec<String>,
}

impl Session<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.global.out_dir.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        io::write_json(self.out(name), value)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn file(&mut self, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
        let path = self.out(name);
        let f = std::fs::File::create(&path).map_err(|e| Error::write(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(std::io::BufWriter::new(f))
    }

    fn finish(mut self, deviation_source: String) -> Result<()> {
        let mut manifest = Manifest::new(
            self.cli.command.name(),
            std::mem::take(&mut self.argv),
            serde_json::to_value(self.cli)?,
            deviation_source,
        );
        self.outputs.push("manifest.json".to_string());
        manifest.outputs = self.outputs;
        io::write_json(self.cli.global.out_dir.join("manifest.json"), &manifest)
    }

    fn params(&self) -> Result<CoverageParams> {
        CoverageParams::new(self.cli.global.radius, self.cli.global.gamma)
    }

    fn inputs(&self, dataset: &Path) -> Result<Inputs> {
        let ds = io::load_dataset(dataset)?;
        let g = &self.cli.global;
        Inputs::assemble(ds, g.deviations.as_deref(), SYNTHETIC_DEVIATION_POINTS, 0, g.tf_range, g.tf_step)
    }
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<()> {
    if let Command::Run { config } = &cli.command {
        let cfg = ExperimentConfig::load(config)?;
        let (results, _) = run_experiment(&cfg, &cli.global.out_dir, argv)?;
        for r in &results.sweep {
            println!("{} N={} coverage {:.6}", r.method, r.n, r.coverage);
        }
        return Ok(());
    }

    io::ensure_dir(&cli.global.out_dir)?;
    let mut s = Session {
        cli,
        argv,
        outputs: Vec::new(),
    };
    let params = s.params()?;
    let source = match &cli.command {
        Command::Synth {
            n_users,
            bilateral_fraction,
            noise_std,
            seed,
            spec,
            deviation_points,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<SynthSpec>(&text)?
                }
                None => SynthSpec {
                    n_users: *n_users,
                    bilateral_fraction: *bilateral_fraction,
                    noise_std: *noise_std,
                    seed: *seed,
                    ..SynthSpec::default()
                },
            };
            let ds = synth_dataset(&spec)?;
            io::write_dataset(&ds, s.file("dataset.csv")?)?;
            let pts = synth_deviations(&DeviationModel::synthetic_default(), *deviation_points, spec.seed);
            io::write_deviations(&pts, s.file("deviations.csv")?)?;
            s.json("synth_spec.json", &spec)?;
            println!("users {} prescriptions {}", ds.len(), ds.prescription_count());
            "synthetic".to_string()
        }
        Command::Pca { dataset } => {
            let ds = io::load_dataset(dataset)?;
            let configs: Vec<_> = ds.prescriptions().map(|(_, _, c)| *c).collect();
            let model = fit_pca(&configs, 2)?;
            let share: f64 = model.explained_variance_ratio.iter().sum();
            s.json("pca.json", &model)?;
            println!("explained variance {share:.6}");
            "none".to_string()
        }
        Command::Grid { dataset, grid } => {
            let inp = s.inputs(dataset)?;
            let (model, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            s.json("pca.json", &model)?;
            s.json("grid.json", &g)?;
            println!("candidates {}", g.len());
            inp.deviation_source
        }
        Command::Optimize {
            dataset,
            method,
            n,
            seed,
            grid,
            ga,
        } => {
            let inp = s.inputs(dataset)?;
            let (model, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            let problem = CoverageProblem::new(&g, &inp.dataset, &inp.bank, params)?;
            let sel = select(&problem, *method, *n, *seed, &ga.params(*seed)?)?;
            s.json("pca.json", &model)?;
            s.json("selection.json", &sel)?;
            s.json("presets.json", &sel.presets)?;
            println!("coverage {:.6}", sel.coverage);
            inp.deviation_source
        }
        Command::Coverage { presets, dataset } => {
            let inp = s.inputs(dataset)?;
            let presets = io::load_presets(presets)?;
            let report = population_coverage(&inp.dataset, &presets, &inp.bank, &params);
            s.json("report.json", &report)?;
            println!("coverage {:.6}", report.population_coverage);
            inp.deviation_source
        }
        Command::Slider {
            dataset,
            x_steps,
            y_steps,
            bbox,
        } => {
            let inp = s.inputs(dataset)?;
            let spec = SliderSpec::new(*x_steps, *y_steps, *bbox)?;
            let configs: Vec<_> = inp.dataset.prescriptions().map(|(_, _, c)| *c).collect();
            let model = fit_pca(&configs, 2)?;
            let grid = slider_grid(&model, &spec, &inp.dataset, &inp.bank)?;
            let presets = PresetSet::new(grid.lifted.iter().copied());
            let report = population_coverage(&inp.dataset, &presets, &inp.bank, &params);
            s.json("pca.json", &model)?;
            s.json("presets.json", &presets)?;
            s.json("report.json", &report)?;
            println!("coverage {:.6}", report.population_coverage);
            inp.deviation_source
        }
        Command::Sweep {
            dataset,
            ns,
            methods,
            seeds,
            grid,
            ga,
        } => {
            let inp = s.inputs(dataset)?;
            let (_, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            let problem = CoverageProblem::new(&g, &inp.dataset, &inp.bank, params)?;
            let rows = sweep(&problem, ns, methods, seeds, &ga.params(0)?)?;
            write_sweep_csv(&rows, s.file("sweep.csv")?)?;
            s.json("sweep.json", &rows)?;
            for r in &rows {
                println!("{} N={} coverage {:.6}", r.method, r.n, r.coverage);
            }
            inp.deviation_source
        }
        Command::Bootstrap {
            dataset,
            replicates,
            ns,
            seed,
            grid,
        } => {
            let inp = s.inputs(dataset)?;
            let (_, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            let problem = CoverageProblem::new(&g, &inp.dataset, &inp.bank, params)?;
            let rep = bootstrap_coverage(&inp.deviation_points, &problem, ns, *replicates, *seed)?;
            s.json("bootstrap.json", &rep)?;
            for sm in &rep.summary {
                println!(
                    "N={} mean {:.6} std {:.6} ({} replicates, {} skipped)",
                    sm.n,
                    sm.mean.unwrap_or(f64::NAN),
                    sm.std.unwrap_or(f64::NAN),
                    sm.count,
                    rep.skipped.len()
                );
            }
            inp.deviation_source
        }
        Command::VarianceScale {
            dataset,
            scales,
            ns,
            grid,
        } => {
            let inp = s.inputs(dataset)?;
            let (_, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            let problem = CoverageProblem::new(&g, &inp.dataset, &inp.bank, params)?;
            let rows = variance_scaling(&problem, &inp.deviation_model, scales, ns)?;
            s.json("variance_scaling.json", &rows)?;
            for r in &rows {
                println!("scale {} N={} coverage {:.6}", r.scale, r.n, r.coverage);
            }
            inp.deviation_source
        }
        Command::Subgroup {
            dataset,
            groups,
            ns,
            method,
            seed,
            grid,
            ga,
        } => {
            let inp = s.inputs(dataset)?;
            let subgroups = if groups.is_empty() {
                Subgroup::sex_by_age()
            } else {
                groups.iter().map(|g| g.parse()).collect::<Result<Vec<Subgroup>>>()?
            };
            let (_, g) = plane_and_grid(&inp.dataset, &inp.bank, [grid.x_steps, grid.y_steps], grid.bbox)?;
            let problem = CoverageProblem::new(&g, &inp.dataset, &inp.bank, params)?;
            let rows = subgroup_analysis(&problem, &subgroups, ns, *method, *seed, &ga.params(*seed)?)?;
            s.json("subgroups.json", &rows)?;
            for r in &rows {
                println!(
                    "{} N={} global {:.6} subgroup-optimized {:.6}",
                    r.subgroup, r.n, r.global_on_subgroup, r.subgroup_optimized
                );
            }
            inp.deviation_source
        }
        Command::PlotData {
            kind,
            results,
            dataset,
            presets,
            user,
        } => {
            let kind: PlotKind = kind.parse()?;
            let mut sweep_rows: Vec<SweepRow> = Vec::new();
            let mut boot: Option<BootstrapReport> = None;
            let mut scaling: Vec<ScalingRow> = Vec::new();
            if let Some(path) = results {
                match kind {
                    PlotKind::CoverageVsN => sweep_rows = io::read_json(path)?,
                    PlotKind::Bootstrap => boot = Some(io::read_json(path)?),
                    PlotKind::VarianceScaling => scaling = io::read_json(path)?,
                    _ => return Err(Error::param(format!("--results does not apply to {kind}"))),
                }
            }
            let inp = dataset.as_deref().map(|d| s.inputs(d)).transpose()?;
            let model = match &inp {
                Some(i) => {
                    let configs: Vec<_> = i.dataset.prescriptions().map(|(_, _, c)| *c).collect();
                    Some(fit_pca(&configs, 2)?)
                }
                None => None,
            };
            let preset_set = match presets {
                Some(p) => io::load_presets(p)?,
                None => PresetSet::default(),
            };
            let scatter = match (&inp, &model) {
                (Some(i), Some(m)) => Some(ScatterInput {
                    model: m,
                    dataset: &i.dataset,
                    bank: &i.bank,
                    presets: &preset_set,
                    params,
                    example_user: user.as_deref(),
                }),
                _ => None,
            };
            let ctx = PlotContext {
                sweep: &sweep_rows,
                bootstrap: boot.as_ref(),
                scaling: &scaling,
                scatter,
            };
            let name = kind.file_name();
            emit_plot_data(kind, &ctx, s.file(&name)?)?;
            println!("wrote {}", s.out(&name).display());
            inp.map_or_else(|| "none".to_string(), |i| i.deviation_source)
        }
        Command::Run { .. } => unreachable!("handled above"),
    };
    s.finish(source)
}
