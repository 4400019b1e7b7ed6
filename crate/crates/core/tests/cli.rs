use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hacover::coverage::{population_coverage, CoverageParams, PresetSet};
use hacover::experiments::{plane_and_grid, Inputs};
use hacover::io;
use hacover::optimize::{combination_count, SelectionResult};
use hacover::reduce::BoundingBoxSource;

fn hacover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hacover"))
        .args(args)
        .env("HACOVER_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const HEADER: &str = "user_id,weight,loss_type,fit_type,g500,g1000,g2000,g3000,g4000,g6000,age,sex\n";

fn write_trivial(dir: &Path) {
    let mut csv = HEADER.to_string();
    csv.push_str("a,1,unilateral,uni_left,10,12,20,24,26,24,70,male\n");
    for (fit, g) in [
        ("uni_left", "30,31,35,40,42,40"),
        ("uni_right", "32,33,36,41,44,41"),
        ("bi_left", "28,29,33,38,40,38"),
        ("bi_right", "30,31,34,39,42,39"),
    ] {
        csv.push_str(&format!("b,2,bilateral,{fit},{g},55,female\n"));
    }
    fs::write(dir.join("d.csv"), csv).unwrap();
    // tightly clustered deviations put almost all mass on the identity
    let mut dev = "low_dev,high_dev\n".to_string();
    for (l, h) in [(0.3, -0.2), (-0.3, 0.2), (0.1, 0.3), (-0.1, -0.3), (0.0, 0.0)] {
        dev.push_str(&format!("{l},{h}\n"));
    }
    fs::write(dir.join("dev.csv"), dev).unwrap();
    let ds = io::load_dataset(dir.join("d.csv")).unwrap();
    let presets = PresetSet::new(ds.prescriptions().map(|(_, _, c)| *c));
    io::save_presets(&presets, dir.join("p.json")).unwrap();
}

#[test]
fn coverage_of_prescriptions_is_one() {
    let dir = tempfile::tempdir().unwrap();
    write_trivial(dir.path());
    let out = dir.path().join("out");
    let o = hacover(&[
        "coverage",
        "--presets",
        s(&dir.path().join("p.json")),
        "--dataset",
        s(&dir.path().join("d.csv")),
        "--deviations",
        s(&dir.path().join("dev.csv")),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("coverage 1.000000"), "{}", stdout(&o));
    assert!(out.join("report.json").exists());
    let manifest: serde_json::Value = io::read_json(out.join("manifest.json")).unwrap();
    assert_eq!(manifest["command"], "coverage");
    assert_eq!(manifest["params"]["global"]["radius"], 5.0);
    assert_eq!(manifest["params"]["global"]["gamma"], 0.8);
    assert!(manifest["deviation_source"].as_str().unwrap().ends_with("dev.csv"));
}

#[test]
fn brute_on_twelve_point_grid_matches_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = hacover(&["synth", "--n-users", "20", "--seed", "4", "--out-dir", s(d)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = d.join("opt");
    let o = hacover(&[
        "optimize",
        "--dataset",
        s(&d.join("dataset.csv")),
        "--method",
        "brute",
        "--n",
        "3",
        "--x-steps",
        "4",
        "--y-steps",
        "3",
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sel: SelectionResult = io::read_json(out.join("selection.json")).unwrap();
    assert_eq!(sel.indices.len(), 3);

    let ds = io::load_dataset(d.join("dataset.csv")).unwrap();
    let inputs = Inputs::assemble(ds, None, 200, 0, 15.0, 3.75).unwrap();
    let (_, grid) = plane_and_grid(&inputs.dataset, &inputs.bank, [4, 3], BoundingBoxSource::Variations).unwrap();
    assert_eq!(grid.len(), 12);
    assert_eq!(combination_count(12, 3), 220);
    let params = CoverageParams::default();
    let mut best = f64::NEG_INFINITY;
    for a in 0..12 {
        for b in a + 1..12 {
            for c in b + 1..12 {
                let p = PresetSet::new([grid.lifted[a], grid.lifted[b], grid.lifted[c]]);
                best = best.max(population_coverage(&inputs.dataset, &p, &inputs.bank, &params).population_coverage);
            }
        }
    }
    assert_eq!(sel.coverage, best);
}

#[test]
fn missing_dataset_flag_is_a_usage_error() {
    let o = hacover(&["optimize", "--method", "greedy", "--n", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));
}

#[test]
fn exit_codes_for_usage_and_validation() {
    assert_eq!(hacover(&["--help"]).status.code(), Some(0));
    assert_eq!(hacover(&["--version"]).status.code(), Some(0));
    assert_eq!(hacover(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hacover(&["pca", "--dataset", "x.csv", "--bogus"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let o = hacover(&["pca", "--dataset", s(&dir.path().join("nope.csv"))]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    let mut csv = HEADER.to_string();
    for fit in ["uni_left", "uni_right", "bi_left"] {
        csv.push_str(&format!("carol,1,bilateral,{fit},1,2,3,4,5,6,70,female\n"));
    }
    fs::write(&bad, csv).unwrap();
    let o = hacover(&["pca", "--dataset", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("carol"), "{}", stderr(&o));

    let o = hacover(&["plot-data", "--kind", "histogram", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = hacover(&["coverage", "--gamma", "0", "--presets", "p", "--dataset", "d"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seeded_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        let o = hacover(&["synth", "--n-users", "30", "--seed", "11", "--out-dir", s(&d.join(run))]);
        assert!(o.status.success());
    }
    for f in ["dataset.csv", "deviations.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    let ds = d.join("a").join("dataset.csv");
    for method in ["ga", "kmeans"] {
        let mut sel = Vec::new();
        for run in ["x", "y"] {
            let out = d.join(format!("{method}{run}"));
            let o = hacover(&[
                "optimize", "--dataset", s(&ds), "--method", method, "--n", "4", "--seed", "3", "--x-steps", "6",
                "--y-steps", "6", "--ga-population", "20", "--ga-iterations", "15", "--out-dir", s(&out),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            sel.push(fs::read(out.join("selection.json")).unwrap());
        }
        assert_eq!(sel[0], sel[1], "{method}");
    }
}

#[test]
fn sweep_and_plot_data_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(hacover(&["synth", "--n-users", "25", "--seed", "2", "--out-dir", s(d)]).status.success());
    let ds = d.join("dataset.csv");
    let out = d.join("sweep");
    let o = hacover(&[
        "sweep", "--dataset", s(&ds), "--ns", "2,4", "--methods", "greedy,kmeans", "--x-steps", "6", "--y-steps",
        "6", "--out-dir", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("method,N,coverage,wall_time,seed\n"));
    assert_eq!(csv.lines().count(), 5);

    let plots = d.join("plots");
    let o = hacover(&[
        "plot-data",
        "--kind",
        "coverage-vs-n",
        "--results",
        s(&out.join("sweep.json")),
        "--out-dir",
        s(&plots),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(plots.join("plot_coverage_vs_n.csv")).unwrap();
    assert!(text.starts_with("method,N,coverage\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn configured_run_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        r#"
grid_steps = [5, 5]
Ns = [2, 3]
methods = ["greedy", "kmeans"]
scales = [0.5, 1.0]
bootstrap_replicates = 2
bootstrap_Ns = [2]
subgroup_Ns = [2]
subgroup_method = "greedy"

[synth]
n_users = 20
seed = 5

[[subgroups]]
name = "older"
where = [{ field = "age", op = ">", value = "50" }]
"#,
    )
    .unwrap();
    let out = dir.path().join("results");
    let o = hacover(&["run", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = io::read_json(out.join("manifest.json")).unwrap();
    assert_eq!(manifest["deviation_source"], "synthetic");
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists(), "{f}");
    }
    assert_eq!(manifest["params"]["grid_steps"], serde_json::json!([5, 5]));
}
