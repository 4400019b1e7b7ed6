//! File formats: dataset and deviation CSVs, JSON artifacts and the run
//! manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::coverage::PresetSet;
use crate::error::{Error, Result};
use crate::model::{Configuration, Dataset, DeviationPoint, FitType, LossType, Sex, User, BANDS};

pub const DATASET_COLUMNS: [&str; 12] = [
    "user_id", "weight", "loss_type", "fit_type", "g500", "g1000", "g2000", "g3000", "g4000", "g6000",
    "age", "sex",
];

pub const DEVIATION_COLUMNS: [&str; 2] = ["low_dev", "high_dev"];

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(found: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<&str> = found.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::invalid(format!(
            "{what} header must be `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, line: u64) -> Result<&'r str> {
    rec.get(i)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid(format!("line {line}: missing {}", DATASET_COLUMNS[i])))
}

fn number(rec: &csv::StringRecord, i: usize, line: u64, cols: &[&str]) -> Result<f64> {
    let raw = rec
        .get(i)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid(format!("line {line}: missing {}", cols[i])))?;
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: {} is not a number: {raw:?}", cols[i])))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("line {line}: {} must be finite", cols[i])));
    }
    Ok(v)
}

/// Parses a dataset CSV with one row per (user, fit type).
pub fn read_dataset(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(rdr.headers()?, &DATASET_COLUMNS, "dataset")?;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<User> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != DATASET_COLUMNS.len() {
            return Err(Error::invalid(format!(
                "line {line}: expected {} fields, found {}",
                DATASET_COLUMNS.len(),
                rec.len()
            )));
        }
        let id = field(&rec, 0, line)?.to_string();
        let weight = number(&rec, 1, line, &DATASET_COLUMNS)?;
        if weight < 0.0 {
            return Err(Error::invalid(format!("line {line}: user {id} has negative weight {weight}")));
        }
        let loss_type: LossType = field(&rec, 2, line)?
            .parse()
            .map_err(|e: Error| Error::invalid(format!("line {line}: {e}")))?;
        let fit: FitType = field(&rec, 3, line)?
            .parse()
            .map_err(|e: Error| Error::invalid(format!("line {line}: {e}")))?;
        let mut gains = [0.0; BANDS];
        for (b, g) in gains.iter_mut().enumerate() {
            *g = number(&rec, 4 + b, line, &DATASET_COLUMNS)?;
        }
        let age = number(&rec, 10, line, &DATASET_COLUMNS)?;
        let sex: Sex = field(&rec, 11, line)?
            .parse()
            .map_err(|e: Error| Error::invalid(format!("line {line}: {e}")))?;
        let config = Configuration::new(gains)?;

        match index.get(&id) {
            None => {
                index.insert(id.clone(), users.len());
                order.push(id.clone());
                users.push(User {
                    id,
                    weight,
                    loss_type,
                    age,
                    sex,
                    configs: BTreeMap::from([(fit, config)]),
                });
            }
            Some(&ui) => {
                let u = &mut users[ui];
                if u.weight != weight || u.loss_type != loss_type || u.age != age || u.sex != sex {
                    return Err(Error::invalid(format!(
                        "line {line}: user {id} has inconsistent weight/loss_type/age/sex across rows"
                    )));
                }
                if u.configs.insert(fit, config).is_some() {
                    return Err(Error::invalid(format!("line {line}: user {id} repeats fit_type {fit}")));
                }
            }
        }
    }
    Dataset::new(users)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_dataset(open(path)?).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_dataset(dataset: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_COLUMNS)?;
    for (u, fit, c) in dataset.prescriptions() {
        let mut row = vec![
            u.id.clone(),
            u.weight.to_string(),
            u.loss_type.to_string(),
            fit.to_string(),
        ];
        row.extend(c.gains().iter().map(f64::to_string));
        row.push(u.age.to_string());
        row.push(u.sex.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::write(path, e))?;
    write_dataset(dataset, file)
}

pub fn read_deviations(reader: impl Read) -> Result<Vec<DeviationPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(rdr.headers()?, &DEVIATION_COLUMNS, "deviations")?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(DeviationPoint::new(
            number(&rec, 0, line, &DEVIATION_COLUMNS)?,
            number(&rec, 1, line, &DEVIATION_COLUMNS)?,
        ));
    }
    Ok(out)
}

pub fn load_deviations(path: impl AsRef<Path>) -> Result<Vec<DeviationPoint>> {
    read_deviations(open(path.as_ref())?)
}

pub fn write_deviations(points: &[DeviationPoint], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DEVIATION_COLUMNS)?;
    for p in points {
        w.write_record([p.low.to_string(), p.high.to_string()])?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::write(path, e))
}

pub fn load_presets(path: impl AsRef<Path>) -> Result<PresetSet> {
    let configs: Vec<Configuration> = read_json(&path)?;
    let mut checked = Vec::with_capacity(configs.len());
    for c in configs {
        checked.push(Configuration::new(*c.gains())?);
    }
    Ok(PresetSet::new(checked))
}

pub fn save_presets(presets: &PresetSet, path: impl AsRef<Path>) -> Result<()> {
    write_json(path, presets)
}

/// Record of a run: enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub params: serde_json::Value,
    /// `"synthetic"` for the bundled deviation model, otherwise the file used.
    pub deviation_source: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, params: serde_json::Value, deviation_source: String) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            params,
            deviation_source,
            outputs: Vec::new(),
        }
    }
}

pub fn ensure_dir(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))
}
