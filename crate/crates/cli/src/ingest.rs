//! CSV data directories.
//!
//! Layout: `outcome.csv` with header `id,y,a`; optional `scalars.csv` with
//! header `id,<name>...`; one `functional_<name>.csv` per curve whose first
//! row is `grid,<s_1>,...,<s_r>` and whose other rows are `id,<x(s_1)>,...`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use cfam_core::{Covariates, FunctionalCovariate, Grid, TrialData};
use ndarray::{Array1, Array2};

use crate::error::{CliError, CliResult};

pub const OUTCOME_FILE: &str = "outcome.csv";
pub const SCALARS_FILE: &str = "scalars.csv";
const FUNCTIONAL_PREFIX: &str = "functional_";

/// Covariates read from a directory, in row order of `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub ids: Vec<String>,
    pub functional_names: Vec<String>,
    pub scalar_names: Vec<String>,
    pub covariates: Covariates<f64>,
}

/// A fully ingested trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub table: CovariateTable,
    /// Original arm labels; arm `a` of `data` is `arm_labels[a - 1]`.
    pub arm_labels: Vec<String>,
    pub data: TrialData<f64>,
}

/// Accumulates problems so one run reports all of them.
#[derive(Default)]
struct Report {
    issues: Vec<String>,
}

impl Report {
    fn push(&mut self, msg: String) {
        self.issues.push(msg);
    }

    fn finish(self) -> CliResult<()> {
        if self.issues.is_empty() {
            return Ok(());
        }
        for i in &self.issues {
            log::error!("ingestion: {i}");
        }
        let shown: Vec<&str> = self.issues.iter().take(5).map(String::as_str).collect();
        let more = self.issues.len().saturating_sub(shown.len());
        let tail = if more > 0 { format!("; and {more} more") } else { String::new() };
        Err(CliError::Data(format!("{} ingestion problem(s): {}{tail}", self.issues.len(), shown.join("; "))))
    }
}

fn read_rows(path: &Path) -> CliResult<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    rdr.records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Parses a finite number, recording `file row R column C` on failure.
/// Rows are 1-based file lines.
fn number(report: &mut Report, file: &str, row: usize, column: &str, cell: &str) -> f64 {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        Ok(_) => {
            report.push(format!("{file} row {row} column {column}: non-finite value {cell:?}"));
            f64::NAN
        }
        Err(_) => {
            report.push(format!("{file} row {row} column {column}: not a number {cell:?}"));
            f64::NAN
        }
    }
}

/// Rows keyed by id, checking width and duplicates. Returns `(line, cells)`.
fn keyed_rows<'a>(report: &mut Report, file: &str, rows: &'a [csv::StringRecord], width: usize) -> BTreeMap<String, (usize, &'a csv::StringRecord)> {
    let mut out = BTreeMap::new();
    for (k, rec) in rows.iter().enumerate() {
        let line = k + 2;
        if rec.len() != width {
            report.push(format!("{file} row {line}: expected {width} fields, found {}", rec.len()));
            continue;
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            report.push(format!("{file} row {line}: empty id"));
        } else if out.insert(id.clone(), (line, rec)).is_some() {
            report.push(format!("{file} row {line}: duplicate id {id:?}"));
        }
    }
    out
}

fn functional_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix(FUNCTIONAL_PREFIX).and_then(|s| s.strip_suffix(".csv")) {
            out.push((stem.to_string(), e.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Checks that `keys` covers exactly `ids`.
fn check_ids(report: &mut Report, file: &str, ids: &[String], keys: &BTreeMap<String, (usize, &csv::StringRecord)>) {
    for id in ids {
        if !keys.contains_key(id) {
            report.push(format!("{file}: missing id {id:?}"));
        }
    }
    let known: std::collections::HashSet<&String> = ids.iter().collect();
    for (id, (line, _)) in keys {
        if !known.contains(id) {
            report.push(format!("{file} row {line}: unknown id {id:?}"));
        }
    }
}

fn read_scalars(report: &mut Report, path: &Path, ids: &[String]) -> CliResult<(Vec<String>, Array2<f64>)> {
    let file = file_name(path);
    let rows = read_rows(path)?;
    let Some(header) = rows.first() else {
        report.push(format!("{file}: empty file"));
        return Ok((Vec::new(), Array2::zeros((ids.len(), 0))));
    };
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let keyed = keyed_rows(report, &file, &rows[1..], names.len() + 1);
    check_ids(report, &file, ids, &keyed);
    let mut z = Array2::zeros((ids.len(), names.len()));
    for (i, id) in ids.iter().enumerate() {
        if let Some((line, rec)) = keyed.get(id) {
            for (k, name) in names.iter().enumerate() {
                z[[i, k]] = number(report, &file, *line, name, &rec[k + 1]);
            }
        }
    }
    Ok((names, z))
}

fn read_functional(report: &mut Report, path: &Path, ids: &[String]) -> CliResult<Option<FunctionalCovariate<f64>>> {
    let file = file_name(path);
    let rows = read_rows(path)?;
    let Some(header) = rows.first() else {
        report.push(format!("{file}: empty file"));
        return Ok(None);
    };
    let before = report.issues.len();
    let points: Vec<f64> = header
        .iter()
        .enumerate()
        .skip(1)
        .map(|(c, cell)| number(report, &file, 1, &format!("{}", c + 1), cell))
        .collect();
    let grid = if report.issues.len() == before {
        match Grid::new(points.clone()) {
            Ok(_) if points[0] < 0.0 || points[points.len() - 1] > 1.0 => {
                report.push(format!("{file} row 1: grid points must lie in [0, 1]; rescale the curve domain"));
                None
            }
            Ok(g) => Some(g),
            Err(e) => {
                report.push(format!("{file} row 1: inconsistent grid: {e}"));
                None
            }
        }
    } else {
        None
    };
    let keyed = keyed_rows(report, &file, &rows[1..], points.len() + 1);
    check_ids(report, &file, ids, &keyed);
    let mut x = Array2::zeros((ids.len(), points.len()));
    for (i, id) in ids.iter().enumerate() {
        if let Some((line, rec)) = keyed.get(id) {
            for l in 0..points.len() {
                x[[i, l]] = number(report, &file, *line, &format!("{}", l + 2), &rec[l + 1]);
            }
        }
    }
    Ok(grid.and_then(|g| FunctionalCovariate::new(x, g).ok()))
}

/// Row ids in file order from the first available of `outcome.csv`,
/// `scalars.csv` and the functional files.
fn leading_ids(report: &mut Report, dir: &Path, functional: &[(String, PathBuf)]) -> CliResult<Vec<String>> {
    let outcome = dir.join(OUTCOME_FILE);
    let scalars = dir.join(SCALARS_FILE);
    let source = if outcome.exists() {
        outcome
    } else if scalars.exists() {
        scalars
    } else if let Some((_, p)) = functional.first() {
        p.clone()
    } else {
        return Err(CliError::Data(format!("{} has no covariate files", dir.display())));
    };
    let rows = read_rows(&source)?;
    let file = file_name(&source);
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    let keyed = keyed_rows(report, &file, rows.get(1..).unwrap_or(&[]), width);
    let mut ids: Vec<(usize, String)> = keyed.into_iter().map(|(id, (line, _))| (line, id)).collect();
    ids.sort();
    Ok(ids.into_iter().map(|(_, id)| id).collect())
}

fn read_covariates(report: &mut Report, dir: &Path, ids: &[String]) -> CliResult<CovariateTable> {
    let functional = functional_files(dir)?;
    let scalars_path = dir.join(SCALARS_FILE);
    let (scalar_names, z) = if scalars_path.exists() {
        read_scalars(report, &scalars_path, ids)?
    } else {
        (Vec::new(), Array2::zeros((ids.len(), 0)))
    };
    let mut curves = Vec::new();
    let mut names = Vec::new();
    for (name, path) in &functional {
        if let Some(f) = read_functional(report, path, ids)? {
            curves.push(f);
        }
        names.push(name.clone());
    }
    if ids.is_empty() {
        report.push("no subjects found".into());
    }
    if !report.issues.is_empty() {
        return Ok(CovariateTable {
            ids: ids.to_vec(),
            functional_names: names,
            scalar_names,
            covariates: Covariates {
                functional: Vec::new(),
                scalars: Array2::zeros((0, 0)),
            },
        });
    }
    let covariates = Covariates::new(curves, z).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(CovariateTable {
        ids: ids.to_vec(),
        functional_names: names,
        scalar_names,
        covariates,
    })
}

/// Covariates only, for prediction. Outcomes are ignored when present.
pub fn ingest_covariates(dir: &Path) -> CliResult<CovariateTable> {
    let mut report = Report::default();
    let functional = functional_files(dir)?;
    let ids = leading_ids(&mut report, dir, &functional)?;
    let table = read_covariates(&mut report, dir, &ids)?;
    report.finish()?;
    Ok(table)
}

/// Sorted distinct labels, numerically when every label is a number.
fn arm_order(labels: &[String]) -> Vec<String> {
    let mut uniq: Vec<String> = labels.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.iter().all(|l| l.parse::<f64>().is_ok()) {
        uniq.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    uniq
}

/// Reads and validates a trial directory. Arms are relabelled `1..=L` in
/// sorted label order; `pi` is the observed arm frequency.
pub fn ingest(dir: &Path) -> CliResult<Ingested> {
    let mut report = Report::default();
    let path = dir.join(OUTCOME_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("{} not found", path.display())));
    }
    let rows = read_rows(&path)?;
    let header: Vec<String> = rows.first().map(|r| r.iter().map(str::to_string).collect()).unwrap_or_default();
    if header != ["id", "y", "a"] {
        return Err(CliError::Data(format!("{OUTCOME_FILE} row 1: header must be id,y,a, found {}", header.join(","))));
    }
    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    let keyed = keyed_rows(&mut report, OUTCOME_FILE, &rows[1..], 3);
    let mut ordered: Vec<(&String, &(usize, &csv::StringRecord))> = keyed.iter().collect();
    ordered.sort_by_key(|(_, (line, _))| *line);
    for (id, (line, rec)) in ordered {
        ids.push(id.clone());
        y.push(number(&mut report, OUTCOME_FILE, *line, "y", &rec[1]));
        if rec[2].is_empty() {
            report.push(format!("{OUTCOME_FILE} row {line} column a: empty arm label"));
        }
        labels.push(rec[2].to_string());
    }
    let table = read_covariates(&mut report, dir, &ids)?;
    let arm_labels = arm_order(&labels);
    if arm_labels.len() < 2 && !ids.is_empty() {
        report.push(format!("{OUTCOME_FILE}: at least two arms are required, found {}", arm_labels.len()));
    }
    report.finish()?;
    let index: HashMap<&str, usize> = arm_labels.iter().enumerate().map(|(k, l)| (l.as_str(), k + 1)).collect();
    let arms = labels.iter().map(|l| index[l.as_str()]).collect();
    let data = TrialData::with_empirical_pi(Array1::from(y), arms, arm_labels.len(), table.covariates.clone())?;
    Ok(Ingested { table, arm_labels, data })
}

/// Writes a trial in the layout [`ingest`] reads.
pub fn export(ing: &Ingested, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let io = |e: csv::Error| CliError::Config(format!("write failed: {e}"));
    let t = &ing.table;
    let raw = ing.data.raw_outcomes();
    let mut w = csv::Writer::from_path(dir.join(OUTCOME_FILE)).map_err(io)?;
    w.write_record(["id", "y", "a"]).map_err(io)?;
    for (i, id) in t.ids.iter().enumerate() {
        w.write_record([id.clone(), raw[i].to_string(), ing.arm_labels[ing.data.arms[i] - 1].clone()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Config(e.to_string()))?;
    if !t.scalar_names.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(SCALARS_FILE)).map_err(io)?;
        let mut head = vec!["id".to_string()];
        head.extend(t.scalar_names.iter().cloned());
        w.write_record(&head).map_err(io)?;
        for (i, id) in t.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(t.covariates.scalars.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Config(e.to_string()))?;
    }
    for (name, f) in t.functional_names.iter().zip(&t.covariates.functional) {
        let mut w = csv::Writer::from_path(dir.join(format!("{FUNCTIONAL_PREFIX}{name}.csv"))).map_err(io)?;
        let mut head = vec!["grid".to_string()];
        head.extend(f.grid.points().iter().map(|v| v.to_string()));
        w.write_record(&head).map_err(io)?;
        for (i, id) in t.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(f.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}
