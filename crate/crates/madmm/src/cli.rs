//! Batch experiment front-end: configured multi-cell runs, EOC tables,
//! and result emission.
//!
//! # Structure
//!
//! * [`ExperimentConfig`] — which problem, which drivers, which target
//!   levels, and the solver parameters; parsed from a flat `key=value`
//!   file ([`ExperimentConfig::parse`]) with CLI flags overriding file
//!   keys.
//! * [`run_experiment`] — solves every (algorithm, level) cell, measures
//!   `E(h)` against the exact control (or a fine-level reference when no
//!   exact control is known), and assembles an [`EocTable`]. Cells may
//!   run in parallel; aggregation is order-stable by (algorithm, level).
//! * [`compute_eoc`] — the experimental order of convergence
//!   `(log E₁ − log E₂)/(log h₁ − log h₂)`.
//! * [`emit`] — writes records and tables as CSV (fixed column order,
//!   reproducible byte-for-byte), schema-versioned JSON, or plot-ready
//!   `(x, y)` series. Timing data is kept out of CSV bodies and lives in
//!   the JSON record and a separate metadata file.
//!
//! Thread count follows rayon's `RAYON_NUM_THREADS` environment
//! variable; results do not depend on it.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{
    run_classical, run_inexact, run_madmm, Algorithm, RunRecord, SolverConfig, Termination,
};
use crate::error::{Error, Result};
use crate::problems::{example1, example2, reference_solution, ProblemInstance, ProblemSpec};

/// Reference level used for `E(h)` on problems without an exact control:
/// three levels above the finest target, capped here.
pub const REFERENCE_CAP_DISK: u32 = 8;

/// Cap for the manufactured square problem's data-reference level.
pub const REFERENCE_CAP_SQUARE: u32 = 9;

/// A batch experiment: one problem, a subset of drivers, a list of
/// target levels, and shared solver parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Problem name: `example1` (disk) or `example2` (square).
    pub problem: String,
    /// Drivers to run; at least one.
    pub algorithms: Vec<Algorithm>,
    /// Target levels, nonempty and strictly increasing.
    pub levels: Vec<u32>,
    /// Penalty override (default `0.1·α`).
    pub sigma: Option<f64>,
    /// Step-length override (defaults per algorithm).
    pub tau: Option<f64>,
    /// Termination tolerance on η.
    pub eta_tol: f64,
    /// Iteration cap per solve.
    pub max_iter: usize,
    /// Certificate schedule scale.
    pub xi_scale: f64,
    /// Where [`emit`] writes results.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: "example2".to_string(),
            algorithms: vec![Algorithm::Madmm],
            levels: vec![4, 5, 6],
            sigma: None,
            tau: None,
            eta_tol: 1e-6,
            max_iter: 500,
            xi_scale: 1e-3,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Parses a level list: either an inclusive range `a..b` or a
/// comma-separated list `a,b,c`.
///
/// # Errors
///
/// Malformed numbers, an empty list, or a reversed range.
pub fn parse_levels(text: &str) -> Result<Vec<u32>> {
    let text = text.trim();
    let levels: Vec<u32> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: u32 = lo
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad level range start `{lo}`")))?;
        let hi: u32 = hi
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad level range end `{hi}`")))?;
        if lo > hi {
            return Err(Error::Config(format!("empty level range `{text}`")));
        }
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad level `{s}`")))
            })
            .collect::<Result<_>>()?
    };
    if levels.is_empty() {
        return Err(Error::Config("no levels given".to_string()));
    }
    Ok(levels)
}

/// Parses a comma-separated algorithm subset, e.g. `classical,madmm`.
///
/// # Errors
///
/// Unknown algorithm names.
pub fn parse_algorithms(text: &str) -> Result<Vec<Algorithm>> {
    text.split(',')
        .map(|s| s.parse::<Algorithm>())
        .collect::<Result<Vec<_>>>()
}

impl ExperimentConfig {
    /// Parses the flat `key=value` config format. Unknown keys are
    /// rejected; later assignments win; `#`-lines and blank lines are
    /// ignored. Documented keys: `problem`, `algorithm` (comma-separated
    /// subset of `classical,inexact,madmm`), `levels` (`a..b` or list),
    /// `sigma`, `tau`, `eta_tol`, `max_iter`, `xi_scale`, `output_dir`.
    ///
    /// # Errors
    ///
    /// Unknown or malformed keys, or a config violating
    /// [`ExperimentConfig::validate`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: bad number `{v}`", lineno + 1)))
            };
            match key {
                "problem" => config.problem = value.to_string(),
                "algorithm" => config.algorithms = parse_algorithms(value)?,
                "levels" => config.levels = parse_levels(value)?,
                "sigma" => config.sigma = Some(parse_f64(value)?),
                "tau" => config.tau = Some(parse_f64(value)?),
                "eta_tol" => config.eta_tol = parse_f64(value)?,
                "max_iter" => {
                    config.max_iter = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad max_iter `{value}`", lineno + 1))
                    })?;
                }
                "xi_scale" => config.xi_scale = parse_f64(value)?,
                "output_dir" => config.output_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Reads and parses a config file.
    ///
    /// # Errors
    ///
    /// I/O failures and everything [`ExperimentConfig::parse`] rejects.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    /// Checks the structural invariants: known problem, at least one
    /// algorithm, levels nonempty and strictly increasing.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] naming the violated invariant.
    pub fn validate(&self) -> Result<()> {
        if self.problem != "example1" && self.problem != "example2" {
            return Err(Error::Config(format!(
                "unknown problem `{}` (expected example1 or example2)",
                self.problem
            )));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".to_string()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one level is required".to_string()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "levels must be strictly increasing, got {:?}",
                self.levels
            )));
        }
        Ok(())
    }

    /// The per-algorithm solver configuration this experiment uses.
    #[must_use]
    pub fn solver_config(&self, algorithm: Algorithm) -> SolverConfig {
        SolverConfig {
            algorithm,
            sigma: self.sigma,
            tau: self.tau,
            eta_tol: self.eta_tol,
            max_iter: self.max_iter,
            xi_scale: self.xi_scale,
            start_level: None,
        }
    }
}

/// Experimental order of convergence of the error pair `(E₁, E₂)` at
/// mesh sizes `(h₁, h₂)`: `(log E₁ − log E₂)/(log h₁ − log h₂)`.
///
/// # Errors
///
/// Nonpositive arguments, or `h₁ = h₂`.
pub fn compute_eoc(e1: f64, e2: f64, h1: f64, h2: f64) -> Result<f64> {
    for (name, v) in [("E1", e1), ("E2", e2), ("h1", h1), ("h2", h2)] {
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::invalid(format!("{name} = {v} must be positive")));
        }
    }
    if h1 == h2 {
        return Err(Error::invalid("h1 and h2 must differ".to_string()));
    }
    Ok((e1.ln() - e2.ln()) / (h1.ln() - h2.ln()))
}

/// One row of an EOC table: a converged (or failed) solve at one level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EocRow {
    /// Driver that produced the row.
    pub algorithm: Algorithm,
    /// Target level.
    pub level: u32,
    /// Mesh size of the level.
    pub h: f64,
    /// State (interior) dofs of the level.
    pub dofs: usize,
    /// L² control error against the exact control or the reference;
    /// absent when the cell failed.
    #[serde(rename = "E")]
    pub e: Option<f64>,
    /// EOC against the previous level of the same algorithm; absent for
    /// the first row and around failed cells.
    #[serde(rename = "EOC")]
    pub eoc: Option<f64>,
    /// Final η of the run.
    pub eta: f64,
    /// Outer iterations.
    pub iterations: usize,
    /// Wall-clock seconds (kept out of the CSV body).
    pub wall_time: f64,
    /// Whether the run terminated by tolerance.
    pub converged: bool,
}

/// EOC table across levels, grouped by algorithm.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EocTable {
    /// Rows ordered by (algorithm, level).
    pub rows: Vec<EocRow>,
}

/// Fixed column order of the EOC-table CSV body.
pub const EOC_CSV_HEADER: &str = "algorithm,level,h,dofs,E,EOC,eta,iterations,converged";

impl EocTable {
    /// Writes the table as CSV in the fixed column order; timing columns
    /// are excluded so reruns are byte-identical (timings live in JSON).
    ///
    /// # Errors
    ///
    /// I/O failures on the writer.
    pub fn write_csv(&self, out: &mut dyn IoWrite) -> Result<()> {
        writeln!(out, "{EOC_CSV_HEADER}")?;
        for row in &self.rows {
            let e = row.e.map_or(String::new(), |v| format!("{v:.12e}"));
            let eoc = row.eoc.map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(
                out,
                "{},{},{:.12e},{},{},{},{:.12e},{},{}",
                row.algorithm, row.level, row.h, row.dofs, e, eoc, row.eta, row.iterations,
                row.converged,
            )?;
        }
        Ok(())
    }

    /// [`EocTable::write_csv`] into a `String`.
    #[must_use]
    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV body is ASCII")
    }

    /// True when every row's run terminated by tolerance.
    #[must_use]
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }
}

/// Outcome of one experiment cell (algorithm × level).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CellOutcome {
    /// The driver returned a record (converged or iteration-capped).
    Completed(RunRecord),
    /// The driver failed; a partial record is attached when one exists.
    Failed {
        /// Failure description.
        message: String,
        /// Iterations completed before the failure.
        partial: Option<RunRecord>,
    },
}

/// Everything an experiment produced: the table plus all run records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    /// The assembled EOC table, ordered by (algorithm, level).
    pub table: EocTable,
    /// One outcome per cell, in the same order as the table rows.
    pub cells: Vec<CellOutcome>,
    /// Configuration echo.
    pub config: ExperimentConfig,
}

impl ExperimentOutcome {
    /// The completed records, in table order.
    #[must_use]
    pub fn records(&self) -> Vec<&RunRecord> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                CellOutcome::Completed(r) => Some(r),
                CellOutcome::Failed { partial, .. } => partial.as_ref(),
            })
            .collect()
    }
}

fn build_spec(problem: &str, max_level: u32) -> Result<(ProblemSpec, u32, Option<u32>)> {
    // Returns (spec, instance top level, reference level used for E).
    match problem {
        "example1" => {
            let reference = (max_level + 3).min(REFERENCE_CAP_DISK);
            if reference <= max_level {
                return Err(Error::Config(format!(
                    "example1 levels reach {max_level}, leaving no room for a finer \
                     reference (cap {REFERENCE_CAP_DISK})"
                )));
            }
            Ok((example1(), reference, Some(reference)))
        }
        "example2" => {
            let data_reference = (max_level + 3).min(REFERENCE_CAP_SQUARE);
            if max_level + 2 > data_reference {
                return Err(Error::Config(format!(
                    "example2 levels reach {max_level}, too close to the data-reference \
                     cap {REFERENCE_CAP_SQUARE}"
                )));
            }
            Ok((example2(data_reference)?, max_level, None))
        }
        other => Err(Error::Config(format!("unknown problem `{other}`"))),
    }
}

/// Runs every (algorithm, level) cell of the experiment and assembles
/// the EOC table. Cells run in parallel (rayon); aggregation is
/// order-stable by (algorithm, level), so output is deterministic.
///
/// Per-cell driver failures are recorded in the cell outcome and leave
/// a row without `E`; the table is still produced.
///
/// # Errors
///
/// Invalid configuration, instance construction failures, or a failed
/// reference solve (for problems measured against a reference).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let max_level = *config.levels.last().expect("validated nonempty");
    let (spec, top_level, reference_level) = build_spec(&config.problem, max_level)?;
    let instance = ProblemInstance::new(spec, top_level)?;

    let reference = match reference_level {
        Some(fine) => Some((
            fine,
            reference_solution(&instance, fine, &config.solver_config(Algorithm::Madmm))?,
        )),
        None => None,
    };

    let mut cells: Vec<(Algorithm, u32)> = Vec::new();
    for &algorithm in &config.algorithms {
        for &level in &config.levels {
            cells.push((algorithm, level));
        }
    }
    cells.sort_unstable();

    let outcomes: Vec<(Algorithm, u32, CellOutcome)> = cells
        .par_iter()
        .map(|&(algorithm, level)| {
            let solver = config.solver_config(algorithm);
            let run = match algorithm {
                Algorithm::Classical => run_classical(&instance, level, &solver),
                Algorithm::Inexact => run_inexact(&instance, level, &solver),
                Algorithm::Madmm => run_madmm(&instance, &solver, level),
            };
            let outcome = match run {
                Ok(record) => CellOutcome::Completed(record),
                Err(Error::Aborted { reason, record }) => CellOutcome::Failed {
                    message: reason.to_string(),
                    partial: Some(*record),
                },
                Err(other) => CellOutcome::Failed {
                    message: other.to_string(),
                    partial: None,
                },
            };
            (algorithm, level, outcome)
        })
        .collect();

    // Aggregate into the table; rows inherit the sorted cell order.
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut cell_outcomes = Vec::with_capacity(outcomes.len());
    let mut previous: BTreeMap<Algorithm, (f64, f64)> = BTreeMap::new();
    for (algorithm, level, outcome) in outcomes {
        let h = instance.hierarchy().level(level as usize).mesh_size();
        let record = match &outcome {
            CellOutcome::Completed(r) => Some(r),
            CellOutcome::Failed { partial, .. } => partial.as_ref(),
        };
        let e = match record {
            Some(r) if matches!(outcome, CellOutcome::Completed(_)) => {
                let z = &r.final_state.z;
                let value = match &reference {
                    Some((fine, u_ref)) => {
                        instance.error_vs_reference(level, z, *fine, u_ref)?
                    }
                    None => instance.error_vs_exact(level, z)?,
                };
                Some(value)
            }
            _ => None,
        };
        let eoc = match (e, previous.get(&algorithm)) {
            (Some(e2), Some(&(h1, e1))) => compute_eoc(e1, e2, h1, h).ok(),
            _ => None,
        };
        if let Some(e_val) = e {
            previous.insert(algorithm, (h, e_val));
        } else {
            previous.remove(&algorithm);
        }
        rows.push(EocRow {
            algorithm,
            level,
            h,
            dofs: record
                .and_then(|r| r.rows.last().map(|row| row.dofs))
                .unwrap_or(0),
            e,
            eoc,
            eta: record.map_or(f64::INFINITY, RunRecord::final_eta),
            iterations: record.map_or(0, RunRecord::iterations),
            wall_time: record.map_or(0.0, |r| r.total_wall_time),
            converged: matches!(
                &outcome,
                CellOutcome::Completed(r) if r.termination == Termination::Tolerance
            ),
        });
        cell_outcomes.push(outcome);
    }

    Ok(ExperimentOutcome {
        table: EocTable { rows },
        cells: cell_outcomes,
        config: config.clone(),
    })
}

/// Output format selector for [`emit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    /// Per-record iteration CSVs plus a summary CSV (byte-reproducible
    /// bodies) and a separate timing metadata file.
    Csv,
    /// One schema-versioned JSON file with every record.
    Json,
    /// Plain `(x, y)` series: η vs k per record, E vs h per algorithm.
    Plotdata,
}

/// Schema-versioned on-disk envelope for record sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordsFile {
    /// Format version of this envelope; currently 1.
    pub schema_version: u32,
    /// The records.
    pub records: Vec<RunRecord>,
}

/// Fixed column order of the summary CSV.
pub const SUMMARY_CSV_HEADER: &str =
    "problem,algorithm,target_level,dofs,iterations,termination,final_eta";

/// Writes `records` (and, when given, the EOC table) under `dir` in the
/// chosen format, returning the created paths in a fixed order.
///
/// CSV bodies never contain timings, so identical runs emit
/// byte-identical files; wall-clock data goes to `metadata.json`.
///
/// # Errors
///
/// I/O or serialization failures.
pub fn emit(
    records: &[&RunRecord],
    table: Option<&EocTable>,
    format: EmitFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        EmitFormat::Csv => {
            let summary_path = dir.join("summary.csv");
            let mut summary = format!("{SUMMARY_CSV_HEADER}\n");
            for record in records {
                let last_dofs = record.rows.last().map_or(0, |r| r.dofs);
                let termination = match record.termination {
                    Termination::Tolerance => "tolerance",
                    Termination::MaxIter => "max_iter",
                };
                let _ = writeln!(
                    summary,
                    "{},{},{},{},{},{},{:.12e}",
                    record.problem,
                    record.algorithm,
                    record.target_level,
                    last_dofs,
                    record.iterations(),
                    termination,
                    record.final_eta(),
                );
            }
            fs::write(&summary_path, summary)?;
            written.push(summary_path);
            for record in records {
                let path = dir.join(format!(
                    "iters_{}_{}_l{}.csv",
                    record.problem, record.algorithm, record.target_level
                ));
                let mut buf = Vec::new();
                record.write_csv(&mut buf)?;
                fs::write(&path, buf)?;
                written.push(path);
            }
            if let Some(table) = table {
                let path = dir.join("eoc_table.csv");
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                fs::write(&path, buf)?;
                written.push(path);
            }
            // Timing sidecar: everything time-dependent lives here.
            #[derive(Serialize)]
            struct Timing<'a> {
                problem: &'a str,
                algorithm: Algorithm,
                target_level: u32,
                total_wall_time: f64,
                per_iteration: Vec<f64>,
            }
            let timings: Vec<Timing> = records
                .iter()
                .map(|r| Timing {
                    problem: &r.problem,
                    algorithm: r.algorithm,
                    target_level: r.target_level,
                    total_wall_time: r.total_wall_time,
                    per_iteration: r.rows.iter().map(|row| row.wall_time).collect(),
                })
                .collect();
            let meta_path = dir.join("metadata.json");
            fs::write(&meta_path, serde_json::to_string_pretty(&timings)?)?;
            written.push(meta_path);
        }
        EmitFormat::Json => {
            let envelope = RecordsFile {
                schema_version: 1,
                records: records.iter().map(|r| (*r).clone()).collect(),
            };
            let path = dir.join("records.json");
            fs::write(&path, serde_json::to_string_pretty(&envelope)?)?;
            written.push(path);
        }
        EmitFormat::Plotdata => {
            for record in records {
                let path = dir.join(format!(
                    "eta_{}_{}_l{}.dat",
                    record.problem, record.algorithm, record.target_level
                ));
                let mut buf = String::new();
                for row in &record.rows {
                    let _ = writeln!(buf, "{} {:.12e}", row.k, row.eta);
                }
                fs::write(&path, buf)?;
                written.push(path);
            }
            if let Some(table) = table {
                let mut by_algorithm: BTreeMap<Algorithm, String> = BTreeMap::new();
                for row in &table.rows {
                    if let Some(e) = row.e {
                        let _ = writeln!(
                            by_algorithm.entry(row.algorithm).or_default(),
                            "{:.12e} {e:.12e}",
                            row.h
                        );
                    }
                }
                for (algorithm, body) in by_algorithm {
                    let path = dir.join(format!("error_{algorithm}.dat"));
                    fs::write(&path, body)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

/// Loads run records from a [`RecordsFile`] JSON envelope, or from every
/// `*.json` envelope in a directory (sorted by file name).
///
/// # Errors
///
/// I/O failures or malformed JSON.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        entries.sort();
        for entry in entries {
            let envelope: RecordsFile = serde_json::from_str(&fs::read_to_string(&entry)?)?;
            records.extend(envelope.records);
        }
    } else {
        let envelope: RecordsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        records.extend(envelope.records);
    }
    Ok(records)
}

/// Rebuilds an EOC table from stored records: errors are recomputed
/// from each record's final iterate exactly as [`run_experiment`] does
/// (reference solves included, for problems that need one).
///
/// # Errors
///
/// Records from unknown problems, mixed problems, or failed error
/// computation.
pub fn table_from_records(records: &[RunRecord]) -> Result<EocTable> {
    if records.is_empty() {
        return Ok(EocTable::default());
    }
    let problem = records[0].problem.clone();
    if records.iter().any(|r| r.problem != problem) {
        return Err(Error::invalid(
            "all records in one table must come from the same problem".to_string(),
        ));
    }
    let max_level = records.iter().map(|r| r.target_level).max().unwrap_or(0);
    let (spec, top_level, reference_level) = build_spec(&problem, max_level)?;
    let instance = ProblemInstance::new(spec, top_level)?;
    let reference = match reference_level {
        Some(fine) => {
            let mut config = SolverConfig::new(Algorithm::Madmm);
            config.max_iter = 500;
            Some((fine, reference_solution(&instance, fine, &config)?))
        }
        None => None,
    };

    let mut ordered: Vec<&RunRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.algorithm, r.target_level));
    let mut rows = Vec::with_capacity(ordered.len());
    let mut previous: BTreeMap<Algorithm, (f64, f64)> = BTreeMap::new();
    for record in ordered {
        let level = record.target_level;
        let h = instance.hierarchy().level(level as usize).mesh_size();
        let z = &record.final_state.z;
        let e = match &reference {
            Some((fine, u_ref)) => instance.error_vs_reference(level, z, *fine, u_ref)?,
            None => instance.error_vs_exact(level, z)?,
        };
        let eoc = previous
            .get(&record.algorithm)
            .and_then(|&(h1, e1)| compute_eoc(e1, e, h1, h).ok());
        previous.insert(record.algorithm, (h, e));
        rows.push(EocRow {
            algorithm: record.algorithm,
            level,
            h,
            dofs: record.rows.last().map_or(0, |r| r.dofs),
            e: Some(e),
            eoc,
            eta: record.final_eta(),
            iterations: record.iterations(),
            wall_time: record.total_wall_time,
            converged: record.termination == Termination::Tolerance,
        });
    }
    Ok(EocTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_all_documented_keys() {
        let text = "\
# benchmark configuration
problem = example2
algorithm = classical, madmm
levels = 2..4
sigma = 0.01
tau = 1.0
eta_tol = 1e-5
max_iter = 77
xi_scale = 1e-4
output_dir = out/bench
";
        let config = ExperimentConfig::parse(text).unwrap();
        assert_eq!(config.problem, "example2");
        assert_eq!(config.algorithms, vec![Algorithm::Classical, Algorithm::Madmm]);
        assert_eq!(config.levels, vec![2, 3, 4]);
        assert_eq!(config.sigma, Some(0.01));
        assert_eq!(config.tau, Some(1.0));
        assert_eq!(config.eta_tol, 1e-5);
        assert_eq!(config.max_iter, 77);
        assert_eq!(config.xi_scale, 1e-4);
        assert_eq!(config.output_dir, PathBuf::from("out/bench"));
    }

    #[test]
    fn config_rejects_malformed_input() {
        assert!(ExperimentConfig::parse("frequency = 3").is_err());
        assert!(ExperimentConfig::parse("problem example2").is_err());
        assert!(ExperimentConfig::parse("levels = 5..3").is_err());
        assert!(ExperimentConfig::parse("levels = 3,3").is_err());
        assert!(ExperimentConfig::parse("problem = example9").is_err());
        assert!(ExperimentConfig::parse("algorithm = newton").is_err());
        // Later assignments win.
        let config = ExperimentConfig::parse("eta_tol = 1e-4\neta_tol = 1e-8\n").unwrap();
        assert_eq!(config.eta_tol, 1e-8);
    }

    #[test]
    fn parse_levels_accepts_both_syntaxes() {
        assert_eq!(parse_levels("4..6").unwrap(), vec![4, 5, 6]);
        assert_eq!(parse_levels("4,5,6").unwrap(), vec![4, 5, 6]);
        assert_eq!(parse_levels(" 7 ").unwrap(), vec![7]);
        assert!(parse_levels("a..b").is_err());
        assert!(parse_levels("").is_err());
    }

    #[test]
    fn eoc_matches_halving_identities() {
        // E halves when h halves → slope 1; quarters → slope 2.
        assert!((compute_eoc(0.4, 0.2, 0.1, 0.05).unwrap() - 1.0).abs() < 1e-12);
        assert!((compute_eoc(0.4, 0.1, 0.1, 0.05).unwrap() - 2.0).abs() < 1e-12);
        // Tabulated pair across one halving.
        let got = compute_eoc(0.0172, 6.71e-3, 2f64.sqrt() / 16.0, 2f64.sqrt() / 32.0).unwrap();
        assert!((got - 1.358).abs() < 1e-3, "EOC = {got}");
        assert!(compute_eoc(-0.1, 0.2, 0.1, 0.05).is_err());
        assert!(compute_eoc(0.1, 0.0, 0.1, 0.05).is_err());
        assert!(compute_eoc(0.1, 0.2, 0.1, 0.1).is_err());
    }

    fn tiny_experiment() -> ExperimentConfig {
        ExperimentConfig {
            problem: "example2".to_string(),
            algorithms: vec![Algorithm::Madmm],
            levels: vec![2, 3],
            sigma: None,
            tau: None,
            eta_tol: 1e-5,
            max_iter: 200,
            xi_scale: 1e-3,
            output_dir: PathBuf::from("unused"),
        }
    }

    #[test]
    fn experiment_produces_ordered_rows_with_eoc() {
        let mut config = tiny_experiment();
        config.algorithms = vec![Algorithm::Madmm, Algorithm::Classical];
        let outcome = run_experiment(&config).unwrap();
        let keys: Vec<(Algorithm, u32)> =
            outcome.table.rows.iter().map(|r| (r.algorithm, r.level)).collect();
        assert_eq!(
            keys,
            vec![
                (Algorithm::Classical, 2),
                (Algorithm::Classical, 3),
                (Algorithm::Madmm, 2),
                (Algorithm::Madmm, 3),
            ]
        );
        for (i, row) in outcome.table.rows.iter().enumerate() {
            assert!(row.e.is_some(), "row {i} lost its error");
            // First row of each algorithm has no EOC, second does.
            assert_eq!(row.eoc.is_some(), i % 2 == 1, "row {i}");
            assert!(row.converged, "row {i} did not converge");
        }
        // Errors shrink with refinement for both algorithms.
        assert!(outcome.table.rows[1].e.unwrap() < outcome.table.rows[0].e.unwrap());
        assert!(outcome.table.rows[3].e.unwrap() < outcome.table.rows[2].e.unwrap());
        assert!(outcome.table.all_converged());
    }

    #[test]
    fn experiment_is_deterministic() {
        let config = tiny_experiment();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.table.csv_string(), b.table.csv_string());
        let ra = a.records();
        let rb = b.records();
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.csv_string(), y.csv_string());
        }
    }

    #[test]
    fn single_cell_experiment_has_empty_eoc() {
        let mut config = tiny_experiment();
        config.levels = vec![3];
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.table.rows.len(), 1);
        assert!(outcome.table.rows[0].eoc.is_none());
        assert!(outcome.table.rows[0].e.is_some());
    }

    #[test]
    fn failed_cells_leave_rows_without_error() {
        let mut config = tiny_experiment();
        config.xi_scale = 1e-300; // certificates can never be met
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.table.rows.len(), 2);
        for (row, cell) in outcome.table.rows.iter().zip(&outcome.cells) {
            assert!(row.e.is_none());
            assert!(!row.converged);
            assert!(matches!(cell, CellOutcome::Failed { .. }));
        }
    }

    #[test]
    fn emit_writes_all_three_formats() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&tiny_experiment()).unwrap();
        let records = outcome.records();

        let csvs = emit(&records, Some(&outcome.table), EmitFormat::Csv, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with(SUMMARY_CSV_HEADER));
        assert_eq!(summary.lines().count(), 1 + records.len());
        assert!(dir.path().join("metadata.json").exists());
        assert!(dir.path().join("eoc_table.csv").exists());
        assert!(csvs.len() >= 4);

        // CSV bodies are byte-identical across reruns of the same config.
        let rerun = run_experiment(&tiny_experiment()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit(&rerun.records(), Some(&rerun.table), EmitFormat::Csv, dir2.path()).unwrap();
        for name in ["summary.csv", "eoc_table.csv", "iters_example2_madmm_l2.csv"] {
            let a = fs::read_to_string(dir.path().join(name)).unwrap();
            let b = fs::read_to_string(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }

        emit(&records, Some(&outcome.table), EmitFormat::Json, dir.path()).unwrap();
        let loaded = load_records(&dir.path().join("records.json")).unwrap();
        assert_eq!(loaded.len(), records.len());
        assert_eq!(loaded[0].rows.len(), records[0].rows.len());
        assert_eq!(loaded[0].final_state.u, records[0].final_state.u);

        emit(&records, Some(&outcome.table), EmitFormat::Plotdata, dir.path()).unwrap();
        let eta = fs::read_to_string(dir.path().join("eta_example2_madmm_l2.dat")).unwrap();
        assert_eq!(eta.lines().count(), records[0].rows.len());
        let evh = fs::read_to_string(dir.path().join("error_madmm.dat")).unwrap();
        assert_eq!(evh.lines().count(), 2);
    }

    #[test]
    fn emit_handles_empty_record_sets() {
        let dir = tempfile::tempdir().unwrap();
        emit(&[], None, EmitFormat::Csv, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.trim_end(), SUMMARY_CSV_HEADER);
    }

    #[test]
    fn table_rebuilds_from_stored_records() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&tiny_experiment()).unwrap();
        emit(&outcome.records(), None, EmitFormat::Json, dir.path()).unwrap();
        let records = load_records(&dir.path().join("records.json")).unwrap();
        let table = table_from_records(&records).unwrap();
        assert_eq!(table.rows.len(), outcome.table.rows.len());
        for (a, b) in table.rows.iter().zip(&outcome.table.rows) {
            assert_eq!(a.level, b.level);
            assert!((a.e.unwrap() - b.e.unwrap()).abs() < 1e-14);
        }
        assert!(table_from_records(&[]).unwrap().rows.is_empty());
    }
}
