//! Batch runner: loads a run document, executes trials and writes results.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ibvs_mpc::kalman::KalmanConfig;
use ibvs_mpc::mpc::MpcConfig;
use ibvs_mpc::simworld::{run_trial, ControllerKind, Scenario, SimError, TrialResult, TrialSummary};
use ibvs_mpc::ConfigViolation;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid configuration:\n{}", format_violations(.0))]
    Invalid(Vec<ConfigViolation>),
    #[error("{label} trial {trial} diverged: {source}")]
    Diverged {
        label: String,
        trial: usize,
        source: SimError,
    },
    #[error("{label} trial {trial} failed: {source}")]
    Trial {
        label: String,
        trial: usize,
        source: SimError,
    },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) | CliError::Trial { .. } => 1,
            CliError::Diverged { .. } => 2,
            CliError::Io { .. } => 3,
        }
    }
}

fn format_violations(v: &[ConfigViolation]) -> String {
    v.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Controller kind plus the filter switch, written `MPC2` or `MPC2+KF`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub kf: bool,
}

impl ControllerSpec {
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ControllerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.name(), if self.kf { "+KF" } else { "" })
    }
}

impl std::str::FromStr for ControllerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (base, kf) = match s.split_once('+') {
            Some((b, k)) if k.eq_ignore_ascii_case("kf") => (b, true),
            Some(_) => return Err(format!("unknown controller suffix in `{s}` (expected +KF)")),
            None => (s, false),
        };
        let kind = ControllerKind::parse(base)
            .ok_or_else(|| format!("unknown controller `{base}` (expected IBVS, MPC, MPC1 or MPC2)"))?;
        Ok(Self { kind, kf })
    }
}

impl TryFrom<String> for ControllerSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ControllerSpec> for String {
    fn from(c: ControllerSpec) -> Self {
        c.label()
    }
}

pub fn parse_controller_list(s: &str) -> Result<Vec<ControllerSpec>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub timeseries: bool,
    pub summary: bool,
    pub comparison: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            timeseries: true,
            summary: true,
            comparison: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub repetitions: usize,
    pub controllers: Vec<ControllerSpec>,
    pub seed_base: u64,
    pub output: PathBuf,
    pub emit: EmitFlags,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            repetitions: 5,
            controllers: ControllerKind::ALL
                .into_iter()
                .map(|kind| ControllerSpec { kind, kf: false })
                .collect(),
            seed_base: 0,
            output: PathBuf::from("out"),
            emit: EmitFlags::default(),
        }
    }
}

/// Complete run document. Every section is optional and falls back to defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub mpc: MpcConfig,
    pub kalman: KalmanConfig,
    pub run: RunSettings,
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Every invariant violation across all sections.
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = self.scenario.violations();
        out.extend(self.mpc.violations());
        out.extend(self.kalman.violations());
        if self.run.repetitions < 1 {
            out.push(ConfigViolation::new("run.repetitions", "must be >= 1".into()));
        }
        if self.run.controllers.is_empty() {
            out.push(ConfigViolation::new("run.controllers", "must not be empty".into()));
        }
        let mut seen = Vec::new();
        for c in &self.run.controllers {
            if seen.contains(c) {
                out.push(ConfigViolation::new("run.controllers", format!("duplicate entry {c}")));
            }
            seen.push(*c);
        }
        out
    }
}

/// Command-line overrides applied on top of the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub out: Option<PathBuf>,
    pub controllers: Option<Vec<ControllerSpec>>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut RunSpec) {
        if let Some(s) = self.seed {
            spec.run.seed_base = s;
        }
        if let Some(r) = self.reps {
            spec.run.repetitions = r;
        }
        if let Some(o) = &self.out {
            spec.run.output = o.clone();
        }
        if let Some(c) = &self.controllers {
            spec.run.controllers = c.clone();
        }
    }
}

/// Per-trial record stored as `<controller>/trial_<i>.json` and in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub controller: String,
    pub trial: usize,
    pub seed: u64,
    pub summary: TrialSummary,
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: String,
    pub trials: usize,
    pub converged: usize,
    /// Mean convergence time over the trials that converged.
    pub time_s: Option<f64>,
    pub rmse_error: f64,
    pub rmse_joint: f64,
    pub oscillation: f64,
    pub constraint_violations: f64,
}

pub const CSV_HEADER: [&str; 19] = [
    "t",
    "e1",
    "e2",
    "e3",
    "e4",
    "u_cmd1",
    "u_cmd2",
    "u_cmd3",
    "u_cmd4",
    "u_applied1",
    "u_applied2",
    "u_applied3",
    "u_applied4",
    "meas_valid",
    "qp_status",
    "kf_x1",
    "kf_x2",
    "kf_x3",
    "kf_x4",
];

pub fn timeseries_csv(result: &TrialResult) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &result.records {
        let mut row: Vec<String> = Vec::with_capacity(19);
        row.push(r.t.to_string());
        row.extend(r.e.iter().map(f64::to_string));
        row.extend(r.u_cmd.as_vector().iter().map(f64::to_string));
        row.extend(r.u_applied.as_vector().iter().map(f64::to_string));
        row.push(u8::from(r.measurement_valid).to_string());
        row.push(r.qp_status.map(|s| s.as_str().to_string()).unwrap_or_default());
        match r.kf_estimate {
            Some(x) => row.extend(x.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn comparison_rows(records: &[TrialRecord], order: &[String]) -> Vec<ComparisonRow> {
    order
        .iter()
        .map(|label| {
            let group: Vec<&TrialRecord> = records.iter().filter(|r| &r.controller == label).collect();
            let n = group.len().max(1) as f64;
            let mean = |f: &dyn Fn(&TrialSummary) -> f64| group.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
            let times: Vec<f64> = group.iter().filter_map(|r| r.summary.convergence_time).collect();
            ComparisonRow {
                controller: label.clone(),
                trials: group.len(),
                converged: times.len(),
                time_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
                rmse_error: mean(&|s| s.rmse_error),
                rmse_joint: mean(&|s| s.rmse_joint),
                oscillation: mean(&|s| s.oscillation),
                constraint_violations: mean(&|s| s.constraint_violations as f64),
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

/// Outcome of a batch: all finished trials plus the first failure, if any.
#[derive(Debug)]
pub struct RunReport {
    pub records: Vec<TrialRecord>,
    pub comparison: Vec<ComparisonRow>,
}

/// Executes every (controller, repetition) pair with seed `seed_base + i`
/// and writes the requested outputs.
pub fn run(spec: &RunSpec) -> Result<RunReport, CliError> {
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(CliError::Invalid(violations));
    }
    let out = &spec.run.output;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let jobs: Vec<(ControllerSpec, usize)> = spec
        .run
        .controllers
        .iter()
        .flat_map(|c| (0..spec.run.repetitions).map(move |i| (*c, i)))
        .collect();
    let results: Vec<Result<TrialResult, SimError>> = jobs
        .par_iter()
        .map(|(c, i)| {
            let mut scenario = spec.scenario.clone();
            scenario.controller = c.kind;
            scenario.kf_enabled = c.kf;
            scenario.seed = spec.run.seed_base.wrapping_add(*i as u64);
            run_trial(&scenario, &spec.mpc, &spec.kalman)
        })
        .collect();

    let mut records = Vec::new();
    let mut failure = None;
    for ((c, i), res) in jobs.iter().zip(results) {
        let label = c.label();
        let result = match res {
            Ok(r) => r,
            Err(source) => {
                let err = match source {
                    SimError::TrialDiverged { .. } | SimError::TargetBehindCamera(_) => CliError::Diverged {
                        label,
                        trial: *i,
                        source,
                    },
                    source => CliError::Trial {
                        label,
                        trial: *i,
                        source,
                    },
                };
                failure.get_or_insert(err);
                continue;
            }
        };
        let dir = out.join(&label);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let record = TrialRecord {
            controller: label,
            trial: *i,
            seed: result.seed,
            summary: result.summary,
        };
        if spec.run.emit.timeseries {
            let bytes = timeseries_csv(&result).map_err(|e| CliError::Io {
                path: dir.clone(),
                source: e.into(),
            })?;
            write(&dir.join(format!("trial_{i}.csv")), &bytes)?;
        }
        if spec.run.emit.summary {
            write(&dir.join(format!("trial_{i}.json")), &to_json(&record))?;
        }
        records.push(record);
    }

    if spec.run.emit.summary {
        write(&out.join("summary.json"), &to_json(&records))?;
    }
    let order: Vec<String> = spec.run.controllers.iter().map(ControllerSpec::label).collect();
    let comparison = comparison_rows(&records, &order);
    if spec.run.emit.comparison {
        let bytes = comparison_csv(&comparison).map_err(|e| CliError::Io {
            path: out.join("comparison.csv"),
            source: e.into(),
        })?;
        write(&out.join("comparison.csv"), &bytes)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(RunReport { records, comparison }),
    }
}

/// Rebuilds `comparison.csv` from the per-trial summaries under `outdir`.
pub fn compare(outdir: &Path) -> Result<Vec<ComparisonRow>, CliError> {
    let summary = outdir.join("summary.json");
    let records: Vec<TrialRecord> = if summary.exists() {
        let text = fs::read_to_string(&summary).map_err(io_err(&summary))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", summary.display())))?
    } else {
        let mut recs = Vec::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(outdir)
            .map_err(io_err(outdir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for f in files {
                let text = fs::read_to_string(&f).map_err(io_err(&f))?;
                let rec: TrialRecord =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
                recs.push(rec);
            }
        }
        recs
    };
    let mut order: Vec<String> = Vec::new();
    for r in &records {
        if !order.contains(&r.controller) {
            order.push(r.controller.clone());
        }
    }
    let rows = comparison_rows(&records, &order);
    let path = outdir.join("comparison.csv");
    let bytes = comparison_csv(&rows).map_err(|e| CliError::Io {
        path: path.clone(),
        source: e.into(),
    })?;
    write(&path, &bytes)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_labels_round_trip() {
        for s in ["IBVS", "MPC", "MPC1", "MPC2", "MPC2+KF", "IBVS+KF"] {
            let c: ControllerSpec = s.parse().unwrap();
            assert_eq!(c.label(), s);
        }
        assert_eq!("mpc1+kf".parse::<ControllerSpec>().unwrap().label(), "MPC1+KF");
        assert!("MPC3".parse::<ControllerSpec>().is_err());
        assert!("MPC2+EKF".parse::<ControllerSpec>().is_err());
        assert_eq!(parse_controller_list("IBVS, MPC2+KF").unwrap().len(), 2);
    }

    #[test]
    fn default_document_is_valid() {
        let spec = RunSpec::parse("{}").unwrap();
        assert!(spec.violations().is_empty());
        assert_eq!(spec.run.controllers.len(), 4);
    }

    #[test]
    fn duplicate_and_empty_controllers_rejected() {
        let mut spec = RunSpec::default();
        spec.run.controllers = vec![];
        assert!(spec.violations().iter().any(|v| v.field == "run.controllers"));
        spec.run.controllers = parse_controller_list("MPC,MPC").unwrap();
        assert!(spec.violations().iter().any(|v| v.message.contains("duplicate")));
    }

    #[test]
    fn overrides_replace_document_values() {
        let mut spec = RunSpec::default();
        Overrides {
            seed: Some(9),
            reps: Some(2),
            out: Some(PathBuf::from("x")),
            controllers: Some(parse_controller_list("IBVS").unwrap()),
        }
        .apply(&mut spec);
        assert_eq!(spec.run.seed_base, 9);
        assert_eq!(spec.run.repetitions, 2);
        assert_eq!(spec.run.output, PathBuf::from("x"));
        assert_eq!(spec.run.controllers.len(), 1);
    }

    #[test]
    fn comparison_means_and_convergence_subset() {
        let summary = |t: Option<f64>, e: f64| TrialSummary {
            convergence_time: t,
            rmse_error: e,
            rmse_joint: 2.0 * e,
            constraint_violations: 0,
            oscillation_std: [0.0; 4],
            oscillation: 0.0,
        };
        let recs = vec![
            TrialRecord {
                controller: "MPC".into(),
                trial: 0,
                seed: 0,
                summary: summary(Some(1.0), 0.1),
            },
            TrialRecord {
                controller: "MPC".into(),
                trial: 1,
                seed: 1,
                summary: summary(None, 0.3),
            },
        ];
        let rows = comparison_rows(&recs, &["MPC".into()]);
        assert_eq!(rows[0].trials, 2);
        assert_eq!(rows[0].converged, 1);
        assert_eq!(rows[0].time_s, Some(1.0));
        assert!((rows[0].rmse_error - 0.2).abs() < 1e-15);
        assert!((rows[0].rmse_joint - 0.4).abs() < 1e-15);
    }
}
