//! Experiment runner: configuration, seeds, metric records and their files.
//!
//! Each experiment draws its randomness from `derive_seed(root, name)`, so
//! running a subset never shifts another experiment's numbers. Metric files
//! hold shortest round-trip decimals and are byte-identical across runs with
//! the same configuration; wall-clock times go to `summary.json` only.

mod experiments;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("experiment {name} failed: {message}")]
    Experiment { name: String, message: String },
}

impl HarnessError {
    /// Process exit status: 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Gradcheck,
    Info,
    Kalman,
    StaticIb,
    Seprep,
    ControlSep,
    All,
}

impl Experiment {
    /// Every runnable experiment, in the order `all` runs them.
    pub const EACH: [Experiment; 6] =
        [Self::Gradcheck, Self::Info, Self::Kalman, Self::StaticIb, Self::Seprep, Self::ControlSep];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gradcheck => "gradcheck",
            Self::Info => "info",
            Self::Kalman => "kalman",
            Self::StaticIb => "static-ib",
            Self::Seprep => "seprep",
            Self::ControlSep => "control-sep",
            Self::All => "all",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::EACH
            .iter()
            .chain(&[Self::All])
            .find(|e| e.name() == s)
            .copied()
            .ok_or_else(|| HarnessError::Usage(format!("unknown experiment {s:?}; expected one of {}", experiment_names())))
    }
}

pub fn experiment_names() -> String {
    Experiment::EACH.iter().chain(&[Experiment::All]).map(|e| e.name()).collect::<Vec<_>>().join(" | ")
}

/// Every tunable number of the suite, as one flat key space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub gradcheck_nets: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tol: f64,
    pub info_instances: usize,
    pub info_tol: f64,
    pub kalman_models: usize,
    pub kalman_max_dim: usize,
    pub kalman_max_len: usize,
    pub kalman_tol: f64,
    pub riccati_len: usize,
    pub ib_encoders: usize,
    pub ib_slack: f64,
    pub dpi_instances: usize,
    pub dpi_stacks: usize,
    pub dpi_tol: f64,
    pub ib_seeds: usize,
    pub ib_steps: usize,
    pub ib_z: usize,
    pub ib_n: usize,
    pub ib_beta_high: f64,
    pub ib_acc_min: f64,
    pub ib_info_max: f64,
    pub ib_chance_tol: f64,
    pub sweep_betas: Vec<f64>,
    pub sweep_steps: usize,
    pub flatness_steps: usize,
    pub trace_tol: f64,
    pub hmm_instances: usize,
    pub hmm_horizon: usize,
    pub hmm_lead: usize,
    pub hmm_tol: f64,
    pub embed_trajectories: usize,
    pub embed_len: usize,
    pub embed_tol: f64,
    pub sep_seeds: usize,
    pub sep_steps: usize,
    pub sep_beta: f64,
    pub sep_betas: Vec<f64>,
    pub sep_eval_trajectories: usize,
    pub sep_eval_len: usize,
    pub sep_samples: usize,
    pub sep_rel_tol: f64,
    pub sep_kl_max: f64,
    pub pomdp_instances: usize,
    pub pomdp_tol: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            gradcheck_nets: 100,
            gradcheck_step: 3e-5,
            gradcheck_tol: 1e-5,
            info_instances: 1000,
            info_tol: 1e-12,
            kalman_models: 20,
            kalman_max_dim: 4,
            kalman_max_len: 50,
            kalman_tol: 1e-8,
            riccati_len: 1000,
            ib_encoders: 100,
            ib_slack: 0.02,
            dpi_instances: 200,
            dpi_stacks: 10,
            dpi_tol: 1e-12,
            ib_seeds: 3,
            ib_steps: 1500,
            ib_z: 4,
            ib_n: 2,
            ib_beta_high: 1e3,
            ib_acc_min: 0.99,
            ib_info_max: 0.01,
            ib_chance_tol: 0.05,
            sweep_betas: vec![1e-3, 1e-2, 1e-1],
            sweep_steps: 600,
            flatness_steps: 600,
            trace_tol: 1e-6,
            hmm_instances: 20,
            hmm_horizon: 6,
            hmm_lead: 1,
            hmm_tol: 1e-9,
            embed_trajectories: 10,
            embed_len: 100,
            embed_tol: 1e-9,
            sep_seeds: 3,
            sep_steps: 3000,
            sep_beta: 1e-3,
            sep_betas: vec![1e-1, 1e-2, 1e-3],
            sep_eval_trajectories: 20,
            sep_eval_len: 200,
            sep_samples: 256,
            sep_rel_tol: 0.05,
            sep_kl_max: 0.05,
            pomdp_instances: 20,
            pomdp_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Parameter overrides on top of [`Params::default`].
    pub overrides: BTreeMap<String, Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { experiment: Experiment::All, seed: 0, out_dir: PathBuf::from("results"), overrides: BTreeMap::new() }
    }
}

impl ExperimentConfig {
    /// Sets one override, rejecting unknown keys and ill-typed values.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), HarnessError> {
        match key {
            "experiment" => {
                let name = value.as_str().ok_or_else(|| HarnessError::Config("\"experiment\" must be a string".into()))?;
                self.experiment = name.parse().map_err(|e: HarnessError| HarnessError::Config(e.to_string()))?;
            }
            "seed" => self.seed = value.as_u64().ok_or_else(|| HarnessError::Config("\"seed\" must be a non-negative integer".into()))?,
            "out" => {
                self.out_dir = PathBuf::from(value.as_str().ok_or_else(|| HarnessError::Config("\"out\" must be a string".into()))?)
            }
            _ => {
                let mut map = default_map();
                if !map.contains_key(key) {
                    return Err(HarnessError::Config(format!("unknown key \"{key}\"")));
                }
                map.insert(key.to_string(), value.clone());
                serde_json::from_value::<Params>(Value::Object(map))
                    .map_err(|e| HarnessError::Config(format!("key \"{key}\": {e}")))?;
                self.overrides.insert(key.to_string(), value);
            }
        }
        Ok(())
    }

    /// `--set key=value`: the value is read as JSON, falling back to a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<(), HarnessError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    pub fn params(&self) -> Result<Params, HarnessError> {
        let mut map = default_map();
        for (k, v) in &self.overrides {
            map.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

fn default_map() -> Map<String, Value> {
    match serde_json::to_value(Params::default()).expect("defaults serialise") {
        Value::Object(m) => m,
        _ => unreachable!("params serialise to an object"),
    }
}

/// Reads a flat JSON object of `experiment`, `seed`, `out` and parameter keys.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    parse_config(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let value: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("line {}: {e}", e.line())))?;
    let Value::Object(map) = value else {
        return Err(HarnessError::Config("top level must be a JSON object".into()));
    };
    let mut config = ExperimentConfig::default();
    for (k, v) in map {
        config.set(&k, v)?;
    }
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Report,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub experiment: String,
    pub key: String,
    pub value: f64,
    /// `None` for report-only values.
    pub tolerance: Option<f64>,
    pub status: Status,
    /// Wall-clock time of the computation behind this record.
    pub seconds: f64,
}

impl MetricRecord {
    /// A gated record must carry a finite value; anything else fails.
    pub fn finite_or_flagged(&self) -> bool {
        self.value.is_finite() || self.status == Status::Fail
    }
}

fn number(v: f64) -> String {
    format!("{v:?}")
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("experiment,key,value,tolerance,status\n");
    for r in records {
        let tol = r.tolerance.map(number).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.experiment, r.key, number(r.value), tol, r.status.as_str()));
    }
    out
}

pub fn summary_json(experiment: Experiment, seed: u64, records: &[MetricRecord], seconds: f64) -> String {
    let failed: Vec<&str> = records.iter().filter(|r| r.status == Status::Fail).map(|r| r.key.as_str()).collect();
    let metrics: Vec<Value> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "experiment": r.experiment,
                "key": r.key,
                "value": r.value,
                "tolerance": r.tolerance,
                "status": r.status,
                "seconds": r.seconds,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "experiment": experiment.name(),
        "seed": seed,
        "passed": failed.is_empty(),
        "records": records.len(),
        "failed": failed,
        "wall_clock_seconds": seconds,
        "metrics": metrics,
    });
    serde_json::to_string_pretty(&doc).expect("summary serialises")
}

pub fn all_pass(records: &[MetricRecord]) -> bool {
    records.iter().all(|r| r.status != Status::Fail)
}

/// Runs one experiment in memory; artifacts are `(file name, contents)`.
pub fn run_experiment(experiment: Experiment, params: &Params, root_seed: u64) -> Result<(Vec<MetricRecord>, Vec<(String, String)>), HarnessError> {
    if experiment == Experiment::All {
        return Err(HarnessError::Usage("run_experiment takes a single experiment".into()));
    }
    let seed = derive_seed(root_seed, experiment.name());
    let out = experiments::run(experiment, params, seed)
        .map_err(|e| HarnessError::Experiment { name: experiment.name().into(), message: e.to_string() })?;
    Ok((out.records, out.artifacts))
}

fn write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn write_outputs(dir: &Path, experiment: Experiment, seed: u64, records: &[MetricRecord], artifacts: &[(String, String)], seconds: f64) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io { path: dir.to_path_buf(), message: e.to_string() })?;
    write(&dir.join("metrics.csv"), &metrics_csv(records))?;
    write(&dir.join("summary.json"), &summary_json(experiment, seed, records, seconds))?;
    for (name, text) in artifacts {
        write(&dir.join(name), text)?;
    }
    Ok(())
}

/// Runs the configured experiment (or all of them) and writes
/// `<out>/<experiment>/metrics.csv` and `summary.json`.
pub fn run(config: &ExperimentConfig) -> Result<Vec<MetricRecord>, HarnessError> {
    let params = config.params()?;
    let todo: Vec<Experiment> = if config.experiment == Experiment::All { Experiment::EACH.to_vec() } else { vec![config.experiment] };
    let start = Instant::now();
    let mut all = Vec::new();
    for exp in todo {
        let t0 = Instant::now();
        let (records, artifacts) = run_experiment(exp, &params, config.seed)?;
        write_outputs(&config.out_dir.join(exp.name()), exp, config.seed, &records, &artifacts, t0.elapsed().as_secs_f64())?;
        all.extend(records);
    }
    if config.experiment == Experiment::All {
        write_outputs(&config.out_dir.join("all"), Experiment::All, config.seed, &all, &[], start.elapsed().as_secs_f64())?;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.params().unwrap(), Params::default());
        let c = parse_config(r#"{"experiment": "kalman", "seed": 4, "riccati_len": 10}"#).unwrap();
        assert_eq!((c.experiment, c.seed, c.params().unwrap().riccati_len), (Experiment::Kalman, 4, 10));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config(r#"{"seed": 1, "betta": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("\"betta\""), "{e}");
        assert_eq!(e.exit_code(), 2);
        let mut c = ExperimentConfig::default();
        assert!(c.set_str("betta=1").unwrap_err().to_string().contains("betta"));
    }

    #[test]
    fn malformed_json_reports_the_line() {
        let e = parse_config("{\n  \"seed\": 1,\n  \"info_tol\": ,\n}").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn ill_typed_value_names_the_key() {
        let e = parse_config(r#"{"kalman_models": "many"}"#).unwrap_err();
        assert!(e.to_string().contains("kalman_models"), "{e}");
    }

    #[test]
    fn flag_overrides_file_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"info_instances": 5, "seed": 3}"#).unwrap();
        let mut c = load_config(&path).unwrap();
        c.set_str("info_instances=7").unwrap();
        c.set_str("sep_betas=[0.5, 0.25]").unwrap();
        let p = c.params().unwrap();
        assert_eq!((p.info_instances, c.seed), (7, 3));
        assert_eq!(p.sep_betas, vec![0.5, 0.25]);
        assert_eq!(p.kalman_models, Params::default().kalman_models);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let e = load_config(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/cfg.json") && e.exit_code() == 1);
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::EACH.iter().chain(&[Experiment::All]) {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), *e);
        }
        assert_eq!("kalmann".parse::<Experiment>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn csv_uses_round_trip_decimals() {
        let r = MetricRecord { experiment: "x".into(), key: "k".into(), value: 0.1 + 0.2, tolerance: Some(1e-12), status: Status::Pass, seconds: 0.0 };
        let csv = metrics_csv(&[r]);
        assert_eq!(csv, "experiment,key,value,tolerance,status\nx,k,0.30000000000000004,1e-12,pass\n");
        let back: f64 = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(back, 0.1 + 0.2);
    }

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig { experiment: Experiment::All, seed: 7, ..ExperimentConfig::default() };
        for s in [
            "gradcheck_nets=5",
            "info_instances=20",
            "kalman_models=3",
            "kalman_max_len=8",
            "riccati_len=300",
            "ib_encoders=3",
            "dpi_instances=10",
            "dpi_stacks=2",
            "ib_seeds=1",
            "ib_steps=20",
            "sweep_betas=[0.1]",
            "sweep_steps=10",
            "flatness_steps=10",
            "hmm_instances=3",
            "hmm_horizon=3",
            "embed_trajectories=2",
            "embed_len=10",
            "sep_seeds=1",
            "sep_steps=5",
            "sep_betas=[0.1]",
            "sep_eval_trajectories=2",
            "sep_eval_len=10",
            "sep_samples=8",
            "pomdp_instances=3",
        ] {
            c.set_str(s).unwrap();
        }
        c
    }

    #[test]
    fn full_suite_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut c = quick();
        c.out_dir = a.path().to_path_buf();
        let ra = run(&c).unwrap();
        c.out_dir = b.path().to_path_buf();
        run(&c).unwrap();
        for e in Experiment::EACH.iter().chain(&[Experiment::All]) {
            let fa = fs::read(a.path().join(e.name()).join("metrics.csv")).unwrap();
            let fb = fs::read(b.path().join(e.name()).join("metrics.csv")).unwrap();
            assert_eq!(fa, fb, "{e}");
            assert!(b.path().join(e.name()).join("summary.json").exists());
        }
        assert!(ra.iter().all(MetricRecord::finite_or_flagged));
        let keys: std::collections::BTreeSet<&str> = ra.iter().map(|r| r.experiment.as_str()).collect();
        assert_eq!(keys.len(), Experiment::EACH.len());
    }

    #[test]
    fn subset_runs_see_the_same_stream() {
        let c = quick();
        let p = c.params().unwrap();
        let (alone, _) = run_experiment(Experiment::Info, &p, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut c = c;
        c.out_dir = dir.path().to_path_buf();
        let all = run(&c).unwrap();
        let from_all: Vec<_> = all.into_iter().filter(|r| r.experiment == "info").collect();
        let strip = |v: &[MetricRecord]| v.iter().map(|r| (r.key.clone(), r.value.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&alone), strip(&from_all));
    }

    #[test]
    fn gradcheck_passes_on_default_nets() {
        let (records, _) = run_experiment(Experiment::Gradcheck, &Params::default(), 1).unwrap();
        assert!(all_pass(&records), "{records:?}");
    }

    #[test]
    fn unwritable_output_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let mut c = quick();
        c.experiment = Experiment::Info;
        c.out_dir = blocker.clone();
        let e = run(&c).unwrap_err();
        assert!(matches!(e, HarnessError::Io { .. }) && e.to_string().contains("file"), "{e}");
    }
}
