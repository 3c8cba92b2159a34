//! Experiment configuration and the multi-run driver behind the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::HiddenPolicy;
use crate::dataset::{generate_synthetic, load_csv, split, standardize, DataSplit, Dataset, DatasetError};
use crate::evaluation::{emit_report, run_test_phase, EvalError, MethodReport, PatternStats, RunReport, Summary, REPORT_SCHEMA_VERSION};
use crate::nn::{grad_check, grad_check_sign_flipped, init_model, MlpSpec, NnError};
use crate::protocol::{init_training, InitSetup, InitSummary, Method, ProtocolError, RoundRecord, Schedule, VflSystem, Checkpoint};
use crate::reliability::Scenario;
use crate::rng::{Phase, SeedTree};
use crate::tree::TreeParams;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot read config {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("run {run}, {method}: {source}")]
    Run {
        run: usize,
        method: &'static str,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("report: {0}")]
    Report(String),
    #[error("gradient check failed: max relative error {0:e} exceeds 1e-4")]
    GradCheck(f64),
}

impl ExperimentError {
    /// 1 for problems with the user's input, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } | ExperimentError::ConfigFile { .. } => 1,
            _ => 2,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Proposed,
    Baseline,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Proposed => vec![Method::Proposed],
            MethodChoice::Baseline => vec![Method::Baseline],
            MethodChoice::Both => vec![Method::Proposed, Method::Baseline],
        }
    }
}

impl std::str::FromStr for MethodChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "baseline" => Ok(Self::Baseline),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown method `{other}` (expected proposed, baseline or both)")),
        }
    }
}

/// Flat experiment settings. Every key has a default; a JSON file may set
/// any subset of them.
///
/// `rounds`, `batch_size`, `lr`, `eval_every`, `eval_draws`, the hidden
/// widths and the synthetic data shape are desk-scale choices, not values
/// taken from any published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV file to load; synthetic data is generated when absent.
    pub csv_path: Option<PathBuf>,
    pub label_column: String,
    pub synthetic_samples: usize,
    pub synthetic_features: usize,
    pub synthetic_informative: usize,
    pub synthetic_noise: f64,
    pub standardize: bool,
    pub test_fraction: f64,
    pub k: usize,
    pub budget: usize,
    /// Preset name, or any label when `beta_alpha`/`beta_beta` are given.
    pub scenario: String,
    pub beta_alpha: Option<f64>,
    pub beta_beta: Option<f64>,
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_draws: usize,
    pub patience: Option<usize>,
    pub delta: f64,
    pub n_sim: usize,
    pub test_rounds: usize,
    pub seed: u64,
    pub method: MethodChoice,
    pub tree_max_depth: usize,
    pub tree_min_samples_split: usize,
    pub tree_min_impurity_decrease: f64,
    pub client_hidden: Option<Vec<usize>>,
    pub server_hidden: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = Schedule::default();
        let tree = TreeParams::default();
        Self {
            csv_path: None,
            label_column: "qoe".into(),
            synthetic_samples: 2000,
            synthetic_features: 20,
            synthetic_informative: 8,
            synthetic_noise: 0.1,
            standardize: true,
            test_fraction: 0.2,
            k: 4,
            budget: 48,
            scenario: "beta_8_2".into(),
            beta_alpha: None,
            beta_beta: None,
            rounds: schedule.rounds,
            batch_size: schedule.batch_size,
            lr: schedule.lr,
            eval_every: schedule.eval_every,
            eval_draws: schedule.eval_draws,
            patience: schedule.patience,
            delta: 1.0,
            n_sim: 10,
            test_rounds: 1000,
            seed: 0,
            method: MethodChoice::Both,
            tree_max_depth: tree.max_depth,
            tree_min_samples_split: tree.min_samples_split,
            tree_min_impurity_decrease: tree.min_impurity_decrease,
            client_hidden: None,
            server_hidden: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::ConfigFile {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Fills the beta shape from the preset when not given explicitly, then validates.
    pub fn resolve(mut self) -> Result<Self, ExperimentError> {
        match (self.beta_alpha, self.beta_beta) {
            (Some(_), Some(_)) => {}
            (None, None) => {
                let s = Scenario::preset(&self.scenario).map_err(|e| invalid("scenario", e.to_string()))?;
                self.beta_alpha = Some(s.alpha);
                self.beta_beta = Some(s.beta);
            }
            _ => return Err(invalid("beta_alpha", "beta_alpha and beta_beta must be set together")),
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let at_least_one = [
            ("k", self.k),
            ("n_sim", self.n_sim),
            ("test_rounds", self.test_rounds),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_draws", self.eval_draws),
            ("tree_max_depth", self.tree_max_depth),
        ];
        for (field, v) in at_least_one {
            if v == 0 {
                return Err(invalid(field, "must be ≥ 1"));
            }
        }
        if self.budget < self.k {
            return Err(invalid(
                "budget",
                format!("must be ≥ k ({}), got {}", self.k, self.budget),
            ));
        }
        if self.k > 31 {
            return Err(invalid("k", "at most 31 clients fit in a pattern ID"));
        }
        for (field, v) in [("beta_alpha", self.beta_alpha), ("beta_beta", self.beta_beta)] {
            match v {
                Some(v) if v > 0.0 && v.is_finite() => {}
                Some(v) => return Err(invalid(field, format!("must be > 0, got {v}"))),
                None => return Err(invalid(field, "unresolved; call resolve()")),
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("must be a finite non-negative number, got {}", self.lr)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta", format!("must be > 0, got {}", self.delta)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", format!("must lie in (0, 1), got {}", self.test_fraction)));
        }
        if self.tree_min_samples_split < 2 {
            return Err(invalid("tree_min_samples_split", "must be ≥ 2"));
        }
        if !(self.tree_min_impurity_decrease >= 0.0) {
            return Err(invalid("tree_min_impurity_decrease", "must be ≥ 0"));
        }
        if self.patience == Some(0) {
            return Err(invalid("patience", "must be ≥ 1 when set"));
        }
        if self.csv_path.is_none() {
            if self.synthetic_samples < 2 {
                return Err(invalid("synthetic_samples", "must be ≥ 2"));
            }
            if self.synthetic_features < self.k {
                return Err(invalid(
                    "synthetic_features",
                    format!("must be ≥ k ({}), got {}", self.k, self.synthetic_features),
                ));
            }
            if self.synthetic_informative == 0 || self.synthetic_informative > self.synthetic_features {
                return Err(invalid("synthetic_informative", "must lie in 1..=synthetic_features"));
            }
            if !(self.synthetic_noise >= 0.0 && self.synthetic_noise.is_finite()) {
                return Err(invalid("synthetic_noise", "must be ≥ 0"));
            }
        }
        for (field, h) in [("client_hidden", &self.client_hidden), ("server_hidden", &self.server_hidden)] {
            if h.as_ref().is_some_and(|h| h.contains(&0)) {
                return Err(invalid(field, "hidden widths must be ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario, ExperimentError> {
        let (Some(a), Some(b)) = (self.beta_alpha, self.beta_beta) else {
            return Scenario::preset(&self.scenario).map_err(|e| invalid("scenario", e.to_string()));
        };
        Scenario::new(self.scenario.clone(), a, b).map_err(|e| invalid("beta_alpha", e.to_string()))
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            rounds: self.rounds,
            batch_size: self.batch_size,
            lr: self.lr,
            eval_every: self.eval_every,
            eval_draws: self.eval_draws,
            patience: self.patience,
        }
    }

    pub fn tree(&self) -> TreeParams {
        TreeParams {
            max_depth: self.tree_max_depth,
            min_samples_split: self.tree_min_samples_split,
            min_impurity_decrease: self.tree_min_impurity_decrease,
        }
    }

    pub fn hidden(&self) -> HiddenPolicy {
        HiddenPolicy {
            client_hidden: self.client_hidden.clone(),
            server_hidden: self.server_hidden.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Loads or generates the dataset and splits it. Both depend only on the
/// master seed, so every run of an experiment shares them.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, DataSplit), ExperimentError> {
    let root = SeedTree::new(cfg.seed);
    let raw = match &cfg.csv_path {
        Some(path) => load_csv(path, &cfg.label_column)?,
        None => {
            let informative: Vec<usize> = (0..cfg.synthetic_informative).collect();
            generate_synthetic(
                cfg.synthetic_samples,
                cfg.synthetic_features,
                &informative,
                cfg.synthetic_noise,
                root.seed(Phase::Synthetic, 0),
            )?
        }
    };
    if raw.n_features() < cfg.k {
        return Err(invalid(
            "k",
            format!("dataset has {} features, fewer than k = {}", raw.n_features(), cfg.k),
        ));
    }
    let ds = if cfg.standardize { standardize(&raw).0 } else { raw };
    let sp = split(&ds, cfg.test_fraction, root.seed(Phase::DatasetSplit, 0))?;
    Ok((ds, sp))
}

/// One method's outcome within one run.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub summary: InitSummary,
    pub checkpoint: Checkpoint,
    pub records: Vec<RoundRecord>,
    pub stats: PatternStats,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: usize,
    pub methods: Vec<MethodRun>,
}

impl RunResult {
    pub fn method(&self, m: Method) -> Option<&MethodRun> {
        self.methods.iter().find(|r| r.summary.method == m)
    }
}

/// Trains and tests one method for run `run`.
pub fn execute_method(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    sp: &DataSplit,
    run: usize,
    method: Method,
) -> Result<MethodRun, ExperimentError> {
    let seeds = SeedTree::for_run(cfg.seed, run as u64);
    let scenario = cfg.scenario()?;
    let setup = InitSetup {
        dataset: ds,
        train_indices: &sp.train_indices,
        scenario: &scenario,
        n_clients: cfg.k,
        budget: cfg.budget,
        tree: cfg.tree(),
        hidden: cfg.hidden(),
        method,
        delta: cfg.delta,
        seeds,
        p_override: None,
    };
    let (mut system, summary) = init_training(&setup)?;
    let outcome = system.train(&sp.train_indices, &sp.test_indices, &cfg.schedule(), &seeds)?;
    let tested = VflSystem::from_checkpoint(&outcome.checkpoint, &system.profiles(), ds, cfg.delta)?;
    let stats = run_test_phase(
        &tested,
        &sp.test_indices,
        cfg.test_rounds,
        &mut seeds.stream(Phase::TestAvailability, 0),
    )?;
    Ok(MethodRun {
        summary,
        checkpoint: outcome.checkpoint,
        records: outcome.records,
        stats,
    })
}

/// Runs every configured method with the same seeds, hence the same
/// reliabilities and availability draws.
pub fn execute_run(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    sp: &DataSplit,
    run: usize,
) -> Result<RunResult, ExperimentError> {
    let methods = cfg
        .method
        .methods()
        .into_iter()
        .map(|m| {
            execute_method(cfg, ds, sp, run, m).map_err(|e| ExperimentError::Run {
                run,
                method: m.name(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunResult { run, methods })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub split: DataSplit,
    pub runs: Vec<RunResult>,
    pub report: RunReport,
}

/// Runs all `n_sim` runs. `jobs == 1` runs them serially on this thread;
/// `jobs == 0` uses rayon's default pool. Results do not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult, ExperimentError> {
    let cfg = cfg.clone().resolve()?;
    let (ds, sp) = prepare_data(&cfg)?;
    let runs: Vec<RunResult> = if jobs == 1 {
        (0..cfg.n_sim)
            .map(|n| execute_run(&cfg, &ds, &sp, n))
            .collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ExperimentError::Report(e.to_string()))?;
        pool.install(|| {
            (0..cfg.n_sim)
                .into_par_iter()
                .map(|n| execute_run(&cfg, &ds, &sp, n))
                .collect::<Result<_, _>>()
        })?
    };
    let collect = |m: Method| {
        cfg.method.methods().contains(&m).then(|| {
            MethodReport::from_runs(
                runs.iter()
                    .map(|r| r.method(m).expect("method ran").stats.clone())
                    .collect(),
            )
        })
    };
    let report = RunReport {
        scenario: cfg.scenario.clone(),
        n_clients: cfg.k,
        n_sim: cfg.n_sim,
        test_rounds: cfg.test_rounds,
        proposed: collect(Method::Proposed),
        baseline: collect(Method::Baseline),
    };
    Ok(ExperimentResult {
        config: cfg,
        dataset: ds,
        split: sp,
        runs,
        report,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn round_log(records: &[RoundRecord]) -> String {
    let mut s = String::from("round,availability,train_loss,eval_loss\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:?},{}\n",
            r.round_index,
            r.availability.bits(),
            r.train_loss,
            r.eval_loss.map(|v| format!("{v:?}")).unwrap_or_default()
        ));
    }
    s
}

/// Writes the resolved config, per-run artifacts and the aggregate report.
///
/// Layout: `config.json`, `weighted_loss.csv`, `diff.csv`, `summary.json`,
/// `importance.csv`, and per run `run_NN/<method>/{manifest.json, rounds.csv,
/// checkpoint/server.txt, checkpoint/client_K.txt}`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Summary, ExperimentError> {
    let cfg = &result.config;
    write(&dir.join("config.json"), &cfg.to_json())?;
    let schedule = cfg.schedule();
    for run in &result.runs {
        for m in &run.methods {
            let base = dir
                .join(format!("run_{:02}", run.run))
                .join(m.summary.method.name());
            let manifest = serde_json::json!({
                "seed": cfg.seed,
                "run": run.run,
                "scenario": cfg.scenario()?,
                "method": m.summary.method,
                "p": m.summary.p,
                "clamped": m.summary.clamped,
                "tags": m.summary.tags,
                "partition": m.summary.partition,
                "client_importance": m.summary.client_importance,
                "plan": m.summary.plan,
                "specs": m.summary.specs,
                "schedule": schedule,
                "checkpoint_round": m.checkpoint.round_index,
                "checkpoint_eval_loss": m.checkpoint.eval_loss,
                "test_zero_id_rounds": m.stats.zero_count(),
            });
            write(&base.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
            write(&base.join("rounds.csv"), &round_log(&m.records))?;
            write(&base.join("checkpoint").join("server.txt"), &m.checkpoint.server.to_text())?;
            for (k, c) in m.checkpoint.clients.iter().enumerate() {
                write(
                    &base.join("checkpoint").join(format!("client_{k}.txt")),
                    &c.model.to_text(),
                )?;
            }
        }
    }
    if let Some(first) = result.runs.first().and_then(|r| r.methods.first()) {
        let imp = crate::tree::ImportanceVector(first.summary.importance.clone());
        write(&dir.join("importance.csv"), &imp.to_csv(result.dataset.feature_names()))?;
    }
    let echo = serde_json::to_value(cfg)?;
    Ok(emit_report(&result.report, echo, dir)?)
}

/// One row of the cross-scenario comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dir: String,
    pub scenario: String,
    pub n_sim: usize,
    pub total_weighted_loss_proposed: Option<f64>,
    pub total_weighted_loss_baseline: Option<f64>,
    pub improvement_percent: Option<f64>,
}

/// Reads `summary.json` from each directory and tabulates them.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>, ExperimentError> {
    if dirs.is_empty() {
        return Err(invalid("dirs", "no run directories given"));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for d in dirs {
        let path = d.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(ExperimentError::Report(format!(
                "{}: schema version {} (expected {REPORT_SCHEMA_VERSION})",
                path.display(),
                version.map(|v| v.to_string()).unwrap_or_else(|| "missing".into())
            )));
        }
        let s: Summary = serde_json::from_value(value)?;
        rows.push(ComparisonRow {
            dir: d.display().to_string(),
            scenario: s.scenario,
            n_sim: s.n_sim,
            total_weighted_loss_proposed: s.total_weighted_loss_proposed,
            total_weighted_loss_baseline: s.total_weighted_loss_baseline,
            improvement_percent: s.improvement_percent,
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut s = String::from("dir,scenario,n_sim,total_weighted_loss_proposed,total_weighted_loss_baseline,improvement_percent\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dir,
            r.scenario,
            r.n_sim,
            f(r.total_weighted_loss_proposed),
            f(r.total_weighted_loss_baseline),
            f(r.improvement_percent)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub label: String,
    pub max_rel_error: f64,
}

/// Gradient checks on the model specs the config would build for run 0,
/// plus a 1-in 1-out model. Client specs get a linear scalar head so the
/// Huber loss applies. `corrupt` flips the analytic gradient sign.
pub fn gradcheck(cfg: &ExperimentConfig, corrupt: bool) -> Result<Vec<GradCheckLine>, ExperimentError> {
    let cfg = cfg.clone().resolve()?;
    let (ds, sp) = prepare_data(&cfg)?;
    let mut specs: Vec<(String, MlpSpec)> = vec![("tiny 1x1".into(), MlpSpec::relu(vec![1, 1]))];
    for m in cfg.method.methods() {
        let setup = InitSetup {
            dataset: &ds,
            train_indices: &sp.train_indices,
            scenario: &cfg.scenario()?,
            n_clients: cfg.k,
            budget: cfg.budget,
            tree: cfg.tree(),
            hidden: cfg.hidden(),
            method: m,
            delta: cfg.delta,
            seeds: SeedTree::for_run(cfg.seed, 0),
            p_override: None,
        };
        let (_, summary) = init_training(&setup)?;
        for (k, s) in summary.specs.clients.iter().enumerate() {
            specs.push((format!("{} client {k}", m.name()), s.clone()));
        }
        specs.push((format!("{} server", m.name()), summary.specs.server.clone()));
    }
    let mut lines = Vec::with_capacity(specs.len());
    for (i, (label, mut spec)) in specs.into_iter().enumerate() {
        if spec.output_dim() != 1 {
            spec.sizes.push(1);
        }
        let mut model = init_model(&spec, cfg.seed ^ (i as u64 + 1))?;
        let rows = 8;
        let seeds = SeedTree::new(cfg.seed);
        let mut rng = seeds.stream(Phase::Synthetic, i as u64 + 100);
        for layer in model.layers_mut() {
            for b in &mut layer.biases {
                *b = rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
        }
        let x = random_matrix(rows, spec.sizes[0], &mut rng);
        let y: Vec<f64> = (0..rows).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let err = if corrupt {
            grad_check_sign_flipped(&model, &x, &y, cfg.delta)?
        } else {
            grad_check(&model, &x, &y, cfg.delta)?
        };
        lines.push(GradCheckLine {
            label,
            max_rel_error: err,
        });
    }
    Ok(lines)
}

fn random_matrix<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> crate::matrix::Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    crate::matrix::Matrix::from_vec(rows, cols, data)
}

/// Per-ID improvement `(ℓ_base − ℓ_prop) / ℓ_base` in percent, skipping IDs
/// where the baseline loss is zero.
pub fn per_id_improvement(report: &RunReport) -> BTreeMap<u32, f64> {
    let (Some(p), Some(b)) = (&report.proposed, &report.baseline) else {
        return BTreeMap::new();
    };
    p.weighted_loss
        .iter()
        .filter_map(|(&m, &lp)| {
            let lb = b.weighted_loss.get(&m).copied().unwrap_or(0.0);
            (lb > 0.0).then(|| (m, 100.0 * (lb - lp) / lb))
        })
        .collect()
}
