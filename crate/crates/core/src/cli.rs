//! Command implementations behind the `labo` binary.
//!
//! Experiments are described by a TOML file; see `configs/blobs.toml` in the
//! repository for a documented example. Relative paths inside a config are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gaussian_blobs, load_csv, load_idx, Dataset, Split};
use crate::fsutil::write_atomic;
use crate::model::MlpModel;
use crate::numerics::{softmax, LogitVec, ProbVec};
use crate::objectives::{unified_objective, ObjectiveBreakdown};
use crate::smoothing::{adaptive_alpha, labo_from_logits, mix_label, DEFAULT_RHO, DEFAULT_TAU};
use crate::train::{
    check_model_fits, evaluate, run_training, train_teacher, write_reports_csv, Mode, TrainConfig,
};
use crate::verify::{run_suite, CheckResult, VerifyOptions};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LABO_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        std: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn default_dim() -> usize {
    2
}

fn default_label_column() -> String {
    "label".into()
}

impl DatasetSpec {
    pub fn load(&self, base: &Path) -> crate::Result<Dataset> {
        Ok(match self {
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                std,
                seed,
            } => gaussian_blobs(*classes, *per_class, *dim, *std, *seed)?,
            DatasetSpec::Csv { path, label_column } => load_csv(&base.join(path), label_column)?,
            DatasetSpec::Idx { images, labels } => {
                load_idx(&base.join(images), &base.join(labels))?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// `mode` and `seed` in this section are replaced per run.
    pub train: TrainConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    fn validate(&self) -> CliResult<()> {
        if self.modes.is_empty() {
            return Err(CliError::Config("at least one mode is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::Config(
                "hidden layer widths must be positive".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn architecture(&self, data: &Dataset) -> Vec<usize> {
        let mut sizes = vec![data.dim()];
        sizes.extend(&self.model.hidden);
        sizes.push(data.classes());
        sizes
    }

    /// An explicit directory (`--out` or `$LABO_OUT`), then the config's
    /// `output_dir`, then `runs`.
    pub fn output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        match &self.output_dir {
            Some(p) => self.resolve(p),
            None => PathBuf::from("runs"),
        }
    }

    pub fn load_dataset(&self) -> CliResult<Dataset> {
        self.dataset
            .load(&self.base_dir)
            .map_err(|e| CliError::Config(format!("dataset: {e}")))
    }
}

fn ensure_writable(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".labo_write_probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| {
            CliError::Usage(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })
}

// ---------------------------------------------------------------------------
// verify

pub fn cmd_verify(opts: &VerifyOptions) -> (Vec<CheckResult>, CliResult<()>) {
    let results = run_suite(opts);
    let failures: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    let status = if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "verification failed: {}",
            failures.join(", ")
        )))
    };
    (results, status)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub runs: usize,
    pub failed: usize,
    /// Test accuracy in percent.
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub mean_confidence: f64,
    /// `mean ± std` to two decimals.
    pub test_acc: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

impl Summary {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>5} {:>7} {:>16} {:>10}\n",
            "mode", "runs", "failed", "test acc (%)", "confidence"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:>5} {:>7} {:>16} {:>10.4}\n",
                r.mode.name(),
                r.runs,
                r.failed,
                r.test_acc,
                r.mean_confidence
            ));
        }
        out
    }

    pub fn row(&self, mode: Mode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher: Option<&MlpModel>,
    mode: Mode,
    seed: u64,
    out: &Path,
) -> crate::Result<(f64, f64)> {
    let mut train_cfg = cfg.train.with_mode(mode);
    train_cfg.seed = seed;
    let model = MlpModel::new(&cfg.architecture(data), seed)?;
    let outcome = run_training(model, data, &train_cfg, teacher)?;
    let stem = format!("{}_seed{seed}", mode.name());
    write_reports_csv(&out.join(format!("{stem}.csv")), &outcome.reports)?;
    outcome.best_model.save(&out.join(format!("{stem}.json")))?;
    let eval = evaluate(&outcome.best_model, data, Split::Test)?;
    Ok((eval.accuracy, eval.mean_confidence))
}

/// Runs every `(mode, seed)` pair, writes per-run CSVs and checkpoints plus
/// `summary.json`, and returns the summary. Failed runs are recorded and the
/// rest continue.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<Summary> {
    ensure_writable(out)?;
    let data = cfg.load_dataset()?;
    let teacher = if cfg.modes.contains(&Mode::Kd) {
        let path = cfg
            .teacher_checkpoint
            .as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| CliError::Config("kd mode needs `teacher_checkpoint`".into()))?;
        if !path.exists() {
            return Err(CliError::Config(format!(
                "teacher checkpoint {} does not exist (create it with `labo teacher`)",
                path.display()
            )));
        }
        Some(
            MlpModel::load(&path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        )
    } else {
        None
    };

    let jobs: Vec<(Mode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(
            |&(mode, seed)| match run_one(cfg, &data, teacher.as_ref(), mode, seed, out) {
                Ok((acc, conf)) => RunRecord {
                    mode,
                    seed,
                    test_acc: Some(acc),
                    mean_confidence: Some(conf),
                    error: None,
                },
                Err(e) => RunRecord {
                    mode,
                    seed,
                    test_acc: None,
                    mean_confidence: None,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();

    let rows = cfg
        .modes
        .iter()
        .map(|&mode| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.mode == mode).collect();
            let accs: Vec<f64> = mine
                .iter()
                .filter_map(|r| r.test_acc.map(|a| 100.0 * a))
                .collect();
            let confs: Vec<f64> = mine.iter().filter_map(|r| r.mean_confidence).collect();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                mode,
                runs: accs.len(),
                failed: mine.len() - accs.len(),
                test_acc_mean: mean,
                test_acc_std: std,
                mean_confidence: mean_std(&confs).0,
                test_acc: format!("{mean:.2} ± {std:.2}"),
            }
        })
        .collect();
    let summary = Summary { rows, runs };
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Failed(e.to_string()))?;
    write_atomic(&out.join("summary.json"), text.as_bytes())?;
    Ok(summary)
}

/// Trains the distillation teacher and writes it to `teacher_checkpoint`
/// (or `<out>/teacher.json`). Returns the checkpoint path.
pub fn cmd_teacher(cfg: &ExperimentConfig, out: &Path, seed: u64) -> CliResult<PathBuf> {
    let data = cfg.load_dataset()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let teacher = train_teacher(&data, &train_cfg)?;
    let path = match &cfg.teacher_checkpoint {
        Some(p) => cfg.resolve(p),
        None => {
            ensure_writable(out)?;
            out.join("teacher.json")
        }
    };
    teacher.save(&path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// smooth

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothReport {
    pub logits: Vec<f64>,
    pub target: usize,
    pub tau: f64,
    pub p: ProbVec,
    pub p_star: ProbVec,
    pub rho: f64,
    pub adaptive_alpha: f64,
    pub alpha: f64,
    pub beta: f64,
    pub smoothed_label: ProbVec,
    pub objective: ObjectiveBreakdown,
}

/// Parses `"2, 1, 0"` (brackets optional).
pub fn parse_logits(text: &str) -> CliResult<LogitVec> {
    let trimmed = text.trim().trim_start_matches('[').trim_end_matches(']');
    let values = trimmed
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("malformed logit {:?}", s.trim())))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    LogitVec::new(values).map_err(|e| CliError::Usage(e.to_string()))
}

/// Shows every intermediate for one instance. Without `alpha` the adaptive
/// weight is used.
pub fn cmd_smooth(
    z: &LogitVec,
    target: usize,
    tau: Option<f64>,
    alpha: Option<f64>,
    rho: Option<f64>,
) -> CliResult<SmoothReport> {
    let usage = |e: crate::Error| CliError::Usage(e.to_string());
    let tau = tau.unwrap_or(DEFAULT_TAU);
    let rho = rho.unwrap_or(DEFAULT_RHO);
    let p = softmax(z);
    let p_star = labo_from_logits(z, tau).map_err(usage)?;
    let adaptive = adaptive_alpha(&p, rho).map_err(usage)?;
    let alpha = alpha.unwrap_or(adaptive);
    let label = mix_label(target, &p_star, alpha).map_err(usage)?;
    let beta = alpha * tau;
    let objective = unified_objective(target, z, &p_star, alpha, beta).map_err(usage)?;
    Ok(SmoothReport {
        logits: z.as_slice().to_vec(),
        target,
        tau,
        p,
        p_star,
        rho,
        adaptive_alpha: adaptive,
        alpha,
        beta,
        smoothed_label: label.dist,
        objective,
    })
}

// ---------------------------------------------------------------------------
// hist

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistReport {
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
    pub histogram: crate::train::ConfidenceHistogram,
}

/// Scores a checkpoint on the test split and writes `histogram.json` and the
/// two-column `histogram.dat` into `out`.
pub fn cmd_hist(checkpoint: &Path, data: &Dataset, out: &Path) -> CliResult<HistReport> {
    let model = MlpModel::load(checkpoint)
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    check_model_fits(&model, data).map_err(|e| CliError::Usage(e.to_string()))?;
    let eval = evaluate(&model, data, Split::Test)?;
    ensure_writable(out)?;
    eval.histogram.save(&out.join("histogram.json"))?;
    eval.histogram.save_plot_data(&out.join("histogram.dat"))?;
    Ok(HistReport {
        accuracy: eval.accuracy,
        mean_confidence: eval.mean_confidence,
        mean_entropy: eval.mean_entropy,
        histogram: eval.histogram,
    })
}
