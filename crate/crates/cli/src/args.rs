use std::path::PathBuf;

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic data set with known ground truth.
    Simulate(SimulateArgs),
    /// Fit a window-level GLM or mixed model.
    Fit(FitArgs),
    /// Fit a model at every channel and sample.
    Pointwise(PointwiseArgs),
    /// Grand averages or a difference wave with subject bootstrap bands.
    Bands(BandsArgs),
    /// Correlation of the baseline with the voltage at every sample.
    Corr(CorrArgs),
    /// Monte Carlo power for one or more baseline strategies.
    Power(PowerArgs),
    /// Posterior of the baseline weight under a strong traditional prior.
    Bayes(BayesArgs),
    /// Likelihood-ratio test and ΔAIC between two nested models.
    Compare(CompareArgs),
    /// Refit one model for several baseline windows.
    Sweep(SweepArgs),
    /// Re-run a command from its run.json.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Pointwise(_) => "pointwise",
            Command::Bands(_) => "bands",
            Command::Corr(_) => "corr",
            Command::Power(_) => "power",
            Command::Bayes(_) => "bayes",
            Command::Compare(_) => "compare",
            Command::Sweep(_) => "sweep",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Simulate(a) => Some(&a.out),
            Command::Fit(a) => Some(&a.data.out),
            Command::Pointwise(a) => Some(&a.data.out),
            Command::Bands(a) => Some(&a.data.out),
            Command::Corr(a) => Some(&a.data.out),
            Command::Power(a) => Some(&a.out),
            Command::Bayes(a) => Some(&a.data.out),
            Command::Compare(a) => Some(&a.data.out),
            Command::Sweep(a) => Some(&a.data.out),
            Command::Replay(_) => None,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Simulate(a) => a.out = dir,
            Command::Fit(a) => a.data.out = dir,
            Command::Pointwise(a) => a.data.out = dir,
            Command::Bands(a) => a.data.out = dir,
            Command::Corr(a) => a.data.out = dir,
            Command::Power(a) => a.out = dir,
            Command::Bayes(a) => a.data.out = dir,
            Command::Compare(a) => a.data.out = dir,
            Command::Sweep(a) => a.data.out = dir,
            Command::Replay(_) => {}
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct SimulateArgs {
    /// s3-variance, s3-coupled, s3-power or n400.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON generator configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Input epochs, windows and output directory shared by the analyses.
#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct DataArgs {
    /// Long-format epochs CSV with a `.meta.json` sidecar.
    #[arg(long)]
    pub epochs: PathBuf,
    /// Baseline window: pre100, pre200, pre500, post200, whole or `start,end` in ms.
    #[arg(long, default_value = "pre100", allow_hyphen_values = true)]
    pub baseline: String,
    /// Analysis window, same syntax.
    #[arg(long, default_value = "350,600", allow_hyphen_values = true)]
    pub window: String,
    /// Reject trials whose absolute voltage exceeds this many µV.
    #[arg(long)]
    pub reject: Option<f64>,
    /// Average channels into ROIs (sidecar map unless --roi-map is given).
    #[arg(long)]
    pub roi: bool,
    /// JSON object mapping channel → ROI.
    #[arg(long)]
    pub roi_map: Option<PathBuf>,
    /// Factor level order, e.g. `roi=LA,LP,RA,RP,M`; the last level is held out.
    #[arg(long = "levels")]
    pub levels: Vec<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Model formula; defaults to the strategy's model over `--factors`.
    #[arg(long)]
    pub formula: Option<String>,
    /// none, traditional, regression, regression-pairwise or regression-full.
    #[arg(long, default_value = "regression")]
    pub strategy: String,
    /// Factors for the default formula (comma separated).
    #[arg(long, default_value = "condition")]
    pub factors: String,
    /// Random part for the default formula, e.g. `(1 | subj) + (1 | item)`.
    #[arg(long)]
    pub random: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct PointwiseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "uv ~ baseline + condition")]
    pub formula: String,
    /// `estimated`, or a number to pin the baseline weight (1 = traditional).
    #[arg(long, default_value = "estimated")]
    pub weight: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct BandsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// none, traditional or regression.
    #[arg(long, default_value = "none")]
    pub correction: String,
    /// `A,B`: band the within-subject difference A − B instead.
    #[arg(long)]
    pub difference: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct CorrArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct PowerArgs {
    /// Simulate from a fitted mixed model of these epochs.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    pub epochs: Option<PathBuf>,
    /// Regenerate data from a synthetic preset.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Regenerate data from a JSON generator configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Baseline window; synthetic runs default to the generator's own.
    #[arg(long, allow_hyphen_values = true)]
    pub baseline: Option<String>,
    /// Analysis window; synthetic runs default to the generator's own.
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    /// Average channels into ROIs (sidecar map, or the n400 preset map).
    #[arg(long)]
    pub roi: bool,
    #[arg(long)]
    pub roi_map: Option<PathBuf>,
    #[arg(long = "levels")]
    pub levels: Vec<String>,
    /// Comma-separated strategies.
    #[arg(long, default_value = "none,traditional,regression,regression-pairwise,regression-full")]
    pub strategies: String,
    #[arg(long, default_value = "condition")]
    pub factors: String,
    /// Random part of every model, e.g. `(1 | subj) + (1 | item)`.
    #[arg(long, default_value = "")]
    pub random: String,
    #[arg(long, default_value = "condition")]
    pub term: String,
    /// `t` (|t| >= 2) or `lrt`.
    #[arg(long, default_value = "t")]
    pub test: String,
    #[arg(long, default_value_t = 1000)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct BayesArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "uv ~ baseline + condition + baseline:condition")]
    pub formula: String,
    #[arg(long, default_value_t = 4)]
    pub n_chains: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_warmup: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_iter: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub nested: String,
    #[arg(long)]
    pub full: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub formula: String,
    /// `;`-separated baseline windows (presets or `start,end`); each replaces --baseline in turn.
    #[arg(long, default_value = "pre100;pre200;pre500", allow_hyphen_values = true)]
    pub baselines: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct ReplayArgs {
    /// A run.json written by an earlier command.
    #[arg(long)]
    pub run: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
