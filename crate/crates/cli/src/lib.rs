// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `somnus` command line: synthetic data, training, recommendation,
//! evaluation and explanation, each writing CSV into an output directory.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or model errors.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use somnus::qnet::Variant;
use somnus::recommend::{AdvisableVariant, RecommenderKind};

pub mod commands;
pub mod config;
pub mod plot;

pub use config::{RunConfig, ScoringChoice};

const FIGURES: &str = "\
Figure-analog outputs (one command each):
  effectiveness curves, base advice      evaluate --recommender all --variant base
  effectiveness curves, + exercise       evaluate --recommender all --variant plus-exercise
  effectiveness curves, + pills          evaluate --recommender all --variant plus-pills
  effectiveness curves, no noise advice  evaluate --recommender all --variant no-noise
  first-order saliency map               explain
  interval calibration                   calibrate
  shuffle test                           shuffle-test
  flip test                              flip-test
  ablation matrix                        ablate
  stepwise AIC trace and coefficients    train-linear
  same-day and time-pair interactions    explain2

Every run writes config.resolved to --out; rerunning with that file as
--config reproduces the CSV outputs byte for byte.";

/// A command-line mistake: bad flag combination, unreadable config.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "somnus",
    version,
    about = "Sleep-quality models, behaviour advice and their evaluation"
)]
#[command(after_help = FIGURES)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 keeps runs bit-reproducible).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Diary directory (diary.csv, optional oracle.json) or CSV file.
    /// Without it a synthetic population is generated from the config.
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    pub plot: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Test,
    Train,
    All,
}

/// Comma-separated recommender list, or `all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recommenders(pub Vec<RecommenderKind>);

fn parse_recommenders(s: &str) -> Result<Recommenders, String> {
    if s == "all" {
        return Ok(Recommenders(RecommenderKind::ALL.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let k: RecommenderKind = part.trim().parse().map_err(|_| {
            format!("unknown recommender '{part}' (nn, linear, best-neighbourhood, best-day, all)")
        })?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(Recommenders(out))
}

/// How a trained network is obtained and which users are analysed.
#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// Directory written by `train`. Without it a network is trained in
    /// process on the training split.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// Users to analyse; defaults to the held-out split when one is known.
    #[arg(long, value_enum)]
    pub subset: Option<Subset>,
    /// Linear model JSON from `train-linear`; fitted on the training split otherwise.
    #[arg(long, value_name = "FILE")]
    pub linear: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct AdviceArgs {
    /// Advisable variable set.
    #[arg(long, value_name = "SET")]
    pub variant: Option<AdvisableVariant>,
    /// Scoring mode: all, reported, oracle-actual, counterfactual, simulated-report.
    #[arg(long)]
    pub scoring: Option<ScoringChoice>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic diary population and its oracle.
    Synth {
        #[arg(long)]
        users: Option<usize>,
    },
    /// Descriptive statistics of a diary population.
    Stats,
    /// Train the quality network on the training split.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Network variant (baseline or an ablation arm).
        #[arg(long)]
        arch: Option<Variant>,
        /// Share of users held out.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// K-fold cross-validation of the network.
    Cv {
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        arch: Option<Variant>,
    },
    /// Cross-validated comparison of each ablation arm against the baseline.
    Ablate {
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated arms; all nine by default.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<Variant>,
    },
    /// Fit the stepwise-AIC linear baseline.
    TrainLinear,
    /// Write recommendations for the selected users.
    Recommend {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_recommenders, default_value = "all")]
        recommender: Recommenders,
        #[arg(long, value_name = "SET")]
        variant: Option<AdvisableVariant>,
    },
    /// Effectiveness curves per recommender and recommender comparisons.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_recommenders, default_value = "all")]
        recommender: Recommenders,
        #[command(flatten)]
        advice: AdviceArgs,
    },
    /// Rescore after giving each user another user's advice.
    ShuffleTest {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_recommenders, default_value = "nn,best-neighbourhood")]
        recommender: Recommenders,
        #[command(flatten)]
        advice: AdviceArgs,
    },
    /// Invert one binary recommendation at a time for full followers.
    FlipTest {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        advice: AdviceArgs,
        /// Simulated-report replicates.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Nominal versus empirical interval coverage.
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// First-order saliency over window steps and binary variables.
    Explain {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Second-order derivatives: same-day and time-pair interactions.
    Explain2 {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        max_users: Option<usize>,
        #[arg(long)]
        probe_step: Option<f64>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}
