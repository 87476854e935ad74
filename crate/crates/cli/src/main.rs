//! `loraens`: pretrain a base model, fine-tune adapter ensembles, evaluate
//! calibration and run ablations.
//!
//! Every invocation writes into `<out>/<timestamp>-<command>/`, which holds
//! the resolved `config.toml`, the outputs and `manifest.json`. Settings are
//! layered: built-in defaults, then flags, then the `--config` file.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 configuration or path error.

mod ablate;
mod commands;
mod config;
mod error;
mod predict;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use crate::config::{set, ExperimentConfig};
use crate::error::Result;
use crate::run::Run;

#[derive(Parser)]
#[command(name = "loraens", version, about = "Low-rank adapter ensembles on a small frozen transformer")]
struct Cli {
    /// TOML experiment config. Its values take precedence over flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for run directories.
    #[arg(long, global = true, env = "LORAENS_OUT", default_value = "runs")]
    out: PathBuf,
    /// Members trained in parallel [default: number of members].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PathArgs {
    /// Base checkpoint.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Tokenizer JSON.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Training questions (JSONL).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation questions (JSONL).
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Out-of-distribution questions (JSONL); enables AUROC.
    #[arg(long)]
    ood: Option<PathBuf>,
    /// Adapter directory [default for finetune: <run>/adapters].
    #[arg(long)]
    adapter_dir: Option<PathBuf>,
}

impl PathArgs {
    fn apply(&self, t: &mut Table) {
        for (key, value) in [
            ("base", &self.base),
            ("tokenizer", &self.tokenizer),
            ("train", &self.train),
            ("validation", &self.validation),
            ("ood", &self.ood),
            ("adapter_dir", &self.adapter_dir),
        ] {
            if let Some(p) = value {
                set(t, &format!("paths.{key}"), p.display().to_string());
            }
        }
    }
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Ensemble members [default: 5].
    #[arg(long)]
    members: Option<usize>,
    /// Fine-tuning epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// AdamW step size [default: 1e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed of member 0's initialization; member i uses seed + i [default: 0].
    #[arg(long)]
    init_seed: Option<u64>,
    /// Seed of member 0's data order; member i uses seed + i [default: 0].
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Use the same initialization for every member.
    #[arg(long)]
    fix_init: bool,
    /// Use the same data order for every member.
    #[arg(long)]
    fix_shuffle: bool,
    /// Decoupled weight decay on the selected factors [default: 1e-2].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// none, a_only, b_only or both [default: none].
    #[arg(long)]
    decay_target: Option<String>,
    /// Weight of the KL-to-base penalty [default: 0].
    #[arg(long)]
    kl_beta: Option<f64>,
    /// Stop after this many epochs.
    #[arg(long)]
    early_stop: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, t: &mut Table) {
        if let Some(m) = self.members {
            set(t, "ensemble.members", m as i64);
        }
        let ints = [
            ("epochs", self.epochs.map(|x| x as i64)),
            ("batch_size", self.batch_size.map(|x| x as i64)),
            ("init_seed", self.init_seed.map(|x| x as i64)),
            ("shuffle_seed", self.shuffle_seed.map(|x| x as i64)),
            ("early_stop_epochs", self.early_stop.map(|x| x as i64)),
        ];
        for (k, v) in ints {
            if let Some(v) = v {
                set(t, &format!("train.{k}"), v);
            }
        }
        for (k, v) in [("step_size", self.lr), ("weight_decay", self.weight_decay), ("kl_beta", self.kl_beta)] {
            if let Some(v) = v {
                set(t, &format!("train.{k}"), v);
            }
        }
        if let Some(d) = &self.decay_target {
            set(t, "train.decay_target", d.clone());
        }
        if self.fix_init {
            set(t, "train.fix_init", true);
        }
        if self.fix_shuffle {
            set(t, "train.fix_shuffle", true);
        }
    }
}

#[derive(Args, Default)]
struct EvalArgs {
    /// Comma-separated: single_mean, lora_ensemble, mc_dropout, last_layer,
    /// few_shot [default: single_mean,lora_ensemble].
    #[arg(long, value_delimiter = ',')]
    predictors: Vec<String>,
    /// Calibration bins [default: 10].
    #[arg(long)]
    n_bins: Option<usize>,
    /// Seed for stochastic predictors [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

impl EvalArgs {
    fn apply(&self, t: &mut Table) {
        if !self.predictors.is_empty() {
            set(t, "eval.predictors", strings(&self.predictors));
        }
        if let Some(b) = self.n_bins {
            set(t, "eval.n_bins", b as i64);
        }
        if let Some(s) = self.seed {
            set(t, "eval.seed", s as i64);
        }
    }
}

fn strings(xs: &[String]) -> Value {
    Value::Array(xs.iter().map(|s| Value::from(s.clone())).collect())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, tokenizer and question splits.
    Generate {
        /// Generator seed [default: 0].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the base model on a corpus.
    Pretrain {
        /// Corpus, documents separated by blank lines.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Tokenizer JSON [default: fitted to the corpus].
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// [default: 40]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune ensemble members against a frozen base.
    Finetune {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write predictions of the configured predictors.
    Predict {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Predictions plus metric reports.
    Evaluate {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run sweeps over ensemble size, randomness, decay, KL and early stopping.
    Ablate {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated: m, randomness, decay, kl, early_stop [default: m].
        #[arg(long, value_delimiter = ',')]
        sweeps: Vec<String>,
        /// Ensemble sizes for the m sweep [default: 1,2,3,4,5].
        #[arg(long, value_delimiter = ',')]
        m_values: Vec<usize>,
        /// Subsampled ensembles per size [default: 5].
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Combine the summary tables of earlier runs.
    Report {
        /// Run directories.
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }

    fn flags(&self) -> Table {
        let mut t = Table::new();
        match self {
            Command::Generate { seed } => {
                if let Some(s) = seed {
                    set(&mut t, "data_seed", *s as i64);
                }
            }
            Command::Pretrain {
                corpus,
                tokenizer,
                epochs,
                seed,
            } => {
                if let Some(c) = corpus {
                    set(&mut t, "paths.corpus", c.display().to_string());
                }
                if let Some(p) = tokenizer {
                    set(&mut t, "paths.tokenizer", p.display().to_string());
                }
                if let Some(e) = epochs {
                    set(&mut t, "pretrain.epochs", *e as i64);
                }
                if let Some(s) = seed {
                    set(&mut t, "pretrain.seed", *s as i64);
                }
            }
            Command::Finetune { paths, train } => {
                paths.apply(&mut t);
                train.apply(&mut t);
            }
            Command::Predict { paths, eval } | Command::Evaluate { paths, eval } => {
                paths.apply(&mut t);
                eval.apply(&mut t);
            }
            Command::Ablate {
                paths,
                train,
                sweeps,
                m_values,
                draws,
            } => {
                paths.apply(&mut t);
                train.apply(&mut t);
                if !sweeps.is_empty() {
                    set(&mut t, "ablation.sweeps", strings(sweeps));
                }
                if !m_values.is_empty() {
                    let v = m_values.iter().map(|&m| Value::from(m as i64)).collect();
                    set(&mut t, "ablation.m_values", Value::Array(v));
                }
                if let Some(d) = draws {
                    set(&mut t, "ablation.draws", *d as i64);
                }
            }
            Command::Report { runs } => {
                let v = runs.iter().map(|p| Value::from(p.display().to_string())).collect();
                set(&mut t, "runs", Value::Array(v));
            }
        }
        t
    }
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let mut flags = cli.command.flags();
    if let Some(j) = cli.jobs {
        set(&mut flags, "jobs", j as i64);
    }
    let cfg = ExperimentConfig::resolve(flags, cli.config.as_deref())?;
    let name = cli.command.name();
    let mut run = Run::create(&cli.out, name, &cfg)?;
    let dir = run.dir.clone();
    let outcome = commands::dispatch(name, &cfg, &mut run);
    run.finish(&outcome)?;
    if outcome.is_err() {
        eprintln!("run directory: {}", dir.display());
    }
    outcome.map(|()| dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
