use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use granary::trainer::TrainMode;

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "granary", version, about = "Domain-adaptation data and training pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML pipeline config; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for model init, training, mixing and the mock backend.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Use the offline deterministic mock instead of the HTTP backend.
    #[arg(long, global = true)]
    pub mock_llm: bool,
    #[arg(long, global = true, value_name = "N")]
    pub parallelism: Option<usize>,
    /// KL weight for nsc_sft.
    #[arg(long, global = true, value_name = "X", allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Training mode: cpt, sft or nsc_sft.
    #[arg(long, global = true, value_name = "M")]
    pub mode: Option<TrainMode>,
    /// Token budget per example and per pack.
    #[arg(long, global = true, value_name = "N")]
    pub max_len: Option<usize>,
    /// Validate the config and print the plan without touching disk.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mock_llm: self.mock_llm,
            parallelism: self.parallelism,
            lambda: self.lambda,
            mode: self.mode,
            max_len: self.max_len,
            workdir: self.workdir.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus into learning nodes (nodes.jsonl).
    Ingest,
    /// Generate QTSA entries for every node (qtsa.jsonl); resumes from the journal.
    Distill(DistillArgs),
    /// Render, tokenize, mix and pack the SFT and CPT datasets.
    Build,
    /// Train the tiny model and write a checkpoint plus report.
    Train(TrainArgs),
    /// Grade a multiple-choice quiz and write eval_report.json.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Show which stages have run and whether they are stale.
    Status,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Stop after this many new tasks; rerun to continue.
    #[arg(long, value_name = "N")]
    pub max_new_tasks: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long, value_name = "X")]
    pub lr: Option<f64>,
    /// Start from (and, for nsc_sft, anchor to) this checkpoint instead of a
    /// fresh init.
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Output directory; defaults to `<workdir>/runs/<mode>`.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub quiz: Option<PathBuf>,
    /// Answer with this tiny-model checkpoint instead of the LLM backend.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Report path; defaults to `<workdir>/eval_report.json`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "N")]
    pub coords: Option<usize>,
}
