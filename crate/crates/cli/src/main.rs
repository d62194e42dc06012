//! Command-line driver: collect/pretrain, fine-tune, evaluate, benchmark
//! the codebook, and export learned skills.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use choreo_core::config::RunConfig;
use choreo_core::runner::{
    export_skills, run_codebook_bench, run_eval, run_finetune, run_pretrain, Artifacts,
};
use choreo_core::Result;

#[derive(Parser)]
#[command(name = "choreo", about = "Model-based skill discovery agent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Optional key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set world.hidden=64 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                choreo_core::ChoreoError::Config(format!("--set expects key=value, found `{s}`"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Reward-free phase: collect experience, train the world model,
    /// codebook, skills, and (online) the exploration policy.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Supervised phase: adapt the meta-controller (and optionally the
    /// skills) to the task reward, starting from pretrained artifacts.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory produced by `choreo pretrain`.
        #[arg(long)]
        pretrain_dir: PathBuf,
        /// Keep skill policies fixed; only the meta-controller adapts.
        #[arg(long)]
        freeze_skills: bool,
    },
    /// Greedy evaluation of a fine-tuned run.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory produced by `choreo finetune`.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Paired comparison of codebook training with and without code
    /// resampling on a synthetic Gaussian mixture.
    BenchCodebook {
        /// Number of mixture modes in the synthetic data.
        #[arg(long, default_value_t = 64)]
        modes: usize,
        /// Codebook size.
        #[arg(long, default_value_t = 64)]
        codes: usize,
        /// Training batches per variant.
        #[arg(long, default_value_t = 10_000)]
        batches: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the codebook and per-skill imagined terminal states as JSON.
    ExportSkills {
        /// Directory produced by `choreo pretrain`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { cfg } => {
            let cfg = cfg.load()?;
            let art = run_pretrain(&cfg)?;
            println!("pretrain done: artifacts in {}", art.dir.display());
        }
        Command::Finetune {
            cfg,
            pretrain_dir,
            freeze_skills,
        } => {
            let cfg = cfg.load()?;
            let pre = Artifacts::new(pretrain_dir);
            let (art, report) = run_finetune(&cfg, &pre, freeze_skills)?;
            println!(
                "finetune done: {} steps, {} episodes, final success rate {:.2}, artifacts in {}",
                report.steps,
                report.returns.len(),
                report.final_success_rate,
                art.dir.display()
            );
        }
        Command::Eval { cfg, run_dir } => {
            let cfg = cfg.load()?;
            let metrics = run_eval(&cfg, &Artifacts::new(run_dir))?;
            println!(
                "eval: mean return {:.3}, success rate {:.2} over {} episodes",
                metrics.mean_return, metrics.success_rate, metrics.episodes
            );
            println!("skill usage: {:?}", metrics.skill_histogram);
        }
        Command::BenchCodebook {
            modes,
            codes,
            batches,
            seed,
        } => {
            let report = run_codebook_bench(modes, codes, batches, seed)?;
            println!(
                "with resampling:    final loss {:.4}, unused fraction {:.3}",
                report.with_cr.final_loss, report.with_cr.unused_fraction
            );
            println!(
                "without resampling: final loss {:.4}, unused fraction {:.3}",
                report.without_cr.final_loss, report.without_cr.unused_fraction
            );
        }
        Command::ExportSkills { run_dir, out } => {
            export_skills(&Artifacts::new(run_dir), &out)?;
            println!("skills exported to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
