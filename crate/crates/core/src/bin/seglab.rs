use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seglab::commands::{self, Ablation, InterestSource, SkipTarget};
use seglab::config::RunConfig;
use seglab::report::Report;
use seglab::segrec::AggregationMode;
use seglab::skip_eval::Slice;
use seglab::{Error, Result};

#[derive(Parser)]
#[command(name = "seglab", version, about = "Segment-level interest modeling for short videos")]
struct Cli {
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Stem for the machine-readable report (`<stem>.txt`, `<stem>.json`).
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted segment interest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segment interest model.
    TrainInterest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Video-skip prediction on the test users.
    EvalSkip {
        /// Checkpoint path or a baseline: random, all-position, user-position, item-position.
        #[arg(long)]
        target: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        slice: String,
    },
    /// Train the click model on frozen interest scores.
    TrainRec {
        /// Interest checkpoint, or `oracle` for planted synthetic interest.
        #[arg(long)]
        interest: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `rec.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Click prediction on the test users.
    EvalRec {
        #[arg(long)]
        interest: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must match the mode the checkpoint was trained with.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Interest scores of one interaction as JSON.
    PredictHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        video: String,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the full model and a variant with one component removed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// attention, position, loss-bce, modality-id or modality-visual.
        #[arg(long)]
        drop: String,
    },
    /// Print every config key with its default and meaning.
    ConfigReference,
}

fn parse_mode(s: &str) -> Result<AggregationMode> {
    AggregationMode::parse(s).ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
}

fn finish(report: Report, stem: Option<&Path>, default_stem: Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(stem) = stem.map(Path::to_path_buf).or(default_stem) {
        report.write(&stem)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    let stem = cli.report.as_deref();
    match cli.command {
        Command::Synth { out } => finish(commands::cmd_synth(&cfg, &out)?, stem, None),
        Command::TrainInterest { data, out } => {
            finish(commands::cmd_train_interest(&cfg, &data, &out)?, stem, None)
        }
        Command::EvalSkip { target, data, slice } => {
            let slice = Slice::parse(&slice).ok_or_else(|| Error::invalid(format!("unknown slice `{slice}`")))?;
            let report = commands::cmd_eval_skip(&cfg, &SkipTarget::parse(&target), &data, slice)?;
            finish(report, stem, Some(data.join("eval_skip_report")))
        }
        Command::TrainRec { interest, data, out, mode } => {
            if let Some(m) = mode {
                cfg.set("rec.mode", parse_mode(&m)?.as_str())?;
            }
            let report = commands::cmd_train_rec(&cfg, &InterestSource::parse(&interest), &data, &out)?;
            finish(report, stem, None)
        }
        Command::EvalRec { interest, checkpoint, data, mode } => {
            let mode = mode.as_deref().map(parse_mode).transpose()?;
            let report = commands::cmd_eval_rec(&cfg, &InterestSource::parse(&interest), &checkpoint, &data, mode)?;
            finish(report, stem, Some(data.join("eval_rec_report")))
        }
        Command::PredictHeatmap { checkpoint, user, video, data } => {
            let record = commands::cmd_predict_heatmap(&cfg, &checkpoint, &user, &video, &data)?;
            let json = serde_json::to_string(&record).map_err(|e| Error::invalid(e.to_string()))?;
            println!("{json}");
            if let Some(stem) = stem {
                let path = stem.with_extension("json");
                std::fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Ablate { data, drop } => {
            let drop = Ablation::parse(&drop).ok_or_else(|| Error::invalid(format!("unknown ablation `{drop}`")))?;
            let report = commands::cmd_ablate(&cfg, &data, drop)?;
            finish(report, stem, Some(data.join(format!("ablate_{}_report", drop.as_str()))))
        }
        Command::ConfigReference => {
            print!("{}", RunConfig::reference());
            Ok(())
        }
    }
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
