use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlcap::data::{self, split_corpus, Profile, SynthSpec};
use vlcap::{checkpoint, gradcheck, train, Error, Result, RunConfig};

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vlcap", version, about = "Video paragraph captioning: train, evaluate and generate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as train/val/test JSONL files.
    Synth {
        /// JSON file with a synthetic corpus spec; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// `anet` or `youcook`.
        #[arg(long)]
        profile: Option<Profile>,
        #[arg(long)]
        n_videos: Option<usize>,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score greedy paragraphs against the captions of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 14)]
        max_len: usize,
    },
    /// Write greedy paragraphs for every video of a dataset.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        max_len: usize,
    },
    /// Finite-difference check of every parameter gradient on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Write the per-parameter report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            out,
            profile,
            n_videos,
        } => {
            let mut spec: SynthSpec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(p) = profile {
                spec.profile = p;
            }
            if let Some(n) = n_videos {
                spec.n_videos = n;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let (tr, va, te) = split_corpus(spec.generate());
            for (name, recs) in [("train", &tr), ("val", &va), ("test", &te)] {
                data::write_jsonl(&out.join(format!("{name}.jsonl")), recs)?;
            }
            log::info!(
                "{}",
                serde_json::json!({"event": "synth", "train": tr.len(), "val": va.len(), "test": te.len()})
            );
        }
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                if let Some(spec) = cfg.data.synth.as_mut() {
                    spec.seed = s;
                }
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = train::train(&cfg)?;
            log::info!(
                "{}",
                serde_json::json!({
                    "event": "done",
                    "steps": outcome.steps,
                    "best_checkpoint": outcome.best_checkpoint,
                    "loss_log": outcome.log_path,
                    "best": outcome.best,
                })
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            max_len,
        } => {
            let (report, _) = train::evaluate_checkpoint(&checkpoint, &data, max_len)?;
            println!("{report}");
            println!("{}", serde_json::to_string(&report)?);
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
        }
        Command::Generate {
            checkpoint,
            input,
            out,
            max_len,
        } => {
            let model = checkpoint::load(&checkpoint)?;
            let records = data::load_jsonl(&input)?;
            let preds = train::generate(&model, &records, max_len)?;
            data::write_jsonl(&out, &preds)?;
        }
        Command::Gradcheck { seed, eps, out } => {
            let (mut model, batch, loss_cfg) = gradcheck::reference_setup(seed)?;
            let report = gradcheck::check_model(&mut model, &batch, &loss_cfg, eps)?;
            for p in &report.params {
                log::info!("{}", serde_json::to_string(p)?);
            }
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            if let Some(w) = report.worst() {
                if w.rel_error >= GRAD_TOL {
                    return Err(Error::Contract(format!(
                        "gradient of `{}` off by relative {:.3e}",
                        w.name, w.rel_error
                    )));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
