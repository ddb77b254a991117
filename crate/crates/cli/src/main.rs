mod plot;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tham_core::config::{resolve_config, RunConfig};
use tham_core::eval::{ablate_hlm, dump_features, evaluate_checkpoint, score_predictions};
use tham_core::mine::mi_selftest;
use tham_core::model::{Checkpoint, SegmentComposition};
use tham_core::synthdata::{generate_corpus, read_dataset, write_dataset, Corpus};
use tham_core::textproc::{align_predictions, prediction_records, read_predictions, write_predictions, INCORRECT_THRESHOLD};
use tham_core::training::{train_stage1, train_stage2, write_atomic, RunControl, RunDir, Task};
use tham_core::{Error, Real, Result};

use rundir::RunGuard;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "THAM_OUT";

#[derive(Parser, Debug)]
#[command(name = "tham", version, about = "Text hallucination mitigation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied under the file (`paper`).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for data generation, training and the estimator self-test.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// THR weight.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Output root [default: $THAM_OUT or ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs_stage1=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData,
    /// Train the response, hallucination and pure language models.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ctl: Control,
    },
    /// Minimax regularization of the response model.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rlm: PathBuf,
        #[arg(long)]
        hlm: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[command(flatten)]
        ctl: Control,
    },
    /// Decode a split with a checkpoint and score it.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Copy diagnostics for a predictions file.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = INCORRECT_THRESHOLD)]
        threshold: f64,
    },
    /// Full two-stage runs over hallucination-model input variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants [default: all five].
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Export one feature coordinate of the three models as CSV.
    DumpFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rlm: PathBuf,
        #[arg(long)]
        hlm: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        coordinate: Option<usize>,
    },
    /// Check the estimator against closed-form Gaussian mutual information.
    MiSelftest {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.8])]
        rhos: Vec<f64>,
    },
    /// Render loss curves and feature scatters from a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Copy)]
struct Control {
    /// Continue an interrupted run in place.
    #[arg(long)]
    resume: bool,
    /// Stop after this epoch.
    #[arg(long)]
    stop_after: Option<usize>,
}

impl From<Control> for RunControl {
    fn from(c: Control) -> Self {
        RunControl {
            resume: c.resume,
            stop_after: c.stop_after,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("`--set {kv}` is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = common.seed {
        for k in ["data.seed", "train.seed", "selftest.seed"] {
            overrides.push((k.into(), s.to_string()));
        }
    }
    if let Some(a) = common.alpha {
        overrides.push(("train.alpha".into(), a.to_string()));
    }
    if let Some(id) = &common.run_id {
        overrides.push(("run_id".into(), serde_json::to_string(id)?));
    }
    let mut cfg = resolve_config(common.config.as_deref(), common.preset.as_deref(), &overrides)?;
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from));
    }
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_dataset(path)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

fn run(cli: Cli) -> Result<PathBuf> {
    let cfg = resolve(&cli.common)?;
    let resume = match &cli.command {
        Command::TrainStage1 { ctl, .. } | Command::TrainStage2 { ctl, .. } => ctl.resume,
        _ => false,
    };
    let guard = RunGuard::open(cfg.out_dir.as_deref().expect("resolved"), &cfg.run_id, resume)?;
    let dir = guard.work_dir().to_path_buf();
    write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
    match cli.command {
        Command::GenData => {
            let corpus = generate_corpus(&cfg.data)?;
            write_dataset(&corpus, &dir.join("corpus.json"))?;
        }
        Command::TrainStage1 { data, ctl } => {
            let corpus = load_corpus(&data)?;
            let task = Task::new(&corpus)?;
            let run = RunDir::new(&dir, cfg.train.checkpoint_dir.as_deref())?;
            let out = train_stage1::<Real>(&cfg.train, &cfg.model, &task, &run, ctl.into())?;
            write_json(
                &dir.join("stage1.json"),
                &serde_json::json!({
                    "rlm": guard.published(&out.rlm),
                    "hlm": guard.published(&out.hlm),
                    "lm": guard.published(&out.lm),
                    "best_epochs": out.best_epochs, "finished": out.finished,
                }),
            )?;
        }
        Command::TrainStage2 { data, rlm, hlm, lm, ctl } => {
            let corpus = load_corpus(&data)?;
            let (r, h, l) = (Checkpoint::load(&rlm)?, Checkpoint::load(&hlm)?, Checkpoint::load(&lm)?);
            let task = Task::new(&corpus)?;
            r.verify_vocab(&task.vocab)?;
            let run = RunDir::new(&dir, cfg.train.checkpoint_dir.as_deref())?;
            let out = train_stage2::<Real>(&r, &h, &l, &cfg.train, &task, &run, ctl.into())?;
            write_json(
                &dir.join("stage2.json"),
                &serde_json::json!({ "rlm": guard.published(&out.rlm), "best_epoch": out.best_epoch, "finished": out.finished }),
            )?;
        }
        Command::Evaluate { data, checkpoint } => {
            let corpus = load_corpus(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (m, preds) = evaluate_checkpoint::<Real>(&ck, &corpus, &cfg.eval)?;
            let examples = cfg.eval.examples(&corpus);
            m.write_json(&dir.join("metrics.json"))?;
            write_predictions(&prediction_records(&preds, &examples), &dir.join("predictions.jsonl"))?;
            m.hallucination.write_csv(&dir.join("hallucination.csv"))?;
        }
        Command::Diagnose { data, predictions, threshold } => {
            let corpus = load_corpus(&data)?;
            let records = read_predictions(&predictions)?;
            let examples = cfg.eval.examples(&corpus);
            let preds = align_predictions(&records, &examples)?;
            let mut m = score_predictions(&preds, &examples)?;
            if threshold != INCORRECT_THRESHOLD {
                m.hallucination = tham_core::textproc::hallucination_report(&preds, &examples, threshold)?;
            }
            m.hallucination.write_json(&dir.join("hallucination.json"))?;
            m.hallucination.write_csv(&dir.join("hallucination.csv"))?;
        }
        Command::Ablate { data, variants } => {
            let corpus = load_corpus(&data)?;
            let variants: Vec<SegmentComposition> = if variants.is_empty() {
                SegmentComposition::hlm_variants()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            ablate_hlm::<Real>(&variants, &cfg, &corpus, &dir)?;
        }
        Command::DumpFeatures { data, rlm, hlm, lm, n_samples, coordinate } => {
            let corpus = load_corpus(&data)?;
            let task = Task::new(&corpus)?;
            let (r, h, l) = (Checkpoint::load(&rlm)?, Checkpoint::load(&hlm)?, Checkpoint::load(&lm)?);
            for ck in [&r, &h, &l] {
                ck.verify_vocab(&task.vocab)?;
            }
            let (rm, hm, lmm) = (r.to_model::<Real>()?, h.to_model::<Real>()?, l.to_model::<Real>()?);
            let dump = dump_features(
                (&rm, &r.composition),
                (&hm, &h.composition),
                &lmm,
                &corpus,
                &task.vocab,
                &task.valid,
                n_samples.unwrap_or(cfg.eval.feature_samples),
                coordinate.unwrap_or(cfg.eval.feature_coordinate),
            )?;
            dump.write_csv(&dir.join("scatter.csv"))?;
            write_json(
                &dir.join("correlations.json"),
                &serde_json::json!({
                    "coordinate": dump.coordinate,
                    "rows": dump.rows.len(),
                    "corr_f_fstar": dump.corr_f_fstar,
                    "corr_f_g": dump.corr_f_g,
                }),
            )?;
        }
        Command::MiSelftest { rhos } => {
            let recs = mi_selftest(&rhos, &cfg.selftest)?;
            for r in &recs {
                println!(
                    "rho {:.2}: estimate {:.4}, analytic {:.4}, error {:.4}",
                    r.rho, r.estimate, r.analytic_mi, r.abs_error
                );
            }
            write_json(&dir.join("mi_selftest.json"), &recs)?;
        }
        Command::Plot { run } => {
            plot::render(&run, &dir)?;
        }
    }
    guard.commit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
