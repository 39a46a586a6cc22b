use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xtroll::adapters::FusionVariant;
use xtroll::checkpoint::{self, CheckpointError};
use xtroll::config::RunConfig;
use xtroll::corpus::{self, CorpusError, UserTimeline};
use xtroll::pipeline::{self, metrics_value, to_pretty, Session};
use xtroll::training::SplitPart;

#[derive(Parser)]
#[command(name = "xtroll", about = "Explainable troll detection on synthetic campaign corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as JSONL.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training phases and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-phase loss and validation log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a split and write metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: PartArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write explanation reports for the given users (default: test split).
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',')]
        users: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-campaign mean gate weights.
    ReportGating {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: PartArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the joint phase under ablation variants and score the test split.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// `all`, `full`, `without_<kind>` or `only_<kind>`.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PartArg {
    Train,
    Validation,
    Test,
}

impl From<PartArg> for SplitPart {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Train => SplitPart::Train,
            PartArg::Validation => SplitPart::Validation,
            PartArg::Test => SplitPart::Test,
        }
    }
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl ToString) -> Self {
        Failure { code: 2, msg: msg.to_string() }
    }
    fn missing(path: &Path) -> Self {
        Failure { code: 3, msg: format!("file not found: {}", path.display()) }
    }
    fn format(msg: impl ToString) -> Self {
        Failure { code: 4, msg: msg.to_string() }
    }
    fn other(msg: impl ToString) -> Self {
        Failure { code: 1, msg: msg.to_string() }
    }
}

type Outcome<T> = Result<T, Failure>;

fn open(path: &Path) -> Outcome<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::missing(path),
        _ => Failure::other(format!("{}: {e}", path.display())),
    })
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Failure::missing(p),
                _ => Failure::other(e),
            })?;
            RunConfig::from_toml(&text).map_err(Failure::config)
        }
    }
}

fn load_corpus(path: &Path) -> Outcome<Vec<UserTimeline>> {
    corpus::read_jsonl(BufReader::new(open(path)?)).map_err(|e| match e {
        CorpusError::Io(e) => Failure::other(e),
        other => Failure::format(format!("{}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Outcome<(xtroll::model::Model, RunConfig)> {
    checkpoint::load(BufReader::new(open(path)?)).map_err(|e| match e {
        CheckpointError::Io(e) => Failure::other(e),
        other => Failure::format(format!("{}: {other}", path.display())),
    })
}

fn session(ckpt: &Path, corpus_path: &Path) -> Outcome<Session> {
    let (model, cfg) = load_checkpoint(ckpt)?;
    let users = load_corpus(corpus_path)?;
    Session::attach(model, cfg, &users).map_err(Failure::other)
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Datagen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let users = pipeline::generate(&cfg).map_err(Failure::config)?;
            let f = File::create(&out).map_err(Failure::other)?;
            corpus::write_jsonl(&users, BufWriter::new(f)).map_err(Failure::other)?;
            let trolls = users.iter().filter(|u| u.is_troll()).count();
            println!("wrote {} users ({trolls} trolls) to {}", users.len(), out.display());
        }
        Command::Train { config, corpus: corpus_path, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let users = load_corpus(&corpus_path)?;
            let mut s = Session::init(&cfg, &users).map_err(Failure::other)?;
            let report = s.train().map_err(Failure::other)?;
            for p in &report.phases {
                let last = p.validation.last().copied().unwrap_or(f64::NAN);
                println!("{:<22} epochs {:>2}  best {:>2}  last val {last:.4}", p.name, p.epoch_loss.len(), p.best_epoch);
            }
            let f = File::create(&out).map_err(Failure::other)?;
            checkpoint::save(&s.model, &cfg, BufWriter::new(f)).map_err(Failure::other)?;
            if let Some(log) = log {
                write(&log, &to_pretty(&report))?;
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { checkpoint, corpus, split, out } => {
            let s = session(&checkpoint, &corpus)?;
            let m = s.evaluate(split.into(), FusionVariant::Full).map_err(Failure::other)?;
            write(&out, &to_pretty(&metrics_value(&m, &s.config)))?;
            println!(
                "troll f1 {:.4}  campaign macro-f1 {:.4}  rationale p/r {:.4}/{:.4}",
                m.troll.f1, m.campaign_macro_f1, m.rationale.precision, m.rationale.recall
            );
        }
        Command::Explain { checkpoint, corpus, users, out } => {
            let s = session(&checkpoint, &corpus)?;
            let ids = if users.is_empty() { s.user_ids(SplitPart::Test) } else { users };
            let reports = s.explain(&ids).map_err(Failure::config)?;
            write(&out, &to_pretty(&reports))?;
            println!("{} explanation reports written to {}", reports.len(), out.display());
        }
        Command::ReportGating { checkpoint, corpus, split, out } => {
            let s = session(&checkpoint, &corpus)?;
            let rows = s.gating(split.into()).map_err(Failure::other)?;
            write(&out, &to_pretty(&rows))?;
            for r in &rows {
                let w: Vec<String> = r.weights.iter().map(|x| format!("{x:.3}")).collect();
                println!("{:<4} {}", r.campaign, w.join(" "));
            }
        }
        Command::Ablate { checkpoint, corpus, variant, out } => {
            let s = session(&checkpoint, &corpus)?;
            let variants = if variant == "all" {
                std::iter::once(FusionVariant::Full).chain(FusionVariant::ablations()).collect()
            } else {
                vec![FusionVariant::parse(&variant).ok_or_else(|| Failure::config(format!("unknown variant `{variant}`")))?]
            };
            let mut table = serde_json::Map::new();
            for v in variants {
                let m = s.ablate(v).map_err(Failure::other)?;
                println!("{:<22} troll f1 {:.4}  campaign macro-f1 {:.4}", v.name(), m.troll.f1, m.campaign_macro_f1);
                table.insert(v.name(), metrics_value(&m, &s.config));
            }
            write(&out, &to_pretty(&table))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
