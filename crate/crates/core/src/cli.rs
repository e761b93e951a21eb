//! Command-line front end: subcommands, file outputs and exit codes.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{generate_corpus, read_corpus, write_corpus, PairedSample};
use crate::error::{Error, Result};
use crate::eval::{ablation_csv, ablation_suite, ablation_summary, evaluate, perturbation_sweep, sweep_csv};
use crate::gradcheck::{check_objective, TOLERANCE};
use crate::trainer::{log_csv, Checkpoint, Trainer, LOG_HEADER};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "robust-mmr", version, about = "Robust multi-modal masked reconstruction pre-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus as JSONL.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train and write checkpoint.json and train_log.csv to the output directory.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates (the schedule still spans total_steps).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Probe accuracies, domain drop and retrieval metrics to eval_report.json.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Probe accuracy across perturbation severities to sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train every component-toggle row per seed and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the fully defaulted configuration.
    DefaultConfig,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn load_corpus(path: &Path) -> Result<Vec<PairedSample>> {
    read_corpus(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Rows of an existing log up to and including `step`, header first.
fn log_prefix(path: &Path, step: usize) -> Result<String> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let Ok(text) = fs::read_to_string(path) else { return Ok(out) };
    for line in text.lines().skip(1) {
        let s: usize = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format { line: 0, message: format!("bad log row {line:?}") })?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn pretrain(cfg: &RunConfig, corpus: &[PairedSample], resume: Option<&Path>, until: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let dir = output_dir(cfg)?.to_path_buf();
    let log_path = dir.join(LOG_FILE);
    let (mut trainer, mut log) = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != cfg.job() {
                return Err(Error::Compatibility("checkpoint was trained with a different configuration".into()));
            }
            let prefix = log_prefix(&log_path, ckpt.step)?;
            (Trainer::from_checkpoint(ckpt, corpus)?, prefix)
        }
        None => (Trainer::new(cfg.job(), corpus)?, String::new()),
    };
    trainer.run_until(until.unwrap_or(usize::MAX))?;
    if log.is_empty() {
        log = log_csv(trainer.log());
    } else {
        log.push_str(log_csv(trainer.log()).split_once('\n').map_or("", |(_, rows)| rows));
    }
    fs::write(&log_path, log)?;
    trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    if let Some(last) = trainer.log().last() {
        writeln!(out, "step {} {}", last.step, last.loss)?;
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::DefaultConfig => {
            writeln!(out, "{}", RunConfig::default().to_json()?)?;
        }
        Command::GenData { config, out: path } => {
            let cfg = load_config(&config)?;
            let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
            write_corpus(&corpus, &path)?;
            writeln!(out, "wrote {} samples to {}", corpus.len(), path.display())?;
        }
        Command::Pretrain { config, corpus, resume, until } => {
            let cfg = load_config(&config)?;
            let samples = load_corpus(&corpus)?;
            pretrain(&cfg, &samples, resume.as_deref(), until, out)?;
        }
        Command::Eval { config, corpus, ckpt } => {
            let cfg = load_config(&config)?;
            let samples = load_corpus(&corpus)?;
            let report = evaluate(&Checkpoint::load(ckpt)?, &samples, &cfg.eval)?;
            let dir = output_dir(&cfg)?;
            fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
            writeln!(
                out,
                "id {:.1}% cd {:.1}% drop {:.1} mean_rank {:.3} delta_mean_rank {:.3}",
                report.id_accuracy_pct,
                report.cd_accuracy_pct,
                report.drop,
                report.retrieval.mean_rank,
                report.retrieval.delta_mean_rank
            )?;
        }
        Command::Sweep { config, corpus, ckpt } => {
            let cfg = load_config(&config)?;
            cfg.eval.validate()?;
            let samples = load_corpus(&corpus)?;
            let points = perturbation_sweep(&Checkpoint::load(ckpt)?, &samples, &cfg.eval.severities, cfg.eval.train_fraction)?;
            fs::write(output_dir(&cfg)?.join(SWEEP_FILE), sweep_csv(&points))?;
            write!(out, "{}", sweep_csv(&points))?;
        }
        Command::Ablate { config, corpus, seeds } => {
            let cfg = load_config(&config)?;
            let samples = load_corpus(&corpus)?;
            let rows = ablation_suite(&cfg.job(), &samples, &seeds, &cfg.eval)?;
            fs::write(output_dir(&cfg)?.join(ABLATION_FILE), ablation_csv(&rows))?;
            for ([a, b, c], mean, lo, hi) in ablation_summary(&rows) {
                let mark = |t: bool| if t { "on " } else { "off" };
                writeln!(out, "{} {} {}  {:.3} [{:.3}, {:.3}]", mark(a), mark(b), mark(c), mean, lo, hi)?;
            }
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(&config)?;
            let report = check_objective(&cfg.job())?;
            for t in &report.terms {
                writeln!(out, "{:<10} {:.3e}", t.term, t.max_relative_error)?;
            }
            if !report.passed() {
                writeln!(out, "FAIL: max relative error >= {TOLERANCE:e}")?;
                return Ok(4);
            }
        }
    }
    Ok(0)
}

/// Runs the CLI on `args`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
