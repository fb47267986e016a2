use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hatlab::config::Config;
use hatlab::data::read_dataset;
use hatlab::error::{HatError, Result};
use hatlab::ngram::NGramModel;
use hatlab::pipeline::{self, context_table, decode_dataset, lambda2_sweep, linearity_table, parse_context_runs, prior_cost_series};
use hatlab::posterior::GridKind;
use hatlab::train::{evaluate, load_checkpoint, save_checkpoint, train};

#[derive(Parser)]
#[command(name = "hatlab", version, about = "Hybrid autoregressive transducer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.context=2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            cfg.set_pair(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task, its text corpus and n-gram LMs
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint and training log
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to <out>.log
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Beam-search a dataset, writing n-best lists and a WER report
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// N-best output file
        #[arg(long)]
        out: PathBuf,
        /// Defaults to <out>.wer
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean loss and prior cost of a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the lambda2 sweep, linearity, prior-cost and context tables
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log for the prior-cost series
        #[arg(long)]
        train_log: Option<PathBuf>,
        /// Context-size run as <c>:<checkpoint>; c is 0, 1, 2, 4, ... or inf
        #[arg(long = "context", value_name = "C:CKPT")]
        contexts: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the oracle and property suites
    Selftest {
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn load_lm(path: Option<&PathBuf>) -> Result<Option<NGramModel>> {
    path.map(|p| NGramModel::load_arpa(p)).transpose()
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HatError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HatError::io(path, e))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { out, cfg } => {
            let cfg = cfg.load()?;
            let task = pipeline::generate_task(&cfg, &out)?;
            println!("train\t{}\ntest\t{}\nlm_sentences\t{}", task.train.utterances.len(), task.test.utterances.len(), task.lm_corpus.len());
        }
        Command::Train { data, out, log, cfg } => {
            let cfg = cfg.load()?;
            let ds = read_dataset(&data)?;
            let result = train(&cfg, &ds)?;
            save_checkpoint(&result.params, cfg.model.loss, &out)?;
            write(&log.unwrap_or_else(|| with_ext(&out, ".log")), &result.log)?;
            let last = result.epochs.last().expect("epoch 0 is always recorded");
            println!("epoch\t{}\tloss\t{}\tprior_cost\t{}", last.epoch, last.loss, last.prior_cost.map_or("na".into(), |p| p.to_string()));
        }
        Command::Decode { checkpoint, data, lm, out, report, cfg } => {
            let cfg = cfg.load()?;
            let (params, kind) = load_checkpoint(&checkpoint)?;
            let ds = read_dataset(&data)?;
            let lm = load_lm(lm.as_ref())?;
            let r = decode_dataset(kind, &params, &ds, lm.as_ref(), &cfg.decode.search)?;
            write(&out, &r.nbest)?;
            write(&report.unwrap_or_else(|| with_ext(&out, ".wer")), &r.to_text())?;
            print!("{}", r.to_text());
        }
        Command::Eval { checkpoint, data } => {
            let (params, kind) = load_checkpoint(&checkpoint)?;
            let r = evaluate(kind, &params, &read_dataset(&data)?)?;
            println!("loss\t{}\nprior_cost\t{}", r.loss, r.prior_cost.map_or("na".into(), |p| p.to_string()));
        }
        Command::Diagnose { checkpoint, data, lm, out, train_log, contexts, cfg } => {
            let cfg = cfg.load()?;
            let ds = read_dataset(&data)?;
            let lm = load_lm(lm.as_ref())?;
            mkdir(&out)?;
            if let Some(ckpt) = &checkpoint {
                let (params, kind) = load_checkpoint(ckpt)?;
                if kind == GridKind::Hat {
                    let (table, _) = lambda2_sweep(&params, &ds, lm.as_ref(), &cfg.decode.search, &cfg.decode.sweep_points())?;
                    write(&out.join("lambda2_sweep.tsv"), &table)?;
                }
                if kind != GridKind::Ctc {
                    write(&out.join("linearity.tsv"), &linearity_table(&params, &ds, cfg.decode.tau)?)?;
                }
            }
            if let Some(log) = &train_log {
                write(&out.join("prior_cost.tsv"), &prior_cost_series(log)?)?;
            }
            if !contexts.is_empty() {
                let runs = parse_context_runs(&contexts)?
                    .into_iter()
                    .map(|(c, p)| load_checkpoint(&p).map(|(params, kind)| (c, params, kind)))
                    .collect::<Result<Vec<_>>>()?;
                write(&out.join("context.tsv"), &context_table(&runs, &ds, lm.as_ref(), &cfg.decode.search)?)?;
            }
            if checkpoint.is_none() && train_log.is_none() && contexts.is_empty() {
                return Err(HatError::Argument("nothing to diagnose: pass --checkpoint, --train-log or --context".into()));
            }
        }
        Command::Selftest { out } => {
            let results = hatlab::selftest::run_all()?;
            let text: String = results.iter().map(|r| r.line() + "\n").collect();
            print!("{text}");
            if let Some(p) = out {
                write(&p, &text)?;
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
