//! Command-line entry point: `generate`, `train`, `disentangle`, `eval`,
//! `gradcheck`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::corpus::{generate_synthetic, load_conversations, save_conversations, segment, segment_all, Conversation, SyntheticSpec, WINDOW};
use crate::error::{Error, Result};
use crate::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use crate::kv;
use crate::trainer::{disentangle_all, embedding_table, evaluate, train, Checkpoint, KSelector, Mode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "bicl", about = "Conversation disentanglement with bi-level contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus described by a `key = value` spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSONL file receiving one line per optimizer step.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config entry, `key=value`; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Predict sessions and write the corpus back with predictions.
    Disentangle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "k-selector")]
        k_selector: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score a checkpoint against gold sessions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "k-selector")]
        k_selector: Option<String>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss and the encoder.
    Gradcheck {
        #[arg(long)]
        seed: u64,
    },
}

/// Runs one command (without the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = std::iter::once("bicl".to_string())
        .chain(args.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn flag_error(flag: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{flag}: {m}")),
        other => other,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn table_for(config: &TrainConfig, embeddings: Option<&Path>) -> Result<crate::corpus::EmbeddingTable> {
    let mut config = config.clone();
    if let Some(p) = embeddings {
        config.embeddings = Some(p.display().to_string());
    }
    embedding_table(&config)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Generate { spec, out, seed } => {
            let spec = SyntheticSpec::from_entries(&kv::read(&spec)?).map_err(|e| flag_error("--spec", e))?;
            let corpus = generate_synthetic(&spec, seed)?;
            save_conversations(&out, &corpus)?;
            Ok(EXIT_OK)
        }
        Command::Train {
            mode,
            data,
            embeddings,
            config,
            out,
            log,
            seed,
            overrides,
        } => {
            let mut cfg = TrainConfig::from_entries(&kv::read(&config)?).map_err(|e| flag_error("--config", e))?;
            cfg.mode = mode.parse::<Mode>().map_err(|e| flag_error("--mode", e))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = &embeddings {
                cfg.embeddings = Some(p.display().to_string());
            }
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set: expected key=value, got {o:?}")))?;
                cfg.set(k.trim(), v.trim()).map_err(|e| flag_error("--set", e))?;
            }
            cfg.validate().map_err(|e| flag_error("--config", e))?;
            let table = embedding_table(&cfg)?;
            let corpus = segment_all(&load_conversations(&data)?, WINDOW);
            let outcome = train(&corpus, &cfg, &table)?;
            outcome.checkpoint.save(&out)?;
            if let Some(path) = log {
                let mut w = create(&path)?;
                for entry in &outcome.log {
                    let line = serde_json::to_string(entry).map_err(|e| Error::Data(e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
            Ok(EXIT_OK)
        }
        Command::Disentangle {
            ckpt,
            data,
            k_selector,
            out,
            embeddings,
        } => {
            let selector: KSelector = k_selector.parse().map_err(|e| flag_error("--k-selector", e))?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let table = table_for(&ckpt.config, embeddings.as_deref())?;
            let mut corpus = load_conversations(&data)?;
            for conv in &mut corpus {
                annotate(conv, &ckpt, &table, selector)?;
            }
            save_conversations(&out, &corpus)?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            ckpt,
            data,
            report,
            k_selector,
            embeddings,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let selector = match k_selector {
                Some(s) => s.parse().map_err(|e| flag_error("--k-selector", e))?,
                None => ckpt.config.k_selector,
            };
            let table = table_for(&ckpt.config, embeddings.as_deref())?;
            let corpus = segment_all(&load_conversations(&data)?, WINDOW);
            let r = evaluate(&corpus, &ckpt.model, &ckpt.config, &table, selector)?;
            write_json(&report, &r)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seed } => {
            let rows = gradient_suite(seed)?;
            println!("{:<12} {:>14}", "check", "max rel error");
            let mut ok = true;
            for r in &rows {
                let pass = r.max_relative_error < GRAD_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<12} {:>14.3e} {}",
                    r.name,
                    r.max_relative_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
        }
    }
}

/// Writes predicted session ids into a conversation of any length. Windows
/// are disentangled independently and their session ids offset so they
/// stay distinct across the whole conversation.
fn annotate(conv: &mut Conversation, ckpt: &Checkpoint, table: &crate::corpus::EmbeddingTable, selector: KSelector) -> Result<()> {
    let windows = segment(conv, WINDOW);
    let predictions = disentangle_all(&windows, &ckpt.model, &ckpt.config, table, selector)?;
    let mut offset = 0;
    for (w, (window, pred)) in windows.iter().zip(&predictions).enumerate() {
        for (pos, &label) in pred.partition.0.iter().enumerate() {
            conv.utterances[w * WINDOW + pos].predicted_session_id = Some(offset + label);
        }
        offset += pred.k;
        debug_assert_eq!(window.len(), pred.partition.len());
    }
    conv.predicted_k = Some(offset);
    conv.k_selector = Some(selector.to_string());
    Ok(())
}
