//! `valpat` command-line entry point.
//!
//! Exit codes: 0 success, 1 failed validation or runtime error (one
//! `error kind=<kind> message=<json string>` line on stderr), 2 usage error.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use crate::data::{load_manifest, save_manifest, validate_dataset, Dataset};
use crate::encoders::Tokenizer;
use crate::error::{Error, Result};
use crate::evaluation::{
    attribute_metrics, cmc_map, cmc_map_leave_one_out, embed_dataset, predict_attributes, reid_report,
    text_search_report, topk_text_search, EmbeddingSet, Modality,
};
use crate::imaging::FileImageLoader;
use crate::mining::{build_vocabulary, label_sample, AttributeVocabulary, TaggerLexicon};
use crate::synthetic::card_dataset;
use crate::trainer::{
    inspect_checkpoint, load_checkpoint, prepare_dataset, run_training, save_checkpoint, TrainConfig, TrainState,
};

pub const LOG_ENV: &str = "VALPAT_LOG_LEVEL";

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "valpat", version, about = "Pedestrian vision-language pre-training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label every captioned sample of a manifest against a vocabulary.
    MineAttributes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Output manifest with `attributes` filled in.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine the top-M noun/adjective vocabulary from manifest captions.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoders and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Embed a manifest with the query encoders of a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "image")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP and CMC of query embeddings against a gallery.
    EvalReid {
        #[arg(long)]
        query: PathBuf,
        /// Omit to rank the query set against itself, excluding each query.
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        max_rank: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Attribute recognition metrics of a checkpoint on a labelled manifest.
    EvalAttributes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Top-K text-to-image search accuracy.
    EvalTextSearch {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Print the header, tensor table and queue fill of a checkpoint.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Also write the single-line JSON metric record here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Config file; the desk profile when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest; the built-in 32-card synthetic set when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Attribute vocabulary; required with a manifest unless --no-mac.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this global step (the schedule still spans all epochs).
    #[arg(long)]
    pub until_step: Option<u64>,
    /// Continue from a checkpoint trained with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub no_ssl: bool,
    #[arg(long)]
    pub no_itc: bool,
    #[arg(long)]
    pub no_mac: bool,
    #[arg(long)]
    pub mac_hard_only: bool,
}

/// Parses `argv` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_logging() {
        eprintln!("{}", error_line(&e));
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// `error kind=<kind> message=<json string>`, always one line.
pub fn error_line(e: &Error) -> String {
    let msg = serde_json::to_string(&e.to_string()).expect("strings serialise");
    format!("error kind={} message={msg}", e.kind())
}

fn init_logging() -> Result<()> {
    let level = match std::env::var(LOG_ENV) {
        Err(_) => LevelFilter::Warn,
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "error" => LevelFilter::Error,
            "warn" => LevelFilter::Warn,
            "info" => LevelFilter::Info,
            "debug" => LevelFilter::Debug,
            other => {
                return Err(Error::Config(format!(
                    "{LOG_ENV}={other:?} is not one of error, warn, info, debug"
                )))
            }
        },
    };
    // A second init within one process (tests) keeps the first logger.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MineAttributes { manifest, vocab, out } => mine_attributes(&manifest, &vocab, &out),
        Command::BuildVocab { manifest, m, out } => {
            let vocab = vocabulary_from_manifest(&manifest, m)?;
            vocab.save(&out)?;
            say!("wrote {} attributes to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Pretrain(args) => pretrain(&args),
        Command::Embed {
            checkpoint,
            manifest,
            modality,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_manifest(&manifest, None)?;
            let set = embed_dataset(&state, &ds, modality, &FileImageLoader)?;
            set.save(&out)?;
            say!("wrote {} x {} embeddings to {}", set.len(), set.dim(), out.display());
            Ok(())
        }
        Command::EvalReid {
            query,
            gallery,
            max_rank,
            report,
        } => {
            let q = EmbeddingSet::load(&query)?;
            let (map, cmc) = match gallery {
                Some(g) => cmc_map(&q, &EmbeddingSet::load(&g)?, max_rank)?,
                None => cmc_map_leave_one_out(&q, max_rank)?,
            };
            emit(&reid_report(map, &cmc)?, &report)
        }
        Command::EvalAttributes {
            checkpoint,
            manifest,
            threshold,
            report,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_manifest(&manifest, state.vocabulary.clone())?;
            let (pred, labels) = predict_attributes(&state, &ds, &FileImageLoader)?;
            emit(&attribute_metrics(pred.view(), labels.view(), threshold)?, &report)
        }
        Command::EvalTextSearch {
            query,
            gallery,
            ks,
            report,
        } => {
            let acc = topk_text_search(&EmbeddingSet::load(&query)?, &EmbeddingSet::load(&gallery)?, &ks)?;
            emit(&text_search_report(&ks, &acc)?, &report)
        }
        Command::InspectCheckpoint { checkpoint } => {
            let info = inspect_checkpoint(&checkpoint)?;
            say!(
                "format_version={} step={} config_hash={} tau_prime={:.6}",
                info.format_version, info.step, info.config_hash, info.tau_prime
            );
            for (name, fill) in &info.queue_fill {
                say!("queue {name} filled={fill}");
            }
            for (name, r, c) in &info.tensors {
                say!("tensor {name} {r}x{c}");
            }
            Ok(())
        }
    }
}

/// `key=value` line, then a table; optionally the JSON record to a file.
fn emit(report: &crate::data::MetricReport, args: &ReportArgs) -> Result<()> {
    let line: Vec<String> = report.values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    say!("{}", line.join(" "));
    let _ = write!(std::io::stdout().lock(), "{}", report.to_table());
    if let Some(path) = &args.json {
        fs::write(path, format!("{}\n", report.to_record())).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn captions(ds: &Dataset) -> Vec<String> {
    ds.samples
        .iter()
        .filter(|s| s.has_caption())
        .filter_map(|s| s.caption.clone())
        .collect()
}

/// Top-`m` vocabulary over the captioned samples of a manifest.
pub fn vocabulary_from_manifest(manifest: &Path, m: usize) -> Result<AttributeVocabulary> {
    let ds = load_manifest(manifest, None)?;
    build_vocabulary(&captions(&ds), m, &TaggerLexicon::bundled())
}

/// Fills `attributes` for every captioned sample that lacks them.
pub fn label_dataset(ds: &mut Dataset, vocab: &AttributeVocabulary) -> Result<usize> {
    let lex = TaggerLexicon::bundled();
    let mut n = 0;
    for s in ds.samples.iter_mut() {
        if s.attributes.is_none() && s.has_caption() {
            let c = s.caption.as_deref().expect("has_caption");
            s.attributes = Some(label_sample(c, vocab, &lex)?);
            n += 1;
        }
    }
    ds.vocabulary = Some(vocab.clone());
    Ok(n)
}

fn mine_attributes(manifest: &Path, vocab: &Path, out: &Path) -> Result<()> {
    let vocab = AttributeVocabulary::load(vocab)?;
    let mut ds = load_manifest(manifest, None)?;
    for s in ds.samples.iter_mut() {
        s.attributes = None;
    }
    let n = label_dataset(&mut ds, &vocab)?;
    save_manifest(&ds, out)?;
    say!("labelled {n} of {} samples into {}", ds.len(), out.display());
    Ok(())
}

/// Training config with CLI overrides applied.
pub fn pretrain_config(args: &PretrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.toggles.ssl &= !args.no_ssl;
    cfg.toggles.itc &= !args.no_itc;
    cfg.toggles.mac &= !args.no_mac;
    cfg.toggles.mac_soft &= !args.mac_hard_only;
    cfg.validate()?;
    Ok(cfg)
}

/// Labelled dataset and tokenizer for a pretrain run. Without a manifest
/// the built-in synthetic cards are used.
pub fn pretrain_inputs(manifest: Option<&Path>, vocab: Option<&Path>, cfg: &TrainConfig) -> Result<(Dataset, Tokenizer)> {
    let ds = match manifest {
        None => {
            if vocab.is_some() {
                return Err(Error::InvalidInput("--vocab requires --manifest".into()));
            }
            info!("no --manifest: training on the built-in synthetic cards");
            card_dataset(None, cfg.m)?
        }
        Some(path) => {
            let vocab = vocab.map(AttributeVocabulary::load).transpose()?;
            if vocab.is_none() && cfg.toggles.mac {
                return Err(Error::InvalidInput(
                    "attribute loss enabled: pass --vocab or --no-mac".into(),
                ));
            }
            let mut ds = load_manifest(path, vocab.clone())?;
            if let Some(v) = &vocab {
                let n = label_dataset(&mut ds, v)?;
                if n > 0 {
                    info!("mined attribute labels for {n} samples");
                }
            }
            ds
        }
    };
    for d in validate_dataset(&ds) {
        log::warn!("{d:?}");
    }
    let corpus = captions(&ds);
    let tok = Tokenizer::from_corpus(corpus.iter().map(String::as_str), cfg.tokenizer.max_length)?;
    Ok((ds, tok))
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = pretrain_config(args)?;
    let (ds, tok) = pretrain_inputs(args.manifest.as_deref(), args.vocab.as_deref(), &cfg)?;
    let mut state = match &args.resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.config.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different config",
                    p.display()
                )));
            }
            if s.tokenizer != tok {
                return Err(Error::Config("manifest captions do not match the checkpoint tokenizer".into()));
            }
            s
        }
        None => TrainState::new(cfg.clone(), tok, ds.vocabulary.clone())?,
    };
    let data = prepare_dataset(&ds, &cfg, &state.tokenizer, &FileImageLoader)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", args.out.display())));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let records = run_training(&mut state, &data, args.until_step, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&state, &args.out)?;
    match records.last() {
        Some(r) => say!(
            "trained {} steps to step {}; total={:.6}; checkpoint {}",
            records.len(),
            state.step,
            r.total,
            args.out.display()
        ),
        None => say!("no steps left; checkpoint {}", args.out.display()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line() {
        let e = Error::InvalidInput("two\nlines \"quoted\"".into());
        let l = error_line(&e);
        assert!(!l.contains('\n'));
        assert!(l.starts_with("error kind=invalid_input message=\""));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["valpat", "frobnicate"]), 2);
        assert_eq!(run(["valpat"]), 2);
        assert_eq!(run(["valpat", "eval-reid", "--bogus", "x"]), 2);
        assert_eq!(run(["valpat", "--help"]), 0);
    }

    #[test]
    fn toggles_map_onto_config() {
        let args = PretrainArgs::try_parse_from_for_test(&["--out", "x", "--no-itc", "--mac-hard-only", "--seed", "7"]);
        let cfg = pretrain_config(&args).unwrap();
        assert!(cfg.toggles.ssl && !cfg.toggles.itc && cfg.toggles.mac && !cfg.toggles.mac_soft);
        assert_eq!(cfg.seed, 7);
        let all_off = PretrainArgs::try_parse_from_for_test(&["--out", "x", "--no-ssl", "--no-itc", "--no-mac"]);
        assert!(pretrain_config(&all_off).is_err());
    }

    impl PretrainArgs {
        fn try_parse_from_for_test(rest: &[&str]) -> Self {
            let mut argv = vec!["valpat", "pretrain"];
            argv.extend_from_slice(rest);
            match Cli::try_parse_from(argv).unwrap().command {
                Command::Pretrain(a) => a,
                _ => unreachable!(),
            }
        }
    }
}
