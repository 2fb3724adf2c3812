//! Command-line front end.
//!
//! Every subcommand writes `effective_config.toml` into its output
//! directory before doing anything else. Exit status is 0 on success, 1 when
//! the library rejects the input or a check fails, and 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::align::corpus_wer;
use crate::config::Config;
use crate::data::{generate_synthetic, load_manifest, write_manifest, write_vocab, Dataset, ManifestLimits, VocabLayout};
use crate::error::{Error, Result};
use crate::eval::{correction_wer, evaluate};
use crate::train::{loss_gradient_check, Trainer};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const LAST_CHECKPOINT: &str = "last.m4sr";
pub const BEST_CHECKPOINT: &str = "best.m4sr";
pub const VOCAB_FILE: &str = "vocab.txt";
/// Manifest names written by `gen-data`, with their corpus stream salts.
pub const SPLITS: [(&str, u64); 3] = [("train", 0), ("valid", 1), ("test", 2)];

#[derive(Debug, Parser)]
#[command(name = "mmser", version, about = "Multimodal speech emotion recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, default_value = "mmser-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Override of an evaluation-time key (precision, max_correction_len, ...).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short, default_value = "mmser-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: manifests, feature files and a vocabulary.
    GenData(RunArgs),
    /// Train a model, writing checkpoints and per-epoch history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Corpus directory holding train.tsv and optionally valid.tsv.
        /// Without it the synthetic corpus is generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval(CheckpointArgs),
    /// Correct the ASR transcripts of a manifest.
    Correct {
        #[command(flatten)]
        args: CheckpointArgs,
        /// Regenerate every token instead of only detected errors.
        #[arg(long)]
        ungated: bool,
    },
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(0) => 0,
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(run) => {
            let cfg = resolve(&run)?;
            snapshot(&run.out, &cfg)?;
            gen_data(&cfg, &run.out)?;
            eprintln!("wrote corpus to {}", run.out.display());
            Ok(0)
        }
        Command::Train { run, data } => {
            let cfg = resolve(&run)?;
            snapshot(&run.out, &cfg)?;
            train(&cfg, data.as_deref(), &run.out)
        }
        Command::Eval(args) => {
            let (trainer, data) = open_checkpoint(&args)?;
            let mut report = evaluate(&trainer.model, &data)?;
            if trainer.model.aec.is_some() {
                report.corrected_wer = Some(correction_wer(&trainer.model, &data, trainer.cfg.max_correction_len, false)?.1);
            }
            let json = report.to_json();
            write_file(&args.out.join("metrics.json"), json.as_bytes())?;
            println!("{json}");
            Ok(0)
        }
        Command::Correct { args, ungated } => {
            let (trainer, data) = open_checkpoint(&args)?;
            correct(&trainer, &data, ungated, &args.out)
        }
        Command::Gradcheck {
            run,
            samples,
            probes,
            epsilon,
            tolerance,
        } => {
            let cfg = resolve(&run)?;
            snapshot(&run.out, &cfg)?;
            gradcheck(&cfg, samples, probes, epsilon, tolerance, &run.out)
        }
    }
}

/// Config file, then overrides, then `--seed`.
fn resolve(run: &RunArgs) -> Result<Config> {
    let base = match &run.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&run.overrides)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn snapshot(out: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(EFFECTIVE_CONFIG), cfg.to_toml_string().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn limits(cfg: &Config) -> ManifestLimits {
    ManifestLimits {
        emotions: cfg.emotions,
        vocab: cfg.d_vocab,
        feat_dim: cfg.feat_dim,
    }
}

/// Writes the synthetic train, valid and test manifests with their feature
/// files and the vocabulary sidecar into `out`.
pub fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    cfg.validate()?;
    for (name, salt) in SPLITS {
        let size = match name {
            "train" => cfg.train_size,
            "valid" => cfg.valid_size,
            _ => cfg.test_size,
        };
        let utts = generate_synthetic(&cfg.synth(salt), size)?;
        write_manifest(out, name, &utts)?;
    }
    let synth = cfg.synth(0);
    let layout = VocabLayout::new(synth.vocab, synth.text_groups())?;
    write_vocab(&out.join(VOCAB_FILE), &layout.token_strings())
}

fn train(cfg: &Config, data: Option<&Path>, out: &Path) -> Result<i32> {
    let (train, valid) = match data {
        Some(dir) => {
            let train = Dataset::new(load_manifest(&dir.join("train.tsv"), limits(cfg))?);
            let valid_path = dir.join("valid.tsv");
            let valid = if valid_path.exists() {
                Some(Dataset::new(load_manifest(&valid_path, limits(cfg))?))
            } else {
                None
            };
            (train, valid)
        }
        None => (
            Dataset::new(generate_synthetic(&cfg.synth(0), cfg.train_size)?),
            (cfg.valid_size > 0)
                .then(|| generate_synthetic(&cfg.synth(1), cfg.valid_size).map(Dataset::new))
                .transpose()?,
        ),
    };
    let history_path = out.join(HISTORY_FILE);
    let mut history = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut write_err = None;
    let mut trainer = Trainer::new(cfg.clone())?;
    let summary = trainer.fit(&train, valid.as_ref(), |record| {
        let line = serde_json::to_string(record).expect("history record serializes");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&history_path, e));
    }
    trainer.save(&out.join(LAST_CHECKPOINT))?;
    let mut best = trainer.clone();
    best.model.store = summary.best;
    best.save(&out.join(BEST_CHECKPOINT))?;
    eprintln!(
        "trained {} epochs; best epoch {}; checkpoints in {}",
        trainer.epoch,
        summary.best_epoch,
        out.display()
    );
    Ok(0)
}

/// Loads a checkpoint, applies evaluation-time overrides to its config and
/// reads the manifest under that config's limits.
fn open_checkpoint(args: &CheckpointArgs) -> Result<(Trainer, Dataset)> {
    let mut trainer = Trainer::load(&args.checkpoint)?;
    let cfg = trainer.cfg.with_overrides(&args.overrides)?;
    if cfg.model() != trainer.cfg.model() {
        return Err(Error::Config("overrides may not change the architecture of a checkpoint".into()));
    }
    snapshot(&args.out, &cfg)?;
    trainer.cfg = cfg;
    let data = Dataset::new(load_manifest(&args.manifest, limits(&trainer.cfg))?);
    if data.is_empty() {
        return Err(Error::validation("manifest", "no utterances"));
    }
    Ok((trainer, data))
}

#[derive(Serialize)]
struct CorrectionSummary {
    input_wer: f64,
    corrected_wer: f64,
    utterances: usize,
    ungated: bool,
}

fn correct(trainer: &Trainer, data: &Dataset, ungated: bool, out: &Path) -> Result<i32> {
    let ids = |t: &[u32]| t.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let mut table = String::new();
    let mut corrected = Vec::with_capacity(data.len());
    for u in &data.utterances {
        let (_, c) = trainer.model.correct(u, trainer.cfg.max_correction_len, ungated)?;
        table.push_str(&format!("{}\t{}\t{}\n", u.id, ids(&u.asr_tokens), ids(&c)));
        corrected.push(c);
    }
    let summary = CorrectionSummary {
        input_wer: corpus_wer(data.utterances.iter().map(|u| (u.asr_tokens.as_slice(), u.gt_tokens.as_slice())))?,
        corrected_wer: corpus_wer(
            corrected
                .iter()
                .zip(&data.utterances)
                .map(|(c, u)| (c.as_slice(), u.gt_tokens.as_slice())),
        )?,
        utterances: data.len(),
        ungated,
    };
    write_file(&out.join("corrected.tsv"), table.as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("correction.json"), json.as_bytes())?;
    println!("{json}");
    Ok(0)
}

#[derive(Serialize)]
struct GradLine {
    loss: &'static str,
    max_relative_error: f64,
    probes: usize,
    pass: bool,
}

fn gradcheck(cfg: &Config, samples: usize, probes: usize, epsilon: f64, tolerance: f64, out: &Path) -> Result<i32> {
    let reports = loss_gradient_check(cfg, samples, probes, epsilon)?;
    let lines: Vec<GradLine> = reports
        .iter()
        .map(|(loss, r)| GradLine {
            loss,
            max_relative_error: r.max_error,
            probes: r.probes,
            pass: r.max_error <= tolerance,
        })
        .collect();
    for l in &lines {
        println!(
            "{:<11} {:.3e} over {:>5} probes  {}",
            l.loss,
            l.max_relative_error,
            l.probes,
            if l.pass { "PASS" } else { "FAIL" }
        );
    }
    let json = serde_json::to_string_pretty(&lines).expect("report serializes");
    write_file(&out.join("gradcheck.json"), json.as_bytes())?;
    Ok(if lines.iter().all(|l| l.pass) { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("mmser").chain(args.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(argv(&["train", "--no-such-flag"])), 2);
        assert_eq!(run_cli(argv(&["frobnicate"])), 2);
        assert_eq!(run_cli(argv(&[])), 2);
        assert_eq!(run_cli(argv(&["--help"])), 0);
    }

    #[test]
    fn validation_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run_cli(argv(&["gen-data", "--set", "batch_size=1", "--out", out])), 1);
        assert_eq!(run_cli(argv(&["gen-data", "--set", "bogus=1", "--out", out])), 1);
        let missing = dir.path().join("missing.m4sr");
        let args = [
            "eval",
            "--checkpoint",
            missing.to_str().unwrap(),
            "--manifest",
            "x.tsv",
            "--out",
            out,
        ];
        assert_eq!(run_cli(argv(&args)), 1);
    }
}
