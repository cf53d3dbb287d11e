//! Batch front end: `validate`, `transform`, `train`, `evaluate`, `report`.
//!
//! Every command that writes files writes them into an output directory
//! together with a `manifest.json` recording the command, its full
//! configuration and sha256 digests of its inputs and outputs. Manifests
//! carry no timestamps, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexicon::{GenderedLexicon, NameGazetteer, BUNDLED_GAZETTEER, BUNDLED_LEXICON};
use crate::metrics::{self, BiasReport, MismatchCount, TaskInput};
use crate::model::{Model, DEFAULT_EMBEDDING_DIM};
use crate::training::{self, MitigationConfig, Strategy};
use crate::transform::{self, GazetteerDetector, TokenMasker, DEFAULT_VARIANT_CAP};

/// Overrides where the default lexicon and gazetteer are read from.
pub const DATA_DIR_ENV: &str = "COUNTERBIAS_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "counterbias",
    version,
    about = "Counterfactual gender-bias audit and mitigation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Gendered lexicon TSV (defaults to the bundled one).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Name gazetteer TSV (defaults to the bundled one).
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a lexicon and gazetteer for structural problems.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Expand a labeled JSONL corpus into original/counterfactual pairs.
    Transform {
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_VARIANT_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a paired corpus with one mitigation strategy.
    Train {
        pairs: PathBuf,
        /// zero_shot, fod, foa, tm or jlo.
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.2)]
        dropout: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM)]
        dim: usize,
        /// Number of classes; inferred from the largest label when omitted.
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure paired-prediction bias and accuracy of a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        pairs: PathBuf,
        /// Task name used in reports (defaults to the pairs file stem).
        #[arg(long)]
        task: Option<String>,
        /// Zero-shot mismatch count for the normalized bias score.
        #[arg(long, conflicts_with = "baseline")]
        baseline_mismatches: Option<usize>,
        /// Output directory of a zero-shot `evaluate` run to use as baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge `evaluate` outputs into strategy x task comparison tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write tables here; otherwise print Markdown to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, Value>,
    /// Keyed by role (`input`, `lexicon`, ...).
    pub inputs: BTreeMap<String, FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub summary: BTreeMap<String, Value>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: None,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn input(&mut self, role: &str, path: &str, bytes: &[u8]) {
        self.inputs.insert(
            role.to_owned(),
            FileDigest {
                path: path.to_owned(),
                sha256: sha256_hex(bytes),
            },
        );
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Output directory plus the manifest entries for what was written into it.
struct OutDir {
    dir: PathBuf,
    written: Vec<FileDigest>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_owned(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(FileDigest {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.written;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn default_data_file(name: &str) -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(|d| PathBuf::from(d).join(name))
}

fn load_lexicon(arg: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<GenderedLexicon> {
    match arg.clone().or_else(|| default_data_file("lexicon.tsv")) {
        Some(path) => {
            let bytes = read_bytes(&path)?;
            manifest.input("lexicon", &path.display().to_string(), &bytes);
            String::from_utf8_lossy(&bytes).parse()
        }
        None => {
            manifest.input("lexicon", "<bundled>", BUNDLED_LEXICON.as_bytes());
            Ok(GenderedLexicon::bundled())
        }
    }
}

fn load_gazetteer(arg: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<NameGazetteer> {
    match arg.clone().or_else(|| default_data_file("gazetteer.tsv")) {
        Some(path) => {
            let bytes = read_bytes(&path)?;
            manifest.input("gazetteer", &path.display().to_string(), &bytes);
            String::from_utf8_lossy(&bytes).parse()
        }
        None => {
            manifest.input("gazetteer", "<bundled>", BUNDLED_GAZETTEER.as_bytes());
            Ok(NameGazetteer::bundled())
        }
    }
}

/// Maps a command result onto the process exit code: 0 success, 1 domain
/// or validation failure, 2 filesystem failure.
pub fn exit_code(result: &Result<i32>) -> i32 {
    match result {
        Ok(code) => *code,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}

/// Parses `args` and runs the command. Usage errors exit 1 so that 2 stays
/// reserved for I/O failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { data } => cmd_validate(&data),
        Command::Transform {
            input,
            data,
            cap,
            out,
        } => cmd_transform(&input, &data, cap, &out),
        Command::Train {
            pairs,
            strategy,
            lambda,
            epochs,
            batch_size,
            lr,
            dropout,
            seed,
            dim,
            classes,
            data,
            out,
        } => {
            let config = MitigationConfig {
                strategy: strategy.parse()?,
                lambda,
                batch_size,
                learning_rate: lr,
                epochs,
                dropout_rate: dropout,
                seed,
            };
            cmd_train(&pairs, &config, dim, classes, &data, &out)
        }
        Command::Evaluate {
            checkpoint,
            pairs,
            task,
            baseline_mismatches,
            baseline,
            data,
            out,
        } => {
            let baseline = match (baseline_mismatches, baseline) {
                (Some(n), _) => Some(Baseline::Count(n)),
                (None, Some(dir)) => Some(Baseline::Run(dir)),
                (None, None) => None,
            };
            cmd_evaluate(&checkpoint, &pairs, task, baseline, &data, &out)
        }
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

pub fn cmd_validate(data: &DataArgs) -> Result<i32> {
    let mut manifest = RunManifest::new("validate");
    let lexicon = load_lexicon(&data.lexicon, &mut manifest)?;
    let gazetteer = load_gazetteer(&data.gazetteer, &mut manifest)?;
    let report = lexicon.validate();
    let shared: Vec<&String> = gazetteer
        .male_names()
        .iter()
        .chain(gazetteer.female_names())
        .filter(|n| lexicon.is_gendered_token(n))
        .collect();

    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "terms\t{}", lexicon.term_count());
    let _ = writeln!(
        out,
        "names\t{} male, {} female",
        gazetteer.male_names().len(),
        gazetteer.female_names().len()
    );
    let _ = write!(out, "{report}");
    let _ = writeln!(out, "names_in_lexicon\t{}", shared.len());
    for n in shared {
        let _ = writeln!(
            out,
            "  note: name `{n}` is also a gendered term; not used as a replacement"
        );
    }
    let ok = !report.has_errors();
    let _ = writeln!(out, "{}", if ok { "ok" } else { "invalid" });
    Ok(if ok { 0 } else { 1 })
}

pub fn cmd_transform(input: &Path, data: &DataArgs, cap: usize, out: &Path) -> Result<i32> {
    let mut manifest = RunManifest::new("transform");
    let bytes = read_bytes(input)?;
    manifest.input("input", &input.display().to_string(), &bytes);
    let lexicon = load_lexicon(&data.lexicon, &mut manifest)?;
    let gazetteer = load_gazetteer(&data.gazetteer, &mut manifest)?;
    manifest.config.insert("cap".into(), json!(cap));

    let corpus = transform::read_corpus(&bytes[..])?;
    let detector = GazetteerDetector::new(&gazetteer);
    let pairs = transform::build_paired_dataset(&corpus, &lexicon, &gazetteer, &detector, cap)?;
    let variants: usize = pairs.iter().map(|p| p.variants.len()).sum();

    let mut buf = Vec::new();
    transform::write_paired(&mut buf, &pairs)?;
    let mut dir = OutDir::create(out)?;
    dir.write("pairs.jsonl", &buf)?;

    eprintln!(
        "read {} samples; kept {} originals; emitted {} variants; skipped {} without gendered terms",
        corpus.len(),
        pairs.len(),
        variants,
        corpus.len() - pairs.len()
    );
    if pairs.is_empty() {
        eprintln!("warning: no sample contains a gendered term; output is empty");
    }
    manifest
        .summary
        .insert("samples_read".into(), json!(corpus.len()));
    manifest
        .summary
        .insert("originals".into(), json!(pairs.len()));
    manifest.summary.insert("variants".into(), json!(variants));
    dir.finish(manifest)?;
    Ok(0)
}

fn read_pairs(path: &Path, manifest: &mut RunManifest) -> Result<Vec<transform::PairedSample>> {
    let bytes = read_bytes(path)?;
    manifest.input("pairs", &path.display().to_string(), &bytes);
    transform::read_paired(&bytes[..])
}

pub fn cmd_train(
    pairs_path: &Path,
    config: &MitigationConfig,
    dim: usize,
    classes: Option<usize>,
    data: &DataArgs,
    out: &Path,
) -> Result<i32> {
    let mut manifest = RunManifest::new("train");
    config.validate()?;
    let pairs = read_pairs(pairs_path, &mut manifest)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no pairs to train on",
            pairs_path.display()
        )));
    }
    let num_classes =
        classes.unwrap_or_else(|| pairs.iter().map(|p| p.label + 1).max().unwrap_or(2).max(2));

    manifest.seed = Some(config.seed);
    for (k, v) in [
        ("strategy", json!(config.strategy.as_str())),
        ("lambda", json!(config.lambda)),
        ("epochs", json!(config.epochs)),
        ("batch_size", json!(config.batch_size)),
        ("learning_rate", json!(config.learning_rate)),
        ("dropout_rate", json!(config.dropout_rate)),
        ("dim", json!(dim)),
        ("num_classes", json!(num_classes)),
    ] {
        manifest.config.insert(k.into(), v);
    }

    let model = training::init_model(&pairs, dim, num_classes, config.dropout_rate, config.seed)?;
    let outcome = if config.strategy.uses_masking() {
        let lexicon = load_lexicon(&data.lexicon, &mut manifest)?;
        let gazetteer = load_gazetteer(&data.gazetteer, &mut manifest)?;
        let detector = GazetteerDetector::new(&gazetteer);
        let masker = TokenMasker::new(&lexicon, &detector);
        training::train(&pairs, config, model, Some(&masker))?
    } else {
        training::train(&pairs, config, model, None)?
    };

    let mut log = Vec::new();
    training::write_loss_log(&mut log, &outcome.log)?;
    let mut dir = OutDir::create(out)?;
    dir.write("checkpoint.json", outcome.model.to_json()?.as_bytes())?;
    dir.write("loss.csv", &log)?;
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "{}: {} epochs over {} examples; final ce {:.4} gb {:.4} joint {:.4}",
            config.strategy.label(),
            outcome.log.len(),
            outcome.samples_per_epoch,
            last.ce,
            last.gb,
            last.joint
        );
    }
    manifest
        .summary
        .insert("samples_per_epoch".into(), json!(outcome.samples_per_epoch));
    manifest
        .summary
        .insert("vocab_size".into(), json!(outcome.model.vocab.len()));
    dir.finish(manifest)?;
    Ok(0)
}

#[derive(Debug, Clone)]
pub enum Baseline {
    Count(usize),
    /// Directory of a previous `evaluate` run.
    Run(PathBuf),
}

fn read_report(path: &Path) -> Result<(BiasReport, Vec<u8>)> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_owned()
    };
    let bytes = read_bytes(&file)?;
    Ok((serde_json::from_slice(&bytes)?, bytes))
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    pairs_path: &Path,
    task: Option<String>,
    baseline: Option<Baseline>,
    data: &DataArgs,
    out: &Path,
) -> Result<i32> {
    let mut manifest = RunManifest::new("evaluate");
    let ckpt = read_bytes(checkpoint)?;
    manifest.input("checkpoint", &checkpoint.display().to_string(), &ckpt);
    let model = Model::from_json(&String::from_utf8_lossy(&ckpt))?;
    let pairs = read_pairs(pairs_path, &mut manifest)?;
    let task = task.unwrap_or_else(|| {
        pairs_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into())
    });
    let strategy = model.strategy.clone().unwrap_or_else(|| "untrained".into());
    let masked = strategy
        .parse::<Strategy>()
        .map(Strategy::uses_masking)
        .unwrap_or(false);
    manifest.config.insert("task".into(), json!(task));
    manifest.config.insert("strategy".into(), json!(strategy));
    manifest.config.insert("masked".into(), json!(masked));
    manifest.seed = Some(model.seed);

    let input = if masked {
        let lexicon = load_lexicon(&data.lexicon, &mut manifest)?;
        let gazetteer = load_gazetteer(&data.gazetteer, &mut manifest)?;
        let detector = GazetteerDetector::new(&gazetteer);
        let masker = TokenMasker::new(&lexicon, &detector);
        // Masked originals and variants coincide, so a single accuracy split.
        TaskInput {
            task: task.clone(),
            count: metrics::count_mismatches(&model, &pairs, Some(&masker))?,
            baseline: None,
            accuracy_original: Some(metrics::accuracy_original(&model, &pairs, Some(&masker))?),
            accuracy_swapped: None,
        }
    } else {
        TaskInput {
            task: task.clone(),
            count: metrics::count_mismatches(&model, &pairs, None)?,
            baseline: None,
            accuracy_original: Some(metrics::accuracy_original(&model, &pairs, None)?),
            accuracy_swapped: Some(metrics::accuracy_swapped(&model, &pairs, None)?),
        }
    };

    let baseline_mismatches = match baseline {
        None => None,
        Some(Baseline::Count(n)) => Some(n),
        Some(Baseline::Run(dir)) => {
            let (report, bytes) = read_report(&dir)?;
            manifest.input("baseline", &dir.display().to_string(), &bytes);
            let t = report
                .tasks
                .iter()
                .find(|t| t.task == task)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "baseline report {} has no task `{task}`",
                        dir.display()
                    ))
                })?;
            Some(t.mismatches)
        }
    };
    let mut input = input;
    if let Some(n) = baseline_mismatches {
        manifest
            .config
            .insert("baseline_mismatches".into(), json!(n));
        input.baseline = Some(MismatchCount {
            mismatches: n,
            total_pairs: input.count.total_pairs,
        });
    }

    let report = metrics::aggregate_inputs(&strategy, &[input])?;
    let mut json_text = serde_json::to_string_pretty(&report)?;
    json_text.push('\n');
    let mut dir = OutDir::create(out)?;
    dir.write("report.json", json_text.as_bytes())?;
    dir.write("report.csv", report.to_csv()?.as_bytes())?;
    dir.write("report.md", report.to_markdown().as_bytes())?;
    let t = &report.tasks[0];
    eprintln!(
        "{task}: {}/{} mismatched pairs ({}%)",
        t.mismatches,
        t.total_pairs,
        metrics::fmt2(t.bias_percentage)
    );
    dir.finish(manifest)?;
    Ok(0)
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<i32> {
    let mut manifest = RunManifest::new("report");
    let mut reports = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let (report, bytes) = read_report(run)?;
        manifest.input(&format!("run{i:03}"), &run.display().to_string(), &bytes);
        reports.push(report);
    }
    let table = metrics::compare(&reports)?;
    let md = table.to_markdown();
    match out {
        Some(path) => {
            let mut dir = OutDir::create(path)?;
            dir.write("comparison.md", md.as_bytes())?;
            dir.write("bias_scores.csv", table.bias_csv()?.as_bytes())?;
            dir.write("accuracy.csv", table.accuracy_csv()?.as_bytes())?;
            dir.finish(manifest)?;
        }
        None => print!("{md}"),
    }
    Ok(0)
}
