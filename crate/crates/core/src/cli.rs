//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, write_atomic};
use crate::data::{load_manifest, rescore_manifest, save_manifest, FeatureStorage, Manifest};
use crate::decoding::MbrConfig;
use crate::error::{Error, Result};
use crate::fusion::{ClipExample, DecoderMode, FusionConfig, FusionModel, Modalities, ProjectorConfig, Split};
use crate::labels::{parse_labels, serialize_labels, LabelSet};
use crate::lm::LmConfig;
use crate::lora::LoraConfig;
use crate::pipeline::{encode_examples, predict_examples, score};
use crate::synth::{generate_synthetic_corpus, SynthSpec};
use crate::training::{train, TrainConfig, TrainHooks};

#[derive(Debug, Parser)]
#[command(name = "dysfluency", version, about = "Multimodal dysfluency detection on ASR hypotheses and acoustic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus manifest.
    GenData(GenDataArgs),
    /// Train a detector on the train split, selecting on dev loss.
    Train(TrainArgs),
    /// Write label predictions for one split.
    Predict(PredictArgs),
    /// Fill the MBR hypotheses of a manifest from its N-best lists.
    RescoreMbr(RescoreArgs),
    /// Score predictions against the manifest labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// JSON file with configuration values, applied before `--set`.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `train.lr0=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Store features inline instead of in a sidecar directory.
    #[arg(long)]
    pub inline_features: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, the log and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Hypothesis source: 1-best, N-best, Phon or MBR.
    #[arg(long)]
    pub mode: Option<DecoderMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Dev => split == Split::Dev,
            SplitArg::Test => split == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mode: DecoderMode,
    /// Predictions file (`id<TAB>labels<TAB>raw`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct RescoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub inline_features: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Kv,
    Json,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything `train` can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub train: TrainConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub projector: ProjectorConfig,
    pub modalities: Modalities,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key.path=value` overrides to a serializable config. Keys must
/// name existing fields; values are JSON, or plain strings.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, sets: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {set:?} is not KEY=VALUE")))?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = parse_value(raw);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid override: {e}")))
}

fn read_config<T: Serialize + DeserializeOwned + Default>(ov: &Overrides) -> Result<T> {
    let base = match &ov.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => T::default(),
    };
    apply_overrides(&base, &ov.set)
}

fn gen_data(args: &GenDataArgs) -> Result<String> {
    let mut spec: SynthSpec = read_config(&args.overrides)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    for w in &corpus.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = Manifest {
        schema: corpus.schema,
        examples: corpus.examples,
    };
    let storage = if args.inline_features { FeatureStorage::Inline } else { FeatureStorage::Sidecar };
    save_manifest(&manifest, &args.out, storage)?;
    Ok(format!("wrote {} clips to {}\n", manifest.examples.len(), args.out.display()))
}

fn dir_ready(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn run_train(args: &TrainArgs) -> Result<String> {
    let mut job: TrainJob = read_config(&args.overrides)?;
    if let Some(seed) = args.seed {
        job.train.seed = seed;
        job.lm.seed = seed;
    }
    if let Some(mode) = args.mode {
        job.train.decoder_mode = mode;
    }
    job.train.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    job.projector.input_dim = manifest.examples[0].features.frames.ncols();
    let config = FusionConfig {
        lm: job.lm.clone(),
        lora: job.lora,
        projector: job.projector,
        schema: manifest.schema,
        modalities: job.modalities,
    };
    let mut model = FusionModel::<f32>::new(config, manifest.vocab()?)?;
    let mode = job.train.decoder_mode;
    let train_set = encode_examples(&model, &manifest.split(Split::Train), mode)?;
    let dev_set = encode_examples(&model, &manifest.split(Split::Dev), mode)?;

    dir_ready(&args.out)?;
    let resolved = serde_json::to_string_pretty(&job).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&args.out.join("config.json"), format!("{resolved}\n").as_bytes())?;
    let hooks = TrainHooks {
        dev_scorer: None,
        out_dir: Some(args.out.clone()),
    };
    let outcome = train(&mut model, &train_set, &dev_set, &job.train, hooks)?;
    for r in &outcome.log {
        eprintln!(
            "epoch {:>3}  train {:.4}  dev {:.4}  lr {:.3e}{}",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            r.lr,
            if r.best { "  *" } else { "" }
        );
    }
    Ok(format!(
        "best epoch {} (dev loss {:.4}); checkpoint {}\n",
        outcome.best_epoch,
        outcome.best_dev_loss,
        args.out.join("best.ckpt").display()
    ))
}

fn run_predict(args: &PredictArgs) -> Result<String> {
    let model = checkpoint::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    if manifest.schema != model.schema() {
        return Err(Error::Data(format!(
            "manifest schema {} does not match the checkpoint schema {}",
            manifest.schema,
            model.schema()
        )));
    }
    let clips: Vec<&ClipExample> = manifest.examples.iter().filter(|e| args.split.keeps(e.split)).collect();
    if clips.is_empty() {
        return Err(Error::Data("no clips in the requested split".into()));
    }
    let preds = predict_examples(&model, &clips, args.mode)?;
    let mut out = String::from("id\tlabels\traw\n");
    for (clip, p) in clips.iter().zip(&preds) {
        let raw = p.raw.replace(['\t', '\n', '\r'], " ");
        let _ = writeln!(out, "{}\t{}\t{}", clip.id, serialize_labels(p.labels, model.schema())?, raw);
    }
    write_atomic(&args.out, out.as_bytes())?;
    Ok(format!("wrote {} predictions to {}\n", preds.len(), args.out.display()))
}

fn run_rescore(args: &RescoreArgs) -> Result<String> {
    let mbr: MbrConfig = read_config(&args.overrides)?;
    mbr.validate()?;
    let mut manifest = load_manifest(&args.manifest)?;
    let n = rescore_manifest(&mut manifest, mbr.utility)?;
    let storage = if args.inline_features { FeatureStorage::Inline } else { FeatureStorage::Sidecar };
    save_manifest(&manifest, &args.out, storage)?;
    Ok(format!("rescored {n} clips into {}\n", args.out.display()))
}

/// Reads `id<TAB>labels[<TAB>raw]` lines; a leading `id` header is skipped.
pub fn read_predictions(path: &Path, schema: crate::labels::Schema) -> Result<Vec<(String, LabelSet)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || (n == 0 && line.starts_with("id\t")) {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(id), Some(labels)) = (cols.next(), cols.next()) else {
            return Err(Error::Data(format!("{}:{}: expected id and labels columns", path.display(), n + 1)));
        };
        out.push((id.to_string(), parse_labels(labels, schema)));
    }
    Ok(out)
}

fn run_evaluate(args: &EvaluateArgs) -> Result<String> {
    let manifest = load_manifest(&args.manifest)?;
    let preds = read_predictions(&args.predictions, manifest.schema)?;
    if preds.is_empty() {
        return Err(Error::Data("prediction file is empty".into()));
    }
    let gold: std::collections::HashMap<&str, LabelSet> = manifest.examples.iter().map(|e| (e.id.as_str(), e.labels)).collect();
    let mut seen = std::collections::HashSet::new();
    let mut predicted = Vec::with_capacity(preds.len());
    let mut reference = Vec::with_capacity(preds.len());
    for (id, labels) in &preds {
        let g = gold
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown clip {id}")))?;
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("clip {id} is predicted twice")));
        }
        predicted.push(*labels);
        reference.push(*g);
    }
    let report = score(manifest.schema, &predicted, &reference)?;
    let text = match args.format {
        ReportFormat::Table => report.render_table(),
        ReportFormat::Kv => report.render_kv(),
        ReportFormat::Json => serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))? + "\n",
    };
    if let Some(path) = &args.out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(text)
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::RescoreMbr(a) => run_rescore(a),
        Command::Evaluate(a) => run_evaluate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
