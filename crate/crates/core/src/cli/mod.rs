//! The `feedsynth` command line. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error (including unreadable or invalid inputs).

mod config;

pub use config::RunConfig;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_vocab, corpus_stats, filter_by_range, normalize_sample, parse_legacy_csv, parse_records,
    records_to_string, split_dataset, Sample, SplitMode, Vocabulary,
};
use crate::eval::{
    evaluate_suite, mrr, rank_feedback, recall_at_k, worksheet_csv, EmbeddingProvider,
    EncoderEmbeddings, ExternalEmbeddings, FeedbackGenerator, GreedyGenerator, Similarity, DEFAULT_KS,
};
use crate::model::{Ablation, Model};
use crate::region::load_region_features;
use crate::training::{
    build_examples, load_checkpoint, train, validation_split, Example, RegionLookup, TrainError, TrainOutputs,
};
use config::require_file;

#[derive(Debug, Parser)]
#[command(name = "feedsynth", version, about = "Multimodal feedback synthesis for news articles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a legacy CSV export or canonical records into canonical records.
    PrepData(PrepDataArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Greedy feedback generation for every article.
    Generate(GenerateArgs),
    /// Generation and ranking metrics on a test split.
    Evaluate(EvaluateArgs),
    /// Like-rank of the comment most similar to each generated feedback.
    Rank(RankArgs),
    /// Human-evaluation worksheet with blank score columns.
    Worksheet(WorksheetArgs),
}

#[derive(Debug, Args)]
pub struct PrepDataArgs {
    /// `.csv` is read as the legacy export, anything else as records.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Separator inside the legacy Comment and Likes cells.
    #[arg(long, default_value = ":")]
    pub delimiter: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// low, mid, high or all.
    #[arg(long)]
    pub split: Option<SplitMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Region features; required by the visual ablations.
    #[arg(long)]
    pub regions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    ModelEncoder,
    ExternalFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityKind {
    Cosine,
    Dot,
}

impl From<SimilarityKind> for Similarity {
    fn from(k: SimilarityKind) -> Self {
        match k {
            SimilarityKind::Cosine => Similarity::Cosine,
            SimilarityKind::Dot => Similarity::Dot,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value = "model-encoder")]
    pub provider: ProviderKind,
    /// Vectors for `--provider external-file`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cosine")]
    pub similarity: SimilarityKind,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// CSV report path; the aligned table goes to stdout.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    /// Per-article generations and ranks as NDJSON.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// NDJSON of `{"id", "feedback"}` as written by `generate`.
    #[arg(long)]
    pub feedback_file: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Checkpoint for `--provider model-encoder`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// CSV of `id,rank,similarity`; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct WorksheetArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub feedback_file: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PrepData(a) => prep_data(&a),
        Command::Stats(a) => stats(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Generate(a) => generate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Rank(a) => rank(&a),
        Command::Worksheet(a) => worksheet(&a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    require_file("input", path).map_err(usage)?;
    parse_records(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(Model, Vocabulary), CliError> {
    require_file("checkpoint", path).map_err(usage)?;
    let ckpt = load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| usage(format!("{}: checkpoint carries no vocabulary", path.display())))?;
    Ok((ckpt.model, vocab))
}

fn load_regions(ablation: Ablation, path: Option<&Path>) -> Result<RegionLookup, CliError> {
    match path {
        Some(p) if ablation.uses_visual() => {
            require_file("regions", p).map_err(usage)?;
            load_region_features(p).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
        None if ablation.uses_visual() => Err(usage(format!("ablation {ablation} needs --regions"))),
        _ => Ok(RegionLookup::new()),
    }
}

fn prep_data(a: &PrepDataArgs) -> Result<(), CliError> {
    require_file("input", &a.input).map_err(usage)?;
    let is_csv = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (samples, rejected) = if is_csv {
        let parsed = parse_legacy_csv(&a.input, &a.delimiter).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
        (parsed.samples, parsed.rejected)
    } else {
        (read_samples(&a.input)?, Vec::new())
    };
    for r in &rejected {
        eprintln!("rejected line {}: {}", r.line, r.reason);
    }
    if samples.is_empty() {
        return Err(usage(format!("{}: no usable records", a.input.display())));
    }
    let normalized: Vec<Sample> = samples.iter().map(normalize_sample).collect();
    write_file(&a.out, &records_to_string(&normalized))?;
    eprintln!("prep-data: {} records written, {} rows rejected", normalized.len(), rejected.len());
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<(), CliError> {
    let samples = read_samples(&a.input)?;
    let subset: Vec<Sample> = match a.split {
        None => samples,
        Some(mode @ (SplitMode::Low | SplitMode::Mid | SplitMode::High | SplitMode::All)) => {
            filter_by_range(&samples, mode).into_iter().map(|i| samples[i].clone()).collect()
        }
        Some(other) => return Err(usage(format!("--split {other} is not a comment-count range"))),
    };
    print!("{}", corpus_stats(&subset).to_table());
    Ok(())
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config).map_err(usage)?;
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = Some(ab);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.apply_overrides();
    cfg.validate().map_err(usage)?;
    let seed = cfg.seed();

    let samples = read_samples(&cfg.corpus)?;
    let folds = split_dataset(&samples, cfg.split_mode, seed).map_err(usage)?;
    let fold = &folds[cfg.fold];
    let (train_idx, val_idx) = validation_split(&fold.train, cfg.train.val_fraction, seed);
    let train_samples = pick(&samples, &train_idx);
    let val_samples = pick(&samples, &val_idx);
    let test_samples = pick(&samples, &fold.test);

    let (model, vocab) = match &cfg.checkpoint {
        Some(p) => {
            let (m, v) = load_model(p)?;
            if m.config.ablation != cfg.model.ablation {
                return Err(usage(format!(
                    "checkpoint ablation {} differs from configured {}",
                    m.config.ablation, cfg.model.ablation
                )));
            }
            (m, v)
        }
        None => {
            let vocab = build_vocab(&train_samples, cfg.min_frequency).map_err(usage)?;
            let mut mc = cfg.model.clone();
            if mc.vocab_size == 0 {
                mc.vocab_size = vocab.len();
            } else if mc.vocab_size != vocab.len() {
                return Err(usage(format!(
                    "model.vocab_size {} differs from the built vocabulary size {}",
                    mc.vocab_size,
                    vocab.len()
                )));
            }
            (Model::init(mc, seed).map_err(usage)?, vocab)
        }
    };
    let regions = load_regions(model.config.ablation, cfg.regions.as_deref())?;
    let examples = |ss: &[Sample]| -> Vec<Example> {
        build_examples(ss, &vocab, model.config.max_text_len, model.config.max_gen_len)
    };
    let train_set = examples(&train_samples);
    let val_set = examples(&val_samples);

    let outputs = TrainOutputs { dir: cfg.out_dir.clone() };
    let mut resolved = cfg.clone();
    resolved.model = model.config.clone();
    let resolved_json = serde_json::to_string_pretty(&resolved).expect("run config serializes");
    write_file(&cfg.out_dir.join("run.json"), &(resolved_json + "\n"))?;
    write_file(&cfg.out_dir.join("test.jsonl"), &records_to_string(&test_samples))?;
    eprintln!(
        "train: {} train / {} val examples, {} test articles, vocabulary {}, ablation {}",
        train_set.len(),
        val_set.len(),
        test_samples.len(),
        vocab.len(),
        model.config.ablation
    );

    let start = Instant::now();
    let outcome = train(model, &train_set, &val_set, &regions, &cfg.train, Some(&vocab), Some(&outputs));
    match outcome {
        Ok(o) => {
            for e in &o.log.epochs {
                let val = e.val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default();
                eprintln!("epoch {}: train {:.4}{val} ({:.1}s)", e.epoch, e.train_loss, e.seconds);
            }
            eprintln!(
                "train: done in {:.1}s, best epoch {}, checkpoints in {}",
                start.elapsed().as_secs_f64(),
                o.best_epoch,
                cfg.out_dir.display()
            );
            Ok(())
        }
        Err(e @ TrainError::NoExamples) => Err(usage(e)),
        Err(e) => Err(CliError::Runtime(anyhow::Error::new(e).context("training failed"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRecord {
    pub id: String,
    pub feedback: String,
}

fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let (model, vocab) = load_model(&a.ckpt)?;
    let samples = read_samples(&a.input)?;
    let regions = load_regions(model.config.ablation, a.regions.as_deref())?;
    let generator = GreedyGenerator { model: &model, vocab: &vocab, regions: &regions };
    let mut out = String::new();
    for s in &samples {
        let feedback = generator
            .generate(s)
            .with_context(|| format!("generating for article {}", s.id))?;
        let rec = FeedbackRecord { id: s.id.clone(), feedback };
        out.push_str(&serde_json::to_string(&rec).expect("feedback serializes"));
        out.push('\n');
    }
    write_file(&a.out, &out)
}

fn make_provider<'a>(
    p: &ProviderArgs,
    model: Option<&'a (Model, Vocabulary)>,
) -> Result<Box<dyn EmbeddingProvider + 'a>, CliError> {
    match p.provider {
        ProviderKind::ModelEncoder => {
            let (m, v) = model.ok_or_else(|| usage("--provider model-encoder needs --ckpt"))?;
            Ok(Box::new(EncoderEmbeddings::new(m, v)))
        }
        ProviderKind::ExternalFile => {
            let path = p
                .embeddings
                .as_deref()
                .ok_or_else(|| usage("--provider external-file needs --embeddings"))?;
            require_file("embeddings", path).map_err(usage)?;
            Ok(Box::new(ExternalEmbeddings::load(path).map_err(usage)?))
        }
    }
}

fn check_ks(ks: &[usize]) -> Result<(), CliError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks must list positive integers"));
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    check_ks(&a.ks)?;
    let loaded = load_model(&a.ckpt)?;
    let samples = read_samples(&a.input)?;
    let (model, vocab) = &loaded;
    let regions = load_regions(model.config.ablation, a.regions.as_deref())?;
    let provider = make_provider(&a.provider, Some(&loaded))?;
    let generator = GreedyGenerator { model, vocab, regions: &regions };
    let (report, per_sample) = evaluate_suite(&generator, &samples, provider.as_ref(), a.provider.similarity.into(), &a.ks)
        .context("evaluation failed")?;
    write_file(&a.report, &report.to_csv())?;
    if let Some(p) = &a.per_sample {
        let lines: String = per_sample
            .iter()
            .map(|r| serde_json::to_string(r).expect("results serialize") + "\n")
            .collect();
        write_file(p, &lines)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn read_feedback(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    require_file("feedback", path).map_err(usage)?;
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| usage(format!("{} line {}: {m}", path.display(), i + 1));
        let rec: FeedbackRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if out.insert(rec.id.clone(), rec.feedback).is_some() {
            return Err(bad(format!("duplicate id `{}`", rec.id)));
        }
    }
    Ok(out)
}

fn rank(a: &RankArgs) -> Result<(), CliError> {
    check_ks(&a.ks)?;
    let feedback = read_feedback(&a.feedback_file)?;
    let samples = read_samples(&a.input)?;
    let loaded = a.ckpt.as_deref().map(load_model).transpose()?;
    let provider = make_provider(&a.provider, loaded.as_ref())?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    if let Some(unknown) = feedback.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(usage(format!("feedback for unknown article `{unknown}`")));
    }
    let mut csv = String::from("id,rank,similarity\n");
    let mut ranks = Vec::new();
    for s in samples.iter().filter(|s| !s.comments.is_empty()) {
        let Some(f) = feedback.get(&s.id) else { continue };
        let (r, sim) = rank_feedback(f, &s.comments, provider.as_ref(), a.provider.similarity.into())
            .with_context(|| format!("ranking article {}", s.id))?;
        csv.push_str(&format!("{},{r},{sim:.6}\n", s.id));
        ranks.push(r);
    }
    if ranks.is_empty() {
        return Err(usage("no article has both comments and feedback"));
    }
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    let m = mrr(&ranks).context("mrr")?;
    let mut summary = format!("rank: {} articles, provider {}, mrr {m:.4}", ranks.len(), provider.provenance());
    for &k in &a.ks {
        summary.push_str(&format!(", recall@{k} {:.2}%", recall_at_k(&ranks, k).context("recall")?));
    }
    eprintln!("{summary}");
    Ok(())
}

fn worksheet(a: &WorksheetArgs) -> Result<(), CliError> {
    let feedback = read_feedback(&a.feedback_file)?;
    let samples = read_samples(&a.input)?;
    let generated: Vec<String> = samples
        .iter()
        .map(|s| feedback.get(&s.id).cloned().unwrap_or_default())
        .collect();
    write_file(&a.out, &worksheet_csv(&samples, &generated).context("worksheet")?)
}
