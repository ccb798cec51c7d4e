use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ecgalign::checkpoint::Checkpoint;
use ecgalign::ddp::{self, GroupedClassifier, Taxonomy};
use ecgalign::delineation::{augment_report, extract_features};
use ecgalign::instruct::{self, InstructRecord, Normality};
use ecgalign::metrics::{self, bleu, ce_metrics, extract_labels, meteor, rouge_l};
use ecgalign::model::{DualEncoder, EmbeddingVector, ModelConfig};
use ecgalign::reportgen::{self, BackendConfig, BackendKind};
use ecgalign::retrieval::{self, EmbeddingIndex, ProbeConfig};
use ecgalign::signal_io::{
    self, DatasetManifest, EcgRecord, ManifestEntry, PatientMeta, RecordFormat, Sex, Split,
};
use ecgalign::text::{words, Vocab};
use ecgalign::train::{self, AugmentationSpec, TrainConfig};

const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "ecgalign", version, about = "ECG and report alignment toolkit")]
pub struct Cli {
    /// JSON file supplying values for any flag (falls back to $ECGALIGN_CONFIG).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Log more to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replace non-finite samples, resample to 500 Hz and fix the length to 10 s.
    Preprocess(PreprocessArgs),
    /// Measure intervals and amplitudes on lead II.
    Delineate(RecordArg),
    /// Append measured waveform data to reports.
    Wde(WdeArgs),
    /// Train the dual encoder on a manifest split.
    Train(TrainArgs),
    /// Embed one ECG record or one report.
    Encode(EncodeArgs),
    /// Build a retrieval index from a manifest split.
    Index(IndexArgs),
    /// Query an index with an ECG record or a report.
    Retrieve(RetrieveArgs),
    /// Recall at K in both directions on a manifest split.
    EvalRetrieval(EvalRetrievalArgs),
    /// Rank taxonomy labels by prompt similarity.
    Zeroshot(ZeroshotArgs),
    /// Fit and score per-label logistic probes on frozen embeddings.
    Probe(ProbeArgs),
    /// Fit the diagnosis classifiers behind prompt selection.
    DdpTrain(DdpTrainArgs),
    /// Render the diagnosis prompt for one record.
    DdpPrompt(DdpPromptArgs),
    /// Score generated reports against references.
    EvalReport(EvalReportArgs),
    /// Build an instruction-tuning corpus.
    InstructBuild(InstructBuildArgs),
    /// Assemble a structured clinical report and render LaTeX.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct RecordArg {
    /// ECG record (.csv or .bin).
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSONL manifest of records and reports.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Directory record paths are relative to; defaults to the manifest's.
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(DatasetManifest, PathBuf)> {
        let manifest = signal_io::load_manifest(&self.manifest)?;
        let base = self.base_dir.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        });
        Ok((manifest, base))
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<RecordFormat>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "manifest"])))]
pub struct WdeArgs {
    #[arg(long = "in", value_name = "PATH", requires = "report")]
    pub input: Option<PathBuf>,
    /// Report to augment (with --in).
    #[arg(long)]
    pub report: Option<String>,
    /// Augment every entry of a manifest (with --out).
    #[arg(long, requires = "out")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Tiny,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Append measured waveform data to each report.
    #[arg(long)]
    pub wde: bool,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_con: Option<f64>,
    #[arg(long)]
    pub lambda_cap: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Disable wander, cut-mix and masking.
    #[arg(long)]
    pub no_augment: bool,
    /// Drop words seen fewer times from the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("query").required(true).args(["input", "text"])))]
pub struct QueryArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Ecg,
    Text,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub modality: Modality,
    #[arg(long)]
    pub wde: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub wde: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeOpts {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
}

impl ProbeOpts {
    fn config(&self) -> ProbeConfig {
        let d = ProbeConfig::default();
        ProbeConfig {
            steps: self.steps.unwrap_or(d.steps),
            lr: self.probe_lr.unwrap_or(d.lr),
            l2: self.l2.unwrap_or(d.l2),
        }
    }
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Label taxonomy JSON; the bundled one when omitted.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub train_split: SplitArg,
    #[arg(long, value_enum, default_value = "test")]
    pub eval_split: SplitArg,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub opts: ProbeOpts,
}

#[derive(Debug, Args)]
pub struct DdpTrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: ProbeOpts,
}

#[derive(Debug, Args)]
pub struct Thresholds {
    #[arg(long, default_value_t = ddp::DEFAULT_THRESHOLD)]
    pub tau_disease: f64,
    #[arg(long, default_value_t = ddp::DEFAULT_THRESHOLD)]
    pub tau_form: f64,
}

#[derive(Debug, Args)]
pub struct DdpPromptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Args)]
pub struct EvalReportArgs {
    /// Generated reports, one per line.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference reports, one per line.
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Pretrain,
    Diagnosis,
    Conversation,
}

#[derive(Debug, Args)]
pub struct InstructBuildArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Question bank, one question per line.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// With --classifier, adds diagnosis prompts to diagnosis records.
    #[arg(long, requires = "classifier")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub classifier: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("diagnosis").required(true).args(["labels", "classifier"])))]
pub struct ReportArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Patient metadata JSON ({"age", "sex", "history"}); the record's own
    /// header when omitted.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub age: Option<u32>,
    #[arg(long)]
    pub sex: Option<Sex>,
    #[arg(long)]
    pub history: Option<String>,
    /// Diagnosis label codes, used instead of a classifier.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, requires = "model")]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: Thresholds,
    #[arg(long, value_enum, default_value = "template")]
    pub backend_kind: BackendArg,
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub backend_timeout_ms: u64,
    /// Write the LaTeX source here instead of embedding it in the output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Template,
    Http,
}

pub fn execute(cli: &Cli) -> Result<Value> {
    let seed = cli.seed;
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Delineate(a) => {
            let rec = load_record(&a.input)?;
            Ok(serde_json::to_value(extract_features(&rec)?)?)
        }
        Command::Wde(a) => wde(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Encode(a) => encode(a),
        Command::Index(a) => index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::Probe(a) => probe(a),
        Command::DdpTrain(a) => ddp_train(a),
        Command::DdpPrompt(a) => ddp_prompt(a),
        Command::EvalReport(a) => eval_report(a),
        Command::InstructBuild(a) => instruct_build(a, seed),
        Command::Report(a) => report(a),
    }
}

fn load_record(path: &Path) -> Result<EcgRecord> {
    let rec = signal_io::load_record_auto(path)?;
    Ok(signal_io::preprocess(&rec)?)
}

fn load_model(path: &Path) -> Result<(DualEncoder, Vocab)> {
    let ckpt = Checkpoint::load(path)?;
    train::model_from_checkpoint(&ckpt).with_context(|| format!("loading model {}", path.display()))
}

fn load_classifier(path: &Path) -> Result<GroupedClassifier> {
    Ok(GroupedClassifier::from_checkpoint(&Checkpoint::load(
        path,
    )?)?)
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy> {
    Ok(match path {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::builtin(),
    })
}

fn encode_query(
    model: &DualEncoder,
    vocab: &Vocab,
    q: &QueryArgs,
) -> Result<(Modality, EmbeddingVector)> {
    match (&q.input, &q.text) {
        (Some(p), _) => Ok((Modality::Ecg, model.encode_ecg(&load_record(p)?)?)),
        (None, Some(t)) => {
            let seq = train::encode_report(t, vocab, model.config().max_text_len);
            Ok((Modality::Text, model.encode_text(&seq)?))
        }
        (None, None) => bail!("one of --in or --text is required"),
    }
}

struct Encoded {
    entries: Vec<ManifestEntry>,
    ecg: Vec<EmbeddingVector>,
    text: Vec<EmbeddingVector>,
}

fn encode_split(
    model: &DualEncoder,
    vocab: &Vocab,
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
    wde: bool,
    text: bool,
) -> Result<Encoded> {
    let pairs = train::load_pairs(manifest, base, split, wde)?;
    if pairs.is_empty() {
        bail!("split {split:?} of the manifest is empty");
    }
    let mut ecg = Vec::with_capacity(pairs.len());
    let mut txt = Vec::new();
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let recs: Vec<&EcgRecord> = chunk.iter().map(|p| &p.record).collect();
        ecg.extend(model.encode_ecg_batch(&recs)?);
        if text {
            let seqs: Vec<_> = chunk
                .iter()
                .map(|p| train::encode_report(&p.report, vocab, model.config().max_text_len))
                .collect();
            txt.extend(model.encode_text_batch(&seqs.iter().collect::<Vec<_>>())?);
        }
    }
    Ok(Encoded {
        entries: manifest.split(split).cloned().collect(),
        ecg,
        text: txt,
    })
}

fn preprocess(a: &PreprocessArgs) -> Result<Value> {
    let raw = signal_io::load_record_auto(&a.input)?;
    let rec = signal_io::preprocess(&raw)?;
    let format = match a.format {
        Some(f) => f,
        None => RecordFormat::from_path(&a.out)
            .with_context(|| format!("cannot infer a record format from {}", a.out.display()))?,
    };
    signal_io::save_record(&rec, &a.out, format)?;
    Ok(json!({
        "id": rec.id,
        "fs": rec.fs,
        "n_samples": rec.n_samples(),
        "input_fs": raw.fs,
        "input_samples": raw.n_samples(),
        "had_non_finite": raw.is_dirty(),
        "out": a.out,
    }))
}

fn wde(a: &WdeArgs) -> Result<Value> {
    if let (Some(input), Some(report)) = (&a.input, &a.report) {
        let rec = load_record(input)?;
        let f = extract_features(&rec)?;
        return Ok(json!({ "report": augment_report(report, &f)?, "features": f }));
    }
    let (Some(path), Some(out)) = (&a.manifest, &a.out) else {
        bail!("--manifest requires --out");
    };
    let data = DataArgs {
        manifest: path.clone(),
        split: SplitArg::Train,
        base_dir: a.base_dir.clone(),
    };
    let (mut manifest, base) = data.load()?;
    let mut augmented = 0;
    for e in &mut manifest.entries {
        let rec = load_record(&base.join(&e.record_path))?;
        match extract_features(&rec) {
            Ok(f) => {
                e.report = augment_report(&e.report, &f)?;
                augmented += 1;
            }
            Err(err) => log::warn!("{}: left unchanged ({err})", e.record_path),
        }
    }
    std::fs::write(out, manifest.to_jsonl())
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(json!({ "entries": manifest.entries.len(), "augmented": augmented, "out": out }))
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<Value> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        epochs: a.epochs.unwrap_or(d.epochs),
        lambda_con: a.lambda_con.unwrap_or(d.lambda_con),
        lambda_cap: a.lambda_cap.unwrap_or(d.lambda_cap),
        warmup_frac: a.warmup_frac.unwrap_or(d.warmup_frac),
        max_steps: a.max_steps.or(d.max_steps),
        aug: if a.no_augment {
            AugmentationSpec::none()
        } else {
            d.aug
        },
        seed,
    };
    let (manifest, base) = a.data.load()?;
    let pairs = train::load_pairs(&manifest, &base, a.data.split.into(), a.wde)?;
    let reports: Vec<&str> = pairs.iter().map(|p| p.report.as_str()).collect();
    let vocab = Vocab::build(&reports, a.min_freq)?;
    let model_cfg = match a.preset {
        Preset::Tiny => ModelConfig::tiny(vocab.len()),
        Preset::Full => ModelConfig::full(vocab.len()),
    };
    log::info!(
        "training on {} pairs, vocabulary {}",
        pairs.len(),
        vocab.len()
    );
    let outcome = train::train(&cfg, &pairs, &vocab, model_cfg)?;
    train::save_checkpoint(&outcome.checkpoint(&cfg), &a.out)?;
    if let Some(log_path) = &a.log {
        std::fs::write(log_path, outcome.log_jsonl())
            .with_context(|| format!("writing {}", log_path.display()))?;
    }
    Ok(json!({
        "checkpoint": a.out,
        "pairs": pairs.len(),
        "vocab_size": vocab.len(),
        "steps": outcome.log.len(),
        "final": outcome.log.last(),
    }))
}

fn encode(a: &EncodeArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let (modality, e) = encode_query(&model, &vocab, &a.query)?;
    Ok(json!({ "modality": modality_name(modality), "embedding": e.as_slice() }))
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Ecg => "ecg",
        Modality::Text => "text",
    }
}

fn index(a: &IndexArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let (manifest, base) = a.data.load()?;
    let text = a.modality == Modality::Text;
    let enc = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.data.split.into(),
        a.wde,
        text,
    )?;
    let vectors = if text { enc.text } else { enc.ecg };
    let ids = enc.entries.into_iter().map(|e| e.record_path).collect();
    let idx = retrieval::build_index(vectors.iter().map(|v| v.as_slice().to_vec()).collect(), ids)?;
    idx.to_checkpoint().save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "modality": modality_name(a.modality),
        "entries": idx.len(),
        "dim": vectors[0].dim(),
    }))
}

fn retrieve(a: &RetrieveArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let idx = EmbeddingIndex::from_checkpoint(&Checkpoint::load(&a.index)?)?;
    let (_, q) = encode_query(&model, &vocab, &a.query)?;
    let hits = retrieval::query_topk(&q, &idx, a.k)?;
    let results: Vec<Value> = hits
        .into_iter()
        .map(|(id, score)| json!({ "id": id, "score": score }))
        .collect();
    Ok(json!({ "results": results }))
}

fn eval_retrieval(a: &EvalRetrievalArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let (manifest, base) = a.data.load()?;
    let enc = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.data.split.into(),
        a.wde,
        true,
    )?;
    let mut recall = BTreeMap::new();
    for &k in &a.k {
        if k == 0 {
            bail!("k must be positive");
        }
        recall.insert(
            k.to_string(),
            retrieval::recall_at_k(&enc.ecg, &enc.text, k)?,
        );
    }
    Ok(json!({ "pairs": enc.ecg.len(), "recall": recall }))
}

fn zeroshot(a: &ZeroshotArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let tax = load_taxonomy(a.taxonomy.as_deref())?;
    let (manifest, base) = a.data.load()?;
    let enc = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.data.split.into(),
        false,
        false,
    )?;
    let mut prompts = Vec::with_capacity(tax.len());
    for l in tax.labels() {
        let seq = train::encode_report(
            &retrieval::zero_shot_prompt(&l.description),
            &vocab,
            model.config().max_text_len,
        );
        prompts.push((l.code.clone(), model.encode_text(&seq)?));
    }
    let (mut hits, mut labelled) = (0, 0);
    let mut results = Vec::with_capacity(enc.entries.len());
    for (entry, e) in enc.entries.iter().zip(&enc.ecg) {
        let mut scores = retrieval::zero_shot_classify(e, &prompts)?;
        scores.sort_by(|x, y| y.1.total_cmp(&x.1));
        if !entry.labels.is_empty() {
            labelled += 1;
            if entry.labels.contains(&scores[0].0) {
                hits += 1;
            }
        }
        scores.truncate(a.top);
        let top: Vec<Value> = scores
            .iter()
            .map(|(c, s)| json!({ "label": c, "score": s }))
            .collect();
        results.push(json!({ "id": entry.record_path, "top": top }));
    }
    let hit_rate = (labelled > 0).then(|| hits as f64 / labelled as f64);
    Ok(json!({ "results": results, "top1_hit_rate": hit_rate }))
}

fn multihot(entries: &[ManifestEntry], tax: &Taxonomy) -> Vec<Vec<bool>> {
    entries.iter().map(|e| tax.multihot(&e.labels)).collect()
}

fn probe(a: &ProbeArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let tax = load_taxonomy(a.taxonomy.as_deref())?;
    let data = DataArgs {
        manifest: a.manifest.clone(),
        split: a.train_split,
        base_dir: a.base_dir.clone(),
    };
    let (manifest, base) = data.load()?;
    let tr = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.train_split.into(),
        false,
        false,
    )?;
    let te = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.eval_split.into(),
        false,
        false,
    )?;
    let res = retrieval::linear_probe(
        &tr.ecg,
        &multihot(&tr.entries, &tax),
        &te.ecg,
        &multihot(&te.entries, &tax),
        &a.opts.config(),
    )?;
    let per_label: BTreeMap<&str, Option<f64>> = tax
        .labels()
        .iter()
        .map(|l| l.code.as_str())
        .zip(res.per_label_f1.iter().copied())
        .collect();
    Ok(json!({ "macro_f1": res.macro_f1, "per_label_f1": per_label }))
}

fn ddp_train(a: &DdpTrainArgs) -> Result<Value> {
    let (model, vocab) = load_model(&a.model)?;
    let tax = load_taxonomy(a.taxonomy.as_deref())?;
    let (manifest, base) = a.data.load()?;
    let enc = encode_split(
        &model,
        &vocab,
        &manifest,
        &base,
        a.data.split.into(),
        false,
        false,
    )?;
    let clf = ddp::fit_group_classifiers(
        &enc.ecg,
        &multihot(&enc.entries, &tax),
        &tax,
        &a.opts.config(),
    )?;
    clf.to_checkpoint().save(&a.out)?;
    let skipped: Vec<&str> = tax
        .labels()
        .iter()
        .zip(&clf.units)
        .filter(|(_, u)| u.is_none())
        .map(|(l, _)| l.code.as_str())
        .collect();
    Ok(json!({
        "out": a.out,
        "samples": enc.ecg.len(),
        "labels": tax.len(),
        "skipped": skipped,
    }))
}

fn diagnose(
    model: &DualEncoder,
    clf: &GroupedClassifier,
    rec: &EcgRecord,
    t: &Thresholds,
) -> Result<ddp::DiagnosisSelection> {
    let probs = clf.predict(&model.encode_ecg(rec)?);
    Ok(ddp::select(
        &probs,
        &clf.taxonomy,
        t.tau_disease,
        t.tau_form,
    )?)
}

fn ddp_prompt(a: &DdpPromptArgs) -> Result<Value> {
    let (model, _) = load_model(&a.model)?;
    let clf = load_classifier(&a.classifier)?;
    let sel = diagnose(&model, &clf, &load_record(&a.input)?, &a.thresholds)?;
    Ok(json!({ "prompt": ddp::render_prompt(&sel), "selection": sel }))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn eval_report(a: &EvalReportArgs) -> Result<Value> {
    let pred = read_lines(&a.pred)?;
    let refs = read_lines(&a.reference)?;
    if pred.len() != refs.len() {
        bail!("{} predictions but {} references", pred.len(), refs.len());
    }
    if pred.is_empty() {
        bail!("no reports to score");
    }
    let tax = load_taxonomy(a.taxonomy.as_deref())?;
    let mut sums = [0.0f64; 8];
    for (p, r) in pred.iter().zip(&refs) {
        let (pw, rw) = (words(p), words(r));
        let pt: Vec<&str> = pw.iter().map(String::as_str).collect();
        let rt: Vec<&str> = rw.iter().map(String::as_str).collect();
        if !pt.is_empty() {
            for n in 1..=4 {
                sums[n - 1] += bleu(&pt, std::slice::from_ref(&rt), n)?;
            }
        }
        let rg = rouge_l(&pt, &rt);
        sums[4] += rg.precision;
        sums[5] += rg.recall;
        sums[6] += rg.f;
        if !pt.is_empty() && !rt.is_empty() {
            sums[7] += meteor(&pt, &rt);
        }
    }
    let n = pred.len() as f64;
    let avg = sums.map(|s| s / n);
    let pl: Vec<_> = pred.iter().map(|p| extract_labels(p, &tax)).collect();
    let rl: Vec<_> = refs.iter().map(|r| extract_labels(r, &tax)).collect();
    let ce: metrics::CeResult = ce_metrics(&pl, &rl, &tax)?;
    Ok(json!({
        "reports": pred.len(),
        "bleu": { "1": avg[0], "2": avg[1], "3": avg[2], "4": avg[3] },
        "rouge_l": { "precision": avg[4], "recall": avg[5], "f": avg[6] },
        "meteor": avg[7],
        "ce": ce,
    }))
}

fn instruct_build(a: &InstructBuildArgs, seed: u64) -> Result<Value> {
    let tax = load_taxonomy(a.taxonomy.as_deref())?;
    let bank = match &a.questions {
        Some(p) => instruct::load_question_bank(p)?,
        None => instruct::builtin_question_bank(),
    };
    let diagnoser = match (&a.model, &a.classifier) {
        (Some(m), Some(c)) => Some((load_model(m)?.0, load_classifier(c)?)),
        _ => None,
    };
    let (manifest, base) = a.data.load()?;
    let mut records: Vec<InstructRecord> = Vec::new();
    for (i, e) in manifest.split(a.data.split.into()).enumerate() {
        let s = seed.wrapping_add(i as u64);
        let normality = Normality::from_labels(&e.labels, &tax);
        let reports = [e.report.as_str()];
        let rec = match a.kind {
            KindArg::Pretrain => {
                instruct::build_pretrain_record(&e.record_path, &reports, &bank, normality, s)?
            }
            KindArg::Diagnosis => {
                let prompt = match &diagnoser {
                    Some((model, clf)) => {
                        let ecg = load_record(&base.join(&e.record_path))?;
                        Some(ddp::render_prompt(&diagnose(
                            model,
                            clf,
                            &ecg,
                            &a.thresholds,
                        )?))
                    }
                    None => None,
                };
                instruct::build_diagnosis_record(
                    &e.record_path,
                    &reports,
                    prompt.as_deref(),
                    &bank,
                    normality,
                    s,
                )?
            }
            KindArg::Conversation => {
                let ecg = load_record(&base.join(&e.record_path))?;
                let features = match extract_features(&ecg) {
                    Ok(f) => Some(f),
                    Err(err) => {
                        log::warn!("{}: no waveform features ({err})", e.record_path);
                        None
                    }
                };
                let labels: Vec<&str> = e.labels.iter().map(String::as_str).collect();
                instruct::build_conversation(
                    &e.record_path,
                    &reports,
                    &labels,
                    features.as_ref(),
                    &tax,
                    s,
                )?
            }
        };
        records.push(rec);
    }
    std::fs::write(&a.out, instruct::to_jsonl(&records))
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({ "out": a.out, "stats": instruct::corpus_stats(&records) }))
}

fn report(a: &ReportArgs) -> Result<Value> {
    let rec = load_record(&a.input)?;
    let features = extract_features(&rec)?;
    let mut meta: PatientMeta = match &a.meta {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => rec.meta.clone(),
    };
    meta.age = a.age.or(meta.age);
    meta.sex = a.sex.or(meta.sex);
    if a.history.is_some() {
        meta.history = a.history.clone();
    }
    let sel = match (&a.classifier, &a.model) {
        (Some(c), Some(m)) => {
            diagnose(&load_model(m)?.0, &load_classifier(c)?, &rec, &a.thresholds)?
        }
        _ => {
            let tax = load_taxonomy(a.taxonomy.as_deref())?;
            let mut probs = vec![0.0; tax.len()];
            for code in &a.labels {
                let i = tax
                    .index_of(code)
                    .with_context(|| format!("unknown label code {code:?}"))?;
                probs[i] = 1.0;
            }
            ddp::select(
                &probs,
                &tax,
                a.thresholds.tau_disease,
                a.thresholds.tau_form,
            )?
        }
    };
    let backend = BackendConfig {
        kind: match a.backend_kind {
            BackendArg::Template => BackendKind::Template,
            BackendArg::Http => BackendKind::Http,
        },
        url: a.backend_url.clone(),
        timeout_ms: a.backend_timeout_ms,
    }
    .build()?;
    let doc = reportgen::assemble(&meta, &features, &sel, backend.as_ref())?;
    let latex = reportgen::render_latex(&doc);
    let violations: Vec<Value> = reportgen::validate_latex(&latex)
        .into_iter()
        .map(|v| json!({ "offset": v.offset, "message": v.message }))
        .collect();
    if !violations.is_empty() {
        bail!("rendered LaTeX failed validation: {violations:?}");
    }
    let latex_out = match &a.out {
        Some(p) => {
            std::fs::write(p, &latex).with_context(|| format!("writing {}", p.display()))?;
            json!(p)
        }
        None => json!(latex),
    };
    Ok(json!({ "report": doc, "latex": latex_out, "prompt": ddp::render_prompt(&sel) }))
}
