//! Command-line entry points. Every command writes `manifest.json` into its
//! run directory before doing any work, then its outputs next to it.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapt::{finetune_with_log, AdaptConfig};
use crate::corpus::{candidate_set, load_corpus, load_reference, read_jsonl, Corpus, ExternalMention, LoadedCorpus, Schema};
use crate::encoder::{export_embeddings, item_key, Vocab};
use crate::error::{Error, Result};
use crate::eval::{author_identification, paper_clustering_eval, IdentificationQuery, NameBlock};
use crate::linker::{FeedbackStore, Linker, RetrainConfig, Snapshots, DEFAULT_PAPER_CAP};
use crate::model::{Model, ModelConfig};
use crate::pretrain::{pretrain_with_log, TrainConfig};
use crate::server::{serve, AppState, ServeConfig};
use crate::synth::{assign_random_candidates, synth_corpus, NameRecord, QueryRecord, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "expertlink", version, about = "Link external expert mentions to a reference corpus")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic reference corpus, queries, name blocks and news mentions.
    Synth(SynthArgs),
    /// Train encoder and metric with the instance-triplet loss.
    Pretrain(PretrainArgs),
    /// Adapt a pre-trained model toward an external corpus.
    Finetune(FinetuneArgs),
    /// Author identification: rank candidates for held-out papers.
    EvalAi(EvalAiArgs),
    /// Paper clustering within ambiguous names.
    EvalPc(EvalPcArgs),
    /// Link external mentions offline.
    Link(LinkArgs),
    /// Serve linking and feedback over HTTP.
    Serve(ServeArgs),
    /// Retrain with varying instance cap or negative count.
    Sweep(SweepArgs),
    /// Write per-paper embeddings: item id, a tab, then comma-separated values.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub n_experts: usize,
    #[arg(long, default_value_t = 24)]
    pub papers: usize,
    #[arg(long, default_value_t = 4)]
    pub queries: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_topics: usize,
    #[arg(long, default_value_t = 0.3)]
    pub overlap: f64,
    #[arg(long, default_value_t = 18)]
    pub name_group: usize,
    #[arg(long, default_value_t = 4)]
    pub mentions: usize,
    #[arg(long, default_value_t = 10)]
    pub sentences: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ext_topic_share: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 0.0)]
    pub morph: f64,
    #[arg(long, default_value_t = 4)]
    pub style_words: usize,
    /// Candidates per identification query, the truth included.
    #[arg(long, default_value_t = 18)]
    pub candidates: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Instance cap.
    #[arg(long = "L", default_value_t = 6)]
    pub cap: usize,
    #[arg(long, default_value_t = 9)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_encoder: f64,
    #[arg(long, default_value_t = 2e-3)]
    pub lr_metric: f64,
    #[arg(long, default_value_t = 0.96)]
    pub decay: f64,
    #[arg(long, default_value_t = 10)]
    pub anchors_per_expert: usize,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            cap: self.cap,
            n_neg: self.n_neg,
            margin: self.margin,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_encoder: self.lr_encoder,
            lr_metric: self.lr_metric,
            decay: self.decay,
            seed,
            anchors_per_expert: self.anchors_per_expert,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d_tok: usize,
    #[arg(long, default_value_t = 64)]
    pub d_out: usize,
    /// Words seen fewer times are mapped to the unknown token.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Reference corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// External text whose words also enter the vocabulary.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ExternalSchema::News)]
    pub schema: ExternalSchema,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalSchema {
    News,
    Linkedin,
}

impl From<ExternalSchema> for Schema {
    fn from(s: ExternalSchema) -> Self {
        match s {
            ExternalSchema::News => Schema::News,
            ExternalSchema::Linkedin => Schema::Linkedin,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long, value_enum, default_value_t = ExternalSchema::News)]
    pub schema: ExternalSchema,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Passes over the external corpus.
    #[arg(long, default_value_t = 1)]
    pub adapt_epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size_ext: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_disc: f64,
    #[arg(long, default_value_t = 2e-5)]
    pub lr_adapt: f64,
    #[arg(long, default_value_t = 500)]
    pub probe_items: usize,
    /// Settings of the triplet loss kept during adaptation.
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalAiArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PAPER_CAP)]
    pub paper_cap: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPcArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub names: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LinkArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long, value_enum, default_value_t = ExternalSchema::News)]
    pub schema: ExternalSchema,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_PAPER_CAP)]
    pub paper_cap: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_PAPER_CAP)]
    pub paper_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
pub enum SweepParam {
    #[value(name = "L")]
    #[serde(rename = "L")]
    Cap,
    #[value(name = "n_neg")]
    #[serde(rename = "n_neg")]
    NNeg,
}

impl SweepParam {
    pub fn grid(self) -> [usize; 5] {
        match self {
            SweepParam::Cap => [1, 4, 7, 10, 13],
            SweepParam::NNeg => [1, 3, 5, 7, 9],
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_PAPER_CAP)]
    pub paper_cap: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

/// Everything needed to rerun a command: its name, resolved arguments,
/// and the content hashes of the files it reads.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    input_hash: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest<A: Serialize>(
    out: &Path,
    command: &str,
    args: &A,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.to_path_buf(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut h = Sha256::new();
    for i in &inputs {
        h.update(i.sha256.as_bytes());
    }
    let manifest = RunManifest {
        command: command.into(),
        config: serde_json::to_value(args)?,
        seed,
        inputs,
        outputs: outputs.iter().map(|o| out.join(o)).collect(),
        input_hash: hex::encode(h.finalize()),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn push<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn load_mentions(path: &Path, schema: ExternalSchema) -> Result<Vec<ExternalMention>> {
    match load_corpus(path, schema.into())? {
        LoadedCorpus::Mentions(m) => Ok(m),
        LoadedCorpus::Reference(_) => unreachable!("external schemas load mentions"),
    }
}

/// Queries without candidates are ranked against the experts sharing their author's name.
fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<IdentificationQuery>> {
    let records: Vec<QueryRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .map(|q| {
            let candidates = if q.candidates.is_empty() {
                candidate_set(&corpus.expert(&q.truth_id)?.name, corpus)
            } else {
                q.candidates
            };
            Ok(IdentificationQuery {
                query_id: q.query_id,
                paper: q.paper.to_support()?,
                truth_id: q.truth_id,
                candidates,
            })
        })
        .collect()
}

fn init_model(corpus: &Corpus, external: &[ExternalMention], args: &ModelArgs, seed: u64) -> Result<Model> {
    let vocab = Vocab::build(
        corpus
            .experts()
            .iter()
            .flat_map(|e| &e.support)
            .chain(external.iter().flat_map(|m| &m.support)),
        args.min_freq,
    )?;
    let config = ModelConfig {
        d_tok: args.d_tok,
        d_out: args.d_out,
        ..ModelConfig::default()
    };
    Model::init(vocab, config, seed)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => pretrain_cmd(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::EvalAi(a) => eval_ai(&a),
        Command::EvalPc(a) => eval_pc(&a),
        Command::Link(a) => link_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Sweep(a) => sweep(&a),
        Command::ExportEmbeddings(a) => export(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let files = ["reference.jsonl", "queries.jsonl", "names.jsonl", "news.jsonl"];
    write_manifest(&a.out, "synth", a, Some(a.seed), &[], &files)?;
    let cfg = SynthConfig {
        n_experts: a.n_experts,
        papers_per_expert: a.papers,
        queries_per_expert: a.queries,
        vocab_topics: a.vocab_topics,
        overlap: a.overlap,
        name_group: a.name_group,
        mentions_per_expert: a.mentions,
        sentences_per_mention: a.sentences,
        ext_topic_share: a.ext_topic_share,
        shift: a.shift,
        morph: a.morph,
        style_words: a.style_words,
        seed: a.seed,
    };
    let mut s = synth_corpus(&cfg)?;
    assign_random_candidates(&mut s.queries, &s.reference, a.candidates, a.seed)?;
    s.write(&a.out)
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let mut inputs = vec![a.corpus.as_path()];
    inputs.extend(a.external.as_deref());
    write_manifest(&a.out, "pretrain", a, Some(a.seed), &inputs, &["model.json", "log.jsonl", "report.json"])?;
    let corpus = load_reference(&a.corpus)?;
    let external = match &a.external {
        Some(p) => load_mentions(p, a.schema)?,
        None => Vec::new(),
    };
    let model = init_model(&corpus, &external, &a.model, a.seed)?;
    let mut log = JsonLines::create(&a.out.join("log.jsonl"))?;
    let (trained, history) = pretrain_with_log(&model, &corpus, &a.train.config(a.seed), |s| log.push(s))?;
    log.finish()?;
    trained.save(&a.out.join("model.json"))?;
    write_json(&a.out.join("report.json"), &history)
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    write_manifest(
        &a.out,
        "finetune",
        a,
        Some(a.seed),
        &[&a.model, &a.corpus, &a.external],
        &["model.json", "log.jsonl", "report.json"],
    )?;
    let model = Model::load(&a.model)?;
    let corpus = load_reference(&a.corpus)?;
    let external = load_mentions(&a.external, a.schema)?;
    let cfg = AdaptConfig {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        batch_size_ext: a.batch_size_ext,
        epochs: a.adapt_epochs,
        lr_disc: a.lr_disc,
        lr_encoder: a.lr_adapt,
        seed: a.seed,
        probe_items: a.probe_items,
    };
    let mut log = JsonLines::create(&a.out.join("log.jsonl"))?;
    let (adapted, report) = finetune_with_log(&model, &corpus, &external, &a.train.config(a.seed), &cfg, |s| log.push(s))?;
    log.finish()?;
    adapted.save(&a.out.join("model.json"))?;
    write_json(
        &a.out.join("report.json"),
        &json!({"probe_before": report.probe_before, "probe_after": report.probe_after, "steps": report.steps.len()}),
    )
}

fn eval_ai(a: &EvalAiArgs) -> Result<()> {
    write_manifest(&a.out, "eval-ai", a, None, &[&a.model, &a.corpus, &a.queries], &["report.json"])?;
    let model = Model::load(&a.model)?;
    let corpus = load_reference(&a.corpus)?;
    let queries = load_queries(&a.queries, &corpus)?;
    let report = author_identification(&model, &queries, &corpus, a.paper_cap)?;
    write_json(&a.out.join("report.json"), &report)
}

fn eval_pc(a: &EvalPcArgs) -> Result<()> {
    write_manifest(&a.out, "eval-pc", a, None, &[&a.model, &a.names], &["report.json"])?;
    let model = Model::load(&a.model)?;
    let names: Vec<NameRecord> = read_jsonl(&a.names)?;
    let blocks = names
        .into_iter()
        .map(|n| {
            Ok(NameBlock {
                name: n.name,
                papers: n.papers.iter().map(|p| p.to_support()).collect::<Result<_>>()?,
                truth: n.truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = paper_clustering_eval(&model, &blocks)?;
    write_json(&a.out.join("report.json"), &report)
}

fn link_cmd(a: &LinkArgs) -> Result<()> {
    write_manifest(
        &a.out,
        "link",
        a,
        None,
        &[&a.model, &a.corpus, &a.external],
        &["links.jsonl", "report.json"],
    )?;
    let model = Model::load(&a.model)?;
    let corpus = load_reference(&a.corpus)?;
    let mentions = load_mentions(&a.external, a.schema)?;
    let linker = Linker::new(model, corpus, a.paper_cap)?;
    let mut out = JsonLines::create(&a.out.join("links.jsonl"))?;
    let (mut labeled, mut hits, mut accepted) = (0usize, 0usize, 0usize);
    for m in &mentions {
        let r = linker.link(m, a.threshold)?;
        if let Some(truth) = &m.truth_expert_id {
            labeled += 1;
            hits += usize::from(r.ranked.first().is_some_and(|x| &x.expert_id == truth));
        }
        accepted += usize::from(r.accepted.is_some());
        out.push(&r)?;
    }
    out.finish()?;
    let hr1 = (labeled > 0).then(|| hits as f64 / labeled as f64);
    write_json(
        &a.out.join("report.json"),
        &json!({"mentions": mentions.len(), "accepted": accepted, "labeled": labeled, "hr1": hr1}),
    )
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    write_manifest(&a.out, "serve", a, Some(a.seed), &[&a.model, &a.corpus], &["feedback.jsonl", "snapshots"])?;
    let snapshots = Snapshots::new(&a.out.join("snapshots"))?;
    // Resume from the newest retrained snapshot of an earlier session.
    let model = match snapshots.latest()? {
        Some(m) => m,
        None => Model::load(&a.model)?,
    };
    let corpus = load_reference(&a.corpus)?;
    let store = FeedbackStore::open(&a.out.join("feedback.jsonl"))?;
    let cfg = ServeConfig {
        threshold: a.threshold,
        train: a.train.config(a.seed),
        retrain: RetrainConfig {
            seed: a.seed,
            ..RetrainConfig::default()
        },
        snapshots: Some(snapshots),
    };
    let state = AppState::new(Linker::new(model, corpus, a.paper_cap)?, store, cfg)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(addr, state))
}

fn sweep(a: &SweepArgs) -> Result<()> {
    write_manifest(&a.out, "sweep", a, Some(a.seed), &[&a.corpus, &a.queries], &["sweep.json"])?;
    let corpus = load_reference(&a.corpus)?;
    let queries = load_queries(&a.queries, &corpus)?;
    let init = init_model(&corpus, &[], &a.model, a.seed)?;
    let mut rows = Vec::new();
    for value in a.param.grid() {
        let mut train = a.train.config(a.seed);
        match a.param {
            SweepParam::Cap => train.cap = value,
            SweepParam::NNeg => train.n_neg = value,
        }
        let (trained, _) = pretrain_with_log(&init, &corpus, &train, |_| Ok(()))?;
        let report = author_identification(&trained, &queries, &corpus, a.paper_cap)?;
        tracing::info!(value, hr1 = report.hr1, "sweep point");
        rows.push(json!({"value": value, "report": report}));
    }
    write_json(&a.out.join("sweep.json"), &json!({"param": a.param, "points": rows}))
}

fn export(a: &ExportArgs) -> Result<()> {
    write_manifest(&a.out, "export-embeddings", a, None, &[&a.model, &a.corpus], &["embeddings.tsv"])?;
    let model = Model::load(&a.model)?;
    let corpus = load_reference(&a.corpus)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for e in corpus.experts() {
        for (i, s) in e.support.iter().enumerate() {
            let key = item_key(&e.id, i);
            if seen.insert(key.clone()) {
                rows.push((key, model.embed(s)?));
            }
        }
    }
    export_embeddings(&a.out.join("embeddings.tsv"), rows.iter().map(|(k, v)| (k.as_str(), v.as_slice())))
}

/// One-line machine-readable error for stderr.
pub fn error_line(e: &Error) -> String {
    json!({"error": e.kind(), "message": e.to_string()}).to_string()
}
