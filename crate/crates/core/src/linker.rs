//! Zero-shot linking of external mentions to reference experts, with an
//! append-only feedback log that turns reviewer decisions into training
//! triplets for retraining.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{candidate_set, sample_instance, sample_triplets, Corpus, ExternalMention, SupportInfo};
use crate::diffcore::{Adam, ParamGroup};
use crate::error::{Error, Result};
use crate::eval::{candidate_embeddings, rank_scores};
use crate::model::Model;
use crate::pretrain::{
    accumulate_triplets, epoch_rng, TokenTriplet, TokenizedCorpus, TrainConfig, ENCODER_GROUP, METRIC_GROUP,
};

pub const DEFAULT_THRESHOLD: f64 = 0.0;
pub const DEFAULT_PAPER_CAP: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub expert_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mention_id: String,
    /// Descending by score, ties by id.
    pub ranked: Vec<Ranked>,
    /// The top candidate when its score reaches the threshold.
    pub accepted: Option<String>,
}

impl LinkResult {
    /// Re-apply a different threshold to the same ranking.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.accepted = accept(&self.ranked, threshold);
        self
    }
}

fn accept(ranked: &[Ranked], threshold: f64) -> Option<String> {
    ranked.first().filter(|r| r.score >= threshold).map(|r| r.expert_id.clone())
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > -1.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold must lie in (-1, 1), got {threshold}")))
    }
}

fn finish(mention_id: &str, scored: Vec<(String, f64)>, threshold: f64) -> LinkResult {
    let ranked: Vec<Ranked> = rank_scores(scored)
        .into_iter()
        .map(|(expert_id, score)| Ranked { expert_id, score })
        .collect();
    LinkResult {
        mention_id: mention_id.to_string(),
        accepted: accept(&ranked, threshold),
        ranked,
    }
}

/// Rank the reference experts sharing a name variant with the mention.
/// The mention's support is the first metric argument; each candidate
/// contributes its first `paper_cap` papers.
pub fn link(
    model: &Model,
    mention: &ExternalMention,
    corpus: &Corpus,
    threshold: f64,
    paper_cap: usize,
) -> Result<LinkResult> {
    check_threshold(threshold)?;
    let candidates = candidate_set(&mention.name, corpus);
    if candidates.is_empty() {
        return Ok(finish(&mention.mention_id, Vec::new(), threshold));
    }
    let query = model.embed_all(&mention.support)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        let emb = candidate_embeddings(model, corpus, &id, paper_cap)?;
        let s = model.score_embeddings(&query, &emb)?;
        scored.push((id, s));
    }
    Ok(finish(&mention.mention_id, scored, threshold))
}

/// A frozen model with every expert's candidate embeddings precomputed,
/// for serving many link requests. Results equal [`link`] exactly.
#[derive(Debug)]
pub struct Linker {
    pub model: Model,
    pub corpus: Corpus,
    pub paper_cap: usize,
    embeddings: HashMap<String, Vec<Vec<f64>>>,
}

impl Linker {
    pub fn new(model: Model, corpus: Corpus, paper_cap: usize) -> Result<Self> {
        let embeddings = corpus
            .experts()
            .iter()
            .map(|e| Ok((e.id.clone(), candidate_embeddings(&model, &corpus, &e.id, paper_cap)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            corpus,
            paper_cap,
            embeddings,
        })
    }

    pub fn link(&self, mention: &ExternalMention, threshold: f64) -> Result<LinkResult> {
        check_threshold(threshold)?;
        let candidates = candidate_set(&mention.name, &self.corpus);
        if candidates.is_empty() {
            return Ok(finish(&mention.mention_id, Vec::new(), threshold));
        }
        let query = self.model.embed_all(&mention.support)?;
        let scored = candidates
            .into_iter()
            .map(|id| {
                let s = self.model.score_embeddings(&query, &self.embeddings[&id])?;
                Ok((id, s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(finish(&mention.mention_id, scored, threshold))
    }
}

/// Content-addressed id of a mention given as a name plus support sentences.
pub fn mention_id(name: &str, support: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for s in support {
        h.update([0u8]);
        h.update(s.as_bytes());
    }
    format!("m-{}", &hex::encode(h.finalize())[..16])
}

/// Build an unlabeled mention from raw request fields.
pub fn mention_from_parts(name: &str, support: &[String]) -> Result<ExternalMention> {
    if name.trim().is_empty() {
        return Err(Error::InvalidArgument("mention name is empty".into()));
    }
    let kept: Vec<String> = support.iter().filter(|s| !s.trim().is_empty()).cloned().collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("mention has no support sentences".into()));
    }
    Ok(ExternalMention {
        mention_id: mention_id(name, &kept),
        name: name.to_string(),
        support: kept.iter().map(|s| SupportInfo::sentence(s)).collect::<Result<_>>()?,
        truth_expert_id: None,
    })
}

// ---------------------------------------------------------------------------
// Feedback

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirm,
    Correct,
    RejectAll,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub mention_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_expert_id: Option<String>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

impl Feedback {
    pub fn validate(&self) -> Result<()> {
        match (self.verdict, &self.corrected_expert_id) {
            (Verdict::Correct, None) => Err(Error::InvalidArgument(
                "verdict `correct` needs corrected_expert_id".into(),
            )),
            (Verdict::Confirm | Verdict::RejectAll, Some(_)) => Err(Error::InvalidArgument(
                "corrected_expert_id is only allowed with verdict `correct`".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A training instance derived from one piece of feedback. Without a
/// positive it only records hard negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackExample {
    pub mention_id: String,
    pub support: Vec<SupportInfo>,
    pub positive: Option<String>,
    pub negatives: Vec<String>,
}

/// One line of the feedback log: everything needed to rebuild the example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback: Feedback,
    pub mention: ExternalMention,
    pub result: LinkResult,
}

impl FeedbackRecord {
    pub fn example(&self) -> Result<FeedbackExample> {
        let fb = &self.feedback;
        fb.validate()?;
        let ranked: Vec<&str> = self.result.ranked.iter().map(|r| r.expert_id.as_str()).collect();
        let (positive, negatives) = match fb.verdict {
            Verdict::Confirm => {
                let top = self
                    .result
                    .accepted
                    .as_deref()
                    .or(ranked.first().copied())
                    .ok_or_else(|| Error::InvalidArgument(format!("nothing to confirm for `{}`", fb.mention_id)))?;
                (Some(top.to_string()), ranked.iter().filter(|&&r| r != top).map(|r| r.to_string()).collect())
            }
            Verdict::Correct => {
                let pos = fb.corrected_expert_id.clone().expect("validated");
                let negs = ranked.iter().filter(|&&r| r != pos).map(|r| r.to_string()).collect();
                (Some(pos), negs)
            }
            Verdict::RejectAll => (None, ranked.iter().map(|r| r.to_string()).collect()),
        };
        Ok(FeedbackExample {
            mention_id: fb.mention_id.clone(),
            support: self.mention.support.clone(),
            positive,
            negatives,
        })
    }
}

/// Append-only feedback log, optionally backed by a line-delimited JSON file.
#[derive(Clone, Debug, Default)]
pub struct FeedbackStore {
    path: Option<PathBuf>,
    records: Vec<FeedbackRecord>,
}

impl FeedbackStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open a log file, replaying any records already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: FeedbackRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                records.push(rec);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records,
        })
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn append(&mut self, rec: FeedbackRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.records.push(rec);
        Ok(())
    }

    /// The current training set: the latest decision per mention, in order
    /// of each mention's first appearance.
    pub fn training_set(&self) -> Result<Vec<FeedbackExample>> {
        let mut order: Vec<&str> = Vec::new();
        let mut latest: BTreeMap<&str, &FeedbackRecord> = BTreeMap::new();
        for r in &self.records {
            let id = r.feedback.mention_id.as_str();
            if latest.insert(id, r).is_none() {
                order.push(id);
            }
        }
        order.into_iter().map(|id| latest[id].example()).collect()
    }
}

/// Validate a decision, append it to the log and return the example it adds.
pub fn submit_feedback(
    store: &mut FeedbackStore,
    fb: Feedback,
    mention: &ExternalMention,
    result: &LinkResult,
    corpus: &Corpus,
) -> Result<FeedbackExample> {
    fb.validate()?;
    if fb.mention_id != mention.mention_id || fb.mention_id != result.mention_id {
        return Err(Error::InvalidArgument(format!(
            "feedback for `{}` does not match mention `{}`",
            fb.mention_id, mention.mention_id
        )));
    }
    if let Some(id) = &fb.corrected_expert_id {
        corpus.expert(id)?;
    }
    let rec = FeedbackRecord {
        feedback: fb,
        mention: mention.clone(),
        result: result.clone(),
    };
    let example = rec.example()?;
    store.append(rec)?;
    Ok(example)
}

// ---------------------------------------------------------------------------
// Retraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_metric: f64,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr_encoder: 1e-3,
            lr_metric: 1e-3,
            seed: 0,
        }
    }
}

fn feedback_triplet<R: rand::Rng>(
    model: &Model,
    corpus: &Corpus,
    tokens: &TokenizedCorpus,
    ex: &FeedbackExample,
    positive: &str,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<TokenTriplet> {
    let anchor = ex.support.iter().map(|s| model.tokens(s)).collect::<Result<Vec<_>>>()?;
    let pos = sample_instance(corpus.expert(positive)?, train.cap, rng)?;
    let mut neg_ids: Vec<&str> = ex.negatives.iter().map(String::as_str).take(train.n_neg).collect();
    if neg_ids.is_empty() {
        let others: Vec<&str> = corpus
            .experts()
            .iter()
            .map(|e| e.id.as_str())
            .filter(|&id| id != positive)
            .collect();
        neg_ids.push(others.choose(rng).ok_or_else(|| Error::NoEligibleExperts("no negative expert".into()))?);
    }
    let negatives = neg_ids
        .into_iter()
        .map(|id| tokens.instance(&sample_instance(corpus.expert(id)?, train.cap, rng)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenTriplet {
        anchor,
        positive: tokens.instance(&pos)?,
        negatives,
    })
}

/// Continue training with the triplet loss on feedback triplets mixed 1:1
/// with fresh reference triplets. Returns the new model version and the
/// mean loss of each epoch.
pub fn retrain_from_feedback(
    model: &Model,
    corpus: &Corpus,
    store: &FeedbackStore,
    train: &TrainConfig,
    cfg: &RetrainConfig,
) -> Result<(Model, Vec<f64>)> {
    train.validate()?;
    if cfg.batch_size == 0 || !(cfg.lr_encoder > 0.0) || !(cfg.lr_metric > 0.0) {
        return Err(Error::InvalidArgument("retrain batch size and learning rates must be positive".into()));
    }
    let examples: Vec<FeedbackExample> = store
        .training_set()?
        .into_iter()
        .filter(|e| e.positive.is_some())
        .collect();
    if examples.is_empty() {
        return Err(Error::InvalidArgument("the feedback store has no positive examples".into()));
    }
    let mut current = model.clone();
    let tokens = TokenizedCorpus::new(&current, corpus)?;
    let groups = vec![
        ParamGroup {
            name: ENCODER_GROUP.into(),
            params: current.shared.param_ids(),
            base_lr: cfg.lr_encoder,
        },
        ParamGroup {
            name: METRIC_GROUP.into(),
            params: current.metric_params(),
            base_lr: cfg.lr_metric,
        },
    ];
    let mut opt = Adam::new(train.adam(), groups, &current.store);
    let mut losses = Vec::with_capacity(cfg.epochs);
    // Streams far above those of pre-training and adaptation.
    const STREAM_BASE: u64 = 1 << 40;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, STREAM_BASE + epoch as u64);
        let mut batch_pool = Vec::with_capacity(2 * examples.len());
        for ex in &examples {
            let pos = ex.positive.as_deref().expect("filtered");
            batch_pool.push(feedback_triplet(&current, corpus, &tokens, ex, pos, train, &mut rng)?);
        }
        let per_expert = examples.len().div_ceil(corpus.len()).max(1);
        let mut replay = sample_triplets(corpus, train.cap, train.n_neg, per_expert, &mut rng)?;
        replay.shuffle(&mut rng);
        for t in replay.iter().take(examples.len()) {
            batch_pool.push(tokens.triplet(t)?);
        }
        batch_pool.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in batch_pool.chunks(cfg.batch_size) {
            current.store.zero_grads();
            let sums = accumulate_triplets(&mut current, chunk, train.margin, 1.0)?;
            opt.step(&mut current.store)?;
            total += sums.loss;
        }
        opt.end_epoch();
        let mean = total / batch_pool.len() as f64;
        tracing::info!(epoch, loss = mean, "retrain epoch");
        losses.push(mean);
    }
    current.store.zero_grads();
    current.version = model.version + 1;
    Ok((current, losses))
}

/// A directory of versioned model snapshots; publishing never overwrites
/// an older version.
#[derive(Clone, Debug)]
pub struct Snapshots {
    dir: PathBuf,
}

impl Snapshots {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path_of(&self, version: u64) -> PathBuf {
        self.dir.join(format!("model-v{version:06}.json"))
    }

    /// Write atomically through a temporary file and rename.
    pub fn publish(&self, model: &Model) -> Result<PathBuf> {
        let path = self.path_of(model.version);
        if path.exists() {
            return Err(Error::Checkpoint(format!("{} already exists", path.display())));
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, model.to_json()?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn versions(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name
                .strip_prefix("model-v")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn latest(&self) -> Result<Option<Model>> {
        match self.versions()?.last() {
            Some(&v) => Ok(Some(Model::load(&self.path_of(v))?)),
            None => Ok(None),
        }
    }
}
