//! The trainable bundle: vocabulary, parameters, generators, metric and
//! adaptation heads, persisted as one snapshot file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::Classifier;
use crate::corpus::SupportInfo;
use crate::diffcore::{Checkpoint, ParamId, ParamStore};
use crate::encoder::{tokenize, Generator, TokenLimits, Vocab};
use crate::error::{Error, Result};
use crate::metric::{KernelBank, MetricParams};

pub const SHARED: &str = "shared";
pub const PRIVATE: &str = "private";
pub const METRIC: &str = "metric";
pub const DISCRIMINATOR: &str = "disc";
pub const PREDICTOR: &str = "pred";

const SNAPSHOT_FORMAT: &str = "expertlink-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub d_out: usize,
    pub max_len_paper: usize,
    pub max_len_ext: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_tok: 64,
            d_out: 64,
            max_len_paper: 208,
            max_len_ext: 64,
            classifier_hidden: 100,
        }
    }
}

impl ModelConfig {
    pub fn limits(&self) -> TokenLimits {
        TokenLimits {
            paper: self.max_len_paper,
            external: self.max_len_ext,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub shared: Generator,
    pub private: Option<Generator>,
    pub metric: MetricParams,
    pub discriminator: Option<Classifier>,
    pub predictor: Option<Classifier>,
    /// Incremented every time a trained model is published.
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u64,
    config: ModelConfig,
    vocab: Vec<String>,
    checkpoint: Checkpoint,
}

impl Model {
    /// Fresh shared generator and metric with seed-controlled initialization.
    pub fn init(vocab: Vocab, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shared = Generator::init(&mut store, SHARED, vocab.len(), config.d_tok, config.d_out, &mut rng)?;
        let metric = MetricParams::init(&mut store, METRIC, KernelBank::default(), &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            shared,
            private: None,
            metric,
            discriminator: None,
            predictor: None,
            version: 0,
        })
    }

    pub fn tokens(&self, info: &SupportInfo) -> Result<Vec<u32>> {
        tokenize(info, &self.vocab, self.config.limits().for_kind(info.kind))
    }

    /// Shared-generator embedding of one support item.
    pub fn embed(&self, info: &SupportInfo) -> Result<Vec<f64>> {
        self.shared.embed(&self.store, &self.tokens(info)?)
    }

    pub fn embed_all<'a, I>(&self, items: I) -> Result<Vec<Vec<f64>>>
    where
        I: IntoIterator<Item = &'a SupportInfo>,
    {
        items.into_iter().map(|i| self.embed(i)).collect()
    }

    pub fn score_embeddings(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        self.metric.score_embeddings(&self.store, a, b)
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.shared.param_ids();
        if let Some(p) = &self.private {
            ids.extend(p.param_ids());
        }
        ids
    }

    pub fn metric_params(&self) -> Vec<ParamId> {
        self.metric.param_ids()
    }

    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.discriminator
            .iter()
            .chain(self.predictor.iter())
            .flat_map(Classifier::param_ids)
            .collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: self.version,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            checkpoint: self.store.to_checkpoint(),
        };
        Ok(serde_json::to_vec(&snap)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let snap: Snapshot = serde_json::from_slice(bytes)?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown snapshot format `{}`", snap.format)));
        }
        let vocab = Vocab::from_tokens(snap.vocab)?;
        let store = ParamStore::from_checkpoint(&snap.checkpoint)?;
        let shared = Generator::attach(&store, SHARED)?;
        if store.get(shared.embed).rows() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "embedding table has {} rows but vocabulary has {} tokens",
                store.get(shared.embed).rows(),
                vocab.len()
            )));
        }
        let private = Generator::attach(&store, PRIVATE).ok();
        let metric = MetricParams::attach(&store, METRIC, KernelBank::default())?;
        let discriminator = Classifier::attach(&store, DISCRIMINATOR).ok();
        let predictor = Classifier::attach(&store, PREDICTOR).ok();
        Ok(Self {
            config: snap.config,
            vocab,
            store,
            shared,
            private,
            metric,
            discriminator,
            predictor,
            version: snap.version,
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}
