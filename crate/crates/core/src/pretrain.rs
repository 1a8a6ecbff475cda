//! Expert-discrimination pre-training with a triplet hinge over sampled
//! instances.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_triplets, Corpus, ExpertInstance, TripletBatch};
use crate::diffcore::{Adam, AdamConfig, Graph, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::model::Model;

pub const ENCODER_GROUP: &str = "encoder";
pub const METRIC_GROUP: &str = "metric";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Instance cap `L`.
    pub cap: usize,
    pub n_neg: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_metric: f64,
    pub decay: f64,
    pub seed: u64,
    /// Anchors drawn per eligible expert each epoch.
    pub anchors_per_expert: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cap: 6,
            n_neg: 9,
            margin: 1.0,
            batch_size: 32,
            epochs: 20,
            lr_encoder: 1e-2,
            lr_metric: 2e-3,
            decay: 0.96,
            seed: 0,
            anchors_per_expert: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cap", self.cap as f64),
            ("n_neg", self.n_neg as f64),
            ("batch_size", self.batch_size as f64),
            ("anchors_per_expert", self.anchors_per_expert as f64),
            ("lr_encoder", self.lr_encoder),
            ("lr_metric", self.lr_metric),
            ("decay", self.decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..2.0).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!(
                "margin must lie in [0, 2), got {}",
                self.margin
            )));
        }
        Ok(())
    }

    pub(crate) fn optimizer(&self, model: &Model) -> Adam {
        let groups = vec![
            ParamGroup {
                name: ENCODER_GROUP.into(),
                params: model.encoder_params(),
                base_lr: self.lr_encoder,
            },
            ParamGroup {
                name: METRIC_GROUP.into(),
                params: model.metric_params(),
                base_lr: self.lr_metric,
            },
        ];
        Adam::new(self.adam(), groups, &model.store)
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            decay: self.decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub violation_rates: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub violation_rate: f64,
}

/// Σ over negatives of `max(0, m + neg − pos)`.
pub fn triplet_loss(pos: f64, negs: &[f64], margin: f64) -> f64 {
    negs.iter().map(|n| (margin + n - pos).max(0.0)).sum()
}

/// Graph form of [`triplet_loss`].
pub fn triplet_loss_var(g: &mut Graph<'_>, pos: Var, negs: &[Var], margin: f64) -> Result<Var> {
    let hinges = negs
        .iter()
        .map(|&n| {
            let d = g.sub(n, pos)?;
            let d = g.add_scalar(d, margin);
            Ok(g.relu(d))
        })
        .collect::<Result<Vec<_>>>()?;
    g.sum_all(&hinges)
}

/// Token ids of every reference support item, indexed like the corpus.
#[derive(Clone, Debug)]
pub struct TokenizedCorpus {
    experts: Vec<Vec<Vec<u32>>>,
    index: HashMap<String, usize>,
}

impl TokenizedCorpus {
    pub fn new(model: &Model, corpus: &Corpus) -> Result<Self> {
        let experts = corpus
            .experts()
            .iter()
            .map(|e| e.support.iter().map(|s| model.tokens(s)).collect())
            .collect::<Result<Vec<_>>>()?;
        let index = corpus
            .experts()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Ok(Self { experts, index })
    }

    pub fn instance(&self, inst: &ExpertInstance) -> Result<Vec<Vec<u32>>> {
        let i = *self
            .index
            .get(&inst.expert_id)
            .ok_or_else(|| Error::NotFound(format!("expert `{}`", inst.expert_id)))?;
        inst.items
            .iter()
            .map(|&k| {
                self.experts[i].get(k).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "item {k} out of range for expert `{}`",
                        inst.expert_id
                    ))
                })
            })
            .collect()
    }

    pub fn triplet(&self, t: &TripletBatch) -> Result<TokenTriplet> {
        Ok(TokenTriplet {
            anchor: self.instance(&t.anchor)?,
            positive: self.instance(&t.positive)?,
            negatives: t.negatives.iter().map(|n| self.instance(n)).collect::<Result<_>>()?,
        })
    }
}

/// A triplet with every item already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTriplet {
    pub anchor: Vec<Vec<u32>>,
    pub positive: Vec<Vec<u32>>,
    pub negatives: Vec<Vec<Vec<u32>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct TripletSums {
    pub loss: f64,
    pub violations: usize,
    pub pairs: usize,
}

fn encode_all(model: &Model, g: &mut Graph<'_>, items: &[Vec<u32>]) -> Result<Vec<Var>> {
    items.iter().map(|t| model.shared.encode(g, t)).collect()
}

/// Score one triplet and return its loss node plus the positive and negative scores.
pub(crate) fn triplet_forward(
    model: &Model,
    g: &mut Graph<'_>,
    t: &TokenTriplet,
    margin: f64,
) -> Result<(Var, f64, Vec<f64>)> {
    let anchor = encode_all(model, g, &t.anchor)?;
    let positive = encode_all(model, g, &t.positive)?;
    let pos = model.metric.score(g, &anchor, &positive)?;
    let mut negs = Vec::with_capacity(t.negatives.len());
    for n in &t.negatives {
        let enc = encode_all(model, g, n)?;
        negs.push(model.metric.score(g, &anchor, &enc)?);
    }
    let loss = triplet_loss_var(g, pos, &negs, margin)?;
    let pos_v = g.scalar_value(pos);
    let neg_v = negs.iter().map(|&n| g.scalar_value(n)).collect();
    Ok((loss, pos_v, neg_v))
}

/// Accumulate `weight / batch` times the gradient of every triplet's loss
/// into the store, in batch order.
pub(crate) fn accumulate_triplets(
    model: &mut Model,
    batch: &[TokenTriplet],
    margin: f64,
    weight: f64,
) -> Result<TripletSums> {
    let mut sums = TripletSums::default();
    let scale = weight / batch.len() as f64;
    for (i, t) in batch.iter().enumerate() {
        let grads = {
            let mut g = Graph::new(&model.store);
            let (loss, pos, negs) = triplet_forward(model, &mut g, t, margin)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "triplet loss at batch position {i} is {value} (positive score {pos})"
                )));
            }
            sums.loss += value;
            sums.violations += negs.iter().filter(|&&n| margin + n - pos > 0.0).count();
            sums.pairs += negs.len();
            if weight == 0.0 || value == 0.0 {
                None
            } else {
                let scaled = g.scale(loss, scale);
                Some(g.backward(scaled)?)
            }
        };
        if let Some(grads) = grads {
            model.store.accumulate(&grads);
        }
    }
    Ok(sums)
}

/// One optimizer step on one minibatch; returns (mean loss, violations, pairs).
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[TokenTriplet],
    margin: f64,
) -> Result<(f64, usize, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    model.store.zero_grads();
    let sums = accumulate_triplets(model, batch, margin, 1.0)?;
    opt.step(&mut model.store)?;
    Ok((sums.loss / batch.len() as f64, sums.violations, sums.pairs))
}

/// Shuffle, split into minibatches and step through them once.
pub fn pretrain_epoch(
    model: &mut Model,
    opt: &mut Adam,
    triplets: &[TokenTriplet],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no triplets to train on".into()));
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(rng);
    let (mut loss, mut violations, mut pairs) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<TokenTriplet> = chunk.iter().map(|&i| triplets[i].clone()).collect();
        let (l, v, p) = pretrain_step(model, opt, &batch, cfg.margin)?;
        loss += l * batch.len() as f64;
        violations += v;
        pairs += p;
    }
    Ok((loss / triplets.len() as f64, violations as f64 / pairs.max(1) as f64))
}

/// Independent rng stream for one epoch of one run.
pub(crate) fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn pretrain(model: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    pretrain_with_log(model, corpus, cfg, |_| Ok(()))
}

/// Train for `cfg.epochs`, resampling triplets every epoch, and return the
/// lowest-loss snapshot. `on_epoch` sees each epoch's stats as they finish.
pub fn pretrain_with_log<F>(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, TrainHistory)>
where
    F: FnMut(&EpochStats) -> Result<()>,
{
    cfg.validate()?;
    let mut current = model.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((current, history));
    }
    let tokens = TokenizedCorpus::new(model, corpus)?;
    let mut opt = cfg.optimizer(&current);
    let mut best: Option<(f64, Model)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch as u64);
        let sampled = sample_triplets(corpus, cfg.cap, cfg.n_neg, cfg.anchors_per_expert, &mut rng)?;
        let triplets = sampled
            .iter()
            .map(|t| tokens.triplet(t))
            .collect::<Result<Vec<_>>>()?;
        let (loss, violation_rate) = pretrain_epoch(&mut current, &mut opt, &triplets, cfg, &mut rng)?;
        opt.end_epoch();
        history.losses.push(loss);
        history.violation_rates.push(violation_rate);
        tracing::info!(epoch, loss, violation_rate, "pretrain epoch");
        on_epoch(&EpochStats {
            epoch,
            loss,
            violation_rate,
        })?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, current.clone()));
        }
    }
    let (_, mut trained) = best.expect("at least one epoch ran");
    trained.store.zero_grads();
    trained.version = model.version + 1;
    Ok((trained, history))
}
