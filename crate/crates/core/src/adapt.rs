//! Adversarial fine-tuning toward an external source: a private generator
//! for external items, a domain discriminator behind gradient reversal, an
//! orthogonality penalty between shared and private features and an
//! external task predictor.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_triplets, Corpus, ExternalMention, Source, SupportInfo};
use crate::diffcore::{uniform_init, xavier_limit, Adam, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::encoder::Generator;
use crate::error::{Error, Result};
use crate::eval::discriminator_probe;
use crate::metric::LEAKY_SLOPE;
use crate::model::{Model, DISCRIMINATOR, PREDICTOR, PRIVATE, SHARED};
use crate::pretrain::{
    accumulate_triplets, epoch_rng, TokenTriplet, TokenizedCorpus, TrainConfig, ENCODER_GROUP, METRIC_GROUP,
};

pub const CLASSIFIER_GROUP: &str = "classifier";
/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;
const REFERENCE_CLASS: usize = 0;
const EXTERNAL_CLASS: usize = 1;

/// Two-layer map `W₂ᵀ leaky_relu(W₁ᵀ x)` producing logits over
/// {reference, external}. Used both as the domain discriminator on shared
/// features and as the external task predictor on private features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Classifier {
    pub hidden: ParamId,
    pub output: ParamId,
}

impl Classifier {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = store.add(
            &format!("{prefix}.w1"),
            &[d_in, d_hidden],
            uniform_init(rng, d_in * d_hidden, xavier_limit(d_in, d_hidden)),
        )?;
        let output = store.add(
            &format!("{prefix}.w2"),
            &[d_hidden, 2],
            uniform_init(rng, d_hidden * 2, xavier_limit(d_hidden, 2)),
        )?;
        Ok(Self { hidden, output })
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::NotFound(format!("parameter `{prefix}.{suffix}`")))
        };
        Ok(Self {
            hidden: find("w1")?,
            output: find("w2")?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.hidden, self.output]
    }

    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = g.linear(self.hidden, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        g.linear(self.output, h)
    }

    /// Clamped `ln P(class)`.
    fn log_prob(&self, g: &mut Graph<'_>, x: Var, class: usize) -> Result<Var> {
        let z = self.logits(g, x)?;
        let p = g.softmax_prob(z, class)?;
        Ok(g.log_clamped(p, P_CLAMP, 1.0 - P_CLAMP))
    }

    /// Probability that `x` comes from the reference source.
    pub fn reference_prob(&self, store: &ParamStore, x: &[f64]) -> Result<f64> {
        let mut g = Graph::new(store);
        let v = g.input(x.to_vec());
        let z = self.logits(&mut g, v)?;
        let p = g.softmax_prob(z, REFERENCE_CLASS)?;
        Ok(g.scalar_value(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size_ext: usize,
    pub epochs: usize,
    pub lr_disc: f64,
    /// Learning rate of both generators during adaptation. Much smaller
    /// than `lr_disc` so the discriminator tracks the moving features.
    pub lr_encoder: f64,
    pub seed: u64,
    /// Items per domain in the before/after probe.
    pub probe_items: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            batch_size_ext: 256,
            epochs: 1,
            lr_disc: 1e-3,
            lr_encoder: 2e-5,
            seed: 0,
            probe_items: 500,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative weight")));
            }
        }
        if self.batch_size_ext == 0 || !(self.lr_disc > 0.0) || !(self.lr_encoder > 0.0) {
            return Err(Error::InvalidArgument(
                "batch_size_ext and learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Σᵢ (sharedᵢ · privateᵢ)².
pub fn difference_loss(g: &mut Graph<'_>, shared: &[Var], private: &[Var]) -> Result<Var> {
    if shared.len() != private.len() {
        return Err(Error::InvalidArgument(format!(
            "{} shared but {} private embeddings",
            shared.len(),
            private.len()
        )));
    }
    let terms = shared
        .iter()
        .zip(private)
        .map(|(&s, &p)| {
            let d = g.dot(s, p)?;
            g.mul(d, d)
        })
        .collect::<Result<Vec<_>>>()?;
    g.sum_all(&terms)
}

fn class_of(domain: Source) -> usize {
    match domain {
        Source::Reference => REFERENCE_CLASS,
        Source::External => EXTERNAL_CLASS,
    }
}

/// Mean binary cross-entropy of the discriminator on shared embeddings
/// routed through gradient reversal: the discriminator descends the loss
/// while the generator below the reversal ascends it.
pub fn adversarial_loss(g: &mut Graph<'_>, disc: &Classifier, items: &[(Var, Source)]) -> Result<Var> {
    let has = |d: Source| items.iter().any(|(_, s)| *s == d);
    if !has(Source::Reference) || !has(Source::External) {
        return Err(Error::InvalidArgument(
            "the adversarial batch must contain both domains".into(),
        ));
    }
    let terms = items
        .iter()
        .map(|&(x, d)| {
            let r = g.grad_reverse(x, 1.0);
            disc.log_prob(g, r, class_of(d))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = g.sum_all(&terms)?;
    Ok(g.scale(total, -1.0 / items.len() as f64))
}

/// Mean of `−ln(1 − p̂)` where p̂ is the predictor's reference probability
/// on private embeddings of external items.
pub fn external_task_loss(g: &mut Graph<'_>, pred: &Classifier, private: &[Var]) -> Result<Var> {
    if private.is_empty() {
        return Err(Error::InvalidArgument("the external batch is empty".into()));
    }
    let terms = private
        .iter()
        .map(|&x| pred.log_prob(g, x, EXTERNAL_CLASS))
        .collect::<Result<Vec<_>>>()?;
    let total = g.sum_all(&terms)?;
    Ok(g.scale(total, -1.0 / private.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub pre: f64,
    pub adv: f64,
    pub diff: f64,
    pub ext: f64,
    pub total: f64,
}

/// Give the model a private generator copied from the shared one and fresh
/// discriminator and predictor heads. Existing ones are kept.
pub fn prepare(model: &mut Model, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model.private.is_none() {
        let (vocab, d_tok, d_out) = (model.vocab.len(), model.shared.d_tok, model.shared.d_out);
        let private = Generator::init(&mut model.store, PRIVATE, vocab, d_tok, d_out, &mut rng)?;
        let snapshot = model.store.clone();
        model
            .store
            .copy_values_from(&snapshot, &format!("{SHARED}."), &format!("{PRIVATE}."))?;
        model.private = Some(private);
    }
    let (d_out, hidden) = (model.shared.d_out, model.config.classifier_hidden);
    if model.discriminator.is_none() {
        model.discriminator = Some(Classifier::init(&mut model.store, DISCRIMINATOR, d_out, hidden, &mut rng)?);
    }
    if model.predictor.is_none() {
        model.predictor = Some(Classifier::init(&mut model.store, PREDICTOR, d_out, hidden, &mut rng)?);
    }
    Ok(())
}

pub fn optimizer(model: &Model, train: &TrainConfig, cfg: &AdaptConfig) -> Adam {
    let groups = vec![
        ParamGroup {
            name: ENCODER_GROUP.into(),
            params: model.encoder_params(),
            base_lr: cfg.lr_encoder,
        },
        ParamGroup {
            name: METRIC_GROUP.into(),
            params: model.metric_params(),
            base_lr: train.lr_metric,
        },
        ParamGroup {
            name: CLASSIFIER_GROUP.into(),
            params: model.classifier_params(),
            base_lr: cfg.lr_disc,
        },
    ];
    Adam::new(train.adam(), groups, &model.store)
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} loss is {v}")))
    }
}

/// One combined update: triplet loss on `triplets` through the shared
/// generator, the adversarial loss on `mixed`, and the difference and
/// external losses on `external`. Components with zero weight are
/// evaluated and reported but contribute no gradient.
pub fn finetune_step(
    model: &mut Model,
    opt: &mut Adam,
    triplets: &[TokenTriplet],
    mixed: &[(Vec<u32>, Source)],
    external: &[Vec<u32>],
    train: &TrainConfig,
    cfg: &AdaptConfig,
) -> Result<StepLosses> {
    if triplets.is_empty() || mixed.is_empty() || external.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning batches must be non-empty".into()));
    }
    let (private, disc, pred) = match (&model.private, &model.discriminator, &model.predictor) {
        (Some(p), Some(d), Some(h)) => (p.clone(), d.clone(), h.clone()),
        _ => {
            return Err(Error::InvalidArgument(
                "model has no private generator or adaptation heads; call prepare first".into(),
            ))
        }
    };
    model.store.zero_grads();
    let sums = accumulate_triplets(model, triplets, train.margin, 1.0)?;
    let pre = sums.loss / triplets.len() as f64;
    check_finite("pre-training", pre)?;

    let (adv, diff, ext, grads) = {
        let mut g = Graph::new(&model.store);
        let mut labeled = Vec::with_capacity(mixed.len());
        for (tokens, domain) in mixed {
            labeled.push((model.shared.encode(&mut g, tokens)?, *domain));
        }
        let adv = adversarial_loss(&mut g, &disc, &labeled)?;
        let mut shared = Vec::with_capacity(external.len());
        let mut priv_embs = Vec::with_capacity(external.len());
        for tokens in external {
            shared.push(model.shared.encode(&mut g, tokens)?);
            priv_embs.push(private.encode(&mut g, tokens)?);
        }
        let diff_sum = difference_loss(&mut g, &shared, &priv_embs)?;
        let diff = g.scale(diff_sum, 1.0 / external.len() as f64);
        let ext = external_task_loss(&mut g, &pred, &priv_embs)?;
        let values = (g.scalar_value(adv), g.scalar_value(diff), g.scalar_value(ext));
        check_finite("adversarial", values.0)?;
        check_finite("difference", values.1)?;
        check_finite("external", values.2)?;
        let mut parts = Vec::new();
        for (w, v) in [(cfg.alpha, adv), (cfg.beta, diff), (cfg.gamma, ext)] {
            if w != 0.0 {
                parts.push(g.scale(v, w));
            }
        }
        let grads = if parts.is_empty() {
            None
        } else {
            let aux = g.sum_all(&parts)?;
            Some(g.backward(aux)?)
        };
        (values.0, values.1, values.2, grads)
    };
    if let Some(grads) = grads {
        model.store.accumulate(&grads);
    }
    opt.step(&mut model.store)?;
    Ok(StepLosses {
        step: opt.steps() as usize,
        pre,
        adv,
        diff,
        ext,
        total: pre + cfg.alpha * adv + cfg.beta * diff + cfg.gamma * ext,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub probe_before: f64,
    pub probe_after: f64,
    pub steps: Vec<StepLosses>,
}

/// Labeled probe set: up to `n` reference and `n` external items, chosen
/// with a seeded shuffle.
pub fn probe_set(corpus: &Corpus, external: &[ExternalMention], n: usize, seed: u64) -> Vec<(SupportInfo, Source)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refs: Vec<&SupportInfo> = corpus.experts().iter().flat_map(|e| &e.support).collect();
    let mut exts: Vec<&SupportInfo> = external.iter().flat_map(|m| &m.support).collect();
    refs.shuffle(&mut rng);
    exts.shuffle(&mut rng);
    refs.iter()
        .take(n)
        .map(|s| ((*s).clone(), Source::Reference))
        .chain(exts.iter().take(n).map(|s| ((*s).clone(), Source::External)))
        .collect()
}

/// Adapt a pre-trained model toward `external` and report the domain probe
/// on shared features before and after.
pub fn finetune(
    model: &Model,
    corpus: &Corpus,
    external: &[ExternalMention],
    train: &TrainConfig,
    cfg: &AdaptConfig,
) -> Result<(Model, FinetuneReport)> {
    finetune_with_log(model, corpus, external, train, cfg, |_| Ok(()))
}

pub fn finetune_with_log<F>(
    model: &Model,
    corpus: &Corpus,
    external: &[ExternalMention],
    train: &TrainConfig,
    cfg: &AdaptConfig,
    mut on_step: F,
) -> Result<(Model, FinetuneReport)>
where
    F: FnMut(&StepLosses) -> Result<()>,
{
    train.validate()?;
    cfg.validate()?;
    let ext_items: Vec<&SupportInfo> = external.iter().flat_map(|m| &m.support).collect();
    if ext_items.is_empty() {
        return Err(Error::InvalidArgument("the external corpus is empty".into()));
    }
    let probe = probe_set(corpus, external, cfg.probe_items, cfg.seed);
    let probe_before = discriminator_probe(model, &probe, cfg.seed)?;
    if cfg.epochs == 0 {
        let report = FinetuneReport {
            probe_before,
            probe_after: probe_before,
            steps: Vec::new(),
        };
        return Ok((model.clone(), report));
    }

    let mut current = model.clone();
    prepare(&mut current, cfg.seed)?;
    let tokens = TokenizedCorpus::new(&current, corpus)?;
    let ext_tokens = ext_items
        .iter()
        .map(|s| current.tokens(s))
        .collect::<Result<Vec<_>>>()?;
    let ref_tokens: Vec<Vec<u32>> = corpus
        .experts()
        .iter()
        .flat_map(|e| &e.support)
        .map(|s| current.tokens(s))
        .collect::<Result<_>>()?;
    let mut opt = optimizer(&current, train, cfg);
    let mut steps = Vec::new();
    // Streams above the pre-training epoch range keep the draws independent.
    const STREAM_BASE: u64 = 1 << 32;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, STREAM_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..ext_tokens.len()).collect();
        order.shuffle(&mut rng);
        let n_steps = order.len().div_ceil(cfg.batch_size_ext);
        let needed = n_steps * train.batch_size;
        let per_expert = needed.div_ceil(corpus.len()).max(1);
        let mut triplets = sample_triplets(corpus, train.cap, train.n_neg, per_expert, &mut rng)?;
        triplets.shuffle(&mut rng);
        for (k, chunk) in order.chunks(cfg.batch_size_ext).enumerate() {
            let external_batch: Vec<Vec<u32>> = chunk.iter().map(|&i| ext_tokens[i].clone()).collect();
            let mut mixed: Vec<(Vec<u32>, Source)> = (0..chunk.len())
                .map(|_| (ref_tokens.choose(&mut rng).expect("non-empty corpus").clone(), Source::Reference))
                .collect();
            mixed.extend(external_batch.iter().map(|t| (t.clone(), Source::External)));
            let lo = (k * train.batch_size) % triplets.len();
            let batch: Vec<TokenTriplet> = (0..train.batch_size)
                .map(|j| tokens.triplet(&triplets[(lo + j) % triplets.len()]))
                .collect::<Result<_>>()?;
            let losses = finetune_step(&mut current, &mut opt, &batch, &mixed, &external_batch, train, cfg)?;
            tracing::info!(step = losses.step, total = losses.total, "finetune step");
            on_step(&losses)?;
            steps.push(losses);
        }
        opt.end_epoch();
    }
    current.store.zero_grads();
    current.version = model.version + 1;
    let probe_after = discriminator_probe(&current, &probe, cfg.seed)?;
    Ok((
        current,
        FinetuneReport {
            probe_before,
            probe_after,
            steps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Expert;
    use crate::diffcore::finite_diff_check;
    use crate::encoder::Vocab;
    use crate::model::ModelConfig;
    use crate::pretrain::pretrain_step;

    fn paper(words: &str) -> SupportInfo {
        SupportInfo::paper(words, &[], &[], "", "", None).unwrap()
    }

    /// Four experts with disjoint topics plus news mentions of each, written
    /// with extra news-only words.
    fn toy() -> (Model, Corpus, Vec<ExternalMention>) {
        let topics = [["apple", "pear"], ["stone", "rock"], ["river", "lake"], ["cloud", "rain"]];
        let experts: Vec<Expert> = topics
            .iter()
            .enumerate()
            .map(|(i, t)| Expert {
                id: format!("e{i}"),
                name: format!("Person {i}"),
                support: (0..6)
                    .map(|k| paper(&format!("{} {} common{}", t[k % 2], t[(k + 1) % 2], k % 3)))
                    .collect(),
                source: Source::Reference,
            })
            .collect();
        let corpus = Corpus::new(experts).unwrap();
        let mentions: Vec<ExternalMention> = topics
            .iter()
            .enumerate()
            .map(|(i, t)| ExternalMention {
                mention_id: format!("m{i}"),
                name: format!("Person {i}"),
                support: (0..3)
                    .map(|k| SupportInfo::sentence(&format!("reported {} today {}", t[k % 2], ["said", "told", "wrote"][k])).unwrap())
                    .collect(),
                truth_expert_id: Some(format!("e{i}")),
            })
            .collect();
        let vocab = Vocab::build(
            corpus
                .experts()
                .iter()
                .flat_map(|e| &e.support)
                .chain(mentions.iter().flat_map(|m| &m.support)),
            1,
        )
        .unwrap();
        let config = ModelConfig {
            d_tok: 6,
            d_out: 5,
            classifier_hidden: 4,
            ..ModelConfig::default()
        };
        (Model::init(vocab, config, 1).unwrap(), corpus, mentions)
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            cap: 2,
            n_neg: 2,
            batch_size: 2,
            anchors_per_expert: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn adapt_cfg() -> AdaptConfig {
        AdaptConfig {
            batch_size_ext: 4,
            probe_items: 8,
            lr_encoder: 1e-2,
            ..AdaptConfig::default()
        }
    }

    fn unit(g: &mut Graph<'_>, v: &[f64]) -> Var {
        g.input(v.to_vec())
    }

    #[test]
    fn difference_loss_hand_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let cases = [
            (vec![1.0, 0.0], vec![0.0, 1.0], 0.0),
            (vec![1.0, 0.0], vec![1.0, 0.0], 1.0),
            // (0.6·0.8 + 0.8·0.6)² = 0.96² = 0.9216
            (vec![0.6, 0.8], vec![0.8, 0.6], 0.9216),
        ];
        for (a, b, want) in cases {
            let (s, p) = (unit(&mut g, &a), unit(&mut g, &b));
            let d = difference_loss(&mut g, &[s], &[p]).unwrap();
            assert!((g.scalar_value(d) - want).abs() < 1e-12);
        }
        let s = unit(&mut g, &[1.0, 0.0]);
        assert!(difference_loss(&mut g, &[s], &[]).is_err());
    }

    /// A classifier whose output layer is zero predicts 0.5 for both classes.
    fn flat_classifier(store: &mut ParamStore, prefix: &str) -> Classifier {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Classifier::init(store, prefix, 3, 4, &mut rng).unwrap();
        store.get_mut(c.output).values.fill(0.0);
        c
    }

    #[test]
    fn even_odds_give_ln_two() {
        let mut store = ParamStore::new();
        let disc = flat_classifier(&mut store, "d");
        let pred = flat_classifier(&mut store, "p");
        let mut g = Graph::new(&store);
        let a = unit(&mut g, &[0.1, 0.2, 0.3]);
        let b = unit(&mut g, &[-0.5, 0.0, 0.4]);
        let adv = adversarial_loss(&mut g, &disc, &[(a, Source::Reference), (b, Source::External)]).unwrap();
        let ext = external_task_loss(&mut g, &pred, &[a, b]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.scalar_value(adv) - ln2).abs() < 1e-12);
        assert!((g.scalar_value(ext) - ln2).abs() < 1e-12);
        assert!((disc.reference_prob(&store, &[0.1, 0.2, 0.3]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_batch_needs_both_domains() {
        let mut store = ParamStore::new();
        let disc = flat_classifier(&mut store, "d");
        let pred = flat_classifier(&mut store, "p");
        let mut g = Graph::new(&store);
        let a = unit(&mut g, &[0.1, 0.2, 0.3]);
        assert!(adversarial_loss(&mut g, &disc, &[(a, Source::Reference)]).is_err());
        assert!(external_task_loss(&mut g, &pred, &[]).is_err());
    }

    fn encoded_adv(model: &Model, g: &mut Graph<'_>, items: &[(Vec<u32>, Source)]) -> Result<Var> {
        let disc = model.discriminator.clone().unwrap();
        let labeled = items
            .iter()
            .map(|(t, d)| Ok((model.shared.encode(g, t)?, *d)))
            .collect::<Result<Vec<_>>>()?;
        adversarial_loss(g, &disc, &labeled)
    }

    fn mixed_tokens(model: &Model, corpus: &Corpus, mentions: &[ExternalMention]) -> Vec<(Vec<u32>, Source)> {
        let r = corpus.experts()[0].support.iter().take(2).map(|s| (model.tokens(s).unwrap(), Source::Reference));
        let e = mentions[1].support.iter().take(2).map(|s| (model.tokens(s).unwrap(), Source::External));
        r.chain(e).collect()
    }

    #[test]
    fn reversal_negates_generator_gradient_only() {
        let (mut model, corpus, mentions) = toy();
        prepare(&mut model, 2).unwrap();
        let items = mixed_tokens(&model, &corpus, &mentions);
        let grads = {
            let mut g = Graph::new(&model.store);
            let loss = encoded_adv(&model, &mut g, &items).unwrap();
            g.backward(loss).unwrap()
        };
        let value = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let loss = encoded_adv(&model, &mut g, &items).unwrap();
            g.scalar_value(loss)
        };
        let eps = 1e-6;
        let mut store = model.store.clone();
        let mut checked = 0;
        for (ids, sign) in [(model.shared.param_ids(), -1.0), (model.classifier_params()[..2].to_vec(), 1.0)] {
            for id in ids {
                let n = store.get(id).values.len();
                let analytic = grads.param(id).map_or_else(|| vec![0.0; n], |p| p.to_dense(n));
                for i in (0..n).step_by(7) {
                    let orig = store.get(id).values[i];
                    store.get_mut(id).values[i] = orig + eps;
                    let plus = value(&store);
                    store.get_mut(id).values[i] = orig - eps;
                    let minus = value(&store);
                    store.get_mut(id).values[i] = orig;
                    let numeric = sign * (plus - minus) / (2.0 * eps);
                    let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
                    assert!(err < 1e-4, "{} [{i}]: {} vs {numeric}", store.get(id).name, analytic[i]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn combined_losses_match_finite_differences() {
        let (mut model, _, mentions) = toy();
        prepare(&mut model, 2).unwrap();
        let ext: Vec<Vec<u32>> = mentions[2].support.iter().map(|s| model.tokens(s).unwrap()).collect();
        let private = model.private.clone().unwrap();
        let pred = model.predictor.clone().unwrap();
        // A fresh private copy equals the shared generator, where the
        // difference gradient vanishes; move it off that point.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for id in private.param_ids() {
            for v in &mut model.store.get_mut(id).values {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let ids: Vec<_> = private.param_ids().into_iter().chain(pred.param_ids()).chain(model.shared.param_ids()).collect();
        let m = model.clone();
        let err = finite_diff_check(&mut model.store, &ids, 1e-6, |g| {
            let mut s = Vec::new();
            let mut p = Vec::new();
            for t in &ext {
                s.push(m.shared.encode(g, t)?);
                p.push(private.encode(g, t)?);
            }
            let d = difference_loss(g, &s, &p)?;
            let e = external_task_loss(g, &pred, &p)?;
            let d = g.scale(d, 0.3);
            g.add(d, e)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn step_batches(model: &Model, corpus: &Corpus, mentions: &[ExternalMention]) -> (Vec<TokenTriplet>, Vec<(Vec<u32>, Source)>, Vec<Vec<u32>>) {
        let tokens = TokenizedCorpus::new(model, corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let triplets = sample_triplets(corpus, 2, 2, 1, &mut rng)
            .unwrap()
            .iter()
            .take(2)
            .map(|t| tokens.triplet(t).unwrap())
            .collect();
        let mixed = mixed_tokens(model, corpus, mentions);
        let external = mentions[0].support.iter().map(|s| model.tokens(s).unwrap()).collect();
        (triplets, mixed, external)
    }

    #[test]
    fn zero_weights_reduce_to_a_pretraining_step() {
        let (mut model, corpus, mentions) = toy();
        prepare(&mut model, 2).unwrap();
        let (triplets, mixed, external) = step_batches(&model, &corpus, &mentions);
        let train = train_cfg();
        let cfg = AdaptConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lr_encoder: train.lr_encoder,
            ..adapt_cfg()
        };
        let mut a = model.clone();
        let mut opt_a = optimizer(&a, &train, &cfg);
        let losses = finetune_step(&mut a, &mut opt_a, &triplets, &mixed, &external, &train, &cfg).unwrap();
        let mut b = model.clone();
        let mut opt_b = train.optimizer(&b);
        let (pre, _, _) = pretrain_step(&mut b, &mut opt_b, &triplets, train.margin).unwrap();
        assert_eq!(losses.pre.to_bits(), pre.to_bits());
        assert_eq!(losses.total.to_bits(), pre.to_bits());
        for id in a.store.ids() {
            let (x, y) = (&a.store.get(id).values, &b.store.get(id).values);
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "{}", a.store.get(id).name);
        }
        assert!(a.discriminator.is_some());
    }

    #[test]
    fn total_is_weighted_sum_and_steps_are_deterministic() {
        let (mut model, corpus, mentions) = toy();
        prepare(&mut model, 2).unwrap();
        let (triplets, mixed, external) = step_batches(&model, &corpus, &mentions);
        let train = train_cfg();
        let cfg = AdaptConfig {
            alpha: 0.3,
            beta: 0.5,
            gamma: 0.7,
            ..adapt_cfg()
        };
        let run = || {
            let mut m = model.clone();
            let mut opt = optimizer(&m, &train, &cfg);
            let l = finetune_step(&mut m, &mut opt, &triplets, &mixed, &external, &train, &cfg).unwrap();
            (m, l)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        let want = l1.pre + 0.3 * l1.adv + 0.5 * l1.diff + 0.7 * l1.ext;
        assert!((l1.total - want).abs() <= 1e-12 * want.abs().max(1.0));
        assert!(l1.adv > 0.0 && l1.ext > 0.0 && l1.diff >= 0.0);
        assert_ne!(m1.store, model.store);
    }

    #[test]
    fn step_without_prepare_is_an_error() {
        let (model, corpus, mentions) = toy();
        let (triplets, mixed, external) = step_batches(&model, &corpus, &mentions);
        let mut m = model.clone();
        let mut opt = optimizer(&m, &train_cfg(), &adapt_cfg());
        assert!(finetune_step(&mut m, &mut opt, &triplets, &mixed, &external, &train_cfg(), &adapt_cfg()).is_err());
    }

    #[test]
    fn prepare_copies_shared_generator() {
        let (mut model, _, _) = toy();
        prepare(&mut model, 2).unwrap();
        let private = model.private.clone().unwrap();
        assert_eq!(model.store.get(private.embed).values, model.store.get(model.shared.embed).values);
        assert_eq!(model.store.get(private.proj).values, model.store.get(model.shared.proj).values);
        let before = model.clone();
        prepare(&mut model, 9).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn zero_epochs_return_the_model_unchanged() {
        let (model, corpus, mentions) = toy();
        let cfg = AdaptConfig {
            epochs: 0,
            ..adapt_cfg()
        };
        let (out, report) = finetune(&model, &corpus, &mentions, &train_cfg(), &cfg).unwrap();
        assert_eq!(out, model);
        assert!(report.steps.is_empty());
        assert_eq!(report.probe_before, report.probe_after);
    }

    #[test]
    fn finetune_is_deterministic_and_bumps_version() {
        let (model, corpus, mentions) = toy();
        let (a, ra) = finetune(&model, &corpus, &mentions, &train_cfg(), &adapt_cfg()).unwrap();
        let (b, rb) = finetune(&model, &corpus, &mentions, &train_cfg(), &adapt_cfg()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(a.version, model.version + 1);
        assert_eq!(ra.steps.len(), 3);
        assert!(a.private.is_some());
    }

    #[test]
    fn empty_external_corpus_is_an_error() {
        let (model, corpus, _) = toy();
        assert!(finetune(&model, &corpus, &[], &train_cfg(), &adapt_cfg()).is_err());
        let bad = AdaptConfig {
            alpha: -1.0,
            ..adapt_cfg()
        };
        assert!(bad.validate().is_err());
    }
}
