//! Author identification, paper clustering and a domain probe.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Source, SupportInfo};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub hr1: f64,
    pub hr3: f64,
    pub mrr: f64,
    pub n_queries: usize,
}

impl RankingReport {
    /// Summarize 1-based ranks of the true expert.
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("no queries to report".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::InvalidArgument("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        let hit = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            hr1: hit(1),
            hr3: hit(3),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            n_queries: ranks.len(),
        })
    }
}

/// Sort descending by score, ties by ascending id.
pub fn rank_scores(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
}

/// Embeddings of an expert's first `min(n, paper_cap)` support items.
pub fn candidate_embeddings(model: &Model, corpus: &Corpus, id: &str, paper_cap: usize) -> Result<Vec<Vec<f64>>> {
    if paper_cap == 0 {
        return Err(Error::InvalidArgument("paper_cap must be >= 1".into()));
    }
    let expert = corpus.expert(id)?;
    model.embed_all(expert.support.iter().take(paper_cap))
}

/// Memoized candidate embeddings for repeated scoring against one corpus.
pub struct CandidateCache<'a> {
    model: &'a Model,
    corpus: &'a Corpus,
    paper_cap: usize,
    cache: HashMap<String, Vec<Vec<f64>>>,
}

impl<'a> CandidateCache<'a> {
    pub fn new(model: &'a Model, corpus: &'a Corpus, paper_cap: usize) -> Self {
        Self {
            model,
            corpus,
            paper_cap,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, id: &str) -> Result<&[Vec<f64>]> {
        if !self.cache.contains_key(id) {
            let e = candidate_embeddings(self.model, self.corpus, id, self.paper_cap)?;
            self.cache.insert(id.to_string(), e);
        }
        Ok(&self.cache[id])
    }

    /// Score `query` (first metric argument) against each candidate and rank.
    pub fn rank(&mut self, query: &[Vec<f64>], candidates: &[String]) -> Result<Vec<(String, f64)>> {
        let mut scored = Vec::with_capacity(candidates.len());
        for c in candidates {
            let emb = self.get(c)?.to_vec();
            scored.push((c.clone(), self.model.score_embeddings(query, &emb)?));
        }
        Ok(rank_scores(scored))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationQuery {
    pub query_id: String,
    pub paper: SupportInfo,
    pub truth_id: String,
    pub candidates: Vec<String>,
}

pub fn author_identification(
    model: &Model,
    queries: &[IdentificationQuery],
    corpus: &Corpus,
    paper_cap: usize,
) -> Result<RankingReport> {
    let mut cache = CandidateCache::new(model, corpus, paper_cap);
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        if !q.candidates.contains(&q.truth_id) {
            return Err(Error::InvalidArgument(format!(
                "query `{}`: truth `{}` is not among its candidates",
                q.query_id, q.truth_id
            )));
        }
        let query = vec![model.embed(&q.paper)?];
        let ranked = cache.rank(&query, &q.candidates)?;
        let pos = ranked.iter().position(|(id, _)| *id == q.truth_id).expect("truth present");
        ranks.push(pos + 1);
    }
    RankingReport::from_ranks(&ranks)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average-linkage agglomerative clustering on Euclidean distance down to
/// `k` clusters. Among equally close pairs the one with the smallest
/// (lower, higher) cluster index merges first; clusters are indexed by
/// their smallest member. Labels are numbered in order of first appearance.
pub fn hac_cluster(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if k < 1 {
        return Err(Error::InvalidArgument("cluster count must be >= 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} items")));
    }
    // Sum of pairwise distances between live clusters, keyed by smallest member.
    let mut sum = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            sum[i][j] = d;
            sum[j][i] = d;
        }
    }
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut alive: Vec<bool> = vec![true; n];
    for _ in 0..n - k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for b in a + 1..n {
                if !alive[b] {
                    continue;
                }
                let avg = sum[a][b] / (members[a].len() * members[b].len()) as f64;
                if best.is_none_or(|(d, _, _)| avg < d) {
                    best = Some((avg, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two live clusters");
        for c in 0..n {
            if alive[c] && c != a && c != b {
                let s = sum[a][c] + sum[b][c];
                sum[a][c] = s;
                sum[c][a] = s;
            }
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        alive[b] = false;
    }
    let mut labels = vec![0; n];
    let mut next = BTreeMap::new();
    let owner: Vec<usize> = {
        let mut o = vec![0; n];
        for (c, m) in members.iter().enumerate() {
            for &i in m {
                o[i] = c;
            }
        }
        o
    };
    for i in 0..n {
        let fresh = next.len();
        labels[i] = *next.entry(owner[i]).or_insert(fresh);
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Pairwise precision, recall and F1 over all unordered item pairs. When
/// one side has no same-cluster pairs, its ratio is 1 if the other side has
/// none either and 0 otherwise.
pub fn pairwise_prf<A: Eq, B: Eq>(pred: &[A], truth: &[B]) -> Result<Prf> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction covers {} items but truth covers {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut both, mut same_pred, mut same_truth) = (0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let sp = pred[i] == pred[j];
            let st = truth[i] == truth[j];
            same_pred += sp as usize;
            same_truth += st as usize;
            both += (sp && st) as usize;
        }
    }
    let ratio = |num: usize, den: usize, other: usize| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => num as f64 / den as f64,
    };
    let p = ratio(both, same_pred, same_truth);
    let r = ratio(both, same_truth, same_pred);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok(Prf { p, r, f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub n_names: usize,
}

impl ClusterReport {
    /// Arithmetic mean of each metric across names.
    pub fn macro_average(per_name: &[Prf]) -> Result<Self> {
        if per_name.is_empty() {
            return Err(Error::InvalidArgument("no names to report".into()));
        }
        let n = per_name.len() as f64;
        Ok(Self {
            p: per_name.iter().map(|x| x.p).sum::<f64>() / n,
            r: per_name.iter().map(|x| x.r).sum::<f64>() / n,
            f1: per_name.iter().map(|x| x.f1).sum::<f64>() / n,
            n_names: per_name.len(),
        })
    }
}

/// Papers sharing one ambiguous name, with their true author ids.
#[derive(Clone, Debug, PartialEq)]
pub struct NameBlock {
    pub name: String,
    pub papers: Vec<SupportInfo>,
    pub truth: Vec<String>,
}

pub fn paper_clustering_eval(model: &Model, names: &[NameBlock]) -> Result<ClusterReport> {
    let mut per_name = Vec::with_capacity(names.len());
    for block in names {
        if block.papers.len() < 2 || block.papers.len() != block.truth.len() {
            return Err(Error::InvalidArgument(format!(
                "name `{}` needs at least two papers with one truth label each",
                block.name
            )));
        }
        let k = block.truth.iter().collect::<BTreeSet<_>>().len();
        let emb = model.embed_all(&block.papers)?;
        let pred = hac_cluster(&emb, k)?;
        per_name.push(pairwise_prf(&pred, &block.truth)?);
    }
    ClusterReport::macro_average(&per_name)
}

const PROBE_TRAIN_FRACTION: f64 = 0.7;
const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

/// Held-out accuracy of a logistic-regression probe predicting the domain
/// of each embedding. The split is stratified and seeded.
pub fn probe_accuracy(embeddings: &[Vec<f64>], domains: &[Source], seed: u64) -> Result<f64> {
    if embeddings.len() != domains.len() {
        return Err(Error::InvalidArgument("one domain label per embedding required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for dom in [Source::Reference, Source::External] {
        let mut idx: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == dom).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "the probe needs at least two {dom:?} items"
            )));
        }
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64 * PROBE_TRAIN_FRACTION).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    let d = embeddings[0].len();
    let label = |i: usize| if domains[i] == Source::External { 1.0 } else { 0.0 };
    // Inverse-frequency weights keep an imbalanced probe set from
    // rewarding the majority class.
    let n_ext = train.iter().filter(|&&i| label(i) == 1.0).count() as f64;
    let n_ref = train.len() as f64 - n_ext;
    let weight = |i: usize| if label(i) == 1.0 { 0.5 / n_ext } else { 0.5 / n_ref };
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..PROBE_ITERS {
        let mut gw: Vec<f64> = w.iter().map(|x| PROBE_L2 * x).collect();
        let mut gb = 0.0;
        for &i in &train {
            let z = b + w.iter().zip(&embeddings[i]).map(|(a, x)| a * x).sum::<f64>();
            let err = (1.0 / (1.0 + (-z).exp()) - label(i)) * weight(i);
            for (g, x) in gw.iter_mut().zip(&embeddings[i]) {
                *g += err * x;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * g * d as f64;
        }
        b -= PROBE_LR * gb;
    }
    // Balanced accuracy, so chance is 0.5 whatever the class ratio.
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for &i in &test {
        let z = b + w.iter().zip(&embeddings[i]).map(|(a, x)| a * x).sum::<f64>();
        let c = label(i) as usize;
        total[c] += 1;
        correct[c] += ((z > 0.0) as usize == c) as usize;
    }
    Ok((correct[0] as f64 / total[0] as f64 + correct[1] as f64 / total[1] as f64) / 2.0)
}

/// Probe accuracy on shared-generator embeddings of labeled support items.
pub fn discriminator_probe(model: &Model, labeled: &[(SupportInfo, Source)], seed: u64) -> Result<f64> {
    let emb = model.embed_all(labeled.iter().map(|(s, _)| s))?;
    let domains: Vec<Source> = labeled.iter().map(|(_, d)| *d).collect();
    probe_accuracy(&emb, &domains, seed)
}
