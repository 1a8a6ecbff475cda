//! Desk-scale synthetic corpora: experts with dominant private topic
//! vocabularies, colliding names, held-out query papers and news-style
//! external mentions whose wording can drift from the paper vocabulary.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_name_variants, news_mention, write_jsonl, Corpus, Expert, ExternalMention, NewsRecord,
    PaperRecord, Source,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_experts: usize,
    pub papers_per_expert: usize,
    /// Held-out papers per expert, used as identification queries.
    pub queries_per_expert: usize,
    /// Size of each expert's private topic vocabulary.
    pub vocab_topics: usize,
    /// Fraction of title tokens drawn from a pool shared by all experts.
    pub overlap: f64,
    /// Experts per colliding name.
    pub name_group: usize,
    pub mentions_per_expert: usize,
    pub sentences_per_mention: usize,
    /// Probability that a word of an external sentence is a topic word.
    pub ext_topic_share: f64,
    /// External-domain vocabulary shift in [0, 1]: scales the number of
    /// news-only style words added to each external sentence.
    pub shift: f64,
    /// Probability that an external topic word appears in an inflected
    /// surface form unseen in the reference corpus.
    pub morph: f64,
    /// Style words per external sentence at full shift.
    pub style_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_experts: 50,
            papers_per_expert: 24,
            queries_per_expert: 4,
            vocab_topics: 200,
            overlap: 0.3,
            name_group: 18,
            mentions_per_expert: 4,
            sentences_per_mention: 10,
            ext_topic_share: 0.5,
            shift: 0.0,
            morph: 0.0,
            style_words: 4,
            seed: 0,
        }
    }
}

const TITLE_LEN: usize = 12;
const SENTENCE_LEN: usize = 12;
const KEYWORDS: usize = 3;
const COAUTHORS: usize = 2;
const COMMON_POOL: usize = 300;
const NEWS_POOL: usize = 300;
const N_ORGS: usize = 10;
const N_VENUES: usize = 20;
const ZIPF_EXPONENT: f64 = 1.0;

const GIVEN: [&str; 24] = [
    "bo", "wei", "jun", "xin", "hai", "yu", "lin", "tao", "ming", "jie", "hong", "ping", "ana", "lena",
    "omar", "ravi", "sara", "ivan", "noor", "kai", "emil", "rosa", "hugo", "mila",
];
const SURNAMES: [&str; 24] = [
    "li", "wang", "zhang", "liu", "chen", "yang", "zhao", "huang", "zhou", "wu", "xu", "sun", "hu",
    "zhu", "gao", "lin", "he", "guo", "ma", "luo", "silva", "novak", "khan", "berg",
];

/// A held-out paper whose author is known, with the candidates to rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    #[serde(flatten)]
    pub paper: PaperRecord,
    pub truth_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

/// All papers published under one ambiguous name with their true authors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name: String,
    pub papers: Vec<PaperRecord>,
    pub truth: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub reference: Corpus,
    pub queries: Vec<QueryRecord>,
    pub names: Vec<NameRecord>,
    pub news: Vec<NewsRecord>,
}

impl SynthCorpus {
    pub fn mentions(&self) -> Result<Vec<ExternalMention>> {
        self.news.iter().cloned().map(news_mention).collect()
    }

    /// Write `reference.jsonl`, `queries.jsonl`, `names.jsonl` and `news.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::corpus::save_reference(&self.reference, &dir.join("reference.jsonl"))?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("names.jsonl"), &self.names)?;
        write_jsonl(&dir.join("news.jsonl"), &self.news)?;
        Ok(())
    }
}

struct Profile {
    id: String,
    name: String,
    topic: Vec<String>,
    org: String,
    venues: Vec<String>,
    coauthors: Vec<String>,
}

fn zipf(n: usize) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new((0..n).map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT)))
        .map_err(|e| Error::InvalidArgument(format!("token distribution: {e}")))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Base names whose variant sets are pairwise disjoint.
fn distinct_names(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, String)>> {
    let mut all: Vec<(String, String)> = GIVEN
        .iter()
        .flat_map(|g| SURNAMES.iter().map(move |s| (g.to_string(), s.to_string())))
        .collect();
    all.shuffle(rng);
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for (g, s) in all {
        if out.len() == n {
            break;
        }
        let variants = generate_name_variants(&format!("{g} {s}"))?;
        if variants.iter().any(|v| used.contains(v)) {
            continue;
        }
        used.extend(variants);
        out.push((g, s));
    }
    if out.len() < n {
        return Err(Error::InvalidArgument(format!(
            "cannot generate {n} distinct colliding names; reduce n_experts or raise name_group"
        )));
    }
    Ok(out)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 2 {
            return Err(Error::InvalidArgument("n_experts must be >= 2".into()));
        }
        for (name, v) in [
            ("papers_per_expert", self.papers_per_expert),
            ("vocab_topics", self.vocab_topics),
            ("name_group", self.name_group),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("overlap", self.overlap),
            ("shift", self.shift),
            ("morph", self.morph),
            ("ext_topic_share", self.ext_topic_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_groups = cfg.n_experts.div_ceil(cfg.name_group);
    let bases = distinct_names(n_groups, &mut rng)?;
    let orgs: Vec<String> = (0..N_ORGS).map(|o| format!("org{o} university")).collect();
    let venues: Vec<String> = (0..N_VENUES).map(|v| format!("venue{v} conference")).collect();

    let profiles: Vec<Profile> = (0..cfg.n_experts)
        .map(|e| {
            let (g, s) = &bases[e / cfg.name_group];
            // Members of a group alternate between the two orderings; both
            // share one variant set.
            let name = if e % 2 == 0 {
                format!("{} {}", capitalize(g), capitalize(s))
            } else {
                format!("{} {}", capitalize(s), capitalize(g))
            };
            let coauthors = (0..6)
                .map(|_| {
                    format!(
                        "{} {}",
                        capitalize(GIVEN.choose(&mut rng).unwrap()),
                        capitalize(SURNAMES.choose(&mut rng).unwrap())
                    )
                })
                .collect();
            Profile {
                id: format!("expert{e:04}"),
                name,
                topic: (0..cfg.vocab_topics).map(|j| format!("t{e}w{j}")).collect(),
                org: orgs[rng.random_range(0..N_ORGS)].clone(),
                venues: venues.choose_multiple(&mut rng, 2).cloned().collect(),
                coauthors,
            }
        })
        .collect();

    let topic_dist = zipf(cfg.vocab_topics)?;
    let common_dist = zipf(COMMON_POOL)?;
    let news_dist = zipf(NEWS_POOL)?;

    let paper = |p: &Profile, rng: &mut ChaCha8Rng| -> PaperRecord {
        let title: Vec<String> = (0..TITLE_LEN)
            .map(|_| {
                if rng.random_bool(cfg.overlap) {
                    format!("c{}", common_dist.sample(rng))
                } else {
                    p.topic[topic_dist.sample(rng)].clone()
                }
            })
            .collect();
        let keywords = (0..KEYWORDS).map(|_| p.topic[topic_dist.sample(rng)].clone()).collect();
        let mut authors = vec![p.name.clone()];
        authors.extend(p.coauthors.choose_multiple(rng, COAUTHORS).cloned());
        authors.shuffle(rng);
        PaperRecord {
            title: title.join(" "),
            keywords,
            authors,
            org: p.org.clone(),
            venue: p.venues.choose(rng).unwrap().clone(),
            year: Some(rng.random_range(2000..2022)),
        }
    };

    let mut experts = Vec::with_capacity(cfg.n_experts);
    let mut held_out: Vec<Vec<PaperRecord>> = Vec::with_capacity(cfg.n_experts);
    for p in &profiles {
        let support = (0..cfg.papers_per_expert)
            .map(|_| paper(p, &mut rng).to_support())
            .collect::<Result<Vec<_>>>()?;
        experts.push(Expert {
            id: p.id.clone(),
            name: p.name.clone(),
            support,
            source: Source::Reference,
        });
        held_out.push((0..cfg.queries_per_expert).map(|_| paper(p, &mut rng)).collect());
    }
    let reference = Corpus::new(experts)?;

    let mut queries = Vec::new();
    for (p, papers) in profiles.iter().zip(&held_out) {
        for (k, paper) in papers.iter().enumerate() {
            queries.push(QueryRecord {
                query_id: format!("{}-q{k}", p.id),
                paper: paper.clone(),
                truth_id: p.id.clone(),
                candidates: Vec::new(),
            });
        }
    }

    let mut names = Vec::new();
    for (gi, chunk) in profiles.chunks(cfg.name_group).enumerate() {
        let mut rows: Vec<(PaperRecord, String)> = chunk
            .iter()
            .enumerate()
            .flat_map(|(k, p)| {
                let owner = gi * cfg.name_group + k;
                held_out[owner].iter().map(move |q| (q.clone(), p.id.clone()))
            })
            .collect();
        if rows.len() < 2 {
            continue;
        }
        rows.shuffle(&mut rng);
        names.push(NameRecord {
            name: chunk[0].name.clone(),
            papers: rows.iter().map(|r| r.0.clone()).collect(),
            truth: rows.into_iter().map(|r| r.1).collect(),
        });
    }

    // A news sentence has the same slots as a paper (headline, people,
    // organization, source) so the shift only changes vocabulary.
    let sentence = |p: &Profile, rng: &mut ChaCha8Rng| -> String {
        let mut words: Vec<String> = (0..SENTENCE_LEN)
            .map(|_| {
                if rng.random_bool(cfg.ext_topic_share) {
                    let w = &p.topic[topic_dist.sample(rng)];
                    if rng.random_bool(cfg.morph) {
                        format!("{w}s")
                    } else {
                        w.clone()
                    }
                } else {
                    format!("c{}", common_dist.sample(rng))
                }
            })
            .collect();
        for _ in 0..(cfg.shift * cfg.style_words as f64).round() as usize {
            let at = rng.random_range(0..=words.len());
            words.insert(at, format!("n{}", news_dist.sample(rng)));
        }
        let mut people = vec![p.name.clone()];
        people.extend((0..COAUTHORS).map(|_| {
            format!(
                "{} {}",
                capitalize(GIVEN.choose(rng).unwrap()),
                capitalize(SURNAMES.choose(rng).unwrap())
            )
        }));
        people.shuffle(rng);
        words.extend(people);
        words.push(p.org.clone());
        words.push(p.venues.choose(rng).unwrap().clone());
        let mut s = words.join(" ");
        s.push('.');
        s
    };

    let mut news = Vec::new();
    for p in &profiles {
        for k in 0..cfg.mentions_per_expert {
            let before = cfg.sentences_per_mention / 2;
            let after = cfg.sentences_per_mention - before;
            news.push(NewsRecord {
                mention_id: format!("{}-m{k}", p.id),
                name: p.name.clone(),
                sentences_before: (0..before).map(|_| sentence(p, &mut rng)).collect(),
                sentences_after: (0..after).map(|_| sentence(p, &mut rng)).collect(),
                truth_id: Some(p.id.clone()),
            });
        }
    }

    Ok(SynthCorpus {
        reference,
        queries,
        names,
        news,
    })
}

/// Attach `n_candidates − 1` random negatives plus the truth to each query,
/// sorted by id.
pub fn assign_random_candidates(
    queries: &mut [QueryRecord],
    corpus: &Corpus,
    n_candidates: usize,
    seed: u64,
) -> Result<()> {
    if n_candidates == 0 || n_candidates > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n_candidates} candidates from {} experts",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for q in queries {
        corpus.expert(&q.truth_id)?;
        let others: Vec<&str> = corpus
            .experts()
            .iter()
            .map(|e| e.id.as_str())
            .filter(|id| *id != q.truth_id)
            .collect();
        let mut cands: Vec<String> = others
            .choose_multiple(&mut rng, n_candidates - 1)
            .map(|s| s.to_string())
            .collect();
        cands.push(q.truth_id.clone());
        cands.sort();
        q.candidates = cands;
    }
    Ok(())
}
