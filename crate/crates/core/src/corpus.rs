//! Experts, their support information, corpus ingestion and sampling.
//!
//! A reference corpus is a list of [`Expert`]s, each described by a set of
//! [`SupportInfo`] items (papers). External sources contribute
//! [`ExternalMention`]s whose support items are sentences or profile
//! attributes. Training draws [`ExpertInstance`]s (random subsets of at most
//! `L` items) and groups them into [`TripletBatch`]es.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of news sentences kept on each side of a name mention.
pub const NEWS_WINDOW: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Paper,
    Sentence,
    Attribute,
}

/// One atomic piece of text describing an expert.
///
/// Paper fields are stored in the fixed order `title`, `keyword`*, `author`*,
/// `org`, `venue` and an optional trailing `year`; repeated field names carry
/// list entries so the original record can be rebuilt exactly.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupportInfo {
    pub kind: SupportKind,
    pub fields: Vec<(String, String)>,
}

impl SupportInfo {
    pub fn paper(
        title: &str,
        keywords: &[String],
        authors: &[String],
        org: &str,
        venue: &str,
        year: Option<i64>,
    ) -> Result<Self> {
        let mut fields = Vec::with_capacity(4 + keywords.len() + authors.len());
        fields.push(("title".to_string(), title.to_string()));
        fields.extend(keywords.iter().map(|k| ("keyword".to_string(), k.clone())));
        fields.extend(authors.iter().map(|a| ("author".to_string(), a.clone())));
        fields.push(("org".to_string(), org.to_string()));
        fields.push(("venue".to_string(), venue.to_string()));
        if let Some(y) = year {
            fields.push(("year".to_string(), y.to_string()));
        }
        Self::checked(SupportKind::Paper, fields)
    }

    pub fn sentence(text: &str) -> Result<Self> {
        Self::checked(SupportKind::Sentence, vec![("text".to_string(), text.to_string())])
    }

    pub fn attribute(name: &str, value: &str) -> Result<Self> {
        Self::checked(SupportKind::Attribute, vec![(name.to_string(), value.to_string())])
    }

    fn checked(kind: SupportKind, fields: Vec<(String, String)>) -> Result<Self> {
        if fields.iter().all(|(_, v)| v.trim().is_empty()) {
            return Err(Error::InvalidArgument(
                "support information needs at least one non-empty text field".into(),
            ));
        }
        Ok(Self { kind, fields })
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn field_values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.fields.iter().filter(move |(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// The text that feeds the encoder, in encoder field order.
    ///
    /// Papers contribute title, keywords, author names, organization and
    /// venue; sentences and attributes contribute their raw value.
    pub fn encoder_text(&self) -> String {
        match self.kind {
            SupportKind::Paper => {
                let mut parts: Vec<&str> = Vec::new();
                for name in ["title", "keyword", "author", "org", "venue"] {
                    parts.extend(self.field_values(name).filter(|v| !v.is_empty()));
                }
                parts.join(" ")
            }
            SupportKind::Sentence | SupportKind::Attribute => self
                .fields
                .iter()
                .map(|(_, v)| v.as_str())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    /// Short human-readable summary (paper title or the raw text).
    pub fn snippet(&self) -> String {
        match self.kind {
            SupportKind::Paper => self.field("title").unwrap_or_default().to_string(),
            _ => self.encoder_text(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Reference,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expert {
    pub id: String,
    pub name: String,
    pub support: Vec<SupportInfo>,
    pub source: Source,
}

/// An expert as it appears in an external source, to be linked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalMention {
    pub mention_id: String,
    pub name: String,
    pub support: Vec<SupportInfo>,
    pub truth_expert_id: Option<String>,
}

/// A sampled subset of one expert's support items, by index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertInstance {
    pub expert_id: String,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub anchor: ExpertInstance,
    pub positive: ExpertInstance,
    pub negatives: Vec<ExpertInstance>,
}

/// Reference experts indexed by id and by lowercased name variant.
#[derive(Clone, Debug)]
pub struct Corpus {
    experts: Vec<Expert>,
    by_id: HashMap<String, usize>,
    by_variant: HashMap<String, Vec<usize>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.experts == other.experts
    }
}

impl Corpus {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(experts.len());
        let mut by_variant: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in experts.iter().enumerate() {
            if e.support.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "expert `{}` has no support information",
                    e.id
                )));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if e.source != Source::Reference {
                continue;
            }
            if let Ok(variants) = generate_name_variants(&e.name) {
                for v in variants {
                    by_variant.entry(v).or_default().push(i);
                }
            }
        }
        Ok(Self {
            experts,
            by_id,
            by_variant,
        })
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Expert> {
        self.by_id.get(id).map(|&i| &self.experts[i])
    }

    pub fn expert(&self, id: &str) -> Result<&Expert> {
        self.get(id)
            .ok_or_else(|| Error::NotFound(format!("expert `{id}`")))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn variant_keys(&self) -> impl Iterator<Item = &str> {
        self.by_variant.keys().map(String::as_str)
    }

    /// Resolve an instance's indices to support items.
    pub fn resolve<'a>(&'a self, instance: &ExpertInstance) -> Result<Vec<&'a SupportInfo>> {
        let expert = self.expert(&instance.expert_id)?;
        instance
            .items
            .iter()
            .map(|&i| {
                expert.support.get(i).ok_or_else(|| {
                    Error::NotFound(format!(
                        "item {i} of expert `{}` (has {})",
                        expert.id,
                        expert.support.len()
                    ))
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// File schemas

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub title: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub org: String,
    #[serde(default)]
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i64>,
}

impl PaperRecord {
    pub fn to_support(&self) -> Result<SupportInfo> {
        SupportInfo::paper(
            &self.title,
            &self.keywords,
            &self.authors,
            &self.org,
            &self.venue,
            self.year,
        )
    }

    pub fn from_support(info: &SupportInfo) -> Result<Self> {
        if info.kind != SupportKind::Paper {
            return Err(Error::InvalidArgument(format!(
                "expected a paper, found {:?}",
                info.kind
            )));
        }
        let year = match info.field("year") {
            Some(y) => Some(y.parse::<i64>().map_err(|e| {
                Error::InvalidArgument(format!("year `{y}`: {e}"))
            })?),
            None => None,
        };
        Ok(Self {
            title: info.field("title").unwrap_or_default().to_string(),
            keywords: info.field_values("keyword").map(str::to_string).collect(),
            authors: info.field_values("author").map(str::to_string).collect(),
            org: info.field("org").unwrap_or_default().to_string(),
            venue: info.field("venue").unwrap_or_default().to_string(),
            year,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: String,
    pub name: String,
    pub papers: Vec<PaperRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsRecord {
    pub mention_id: String,
    pub name: String,
    #[serde(default)]
    pub sentences_before: Vec<String>,
    #[serde(default)]
    pub sentences_after: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedinRecord {
    pub user_id: String,
    pub name: String,
    #[serde(default)]
    pub affiliation: String,
    #[serde(default)]
    pub skills: Vec<String>,
    #[serde(default)]
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Reference,
    News,
    Linkedin,
}

impl std::str::FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Schema::Reference),
            "news" => Ok(Schema::News),
            "linkedin" => Ok(Schema::Linkedin),
            other => Err(Error::InvalidArgument(format!("unknown schema `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LoadedCorpus {
    Reference(Corpus),
    Mentions(Vec<ExternalMention>),
}

pub fn load_corpus(path: &Path, schema: Schema) -> Result<LoadedCorpus> {
    match schema {
        Schema::Reference => load_reference(path).map(LoadedCorpus::Reference),
        Schema::News => load_news(path).map(LoadedCorpus::Mentions),
        Schema::Linkedin => load_linkedin(path).map(LoadedCorpus::Mentions),
    }
}

fn read_records<T, F, U>(path: &Path, mut convert: F) -> Result<Vec<U>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T) -> Result<U>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(convert(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_reference(path: &Path) -> Result<Corpus> {
    let experts = read_records(path, |r: ReferenceRecord| {
        let support = r
            .papers
            .iter()
            .map(PaperRecord::to_support)
            .collect::<Result<Vec<_>>>()?;
        if support.is_empty() {
            return Err(Error::InvalidArgument(format!("expert `{}` has no papers", r.id)));
        }
        Ok(Expert {
            id: r.id,
            name: r.name,
            support,
            source: Source::Reference,
        })
    })?;
    Corpus::new(experts)
}

pub fn save_reference(corpus: &Corpus, path: &Path) -> Result<()> {
    let records = corpus
        .experts()
        .iter()
        .map(|e| {
            Ok(ReferenceRecord {
                id: e.id.clone(),
                name: e.name.clone(),
                papers: e
                    .support
                    .iter()
                    .map(PaperRecord::from_support)
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(path, &records)
}

/// Read one JSON record per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_records(path, |r: T| Ok(r))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn check_unique_mentions(mentions: &[ExternalMention]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in mentions {
        if !seen.insert(m.mention_id.as_str()) {
            return Err(Error::DuplicateId(m.mention_id.clone()));
        }
    }
    Ok(())
}

/// Convert a news record, keeping at most six sentences on each side of the name.
pub fn news_mention(r: NewsRecord) -> Result<ExternalMention> {
    let before = &r.sentences_before[r.sentences_before.len().saturating_sub(NEWS_WINDOW)..];
    let after = &r.sentences_after[..r.sentences_after.len().min(NEWS_WINDOW)];
    let support = before
        .iter()
        .chain(after)
        .filter(|s| !s.trim().is_empty())
        .map(|s| SupportInfo::sentence(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExternalMention {
        mention_id: r.mention_id,
        name: r.name,
        support,
        truth_expert_id: r.truth_id,
    })
}

pub fn linkedin_mention(r: LinkedinRecord) -> Result<ExternalMention> {
    let mut support = Vec::new();
    if !r.affiliation.trim().is_empty() {
        support.push(SupportInfo::attribute("affiliation", &r.affiliation)?);
    }
    let skills = r
        .skills
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(", ");
    if !skills.is_empty() {
        support.push(SupportInfo::attribute("skills", &skills)?);
    }
    for s in split_sentences(&r.summary) {
        support.push(SupportInfo::sentence(s)?);
    }
    Ok(ExternalMention {
        mention_id: r.user_id,
        name: r.name,
        support,
        truth_expert_id: r.truth_id,
    })
}

pub fn load_news(path: &Path) -> Result<Vec<ExternalMention>> {
    let mentions = read_records(path, news_mention)?;
    check_unique_mentions(&mentions)?;
    Ok(mentions)
}

pub fn load_linkedin(path: &Path) -> Result<Vec<ExternalMention>> {
    let mentions = read_records(path, linkedin_mention)?;
    check_unique_mentions(&mentions)?;
    Ok(mentions)
}

/// Check that every truth id named by a mention exists in the reference corpus.
pub fn validate_mentions(mentions: &[ExternalMention], corpus: &Corpus) -> Result<()> {
    for m in mentions {
        if let Some(t) = &m.truth_expert_id {
            if corpus.get(t).is_none() {
                return Err(Error::NotFound(format!(
                    "truth expert `{t}` of mention `{}`",
                    m.mention_id
                )));
            }
        }
    }
    Ok(())
}

/// Split prose into sentences at `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.peek().map_or(true, |&(_, n)| n.is_whitespace());
            if at_break {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

// ---------------------------------------------------------------------------
// Sampling

/// Draw `min(n_e, cap)` distinct support indices uniformly without replacement.
pub fn sample_instance<R: Rng + ?Sized>(
    expert: &Expert,
    cap: usize,
    rng: &mut R,
) -> Result<ExpertInstance> {
    if cap == 0 {
        return Err(Error::InvalidArgument("instance cap must be >= 1".into()));
    }
    let n = expert.support.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "expert `{}` has no support information",
            expert.id
        )));
    }
    let items = index::sample(rng, n, n.min(cap)).into_vec();
    Ok(ExpertInstance {
        expert_id: expert.id.clone(),
        items,
    })
}

/// Sample an anchor and a disjoint positive from one expert.
fn sample_disjoint_pair<R: Rng + ?Sized>(
    expert: &Expert,
    cap: usize,
    rng: &mut R,
) -> (ExpertInstance, ExpertInstance) {
    let n = expert.support.len();
    let take = (2 * cap).min(n);
    let drawn = index::sample(rng, n, take).into_vec();
    let split = (take / 2).max(1).min(cap);
    let make = |items: &[usize]| ExpertInstance {
        expert_id: expert.id.clone(),
        items: items.to_vec(),
    };
    (make(&drawn[..split]), make(&drawn[split..]))
}

/// Build training triplets: `per_expert` anchors for each expert with at
/// least `2 * cap` items, each with one disjoint positive and `n_neg`
/// negatives from other eligible experts.
///
/// Negatives are taken first from experts sharing a name variant with the
/// anchor's expert, then uniformly from the rest; when fewer distinct
/// experts exist than `n_neg`, experts repeat with fresh instances.
pub fn sample_triplets<R: Rng + ?Sized>(
    corpus: &Corpus,
    cap: usize,
    n_neg: usize,
    per_expert: usize,
    rng: &mut R,
) -> Result<Vec<TripletBatch>> {
    if cap == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("cap and n_neg must be >= 1".into()));
    }
    let min_items = 2 * cap;
    let eligible: Vec<usize> = corpus
        .experts()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.support.len() >= min_items)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::NoEligibleExperts(format!(
            "{} expert(s) have at least {min_items} support items (2 x L, L = {cap}); need 2",
            eligible.len()
        )));
    }
    let eligible_set: HashSet<usize> = eligible.iter().copied().collect();

    let mut out = Vec::with_capacity(eligible.len() * per_expert);
    for &ei in &eligible {
        let expert = &corpus.experts()[ei];
        let same_name: Vec<usize> = candidate_indices(&expert.name, corpus)
            .into_iter()
            .filter(|&j| j != ei && eligible_set.contains(&j))
            .collect();
        let same_set: HashSet<usize> = same_name.iter().copied().collect();
        let others: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&j| j != ei && !same_set.contains(&j))
            .collect();

        for _ in 0..per_expert {
            let (anchor, positive) = sample_disjoint_pair(expert, cap, rng);
            let mut pool_same = same_name.clone();
            pool_same.shuffle(rng);
            let mut pool_other = others.clone();
            pool_other.shuffle(rng);
            let mut chosen: Vec<usize> = pool_same.into_iter().chain(pool_other).collect();
            let distinct = chosen.len();
            while chosen.len() < n_neg {
                chosen.push(chosen[rng.random_range(0..distinct)]);
            }
            chosen.truncate(n_neg);
            let negatives = chosen
                .into_iter()
                .map(|j| sample_instance(&corpus.experts()[j], cap, rng))
                .collect::<Result<Vec<_>>>()?;
            out.push(TripletBatch {
                anchor,
                positive,
                negatives,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Name variants and candidates

/// Lowercased name variants: the name itself, the rotation moving the last
/// token first, and both orderings with every token but the last reduced to
/// its initial.
pub fn generate_name_variants(name: &str) -> Result<BTreeSet<String>> {
    let tokens: Vec<String> = name.split_whitespace().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty name".into()));
    }
    let mut out = BTreeSet::new();
    if tokens.len() == 1 {
        out.insert(tokens[0].clone());
        return Ok(out);
    }
    let last = tokens.len() - 1;
    let mut rotated = Vec::with_capacity(tokens.len());
    rotated.push(tokens[last].clone());
    rotated.extend_from_slice(&tokens[..last]);

    for order in [&tokens, &rotated] {
        out.insert(order.join(" "));
        let initialized: Vec<String> = order
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == last {
                    t.clone()
                } else {
                    t.chars().next().map(String::from).unwrap_or_default()
                }
            })
            .collect();
        out.insert(initialized.join(" "));
    }
    Ok(out)
}

fn candidate_indices(query_name: &str, corpus: &Corpus) -> Vec<usize> {
    let Ok(variants) = generate_name_variants(query_name) else {
        return Vec::new();
    };
    let mut hits: BTreeSet<usize> = BTreeSet::new();
    for v in &variants {
        if let Some(ix) = corpus.by_variant.get(v) {
            hits.extend(ix.iter().copied());
        }
    }
    hits.into_iter().collect()
}

/// Ids of reference experts whose name variants intersect the query's, sorted by id.
pub fn candidate_set(query_name: &str, corpus: &Corpus) -> Vec<String> {
    let mut ids: Vec<String> = candidate_indices(query_name, corpus)
        .into_iter()
        .map(|i| corpus.experts()[i].id.clone())
        .collect();
    ids.sort();
    ids
}

/// Like [`candidate_set`], but when nothing matches exactly, fall back to
/// variant keys within edit distance one of a query variant.
pub fn candidate_set_fuzzy(query_name: &str, corpus: &Corpus) -> Vec<String> {
    let exact = candidate_set(query_name, corpus);
    if !exact.is_empty() {
        return exact;
    }
    let Ok(variants) = generate_name_variants(query_name) else {
        return Vec::new();
    };
    let mut hits: BTreeSet<&str> = BTreeSet::new();
    for (key, ix) in &corpus.by_variant {
        if variants.iter().any(|v| within_one_edit(v, key)) {
            hits.extend(ix.iter().map(|&i| corpus.experts()[i].id.as_str()));
        }
    }
    hits.into_iter().map(str::to_string).collect()
}

fn within_one_edit(a: &str, b: &str) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    match long.len() - short.len() {
        0 => short.iter().zip(long.iter()).filter(|(x, y)| x != y).count() <= 1,
        1 => {
            let prefix = short.iter().zip(long.iter()).take_while(|(x, y)| x == y).count();
            short[prefix..] == long[prefix + 1..]
        }
        _ => false,
    }
}
