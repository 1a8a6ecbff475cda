//! Support-item encoder: token-embedding mean, projection, tanh, unit norm.
//!
//! Two generators with identical shapes are used: the shared generator,
//! trained on the reference corpus and adapted toward the external source,
//! and the private generator that absorbs external-only features.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::corpus::{Corpus, ExpertInstance, SupportInfo, SupportKind};
use crate::diffcore::{uniform_init, xavier_limit, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const EMBED_INIT: f64 = 0.05;

/// Lowercase and split on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from support items; words seen fewer than `min_freq` times map
    /// to `[UNK]`. Ids follow descending frequency, then lexicographic order.
    pub fn build<'a, I>(items: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SupportInfo>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for info in items {
            seen_any = true;
            for w in words(&info.encoder_text()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::InvalidArgument("cannot build a vocabulary from no text".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD, UNK, CLS, SEP]
            .into_iter()
            .map(String::from)
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in [PAD, UNK, CLS, SEP].into_iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(special) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary must start with {PAD} {UNK} {CLS} {SEP}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { ids, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the id is the line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// `[CLS]`, content tokens, `[SEP]`, truncated to `max_len` keeping both markers.
pub fn tokenize(info: &SupportInfo, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!("max_len must be >= 3, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(words(&info.encoder_text()).take(max_len - 2).map(|w| vocab.id(&w)));
    ids.push(SEP_ID);
    Ok(ids)
}

/// Maximum token lengths for reference papers and external pieces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLimits {
    pub paper: usize,
    pub external: usize,
}

impl Default for TokenLimits {
    fn default() -> Self {
        Self {
            paper: 208,
            external: 64,
        }
    }
}

impl TokenLimits {
    pub fn for_kind(&self, kind: SupportKind) -> usize {
        match kind {
            SupportKind::Paper => self.paper,
            SupportKind::Sentence | SupportKind::Attribute => self.external,
        }
    }
}

/// Parameter handles of one generator inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generator {
    pub prefix: String,
    pub embed: ParamId,
    pub proj: ParamId,
    pub d_tok: usize,
    pub d_out: usize,
}

impl Generator {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d_tok: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = store.add(
            &format!("{prefix}.embed"),
            &[vocab_size, d_tok],
            uniform_init(rng, vocab_size * d_tok, EMBED_INIT),
        )?;
        let proj = store.add(
            &format!("{prefix}.proj"),
            &[d_tok, d_out],
            uniform_init(rng, d_tok * d_out, xavier_limit(d_tok, d_out)),
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            embed,
            proj,
            d_tok,
            d_out,
        })
    }

    /// Look up an existing generator's parameters by prefix.
    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::NotFound(format!("parameter `{prefix}.{suffix}`")))
        };
        let (embed, proj) = (find("embed")?, find("proj")?);
        let d_tok = store.get(embed).cols();
        if store.get(proj).rows() != d_tok {
            return Err(Error::Shape(format!(
                "`{prefix}`: embedding width {d_tok} vs projection {:?}",
                store.get(proj).shape
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            embed,
            proj,
            d_tok,
            d_out: store.get(proj).cols(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.embed, self.proj]
    }

    /// Mean of non-PAD token embeddings, projected, tanh, unit-normalized.
    pub fn encode(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Result<Var> {
        let ids: Vec<u32> = tokens.iter().copied().filter(|&t| t != PAD_ID).collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an all-padding sequence".into()));
        }
        let pooled = g.embed_mean(self.embed, &ids)?;
        let projected = g.linear(self.proj, pooled)?;
        let activated = g.tanh(projected);
        g.normalize(activated)
    }

    /// Encode outside of any training graph.
    pub fn embed(&self, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let v = self.encode(&mut g, tokens)?;
        Ok(g.value(v).to_vec())
    }

    /// One embedding per instance item, in item order.
    pub fn encode_instance(
        &self,
        g: &mut Graph<'_>,
        instance: &ExpertInstance,
        corpus: &Corpus,
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Vec<Var>> {
        corpus
            .resolve(instance)?
            .into_iter()
            .map(|info| {
                let tokens = tokenize(info, vocab, max_len)?;
                self.encode(g, &tokens)
            })
            .collect()
    }
}

/// Key of the `index`-th support item of an expert or mention.
pub fn item_key(owner_id: &str, index: usize) -> String {
    format!("{owner_id}#{index}")
}

/// Frozen per-item vectors computed elsewhere (for example by a large
/// pretrained language model), stored unit-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixedEmbeddings {
    /// Read `id<TAB>v1,v2,...` lines, checking every vector has `dim` entries.
    pub fn import(path: &Path, dim: usize) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `id<TAB>v1,v2,...`".into()))?;
            let v = rest
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(e.to_string()))?;
            if v.len() != dim {
                return Err(err(format!("vector of dimension {} but d_out is {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(err(format!("vector norm {norm} cannot be normalized")));
            }
            if vectors
                .insert(id.to_string(), v.iter().map(|x| x / norm).collect())
                .is_some()
            {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(format!("embedding for `{id}`")))
    }
}

/// Write vectors in the import format.
pub fn export_embeddings<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut w = BufWriter::new(File::create(path)?);
    for (id, v) in rows {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{id}\t{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
