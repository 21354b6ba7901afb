//! Labeled documents, contexts and retrievers.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lattice::{Label, Lattice, LatticeError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has empty text")]
    EmptyText(String),
    #[error("unknown document id `{0}`")]
    UnknownId(String),
    #[error("context size {size} cannot hold the {required} required documents")]
    ContextTooSmall { size: usize, required: usize },
    #[error("corpus has no embedding index")]
    MissingIndex,
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledDocument {
    pub id: String,
    pub text: String,
    pub label: Label,
}

/// Unordered set of labeled documents, stored sorted by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Context {
    docs: Vec<LabeledDocument>,
}

impl Context {
    pub fn new(mut docs: Vec<LabeledDocument>) -> Result<Self, CorpusError> {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::DuplicateId(w[0].id.clone()));
        }
        Ok(Context { docs })
    }

    pub fn empty() -> Self {
        Context::default()
    }

    pub fn documents(&self) -> &[LabeledDocument] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.docs.iter().map(|d| d.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledDocument> {
        self.docs.binary_search_by(|d| d.id.as_str().cmp(id)).ok().map(|i| &self.docs[i])
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.docs.iter().map(|d| &d.label)
    }

    /// Join of the document labels; the lattice bottom for an empty context.
    pub fn label(&self, lattice: &Lattice) -> Result<Label, LatticeError> {
        lattice.context_label(self.labels())
    }

    /// Documents whose label is at or below `label`.
    pub fn subcontext(&self, label: &Label) -> Result<Context, LatticeError> {
        let mut docs = Vec::new();
        for d in &self.docs {
            if d.label.leq(label)? {
                docs.push(d.clone());
            }
        }
        Ok(Context { docs })
    }

    /// Documents satisfying a predicate; keeps the id order.
    pub fn filter(&self, mut keep: impl FnMut(&LabeledDocument) -> bool) -> Context {
        Context { docs: self.docs.iter().filter(|d| keep(d)).cloned().collect() }
    }
}

/// Text embedding backend.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Feature-hashed bag of lowercased words, L2-normalized.
#[derive(Clone, Debug)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBagOfWords { dim }
    }

    pub fn bucket(&self, word: &str) -> usize {
        (fnv1a(word.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashedBagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            v[self.bucket(&w)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Lowercased alphanumeric runs.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct EmbeddingIndex {
    embedder: Arc<dyn Embedder>,
    vectors: Vec<Vec<f64>>,
}

/// An immutable document collection over one lattice.
pub struct Corpus {
    lattice: Arc<Lattice>,
    docs: Vec<LabeledDocument>,
    by_id: HashMap<String, usize>,
    index: Option<EmbeddingIndex>,
}

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl Corpus {
    pub fn new(lattice: Arc<Lattice>, docs: Vec<LabeledDocument>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            lattice.check(&d.label)?;
            if d.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(d.id.clone()));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Corpus { lattice, docs, by_id, index: None })
    }

    /// Reads JSON lines `{"id", "text", "label"}`. A missing label becomes
    /// the lattice top.
    pub fn from_jsonl(lattice: Arc<Lattice>, reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut docs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: DocumentLine =
                serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: n + 1, source })?;
            let label = match raw.label {
                Some(s) => lattice.parse_label(&s)?,
                None => lattice.top(),
            };
            docs.push(LabeledDocument { id: raw.id, text: raw.text, label });
        }
        Corpus::new(lattice, docs)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for d in &self.docs {
            let line = DocumentLine { id: d.id.clone(), text: d.text.clone(), label: Some(d.label.to_string()) };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn documents(&self) -> &[LabeledDocument] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledDocument> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn context_of<I, S>(&self, ids: I) -> Result<Context, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let docs = ids
            .into_iter()
            .map(|id| self.get(id.as_ref()).cloned().ok_or_else(|| CorpusError::UnknownId(id.as_ref().into())))
            .collect::<Result<Vec<_>, _>>()?;
        Context::new(docs)
    }

    pub fn build_index(&mut self, embedder: Arc<dyn Embedder>) {
        let vectors = self.docs.iter().map(|d| embedder.embed(&d.text)).collect();
        self.index = Some(EmbeddingIndex { embedder, vectors });
    }

    pub fn has_index(&self) -> bool {
        self.index.is_some()
    }

    /// Documents ranked by cosine similarity to `query`, ties by id.
    pub fn rank_similar(&self, query: &str, k: usize) -> Result<Vec<(f64, &LabeledDocument)>, CorpusError> {
        let index = self.index.as_ref().ok_or(CorpusError::MissingIndex)?;
        let q = index.embedder.embed(query);
        let mut scored: Vec<(f64, &LabeledDocument)> =
            index.vectors.iter().zip(&self.docs).map(|(v, d)| (cosine(&q, v), d)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Top-`k` documents by cosine similarity to `query`.
    pub fn retrieve_similar(&self, query: &str, k: usize) -> Result<Context, CorpusError> {
        Context::new(self.rank_similar(query, k)?.into_iter().map(|(_, d)| d.clone()).collect())
    }

    /// All `required` documents plus seeded uniform fillers up to `size`.
    /// Fillers never contain any of `excluded_values`.
    pub fn retrieve_perfect(
        &self,
        required: &BTreeSet<String>,
        excluded_values: &[String],
        size: usize,
        seed: u64,
        query_id: &str,
    ) -> Result<Context, CorpusError> {
        if size < required.len() {
            return Err(CorpusError::ContextTooSmall { size, required: required.len() });
        }
        let mut docs = Vec::with_capacity(size);
        for id in required {
            docs.push(self.get(id).cloned().ok_or_else(|| CorpusError::UnknownId(id.clone()))?);
        }
        let mut pool: Vec<&LabeledDocument> = self
            .docs
            .iter()
            .filter(|d| !required.contains(&d.id))
            .filter(|d| !excluded_values.iter().any(|v| !v.is_empty() && d.text.contains(v.as_str())))
            .collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, query_id));
        pool.shuffle(&mut rng);
        docs.extend(pool.into_iter().take(size - required.len()).cloned());
        Context::new(docs)
    }
}

/// Mixes a run seed with a string key into a reproducible 64-bit seed.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// How a query's context is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Retriever {
    /// Required documents plus random fillers; a query's pinned context ids
    /// take precedence when present.
    Perfect {
        context_size: usize,
    },
    Similar {
        k: usize,
    },
}
