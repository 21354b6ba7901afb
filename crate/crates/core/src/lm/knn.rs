//! kNN-LM backend: a token datastore built from the corpus, mixed with a
//! uniform base distribution.
//!
//! Each datastore entry maps the embedding of the `window` tokens preceding
//! a position in a document to the token at that position. At decode time
//! only entries from documents present in the prompt are eligible, so the
//! nearest-neighbour distribution depends on the retrieved documents alone.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, LanguageModel, LmError, LmState, Segment};
use crate::corpus::{Embedder, HashedBagOfWords, LabeledDocument};
use crate::guard::GuardedContext;

pub const MAGIC: &[u8; 16] = b"LPROP-KNN-DS-v1\0";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
    pub gamma: f64,
    pub temperature: f64,
    /// Greedy decoding when false.
    pub sample: bool,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { k: 8, gamma: 0.5, temperature: 1.0, sample: false }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.k == 0 {
            return Err(LmError::InvalidParameter("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LmError::InvalidParameter(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LmError::InvalidParameter(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnDatastore {
    dim: usize,
    window: usize,
    keys: Vec<f32>,
    tokens: Vec<u32>,
    docs: Vec<u32>,
    vocab: Vec<String>,
    doc_ids: Vec<String>,
    vocab_index: HashMap<String, u32>,
}

/// A next-token distribution; `fallback` marks the uniform answer given
/// when no entry is eligible.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub fallback: bool,
}

fn lower_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.to_lowercase()).collect()
}

fn key_text(history: &[String], window: usize) -> String {
    history[history.len().saturating_sub(window)..].join(" ")
}

fn invalid(msg: impl Into<String>) -> LmError {
    LmError::Datastore(msg.into())
}

impl KnnDatastore {
    pub fn from_parts(
        dim: usize,
        window: usize,
        keys: Vec<f32>,
        tokens: Vec<u32>,
        docs: Vec<u32>,
        vocab: Vec<String>,
        doc_ids: Vec<String>,
    ) -> Result<Self, LmError> {
        if dim == 0 || keys.len() != tokens.len() * dim {
            return Err(invalid("key matrix does not match dimension and entry count"));
        }
        if docs.len() != tokens.len() {
            return Err(invalid("document index array length differs from entry count"));
        }
        if vocab.is_empty() || tokens.iter().any(|&t| t as usize >= vocab.len()) {
            return Err(invalid("token id outside vocabulary"));
        }
        if docs.iter().any(|&d| d as usize >= doc_ids.len()) {
            return Err(invalid("document index outside document table"));
        }
        let vocab_index = vocab.iter().enumerate().map(|(i, v)| (v.clone(), i as u32)).collect();
        Ok(KnnDatastore { dim, window, keys, tokens, docs, vocab, doc_ids, vocab_index })
    }

    /// One entry per token position after the first, keyed by the preceding
    /// `window` lowercased tokens. Each document ends with [`EOS`].
    pub fn build(documents: &[LabeledDocument], embedder: &dyn Embedder, window: usize) -> Result<Self, LmError> {
        if window == 0 {
            return Err(LmError::InvalidParameter("window must be at least 1".into()));
        }
        let mut sorted: Vec<&LabeledDocument> = documents.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let streams: Vec<Vec<String>> = sorted
            .iter()
            .map(|d| {
                let mut t = lower_tokens(&d.text);
                t.push(EOS.to_string());
                t
            })
            .collect();
        let words: BTreeSet<&str> =
            streams.iter().flatten().map(String::as_str).filter(|w| *w != EOS && *w != UNK).collect();
        let mut vocab = vec![UNK.to_string(), EOS.to_string()];
        vocab.extend(words.into_iter().map(str::to_string));
        let index: HashMap<&str, u32> = vocab.iter().enumerate().map(|(i, v)| (v.as_str(), i as u32)).collect();

        let dim = embedder.dim();
        let (mut keys, mut tokens, mut docs) = (Vec::new(), Vec::new(), Vec::new());
        for (d, stream) in streams.iter().enumerate() {
            for i in 1..stream.len() {
                keys.extend(embedder.embed(&key_text(&stream[..i], window)).into_iter().map(|x| x as f32));
                tokens.push(index[stream[i].as_str()]);
                docs.push(d as u32);
            }
        }
        let doc_ids = sorted.iter().map(|d| d.id.clone()).collect();
        KnnDatastore::from_parts(dim, window, keys, tokens, docs, vocab, doc_ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.vocab_index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    /// Softmax over the `k` nearest eligible entries of `−d/τ`, with `d`
    /// the squared Euclidean distance, aggregated per token.
    pub fn next_distribution(
        &self,
        key: &[f64],
        k: usize,
        temperature: f64,
        eligible: Option<&[bool]>,
    ) -> Result<Distribution, LmError> {
        if key.len() != self.dim {
            return Err(invalid(format!("key has dimension {}, datastore {}", key.len(), self.dim)));
        }
        let mut near: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| eligible.is_none_or(|e| e[self.docs[i] as usize]))
            .map(|i| {
                let d = self.key(i).iter().zip(key).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>();
                (d, i)
            })
            .collect();
        let v = self.vocab.len();
        if near.is_empty() || k == 0 {
            return Ok(Distribution { probs: vec![1.0 / v as f64; v], fallback: true });
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        let dmin = near[0].0;
        let weights: Vec<f64> = near.iter().map(|(d, _)| (-(d - dmin) / temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut probs = vec![0.0; v];
        for ((_, i), w) in near.iter().zip(&weights) {
            probs[self.tokens[*i] as usize] += w / z;
        }
        Ok(Distribution { probs, fallback: false })
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        for k in &self.keys {
            out.write_all(&k.to_le_bytes())?;
        }
        for t in &self.tokens {
            out.write_all(&t.to_le_bytes())?;
        }
        out.write_all(&(self.window as u32).to_le_bytes())?;
        for d in &self.docs {
            out.write_all(&d.to_le_bytes())?;
        }
        for table in [&self.vocab, &self.doc_ids] {
            out.write_all(&(table.len() as u32).to_le_bytes())?;
            for s in table {
                out.write_all(&(s.len() as u32).to_le_bytes())?;
                out.write_all(s.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, LmError> {
        let mut magic = [0u8; 16];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a datastore file (bad magic)"));
        }
        let dim = read_u32(&mut input)? as usize;
        let count = read_u64(&mut input)? as usize;
        let keys = (0..count * dim).map(|_| read_u32(&mut input).map(f32::from_bits)).collect::<Result<_, _>>()?;
        let tokens = (0..count).map(|_| read_u32(&mut input)).collect::<Result<_, _>>()?;
        let window = read_u32(&mut input)? as usize;
        let docs = (0..count).map(|_| read_u32(&mut input)).collect::<Result<_, _>>()?;
        let vocab = read_strings(&mut input)?;
        let doc_ids = read_strings(&mut input)?;
        KnnDatastore::from_parts(dim, window, keys, tokens, docs, vocab, doc_ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        KnnDatastore::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, LmError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| invalid("truncated datastore"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, LmError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| invalid("truncated datastore"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_strings(r: &mut impl Read) -> Result<Vec<String>, LmError> {
    let n = read_u32(r)?;
    (0..n)
        .map(|_| {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| invalid("truncated datastore"))?;
            String::from_utf8(buf).map_err(|_| invalid("string table is not UTF-8"))
        })
        .collect()
}

/// `γ·p_knn + (1−γ)·p_lm`.
pub fn mix(p_knn: &[f64], p_lm: &[f64], gamma: f64) -> Result<Vec<f64>, LmError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(LmError::InvalidParameter(format!("gamma {gamma} outside [0, 1]")));
    }
    if p_knn.len() != p_lm.len() {
        return Err(LmError::InvalidParameter("distributions over different vocabularies".into()));
    }
    Ok(p_knn
        .iter()
        .zip(p_lm)
        .map(|(&a, &b)| {
            if gamma == 0.0 {
                b
            } else if gamma == 1.0 {
                a
            } else {
                gamma * a + (1.0 - gamma) * b
            }
        })
        .collect())
}

struct Inner {
    ds: KnnDatastore,
    params: KnnParams,
    embedder: HashedBagOfWords,
    doc_pos: HashMap<String, usize>,
}

impl Inner {
    fn distribution(&self, history: &[String], eligible: &[bool]) -> Result<Vec<f64>, LmError> {
        let key = self.embedder.embed(&key_text(history, self.ds.window));
        let knn = self.ds.next_distribution(&key, self.params.k, self.params.temperature, Some(eligible))?;
        let v = self.ds.vocab.len();
        mix(&knn.probs, &vec![1.0 / v as f64; v], self.params.gamma)
    }
}

pub struct KnnLm {
    id: String,
    inner: Arc<Inner>,
}

impl KnnLm {
    pub fn new(ds: KnnDatastore, params: KnnParams) -> Result<Self, LmError> {
        params.validate()?;
        let id = format!("knn:k={},gamma={},tau={}", params.k, params.gamma, params.temperature);
        let doc_pos = ds.doc_ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        let embedder = HashedBagOfWords::new(ds.dim);
        Ok(KnnLm { id, inner: Arc::new(Inner { ds, params, embedder, doc_pos }) })
    }

    pub fn datastore(&self) -> &KnnDatastore {
        &self.inner.ds
    }

    fn eligible<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<bool> {
        let mut e = vec![false; self.inner.ds.doc_ids.len()];
        for id in ids {
            if let Some(&i) = self.inner.doc_pos.get(id) {
                e[i] = true;
            }
        }
        e
    }
}

#[derive(Clone)]
struct KnnState {
    inner: Arc<Inner>,
    eligible: Vec<bool>,
    history: Vec<String>,
}

impl LmState for KnnState {
    fn feed(&mut self, segment: &Segment, _tokens: &[String]) {
        match segment {
            Segment::Question(q) => self.history.extend(lower_tokens(q)),
            Segment::Document { id, .. } => {
                if let Some(&i) = self.inner.doc_pos.get(id) {
                    self.eligible[i] = true;
                }
            }
            _ => {}
        }
    }

    fn score_next(&mut self, token: &str) -> f64 {
        let p = match self.inner.distribution(&self.history, &self.eligible) {
            Ok(p) => p[self.inner.ds.token_id(token) as usize],
            Err(_) => 0.0,
        };
        self.history.push(token.to_lowercase());
        p.ln()
    }

    fn fork(&self) -> Box<dyn LmState> {
        Box::new(self.clone())
    }
}

impl LanguageModel for KnnLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn start(&self) -> Option<Box<dyn LmState>> {
        Some(Box::new(KnnState {
            inner: self.inner.clone(),
            eligible: vec![false; self.inner.ds.doc_ids.len()],
            history: Vec::new(),
        }))
    }

    fn generate(
        &self,
        prompt: &str,
        context: &GuardedContext,
        max_tokens: usize,
        seed: u64,
    ) -> Result<String, LmError> {
        let eligible = self.eligible(context.documents().iter().map(|d| d.id.as_str()));
        let mut history = lower_tokens(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eos = self.inner.ds.token_id(EOS) as usize;
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            let mut p = self.inner.distribution(&history, &eligible)?;
            p[0] = 0.0;
            let next = if self.inner.params.sample {
                let z: f64 = p.iter().sum();
                let mut r = rng.random::<f64>() * z;
                let mut pick = p.len() - 1;
                for (i, &q) in p.iter().enumerate() {
                    if r < q {
                        pick = i;
                        break;
                    }
                    r -= q;
                }
                pick
            } else {
                let mut best = 0;
                for (i, &q) in p.iter().enumerate() {
                    if q > p[best] {
                        best = i;
                    }
                }
                best
            };
            if next == eos {
                break;
            }
            let tok = self.inner.ds.vocab[next].clone();
            history.push(tok.clone());
            out.push(tok);
        }
        Ok(out.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Context;
    use crate::lattice::Label;
    use crate::lm::{score, ScoreRequest};

    fn doc(id: &str, text: &str) -> LabeledDocument {
        LabeledDocument { id: id.into(), text: text.into(), label: Label::atoms([id]) }
    }

    fn toy() -> KnnDatastore {
        // three 1-d keys at 0, 1 and 3 with tokens a, b, a
        KnnDatastore::from_parts(
            1,
            1,
            vec![0.0, 1.0, 3.0],
            vec![2, 3, 2],
            vec![0, 0, 0],
            vec![UNK.into(), EOS.into(), "a".into(), "b".into()],
            vec!["d".into()],
        )
        .unwrap()
    }

    #[test]
    fn point_mass_for_k1() {
        let d = toy().next_distribution(&[0.9], 1, 1.0, None).unwrap();
        assert_eq!(d.probs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_softmax_k2() {
        // query 0.4: d = 0.16 (a), 0.36 (b); weights 1 and e^-0.2
        let d = toy().next_distribution(&[0.4], 2, 1.0, None).unwrap();
        let w = (-0.2f64).exp();
        assert!((d.probs[2] - 1.0 / (1.0 + w)).abs() < 1e-7);
        assert!((d.probs[3] - w / (1.0 + w)).abs() < 1e-7);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equidistant_same_token() {
        let ds = KnnDatastore::from_parts(
            1,
            1,
            vec![-1.0, 1.0],
            vec![2, 2],
            vec![0, 0],
            vec![UNK.into(), EOS.into(), "a".into()],
            vec!["d".into()],
        )
        .unwrap();
        assert_eq!(ds.next_distribution(&[0.0], 2, 1.0, None).unwrap().probs, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn no_eligible_entries_is_uniform() {
        let d = toy().next_distribution(&[0.0], 2, 1.0, Some(&[false])).unwrap();
        assert!(d.fallback);
        assert_eq!(d.probs, vec![0.25; 4]);
    }

    #[test]
    fn mixture() {
        assert_eq!(mix(&[0.8, 0.2], &[0.4, 0.6], 0.0).unwrap(), vec![0.4, 0.6]);
        assert_eq!(mix(&[0.8, 0.2], &[0.4, 0.6], 1.0).unwrap(), vec![0.8, 0.2]);
        assert!((mix(&[0.8, 0.2], &[0.4, 0.6], 0.5).unwrap()[0] - 0.6).abs() < 1e-15);
        assert!(mix(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn memorized_sequence_is_continued() {
        let docs = [doc("m", "the cat sat on mat")];
        let ds = KnnDatastore::build(&docs, &HashedBagOfWords::default(), 1).unwrap();
        assert_eq!(ds.len(), 5);
        let lm = KnnLm::new(ds, KnnParams { k: 1, gamma: 1.0, ..KnnParams::default() }).unwrap();
        let g = GuardedContext::new(Context::new(docs.to_vec()).unwrap());
        assert_eq!(lm.generate("the", &g, 10, 1).unwrap(), "cat sat on mat");
        assert_eq!(lm.generate("the", &g, 2, 1).unwrap(), "cat sat");
        // without the document only the uniform base remains
        let empty = GuardedContext::new(Context::empty());
        let lm2 = KnnLm::new(lm.datastore().clone(), KnnParams { k: 1, gamma: 0.5, ..KnnParams::default() }).unwrap();
        assert_ne!(lm2.generate("the", &empty, 4, 1).unwrap(), "cat sat on mat");
    }

    #[test]
    fn scoring_depends_on_context_documents() {
        let docs = [doc("m", "the cat sat on mat"), doc("n", "a dog ran")];
        let ds = KnnDatastore::build(&docs, &HashedBagOfWords::default(), 1).unwrap();
        let lm = KnnLm::new(ds, KnnParams::default()).unwrap();
        let with = Context::new(vec![docs[0].clone()]).unwrap();
        let without = Context::new(vec![docs[1].clone()]).unwrap();
        let u1 = score(&lm, &ScoreRequest::new("the", &with, "cat sat")).unwrap().utility().unwrap();
        let u2 = score(&lm, &ScoreRequest::new("the", &without, "cat sat")).unwrap().utility().unwrap();
        assert!(u1 > u2);
    }

    #[test]
    fn file_round_trip() {
        let docs = [doc("m", "the cat sat on mat"), doc("n", "a dog ran")];
        let ds = KnnDatastore::build(&docs, &HashedBagOfWords::new(16), 2).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..16], MAGIC);
        assert_eq!(KnnDatastore::read_from(&buf[..]).unwrap(), ds);
        assert!(KnnDatastore::read_from(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(KnnDatastore::read_from(&bad[..]).is_err());
    }

    #[test]
    fn params_are_validated() {
        assert!(KnnParams { gamma: -0.1, ..KnnParams::default() }.validate().is_err());
        assert!(KnnParams { temperature: 0.0, ..KnnParams::default() }.validate().is_err());
        assert!(KnnParams { k: 0, ..KnnParams::default() }.validate().is_err());
    }
}
