#![allow(dead_code)]

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};

use labelprop::corpus::{Context, LabeledDocument};
use labelprop::guard::GuardedContext;
use labelprop::lattice::Label;
use labelprop::lm::oracle::{OracleEntry, OracleLm, OracleScript};
use labelprop::lm::{LanguageModel, LmError, LmState, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Returns a fixed log-probability sequence regardless of the prompt.
pub struct ScriptedLm {
    pub logprobs: Vec<f64>,
}

struct ScriptedState {
    logprobs: Vec<f64>,
    pos: usize,
}

impl LmState for ScriptedState {
    fn feed(&mut self, _: &Segment, _: &[String]) {}
    fn score_next(&mut self, _: &str) -> f64 {
        let lp = self.logprobs.get(self.pos).copied().unwrap_or(0.0);
        self.pos += 1;
        lp
    }
    fn fork(&self) -> Box<dyn LmState> {
        Box::new(ScriptedState { logprobs: self.logprobs.clone(), pos: self.pos })
    }
}

impl LanguageModel for ScriptedLm {
    fn id(&self) -> &str {
        "scripted"
    }
    fn start(&self) -> Option<Box<dyn LmState>> {
        Some(Box::new(ScriptedState { logprobs: self.logprobs.clone(), pos: 0 }))
    }
    fn generate(&self, _: &str, _: &GuardedContext, _: usize, _: u64) -> Result<String, LmError> {
        Ok("scripted".into())
    }
}

/// Log-probabilities that depend on everything fed so far, through a hash.
pub struct HashLm {
    pub salt: u64,
    pub scale: f64,
}

#[derive(Clone)]
struct HashState {
    h: u64,
    scale: f64,
}

fn mix(h: u64, x: impl Hash) -> u64 {
    let mut s = DefaultHasher::new();
    h.hash(&mut s);
    x.hash(&mut s);
    s.finish()
}

impl LmState for HashState {
    fn feed(&mut self, segment: &Segment, tokens: &[String]) {
        self.h = mix(self.h, (segment.render(), tokens));
    }
    fn score_next(&mut self, token: &str) -> f64 {
        self.h = mix(self.h, token);
        -self.scale * (self.h % 1_000_003) as f64 / 1_000_003.0
    }
    fn fork(&self) -> Box<dyn LmState> {
        Box::new(self.clone())
    }
}

impl LanguageModel for HashLm {
    fn id(&self) -> &str {
        "hash"
    }
    fn start(&self) -> Option<Box<dyn LmState>> {
        Some(Box::new(HashState { h: self.salt, scale: self.scale }))
    }
    fn generate(&self, _: &str, _: &GuardedContext, _: usize, _: u64) -> Result<String, LmError> {
        Ok("hash".into())
    }
}

/// Wraps a backend and records the document ids of every scored prompt.
pub struct Recording {
    pub inner: Arc<dyn LanguageModel>,
    pub contexts: Arc<Mutex<Vec<BTreeSet<String>>>>,
}

struct RecordingState {
    inner: Box<dyn LmState>,
    ids: BTreeSet<String>,
    log: Arc<Mutex<Vec<BTreeSet<String>>>>,
    logged: bool,
}

impl LmState for RecordingState {
    fn feed(&mut self, segment: &Segment, tokens: &[String]) {
        if let Segment::Document { id, .. } = segment {
            self.ids.insert(id.clone());
        }
        self.inner.feed(segment, tokens);
    }
    fn score_next(&mut self, token: &str) -> f64 {
        if !self.logged {
            self.logged = true;
            self.log.lock().unwrap().push(self.ids.clone());
        }
        self.inner.score_next(token)
    }
    fn fork(&self) -> Box<dyn LmState> {
        Box::new(RecordingState {
            inner: self.inner.fork(),
            ids: self.ids.clone(),
            log: self.log.clone(),
            logged: self.logged,
        })
    }
}

impl LanguageModel for Recording {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn start(&self) -> Option<Box<dyn LmState>> {
        let inner = self.inner.start()?;
        Some(Box::new(RecordingState { inner, ids: BTreeSet::new(), log: self.contexts.clone(), logged: false }))
    }
    fn generate(&self, p: &str, c: &GuardedContext, n: usize, s: u64) -> Result<String, LmError> {
        self.inner.generate(p, c, n, s)
    }
}

pub const QUESTION: &str = "What are the values of the requested records?";
pub const ANSWER: &str = "The values are 41 and 17.";

pub fn set(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

/// A random oracle instance over an atom-set context.
pub struct Instance {
    pub context: Context,
    pub script: OracleScript,
    pub lambda: f64,
    pub penalty: f64,
}

impl Instance {
    pub fn backend(&self) -> Arc<dyn LanguageModel> {
        Arc::new(OracleLm::new(self.script.clone()).unwrap())
    }
}

/// Documents carry random non-empty subsets of `atoms` atoms; at most
/// `max_labels` distinct labels. With `monotone` false some documents
/// lower the utility when present.
pub fn random_instance(rng: &mut ChaCha8Rng, max_labels: usize, monotone: bool) -> Instance {
    let atoms = rng.random_range(2..=5usize);
    let n_docs = rng.random_range(1..=max_labels + 2);
    let names: Vec<String> = (0..atoms).map(|i| format!("a{i}")).collect();
    let mut labels: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut docs = Vec::new();
    for i in 0..n_docs {
        let mut pick: Vec<usize> = (0..atoms).filter(|_| rng.random_bool(0.4)).collect();
        if pick.is_empty() {
            pick.push(rng.random_range(0..atoms));
        }
        if !labels.contains(&pick) && labels.len() >= max_labels {
            pick = labels.iter().next().unwrap().clone();
        }
        labels.insert(pick.clone());
        docs.push(LabeledDocument {
            id: format!("d{i:02}"),
            text: format!("record {i} holds value {}", rng.random_range(0..100)),
            label: Label::atoms(pick.iter().map(|&a| names[a].clone())),
        });
    }
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let context = Context::new(docs).unwrap();

    let penalty = rng.random_range(0.5..3.0);
    let mut required = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let k = rng.random_range(1..=ids.len().min(3));
        let mut s = BTreeSet::new();
        while s.len() < k {
            s.insert(ids[rng.random_range(0..ids.len())].clone());
        }
        required.push(s);
    }
    let mut entry = OracleEntry::new(QUESTION, ANSWER, required);
    entry.utility_full = -rng.random_range(1.1..2.0);
    entry.utility_degraded = entry.utility_full - penalty;
    for id in &ids {
        if rng.random_bool(0.5) {
            let b: f64 = rng.random_range(0.0..0.2);
            let b = if !monotone && rng.random_bool(0.5) { -b - 0.05 } else { b };
            entry.doc_bonus.insert(id.clone(), b);
        }
    }
    let lambda = match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random_range(0.0..penalty),
        2 => rng.random_range(penalty..3.0 * penalty),
        _ => rng.random_range(0.0..0.3),
    };
    Instance { context, script: OracleScript::new(vec![entry]), lambda, penalty }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
