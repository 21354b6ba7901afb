//! Score cache with prompt-prefix sharing, and the instrumented [`Scorer`]
//! every search and pipeline call goes through.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    decode, outcome_from_logprobs, score_counted, tokenize, EvalCounts, LanguageModel, LmError, LmState, ScoreOutcome,
    ScoreRequest, ScoredCompletion, SerializedPrompt,
};

type ExactKey = (String, String, String);
type PrefixKey = (String, String);

/// Shared cache of completed scores and forkable prompt-prefix states.
///
/// Exact hits are keyed by backend id, serialized prompt bytes and
/// completion. Prefix states are stored at every segment boundary, so a
/// prompt that shares leading segments with an earlier one only evaluates
/// the rest.
pub struct ScoreCache {
    exact: Mutex<HashMap<ExactKey, ScoredCompletion>>,
    prefixes: Mutex<HashMap<PrefixKey, Box<dyn LmState>>>,
    max_prefix_entries: usize,
}

impl Default for ScoreCache {
    fn default() -> Self {
        ScoreCache::new(200_000)
    }
}

impl ScoreCache {
    pub fn new(max_prefix_entries: usize) -> Self {
        ScoreCache { exact: Mutex::default(), prefixes: Mutex::default(), max_prefix_entries }
    }

    pub fn len(&self) -> usize {
        self.exact.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup_exact(&self, key: &ExactKey) -> Option<ScoredCompletion> {
        self.exact.lock().expect("cache lock").get(key).cloned()
    }

    fn longest_prefix(&self, backend: &str, keys: &[String]) -> Option<(usize, Box<dyn LmState>)> {
        let map = self.prefixes.lock().expect("cache lock");
        for n in (1..=keys.len()).rev() {
            if let Some(state) = map.get(&(backend.to_string(), keys[n - 1].clone())) {
                return Some((n, state.fork()));
            }
        }
        None
    }

    fn store_prefix(&self, backend: &str, key: String, state: Box<dyn LmState>) {
        let mut map = self.prefixes.lock().expect("cache lock");
        if map.len() >= self.max_prefix_entries {
            map.clear();
        }
        map.entry((backend.to_string(), key)).or_insert(state);
    }
}

fn prefix_keys(prompt: &SerializedPrompt) -> Vec<String> {
    let mut keys = Vec::with_capacity(prompt.segments().len());
    let mut acc = String::new();
    for seg in prompt.segments() {
        acc.push_str(&seg.render());
        acc.push('\u{1f}');
        keys.push(acc.clone());
    }
    keys
}

/// Prefix-sharing scoring through `cache`. Results are identical to
/// uncached scoring; only the evaluation counts differ.
pub fn cached_score(
    cache: &ScoreCache,
    backend: &dyn LanguageModel,
    req: &ScoreRequest<'_>,
) -> Result<(ScoreOutcome, EvalCounts, CacheEvent), LmError> {
    let completion = tokenize(req.completion);
    if completion.is_empty() {
        return Err(LmError::EmptyCompletion);
    }
    let prompt = SerializedPrompt::new(req.prompt, req.context.documents());
    let key = (backend.id().to_string(), prompt.text(), req.completion.to_string());
    if let Some(hit) = cache.lookup_exact(&key) {
        return Ok((ScoreOutcome::Complete(hit), EvalCounts::default(), CacheEvent::ExactHit));
    }

    let mut counts = EvalCounts::default();
    let (outcome, event) = match backend.start() {
        Some(fresh) => {
            let keys = prefix_keys(&prompt);
            let (reused, mut state, event) = match cache.longest_prefix(backend.id(), &keys) {
                Some((n, s)) => (n, s, CacheEvent::PrefixHit { segments: n }),
                None => (0, fresh, CacheEvent::Miss),
            };
            for (i, seg) in prompt.segments().iter().enumerate().skip(reused) {
                let toks = tokenize(&seg.render());
                counts.prompt_tokens += toks.len() as u64;
                state.feed(seg, &toks);
                cache.store_prefix(backend.id(), keys[i].clone(), state.fork());
            }
            (decode(state.as_mut(), &completion, req.early_stop, &mut counts)?, event)
        }
        None => {
            let lps = backend.score_whole(&prompt, &completion)?;
            counts.prompt_tokens += tokenize(&prompt.text()).len() as u64;
            counts.completion_tokens += lps.len() as u64;
            (outcome_from_logprobs(lps, req.early_stop)?, CacheEvent::Miss)
        }
    };
    if let ScoreOutcome::Complete(s) = &outcome {
        cache.exact.lock().expect("cache lock").insert(key, s.clone());
    }
    Ok((outcome, counts, event))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheEvent {
    Miss,
    ExactHit,
    PrefixHit { segments: usize },
}

#[derive(Debug, Default)]
pub struct ScoreStats {
    requests: AtomicU64,
    exact_hits: AtomicU64,
    prefix_hits: AtomicU64,
    rejected: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    /// Score requests issued.
    pub requests: u64,
    pub exact_hits: u64,
    pub prefix_hits: u64,
    /// Requests stopped early by the floor.
    pub rejected: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ScoreStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            exact_hits: self.exact_hits.load(Ordering::Relaxed),
            prefix_hits: self.prefix_hits.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

/// A backend plus an optional shared cache and per-scorer counters.
#[derive(Clone)]
pub struct Scorer {
    backend: Arc<dyn LanguageModel>,
    cache: Option<Arc<ScoreCache>>,
    stats: Arc<ScoreStats>,
}

impl Scorer {
    pub fn new(backend: Arc<dyn LanguageModel>) -> Self {
        Scorer { backend, cache: None, stats: Arc::default() }
    }

    pub fn with_cache(backend: Arc<dyn LanguageModel>, cache: Arc<ScoreCache>) -> Self {
        Scorer { backend, cache: Some(cache), stats: Arc::default() }
    }

    /// Same backend and cache, fresh counters.
    pub fn fork(&self) -> Self {
        Scorer { backend: self.backend.clone(), cache: self.cache.clone(), stats: Arc::default() }
    }

    pub fn backend(&self) -> &Arc<dyn LanguageModel> {
        &self.backend
    }

    pub fn cache(&self) -> Option<&Arc<ScoreCache>> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreOutcome, LmError> {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let (outcome, counts) = match &self.cache {
            Some(cache) => {
                let (o, c, event) = cached_score(cache, self.backend.as_ref(), req)?;
                match event {
                    CacheEvent::ExactHit => self.stats.exact_hits.fetch_add(1, Ordering::Relaxed),
                    CacheEvent::PrefixHit { .. } => self.stats.prefix_hits.fetch_add(1, Ordering::Relaxed),
                    CacheEvent::Miss => 0,
                };
                (o, c)
            }
            None => score_counted(self.backend.as_ref(), req)?,
        };
        if matches!(outcome, ScoreOutcome::Rejected { .. }) {
            self.stats.rejected.fetch_add(1, Ordering::Relaxed);
        }
        self.stats.prompt_tokens.fetch_add(counts.prompt_tokens, Ordering::Relaxed);
        self.stats.completion_tokens.fetch_add(counts.completion_tokens, Ordering::Relaxed);
        Ok(outcome)
    }
}
