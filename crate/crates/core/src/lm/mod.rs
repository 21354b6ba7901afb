//! Language-model scoring and generation.
//!
//! A backend scores a fixed completion token by token under a serialized
//! prompt. Utility is negative perplexity. Incremental backends expose an
//! [`LmState`] that can be forked, which is what the prefix cache and the
//! early-stop decoder build on.

pub mod cache;
pub mod knn;
pub mod oracle;
pub mod remote;

use serde::{Deserialize, Serialize};

use crate::corpus::{Context, LabeledDocument};
use crate::guard::GuardedContext;
use crate::lattice::Label;

pub use cache::{ScoreCache, ScoreStats, Scorer, StatsSnapshot};

/// Token log-probabilities are clamped to `[LOGPROB_FLOOR, 0]`.
pub const LOGPROB_FLOOR: f64 = -30.0;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("request needs {needed} tokens but the backend accepts at most {limit}")]
    TokenLimit { needed: usize, limit: usize },
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("invalid backend parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("datastore: {0}")]
    Datastore(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Splits text into alphanumeric runs and single punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Negative perplexity from a sum of natural-log token probabilities.
pub fn utility_from_sum(sum: f64, tokens: usize) -> f64 {
    -(-sum / tokens as f64).exp()
}

fn clamp_logprob(lp: f64) -> f64 {
    if lp.is_nan() {
        LOGPROB_FLOOR
    } else {
        lp.clamp(LOGPROB_FLOOR, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    pub token_logprobs: Vec<f64>,
    pub token_count: usize,
    pub utility: f64,
}

impl ScoredCompletion {
    pub fn from_logprobs(logprobs: Vec<f64>) -> Result<Self, LmError> {
        if logprobs.is_empty() {
            return Err(LmError::EmptyCompletion);
        }
        let token_logprobs: Vec<f64> = logprobs.into_iter().map(clamp_logprob).collect();
        let mut sum = 0.0;
        for lp in &token_logprobs {
            sum += lp;
        }
        let token_count = token_logprobs.len();
        Ok(ScoredCompletion { utility: utility_from_sum(sum, token_count), token_logprobs, token_count })
    }
}

/// Acceptance test `reference − utility ≤ tolerance`.
///
/// `UtilityFloor::within(full, λ)` is exactly the λ-similarity test, so the
/// early-stop decoder and the final decision agree bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityFloor {
    pub reference: f64,
    pub tolerance: f64,
}

impl UtilityFloor {
    pub fn at(floor: f64) -> Self {
        UtilityFloor { reference: floor, tolerance: 0.0 }
    }

    pub fn within(reference: f64, tolerance: f64) -> Self {
        UtilityFloor { reference, tolerance }
    }

    pub fn accepts(&self, utility: f64) -> bool {
        self.reference - utility <= self.tolerance
    }
}

pub struct ScoreRequest<'a> {
    pub prompt: &'a str,
    pub context: &'a Context,
    pub completion: &'a str,
    pub early_stop: Option<UtilityFloor>,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(prompt: &'a str, context: &'a Context, completion: &'a str) -> Self {
        ScoreRequest { prompt, context, completion, early_stop: None }
    }

    pub fn with_floor(mut self, floor: UtilityFloor) -> Self {
        self.early_stop = Some(floor);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreOutcome {
    Complete(ScoredCompletion),
    /// Stopped after `prefix_len` tokens: the floor is out of reach even if
    /// every remaining token had probability 1.
    Rejected {
        prefix_len: usize,
        partial_logprobs: Vec<f64>,
    },
}

impl ScoreOutcome {
    pub fn accepted(&self, floor: &UtilityFloor) -> bool {
        match self {
            ScoreOutcome::Complete(s) => floor.accepts(s.utility),
            ScoreOutcome::Rejected { .. } => false,
        }
    }

    pub fn completed(self) -> Option<ScoredCompletion> {
        match self {
            ScoreOutcome::Complete(s) => Some(s),
            ScoreOutcome::Rejected { .. } => None,
        }
    }

    pub fn utility(&self) -> Option<f64> {
        match self {
            ScoreOutcome::Complete(s) => Some(s.utility),
            ScoreOutcome::Rejected { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One piece of a serialized prompt.
#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Header(String),
    Question(String),
    Document { id: String, label: Label, text: String },
    Cue(String),
}

impl Segment {
    pub fn render(&self) -> String {
        match self {
            Segment::Header(s) | Segment::Cue(s) => s.clone(),
            Segment::Question(q) => format!("Question: {q}"),
            Segment::Document { id, text, .. } => format!("[Doc {id}] {text}"),
        }
    }
}

pub const PROMPT_HEADER: &str = "Answer the question using only the documents below.";
pub const ANSWER_CUE: &str = "Answer:";

/// Canonical prompt layout: header, question, documents from most
/// permissive to most restrictive (ties by id), answer cue.
///
/// Removing the most restrictive documents removes a suffix of the
/// document block, so label-peeled prompts share a long prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedPrompt {
    segments: Vec<Segment>,
}

impl SerializedPrompt {
    pub fn new(question: &str, docs: &[LabeledDocument]) -> Self {
        let mut ordered: Vec<&LabeledDocument> = docs.iter().collect();
        ordered.sort_by(|a, b| a.label.height().cmp(&b.label.height()).then_with(|| a.id.cmp(&b.id)));
        let mut segments = Vec::with_capacity(docs.len() + 3);
        segments.push(Segment::Header(PROMPT_HEADER.to_string()));
        segments.push(Segment::Question(question.to_string()));
        segments.extend(ordered.into_iter().map(|d| Segment::Document {
            id: d.id.clone(),
            label: d.label.clone(),
            text: d.text.clone(),
        }));
        segments.push(Segment::Cue(ANSWER_CUE.to_string()));
        SerializedPrompt { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Rendered text of the first `n` segments, one per line.
    pub fn prefix_text(&self, n: usize) -> String {
        self.segments[..n].iter().map(Segment::render).collect::<Vec<_>>().join("\n")
    }

    pub fn text(&self) -> String {
        self.prefix_text(self.segments.len())
    }
}

/// Incremental scoring state of a backend.
pub trait LmState: Send {
    /// Prompt processing for one segment.
    fn feed(&mut self, segment: &Segment, tokens: &[String]);
    /// Log-probability of `token` as the next completion token; the token
    /// is then appended to the decoded history.
    fn score_next(&mut self, token: &str) -> f64;
    fn fork(&self) -> Box<dyn LmState>;
}

pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;

    fn concurrent_safe(&self) -> bool {
        true
    }

    /// Fresh incremental state, for backends that support one.
    fn start(&self) -> Option<Box<dyn LmState>> {
        None
    }

    /// Scores a whole completion. The default drives [`LanguageModel::start`].
    fn score_whole(&self, prompt: &SerializedPrompt, completion: &[String]) -> Result<Vec<f64>, LmError> {
        let mut state =
            self.start().ok_or_else(|| LmError::Unavailable(format!("{} cannot score incrementally", self.id())))?;
        for seg in prompt.segments() {
            state.feed(seg, &tokenize(&seg.render()));
        }
        Ok(completion.iter().map(|t| state.score_next(t)).collect())
    }

    fn generate(&self, prompt: &str, context: &GuardedContext, max_tokens: usize, seed: u64)
        -> Result<String, LmError>;
}

/// Scores token by token, stopping once `floor` is out of reach.
pub(crate) fn decode(
    state: &mut dyn LmState,
    completion: &[String],
    floor: Option<UtilityFloor>,
    counts: &mut EvalCounts,
) -> Result<ScoreOutcome, LmError> {
    let mut logprobs = Vec::with_capacity(completion.len());
    let mut sum = 0.0;
    for tok in completion {
        let lp = clamp_logprob(state.score_next(tok));
        counts.completion_tokens += 1;
        sum += lp;
        logprobs.push(lp);
        if let Some(f) = floor {
            // Remaining tokens can contribute at most log 1 = 0.
            if logprobs.len() < completion.len() && !f.accepts(utility_from_sum(sum, completion.len())) {
                return Ok(ScoreOutcome::Rejected { prefix_len: logprobs.len(), partial_logprobs: logprobs });
            }
        }
    }
    ScoredCompletion::from_logprobs(logprobs).map(ScoreOutcome::Complete)
}

/// Applies the early-stop rule to an already complete list of log-probabilities.
pub(crate) fn outcome_from_logprobs(logprobs: Vec<f64>, floor: Option<UtilityFloor>) -> Result<ScoreOutcome, LmError> {
    if let Some(f) = floor {
        let n = logprobs.len();
        let mut sum = 0.0;
        for (i, lp) in logprobs.iter().enumerate() {
            sum += clamp_logprob(*lp);
            if i + 1 < n && !f.accepts(utility_from_sum(sum, n)) {
                let partial = logprobs[..=i].iter().copied().map(clamp_logprob).collect();
                return Ok(ScoreOutcome::Rejected { prefix_len: i + 1, partial_logprobs: partial });
            }
        }
    }
    ScoredCompletion::from_logprobs(logprobs).map(ScoreOutcome::Complete)
}

/// Uncached scoring. Returns the outcome and the tokens evaluated.
pub fn score_counted(
    backend: &dyn LanguageModel,
    req: &ScoreRequest<'_>,
) -> Result<(ScoreOutcome, EvalCounts), LmError> {
    let completion = tokenize(req.completion);
    if completion.is_empty() {
        return Err(LmError::EmptyCompletion);
    }
    let prompt = SerializedPrompt::new(req.prompt, req.context.documents());
    let mut counts = EvalCounts::default();
    match backend.start() {
        Some(mut state) => {
            for seg in prompt.segments() {
                let toks = tokenize(&seg.render());
                counts.prompt_tokens += toks.len() as u64;
                state.feed(seg, &toks);
            }
            let out = decode(state.as_mut(), &completion, req.early_stop, &mut counts)?;
            Ok((out, counts))
        }
        None => {
            let lps = backend.score_whole(&prompt, &completion)?;
            counts.prompt_tokens += tokenize(&prompt.text()).len() as u64;
            counts.completion_tokens += lps.len() as u64;
            Ok((outcome_from_logprobs(lps, req.early_stop)?, counts))
        }
    }
}

pub fn score(backend: &dyn LanguageModel, req: &ScoreRequest<'_>) -> Result<ScoreOutcome, LmError> {
    score_counted(backend, req).map(|(o, _)| o)
}

/// Scoring with an early-stop floor; identical to [`score`] otherwise.
pub fn early_stop_score(
    backend: &dyn LanguageModel,
    req: &ScoreRequest<'_>,
    floor: UtilityFloor,
) -> Result<ScoreOutcome, LmError> {
    let req = ScoreRequest { early_stop: Some(floor), ..*req };
    score(backend, &req)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Backend that returns a fixed log-probability sequence for any request.
    pub struct FixedLm {
        pub logprobs: Vec<f64>,
    }

    struct FixedState {
        logprobs: Vec<f64>,
        pos: usize,
    }

    impl LmState for FixedState {
        fn feed(&mut self, _: &Segment, _: &[String]) {}
        fn score_next(&mut self, _: &str) -> f64 {
            let lp = self.logprobs.get(self.pos).copied().unwrap_or(0.0);
            self.pos += 1;
            lp
        }
        fn fork(&self) -> Box<dyn LmState> {
            Box::new(FixedState { logprobs: self.logprobs.clone(), pos: self.pos })
        }
    }

    impl LanguageModel for FixedLm {
        fn id(&self) -> &str {
            "fixed"
        }
        fn start(&self) -> Option<Box<dyn LmState>> {
            Some(Box::new(FixedState { logprobs: self.logprobs.clone(), pos: 0 }))
        }
        fn generate(&self, _: &str, _: &GuardedContext, _: usize, _: u64) -> Result<String, LmError> {
            Ok("fixed".into())
        }
    }

    pub fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }
}
