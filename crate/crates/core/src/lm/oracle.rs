//! Scripted oracle backend.
//!
//! Utility is a function of which document ids appear in the prompt:
//! `utility_full` when the documents cover one of an entry's required id
//! sets, `utility_degraded` otherwise, plus optional per-document bonuses.
//! With non-negative bonuses adding documents never lowers utility.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{tokenize, LanguageModel, LmError, LmState, Segment, LOGPROB_FLOOR};
use crate::guard::GuardedContext;

/// How an entry's total log-probability is spread over the completion tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogprobShape {
    #[default]
    Uniform,
    /// Mass concentrated on the first tokens.
    Front,
    /// Mass concentrated on the last tokens.
    Back,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub required: Vec<BTreeSet<String>>,
    pub utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub prompt: String,
    pub completion: String,
    pub required: Vec<BTreeSet<String>>,
    pub utility_full: f64,
    pub utility_degraded: f64,
    /// Additional coverage levels; the best covered one wins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tiers: Vec<Tier>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub doc_bonus: BTreeMap<String, f64>,
    /// Bonus for documents not listed in `doc_bonus`.
    #[serde(default)]
    pub default_bonus: f64,
    #[serde(default)]
    pub shape: LogprobShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introspection_reply: Option<String>,
    /// Ids the backend tries to read during generation, visible or not.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_ids: Vec<String>,
}

impl OracleEntry {
    pub fn new(prompt: impl Into<String>, completion: impl Into<String>, required: Vec<BTreeSet<String>>) -> Self {
        OracleEntry {
            prompt: prompt.into(),
            completion: completion.into(),
            required,
            utility_full: -1.1,
            utility_degraded: -3.1,
            tiers: Vec::new(),
            doc_bonus: BTreeMap::new(),
            default_bonus: 0.0,
            shape: LogprobShape::Uniform,
            wrong_answer: None,
            introspection_reply: None,
            probe_ids: Vec::new(),
        }
    }

    pub fn covers(&self, ids: &BTreeSet<String>) -> bool {
        covers(&self.required, ids)
    }

    /// Scripted utility of the completion given the documents in context.
    pub fn utility(&self, ids: &BTreeSet<String>) -> f64 {
        let mut u = if self.covers(ids) { self.utility_full } else { self.utility_degraded };
        for t in &self.tiers {
            if covers(&t.required, ids) && t.utility > u {
                u = t.utility;
            }
        }
        for id in ids {
            u += self.doc_bonus.get(id).copied().unwrap_or(self.default_bonus);
        }
        u.clamp(-(-LOGPROB_FLOOR).exp() * 0.999, -1.0)
    }
}

fn covers(sets: &[BTreeSet<String>], ids: &BTreeSet<String>) -> bool {
    sets.iter().any(|s| s.is_subset(ids))
}

fn default_unscripted() -> f64 {
    -20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScript {
    pub entries: Vec<OracleEntry>,
    /// Log-probability of completion tokens no entry accounts for.
    #[serde(default = "default_unscripted")]
    pub unscripted_logprob: f64,
}

impl Default for OracleScript {
    fn default() -> Self {
        OracleScript { entries: Vec::new(), unscripted_logprob: default_unscripted() }
    }
}

impl OracleScript {
    pub fn new(entries: Vec<OracleEntry>) -> Self {
        OracleScript { entries, ..OracleScript::default() }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        for e in &self.entries {
            if e.utility_full.is_nan() || e.utility_degraded.is_nan() || e.utility_full <= e.utility_degraded {
                return Err(LmError::InvalidParameter(format!(
                    "entry `{}`: utility_full must exceed utility_degraded",
                    e.prompt
                )));
            }
            if e.utility_full > -1.0 || tokenize(&e.completion).is_empty() {
                return Err(LmError::InvalidParameter(format!(
                    "entry `{}`: needs a non-empty completion and utility_full ≤ -1",
                    e.prompt
                )));
            }
        }
        Ok(())
    }
}

fn canonical(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Index {
    script: OracleScript,
    by_prompt: HashMap<String, Vec<usize>>,
    completions: Vec<Vec<String>>,
}

pub struct OracleLm {
    id: String,
    index: Arc<Index>,
}

impl OracleLm {
    pub fn new(script: OracleScript) -> Result<Self, LmError> {
        script.validate()?;
        let mut by_prompt: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in script.entries.iter().enumerate() {
            by_prompt.entry(canonical(&e.prompt)).or_default().push(i);
        }
        let completions = script.entries.iter().map(|e| tokenize(&e.completion)).collect();
        Ok(OracleLm { id: "oracle".into(), index: Arc::new(Index { script, by_prompt, completions }) })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn script(&self) -> &OracleScript {
        &self.index.script
    }

    fn entries_for(&self, prompt: &str) -> &[usize] {
        self.index.by_prompt.get(&canonical(prompt)).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Log-probability of token `i` of `n` when the total is `total`.
fn shaped_logprob(shape: LogprobShape, total: f64, i: usize, n: usize) -> f64 {
    let front = |j: usize| (total - LOGPROB_FLOOR * j as f64).clamp(LOGPROB_FLOOR, 0.0);
    match shape {
        LogprobShape::Uniform => total / n as f64,
        LogprobShape::Front => front(i),
        LogprobShape::Back => front(n - 1 - i),
    }
}

#[derive(Clone)]
struct OracleState {
    index: Arc<Index>,
    question: Option<String>,
    docs: BTreeSet<String>,
    decoded: Vec<String>,
}

impl LmState for OracleState {
    fn feed(&mut self, segment: &Segment, _tokens: &[String]) {
        match segment {
            Segment::Question(q) => self.question = Some(canonical(q)),
            Segment::Document { id, .. } => {
                self.docs.insert(id.clone());
            }
            _ => {}
        }
    }

    fn score_next(&mut self, token: &str) -> f64 {
        let i = self.decoded.len();
        self.decoded.push(token.to_string());
        let ix = &self.index;
        let candidates = self.question.as_ref().and_then(|q| ix.by_prompt.get(q)).map(Vec::as_slice).unwrap_or(&[]);
        let hit = candidates.iter().copied().find(|&e| {
            let c = &ix.completions[e];
            c.len() > i && c[..=i] == self.decoded[..]
        });
        match hit {
            Some(e) => {
                let entry = &ix.script.entries[e];
                let n = ix.completions[e].len();
                let u = entry.utility(&self.docs);
                shaped_logprob(entry.shape, -(n as f64) * (-u).ln(), i, n)
            }
            None => ix.script.unscripted_logprob,
        }
    }

    fn fork(&self) -> Box<dyn LmState> {
        Box::new(self.clone())
    }
}

fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let toks = tokenize(text);
    if toks.len() <= max_tokens {
        text.to_string()
    } else {
        toks[..max_tokens].join(" ")
    }
}

impl LanguageModel for OracleLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn start(&self) -> Option<Box<dyn LmState>> {
        Some(Box::new(OracleState {
            index: self.index.clone(),
            question: None,
            docs: BTreeSet::new(),
            decoded: Vec::new(),
        }))
    }

    fn generate(
        &self,
        prompt: &str,
        context: &GuardedContext,
        max_tokens: usize,
        _seed: u64,
    ) -> Result<String, LmError> {
        let entries = &self.index.script.entries;
        if let Some(&e) = self.entries_for(prompt).first() {
            let entry = &entries[e];
            for id in &entry.probe_ids {
                let _ = context.get(id);
            }
            let ids: BTreeSet<String> = context.documents().iter().map(|d| d.id.clone()).collect();
            let answer = if entry.covers(&ids) {
                entry.completion.clone()
            } else {
                entry.wrong_answer.clone().unwrap_or_else(|| "I don't know.".into())
            };
            return Ok(truncate_tokens(&answer, max_tokens));
        }
        // An introspection prompt embeds the question of the query it is about.
        let prompt_c = canonical(prompt);
        let found = entries.iter().filter(|e| prompt_c.contains(&canonical(&e.prompt))).max_by_key(|e| e.prompt.len());
        let Some(entry) = found else {
            return Ok("I don't know.".into());
        };
        if let Some(reply) = &entry.introspection_reply {
            return Ok(reply.clone());
        }
        for id in &entry.probe_ids {
            let _ = context.get(id);
        }
        let visible = context.visible_ids();
        let ids = entry.required.iter().find(|s| s.is_subset(&visible)).cloned().unwrap_or(visible);
        Ok(format!("Documents: {}", ids.into_iter().collect::<Vec<_>>().join(", ")))
    }
}
