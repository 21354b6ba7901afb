//! End-to-end label propagation: generate, search, select, regenerate.
//!
//! Regeneration goes through a [`GuardedContext`] holding only the documents
//! at or below the chosen label, and the outcome carries the guard's audit
//! trail, so the returned completion provably depends on nothing else.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Context;
use crate::guard::{AuditTrail, GuardedContext};
use crate::lattice::{minimal_elements, Label, Lattice, LatticeError};
use crate::lm::{LanguageModel, LmError, Scorer};
use crate::search::{find_optimal_labels, SearchConfig, SearchError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("retrieval returned an empty context")]
    EmptyContext,
    #[error("the backend generated an empty completion")]
    EmptyGeneration,
    #[error("safety check failed: {0}")]
    SafetyViolation(String),
    #[error("introspection template is missing the {0} placeholder")]
    Template(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rank {
    #[default]
    AtomCount,
    Height,
}

impl Rank {
    pub fn of(&self, label: &Label) -> u64 {
        match self {
            Rank::AtomCount => label.atom_count() as u64,
            Rank::Height => label.height(),
        }
    }
}

/// How the output label is picked from the candidate antichain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// The sole candidate; canonical order decides otherwise.
    UniqueMinimum,
    Rank {
        rank: Rank,
    },
    #[default]
    FirstCanonical,
}

/// Picks the candidate minimizing `rank`, ties by canonical order.
pub fn select_label_by<K: Ord>(candidates: &[Label], rank: impl Fn(&Label) -> K) -> Option<Label> {
    candidates.iter().min_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.canonical_cmp(b))).cloned()
}

pub fn select_label(candidates: &[Label], policy: SelectionPolicy) -> Option<Label> {
    match policy {
        SelectionPolicy::UniqueMinimum | SelectionPolicy::FirstCanonical => select_label_by(candidates, |_| 0),
        SelectionPolicy::Rank { rank } => select_label_by(candidates, |l| rank.of(l)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub search: SearchConfig,
    pub policy: SelectionPolicy,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            search: SearchConfig::default(),
            policy: SelectionPolicy::default(),
            max_tokens: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationOutcome {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub original_label: Label,
    pub candidate_labels: Vec<Label>,
    pub chosen_label: Label,
    pub original_completion: String,
    /// The completion the λ-tests scored.
    pub target_completion: String,
    pub regenerated_completion: String,
    pub regenerated: bool,
    pub audit: AuditTrail,
    pub lm_calls: usize,
    pub closure_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl PropagationOutcome {
    /// Checks that every exposed document lies at or below the chosen label.
    pub fn verify_safety(&self, context: &Context) -> Result<(), PipelineError> {
        let allowed = context.subcontext(&self.chosen_label)?.ids();
        if let Some(id) = self.audit.exposed.iter().find(|id| !allowed.contains(*id)) {
            return Err(PipelineError::SafetyViolation(format!(
                "document {id} was exposed but is not at or below {}",
                self.chosen_label
            )));
        }
        Ok(())
    }
}

/// Runs the wrapper on an already retrieved context.
///
/// `target` replaces the generated completion in the λ-tests when given.
pub fn propagate(
    scorer: &Scorer,
    lattice: &Lattice,
    context: &Context,
    x: &str,
    target: Option<&str>,
    cfg: &PropagationConfig,
) -> Result<PropagationOutcome, PipelineError> {
    let started = Instant::now();
    if context.is_empty() {
        return Err(PipelineError::EmptyContext);
    }
    let backend: &Arc<dyn LanguageModel> = scorer.backend();
    let full_label = context.label(lattice)?;

    let original_guard = GuardedContext::new(context.clone());
    let y = backend.generate(x, &original_guard, cfg.max_tokens, cfg.seed)?;
    let target = target.map(str::to_string).unwrap_or_else(|| y.clone());
    if crate::lm::tokenize(&target).is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }

    let (candidates, lm_calls, closure_size, diagnostic) =
        match find_optimal_labels(scorer, context, x, &target, &cfg.search) {
            Ok(r) => (r.labels, r.lm_calls_made, r.closure_size, None),
            Err(SearchError::BudgetExceeded { limit, fallback }) => {
                (vec![fallback], limit, 0, Some(format!("search budget of {limit} calls exhausted; label kept")))
            }
            Err(e) => return Err(e.into()),
        };
    let chosen = select_label(&candidates, cfg.policy).expect("search never returns an empty set");

    let (regenerated_completion, regenerated, audit) = if chosen == full_label {
        (y.clone(), false, original_guard.audit())
    } else {
        let guard = GuardedContext::new(context.subcontext(&chosen)?);
        let y2 = backend.generate(x, &guard, cfg.max_tokens, cfg.seed)?;
        (y2, true, guard.audit())
    };

    let outcome = PropagationOutcome {
        id: None,
        original_label: full_label,
        candidate_labels: candidates,
        chosen_label: chosen,
        original_completion: y,
        target_completion: target,
        regenerated_completion,
        regenerated,
        audit,
        lm_calls,
        closure_size,
        wall_ms: Some(started.elapsed().as_millis() as u64),
        diagnostic,
    };
    outcome.verify_safety(context)?;
    Ok(outcome)
}

pub const DEFAULT_INTROSPECTION_TEMPLATE: &str = "\
Below are documents, a question and an answer produced from the documents.
Name the documents the answer relies on, as a single line `Documents: <id>, <id>`.

Example:
{example}

{documents}
Question: {question}
Answer: {answer}
";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntrospectionResult {
    pub labels: Vec<Label>,
    pub reply: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

pub fn render_introspection(
    template: &str,
    context: &Context,
    x: &str,
    y: &str,
    example: &str,
) -> Result<String, PipelineError> {
    for p in ["{documents}", "{question}", "{answer}", "{example}"] {
        if !template.contains(p) {
            return Err(PipelineError::Template(p));
        }
    }
    let docs = context.documents().iter().map(|d| format!("[Doc {}] {}\n", d.id, d.text)).collect::<String>();
    Ok(template
        .replace("{example}", example)
        .replace("{documents}", &docs)
        .replace("{question}", x)
        .replace("{answer}", y))
}

/// Parses `Documents: a, b[; c, d]` into id sets; `None` for anything else.
pub fn parse_introspection_reply(reply: &str) -> Option<Vec<BTreeSet<String>>> {
    let line = reply.trim();
    if line.contains('\n') {
        return None;
    }
    let rest = line.strip_prefix("Documents:")?;
    let mut sets = Vec::new();
    for group in rest.split(';') {
        let ids: BTreeSet<String> = group.split(',').map(|s| s.trim().to_string()).collect();
        if ids.is_empty() || ids.iter().any(String::is_empty) {
            return None;
        }
        sets.push(ids);
    }
    Some(sets)
}

/// Asks the backend which documents mattered and joins their labels.
/// Unusable replies give the full-context label.
#[allow(clippy::too_many_arguments)]
pub fn introspect_labels(
    backend: &dyn LanguageModel,
    lattice: &Lattice,
    context: &Context,
    x: &str,
    y: &str,
    template: &str,
    example: &str,
    seed: u64,
) -> Result<IntrospectionResult, PipelineError> {
    let prompt = render_introspection(template, context, x, y, example)?;
    let full = context.label(lattice)?;
    let guard = GuardedContext::new(context.clone());
    let reply = backend.generate(&prompt, &guard, 64, seed)?;
    let fallback =
        |why: String| IntrospectionResult { labels: vec![full.clone()], reply: reply.clone(), diagnostic: Some(why) };
    let Some(sets) = parse_introspection_reply(&reply) else {
        return Ok(fallback(format!("unparseable reply: {reply:?}")));
    };
    let mut labels = Vec::new();
    for ids in sets {
        let mut docs = Vec::new();
        for id in &ids {
            match context.get(id) {
                Some(d) => docs.push(&d.label),
                None => return Ok(fallback(format!("reply names unknown document {id}"))),
            }
        }
        labels.push(lattice.context_label(docs)?);
    }
    labels.sort_by(Label::canonical_cmp);
    Ok(IntrospectionResult { labels: minimal_elements(&labels)?, reply, diagnostic: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledDocument;
    use crate::lattice::LatticeSpec;
    use crate::lm::oracle::{OracleEntry, OracleLm, OracleScript};

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn integrity() -> Lattice {
        Lattice::new(LatticeSpec::TotalOrder { levels: vec!["HiInt".into(), "LoInt".into()] }).unwrap()
    }

    fn two_sources(lattice: &Lattice) -> Context {
        Context::new(vec![
            LabeledDocument {
                id: "wiki".into(),
                text: "Paris is the capital.".into(),
                label: lattice.level("HiInt").unwrap(),
            },
            LabeledDocument {
                id: "blog".into(),
                text: "Paris, obviously.".into(),
                label: lattice.level("LoInt").unwrap(),
            },
        ])
        .unwrap()
    }

    fn oracle(required: Vec<BTreeSet<String>>) -> Scorer {
        let mut e = OracleEntry::new("What is the capital?", "Paris", required);
        e.wrong_answer = Some("Lyon".into());
        Scorer::new(Arc::new(OracleLm::new(OracleScript::new(vec![e])).unwrap()))
    }

    #[test]
    fn trusted_source_upgrades_the_label() {
        let l = integrity();
        let ctx = two_sources(&l);
        let s = oracle(vec![set(&["wiki"]), set(&["blog"])]);
        let out = propagate(&s, &l, &ctx, "What is the capital?", None, &PropagationConfig::default()).unwrap();
        assert_eq!(out.original_label.to_string(), "LoInt");
        assert_eq!(out.chosen_label.to_string(), "HiInt");
        assert!(out.regenerated);
        assert_eq!(out.regenerated_completion, "Paris");
        assert_eq!(out.audit.exposed, set(&["wiki"]));
    }

    #[test]
    fn untrusted_only_keeps_the_label() {
        let l = integrity();
        let ctx = two_sources(&l);
        let s = oracle(vec![set(&["blog"])]);
        let out = propagate(&s, &l, &ctx, "What is the capital?", None, &PropagationConfig::default()).unwrap();
        assert_eq!(out.chosen_label, out.original_label);
        assert!(!out.regenerated);
        assert_eq!(out.regenerated_completion, out.original_completion);
    }

    #[test]
    fn single_label_context_costs_one_call() {
        let l = integrity();
        let ctx = two_sources(&l).filter(|d| d.id == "wiki");
        let s = oracle(vec![set(&["wiki"])]);
        let out = propagate(&s, &l, &ctx, "What is the capital?", None, &PropagationConfig::default()).unwrap();
        assert_eq!(out.lm_calls, 1);
        assert_eq!(s.stats().requests, 1);
        assert!(!out.regenerated);
    }

    #[test]
    fn selection() {
        let abc = Label::atoms(["A", "B", "C"]);
        let ad = Label::atoms(["A", "D"]);
        let atoms = SelectionPolicy::Rank { rank: Rank::AtomCount };
        assert_eq!(select_label(&[abc.clone(), ad.clone()], atoms), Some(ad.clone()));
        let ab = Label::atoms(["A", "B"]);
        let cd = Label::atoms(["C", "D"]);
        assert_eq!(select_label(&[cd.clone(), ab.clone()], atoms), Some(ab.clone()));
        assert_eq!(select_label(&[cd, ab.clone()], SelectionPolicy::FirstCanonical), Some(ab));
        let hi = integrity().level("HiInt").unwrap();
        assert_eq!(select_label(std::slice::from_ref(&hi), SelectionPolicy::UniqueMinimum), Some(hi));
        assert_eq!(select_label(&[], atoms), None);
    }

    fn fig4() -> (Lattice, Context) {
        let l = Lattice::new(LatticeSpec::Atomset { atoms: ["A", "B", "C", "D"].map(String::from).to_vec() }).unwrap();
        let ctx = Context::new(
            ["A", "B", "C", "D"]
                .iter()
                .map(|id| LabeledDocument { id: id.to_string(), text: format!("doc {id}"), label: Label::atoms([*id]) })
                .collect(),
        )
        .unwrap();
        (l, ctx)
    }

    fn introspect_with(reply: &str) -> IntrospectionResult {
        let (l, ctx) = fig4();
        let mut e = OracleEntry::new("q?", "a", vec![set(&["A"])]);
        e.introspection_reply = Some(reply.into());
        let lm = OracleLm::new(OracleScript::new(vec![e])).unwrap();
        introspect_labels(&lm, &l, &ctx, "q?", "a", DEFAULT_INTROSPECTION_TEMPLATE, "(none)", 0).unwrap()
    }

    #[test]
    fn introspection_replies() {
        let r = introspect_with("Documents: A, D");
        assert_eq!(r.labels, vec![Label::atoms(["A", "D"])]);
        assert!(r.diagnostic.is_none());
        let r = introspect_with("I think it was the first one");
        assert_eq!(r.labels, vec![Label::atoms(["A", "B", "C", "D"])]);
        assert!(r.diagnostic.is_some());
        let r = introspect_with("Documents: A, B, C, D");
        assert_eq!(r.labels, vec![Label::atoms(["A", "B", "C", "D"])]);
        let r = introspect_with("Documents: A, B, C; A, D");
        assert_eq!(r.labels.len(), 2);
        let r = introspect_with("Documents: A, Z");
        assert!(r.diagnostic.is_some());
        assert!(parse_introspection_reply("").is_none());
        assert!(parse_introspection_reply("Documents: ").is_none());
    }

    #[test]
    fn template_needs_placeholders() {
        let (_, ctx) = fig4();
        assert!(matches!(render_introspection("{documents}", &ctx, "q", "a", ""), Err(PipelineError::Template(_))));
        let p = render_introspection(DEFAULT_INTROSPECTION_TEMPLATE, &ctx, "q", "a", "ex").unwrap();
        assert!(p.contains("[Doc A] doc A"));
    }
}
