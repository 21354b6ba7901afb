//! λ-similar label search.
//!
//! The search walks the realized lattice of a context downwards from the
//! full-context label. A child is explored only if its subcontext keeps the
//! completion's utility within λ of the full context; a node none of whose
//! children qualify is emitted. The emitted labels, reduced to their
//! minimal elements, form the result.
//!
//! Optionally, labels whose Shapley value is below a threshold are pruned,
//! either from the children considered during the walk or from the final
//! result.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Context;
use crate::lattice::{minimal_elements, Label, LatticeError, RealizedLattice, DEFAULT_MAX_DISTINCT_LABELS};
use crate::lm::{LmError, ScoreOutcome, ScoreRequest, Scorer, UtilityFloor};

/// Distinct labels allowed for exhaustive enumeration (brute force, exact Shapley).
pub const MAX_EXHAUSTIVE_LABELS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("cannot search an empty context")]
    EmptyContext,
    #[error("search exceeded {limit} language-model calls; the safe answer is {fallback}")]
    BudgetExceeded { limit: usize, fallback: Label },
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapleyMode {
    Exact,
    Sampled { samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStage {
    /// Never test or return a label above a low-value generator; the walk
    /// passes through such labels to reach the ones below.
    #[default]
    Pre,
    /// Filter the result set.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub threshold: f64,
    pub mode: ShapleyMode,
    #[serde(default)]
    pub stage: FilterStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub lambda: f64,
    pub shapley: Option<ShapleyConfig>,
    pub memoize: bool,
    pub max_lm_calls: usize,
    pub max_distinct_labels: usize,
    pub early_stop: bool,
    /// Test sibling labels concurrently when the backend allows it.
    pub parallel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 0.5,
            shapley: None,
            memoize: true,
            max_lm_calls: 4096,
            max_distinct_labels: DEFAULT_MAX_DISTINCT_LABELS,
            early_stop: true,
            parallel: false,
        }
    }
}

impl SearchConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        SearchConfig { lambda, ..SearchConfig::default() }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(SearchError::InvalidConfig(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if let Some(ShapleyConfig { mode: ShapleyMode::Sampled { samples: 0, .. }, .. }) = self.shapley {
            return Err(SearchError::InvalidConfig("Shapley sample count must be at least 1".into()));
        }
        if self.shapley.is_some_and(|s| s.threshold.is_nan()) {
            return Err(SearchError::InvalidConfig("Shapley threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Test,
    Pruned,
    Emit,
}

/// One line of the search trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub kind: TraceKind,
    pub label: Label,
    pub docs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop: Option<f64>,
    pub qualified: bool,
    pub early_stopped: bool,
}

pub fn write_trace(events: &[TraceEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelSearchResult {
    pub labels: Vec<Label>,
    /// Utility drop of each returned label, aligned with `labels`.
    pub utility_drops: Vec<f64>,
    pub full_label: Label,
    pub full_utility: f64,
    /// Scoring calls made by the walk, including the full-context pass.
    pub lm_calls_made: usize,
    /// Scoring calls spent on Shapley values.
    pub shapley_calls: usize,
    pub nodes_visited: usize,
    pub closure_size: usize,
    pub pruned_by_shapley: Vec<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shapley_values: Option<Vec<(Label, f64)>>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

/// Outcome of one λ-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaTest {
    pub qualifies: bool,
    /// `None` when scoring stopped early.
    pub utility: Option<f64>,
}

fn mask_context(ctx: &Context, rl: &RealizedLattice, mask: u64) -> Context {
    ctx.filter(|d| rl.generator_index(&d.label).is_some_and(|g| mask & (1 << g) != 0))
}

fn lambda_test(
    scorer: &Scorer,
    x: &str,
    y: &str,
    sub: &Context,
    floor: UtilityFloor,
    early_stop: bool,
) -> Result<LambdaTest, LmError> {
    let mut req = ScoreRequest::new(x, sub, y);
    if early_stop {
        req = req.with_floor(floor);
    }
    let out = scorer.score(&req)?;
    Ok(LambdaTest { qualifies: out.accepted(&floor), utility: out.utility() })
}

/// Whether the utility of `y` drops by at most `lambda` on the subcontext of `label`.
#[allow(clippy::too_many_arguments)]
pub fn is_lambda_similar(
    scorer: &Scorer,
    x: &str,
    y: &str,
    full_utility: f64,
    context: &Context,
    label: &Label,
    lambda: f64,
) -> Result<bool, SearchError> {
    let sub = context.subcontext(label)?;
    Ok(lambda_test(scorer, x, y, &sub, UtilityFloor::within(full_utility, lambda), true)?.qualifies)
}

fn full_utility(scorer: &Scorer, x: &str, y: &str, ctx: &Context) -> Result<f64, LmError> {
    match scorer.score(&ScoreRequest::new(x, ctx, y))? {
        ScoreOutcome::Complete(s) => Ok(s.utility),
        ScoreOutcome::Rejected { .. } => unreachable!("no floor was set"),
    }
}

struct Walk<'a> {
    scorer: &'a Scorer,
    ctx: &'a Context,
    x: &'a str,
    y: &'a str,
    cfg: &'a SearchConfig,
    rl: &'a RealizedLattice,
    floor: UtilityFloor,
    full: f64,
    excluded: u64,
    parallel: bool,
    calls: AtomicUsize,
    tests: Mutex<HashMap<usize, LambdaTest>>,
    visited: BTreeSet<usize>,
    emitted: BTreeSet<usize>,
    pruned: BTreeSet<usize>,
    trace: Vec<TraceEvent>,
    nodes_visited: usize,
}

impl Walk<'_> {
    fn test(&self, node: usize) -> Result<LambdaTest, SearchError> {
        if node == self.rl.top() {
            return Ok(LambdaTest { qualifies: true, utility: Some(self.full) });
        }
        if self.cfg.memoize {
            if let Some(t) = self.tests.lock().expect("memo lock").get(&node) {
                return Ok(*t);
            }
        }
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.cfg.max_lm_calls {
            return Err(SearchError::BudgetExceeded {
                limit: self.cfg.max_lm_calls,
                fallback: self.rl.top_label().clone(),
            });
        }
        let sub = mask_context(self.ctx, self.rl, self.rl.mask(node));
        let t = lambda_test(self.scorer, self.x, self.y, &sub, self.floor, self.cfg.early_stop)?;
        if self.cfg.memoize {
            self.tests.lock().expect("memo lock").insert(node, t);
        }
        Ok(t)
    }

    fn event(&self, kind: TraceKind, node: usize, t: Option<LambdaTest>) -> TraceEvent {
        let utility = t.and_then(|t| t.utility);
        TraceEvent {
            kind,
            label: self.rl.label(node).clone(),
            docs: mask_context(self.ctx, self.rl, self.rl.mask(node)).len(),
            utility,
            drop: utility.map(|u| self.full - u),
            qualified: t.is_some_and(|t| t.qualifies),
            early_stopped: t.is_some_and(|t| t.utility.is_none()),
        }
    }

    fn visit(&mut self, node: usize) -> Result<(), SearchError> {
        if self.cfg.memoize && !self.visited.insert(node) {
            return Ok(());
        }
        self.nodes_visited += 1;
        let mut kids = Vec::new();
        let mut through = Vec::new();
        for &c in self.rl.children_of(node) {
            if self.rl.mask(c) & self.excluded != 0 {
                if self.pruned.insert(c) {
                    self.trace.push(self.event(TraceKind::Pruned, c, None));
                }
                through.push(c);
            } else {
                kids.push(c);
            }
        }
        let results: Vec<Result<LambdaTest, SearchError>> = if self.parallel && kids.len() > 1 {
            let this = &*self;
            kids.par_iter().map(|&c| this.test(c)).collect()
        } else {
            kids.iter().map(|&c| self.test(c)).collect()
        };
        let mut qualifying = Vec::new();
        for (&c, r) in kids.iter().zip(results) {
            let t = r?;
            self.trace.push(self.event(TraceKind::Test, c, Some(t)));
            if t.qualifies {
                qualifying.push(c);
            }
        }
        let allowed = self.rl.mask(node) & self.excluded == 0;
        if qualifying.is_empty() && allowed && self.emitted.insert(node) {
            self.trace.push(self.event(TraceKind::Emit, node, None));
        }
        for c in qualifying.into_iter().chain(through) {
            self.visit(c)?;
        }
        Ok(())
    }
}

/// Runs the label search on `context` for prompt `x` and completion `y`.
pub fn find_optimal_labels(
    scorer: &Scorer,
    context: &Context,
    x: &str,
    y: &str,
    cfg: &SearchConfig,
) -> Result<LabelSearchResult, SearchError> {
    cfg.validate()?;
    if context.is_empty() {
        return Err(SearchError::EmptyContext);
    }
    let rl = RealizedLattice::build(context.labels(), cfg.max_distinct_labels)?;
    if cfg.max_lm_calls == 0 {
        return Err(SearchError::BudgetExceeded { limit: 0, fallback: rl.top_label().clone() });
    }
    let full = full_utility(scorer, x, y, context)?;

    let mut shapley_calls = 0;
    let mut shapley_values_out = None;
    let mut excluded_generators = 0u64;
    if let Some(sc) = &cfg.shapley {
        let (phi, calls) = shapley_for(scorer, context, &rl, x, y, sc.mode)?;
        shapley_calls = calls;
        for (g, v) in phi.iter().enumerate() {
            if *v < sc.threshold {
                excluded_generators |= 1 << g;
            }
        }
        shapley_values_out = Some(rl.generators().iter().cloned().zip(phi).collect::<Vec<_>>());
    }
    let pre = cfg.shapley.is_some_and(|s| s.stage == FilterStage::Pre);

    let mut walk = Walk {
        scorer,
        ctx: context,
        x,
        y,
        cfg,
        rl: &rl,
        floor: UtilityFloor::within(full, cfg.lambda),
        full,
        excluded: if pre { excluded_generators } else { 0 },
        parallel: cfg.parallel && scorer.backend().concurrent_safe(),
        calls: AtomicUsize::new(1),
        tests: Mutex::default(),
        visited: BTreeSet::new(),
        emitted: BTreeSet::new(),
        pruned: BTreeSet::new(),
        trace: Vec::new(),
        nodes_visited: 0,
    };
    walk.visit(rl.top())?;

    if walk.emitted.is_empty() {
        walk.emitted.insert(rl.top());
    }
    let emitted: Vec<usize> = walk.emitted.iter().copied().collect();
    let mut minimal: Vec<usize> =
        emitted.iter().copied().filter(|&a| !emitted.iter().any(|&b| b != a && rl.leq_nodes(b, a))).collect();
    if !pre && cfg.shapley.is_some() {
        let kept: Vec<usize> = minimal.iter().copied().filter(|&n| rl.mask(n) & excluded_generators == 0).collect();
        for &n in &minimal {
            if rl.mask(n) & excluded_generators != 0 {
                walk.pruned.insert(n);
            }
        }
        minimal = if kept.is_empty() { vec![rl.top()] } else { kept };
    }
    minimal.sort_by(|a, b| rl.label(*a).canonical_cmp(rl.label(*b)));

    let tests = walk.tests.lock().expect("memo lock").clone();
    let utility_drops = minimal
        .iter()
        .map(
            |&n| if n == rl.top() { 0.0 } else { tests.get(&n).and_then(|t| t.utility).map_or(f64::NAN, |u| full - u) },
        )
        .collect();
    Ok(LabelSearchResult {
        labels: minimal.iter().map(|&n| rl.label(n).clone()).collect(),
        utility_drops,
        full_label: rl.top_label().clone(),
        full_utility: full,
        lm_calls_made: walk.calls.load(Ordering::SeqCst).min(cfg.max_lm_calls),
        shapley_calls,
        nodes_visited: walk.nodes_visited,
        closure_size: rl.len(),
        pruned_by_shapley: walk.pruned.iter().map(|&n| rl.label(n).clone()).collect(),
        shapley_values: shapley_values_out,
        trace: walk.trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    /// Minimal elements of `qualifying`, canonical order.
    pub minimal: Vec<Label>,
    /// Every closure label passing the λ-test, canonical order.
    pub qualifying: Vec<Label>,
}

/// Tests every label of the realized lattice directly.
pub fn brute_force_minimal(
    scorer: &Scorer,
    context: &Context,
    x: &str,
    y: &str,
    lambda: f64,
) -> Result<BruteForce, SearchError> {
    if context.is_empty() {
        return Err(SearchError::EmptyContext);
    }
    let rl = RealizedLattice::build(context.labels(), MAX_EXHAUSTIVE_LABELS)?;
    let full = full_utility(scorer, x, y, context)?;
    let floor = UtilityFloor::within(full, lambda);
    let mut qualifying = Vec::new();
    for n in 0..rl.len() {
        let sub = mask_context(context, &rl, rl.mask(n));
        if lambda_test(scorer, x, y, &sub, floor, false)?.qualifies {
            qualifying.push(rl.label(n).clone());
        }
    }
    qualifying.sort_by(Label::canonical_cmp);
    let minimal = minimal_elements(&qualifying)?;
    Ok(BruteForce { minimal, qualifying })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of the game `v` over `n` players; coalitions are bitmasks.
pub fn shapley_exact<E>(n: usize, mut v: impl FnMut(u64) -> Result<f64, E>) -> Result<Vec<f64>, E> {
    assert!(n < 64, "at most 63 players");
    let values: Vec<f64> = (0..1u64 << n).map(&mut v).collect::<Result<_, _>>()?;
    let weights: Vec<f64> = (0..n).map(|s| factorial(s) * factorial(n - s - 1) / factorial(n)).collect();
    let mut phi = vec![0.0; n];
    for (g, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << g;
        for s in 0..1u64 << n {
            if s & bit == 0 {
                *p += weights[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]);
            }
        }
    }
    Ok(phi)
}

/// Shapley values estimated from `samples` seeded random permutations.
pub fn shapley_sampled<E>(
    n: usize,
    samples: usize,
    seed: u64,
    mut v: impl FnMut(u64) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    let mut memo: HashMap<u64, f64> = HashMap::new();
    let mut value = |m: u64| -> Result<f64, E> {
        if let Some(x) = memo.get(&m) {
            return Ok(*x);
        }
        let x = v(m)?;
        memo.insert(m, x);
        Ok(x)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let mut mask = 0u64;
        let mut prev = value(0)?;
        for &g in &order {
            mask |= 1 << g;
            let cur = value(mask)?;
            phi[g] += cur - prev;
            prev = cur;
        }
    }
    for p in &mut phi {
        *p /= samples.max(1) as f64;
    }
    Ok(phi)
}

fn shapley_for(
    scorer: &Scorer,
    context: &Context,
    rl: &RealizedLattice,
    x: &str,
    y: &str,
    mode: ShapleyMode,
) -> Result<(Vec<f64>, usize), SearchError> {
    let n = rl.generators().len();
    let mut calls = 0;
    let mut v = |mask: u64| -> Result<f64, SearchError> {
        calls += 1;
        Ok(full_utility(scorer, x, y, &mask_context(context, rl, mask))?)
    };
    let phi = match mode {
        ShapleyMode::Exact => {
            if n > MAX_EXHAUSTIVE_LABELS {
                return Err(LatticeError::Capacity { distinct: n, max: MAX_EXHAUSTIVE_LABELS }.into());
            }
            shapley_exact(n, &mut v)?
        }
        ShapleyMode::Sampled { samples, seed } => shapley_sampled(n, samples, seed, &mut v)?,
    };
    Ok((phi, calls))
}

/// Shapley value of each distinct document label of `context`, for the game
/// `v(S) = utility of y given the documents whose label is in S`.
pub fn shapley_values(
    scorer: &Scorer,
    context: &Context,
    x: &str,
    y: &str,
    mode: ShapleyMode,
) -> Result<Vec<(Label, f64)>, SearchError> {
    if context.is_empty() {
        return Err(SearchError::EmptyContext);
    }
    let rl = RealizedLattice::build(context.labels(), DEFAULT_MAX_DISTINCT_LABELS)?;
    let (phi, _) = shapley_for(scorer, context, &rl, x, y, mode)?;
    Ok(rl.generators().iter().cloned().zip(phi).collect())
}

/// Drops every candidate at or above a label whose value is below `threshold`.
pub fn shapley_filter(
    candidates: &[Label],
    values: &[(Label, f64)],
    threshold: f64,
) -> Result<Vec<Label>, LatticeError> {
    let mut out = Vec::new();
    'next: for c in candidates {
        for (g, v) in values {
            if *v < threshold && g.leq(c)? {
                continue 'next;
            }
        }
        out.push(c.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledDocument;
    use crate::lm::oracle::{OracleEntry, OracleLm, OracleScript};
    use std::sync::Arc;

    const Q: &str = "What are the SSN of person 1 and the SSN and DoB of person 2?";
    const Y: &str = "SSN00038242 SSN00092411 18-08-1992";

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn fig4() -> Context {
        Context::new(
            ["A", "B", "C", "D"]
                .iter()
                .map(|id| LabeledDocument { id: id.to_string(), text: format!("doc {id}"), label: Label::atoms([*id]) })
                .collect(),
        )
        .unwrap()
    }

    fn scorer(required: Vec<BTreeSet<String>>) -> Scorer {
        let e = OracleEntry::new(Q, Y, required);
        Scorer::new(Arc::new(OracleLm::new(OracleScript::new(vec![e])).unwrap()))
    }

    fn names(ls: &[Label]) -> Vec<String> {
        ls.iter().map(Label::to_string).collect()
    }

    #[test]
    fn persons_labels() {
        let s = scorer(vec![set(&["A", "B", "C"]), set(&["A", "D"])]);
        let r = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(0.5)).unwrap();
        assert_eq!(names(&r.labels), ["{A,B,C}", "{A,D}"]);
        assert!(r.lm_calls_made <= r.closure_size + 1);
        let b = brute_force_minimal(&s, &fig4(), Q, Y, 0.5).unwrap();
        assert_eq!(b.minimal, r.labels);
        assert!(r.utility_drops.iter().all(|d| *d <= 0.5));
    }

    #[test]
    fn huge_lambda_reaches_leaves() {
        let s = scorer(vec![set(&["A", "D"])]);
        let r = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(1e9)).unwrap();
        assert_eq!(names(&r.labels), ["{A}", "{B}", "{C}", "{D}"]);
    }

    #[test]
    fn nothing_qualifies_returns_full_label() {
        let s = scorer(vec![set(&["A", "B", "C", "D"])]);
        let r = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(0.5)).unwrap();
        assert_eq!(names(&r.labels), ["{A,B,C,D}"]);
        assert_eq!(r.utility_drops, vec![0.0]);
        let b = brute_force_minimal(&s, &fig4(), Q, Y, 0.5).unwrap();
        assert_eq!(names(&b.minimal), ["{A,B,C,D}"]);
    }

    #[test]
    fn lambda_boundary_is_inclusive() {
        let s = scorer(vec![set(&["A"])]);
        let ctx = fig4();
        let full = full_utility(&s, Q, Y, &ctx).unwrap();
        let sub = ctx.subcontext(&Label::atoms(["B"])).unwrap();
        let u = full_utility(&s, Q, Y, &sub).unwrap();
        assert!(is_lambda_similar(&s, Q, Y, full, &ctx, &Label::atoms(["B"]), full - u).unwrap());
        assert!(is_lambda_similar(&s, Q, Y, full, &ctx, &Label::atoms(["A", "B", "C", "D"]), 0.0).unwrap());
        assert!(!is_lambda_similar(&s, Q, Y, full, &ctx, &Label::atoms(["B"]), 0.5).unwrap());
    }

    #[test]
    fn budget_overflow_carries_fallback() {
        let s = scorer(vec![set(&["A"])]);
        let cfg = SearchConfig { max_lm_calls: 3, ..SearchConfig::with_lambda(0.5) };
        match find_optimal_labels(&s, &fig4(), Q, Y, &cfg) {
            Err(SearchError::BudgetExceeded { fallback, .. }) => assert_eq!(fallback.to_string(), "{A,B,C,D}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn memoization_bounds_calls() {
        let s = scorer(vec![set(&["A"])]);
        let on = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(1e9)).unwrap();
        let off =
            find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig { memoize: false, ..SearchConfig::with_lambda(1e9) })
                .unwrap();
        assert_eq!(on.lm_calls_made, 15);
        assert!(off.lm_calls_made > on.lm_calls_made);
        assert_eq!(on.labels, off.labels);
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = scorer(vec![set(&["A", "B", "C"]), set(&["A", "D"])]);
        let seq = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(0.5)).unwrap();
        let par =
            find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig { parallel: true, ..SearchConfig::with_lambda(0.5) })
                .unwrap();
        assert_eq!(seq.labels, par.labels);
        assert_eq!(seq.trace, par.trace);
    }

    #[test]
    fn early_stop_does_not_change_the_answer() {
        let s = scorer(vec![set(&["A", "B", "C"]), set(&["A", "D"])]);
        let a = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(0.5)).unwrap();
        let b = find_optimal_labels(
            &s,
            &fig4(),
            Q,
            Y,
            &SearchConfig { early_stop: false, ..SearchConfig::with_lambda(0.5) },
        )
        .unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn shapley_closed_forms() {
        // one player
        let phi = shapley_exact(1, |m| Ok::<_, ()>(if m == 1 { 5.0 } else { 2.0 })).unwrap();
        assert_eq!(phi, vec![3.0]);
        // symmetric players
        let phi = shapley_exact(2, |m| Ok::<_, ()>(m.count_ones() as f64)).unwrap();
        assert_eq!(phi, vec![1.0, 1.0]);
    }

    #[test]
    fn shapley_prunes_irrelevant_label() {
        let mut e = OracleEntry::new(Q, Y, vec![set(&["A", "C"]), set(&["A", "D"])]);
        e.doc_bonus.insert("A".into(), 0.01);
        e.doc_bonus.insert("C".into(), 0.01);
        e.doc_bonus.insert("D".into(), 0.01);
        let s = Scorer::new(Arc::new(OracleLm::new(OracleScript::new(vec![e])).unwrap()));
        let values = shapley_values(&s, &fig4(), Q, Y, ShapleyMode::Exact).unwrap();
        let phi_b = values.iter().find(|(l, _)| l.to_string() == "{B}").unwrap().1;
        assert!(phi_b.abs() < 1e-9);
        assert!(values.iter().filter(|(l, _)| l.to_string() != "{B}").all(|(_, v)| *v > 0.005));
        let cfg = SearchConfig {
            shapley: Some(ShapleyConfig { threshold: 0.005, mode: ShapleyMode::Exact, stage: FilterStage::Pre }),
            ..SearchConfig::with_lambda(0.5)
        };
        let r = find_optimal_labels(&s, &fig4(), Q, Y, &cfg).unwrap();
        assert!(r.pruned_by_shapley.iter().all(|l| l.to_string().contains('B')));
        assert!(!r.pruned_by_shapley.is_empty());
        assert_eq!(names(&r.labels), ["{A,C}", "{A,D}"]);

        let filtered = shapley_filter(&[Label::atoms(["A", "B"]), Label::atoms(["A", "D"])], &values, 0.005).unwrap();
        assert_eq!(names(&filtered), ["{A,D}"]);
        let all = shapley_filter(&[Label::atoms(["A", "B"])], &values, f64::NEG_INFINITY).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn pre_filter_walks_through_filler_labels() {
        let s = scorer(vec![set(&["A"])]);
        for lambda in [0.5, 1e9] {
            for stage in [FilterStage::Pre, FilterStage::Post] {
                let cfg = SearchConfig {
                    shapley: Some(ShapleyConfig { threshold: 0.5, mode: ShapleyMode::Exact, stage }),
                    ..SearchConfig::with_lambda(lambda)
                };
                let r = find_optimal_labels(&s, &fig4(), Q, Y, &cfg).unwrap();
                assert_eq!(names(&r.labels), ["{A}"], "{lambda} {stage:?}");
            }
        }
    }

    #[test]
    fn threshold_above_everything_falls_back() {
        let s = scorer(vec![set(&["A", "D"])]);
        for stage in [FilterStage::Pre, FilterStage::Post] {
            let cfg = SearchConfig {
                shapley: Some(ShapleyConfig { threshold: 1e9, mode: ShapleyMode::Exact, stage }),
                ..SearchConfig::with_lambda(0.5)
            };
            let r = find_optimal_labels(&s, &fig4(), Q, Y, &cfg).unwrap();
            assert_eq!(names(&r.labels), ["{A,B,C,D}"], "{stage:?}");
        }
    }

    #[test]
    fn trace_is_json_lines() {
        let s = scorer(vec![set(&["A", "D"])]);
        let r = find_optimal_labels(&s, &fig4(), Q, Y, &SearchConfig::with_lambda(0.5)).unwrap();
        let mut buf = Vec::new();
        write_trace(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.trace.len());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["label"].is_string());
        }
        assert!(text.contains("\"kind\":\"emit\""));
    }
}
