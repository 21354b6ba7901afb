//! Batch evaluation and hyperparameter sweeps.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, QueryRecord};
use super::metrics::{
    exact_match, label_improvement_metrics, mean_sd, precision_recall, rouge_l, LabelCase, MeanSd, ROUGE_VARIANT,
};
use crate::corpus::Retriever;
use crate::guard::GuardedContext;
use crate::lattice::Label;
use crate::lm::Scorer;
use crate::pipeline::{
    introspect_labels, propagate, select_label, PipelineError, PropagationConfig, PropagationOutcome,
    DEFAULT_INTROSPECTION_TEMPLATE,
};
use crate::search::{ShapleyConfig, ShapleyMode};

/// Which completion the λ-tests score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The dataset's target answer.
    #[default]
    Dataset,
    /// The completion the backend generates on the full context.
    Model,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Search,
    /// Ask the backend which documents it used.
    Introspection {
        #[serde(default)]
        template: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub propagation: PropagationConfig,
    pub retriever: Retriever,
    pub target: TargetMode,
    pub mode: EvalMode,
    pub workers: usize,
    /// Seed for retrieval fillers.
    pub seed: u64,
    /// Drops wall-clock fields from outputs.
    pub reproducible: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            propagation: PropagationConfig::default(),
            retriever: Retriever::Perfect { context_size: 8 },
            target: TargetMode::Dataset,
            mode: EvalMode::Search,
            workers: 1,
            seed: 0,
            reproducible: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryScore {
    pub labels: Vec<Label>,
    pub ground_truth: Vec<Label>,
    pub exact: bool,
    pub precision: f64,
    pub recall: f64,
    pub improvable: bool,
    pub rouge_full: f64,
    pub rouge_reduced: f64,
    pub outcome: PropagationOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub id: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub score: Option<QueryScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub evaluated: usize,
    pub failed: usize,
    /// Set when the run was cancelled before every query finished.
    pub incomplete: bool,
    pub exact_match: f64,
    pub precision: MeanSd,
    pub recall: MeanSd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_improvement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missed_labels: Option<f64>,
    pub rouge_full: f64,
    pub rouge_reduced: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_delta_improvable: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_delta_not_improvable: Option<f64>,
    pub lm_calls: MeanSd,
    pub lm_calls_max: usize,
    pub rouge_variant: &'static str,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:6.2}%", 100.0 * v);
        let _ = writeln!(
            s,
            "queries            {} ({} evaluated, {} failed){}",
            self.queries,
            self.evaluated,
            self.failed,
            if self.incomplete { ", INCOMPLETE" } else { "" }
        );
        let _ = writeln!(s, "exact match        {}", pct(self.exact_match));
        let _ = writeln!(s, "precision          {:.4} ± {:.4}", self.precision.mean, self.precision.sd);
        let _ = writeln!(s, "recall             {:.4} ± {:.4}", self.recall.mean, self.recall.sd);
        if let (Some(i), Some(m)) = (self.label_improvement, self.missed_labels) {
            let _ = writeln!(s, "label improvement  {}", pct(i));
            let _ = writeln!(s, "missed labels      {}", pct(m));
        }
        let _ = writeln!(s, "ROUGE-L(y, y*)     {:.4}", self.rouge_full);
        let _ = writeln!(s, "ROUGE-L(y', y*)    {:.4}", self.rouge_reduced);
        if let Some(d) = self.rouge_delta_improvable {
            let _ = writeln!(s, "  Δ improvable     {d:+.4}");
        }
        if let Some(d) = self.rouge_delta_not_improvable {
            let _ = writeln!(s, "  Δ not improvable {d:+.4}");
        }
        let _ = writeln!(
            s,
            "LM calls / query   {:.2} ± {:.2} (max {})",
            self.lm_calls.mean, self.lm_calls.sd, self.lm_calls_max
        );
        let _ = writeln!(s, "({})", self.rouge_variant);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub results: Vec<QueryResult>,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("every query failed; first error: {0}")]
    AllFailed(String),
    #[error("invalid grid: {0}")]
    Grid(String),
}

fn regenerate_for(
    scorer: &Scorer,
    ds: &Dataset,
    ctx: &crate::corpus::Context,
    q: &QueryRecord,
    cfg: &EvalConfig,
    template: &str,
) -> Result<PropagationOutcome, PipelineError> {
    let lattice = ds.lattice();
    let backend = scorer.backend();
    let p = &cfg.propagation;
    let full = ctx.label(lattice)?;
    let guard = GuardedContext::new(ctx.clone());
    let y = backend.generate(&q.question, &guard, p.max_tokens, p.seed)?;
    let example = ds
        .queries
        .first()
        .map(|e| {
            format!(
                "Question: {}\nAnswer: {}\nDocuments: {}",
                e.question,
                e.target_answer,
                e.required_doc_id_sets[0].iter().cloned().collect::<Vec<_>>().join(", ")
            )
        })
        .unwrap_or_default();
    let target = match cfg.target {
        TargetMode::Dataset => q.target_answer.clone(),
        TargetMode::Model => y.clone(),
    };
    let intro = introspect_labels(backend.as_ref(), lattice, ctx, &q.question, &target, template, &example, p.seed)?;
    let chosen = select_label(&intro.labels, p.policy).expect("introspection yields at least one label");
    let (y2, regenerated, audit) = if chosen == full {
        (y.clone(), false, guard.audit())
    } else {
        let g = GuardedContext::new(ctx.subcontext(&chosen)?);
        (backend.generate(&q.question, &g, p.max_tokens, p.seed)?, true, g.audit())
    };
    let out = PropagationOutcome {
        id: None,
        original_label: full,
        candidate_labels: intro.labels,
        chosen_label: chosen,
        original_completion: y,
        target_completion: target,
        regenerated_completion: y2,
        regenerated,
        audit,
        lm_calls: 0,
        closure_size: 0,
        wall_ms: None,
        diagnostic: intro.diagnostic,
    };
    out.verify_safety(ctx)?;
    Ok(out)
}

/// Propagates one query and scores it against the ground truth.
pub fn evaluate_query(scorer: &Scorer, ds: &Dataset, q: &QueryRecord, cfg: &EvalConfig) -> QueryResult {
    let run = || -> Result<QueryScore, Box<dyn std::error::Error + Send + Sync>> {
        let lattice = ds.lattice();
        let ctx = ds.context_for(q, &cfg.retriever, cfg.seed)?;
        let mut outcome = match &cfg.mode {
            EvalMode::Search => {
                let target = match cfg.target {
                    TargetMode::Dataset => Some(q.target_answer.as_str()),
                    TargetMode::Model => None,
                };
                propagate(scorer, lattice, &ctx, &q.question, target, &cfg.propagation)?
            }
            EvalMode::Introspection { template } => {
                regenerate_for(scorer, ds, &ctx, q, cfg, template.as_deref().unwrap_or(DEFAULT_INTROSPECTION_TEMPLATE))?
            }
        };
        outcome.id = Some(q.id.clone());
        if cfg.reproducible {
            outcome.wall_ms = None;
        }
        let ground_truth = q.ground_truth(lattice)?;
        let (precision, recall) = precision_recall(&outcome.candidate_labels, &ground_truth);
        Ok(QueryScore {
            labels: outcome.candidate_labels.clone(),
            exact: exact_match(&outcome.candidate_labels, &ground_truth),
            improvable: ground_truth != [outcome.original_label.clone()],
            ground_truth,
            precision,
            recall,
            rouge_full: rouge_l(&outcome.original_completion, &q.target_answer),
            rouge_reduced: rouge_l(&outcome.regenerated_completion, &q.target_answer),
            outcome,
        })
    };
    match run() {
        Ok(score) => QueryResult { id: q.id.clone(), score: Some(score), error: None },
        Err(e) => QueryResult { id: q.id.clone(), score: None, error: Some(e.to_string()) },
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(ds: &Dataset, results: &[QueryResult], total: usize) -> MetricsReport {
    let ok: Vec<&QueryScore> = results.iter().filter_map(|r| r.score.as_ref()).collect();
    let n = ok.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let lattice = ds.lattice();
    let (label_improvement, missed_labels) = if lattice.is_total_order() {
        let cases: Vec<LabelCase> = ok
            .iter()
            .filter_map(|s| {
                s.ground_truth.first().map(|t| LabelCase {
                    original: s.outcome.original_label.clone(),
                    chosen: s.outcome.chosen_label.clone(),
                    truth: t.clone(),
                })
            })
            .collect();
        match label_improvement_metrics(lattice, &cases) {
            Ok((i, m)) => (Some(i), Some(m)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    let delta = |improvable: bool| {
        mean(
            &ok.iter()
                .filter(|s| s.improvable == improvable)
                .map(|s| s.rouge_reduced - s.rouge_full)
                .collect::<Vec<_>>(),
        )
    };
    let calls: Vec<f64> = ok.iter().map(|s| s.outcome.lm_calls as f64).collect();
    MetricsReport {
        queries: total,
        evaluated: results.len(),
        failed: results.len() - n,
        incomplete: results.len() < total,
        exact_match: frac(ok.iter().filter(|s| s.exact).count()),
        precision: mean_sd(&ok.iter().map(|s| s.precision).collect::<Vec<_>>()),
        recall: mean_sd(&ok.iter().map(|s| s.recall).collect::<Vec<_>>()),
        label_improvement,
        missed_labels,
        rouge_full: mean(&ok.iter().map(|s| s.rouge_full).collect::<Vec<_>>()).unwrap_or(0.0),
        rouge_reduced: mean(&ok.iter().map(|s| s.rouge_reduced).collect::<Vec<_>>()).unwrap_or(0.0),
        rouge_delta_improvable: delta(true),
        rouge_delta_not_improvable: delta(false),
        lm_calls: mean_sd(&calls),
        lm_calls_max: ok.iter().map(|s| s.outcome.lm_calls).max().unwrap_or(0),
        rouge_variant: ROUGE_VARIANT,
    }
}

/// Evaluates every query. Queries not started when `cancel` is raised are
/// skipped and the report is marked incomplete.
pub fn evaluate(
    scorer: &Scorer,
    ds: &Dataset,
    cfg: &EvalConfig,
    cancel: Option<&AtomicBool>,
) -> Result<EvalRun, HarnessError> {
    let workers = if scorer.backend().concurrent_safe() { cfg.workers.max(1) } else { 1 };
    let one = |q: &QueryRecord| -> Option<QueryResult> {
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            return None;
        }
        Some(evaluate_query(scorer, ds, q, cfg))
    };
    let results: Vec<QueryResult> = if workers == 1 {
        ds.queries.iter().map(one).take_while(Option::is_some).flatten().collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool");
        pool.install(|| ds.queries.par_iter().map(one).collect::<Vec<_>>()).into_iter().flatten().collect()
    };
    if !results.is_empty() && results.iter().all(|r| r.score.is_none()) {
        return Err(HarnessError::AllFailed(results[0].error.clone().unwrap_or_default()));
    }
    let report = summarize(ds, &results, ds.queries.len());
    Ok(EvalRun { report, results })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMetric {
    #[default]
    ExactMatch,
    LabelImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    /// `-inf` disables Shapley filtering for that column.
    pub thresholds: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { lambdas: vec![0.0, 0.1, 0.5, 1.0, 2.5, 5.0, 10.0], thresholds: vec![f64::NEG_INFINITY] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub threshold: f64,
    pub value: Option<f64>,
    pub error: Option<String>,
}

fn cell_config(base: &EvalConfig, lambda: f64, threshold: f64) -> EvalConfig {
    let mut cfg = base.clone();
    cfg.workers = 1;
    cfg.propagation.search.lambda = lambda;
    let template = base.propagation.search.shapley;
    cfg.propagation.search.shapley = if threshold == f64::NEG_INFINITY {
        None
    } else {
        Some(ShapleyConfig {
            threshold,
            mode: template.map_or(ShapleyMode::Exact, |s| s.mode),
            stage: template.map(|s| s.stage).unwrap_or_default(),
        })
    };
    cfg
}

/// One evaluation per `(λ, threshold)` pair, row-major by λ. Cells run in
/// parallel sharing the scorer's cache; a failing cell does not stop the others.
pub fn sweep(
    scorer: &Scorer,
    ds: &Dataset,
    base: &EvalConfig,
    grid: &SweepGrid,
    metric: SweepMetric,
    cancel: Option<&AtomicBool>,
) -> Result<Vec<SweepCell>, HarnessError> {
    if grid.lambdas.is_empty() || grid.thresholds.is_empty() {
        return Err(HarnessError::Grid("both axes need at least one value".into()));
    }
    if grid.lambdas.iter().chain(&grid.thresholds).any(|v| v.is_nan()) {
        return Err(HarnessError::Grid("grid values must not be NaN".into()));
    }
    let pairs: Vec<(f64, f64)> =
        grid.lambdas.iter().flat_map(|&l| grid.thresholds.iter().map(move |&t| (l, t))).collect();
    let run = |&(lambda, threshold): &(f64, f64)| {
        let cfg = cell_config(base, lambda, threshold);
        let cell_scorer = scorer.fork();
        let (value, error) = match evaluate(&cell_scorer, ds, &cfg, cancel) {
            Ok(run) if run.report.incomplete => (None, Some("cancelled".into())),
            Ok(run) => match metric {
                SweepMetric::ExactMatch => (Some(run.report.exact_match), None),
                SweepMetric::LabelImprovement => match run.report.label_improvement {
                    Some(v) => (Some(v), None),
                    None => (None, Some("label improvement needs a total order".into())),
                },
            },
            Err(e) => (None, Some(e.to_string())),
        };
        SweepCell { lambda, threshold, value, error }
    };
    let workers = if scorer.backend().concurrent_safe() { base.workers.max(1) } else { 1 };
    Ok(if workers == 1 {
        pairs.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool");
        pool.install(|| pairs.par_iter().map(run).collect())
    })
}

fn fmt_axis(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// CSV with thresholds across and λ down.
pub fn sweep_csv(grid: &SweepGrid, cells: &[SweepCell]) -> String {
    let mut s = String::from("lambda\\threshold");
    for t in &grid.thresholds {
        s.push(',');
        s.push_str(&fmt_axis(*t));
    }
    s.push('\n');
    for (i, l) in grid.lambdas.iter().enumerate() {
        s.push_str(&fmt_axis(*l));
        for j in 0..grid.thresholds.len() {
            s.push(',');
            match cells.get(i * grid.thresholds.len() + j).and_then(|c| c.value) {
                Some(v) => {
                    let _ = write!(s, "{v:.6}");
                }
                None => s.push_str("failed"),
            }
        }
        s.push('\n');
    }
    s
}
