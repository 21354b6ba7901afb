//! The engine behind the command line and the C interface.

use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use crate::config::{BackendConfig, ConfigError, RunConfig};
use crate::corpus::{CorpusError, HashedBagOfWords, Retriever};
use crate::eval::dataset::{oracle_script, Dataset, DatasetError, QueryRecord};
use crate::eval::harness::{self, EvalConfig, EvalRun, HarnessError, SweepCell, SweepGrid, SweepMetric, TargetMode};
use crate::lattice::{Lattice, LatticeError};
use crate::lm::knn::{KnnDatastore, KnnLm};
use crate::lm::oracle::{OracleLm, OracleScript};
use crate::lm::remote::RemoteLm;
use crate::lm::{LanguageModel, LmError, ScoreCache, Scorer};
use crate::pipeline::{propagate, PipelineError, PropagationConfig, PropagationOutcome};
use crate::search::{find_optimal_labels, LabelSearchResult, SearchError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const BACKEND: u8 = 3;
    pub const CAPACITY: u8 = 4;
}

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.display().to_string(), source }
    }

    pub fn lattice_error(&self) -> Option<&LatticeError> {
        match self {
            Error::Lattice(e)
            | Error::Dataset(DatasetError::Lattice(e))
            | Error::Corpus(CorpusError::Lattice(e))
            | Error::Search(SearchError::Lattice(e))
            | Error::Pipeline(PipelineError::Lattice(e))
            | Error::Pipeline(PipelineError::Search(SearchError::Lattice(e))) => Some(e),
            _ => None,
        }
    }

    pub fn lm_error(&self) -> Option<&LmError> {
        match self {
            Error::Lm(e)
            | Error::Search(SearchError::Lm(e))
            | Error::Pipeline(PipelineError::Lm(e))
            | Error::Pipeline(PipelineError::Search(SearchError::Lm(e))) => Some(e),
            _ => None,
        }
    }

    pub fn is_capacity(&self) -> bool {
        matches!(self.lattice_error(), Some(LatticeError::Capacity { .. }))
    }

    pub fn is_backend(&self) -> bool {
        match self.lm_error() {
            Some(LmError::InvalidParameter(_) | LmError::Datastore(_)) => false,
            Some(_) => true,
            None => matches!(
                self,
                Error::Harness(HarnessError::AllFailed(_))
                    | Error::Pipeline(PipelineError::EmptyGeneration | PipelineError::SafetyViolation(_))
            ),
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.is_capacity() {
            exit::CAPACITY
        } else if self.is_backend() {
            exit::BACKEND
        } else {
            exit::USAGE
        }
    }
}

pub fn build_backend(backend: &BackendConfig, dataset: Option<&Dataset>) -> Result<Arc<dyn LanguageModel>, Error> {
    Ok(match backend {
        BackendConfig::Oracle { script: Some(path), .. } => {
            let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
            let script: OracleScript =
                serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            Arc::new(OracleLm::new(script)?)
        }
        BackendConfig::Oracle { script: None, params } => {
            let ds = dataset.ok_or_else(|| Error::Usage("an oracle without a script needs a dataset".into()))?;
            Arc::new(OracleLm::new(oracle_script(&ds.queries, params))?)
        }
        BackendConfig::Knn { datastore, params } => Arc::new(KnnLm::new(KnnDatastore::load(datastore)?, *params)?),
        BackendConfig::Remote(cfg) => Arc::new(RemoteLm::new(cfg.clone())?),
    })
}

pub struct Engine {
    pub dataset: Dataset,
    pub scorer: Scorer,
    pub eval: EvalConfig,
    pub grid: SweepGrid,
}

impl Engine {
    pub fn new(mut dataset: Dataset, backend: Arc<dyn LanguageModel>, eval: EvalConfig) -> Self {
        if matches!(eval.retriever, Retriever::Similar { .. }) && !dataset.corpus.has_index() {
            dataset.corpus.build_index(Arc::new(HashedBagOfWords::default()));
        }
        Engine {
            dataset,
            scorer: Scorer::with_cache(backend, Arc::new(ScoreCache::default())),
            eval,
            grid: SweepGrid::default(),
        }
    }

    pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
        let defaults = EvalConfig::default();
        EvalConfig {
            propagation: PropagationConfig {
                search: cfg.search_config(),
                policy: cfg.selection.unwrap_or_default(),
                max_tokens: cfg.max_tokens.unwrap_or(defaults.propagation.max_tokens),
                seed: cfg.seed,
            },
            retriever: cfg.retriever.clone().unwrap_or(defaults.retriever),
            target: cfg.target,
            mode: cfg.mode.clone(),
            workers: cfg.workers.unwrap_or(1),
            seed: cfg.seed,
            reproducible: false,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, Error> {
        let dir = cfg.dataset.as_ref().ok_or_else(|| Error::Usage("no dataset configured".into()))?;
        let dataset = Dataset::load(dir)?;
        if let Some(spec) = &cfg.lattice {
            if spec != dataset.lattice().spec() {
                return Err(LatticeError::SpecMismatch(format!(
                    "configured lattice differs from the one in {}",
                    dir.display()
                ))
                .into());
            }
        }
        let eval = Engine::eval_config(cfg);
        eval.propagation.search.validate()?;
        let backend = build_backend(&cfg.backend, Some(&dataset))?;
        let mut engine = Engine::new(dataset, backend, eval);
        if let Some(g) = &cfg.sweep {
            engine.grid = g.clone();
        }
        Ok(engine)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.dataset.lattice()
    }

    pub fn query(&self, id: &str) -> Result<&QueryRecord, Error> {
        self.dataset.queries.iter().find(|q| q.id == id).ok_or_else(|| Error::Usage(format!("no query with id `{id}`")))
    }

    fn target<'a>(&self, q: &'a QueryRecord) -> Option<&'a str> {
        match self.eval.target {
            TargetMode::Dataset => Some(&q.target_answer),
            TargetMode::Model => None,
        }
    }

    pub fn propagate(&self, id: &str) -> Result<PropagationOutcome, Error> {
        let q = self.query(id)?;
        let ctx = self.dataset.context_for(q, &self.eval.retriever, self.eval.seed)?;
        let mut out =
            propagate(&self.scorer, self.lattice(), &ctx, &q.question, self.target(q), &self.eval.propagation)?;
        out.id = Some(q.id.clone());
        if self.eval.reproducible {
            out.wall_ms = None;
        }
        Ok(out)
    }

    /// The label search alone, scoring the dataset target or, in model
    /// mode, the backend's own completion.
    pub fn find_labels(&self, id: &str) -> Result<LabelSearchResult, Error> {
        let q = self.query(id)?;
        let ctx = self.dataset.context_for(q, &self.eval.retriever, self.eval.seed)?;
        let y = match self.target(q) {
            Some(t) => t.to_string(),
            None => {
                let guard = crate::guard::GuardedContext::new(ctx.clone());
                let p = &self.eval.propagation;
                self.scorer.backend().generate(&q.question, &guard, p.max_tokens, p.seed)?
            }
        };
        Ok(find_optimal_labels(&self.scorer, &ctx, &q.question, &y, &self.eval.propagation.search)?)
    }

    pub fn evaluate(&self, cancel: Option<&AtomicBool>) -> Result<EvalRun, Error> {
        Ok(harness::evaluate(&self.scorer, &self.dataset, &self.eval, cancel)?)
    }

    pub fn sweep(&self, metric: SweepMetric, cancel: Option<&AtomicBool>) -> Result<Vec<SweepCell>, Error> {
        Ok(harness::sweep(&self.scorer, &self.dataset, &self.eval, &self.grid, metric, cancel)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::persons_fixture;
    use crate::eval::dataset::OracleParams;
    use crate::pipeline::{Rank, SelectionPolicy};

    fn engine() -> Engine {
        let ds = persons_fixture();
        let backend =
            build_backend(&BackendConfig::Oracle { script: None, params: OracleParams::default() }, Some(&ds)).unwrap();
        let mut eval = EvalConfig::default();
        eval.propagation.policy = SelectionPolicy::Rank { rank: Rank::AtomCount };
        Engine::new(ds, backend, eval)
    }

    #[test]
    fn persons_through_the_engine() {
        let e = engine();
        let out = e.propagate("persons").unwrap();
        assert_eq!(out.chosen_label.to_string(), "{A,D}");
        assert_eq!(out.wall_ms, None);
        let r = e.find_labels("persons").unwrap();
        assert_eq!(r.labels.len(), 2);
        assert!(matches!(e.propagate("nope"), Err(Error::Usage(_))));
    }

    #[test]
    fn exit_codes() {
        let cap: Error = SearchError::Lattice(LatticeError::Capacity { distinct: 20, max: 16 }).into();
        assert_eq!(cap.exit_code(), exit::CAPACITY);
        let net: Error = PipelineError::Lm(LmError::Unavailable("down".into())).into();
        assert_eq!(net.exit_code(), exit::BACKEND);
        let bad: Error = LmError::InvalidParameter("k".into()).into();
        assert_eq!(bad.exit_code(), exit::USAGE);
        assert_eq!(Error::Usage("x".into()).exit_code(), exit::USAGE);
    }
}
