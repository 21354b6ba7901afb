//! Run configuration files.
//!
//! TOML with `${NAME}` environment interpolation. Relative paths are resolved
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::corpus::Retriever;
use crate::eval::dataset::OracleParams;
use crate::eval::harness::{EvalMode, SweepGrid, TargetMode};
use crate::lattice::LatticeSpec;
use crate::lm::knn::KnnParams;
use crate::lm::remote::RemoteConfig;
use crate::pipeline::SelectionPolicy;
use crate::search::{SearchConfig, ShapleyConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config references ${{{0}}} but the variable is not set")]
    MissingEnv(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    /// A scripted oracle. Without `script`, one entry per dataset query is
    /// derived from `params`.
    Oracle {
        script: Option<PathBuf>,
        #[serde(default)]
        params: OracleParams,
    },
    Knn {
        datastore: PathBuf,
        #[serde(default)]
        params: KnnParams,
    },
    Remote(RemoteConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: Option<f64>,
    pub workers: Option<usize>,
    /// Must agree with the dataset's lattice when both are present.
    pub lattice: Option<LatticeSpec>,
    pub dataset: Option<PathBuf>,
    pub backend: BackendConfig,
    pub retriever: Option<Retriever>,
    pub search: Option<SearchConfig>,
    pub shapley: Option<ShapleyConfig>,
    pub selection: Option<SelectionPolicy>,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default)]
    pub mode: EvalMode,
    pub max_tokens: Option<usize>,
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Replaces `${NAME}` with the value of `NAME`; `$$` yields a literal `$`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 1..];
        if let Some(t) = tail.strip_prefix('$') {
            out.push('$');
            rest = t;
        } else if let Some(t) = tail.strip_prefix('{') {
            let end = t.find('}').ok_or_else(|| ConfigError::Invalid("unterminated ${".into()))?;
            let name = &t[..end];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(ConfigError::Invalid(format!("bad variable name `{name}`")));
            }
            out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.into()))?);
            rest = &t[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.dataset {
            fix(p);
        }
        match &mut self.backend {
            BackendConfig::Oracle { script: Some(p), .. } => fix(p),
            BackendConfig::Knn { datastore, .. } => fix(datastore),
            _ => {}
        }
        if let Some(p) = &mut self.output.dir {
            fix(p);
        }
        if let Some(p) = &mut self.output.trace {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(l) = self.lambda {
            if l.is_nan() || l < 0.0 {
                return Err(ConfigError::Invalid(format!("lambda must be non-negative, got {l}")));
            }
        }
        if self.workers == Some(0) {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if let Some(Retriever::Perfect { context_size: 0 } | Retriever::Similar { k: 0 }) = self.retriever {
            return Err(ConfigError::Invalid("retriever size must be at least 1".into()));
        }
        Ok(())
    }

    /// The search settings with the top-level `lambda` and `shapley` applied.
    pub fn search_config(&self) -> SearchConfig {
        let mut s = self.search.clone().unwrap_or_default();
        if let Some(l) = self.lambda {
            s.lambda = l;
        }
        if self.shapley.is_some() {
            s.shapley = self.shapley;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::ShapleyMode;

    const FULL: &str = r#"
seed = 7
lambda = 0.25
workers = 2
dataset = "data"

[lattice]
kind = "atomset"
atoms = ["A", "B"]

[backend]
kind = "knn"
datastore = "ds.bin"
params = { k = 4, gamma = 0.25 }

[retriever]
kind = "perfect"
context_size = 6

[search]
lambda = 9.0
max_lm_calls = 100

[shapley]
threshold = 0.1
mode = { kind = "sampled", samples = 500, seed = 3 }

[selection]
strategy = "rank"
rank = "atom-count"

[sweep]
lambdas = [0.0, 1.0]
thresholds = [-inf, 0.5]

[output]
dir = "out"
"#;

    #[test]
    fn parses_every_section() {
        let mut cfg = RunConfig::parse(FULL).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("/base/data")));
        let BackendConfig::Knn { datastore, params } = &cfg.backend else { panic!() };
        assert_eq!(datastore, Path::new("/base/ds.bin"));
        assert_eq!((params.k, params.gamma, params.temperature), (4, 0.25, 1.0));
        let s = cfg.search_config();
        assert_eq!(s.lambda, 0.25);
        assert_eq!(s.max_lm_calls, 100);
        assert_eq!(s.shapley.unwrap().mode, ShapleyMode::Sampled { samples: 500, seed: 3 });
        assert_eq!(cfg.sweep.unwrap().thresholds[0], f64::NEG_INFINITY);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::parse("[backend]\nkind = \"oracle\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn exactly_one_backend() {
        assert!(RunConfig::parse("seed = 1\n").is_err());
        let two = "seed = 1\n[backend]\nkind = \"oracle\"\ndatastore = \"x\"\n";
        assert!(RunConfig::parse(two).is_err());
    }

    #[test]
    fn interpolation() {
        let env = |k: &str| (k == "TOKEN").then(|| "abc".to_string());
        assert_eq!(interpolate("x=${TOKEN};$$5;$y", env).unwrap(), "x=abc;$5;$y");
        assert!(matches!(interpolate("${NOPE}", env), Err(ConfigError::MissingEnv(n)) if n == "NOPE"));
        assert!(interpolate("${", env).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("seed = 1\nlambda = -1.0\n[backend]\nkind = \"oracle\"\n").is_err());
        assert!(RunConfig::parse("seed = 1\nworkers = 0\n[backend]\nkind = \"oracle\"\n").is_err());
        assert!(RunConfig::parse("seed = 1\nbogus = 0\n[backend]\nkind = \"oracle\"\n").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../configs/oracle.toml"),
            include_str!("../configs/knn.toml"),
            include_str!("../configs/remote.toml"),
        ] {
            let text = interpolate(text, |_| Some("http://127.0.0.1:8080".into())).unwrap();
            let cfg: RunConfig = toml::from_str(&text).unwrap();
            cfg.validate().unwrap();
        }
    }
}
