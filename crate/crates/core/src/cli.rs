//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::app::{exit, Engine, Error};
use crate::config::{OutputConfig, RunConfig};
use crate::corpus::HashedBagOfWords;
use crate::eval::dataset::{
    agent_fixture, gen_synthetic_kv, kind_counts, news_fixture, persons_fixture, Dataset, SyntheticKvParams,
};
use crate::eval::harness::{sweep_csv, EvalMode, SweepMetric};
use crate::lattice::{hasse_edges, to_dot, Lattice, RealizedLattice, DEFAULT_MAX_DISTINCT_LABELS};
use crate::lm::knn::KnnDatastore;
use crate::pipeline::{Rank, SelectionPolicy};
use crate::search::write_trace;

#[derive(Parser, Debug)]
#[command(name = "labelprop", version, about = "Label propagation for retrieval-augmented generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate or export a dataset.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Propagate labels for one query and print the outcome as JSON.
    Propagate(PropagateArgs),
    /// Evaluate every query of a dataset.
    Eval(EvalArgs),
    /// Evaluate over a grid of λ and Shapley thresholds.
    Sweep(SweepArgs),
    /// Build a kNN-LM datastore from a dataset's documents.
    BuildDatastore(DatastoreArgs),
    /// Lattice utilities.
    #[command(subcommand)]
    Lattice(LatticeCommand),
}

#[derive(Subcommand, Debug)]
pub enum GenCommand {
    /// Synthetic key-value records.
    SyntheticKv(SyntheticArgs),
    /// One of the shipped fixtures.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixtureName {
    Persons,
    News,
    Agent,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 16)]
    pub docs: usize,
    #[arg(long, default_value_t = 16)]
    pub queries: usize,
    #[arg(long, default_value_t = 8)]
    pub context: usize,
    #[arg(long, default_value_t = 0.5)]
    pub replication: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Run configuration file.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Dataset directory, overriding the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Selection policy for the output label.
    #[arg(long, value_enum)]
    pub select: Option<SelectArg>,
    /// Omit wall-clock fields so repeated runs are byte-identical.
    #[arg(long)]
    pub reproducible: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SelectArg {
    AtomCount,
    Height,
    UniqueMinimum,
    FirstCanonical,
}

impl From<SelectArg> for SelectionPolicy {
    fn from(s: SelectArg) -> Self {
        match s {
            SelectArg::AtomCount => SelectionPolicy::Rank { rank: Rank::AtomCount },
            SelectArg::Height => SelectionPolicy::Rank { rank: Rank::Height },
            SelectArg::UniqueMinimum => SelectionPolicy::UniqueMinimum,
            SelectArg::FirstCanonical => SelectionPolicy::FirstCanonical,
        }
    }
}

#[derive(Args, Debug)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Query id within the dataset.
    #[arg(long)]
    pub query: String,
    /// Write the search trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Search,
    Introspection,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Directory for report.json, report.txt and results.jsonl; defaults to the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    ExactMatch,
    LabelImprovement,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated Shapley thresholds; `-inf` disables filtering.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "exact-match")]
    pub metric: MetricArg,
    /// CSV output path; `sweep.csv` in the configured output directory, else stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DatastoreArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tokens of history per key.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = HashedBagOfWords::DEFAULT_DIM)]
    pub dim: usize,
}

#[derive(Subcommand, Debug)]
pub enum LatticeCommand {
    /// Validate a lattice spec and print its Hasse diagram as DOT.
    Check {
        spec: PathBuf,
        /// Print the join-closure of these labels instead of the whole lattice.
        #[arg(long, value_delimiter = ';')]
        labels: Option<Vec<String>>,
    },
}

static CANCELLED: AtomicBool = AtomicBool::new(false);

fn install_interrupt_handler() {
    let _ = ctrlc::set_handler(|| {
        if CANCELLED.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupted; finishing in-flight queries and writing a partial report");
    });
}

fn engine(o: &Overrides) -> Result<(Engine, OutputConfig), Error> {
    let mut cfg = RunConfig::load(&o.config)?;
    if let Some(d) = &o.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(l) = o.lambda {
        cfg.lambda = Some(l);
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(w) = o.workers {
        cfg.workers = Some(w);
    }
    if let Some(s) = o.select {
        cfg.selection = Some(s.into());
    }
    cfg.validate()?;
    let mut e = Engine::from_config(&cfg)?;
    e.eval.reproducible = o.reproducible;
    Ok((e, cfg.output))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(Error::io(path))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("outputs serialize") + "\n"
}

fn print_summary(ds: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "documents: {}", ds.corpus.len())?;
    writeln!(out, "queries:   {}", ds.queries.len())?;
    for (kind, n) in kind_counts(&ds.queries) {
        writeln!(out, "  {kind}: {n}")?;
    }
    Ok(())
}

fn cmd_gen(cmd: GenCommand, out: &mut impl Write) -> Result<(), Error> {
    let (ds, dir) = match cmd {
        GenCommand::SyntheticKv(a) => {
            let p = SyntheticKvParams {
                seed: a.seed,
                n_docs: a.docs,
                n_queries: a.queries,
                context_size: a.context,
                replication: a.replication,
            };
            (gen_synthetic_kv(&p)?, a.out)
        }
        GenCommand::Fixture { name, out } => (
            match name {
                FixtureName::Persons => persons_fixture(),
                FixtureName::News => news_fixture(),
                FixtureName::Agent => agent_fixture(),
            },
            out,
        ),
    };
    ds.write(&dir)?;
    print_summary(&ds, out).map_err(Error::io(Path::new("<stdout>")))
}

fn cmd_propagate(a: PropagateArgs, out: &mut impl Write) -> Result<(), Error> {
    let (e, output) = engine(&a.common)?;
    let outcome = e.propagate(&a.query)?;
    if let Some(path) = a.trace.as_ref().or(output.trace.as_ref()) {
        let r = e.find_labels(&a.query)?;
        let mut buf = Vec::new();
        write_trace(&r.trace, &mut buf).map_err(Error::io(path))?;
        write_file(path, &buf)?;
    }
    out.write_all(to_json(&outcome).as_bytes()).map_err(Error::io(Path::new("<stdout>")))
}

fn cmd_eval(a: EvalArgs, out: &mut impl Write) -> Result<bool, Error> {
    let (mut e, output) = engine(&a.common)?;
    match a.mode {
        Some(ModeArg::Search) => e.eval.mode = EvalMode::Search,
        Some(ModeArg::Introspection) if e.eval.mode == EvalMode::Search => {
            e.eval.mode = EvalMode::Introspection { template: None }
        }
        _ => {}
    }
    install_interrupt_handler();
    let run = e.evaluate(Some(&CANCELLED))?;
    if let Some(dir) = a.out.as_ref().or(output.dir.as_ref()) {
        write_file(&dir.join("report.json"), to_json(&run.report).as_bytes())?;
        write_file(&dir.join("report.txt"), run.report.to_table().as_bytes())?;
        let mut lines = String::new();
        for r in &run.results {
            lines.push_str(&serde_json::to_string(r).expect("results serialize"));
            lines.push('\n');
        }
        write_file(&dir.join("results.jsonl"), lines.as_bytes())?;
    }
    out.write_all(run.report.to_table().as_bytes()).map_err(Error::io(Path::new("<stdout>")))?;
    Ok(!run.report.incomplete)
}

fn cmd_sweep(a: SweepArgs, out: &mut impl Write) -> Result<bool, Error> {
    let (mut e, output) = engine(&a.common)?;
    if let Some(l) = a.lambdas {
        e.grid.lambdas = l;
    }
    if let Some(t) = a.thresholds {
        e.grid.thresholds = t;
    }
    let metric = match a.metric {
        MetricArg::ExactMatch => SweepMetric::ExactMatch,
        MetricArg::LabelImprovement => SweepMetric::LabelImprovement,
    };
    install_interrupt_handler();
    let cells = e.sweep(metric, Some(&CANCELLED))?;
    if cells.iter().all(|c| c.value.is_none()) {
        let why = cells.iter().find_map(|c| c.error.clone()).unwrap_or_default();
        return Err(Error::Harness(crate::eval::harness::HarnessError::AllFailed(why)));
    }
    let csv = sweep_csv(&e.grid, &cells);
    match a.out.or_else(|| output.dir.map(|d| d.join("sweep.csv"))) {
        Some(p) => write_file(&p, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes()).map_err(Error::io(Path::new("<stdout>")))?,
    }
    for c in cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell λ={} threshold={} failed: {}", c.lambda, c.threshold, c.error.as_deref().unwrap_or(""));
    }
    Ok(!CANCELLED.load(Ordering::SeqCst))
}

fn cmd_datastore(a: DatastoreArgs, out: &mut impl Write) -> Result<(), Error> {
    let ds = Dataset::load(&a.dataset)?;
    let store = KnnDatastore::build(ds.corpus.documents(), &HashedBagOfWords::new(a.dim), a.window)?;
    store.save(&a.out)?;
    writeln!(out, "entries: {}\nvocabulary: {}\ndimension: {}", store.len(), store.vocab().len(), store.dim())
        .map_err(Error::io(Path::new("<stdout>")))
}

/// Element count above which the whole lattice is not drawn.
const MAX_DRAWN_ELEMENTS: usize = 4096;

fn cmd_lattice(cmd: LatticeCommand, out: &mut impl Write) -> Result<(), Error> {
    let LatticeCommand::Check { spec, labels } = cmd;
    let text = std::fs::read_to_string(&spec).map_err(Error::io(&spec))?;
    let lattice = Lattice::from_toml(&text)?;
    let dot = match labels {
        Some(labels) => {
            let parsed = labels.iter().map(|l| lattice.parse_label(l.trim())).collect::<Result<Vec<_>, _>>()?;
            RealizedLattice::build(&parsed, DEFAULT_MAX_DISTINCT_LABELS)?.to_dot()
        }
        None => {
            let elements = lattice.elements(MAX_DRAWN_ELEMENTS).ok_or_else(|| {
                Error::Usage(format!(
                    "the lattice has more than {MAX_DRAWN_ELEMENTS} elements; pass --labels to draw a join-closure"
                ))
            })?;
            to_dot(&elements, &hasse_edges(&elements)?)
        }
    };
    out.write_all(dot.as_bytes()).map_err(Error::io(Path::new("<stdout>")))
}

/// Runs a parsed command, returning the exit code.
pub fn run(cli: Cli, out: &mut impl Write) -> u8 {
    let result = match cli.command {
        Command::Gen(c) => cmd_gen(c, out).map(|_| true),
        Command::Propagate(a) => cmd_propagate(a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::BuildDatastore(a) => cmd_datastore(a, out).map(|_| true),
        Command::Lattice(c) => cmd_lattice(c, out).map(|_| true),
    };
    match result {
        Ok(true) => exit::OK,
        Ok(false) => 130,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, &mut std::io::stdout().lock()),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            }
        }
    }
}
