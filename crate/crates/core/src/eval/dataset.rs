//! Dataset files, the synthetic key-value generator and bundled fixtures.
//!
//! A dataset directory holds `lattice.toml`, `documents.jsonl` and
//! `queries.jsonl`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Context, Corpus, CorpusError, LabeledDocument, Retriever};
use crate::lattice::{minimal_elements, Label, Lattice, LatticeError, LatticeSpec};
use crate::lm::oracle::{LogprobShape, OracleEntry, OracleScript};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("queries line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("infeasible generator parameters: {0}")]
    Infeasible(String),
    #[error("query {id}: {reason}")]
    Inconsistent { id: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticKv,
    News,
    AgentTranscript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    pub target_answer: String,
    pub ground_truth_labels: Vec<String>,
    pub required_doc_id_sets: Vec<BTreeSet<String>>,
    pub dataset_kind: DatasetKind,
    /// Pinned context; retrieval is skipped when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_ids: Option<Vec<String>>,
    /// Values in the answer; filler documents never contain them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_values: Vec<String>,
}

impl QueryRecord {
    pub fn ground_truth(&self, lattice: &Lattice) -> Result<Vec<Label>, LatticeError> {
        let mut v = self.ground_truth_labels.iter().map(|s| lattice.parse_label(s)).collect::<Result<Vec<_>, _>>()?;
        v.sort_by(Label::canonical_cmp);
        Ok(v)
    }

    /// Every document appearing in some required set.
    pub fn required_union(&self) -> BTreeSet<String> {
        self.required_doc_id_sets.iter().flatten().cloned().collect()
    }
}

/// Minimal elements of the joins of each required set's labels.
pub fn derive_ground_truth(corpus: &Corpus, required: &[BTreeSet<String>]) -> Result<Vec<Label>, DatasetError> {
    let mut joins = Vec::with_capacity(required.len());
    for set in required {
        let ctx = corpus.context_of(set)?;
        joins.push(ctx.label(corpus.lattice())?);
    }
    Ok(minimal_elements(&joins)?)
}

pub struct Dataset {
    pub corpus: Corpus,
    pub queries: Vec<QueryRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

impl Dataset {
    pub fn lattice(&self) -> &Arc<Lattice> {
        self.corpus.lattice()
    }

    pub fn from_parts(lattice_toml: &str, documents: &str, queries: &str) -> Result<Self, DatasetError> {
        let lattice = Arc::new(Lattice::from_toml(lattice_toml)?);
        let corpus = Corpus::from_jsonl(lattice, documents.as_bytes())?;
        let queries = read_queries(queries.as_bytes())?;
        let ds = Dataset { corpus, queries };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(io_err(&p))
        };
        Dataset::from_parts(&read("lattice.toml")?, &read("documents.jsonl")?, &read("queries.jsonl")?)
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("lattice.toml");
        let spec = toml::to_string(self.lattice().spec()).expect("lattice specs serialize");
        std::fs::write(&p, spec).map_err(io_err(&p))?;
        let p = dir.join("documents.jsonl");
        let mut f = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        self.corpus.write_jsonl(&mut f).and_then(|_| f.flush()).map_err(io_err(&p))?;
        let p = dir.join("queries.jsonl");
        let mut f = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        write_queries(&self.queries, &mut f).and_then(|_| f.flush()).map_err(io_err(&p))?;
        Ok(())
    }

    /// Checks ids, pinned contexts and ground truth against the corpus.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = BTreeSet::new();
        for q in &self.queries {
            let bad = |reason: String| DatasetError::Inconsistent { id: q.id.clone(), reason };
            if !ids.insert(q.id.clone()) {
                return Err(bad("duplicate query id".into()));
            }
            if q.required_doc_id_sets.is_empty() || q.required_doc_id_sets.iter().any(BTreeSet::is_empty) {
                return Err(bad("needs at least one non-empty required set".into()));
            }
            let derived = derive_ground_truth(&self.corpus, &q.required_doc_id_sets)?;
            let stated = q.ground_truth(self.lattice())?;
            let mut d = derived.clone();
            d.sort_by(Label::canonical_cmp);
            if d != stated {
                return Err(bad(format!(
                    "ground truth {} differs from the required sets' minimal joins {}",
                    render_labels(&stated),
                    render_labels(&d)
                )));
            }
            if let Some(ctx) = &q.context_ids {
                let ctx: BTreeSet<&String> = ctx.iter().collect();
                if let Some(missing) = q.required_union().iter().find(|id| !ctx.contains(id)) {
                    return Err(bad(format!("required document {missing} is not in the pinned context")));
                }
            }
        }
        Ok(())
    }

    /// The context of a query: its pinned ids if any, else the retriever's.
    pub fn context_for(&self, q: &QueryRecord, retriever: &Retriever, seed: u64) -> Result<Context, CorpusError> {
        if let Some(ids) = &q.context_ids {
            return self.corpus.context_of(ids);
        }
        match retriever {
            Retriever::Perfect { context_size } => {
                self.corpus.retrieve_perfect(&q.required_union(), &q.answer_values, *context_size, seed, &q.id)
            }
            Retriever::Similar { k } => self.corpus.retrieve_similar(&q.question, *k),
        }
    }
}

pub fn render_labels(labels: &[Label]) -> String {
    format!("[{}]", labels.iter().map(Label::to_string).collect::<Vec<_>>().join(", "))
}

pub fn read_queries(reader: impl BufRead) -> Result<Vec<QueryRecord>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: "queries".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: n + 1, source })?);
    }
    Ok(out)
}

pub fn write_queries(queries: &[QueryRecord], mut out: impl Write) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, DatasetError> {
    read_queries(BufReader::new(File::open(path).map_err(io_err(path))?))
}

macro_rules! fixture {
    ($name:literal) => {
        Dataset::from_parts(
            include_str!(concat!("../../fixtures/", $name, "/lattice.toml")),
            include_str!(concat!("../../fixtures/", $name, "/documents.jsonl")),
            include_str!(concat!("../../fixtures/", $name, "/queries.jsonl")),
        )
        .expect(concat!("bundled fixture ", $name, " is valid"))
    };
}

/// The four-document example: person 1 whole in A, person 2 split over B
/// and C and replicated in D.
pub fn persons_fixture() -> Dataset {
    fixture!("persons")
}

/// Paired high- and low-integrity news articles.
pub fn news_fixture() -> Dataset {
    fixture!("news")
}

/// Agent transcripts whose tool results carry integrity labels.
pub fn agent_fixture() -> Dataset {
    fixture!("agent")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub utility_full: f64,
    /// `utility_degraded = utility_full − penalty`.
    pub penalty: f64,
    /// Utility added per document in context.
    pub doc_bonus: f64,
    pub shape: LogprobShape,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { utility_full: -1.1, penalty: 2.0, doc_bonus: 0.0, shape: LogprobShape::Uniform }
    }
}

/// One oracle entry per query, answering with the target answer.
pub fn oracle_script(queries: &[QueryRecord], params: &OracleParams) -> OracleScript {
    let entries = queries
        .iter()
        .map(|q| {
            let mut e = OracleEntry::new(&q.question, &q.target_answer, q.required_doc_id_sets.clone());
            e.utility_full = params.utility_full;
            e.utility_degraded = params.utility_full - params.penalty;
            e.default_bonus = params.doc_bonus;
            e.shape = params.shape;
            e.wrong_answer = Some("I don't know.".into());
            e
        })
        .collect();
    OracleScript::new(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticKvParams {
    pub seed: u64,
    pub n_docs: usize,
    pub n_queries: usize,
    pub context_size: usize,
    /// Probability that a person's values are split and also replicated.
    pub replication: f64,
}

impl Default for SyntheticKvParams {
    fn default() -> Self {
        SyntheticKvParams { seed: 0, n_docs: 16, n_queries: 16, context_size: 8, replication: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Whole,
    Split,
    SplitReplicated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Fields {
    Ssn,
    Dob,
    Both,
}

impl Fields {
    fn phrase(self) -> &'static str {
        match self {
            Fields::Ssn => "social security number",
            Fields::Dob => "date of birth",
            Fields::Both => "social security number and date of birth",
        }
    }

    fn plural(self) -> &'static str {
        match self {
            Fields::Ssn => "social security numbers",
            Fields::Dob => "dates of birth",
            Fields::Both => "social security numbers and date of birth",
        }
    }
}

struct Person {
    number: usize,
    ssn: String,
    dob: String,
    /// Indices into the document list: whole, ssn-only, dob-only.
    whole: Option<usize>,
    ssn_doc: Option<usize>,
    dob_doc: Option<usize>,
}

impl Person {
    fn values(&self, f: Fields) -> Vec<String> {
        match f {
            Fields::Ssn => vec![self.ssn.clone()],
            Fields::Dob => vec![self.dob.clone()],
            Fields::Both => vec![self.ssn.clone(), self.dob.clone()],
        }
    }

    fn value_text(&self, f: Fields) -> String {
        self.values(f).join(" and ")
    }

    /// Minimal document sets revealing `f`.
    fn options(&self, f: Fields) -> Vec<BTreeSet<usize>> {
        let mut out = Vec::new();
        if let Some(w) = self.whole {
            out.push(BTreeSet::from([w]));
        }
        match f {
            Fields::Ssn => out.extend(self.ssn_doc.map(|d| BTreeSet::from([d]))),
            Fields::Dob => out.extend(self.dob_doc.map(|d| BTreeSet::from([d]))),
            Fields::Both => {
                if let (Some(a), Some(b)) = (self.ssn_doc, self.dob_doc) {
                    out.push(BTreeSet::from([a, b]));
                }
            }
        }
        out
    }
}

fn question_and_answer(parts: &[(&Person, Fields)]) -> (String, String) {
    match parts {
        [(p, f)] => (
            format!("What is the {} of person {}?", f.phrase(), p.number),
            format!("The {} of person {} is {}.", f.phrase(), p.number, p.value_text(*f)),
        ),
        [(p, f), (r, g)] if f == g => (
            format!("What are the {} of person {}, and person {}?", f.plural(), p.number, r.number),
            format!(
                "The {} of person {} is {}, and person {} is {}.",
                f.phrase(),
                p.number,
                p.value_text(*f),
                r.number,
                r.value_text(*g)
            ),
        ),
        [(p, f), (r, g)] => (
            format!(
                "What is the {} of person {}, and the {} of person {}?",
                f.phrase(),
                p.number,
                g.phrase(),
                r.number
            ),
            format!(
                "The {} of person {} is {}, and the {} of person {} is {}.",
                f.phrase(),
                p.number,
                p.value_text(*f),
                g.phrase(),
                r.number,
                r.value_text(*g)
            ),
        ),
        _ => unreachable!("queries involve one or two persons"),
    }
}

/// Pairwise unions of option families, reduced to inclusion-minimal sets.
fn combine(a: &[BTreeSet<usize>], b: &[BTreeSet<usize>]) -> Vec<BTreeSet<usize>> {
    let mut all: Vec<BTreeSet<usize>> = Vec::new();
    for x in a {
        for y in b {
            let u: BTreeSet<usize> = x.union(y).copied().collect();
            if !all.contains(&u) {
                all.push(u);
            }
        }
    }
    let minimal: Vec<BTreeSet<usize>> =
        all.iter().filter(|s| !all.iter().any(|t| t != *s && t.is_subset(s))).cloned().collect();
    minimal
}

/// Persons with SSN and date-of-birth values spread over singly labeled
/// documents, and questions whose answers need specific document subsets.
pub fn gen_synthetic_kv(p: &SyntheticKvParams) -> Result<Dataset, DatasetError> {
    if p.n_docs == 0 || p.n_queries == 0 {
        return Err(DatasetError::Infeasible("document and query counts must be positive".into()));
    }
    if p.context_size < 2 {
        return Err(DatasetError::Infeasible(format!(
            "context size {} cannot hold a multi-document answer; use at least 2",
            p.context_size
        )));
    }
    if !(0.0..=1.0).contains(&p.replication) {
        return Err(DatasetError::Infeasible(format!("replication {} outside [0, 1]", p.replication)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    // Person layouts until the document budget is used up.
    let mut persons: Vec<Person> = Vec::new();
    let mut texts: Vec<String> = Vec::new();
    let mut used_ssn = BTreeSet::new();
    let mut used_dob = BTreeSet::new();
    while texts.len() < p.n_docs {
        let left = p.n_docs - texts.len();
        let mut layout = if rng.random::<f64>() < p.replication {
            Layout::SplitReplicated
        } else if rng.random::<bool>() {
            Layout::Split
        } else {
            Layout::Whole
        };
        if layout == Layout::SplitReplicated && left < 3 {
            layout = Layout::Split;
        }
        if layout == Layout::Split && left < 2 {
            layout = Layout::Whole;
        }
        let number = persons.len() + 1;
        let ssn = loop {
            let s = format!("SSN{:08}", rng.random_range(0..100_000_000u32));
            if used_ssn.insert(s.clone()) {
                break s;
            }
        };
        let dob = loop {
            let d = format!(
                "{:02}-{:02}-{}",
                rng.random_range(1..=28u32),
                rng.random_range(1..=12u32),
                rng.random_range(1940..=2005u32)
            );
            if used_dob.insert(d.clone()) {
                break d;
            }
        };
        let mut person = Person { number, ssn, dob, whole: None, ssn_doc: None, dob_doc: None };
        let whole_text = format!(
            "The social security number and date of birth of person {number} is {} and {}.",
            person.ssn, person.dob
        );
        if layout != Layout::Whole {
            person.ssn_doc = Some(texts.len());
            texts.push(format!("The social security number of person {number} is {}.", person.ssn));
            person.dob_doc = Some(texts.len());
            texts.push(format!("The date of birth of person {number} is {}.", person.dob));
        }
        if layout != Layout::Split {
            person.whole = Some(texts.len());
            texts.push(whole_text);
        }
        persons.push(person);
    }

    // Document ids in shuffled order, so ids carry no information.
    let mut perm: Vec<usize> = (0..texts.len()).collect();
    perm.shuffle(&mut rng);
    let width = texts.len().to_string().len().max(3);
    let mut ids = vec![String::new(); texts.len()];
    for (pos, &orig) in perm.iter().enumerate() {
        ids[orig] = format!("D{:0width$}", pos + 1);
    }
    let lattice = Arc::new(Lattice::new(LatticeSpec::Atomset {
        atoms: {
            let mut a = ids.clone();
            a.sort();
            a
        },
    })?);
    let mut docs: Vec<LabeledDocument> = texts
        .iter()
        .zip(&ids)
        .map(|(t, id)| LabeledDocument { id: id.clone(), text: t.clone(), label: Label::atoms([id.as_str()]) })
        .collect();
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    let corpus = Corpus::new(lattice, docs)?;

    // Candidate queries over one or two persons.
    let fields = [Fields::Ssn, Fields::Dob, Fields::Both];
    let mut singles = Vec::new();
    let mut pairs = Vec::new();
    for (i, _) in persons.iter().enumerate() {
        for f in fields {
            singles.push(vec![(i, f)]);
        }
        for j in i + 1..persons.len() {
            for f in fields {
                for g in fields {
                    pairs.push(vec![(i, f), (j, g)]);
                }
            }
        }
    }
    singles.shuffle(&mut rng);
    pairs.shuffle(&mut rng);
    let feasible = |parts: &Vec<(usize, Fields)>| {
        let union: BTreeSet<usize> =
            parts.iter().flat_map(|&(i, f)| persons[i].options(f).into_iter().flatten()).collect();
        union.len() <= p.context_size
    };
    let mut singles = singles.into_iter().filter(feasible);
    let mut pairs = pairs.into_iter().filter(feasible);
    let mut chosen = Vec::with_capacity(p.n_queries);
    while chosen.len() < p.n_queries {
        let next = if chosen.len() % 2 == 0 {
            pairs.next().or_else(|| singles.next())
        } else {
            singles.next().or_else(|| pairs.next())
        };
        match next {
            Some(q) => chosen.push(q),
            None => {
                return Err(DatasetError::Infeasible(format!(
                    "only {} distinct questions fit a context of {} documents; asked for {}",
                    chosen.len(),
                    p.context_size,
                    p.n_queries
                )))
            }
        }
    }

    let mut queries = Vec::with_capacity(chosen.len());
    for (qi, parts) in chosen.iter().enumerate() {
        let people: Vec<(&Person, Fields)> = parts.iter().map(|&(i, f)| (&persons[i], f)).collect();
        let (question, target_answer) = question_and_answer(&people);
        let mut family = vec![BTreeSet::new()];
        for (person, f) in &people {
            family = combine(&family, &person.options(*f));
        }
        let required: Vec<BTreeSet<String>> =
            family.iter().map(|s| s.iter().map(|&d| ids[d].clone()).collect()).collect();
        let answer_values: Vec<String> = people.iter().flat_map(|(person, f)| person.values(*f)).collect();
        let id = format!("q{:03}", qi + 1);
        let union: BTreeSet<String> = required.iter().flatten().cloned().collect();
        let ctx = corpus.retrieve_perfect(&union, &answer_values, p.context_size, p.seed, &id)?;
        let truth = derive_ground_truth(&corpus, &required)?;
        let mut required = required;
        required.sort();
        queries.push(QueryRecord {
            id,
            question,
            target_answer,
            ground_truth_labels: truth.iter().map(Label::to_string).collect(),
            required_doc_id_sets: required,
            dataset_kind: DatasetKind::SyntheticKv,
            context_ids: Some(ctx.ids().into_iter().collect()),
            answer_values,
        });
    }
    let ds = Dataset { corpus, queries };
    ds.validate()?;
    Ok(ds)
}

/// Per-kind query counts, for summaries.
pub fn kind_counts(queries: &[QueryRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for q in queries {
        let k =
            serde_json::to_value(q.dataset_kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
