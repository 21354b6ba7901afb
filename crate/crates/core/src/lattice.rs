//! Security labels and the finite lattices they live in.
//!
//! Three label shapes are supported: sets of atoms ordered by inclusion,
//! levels of a declared total order, and tuples drawn from a product of
//! component lattices. A [`RealizedLattice`] is the finite join-closure of
//! the labels that actually occur in a context; it is the search space of
//! the label search.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

/// Interned atom, level or dimension name.
pub type Name = Arc<str>;

/// Default cap on the number of distinct document labels in a context.
pub const DEFAULT_MAX_DISTINCT_LABELS: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error("label spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid lattice spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse label `{input}`: {reason}")]
    Parse { input: String, reason: String },
    #[error(
        "context has {distinct} distinct labels but the realized lattice is capped at {max}; \
         raise the cap or shrink the context"
    )]
    Capacity { distinct: usize, max: usize },
    #[error("label {0} is not in the realized lattice")]
    NotInClosure(String),
    #[error("cannot build a realized lattice from an empty label set")]
    Empty,
}

/// A security label.
///
/// Equality and hashing are structural. Atom sets are kept sorted so the
/// canonical text form is deterministic.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Atoms(BTreeSet<Name>),
    Level { rank: u32, name: Name },
    Tuple(Vec<Label>),
}

impl Label {
    pub fn atoms<I, S>(atoms: I) -> Label
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Label::Atoms(atoms.into_iter().map(|a| Name::from(a.as_ref())).collect())
    }

    /// Partial order. Fails when the two labels have different shapes.
    pub fn leq(&self, other: &Label) -> Result<bool, LatticeError> {
        match (self, other) {
            (Label::Atoms(a), Label::Atoms(b)) => Ok(a.is_subset(b)),
            (Label::Level { rank: a, .. }, Label::Level { rank: b, .. }) => Ok(a <= b),
            (Label::Tuple(a), Label::Tuple(b)) if a.len() == b.len() => {
                for (x, y) in a.iter().zip(b) {
                    if !x.leq(y)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            _ => Err(mismatch(self, other)),
        }
    }

    /// `self ⊑ other` and `self != other`.
    pub fn lt(&self, other: &Label) -> Result<bool, LatticeError> {
        Ok(self != other && self.leq(other)?)
    }

    pub fn join(&self, other: &Label) -> Result<Label, LatticeError> {
        match (self, other) {
            (Label::Atoms(a), Label::Atoms(b)) => Ok(Label::Atoms(a.union(b).cloned().collect())),
            (Label::Level { rank: a, .. }, Label::Level { rank: b, .. }) => {
                Ok(if a >= b { self.clone() } else { other.clone() })
            }
            (Label::Tuple(a), Label::Tuple(b)) if a.len() == b.len() => {
                a.iter().zip(b).map(|(x, y)| x.join(y)).collect::<Result<Vec<_>, _>>().map(Label::Tuple)
            }
            _ => Err(mismatch(self, other)),
        }
    }

    pub fn meet(&self, other: &Label) -> Result<Label, LatticeError> {
        match (self, other) {
            (Label::Atoms(a), Label::Atoms(b)) => Ok(Label::Atoms(a.intersection(b).cloned().collect())),
            (Label::Level { rank: a, .. }, Label::Level { rank: b, .. }) => {
                Ok(if a <= b { self.clone() } else { other.clone() })
            }
            (Label::Tuple(a), Label::Tuple(b)) if a.len() == b.len() => {
                a.iter().zip(b).map(|(x, y)| x.meet(y)).collect::<Result<Vec<_>, _>>().map(Label::Tuple)
            }
            _ => Err(mismatch(self, other)),
        }
    }

    /// A strictly monotone rank: `a ⊏ b` implies `a.height() < b.height()`.
    pub fn height(&self) -> u64 {
        match self {
            Label::Atoms(a) => a.len() as u64,
            Label::Level { rank, .. } => u64::from(*rank),
            Label::Tuple(c) => c.iter().map(Label::height).sum(),
        }
    }

    /// Number of atoms across all coordinates.
    pub fn atom_count(&self) -> usize {
        match self {
            Label::Atoms(a) => a.len(),
            Label::Level { .. } => 0,
            Label::Tuple(c) => c.iter().map(Label::atom_count).sum(),
        }
    }

    /// Ordering by canonical text form; used for every deterministic tie-break.
    pub fn canonical_cmp(&self, other: &Label) -> Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

fn mismatch(a: &Label, b: &Label) -> LatticeError {
    LatticeError::SpecMismatch(format!("{a} and {b} come from different lattices"))
}

/// Labels serialize as their canonical text form.
impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Atoms(a) => {
                f.write_str("{")?;
                for (i, atom) in a.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    f.write_str(atom)?;
                }
                f.write_str("}")
            }
            Label::Level { name, .. } => f.write_str(name),
            Label::Tuple(c) => {
                f.write_str("(")?;
                for (i, l) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{l}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Declarative lattice description, as found in run configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LatticeSpec {
    Atomset {
        atoms: Vec<String>,
    },
    /// Levels listed from most permissive (bottom) to most restrictive (top).
    TotalOrder {
        levels: Vec<String>,
    },
    Product {
        dimensions: Vec<Dimension>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub lattice: LatticeSpec,
}

/// A validated lattice with interned names.
#[derive(Clone, Debug)]
pub struct Lattice {
    spec: LatticeSpec,
    kind: Kind,
}

#[derive(Clone, Debug)]
enum Kind {
    Atoms { universe: BTreeSet<Name> },
    Levels { names: Vec<Name>, rank: HashMap<Name, u32> },
    Product { dims: Vec<(Name, Lattice)> },
}

impl Lattice {
    pub fn new(spec: LatticeSpec) -> Result<Self, LatticeError> {
        let kind = match &spec {
            LatticeSpec::Atomset { atoms } => {
                let mut universe = BTreeSet::new();
                for a in atoms {
                    check_name(a)?;
                    if !universe.insert(Name::from(a.as_str())) {
                        return Err(LatticeError::InvalidSpec(format!("duplicate atom `{a}`")));
                    }
                }
                Kind::Atoms { universe }
            }
            LatticeSpec::TotalOrder { levels } => {
                if levels.is_empty() {
                    return Err(LatticeError::InvalidSpec("total order has no levels".into()));
                }
                let names: Vec<Name> = levels.iter().map(|l| Name::from(l.as_str())).collect();
                let mut rank = HashMap::new();
                for (i, n) in names.iter().enumerate() {
                    check_name(n)?;
                    if rank.insert(n.clone(), i as u32).is_some() {
                        return Err(LatticeError::InvalidSpec(format!("duplicate level `{n}`")));
                    }
                }
                Kind::Levels { names, rank }
            }
            LatticeSpec::Product { dimensions } => {
                if dimensions.is_empty() {
                    return Err(LatticeError::InvalidSpec("product has no dimensions".into()));
                }
                let mut seen = HashSet::new();
                let mut dims = Vec::with_capacity(dimensions.len());
                for d in dimensions {
                    if !seen.insert(d.name.clone()) {
                        return Err(LatticeError::InvalidSpec(format!("duplicate dimension `{}`", d.name)));
                    }
                    dims.push((Name::from(d.name.as_str()), Lattice::new(d.lattice.clone())?));
                }
                Kind::Product { dims }
            }
        };
        Ok(Lattice { spec, kind })
    }

    pub fn from_toml(text: &str) -> Result<Self, LatticeError> {
        let spec: LatticeSpec = toml::from_str(text).map_err(|e| LatticeError::InvalidSpec(e.to_string()))?;
        Lattice::new(spec)
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn is_total_order(&self) -> bool {
        matches!(self.kind, Kind::Levels { .. })
    }

    /// Checks that `label` is an element of this lattice.
    pub fn check(&self, label: &Label) -> Result<(), LatticeError> {
        match (&self.kind, label) {
            (Kind::Atoms { universe }, Label::Atoms(a)) => match a.iter().find(|x| !universe.contains(*x)) {
                None => Ok(()),
                Some(x) => Err(LatticeError::SpecMismatch(format!("atom `{x}` is not declared"))),
            },
            (Kind::Levels { names, .. }, Label::Level { rank, name }) => match names.get(*rank as usize) {
                Some(n) if n == name => Ok(()),
                _ => Err(LatticeError::SpecMismatch(format!("level `{name}` is not declared"))),
            },
            (Kind::Product { dims }, Label::Tuple(c)) if c.len() == dims.len() => {
                dims.iter().zip(c).try_for_each(|((_, l), x)| l.check(x))
            }
            _ => Err(LatticeError::SpecMismatch(format!("{label} does not fit this lattice"))),
        }
    }

    pub fn leq(&self, a: &Label, b: &Label) -> Result<bool, LatticeError> {
        self.check(a)?;
        self.check(b)?;
        a.leq(b)
    }

    pub fn join(&self, a: &Label, b: &Label) -> Result<Label, LatticeError> {
        self.check(a)?;
        self.check(b)?;
        a.join(b)
    }

    pub fn meet(&self, a: &Label, b: &Label) -> Result<Label, LatticeError> {
        self.check(a)?;
        self.check(b)?;
        a.meet(b)
    }

    pub fn bottom(&self) -> Label {
        match &self.kind {
            Kind::Atoms { .. } => Label::Atoms(BTreeSet::new()),
            Kind::Levels { names, .. } => Label::Level { rank: 0, name: names[0].clone() },
            Kind::Product { dims } => Label::Tuple(dims.iter().map(|(_, l)| l.bottom()).collect()),
        }
    }

    pub fn top(&self) -> Label {
        match &self.kind {
            Kind::Atoms { universe } => Label::Atoms(universe.clone()),
            Kind::Levels { names, .. } => {
                let last = names.len() - 1;
                Label::Level { rank: last as u32, name: names[last].clone() }
            }
            Kind::Product { dims } => Label::Tuple(dims.iter().map(|(_, l)| l.top()).collect()),
        }
    }

    /// Join of all labels; the bottom for an empty input.
    pub fn context_label<'a, I>(&self, labels: I) -> Result<Label, LatticeError>
    where
        I: IntoIterator<Item = &'a Label>,
    {
        let mut acc = self.bottom();
        for l in labels {
            self.check(l)?;
            acc = acc.join(l)?;
        }
        Ok(acc)
    }

    pub fn level(&self, name: &str) -> Result<Label, LatticeError> {
        match &self.kind {
            Kind::Levels { names, rank } => rank
                .get(name)
                .map(|r| Label::Level { rank: *r, name: names[*r as usize].clone() })
                .ok_or_else(|| parse_err(name, "unknown level")),
            _ => Err(parse_err(name, "lattice is not a total order")),
        }
    }

    /// Parses the text syntax: `{A,B}`, `HiInt`, `(HiInt, Today)`.
    pub fn parse_label(&self, text: &str) -> Result<Label, LatticeError> {
        let mut p = Parser { src: text, pos: 0 };
        let label = p.label(self)?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(parse_err(text, "trailing input"));
        }
        Ok(label)
    }

    /// Every element of the lattice, or `None` when there are more than `limit`.
    pub fn elements(&self, limit: usize) -> Option<Vec<Label>> {
        match &self.kind {
            Kind::Atoms { universe } => {
                let atoms: Vec<&Name> = universe.iter().collect();
                if atoms.len() >= 63 || (1usize << atoms.len()) > limit {
                    return None;
                }
                Some(
                    (0u64..(1u64 << atoms.len()))
                        .map(|mask| {
                            Label::Atoms(
                                atoms
                                    .iter()
                                    .enumerate()
                                    .filter(|(i, _)| mask & (1 << i) != 0)
                                    .map(|(_, a)| (*a).clone())
                                    .collect(),
                            )
                        })
                        .collect(),
                )
            }
            Kind::Levels { names, .. } => (names.len() <= limit).then(|| {
                names.iter().enumerate().map(|(i, n)| Label::Level { rank: i as u32, name: n.clone() }).collect()
            }),
            Kind::Product { dims } => {
                let mut acc: Vec<Vec<Label>> = vec![Vec::new()];
                for (_, l) in dims {
                    let part = l.elements(limit)?;
                    if acc.len().saturating_mul(part.len()) > limit {
                        return None;
                    }
                    acc = acc
                        .iter()
                        .flat_map(|prefix| {
                            part.iter().map(move |x| {
                                let mut v = prefix.clone();
                                v.push(x.clone());
                                v
                            })
                        })
                        .collect();
                }
                Some(acc.into_iter().map(Label::Tuple).collect())
            }
        }
    }
}

fn check_name(n: &str) -> Result<(), LatticeError> {
    if n.trim().is_empty() || n.trim() != n || n.contains(['{', '}', '(', ')', ',']) {
        return Err(LatticeError::InvalidSpec(format!("invalid name `{n}`")));
    }
    Ok(())
}

fn parse_err(input: &str, reason: &str) -> LatticeError {
    LatticeError::Parse { input: input.to_string(), reason: reason.to_string() }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<(), LatticeError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(parse_err(self.src, &format!("expected `{c}` at byte {}", self.pos)))
        }
    }

    fn name(&mut self) -> Result<&'a str, LatticeError> {
        let src = self.src;
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.src[self.pos..].chars().next() {
            if matches!(c, '{' | '}' | '(' | ')' | ',') {
                break;
            }
            self.pos += c.len_utf8();
        }
        let n = src[start..self.pos].trim();
        if n.is_empty() {
            return Err(parse_err(self.src, &format!("expected a name at byte {start}")));
        }
        Ok(n)
    }

    fn label(&mut self, lattice: &Lattice) -> Result<Label, LatticeError> {
        match &lattice.kind {
            Kind::Atoms { universe } => {
                self.expect('{')?;
                let mut atoms = BTreeSet::new();
                if self.peek() == Some('}') {
                    self.pos += 1;
                    return Ok(Label::Atoms(atoms));
                }
                loop {
                    let n = self.name()?;
                    let atom = universe
                        .get(n)
                        .cloned()
                        .ok_or_else(|| parse_err(self.src, &format!("undeclared atom `{n}`")))?;
                    atoms.insert(atom);
                    match self.peek() {
                        Some(',') => self.pos += 1,
                        Some('}') => {
                            self.pos += 1;
                            return Ok(Label::Atoms(atoms));
                        }
                        _ => return Err(parse_err(self.src, "unterminated atom set")),
                    }
                }
            }
            Kind::Levels { .. } => {
                let n = self.name()?.to_string();
                lattice.level(&n).map_err(|_| parse_err(self.src, &format!("unknown level `{n}`")))
            }
            Kind::Product { dims } => {
                self.expect('(')?;
                let mut coords = Vec::with_capacity(dims.len());
                for (i, (_, l)) in dims.iter().enumerate() {
                    if i > 0 {
                        self.expect(',')?;
                    }
                    coords.push(self.label(l)?);
                }
                self.expect(')')?;
                Ok(Label::Tuple(coords))
            }
        }
    }
}

/// True iff no two distinct members are comparable.
pub fn is_antichain(labels: &[Label]) -> Result<bool, LatticeError> {
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            if a != b && (a.leq(b)? || b.leq(a)?) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Minimal elements of a label set, de-duplicated and in canonical order.
pub fn minimal_elements(labels: &[Label]) -> Result<Vec<Label>, LatticeError> {
    let mut distinct: Vec<Label> = Vec::new();
    for l in labels {
        if !distinct.contains(l) {
            distinct.push(l.clone());
        }
    }
    let mut out = Vec::new();
    for l in &distinct {
        let mut dominated = false;
        for o in &distinct {
            if o.lt(l)? {
                dominated = true;
                break;
            }
        }
        if !dominated {
            out.push(l.clone());
        }
    }
    out.sort_by(Label::canonical_cmp);
    Ok(out)
}

/// Hasse edges `(upper, lower)` of an arbitrary finite label set, by direct
/// comparison. Quadratic; meant for small sets and for cross-checking.
pub fn hasse_edges(elements: &[Label]) -> Result<Vec<(usize, usize)>, LatticeError> {
    let n = elements.len();
    let mut below = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            below[i][j] = elements[j].lt(&elements[i])?;
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if below[i][j] && !(0..n).any(|k| below[i][k] && below[k][j]) {
                edges.push((i, j));
            }
        }
    }
    Ok(edges)
}

/// Renders labels and Hasse edges `(upper, lower)` as a DOT digraph.
pub fn to_dot(elements: &[Label], edges: &[(usize, usize)]) -> String {
    let mut out = String::from("digraph lattice {\n  rankdir=TB;\n");
    for (i, l) in elements.iter().enumerate() {
        out.push_str(&format!("  n{i} [label=\"{}\"];\n", l.to_string().replace('"', "\\\"")));
    }
    for (a, b) in edges {
        out.push_str(&format!("  n{a} -> n{b};\n"));
    }
    out.push_str("}\n");
    out
}

/// The join-closure of the distinct labels present in a context.
///
/// Every node is identified with the bitmask of generators (distinct input
/// labels) below it; for closure nodes `x ⊑ y` iff `mask(x) ⊆ mask(y)`, so
/// order tests never touch the label values after construction.
#[derive(Debug)]
pub struct RealizedLattice {
    generators: Vec<Label>,
    nodes: Vec<Label>,
    masks: Vec<u64>,
    index: HashMap<Label, usize>,
    top: usize,
    children: Vec<OnceLock<Vec<usize>>>,
}

impl RealizedLattice {
    pub fn build<'a, I>(labels: I, max_distinct: usize) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = &'a Label>,
    {
        let mut generators: Vec<Label> = Vec::new();
        for l in labels {
            if !generators.contains(l) {
                generators.push(l.clone());
            }
        }
        if generators.is_empty() {
            return Err(LatticeError::Empty);
        }
        let cap = max_distinct.min(63);
        if generators.len() > cap {
            return Err(LatticeError::Capacity { distinct: generators.len(), max: cap });
        }
        generators.sort_by(Label::canonical_cmp);

        // Join-closure: extending by one generator at a time yields every join
        // of a non-empty generator subset.
        let mut nodes: Vec<Label> = Vec::new();
        let mut seen: HashSet<Label> = HashSet::new();
        for g in &generators {
            let existing = nodes.len();
            if seen.insert(g.clone()) {
                nodes.push(g.clone());
            }
            for i in 0..existing {
                let j = nodes[i].join(g)?;
                if seen.insert(j.clone()) {
                    nodes.push(j);
                }
            }
        }

        let mut keyed: Vec<(u64, String, Label)> = nodes
            .into_iter()
            .map(|l| {
                let s = l.to_string();
                (l.height(), s, l)
            })
            .collect();
        keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        let nodes: Vec<Label> = keyed.into_iter().map(|(_, _, l)| l).collect();

        let mut masks = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let mut m = 0u64;
            for (gi, g) in generators.iter().enumerate() {
                if g.leq(n)? {
                    m |= 1 << gi;
                }
            }
            masks.push(m);
        }
        let full = if generators.len() == 64 { u64::MAX } else { (1u64 << generators.len()) - 1 };
        let top = masks.iter().position(|m| *m == full).expect("closure contains the full join");
        let index = nodes.iter().cloned().enumerate().map(|(i, l)| (l, i)).collect();
        let children = (0..nodes.len()).map(|_| OnceLock::new()).collect();
        Ok(RealizedLattice { generators, nodes, masks, index, top, children })
    }

    /// Distinct input labels, in canonical order. Bit `i` of a node mask
    /// refers to `generators()[i]`.
    pub fn generators(&self) -> &[Label] {
        &self.generators
    }

    pub fn nodes(&self) -> &[Label] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn top(&self) -> usize {
        self.top
    }

    /// The join of every input label.
    pub fn top_label(&self) -> &Label {
        &self.nodes[self.top]
    }

    pub fn label(&self, node: usize) -> &Label {
        &self.nodes[node]
    }

    pub fn mask(&self, node: usize) -> u64 {
        self.masks[node]
    }

    pub fn index_of(&self, label: &Label) -> Result<usize, LatticeError> {
        self.index.get(label).copied().ok_or_else(|| LatticeError::NotInClosure(label.to_string()))
    }

    /// Index of the generator equal to `label`, if any.
    pub fn generator_index(&self, label: &Label) -> Option<usize> {
        self.generators.iter().position(|g| g == label)
    }

    pub fn leq_nodes(&self, a: usize, b: usize) -> bool {
        self.masks[a] & !self.masks[b] == 0
    }

    /// Minimal closure nodes (the leaves of the search DAG).
    pub fn minimal_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.children_of(i).is_empty()).collect()
    }

    /// Immediate predecessors of `node`: the maximal closure nodes strictly
    /// below it. Computed on first use.
    pub fn children_of(&self, node: usize) -> &[usize] {
        self.children[node].get_or_init(|| {
            let m = self.masks[node];
            let mut accepted: Vec<usize> = Vec::new();
            // Nodes are sorted by ascending height, so walking backwards
            // visits every strict upper bound of a candidate before it.
            for j in (0..self.nodes.len()).rev() {
                let mj = self.masks[j];
                if mj == m || mj & !m != 0 {
                    continue;
                }
                if accepted.iter().all(|&a| mj & !self.masks[a] != 0) {
                    accepted.push(j);
                }
            }
            accepted.sort_by(|a, b| self.nodes[*a].canonical_cmp(&self.nodes[*b]));
            accepted
        })
    }

    pub fn children(&self, label: &Label) -> Result<Vec<&Label>, LatticeError> {
        let i = self.index_of(label)?;
        Ok(self.children_of(i).iter().map(|&c| &self.nodes[c]).collect())
    }

    /// All Hasse edges as `(upper, lower)` node pairs.
    pub fn hasse_edges(&self) -> Vec<(usize, usize)> {
        (0..self.len()).flat_map(|i| self.children_of(i).iter().map(move |&c| (i, c))).collect()
    }

    pub fn to_dot(&self) -> String {
        to_dot(&self.nodes, &self.hasse_edges())
    }
}
