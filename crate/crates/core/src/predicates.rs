//! Predicate specifications, XML parsing, inference from lock-variable names,
//! monitor assignment and idle-predicate collection.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::{Time, SEC};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PredicateError {
    #[error("malformed predicate document: {0}")]
    Xml(String),
    #[error("unsupported kind {0:?}")]
    UnsupportedKind(String),
    #[error("missing <{0}> element")]
    Missing(&'static str),
    #[error("clause {0} has no terms")]
    EmptyClause(usize),
    #[error("predicate has no clauses")]
    NoClauses,
    #[error("variable {var:?} repeated in clause {clause}")]
    DuplicateVariable { clause: usize, var: String },
    #[error("linear predicates must be a single conjunctive clause, got {0}")]
    LinearNeedsOneClause(usize),
    #[error("malformed lock variable {name:?}: {reason}")]
    BadLockName { name: String, reason: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredicateKind {
    Linear,
    Semilinear,
}

impl PredicateKind {
    fn tag(self) -> &'static str {
        match self {
            PredicateKind::Linear => "linear",
            PredicateKind::Semilinear => "semilinear",
        }
    }
}

/// One equality test `var = value` of a conjunctive clause.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term {
    pub var: String,
    pub value: Vec<u8>,
}

impl Term {
    pub fn new(var: impl Into<String>, value: impl AsRef<[u8]>) -> Self {
        Self { var: var.into(), value: value.as_ref().to_vec() }
    }
}

/// ¬P in disjunctive normal form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSpec {
    pub name: String,
    pub kind: PredicateKind,
    pub clauses: Vec<Vec<Term>>,
}

impl PredicateSpec {
    pub fn new(name: impl Into<String>, kind: PredicateKind, clauses: Vec<Vec<Term>>) -> Result<Self, PredicateError> {
        let spec = Self { name: name.into(), kind, clauses };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PredicateError> {
        if self.clauses.is_empty() {
            return Err(PredicateError::NoClauses);
        }
        for (i, clause) in self.clauses.iter().enumerate() {
            if clause.is_empty() {
                return Err(PredicateError::EmptyClause(i));
            }
            let mut seen = HashSet::new();
            for t in clause {
                if !seen.insert(&t.var) {
                    // Allowed with distinct values, as in the edge-mutex clause.
                    if clause.iter().filter(|u| u.var == t.var).map(|u| &u.value).collect::<HashSet<_>>().len() < 2 {
                        return Err(PredicateError::DuplicateVariable { clause: i, var: t.var.clone() });
                    }
                }
            }
        }
        if self.kind == PredicateKind::Linear && self.clauses.len() != 1 {
            return Err(PredicateError::LinearNeedsOneClause(self.clauses.len()));
        }
        Ok(())
    }

    /// Every variable named by some clause.
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        let mut seen = HashSet::new();
        self.clauses.iter().flatten().map(|t| t.var.as_str()).filter(move |v| seen.insert(*v))
    }

    pub fn mentions(&self, var: &str) -> bool {
        self.clauses.iter().flatten().any(|t| t.var == var)
    }
}

fn child<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn text(node: roxmltree::Node<'_, '_>) -> String {
    node.text().unwrap_or("").trim().to_string()
}

/// Parses the XML predicate format. The document carries no name; `name`
/// labels the result.
pub fn parse_spec(name: &str, document: &str) -> Result<PredicateSpec, PredicateError> {
    let doc = roxmltree::Document::parse(document).map_err(|e| PredicateError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("predicate") {
        return Err(PredicateError::Missing("predicate"));
    }
    let kind = match text(child(root, "type").ok_or(PredicateError::Missing("type"))?).as_str() {
        "linear" | "conjunctive" => PredicateKind::Linear,
        "semilinear" => PredicateKind::Semilinear,
        other => return Err(PredicateError::UnsupportedKind(other.to_string())),
    };
    let mut clauses: BTreeMap<usize, Vec<Term>> = BTreeMap::new();
    for (pos, c) in root.children().filter(|c| c.has_tag_name("conjClause")).enumerate() {
        let id = child(c, "id").map(text).and_then(|t| t.parse().ok()).unwrap_or(pos);
        let mut terms = Vec::new();
        for v in c.children().filter(|v| v.has_tag_name("var")) {
            let var = text(child(v, "name").ok_or(PredicateError::Missing("name"))?);
            let value = text(child(v, "value").ok_or(PredicateError::Missing("value"))?);
            terms.push(Term::new(var, value));
        }
        if terms.is_empty() {
            return Err(PredicateError::EmptyClause(id));
        }
        clauses.insert(id, terms);
    }
    PredicateSpec::new(name, kind, clauses.into_values().collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn serialize_spec(spec: &PredicateSpec) -> String {
    let mut out = String::from("<predicate>\n");
    let _ = writeln!(out, "  <type>{}</type>", spec.kind.tag());
    for (i, clause) in spec.clauses.iter().enumerate() {
        let _ = writeln!(out, "  <conjClause>\n    <id>{i}</id>");
        for t in clause {
            let _ = writeln!(
                out,
                "    <var>\n      <name>{}</name> <value>{}</value>\n    </var>",
                escape(&t.var),
                escape(&String::from_utf8_lossy(&t.value))
            );
        }
        out.push_str("  </conjClause>\n");
    }
    out.push_str("</predicate>\n");
    out
}

/// An edge between nodes `a < b` owned by different clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
}

impl Edge {
    pub fn new(x: u32, y: u32) -> Self {
        Self { a: x.min(y), b: x.max(y) }
    }

    pub fn flag_var(&self, node: u32) -> String {
        format!("flag{}_{}_{}", self.a, self.b, node)
    }

    pub fn turn_var(&self) -> String {
        format!("turn{}_{}", self.a, self.b)
    }

    pub fn predicate_name(&self) -> String {
        format!("mutex:{}_{}", self.a, self.b)
    }

    pub fn other(&self, node: u32) -> u32 {
        if node == self.a {
            self.b
        } else {
            self.a
        }
    }

    /// ¬P: (flagA = true ∧ turn = A) ∧ (flagB = true ∧ turn = B).
    pub fn mutex_spec(&self) -> PredicateSpec {
        let (a, b) = (self.a.to_string(), self.b.to_string());
        PredicateSpec {
            name: self.predicate_name(),
            kind: PredicateKind::Semilinear,
            clauses: vec![vec![
                Term::new(self.flag_var(self.a), "true"),
                Term::new(self.turn_var(), &a),
                Term::new(self.flag_var(self.b), "true"),
                Term::new(self.turn_var(), &b),
            ]],
        }
    }

    /// Recovers the edge from a predicate name produced by `predicate_name`.
    pub fn from_predicate_name(name: &str) -> Option<Edge> {
        let (a, b) = name.strip_prefix("mutex:")?.split_once('_')?;
        Some(Edge::new(a.parse().ok()?, b.parse().ok()?))
    }
}

fn parse_ids(rest: &str, name: &str) -> Result<Option<Vec<u32>>, PredicateError> {
    let parts: Vec<&str> = rest.split('_').collect();
    if parts.iter().any(|p| p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit())) {
        return Ok(None);
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<u32>()
                .map_err(|_| PredicateError::BadLockName { name: name.to_string(), reason: "node id out of range" })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// The edge whose lock `varname` belongs to, if it follows the lock naming
/// convention (`flag<A>_<B>_<A|B>` or `turn<A>_<B>`, `A < B`).
pub fn lock_edge(varname: &str) -> Result<Option<Edge>, PredicateError> {
    let bad = |reason| PredicateError::BadLockName { name: varname.to_string(), reason };
    let (ids, is_flag) = if let Some(rest) = varname.strip_prefix("flag") {
        (parse_ids(rest, varname)?, true)
    } else if let Some(rest) = varname.strip_prefix("turn") {
        (parse_ids(rest, varname)?, false)
    } else {
        return Ok(None);
    };
    let Some(ids) = ids else { return Ok(None) };
    match (is_flag, ids.as_slice()) {
        (true, &[a, b, owner]) => {
            if a >= b {
                return Err(bad("first node id must be smaller"));
            }
            if owner != a && owner != b {
                return Err(bad("flag owner is not an endpoint"));
            }
            Ok(Some(Edge { a, b }))
        }
        (false, &[a, b]) => {
            if a >= b {
                return Err(bad("first node id must be smaller"));
            }
            Ok(Some(Edge { a, b }))
        }
        _ => Ok(None),
    }
}

/// Edge-mutex predicate for lock variables, `None` for anything else.
pub fn infer_from_variable(varname: &str) -> Result<Option<PredicateSpec>, PredicateError> {
    Ok(lock_edge(varname)?.map(|e| e.mutex_spec()))
}

/// 64-bit FNV-1a; stable across runs and platforms.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn assign_monitor(name: &str, monitor_count: usize) -> usize {
    assert!(monitor_count >= 1, "need at least one monitor");
    (stable_hash(name) % monitor_count as u64) as usize
}

/// 60 simulated seconds.
pub const DEFAULT_IDLE_TIMEOUT: Time = 60 * SEC;

#[derive(Clone, Debug)]
pub struct Registration {
    pub spec: PredicateSpec,
    pub last_activity: Time,
    pub monitor: usize,
}

#[derive(Clone, Debug)]
pub struct PredicateRegistry {
    active: BTreeMap<String, Registration>,
    pub idle_timeout: Time,
    pub monitor_count: usize,
}

impl PredicateRegistry {
    pub fn new(monitor_count: usize, idle_timeout: Time) -> Self {
        assert!(monitor_count >= 1, "need at least one monitor");
        Self { active: BTreeMap::new(), idle_timeout, monitor_count }
    }

    /// Registers (or refreshes) a spec. Returns its monitor and whether the
    /// entry is new.
    pub fn register(&mut self, spec: &PredicateSpec, now: Time) -> (usize, bool) {
        if let Some(r) = self.active.get_mut(&spec.name) {
            r.last_activity = r.last_activity.max(now);
            return (r.monitor, false);
        }
        let monitor = assign_monitor(&spec.name, self.monitor_count);
        self.active.insert(spec.name.clone(), Registration { spec: spec.clone(), last_activity: now, monitor });
        (monitor, true)
    }

    pub fn touch(&mut self, name: &str, now: Time) {
        if let Some(r) = self.active.get_mut(name) {
            r.last_activity = r.last_activity.max(now);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Registration> {
        self.active.get(name)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.active.keys()
    }

    /// Specs mentioning `var`.
    pub fn watching<'a>(&'a self, var: &'a str) -> impl Iterator<Item = &'a PredicateSpec> + 'a {
        self.active.values().map(|r| &r.spec).filter(move |s| s.mentions(var))
    }

    /// Drops predicates idle for longer than the timeout and returns their
    /// names so monitors can release state.
    pub fn gc_inactive(&mut self, now: Time) -> Vec<String> {
        let timeout = self.idle_timeout;
        let dead: Vec<String> = self
            .active
            .iter()
            .filter(|(_, r)| now.saturating_sub(r.last_activity) > timeout)
            .map(|(n, _)| n.clone())
            .collect();
        for n in &dead {
            self.active.remove(n);
        }
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG4: &str = "<predicate>
  <type>semilinear</type>
  <conjClause>
    <id>0</id>
    <var>
      <name>x2</name> <value>1</value>
    </var>
    <var>
      <name>y2</name> <value>1</value>
    </var>
  </conjClause>
  <conjClause>
    <id>1</id>
    <var>
      <name>z2</name> <value>1</value>
    </var>
  </conjClause>
</predicate>";

    #[test]
    fn parses_two_clause_document() {
        let s = parse_spec("p", FIG4).unwrap();
        assert_eq!(s.kind, PredicateKind::Semilinear);
        assert_eq!(s.clauses, vec![vec![Term::new("x2", "1"), Term::new("y2", "1")], vec![Term::new("z2", "1")]]);
    }

    #[test]
    fn single_term_linear() {
        let doc = "<predicate><type>linear</type><conjClause><id>0</id>\
                   <var><name>x</name><value>1</value></var></conjClause></predicate>";
        let s = parse_spec("p", doc).unwrap();
        assert_eq!((s.kind, s.clauses.len(), s.clauses[0].len()), (PredicateKind::Linear, 1, 1));
    }

    #[test]
    fn rejects_unknown_kind_and_empty_clause() {
        let doc = "<predicate><type>bounded-sum</type></predicate>";
        let err = parse_spec("p", doc).unwrap_err();
        assert!(err.to_string().contains("unsupported kind"), "{err}");
        let doc = "<predicate><type>linear</type><conjClause><id>0</id></conjClause></predicate>";
        assert_eq!(parse_spec("p", doc), Err(PredicateError::EmptyClause(0)));
        assert!(matches!(parse_spec("p", "<predicate>"), Err(PredicateError::Xml(_))));
    }

    #[test]
    fn serialize_round_trip() {
        let s = parse_spec("p", FIG4).unwrap();
        assert_eq!(parse_spec("p", &serialize_spec(&s)).unwrap(), s);
        let m = Edge::new(42, 17).mutex_spec();
        assert_eq!(parse_spec(&m.name, &serialize_spec(&m)).unwrap(), m);
    }

    #[test]
    fn infers_edge_mutex() {
        let spec = infer_from_variable("flag17_42_17").unwrap().unwrap();
        assert_eq!(spec.name, "mutex:17_42");
        assert_eq!(spec.clauses[0].len(), 4);
        assert_eq!(infer_from_variable("turn17_42").unwrap().unwrap(), spec);
        assert_eq!(infer_from_variable("flag17_42_42").unwrap().unwrap(), spec);
        assert_eq!(infer_from_variable("color17").unwrap(), None);
        assert_eq!(infer_from_variable("flagpole").unwrap(), None);
        assert!(infer_from_variable("flag42_17_42").is_err());
        assert!(infer_from_variable("turn5_5").is_err());
        assert!(infer_from_variable("flag1_2_3").is_err());
    }

    #[test]
    fn registration_is_idempotent() {
        let mut r = PredicateRegistry::new(3, DEFAULT_IDLE_TIMEOUT);
        for v in ["turn1_2", "flag1_2_2", "flag1_2_1"] {
            r.register(&infer_from_variable(v).unwrap().unwrap(), 0);
        }
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn monitor_assignment() {
        assert_eq!(assign_monitor("anything", 1), 0);
        assert_eq!(assign_monitor("mutex:1_2", 5), assign_monitor("mutex:1_2", 5));
    }

    #[test]
    fn gc_removes_only_idle_entries() {
        let mut r = PredicateRegistry::new(1, 10);
        assert!(r.gc_inactive(100).is_empty());
        let spec = Edge::new(1, 2).mutex_spec();
        r.register(&spec, 0);
        r.register(&Edge::new(3, 4).mutex_spec(), 15);
        assert_eq!(r.gc_inactive(20), vec![spec.name.clone()]);
        assert_eq!(r.len(), 1);
        let (_, fresh) = r.register(&spec, 21);
        assert!(fresh);
    }
}
