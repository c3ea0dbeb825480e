//! Local predicate detectors and monitors.
//!
//! A server emits a [`Candidate`] whenever a PUT ends a local state that may
//! take part in ¬P. Monitors search the candidate streams for a consistent
//! cut satisfying ¬P.
//!
//! Each conjunctive clause is handled by reducing it to conjunctive
//! detection: every variable of the clause is pinned to one server, the
//! terms on that variable must hold at that server, and one [`GlobalState`]
//! runs per pinning. A variable's terms are always matched against one
//! server's version set, so two terms on the same variable need concurrent
//! versions at one replica.

pub mod local;
pub mod oracle;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::hvc::{CausalRelation, Epsilon, HvcInterval};
use crate::kvstore::VersionedValue;
use crate::predicates::{Edge, PredicateKind, PredicateRegistry, PredicateSpec, Term};
use crate::simnet::Time;

pub use local::LocalDetector;

/// Default bound on pending candidates per server and global state.
pub const DEFAULT_QUEUE_BOUND: usize = 1024;

/// Largest number of variable pinnings tracked for one clause.
const MAX_PINNINGS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectionError {
    #[error("clause {clause} of {predicate} needs {count} global states")]
    TooWide { predicate: String, clause: usize, count: usize },
    #[error("no specification known for predicate {0:?}")]
    UnknownPredicate(String),
    #[error("trace too large for exhaustive search: {0}")]
    TraceTooLarge(String),
    #[error("malformed trace: {0}")]
    BadTrace(String),
}

/// Variable name to every version present at a server.
pub type PartialState = BTreeMap<String, VersionedValue>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub predicate: String,
    pub server: usize,
    /// Position in the server's stream for this predicate.
    pub seq: u64,
    pub interval: HvcInterval,
    pub state: PartialState,
}

impl Candidate {
    pub fn start_time(&self) -> Time {
        self.interval.start().own_time()
    }

    pub fn end_time(&self) -> Time {
        self.interval.end().own_time()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Satisfied,
    Violated,
}

/// For each variable of a clause, the values it is tested for.
fn requirements(clause: &[Term]) -> Vec<(String, Vec<Vec<u8>>)> {
    let mut out: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
    for t in clause {
        match out.iter_mut().find(|(v, _)| *v == t.var) {
            Some((_, vals)) => vals.push(t.value.clone()),
            None => out.push((t.var.clone(), vec![t.value.clone()])),
        }
    }
    out
}

/// Some stored version of `var` equals each required value.
fn holds(state: &PartialState, var: &str, required: &[Vec<u8>]) -> bool {
    state.get(var).is_some_and(|vv| required.iter().all(|r| vv.values().any(|v| v == r)))
}

/// True if some term of some clause holds in `state`.
pub fn any_term_holds(state: &PartialState, spec: &PredicateSpec) -> bool {
    spec.clauses.iter().flatten().any(|t| holds(state, &t.var, std::slice::from_ref(&t.value)))
}

/// ¬P holds on a cut if some clause has, for each of its variables, one
/// state whose versions of that variable cover every value the clause tests.
/// Variables absent everywhere make their terms false.
pub fn eval_states<'a>(states: impl IntoIterator<Item = &'a PartialState> + Clone, spec: &PredicateSpec) -> Verdict {
    let violated = spec.clauses.iter().any(|clause| {
        requirements(clause).iter().all(|(var, req)| states.clone().into_iter().any(|s| holds(s, var, req)))
    });
    if violated {
        Verdict::Violated
    } else {
        Verdict::Satisfied
    }
}

pub fn eval_predicate(gs: &[&Candidate], spec: &PredicateSpec) -> Verdict {
    eval_states(gs.iter().map(|c| &c.state), spec)
}

fn relation(a: &Candidate, b: &Candidate) -> CausalRelation {
    a.interval.relation(&b.interval).unwrap_or(CausalRelation::Concurrent)
}

/// Every pair of candidates is concurrent.
pub fn pairwise_concurrent(gs: &[&Candidate]) -> bool {
    gs.iter()
        .enumerate()
        .all(|(i, a)| gs[i + 1..].iter().all(|b| a.server != b.server && relation(a, b) == CausalRelation::Concurrent))
}

#[derive(Clone, Debug)]
struct Part {
    server: usize,
    reqs: Vec<(String, Vec<Vec<u8>>)>,
    held: Option<Rc<Candidate>>,
    queue: VecDeque<Rc<Candidate>>,
}

impl Part {
    fn wants(&self, c: &Candidate) -> bool {
        c.server == self.server && self.reqs.iter().all(|(v, r)| holds(&c.state, v, r))
    }
}

/// Outcome of [`GlobalState::make_consistent`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Consistent,
    /// Some server has no usable candidate yet.
    Starved,
}

/// A cut under construction for one clause pinning: one held candidate per
/// involved server plus the candidates waiting behind it.
#[derive(Clone, Debug)]
pub struct GlobalState {
    clause: usize,
    parts: Vec<Part>,
    prefer_eligible: bool,
    queue_bound: usize,
    pub dropped: u64,
}

impl GlobalState {
    /// `pinning` maps each required variable to the server that must show it.
    pub fn new(
        clause: usize,
        pinning: &[(String, Vec<Vec<u8>>, usize)],
        kind: PredicateKind,
        queue_bound: usize,
    ) -> Self {
        let mut parts: Vec<Part> = Vec::new();
        for (var, req, server) in pinning {
            match parts.iter_mut().find(|p| p.server == *server) {
                Some(p) => p.reqs.push((var.clone(), req.clone())),
                None => parts.push(Part {
                    server: *server,
                    reqs: vec![(var.clone(), req.clone())],
                    held: None,
                    queue: VecDeque::new(),
                }),
            }
        }
        parts.sort_by_key(|p| p.server);
        Self {
            clause,
            parts,
            prefer_eligible: kind == PredicateKind::Semilinear,
            queue_bound: queue_bound.max(1),
            dropped: 0,
        }
    }

    pub fn servers(&self) -> impl Iterator<Item = usize> + '_ {
        self.parts.iter().map(|p| p.server)
    }

    /// Queues `c` if its server is involved and its state satisfies that
    /// server's share of the clause.
    pub fn offer(&mut self, c: &Rc<Candidate>) -> bool {
        let bound = self.queue_bound;
        let Some(p) = self.parts.iter_mut().find(|p| p.wants(c)) else { return false };
        if p.queue.len() >= bound {
            p.queue.pop_front();
            self.dropped += 1;
        }
        p.queue.push_back(Rc::clone(c));
        true
    }

    pub fn held(&self) -> Vec<&Candidate> {
        self.parts.iter().filter_map(|p| p.held.as_deref()).collect()
    }

    fn fill(&mut self) -> bool {
        for p in &mut self.parts {
            if p.held.is_none() {
                p.held = p.queue.pop_front();
            }
        }
        self.parts.iter().all(|p| p.held.is_some())
    }

    /// Parts whose held candidate happened before another held candidate.
    fn forbidden(&self) -> Vec<usize> {
        (0..self.parts.len())
            .filter(|&i| {
                let a = self.parts[i].held.as_deref().expect("filled");
                self.parts
                    .iter()
                    .enumerate()
                    .any(|(j, q)| j != i && relation(a, q.held.as_deref().expect("filled")) == CausalRelation::Before)
            })
            .collect()
    }

    /// Advancing part `i` yields a candidate concurrent with every other
    /// held one.
    fn eligible(&self, i: usize) -> bool {
        let Some(next) = self.parts[i].queue.front() else { return false };
        self.parts
            .iter()
            .enumerate()
            .all(|(j, q)| j == i || relation(next, q.held.as_deref().expect("filled")) == CausalRelation::Concurrent)
    }

    fn advance(&mut self, i: usize) {
        let p = &mut self.parts[i];
        p.held = p.queue.pop_front();
    }

    /// Replaces held candidates that happened before another held candidate
    /// until the cut is pairwise concurrent or a server runs dry.
    pub fn make_consistent(&mut self) -> Progress {
        loop {
            if !self.fill() {
                return Progress::Starved;
            }
            match self.forbidden().first() {
                None => return Progress::Consistent,
                Some(&i) => self.advance(i),
            }
        }
    }

    /// Runs until a violating cut is found or input runs out. After a report
    /// the earliest-ending candidate of the cut is retired so the search
    /// continues with fresh cuts.
    pub fn step(&mut self) -> Option<Vec<Rc<Candidate>>> {
        loop {
            if !self.fill() {
                return None;
            }
            let forbidden = self.forbidden();
            if forbidden.is_empty() {
                let evidence: Vec<Rc<Candidate>> =
                    self.parts.iter().map(|p| Rc::clone(p.held.as_ref().expect("filled"))).collect();
                let retire = (0..self.parts.len())
                    .min_by_key(|&i| (evidence[i].end_time(), self.parts[i].server))
                    .expect("non-empty clause");
                self.parts[retire].held = None;
                return Some(evidence);
            }
            let pick = if self.prefer_eligible {
                forbidden.iter().copied().find(|&i| self.eligible(i)).unwrap_or(forbidden[0])
            } else {
                forbidden[0]
            };
            self.advance(pick);
            if !self.prefer_eligible && self.make_consistent() == Progress::Starved {
                return None;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ViolationReport {
    pub predicate: String,
    pub monitor: usize,
    pub clause: usize,
    pub evidence: Vec<Candidate>,
    /// Earliest evidence start, lowered by ε when finite.
    pub t_violate: Time,
    /// Latest evidence start: when the violating cut came into being.
    pub onset: Time,
    pub detection_time: Time,
}

impl ViolationReport {
    pub fn latency(&self) -> Time {
        self.detection_time.saturating_sub(self.t_violate)
    }

    /// Evidence is a consistent cut on which ¬P holds.
    pub fn is_sound(&self, spec: &PredicateSpec) -> bool {
        let gs: Vec<&Candidate> = self.evidence.iter().collect();
        pairwise_concurrent(&gs) && eval_predicate(&gs, spec) == Verdict::Violated
    }
}

/// Detection state for one predicate.
#[derive(Clone, Debug)]
pub struct PredicateMonitor {
    spec: PredicateSpec,
    states: Vec<GlobalState>,
    epsilon: Epsilon,
    recent: VecDeque<Vec<(usize, u64)>>,
    pub candidates: u64,
}

impl PredicateMonitor {
    pub fn new(
        spec: PredicateSpec,
        servers: usize,
        epsilon: Epsilon,
        queue_bound: usize,
    ) -> Result<Self, DetectionError> {
        let mut states = Vec::new();
        for (ci, clause) in spec.clauses.iter().enumerate() {
            let reqs = requirements(clause);
            let count = servers.checked_pow(reqs.len() as u32).unwrap_or(usize::MAX);
            if count > MAX_PINNINGS {
                return Err(DetectionError::TooWide { predicate: spec.name.clone(), clause: ci, count });
            }
            for code in 0..count {
                let mut rest = code;
                let pinning: Vec<(String, Vec<Vec<u8>>, usize)> = reqs
                    .iter()
                    .map(|(v, r)| {
                        let s = rest % servers;
                        rest /= servers;
                        (v.clone(), r.clone(), s)
                    })
                    .collect();
                states.push(GlobalState::new(ci, &pinning, spec.kind, queue_bound));
            }
        }
        Ok(Self { spec, states, epsilon, recent: VecDeque::new(), candidates: 0 })
    }

    pub fn spec(&self) -> &PredicateSpec {
        &self.spec
    }

    pub fn dropped(&self) -> u64 {
        self.states.iter().map(|g| g.dropped).sum()
    }

    /// Feeds one candidate; candidates from a server must arrive in order.
    pub fn on_candidate(&mut self, c: Candidate, monitor: usize, now: Time) -> Vec<ViolationReport> {
        self.candidates += 1;
        let c = Rc::new(c);
        let mut out = Vec::new();
        for gi in 0..self.states.len() {
            if !self.states[gi].offer(&c) {
                continue;
            }
            while let Some(ev) = self.states[gi].step() {
                let key: Vec<(usize, u64)> = ev.iter().map(|c| (c.server, c.start_time())).collect();
                if self.recent.contains(&key) {
                    continue;
                }
                if self.recent.len() >= 64 {
                    self.recent.pop_front();
                }
                self.recent.push_back(key);
                out.push(self.report(self.states[gi].clause, &ev, monitor, now));
            }
        }
        out
    }

    fn report(&self, clause: usize, ev: &[Rc<Candidate>], monitor: usize, now: Time) -> ViolationReport {
        let earliest = ev.iter().map(|c| c.start_time()).min().unwrap_or(0);
        let onset = ev.iter().map(|c| c.start_time()).max().unwrap_or(0);
        let t_violate = match self.epsilon {
            Epsilon::Infinite => earliest,
            Epsilon::Finite(e) => earliest.saturating_sub(e),
        };
        ViolationReport {
            predicate: self.spec.name.clone(),
            monitor,
            clause,
            evidence: ev.iter().map(|c| (**c).clone()).collect(),
            t_violate,
            onset,
            detection_time: now,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MonitorStats {
    pub candidates: u64,
    pub reports: u64,
    pub collected: u64,
    pub dropped: u64,
}

/// A monitor process: every predicate hashed to it, with idle collection.
#[derive(Debug)]
pub struct Monitor {
    pub id: usize,
    servers: usize,
    epsilon: Epsilon,
    queue_bound: usize,
    registry: PredicateRegistry,
    static_specs: HashMap<String, PredicateSpec>,
    active: HashMap<String, PredicateMonitor>,
    pub stats: MonitorStats,
}

impl Monitor {
    pub fn new(
        id: usize,
        servers: usize,
        epsilon: Epsilon,
        registry: PredicateRegistry,
        static_specs: &[PredicateSpec],
    ) -> Self {
        Self {
            id,
            servers,
            epsilon,
            queue_bound: DEFAULT_QUEUE_BOUND,
            registry,
            static_specs: static_specs.iter().map(|s| (s.name.clone(), s.clone())).collect(),
            active: HashMap::new(),
            stats: MonitorStats::default(),
        }
    }

    pub fn with_queue_bound(mut self, bound: usize) -> Self {
        self.queue_bound = bound;
        self
    }

    pub fn active_predicates(&self) -> usize {
        self.active.len()
    }

    fn resolve(&self, name: &str) -> Option<PredicateSpec> {
        self.static_specs.get(name).cloned().or_else(|| Edge::from_predicate_name(name).map(|e| e.mutex_spec()))
    }

    pub fn on_candidate(&mut self, c: Candidate, now: Time) -> Result<Vec<ViolationReport>, DetectionError> {
        self.stats.candidates += 1;
        let name = c.predicate.clone();
        if !self.active.contains_key(&name) {
            let spec = self.resolve(&name).ok_or_else(|| DetectionError::UnknownPredicate(name.clone()))?;
            self.registry.register(&spec, now);
            let pm = PredicateMonitor::new(spec, self.servers, self.epsilon, self.queue_bound)?;
            self.active.insert(name.clone(), pm);
        }
        self.registry.touch(&name, now);
        let pm = self.active.get_mut(&name).expect("inserted above");
        let before = pm.dropped();
        let reports = pm.on_candidate(c, self.id, now);
        self.stats.dropped += pm.dropped() - before;
        self.stats.reports += reports.len() as u64;
        Ok(reports)
    }

    /// Releases state of predicates without recent candidates.
    pub fn gc(&mut self, now: Time) -> usize {
        let dead = self.registry.gc_inactive(now);
        for n in &dead {
            self.active.remove(n);
        }
        self.stats.collected += dead.len() as u64;
        dead.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvc::HybridVectorClock;
    use crate::kvstore::Version;

    pub(crate) fn state(pairs: &[(&str, &[(u32, &str)])]) -> PartialState {
        pairs
            .iter()
            .map(|(var, versions)| {
                let mut vv = VersionedValue::new();
                for (client, val) in versions.iter() {
                    vv.merge_in(Version::from_pairs([(*client, 1)]), val.as_bytes().to_vec());
                }
                (var.to_string(), vv)
            })
            .collect()
    }

    fn iv(owner: usize, s: &[u64], e: &[u64]) -> HvcInterval {
        let c = |x: &[u64]| HybridVectorClock::from_entries(owner, x.to_vec(), Epsilon::Infinite).unwrap();
        HvcInterval::new(c(s), c(e)).unwrap()
    }

    fn cand(pred: &str, server: usize, seq: u64, interval: HvcInterval, st: PartialState) -> Candidate {
        Candidate { predicate: pred.into(), server, seq, interval, state: st }
    }

    fn conj(name: &str, vars: &[&str]) -> PredicateSpec {
        PredicateSpec::new(name, PredicateKind::Linear, vec![vars.iter().map(|v| Term::new(*v, "1")).collect()])
            .unwrap()
    }

    #[test]
    fn mutex_needs_concurrent_turn_versions() {
        let spec = Edge::new(1, 2).mutex_spec();
        let s =
            state(&[("flag1_2_1", &[(1, "true")]), ("flag1_2_2", &[(2, "true")]), ("turn1_2", &[(1, "1"), (2, "2")])]);
        assert_eq!(eval_states([&s], &spec), Verdict::Violated);

        let off = state(&[("flag1_2_1", &[(1, "false")]), ("flag1_2_2", &[(2, "false")])]);
        assert_eq!(eval_states([&off], &spec), Verdict::Satisfied);

        // Turn "1" on one replica and "2" on another is replication lag.
        let a = state(&[("flag1_2_1", &[(1, "true")]), ("flag1_2_2", &[(2, "true")]), ("turn1_2", &[(1, "1")])]);
        let b = state(&[("turn1_2", &[(2, "2")])]);
        assert_eq!(eval_states([&a, &b], &spec), Verdict::Satisfied);
    }

    #[test]
    fn second_clause_alone_violates() {
        let spec = PredicateSpec::new(
            "fig",
            PredicateKind::Semilinear,
            vec![vec![Term::new("x2", "1"), Term::new("y2", "1")], vec![Term::new("z2", "1")]],
        )
        .unwrap();
        let s = state(&[("z2", &[(0, "1")])]);
        assert_eq!(eval_states([&s], &spec), Verdict::Violated);
        let s = state(&[("x2", &[(0, "1")])]);
        assert_eq!(eval_states([&s], &spec), Verdict::Satisfied);
        let none: [&PartialState; 0] = [];
        assert_eq!(eval_states(none, &spec), Verdict::Satisfied);
    }

    #[test]
    fn overlapping_true_intervals_reported() {
        let spec = conj("c", &["x", "y"]);
        let mut pm = PredicateMonitor::new(spec.clone(), 2, Epsilon::Infinite, 16).unwrap();
        let a = cand("c", 0, 1, iv(0, &[1, 0], &[5, 0]), state(&[("x", &[(0, "1")])]));
        let b = cand("c", 1, 1, iv(1, &[0, 2], &[0, 6]), state(&[("y", &[(1, "1")])]));
        assert!(pm.on_candidate(a, 0, 10).is_empty());
        let r = pm.on_candidate(b, 0, 11);
        assert_eq!(r.len(), 1);
        assert!(r[0].is_sound(&spec));
        assert_eq!((r[0].t_violate, r[0].onset, r[0].detection_time), (1, 2, 11));
    }

    #[test]
    fn serialized_true_intervals_not_reported() {
        let spec = conj("c", &["x", "y"]);
        let mut pm = PredicateMonitor::new(spec, 2, Epsilon::Infinite, 16).unwrap();
        // x's interval ends before a message reaches server 1, where y's starts.
        let a = cand("c", 0, 1, iv(0, &[1, 0], &[5, 0]), state(&[("x", &[(0, "1")])]));
        let b = cand("c", 1, 1, iv(1, &[5, 7], &[5, 9]), state(&[("y", &[(1, "1")])]));
        assert!(pm.on_candidate(a, 0, 10).is_empty());
        assert!(pm.on_candidate(b, 0, 11).is_empty());
    }

    #[test]
    fn finite_epsilon_treats_close_intervals_as_concurrent() {
        let spec = conj("c", &["x", "y"]);
        let mut pm = PredicateMonitor::new(spec, 2, Epsilon::Finite(10), 16).unwrap();
        let c = |o, s: &[u64], e: &[u64]| {
            let k = |x: &[u64]| HybridVectorClock::from_entries(o, x.to_vec(), Epsilon::Finite(10)).unwrap();
            HvcInterval::new(k(s), k(e)).unwrap()
        };
        let a = cand("c", 0, 1, c(0, &[1, 0], &[5, 0]), state(&[("x", &[(0, "1")])]));
        let b = cand("c", 1, 1, c(1, &[5, 7], &[5, 9]), state(&[("y", &[(1, "1")])]));
        pm.on_candidate(a, 0, 10);
        let r = pm.on_candidate(b, 0, 11);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].t_violate, 0);
    }

    #[test]
    fn make_consistent_advances_stale_candidate() {
        let spec = conj("c", &["x", "y"]);
        let pin = vec![("x".to_string(), vec![b"1".to_vec()], 0), ("y".to_string(), vec![b"1".to_vec()], 1)];
        let mut gs = GlobalState::new(0, &pin, PredicateKind::Linear, 16);
        let x = state(&[("x", &[(0, "1")])]);
        let y = state(&[("y", &[(1, "1")])]);
        let old = Rc::new(cand("c", 0, 1, iv(0, &[1, 0], &[2, 0]), x.clone()));
        let fresh = Rc::new(cand("c", 0, 2, iv(0, &[4, 0], &[9, 0]), x));
        let other = Rc::new(cand("c", 1, 1, iv(1, &[2, 3], &[2, 8]), y));
        gs.offer(&old);
        gs.offer(&other);
        assert_eq!(gs.make_consistent(), Progress::Starved);
        gs.offer(&fresh);
        assert_eq!(gs.make_consistent(), Progress::Consistent);
        assert_eq!(gs.held().iter().map(|c| c.seq).collect::<Vec<_>>(), vec![2, 1]);
        assert!(pairwise_concurrent(&gs.held()));
        let _ = spec;
    }

    #[test]
    fn keeps_running_after_report() {
        let spec = conj("c", &["x"]);
        let mut pm = PredicateMonitor::new(spec, 1, Epsilon::Infinite, 16).unwrap();
        let x = state(&[("x", &[(0, "1")])]);
        let r1 = pm.on_candidate(cand("c", 0, 1, iv(0, &[1], &[2]), x.clone()), 0, 3);
        let r2 = pm.on_candidate(cand("c", 0, 2, iv(0, &[5], &[6]), x), 0, 7);
        assert_eq!((r1.len(), r2.len()), (1, 1));
    }

    #[test]
    fn queue_overflow_drops_oldest() {
        let pin = vec![("x".to_string(), vec![b"1".to_vec()], 0), ("y".to_string(), vec![b"1".to_vec()], 1)];
        let mut gs = GlobalState::new(0, &pin, PredicateKind::Linear, 2);
        let x = state(&[("x", &[(0, "1")])]);
        for i in 0..5u64 {
            gs.offer(&Rc::new(cand("c", 0, i, iv(0, &[i, 0], &[i + 1, 0]), x.clone())));
        }
        assert_eq!(gs.dropped, 3);
    }

    #[test]
    fn monitor_collects_idle_predicates() {
        let reg = PredicateRegistry::new(1, 100);
        let mut m = Monitor::new(0, 2, Epsilon::Infinite, reg, &[]);
        let spec = Edge::new(1, 2).mutex_spec();
        let st = state(&[("flag1_2_1", &[(1, "true")])]);
        m.on_candidate(cand(&spec.name, 0, 1, iv(0, &[1, 0], &[2, 0]), st), 5).unwrap();
        assert_eq!(m.active_predicates(), 1);
        assert_eq!(m.gc(50), 0);
        assert_eq!(m.gc(500), 1);
        assert_eq!(m.active_predicates(), 0);
        let bad = cand("nope", 0, 1, iv(0, &[1, 0], &[2, 0]), PartialState::new());
        assert!(matches!(m.on_candidate(bad, 600), Err(DetectionError::UnknownPredicate(_))));
    }
}
