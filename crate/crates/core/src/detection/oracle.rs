//! Small message-passing traces, an exhaustive cut enumerator used as the
//! reference verdict, and the conversion of traces into candidate streams.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::hvc::{Epsilon, HvcInterval, HybridVectorClock};
use crate::kvstore::{Version, VersionedValue};
use crate::predicates::{PredicateKind, PredicateSpec, Term};

use super::{any_term_holds, eval_states, Candidate, DetectionError, PartialState, Verdict};

pub const MAX_PROCESSES: usize = 4;
pub const MAX_EVENTS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub enum TraceEvent {
    /// Replaces the process's versions of `var`.
    Write {
        var: String,
        value: VersionedValue,
    },
    Send {
        msg: usize,
    },
    Recv {
        msg: usize,
    },
}

/// Per-process event sequences. Every process implicitly ends with a final
/// event that closes its last local state; nothing after it is observed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub processes: Vec<Vec<TraceEvent>>,
}

impl Trace {
    fn check_messages(&self) -> Result<(), DetectionError> {
        let mut sent = std::collections::HashMap::new();
        for (p, evs) in self.processes.iter().enumerate() {
            for e in evs {
                if let TraceEvent::Send { msg } = e {
                    if sent.insert(*msg, p).is_some() {
                        return Err(DetectionError::BadTrace(format!("message {msg} sent twice")));
                    }
                }
            }
        }
        for evs in &self.processes {
            for e in evs {
                if let TraceEvent::Recv { msg } = e {
                    if !sent.contains_key(msg) {
                        return Err(DetectionError::BadTrace(format!("message {msg} never sent")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Orders all events so that every receive follows its send. Returns
    /// (process, event index) pairs.
    fn schedule(&self) -> Result<Vec<(usize, usize)>, DetectionError> {
        self.check_messages()?;
        let mut next = vec![0usize; self.processes.len()];
        let mut sent = std::collections::HashSet::new();
        let mut order = Vec::new();
        loop {
            let mut moved = false;
            for (p, evs) in self.processes.iter().enumerate() {
                while let Some(e) = evs.get(next[p]) {
                    match e {
                        TraceEvent::Recv { msg } if !sent.contains(msg) => break,
                        TraceEvent::Send { msg } => {
                            sent.insert(*msg);
                        }
                        _ => {}
                    }
                    order.push((p, next[p]));
                    next[p] += 1;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        if next.iter().zip(&self.processes).any(|(n, evs)| *n < evs.len()) {
            return Err(DetectionError::BadTrace("receive can never happen".into()));
        }
        Ok(order)
    }

    /// Local state after each write; entry 0 is the initial state.
    fn states(&self, p: usize) -> Vec<PartialState> {
        let mut out = vec![PartialState::new()];
        let mut cur = PartialState::new();
        for e in &self.processes[p] {
            if let TraceEvent::Write { var, value } = e {
                cur.insert(var.clone(), value.clone());
            }
            out.push(cur.clone());
        }
        out
    }
}

/// Counter vector clock of every event, plus the closing event.
fn vector_clocks(trace: &Trace) -> Result<Vec<Vec<Vec<u64>>>, DetectionError> {
    let n = trace.processes.len();
    let mut clocks: Vec<Vec<Vec<u64>>> = trace.processes.iter().map(|_| Vec::new()).collect();
    let mut cur = vec![vec![0u64; n]; n];
    let mut in_flight = std::collections::HashMap::new();
    for (p, i) in trace.schedule()? {
        cur[p][p] += 1;
        match &trace.processes[p][i] {
            TraceEvent::Send { msg } => {
                in_flight.insert(*msg, cur[p].clone());
            }
            TraceEvent::Recv { msg } => {
                let m = &in_flight[msg];
                for k in 0..n {
                    cur[p][k] = cur[p][k].max(m[k]);
                }
            }
            TraceEvent::Write { .. } => {}
        }
        clocks[p].push(cur[p].clone());
    }
    for p in 0..n {
        cur[p][p] += 1;
        clocks[p].push(cur[p].clone());
    }
    Ok(clocks)
}

fn leq(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Exhaustive possibility check: is there one local state per process,
/// pairwise concurrent, on which ¬P holds?
pub fn brute_force_detect(trace: &Trace, spec: &PredicateSpec) -> Result<Verdict, DetectionError> {
    let n = trace.processes.len();
    if n > MAX_PROCESSES {
        return Err(DetectionError::TraceTooLarge(format!("{n} processes")));
    }
    if let Some(evs) = trace.processes.iter().find(|e| e.len() > MAX_EVENTS) {
        return Err(DetectionError::TraceTooLarge(format!("{} events on one process", evs.len())));
    }
    let clocks = vector_clocks(trace)?;
    let states: Vec<Vec<PartialState>> = (0..n).map(|p| trace.states(p)).collect();
    let zero = vec![0u64; n];
    // State k of p lies between event k-1 (or the start) and event k.
    let bounds = |p: usize, k: usize| -> (&[u64], &[u64]) {
        let start = if k == 0 { &zero[..] } else { &clocks[p][k - 1][..] };
        (start, &clocks[p][k][..])
    };
    let precedes = |p: usize, a: usize, q: usize, b: usize| {
        let (_, end_a) = bounds(p, a);
        let (start_b, _) = bounds(q, b);
        b > 0 && leq(end_a, start_b)
    };
    let mut pick = vec![0usize; n];
    loop {
        let consistent = (0..n).all(|p| (0..n).all(|q| p == q || !precedes(p, pick[p], q, pick[q])));
        if consistent && eval_states((0..n).map(|p| &states[p][pick[p]]), spec) == Verdict::Violated {
            return Ok(Verdict::Violated);
        }
        let mut p = 0;
        loop {
            if p == n {
                return Ok(Verdict::Satisfied);
            }
            pick[p] += 1;
            if pick[p] < states[p].len() {
                break;
            }
            pick[p] = 0;
            p += 1;
        }
    }
}

/// Candidate streams the servers of `trace` would emit for `spec`, one
/// vector per process, with physical times `times[p][k]` for event k (the
/// closing event last). Times must increase strictly per process.
pub fn trace_candidates_at(
    trace: &Trace,
    spec: &PredicateSpec,
    epsilon: Epsilon,
    times: &[Vec<u64>],
) -> Result<Vec<Vec<Candidate>>, DetectionError> {
    let n = trace.processes.len();
    let mut hvc: Vec<HybridVectorClock> =
        (0..n).map(|p| HybridVectorClock::new(p, n, epsilon).expect("owner in range")).collect();
    let initial = hvc.clone();
    let mut at: Vec<Vec<HybridVectorClock>> = vec![Vec::new(); n];
    let mut in_flight = std::collections::HashMap::new();
    let bad = |e: crate::hvc::HvcError| DetectionError::BadTrace(e.to_string());
    for (p, i) in trace.schedule()? {
        let pt = times[p][i];
        hvc[p] = match &trace.processes[p][i] {
            TraceEvent::Recv { msg } => hvc[p].merge_receive(&in_flight[msg], pt).map_err(bad)?,
            _ => hvc[p].advance_send(pt).map_err(bad)?,
        };
        if let TraceEvent::Send { msg } = &trace.processes[p][i] {
            in_flight.insert(*msg, hvc[p].clone());
        }
        at[p].push(hvc[p].clone());
    }
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let close = hvc[p].advance_send(times[p][trace.processes[p].len()]).map_err(bad)?;
        at[p].push(close);
        let states = trace.states(p);
        let mut cands = Vec::new();
        let mut start = initial[p].clone();
        let mut start_k = 0;
        let len = trace.processes[p].len();
        // A local state ends at the next write or at the closing event.
        let boundaries = trace.processes[p]
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, TraceEvent::Write { .. }))
            .map(|(k, _)| k)
            .chain([len]);
        for k in boundaries {
            let end = at[p][k].clone();
            let state: PartialState = states[start_k]
                .iter()
                .filter(|(v, _)| spec.mentions(v))
                .map(|(v, vv)| (v.clone(), vv.clone()))
                .collect();
            if spec.kind == PredicateKind::Semilinear || any_term_holds(&state, spec) {
                cands.push(Candidate {
                    predicate: spec.name.clone(),
                    server: p,
                    seq: cands.len() as u64 + 1,
                    interval: HvcInterval::new(start.clone(), end.clone()).map_err(bad)?,
                    state,
                });
            }
            start = end;
            start_k = k + 1;
        }
        out.push(cands);
    }
    Ok(out)
}

/// As [`trace_candidates_at`] with event k of every process at time k + 1.
pub fn trace_candidates(
    trace: &Trace,
    spec: &PredicateSpec,
    epsilon: Epsilon,
) -> Result<Vec<Vec<Candidate>>, DetectionError> {
    let times: Vec<Vec<u64>> = trace.processes.iter().map(|evs| (1..=evs.len() as u64 + 1).collect()).collect();
    trace_candidates_at(trace, spec, epsilon, &times)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFamily {
    /// Conjunctive ¬P over one variable per process.
    Conjunctive,
    /// Two-clause DNF over process-local variables; writes may leave two
    /// concurrent versions.
    Dnf,
}

fn value(rng: &mut impl Rng, multi: bool) -> VersionedValue {
    let pick = |rng: &mut dyn rand::RngCore| if rng.random_bool(0.5) { "1" } else { "0" };
    let mut vv = VersionedValue::single(Version::from_pairs([(0, 1)]), pick(rng).as_bytes().to_vec());
    if multi && rng.random_bool(0.3) {
        vv.merge_in(Version::from_pairs([(1, 1)]), pick(rng).as_bytes().to_vec());
    }
    vv
}

/// A random trace together with the predicate it is checked against.
pub fn random_case(rng: &mut impl Rng, family: TraceFamily) -> (Trace, PredicateSpec) {
    let n = rng.random_range(2..=MAX_PROCESSES);
    let vars: Vec<Vec<String>> = (0..n)
        .map(|p| match family {
            TraceFamily::Conjunctive => vec![format!("x{p}")],
            TraceFamily::Dnf => vec![format!("x{p}"), format!("y{p}")],
        })
        .collect();
    let budget: Vec<usize> = (0..n).map(|_| rng.random_range(0..=MAX_EVENTS)).collect();
    let mut procs: Vec<Vec<TraceEvent>> = vec![Vec::new(); n];
    let mut pending: Vec<(usize, usize)> = Vec::new(); // (msg, destination)
    let mut next_msg = 0;
    loop {
        let open: Vec<usize> = (0..n).filter(|&p| procs[p].len() < budget[p]).collect();
        let Some(&p) = open.choose(rng) else { break };
        let roll = rng.random_range(0..10);
        let inbox = pending.iter().position(|&(_, d)| d == p);
        let ev = if let (true, Some(i)) = (roll < 3, inbox) {
            let (msg, _) = pending.remove(i);
            TraceEvent::Recv { msg }
        } else if roll < 6 {
            let to = (p + rng.random_range(1..n)) % n;
            pending.push((next_msg, to));
            next_msg += 1;
            TraceEvent::Send { msg: next_msg - 1 }
        } else {
            let var = vars[p].choose(rng).expect("non-empty").clone();
            TraceEvent::Write { var, value: value(rng, family == TraceFamily::Dnf) }
        };
        procs[p].push(ev);
    }
    let spec = match family {
        TraceFamily::Conjunctive => {
            let k = rng.random_range(1..=n);
            let mut who: Vec<usize> = (0..n).collect();
            who.sort_by_key(|_| rng.random::<u32>());
            who.truncate(k);
            who.sort();
            let clause = who.iter().map(|&p| Term::new(format!("x{p}"), "1")).collect();
            PredicateSpec::new("conj", PredicateKind::Linear, vec![clause]).expect("valid")
        }
        TraceFamily::Dnf => {
            let term = |rng: &mut dyn rand::RngCore| {
                let p = rng.random_range(0..n);
                let var = if rng.random_bool(0.5) { "x" } else { "y" };
                let val = if rng.random_bool(0.8) { "1" } else { "0" };
                Term::new(format!("{var}{p}"), val)
            };
            let mut c0 = vec![term(rng), term(rng)];
            if c0[0].var == c0[1].var && c0[0].value == c0[1].value {
                c0.pop();
            }
            let c1 = vec![term(rng)];
            PredicateSpec::new("dnf", PredicateKind::Semilinear, vec![c0, c1]).expect("valid")
        }
    };
    (Trace { processes: procs }, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::PredicateMonitor;

    fn w(var: &str, v: &str) -> TraceEvent {
        TraceEvent::Write {
            var: var.into(),
            value: VersionedValue::single(Version::from_pairs([(0, 1)]), v.as_bytes().to_vec()),
        }
    }

    fn monitor_verdict(trace: &Trace, spec: &PredicateSpec) -> Verdict {
        let streams = trace_candidates(trace, spec, Epsilon::Infinite).unwrap();
        let mut pm = PredicateMonitor::new(spec.clone(), trace.processes.len().max(1), Epsilon::Infinite, 64).unwrap();
        let mut hit = false;
        for c in streams.into_iter().flatten() {
            hit |= !pm.on_candidate(c, 0, 0).is_empty();
        }
        if hit {
            Verdict::Violated
        } else {
            Verdict::Satisfied
        }
    }

    fn conj(vars: &[&str]) -> PredicateSpec {
        PredicateSpec::new("c", PredicateKind::Linear, vec![vars.iter().map(|v| Term::new(*v, "1")).collect()]).unwrap()
    }

    #[test]
    fn empty_trace_satisfied() {
        let t = Trace { processes: vec![vec![], vec![]] };
        assert_eq!(brute_force_detect(&t, &conj(&["x0"])).unwrap(), Verdict::Satisfied);
        assert_eq!(monitor_verdict(&t, &conj(&["x0"])), Verdict::Satisfied);
    }

    #[test]
    fn single_matching_state() {
        let t = Trace { processes: vec![vec![w("x0", "1")]] };
        assert_eq!(brute_force_detect(&t, &conj(&["x0"])).unwrap(), Verdict::Violated);
        assert_eq!(monitor_verdict(&t, &conj(&["x0"])), Verdict::Violated);
    }

    #[test]
    fn message_serialized_intervals() {
        // x0 is true, then reset before a message tells p1, which only then
        // sets x1.
        let t = Trace {
            processes: vec![
                vec![w("x0", "1"), w("x0", "0"), TraceEvent::Send { msg: 0 }],
                vec![TraceEvent::Recv { msg: 0 }, w("x1", "1")],
            ],
        };
        let spec = conj(&["x0", "x1"]);
        assert_eq!(brute_force_detect(&t, &spec).unwrap(), Verdict::Satisfied);
        assert_eq!(monitor_verdict(&t, &spec), Verdict::Satisfied);
        // Without the reset the intervals overlap.
        let t = Trace {
            processes: vec![
                vec![w("x0", "1"), TraceEvent::Send { msg: 0 }],
                vec![TraceEvent::Recv { msg: 0 }, w("x1", "1")],
            ],
        };
        assert_eq!(brute_force_detect(&t, &spec).unwrap(), Verdict::Violated);
        assert_eq!(monitor_verdict(&t, &spec), Verdict::Violated);
    }

    #[test]
    fn refuses_large_traces() {
        let t = Trace { processes: vec![vec![]; 5] };
        assert!(matches!(brute_force_detect(&t, &conj(&["x0"])), Err(DetectionError::TraceTooLarge(_))));
        let t = Trace { processes: vec![vec![w("x0", "1"); 7]] };
        assert!(brute_force_detect(&t, &conj(&["x0"])).is_err());
    }

    #[test]
    fn rejects_unmatched_receive() {
        let t = Trace { processes: vec![vec![TraceEvent::Recv { msg: 3 }]] };
        assert!(matches!(brute_force_detect(&t, &conj(&["x0"])), Err(DetectionError::BadTrace(_))));
    }

    #[test]
    fn random_cases_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for fam in [TraceFamily::Conjunctive, TraceFamily::Dnf] {
            for _ in 0..200 {
                let (t, spec) = random_case(&mut rng, fam);
                assert_eq!(brute_force_detect(&t, &spec).unwrap(), monitor_verdict(&t, &spec), "{t:?} {spec:?}");
            }
        }
    }
}
