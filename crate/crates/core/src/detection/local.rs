//! Server-side detector: turns relevant PUTs into candidates.

use std::collections::HashMap;

use crate::hvc::{HvcInterval, HybridVectorClock};
use crate::kvstore::{PutHook, ServerState};
use crate::predicates::{infer_from_variable, PredicateKind, PredicateSpec};

use super::{any_term_holds, Candidate, PartialState};

#[derive(Clone, Debug)]
pub struct LocalDetector {
    initial: HybridVectorClock,
    specs: Vec<PredicateSpec>,
    infer_locks: bool,
    eager: bool,
    seq: HashMap<String, u64>,
    outbox: Vec<Candidate>,
    /// Lock variables whose names broke the naming convention.
    pub malformed: u64,
}

impl LocalDetector {
    /// `initial` is the server's clock before its first event.
    pub fn new(initial: HybridVectorClock, specs: Vec<PredicateSpec>, infer_locks: bool) -> Self {
        Self { initial, specs, infer_locks, eager: false, seq: HashMap::new(), outbox: Vec::new(), malformed: 0 }
    }

    /// Also report each new local state as a point interval as soon as
    /// the write that opens it is applied, instead of only when it ends.
    pub fn eager(mut self, on: bool) -> Self {
        self.eager = on;
        self
    }

    pub fn take_candidates(&mut self) -> Vec<Candidate> {
        std::mem::take(&mut self.outbox)
    }

    fn relevant(&mut self, key: &str) -> Vec<PredicateSpec> {
        let mut out: Vec<PredicateSpec> = self.specs.iter().filter(|s| s.mentions(key)).cloned().collect();
        if self.infer_locks {
            match infer_from_variable(key) {
                Ok(Some(spec)) => out.push(spec),
                Ok(None) => {}
                Err(_) => self.malformed += 1,
            }
        }
        out
    }

    /// Candidates for the local state that the write to `key` ends. The
    /// state started at the latest earlier write to any of the predicate's
    /// variables.
    pub fn on_put(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock) {
        self.emit(server, key, hvc_now, false);
    }

    /// Point candidate for the state the write to `key` just opened.
    pub fn on_applied(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock) {
        if self.eager {
            self.emit(server, key, hvc_now, true);
        }
    }

    fn emit(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock, point: bool) {
        for spec in self.relevant(key) {
            let mut state = PartialState::new();
            let mut start = &self.initial;
            for var in spec.variables() {
                if let Some(vv) = server.get(var) {
                    state.insert(var.to_string(), vv.clone());
                }
                if let Some(c) = server.last_write_clock(var) {
                    if c.own_time() > start.own_time() {
                        start = c;
                    }
                }
            }
            if point {
                start = hvc_now;
            }
            if spec.kind == PredicateKind::Linear && !any_term_holds(&state, &spec) {
                continue;
            }
            let Ok(interval) = HvcInterval::new(start.clone(), hvc_now.clone()) else { continue };
            let seq = self.seq.entry(spec.name.clone()).or_insert(0);
            *seq += 1;
            self.outbox.push(Candidate { predicate: spec.name.clone(), server: server.id, seq: *seq, interval, state });
        }
    }
}

impl PutHook for LocalDetector {
    fn before_put(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock) {
        self.on_put(server, key, hvc_now);
    }

    fn after_put(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock) {
        self.on_applied(server, key, hvc_now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvc::Epsilon;
    use crate::kvstore::Version;
    use crate::predicates::{Edge, Term};

    fn clock(t: u64) -> HybridVectorClock {
        HybridVectorClock::from_entries(0, vec![t, 0], Epsilon::Infinite).unwrap()
    }

    fn put(s: &mut ServerState, d: &mut LocalDetector, key: &str, n: u64, val: &str, t: u64) -> Vec<Candidate> {
        s.server_put(key, Version::from_pairs([(0, n)]), val.as_bytes().to_vec(), &clock(t), false, d);
        d.take_candidates()
    }

    fn linear() -> PredicateSpec {
        PredicateSpec::new("lp", PredicateKind::Linear, vec![vec![Term::new("x", "1")]]).unwrap()
    }

    #[test]
    fn linear_emits_only_for_true_intervals() {
        let mut s = ServerState::new(0, 0);
        let mut d = LocalDetector::new(clock(0), vec![linear()], false);
        assert!(put(&mut s, &mut d, "x", 1, "0", 1).is_empty());
        assert!(put(&mut s, &mut d, "x", 2, "1", 2).is_empty(), "x was 0 before this write");
        let c = put(&mut s, &mut d, "x", 3, "1", 3);
        assert_eq!(c.len(), 1, "emitted whatever the new value is");
        assert_eq!((c[0].start_time(), c[0].end_time()), (2, 3));
        assert_eq!(put(&mut s, &mut d, "x", 4, "0", 4).len(), 1);
        assert!(put(&mut s, &mut d, "unrelated", 1, "1", 5).is_empty());
    }

    #[test]
    fn semilinear_always_emits_for_lock_writes() {
        let mut s = ServerState::new(0, 0);
        let mut d = LocalDetector::new(clock(0), vec![], true);
        let e = Edge::new(1, 2);
        let c = put(&mut s, &mut d, &e.flag_var(1), 1, "true", 1);
        assert_eq!(c.len(), 1);
        assert!(c[0].state.is_empty());
        assert_eq!(c[0].start_time(), 0);
        let c = put(&mut s, &mut d, &e.turn_var(), 1, "1", 2);
        assert_eq!(c[0].state.len(), 1);
        assert_eq!((c[0].seq, c[0].start_time()), (2, 1));
        assert!(put(&mut s, &mut d, "color1", 1, "0", 3).is_empty());
        put(&mut s, &mut d, "flag2_1_2", 1, "true", 4);
        assert_eq!(d.malformed, 1);
    }

    #[test]
    fn eager_adds_point_for_the_new_state() {
        let mut s = ServerState::new(0, 0);
        let mut d = LocalDetector::new(clock(0), vec![linear()], false).eager(true);
        let c = put(&mut s, &mut d, "x", 1, "1", 5);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].start_time(), c[0].end_time()), (5, 5));
        let c = put(&mut s, &mut d, "x", 2, "0", 9);
        assert_eq!(c.len(), 1, "closing candidate only, the new state is false");
        assert_eq!((c[0].start_time(), c[0].end_time()), (5, 9));
    }
}
