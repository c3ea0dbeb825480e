//! Hybrid vector clocks.
//!
//! Every entry is a physical timestamp in simulated microseconds. Entry `j` of
//! the clock owned by process `i` is the latest physical time of `j` that `i`
//! knows about, floored at `pt - epsilon`. With an infinite epsilon the clock
//! degenerates to a vector clock over physical timestamps and comparisons are
//! exact happened-before tests.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated physical time in microseconds.
pub type Timestamp = u64;

/// Clock synchronization bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Epsilon {
    #[default]
    Infinite,
    Finite(Timestamp),
}

impl Epsilon {
    pub fn is_finite(self) -> bool {
        matches!(self, Epsilon::Finite(_))
    }

    /// `pt - epsilon`, or `None` when epsilon is infinite (the floor is -inf).
    pub fn floor(self, pt: Timestamp) -> Option<Timestamp> {
        match self {
            Epsilon::Infinite => None,
            Epsilon::Finite(e) => Some(pt.saturating_sub(e)),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HvcError {
    #[error("physical time went backwards at process {owner}: {pt} < {last}")]
    TimeRegression { owner: usize, pt: Timestamp, last: Timestamp },
    #[error("clock dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("owner {owner} out of range for dimension {n}")]
    BadOwner { owner: usize, n: usize },
    #[error("intervals belong to the same process {0}; use local order instead")]
    SameOwner(usize),
    #[error("interval endpoints disagree: {0}")]
    MalformedInterval(&'static str),
    #[error("compact encoding does not match dimension {0}")]
    BadEncoding(usize),
}

/// Outcome of comparing two clocks (or two intervals).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CausalRelation {
    Before,
    After,
    Concurrent,
}

impl CausalRelation {
    pub fn flip(self) -> Self {
        match self {
            CausalRelation::Before => CausalRelation::After,
            CausalRelation::After => CausalRelation::Before,
            CausalRelation::Concurrent => CausalRelation::Concurrent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HybridVectorClock {
    owner: usize,
    entries: Vec<Timestamp>,
    epsilon: Epsilon,
}

impl HybridVectorClock {
    /// A fresh clock at physical time zero.
    pub fn new(owner: usize, n: usize, epsilon: Epsilon) -> Result<Self, HvcError> {
        Self::from_entries(owner, vec![0; n], epsilon)
    }

    pub fn from_entries(owner: usize, entries: Vec<Timestamp>, epsilon: Epsilon) -> Result<Self, HvcError> {
        if owner >= entries.len() {
            return Err(HvcError::BadOwner { owner, n: entries.len() });
        }
        Ok(Self { owner, entries, epsilon })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn epsilon(&self) -> Epsilon {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Timestamp] {
        &self.entries
    }

    pub fn get(&self, k: usize) -> Timestamp {
        self.entries[k]
    }

    /// The owner's own physical time.
    pub fn own_time(&self) -> Timestamp {
        self.entries[self.owner]
    }

    fn check_pt(&self, pt: Timestamp) -> Result<(), HvcError> {
        let last = self.own_time();
        if pt < last {
            return Err(HvcError::TimeRegression { owner: self.owner, pt, last });
        }
        Ok(())
    }

    /// Clock to piggy-back on an outgoing message sent at physical time `pt`.
    pub fn advance_send(&self, pt: Timestamp) -> Result<Self, HvcError> {
        self.check_pt(pt)?;
        let floor = self.epsilon.floor(pt);
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(j, &e)| if j == self.owner { pt } else { floor.map_or(e, |f| e.max(f)) })
            .collect();
        Ok(Self { owner: self.owner, entries, epsilon: self.epsilon })
    }

    /// Clock after receiving a message stamped `msg` at physical time `pt`.
    ///
    /// Non-owner entries are taken from the message clock, floored at
    /// `pt - epsilon`; local entries are not consulted. The simulator uses
    /// [`merge_receive`](Self::merge_receive).
    pub fn on_receive(&self, msg: &HybridVectorClock, pt: Timestamp) -> Result<Self, HvcError> {
        if msg.len() != self.len() {
            return Err(HvcError::DimensionMismatch { left: self.len(), right: msg.len() });
        }
        self.check_pt(pt)?;
        let floor = self.epsilon.floor(pt);
        let entries = msg
            .entries
            .iter()
            .enumerate()
            .map(|(j, &m)| if j == self.owner { pt } else { floor.map_or(m, |f| m.max(f)) })
            .collect();
        Ok(Self { owner: self.owner, entries, epsilon: self.epsilon })
    }

    /// Like [`on_receive`](Self::on_receive) but keeps the componentwise
    /// maximum with the local clock, so knowledge gathered from earlier
    /// messages from other peers is never forgotten.
    pub fn merge_receive(&self, msg: &HybridVectorClock, pt: Timestamp) -> Result<Self, HvcError> {
        let mut next = self.on_receive(msg, pt)?;
        for (n, &old) in next.entries.iter_mut().zip(&self.entries) {
            *n = (*n).max(old);
        }
        next.entries[self.owner] = pt;
        Ok(next)
    }

    /// Componentwise comparison. Equal clocks are `Concurrent`.
    pub fn compare(&self, other: &HybridVectorClock) -> Result<CausalRelation, HvcError> {
        if self.len() != other.len() {
            return Err(HvcError::DimensionMismatch { left: self.len(), right: other.len() });
        }
        Ok(compare_entries(&self.entries, &other.entries))
    }

    /// Strictly smaller in the vector order.
    pub fn happened_before(&self, other: &HybridVectorClock) -> bool {
        self.len() == other.len() && compare_entries(&self.entries, &other.entries) == CausalRelation::Before
    }

    /// Bitmask plus explicit timestamps for entries that differ from the
    /// default `own_time - epsilon`.
    pub fn compact_encode(&self) -> CompactHvc {
        match self.epsilon.floor(self.own_time()) {
            None => CompactHvc { bits: vec![true; self.len()], explicit: self.entries.clone(), degenerate: true },
            Some(default) => {
                let bits: Vec<bool> = self.entries.iter().map(|&e| e != default).collect();
                let explicit = self.entries.iter().zip(&bits).filter(|(_, &b)| b).map(|(&e, _)| e).collect();
                CompactHvc { bits, explicit, degenerate: false }
            }
        }
    }

    pub fn compact_decode(
        code: &CompactHvc,
        owner: usize,
        owner_pt: Timestamp,
        epsilon: Epsilon,
    ) -> Result<Self, HvcError> {
        let n = code.bits.len();
        if code.explicit.len() != code.bits.iter().filter(|&&b| b).count() {
            return Err(HvcError::BadEncoding(n));
        }
        let default = epsilon.floor(owner_pt);
        let mut explicit = code.explicit.iter();
        let mut entries = Vec::with_capacity(n);
        for &bit in &code.bits {
            if bit {
                entries.push(*explicit.next().ok_or(HvcError::BadEncoding(n))?);
            } else {
                entries.push(default.ok_or(HvcError::BadEncoding(n))?);
            }
        }
        Self::from_entries(owner, entries, epsilon)
    }
}

impl fmt::Display for HybridVectorClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}[", self.owner)?;
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "]")
    }
}

/// Vector order on raw entries. Equal vectors are reported as `Concurrent`.
pub fn compare_entries(a: &[Timestamp], b: &[Timestamp]) -> CausalRelation {
    let mut less = false;
    let mut greater = false;
    for (x, y) in a.iter().zip(b) {
        match x.cmp(y) {
            Ordering::Less => less = true,
            Ordering::Greater => greater = true,
            Ordering::Equal => {}
        }
        if less && greater {
            return CausalRelation::Concurrent;
        }
    }
    match (less, greater) {
        (true, false) => CausalRelation::Before,
        (false, true) => CausalRelation::After,
        _ => CausalRelation::Concurrent,
    }
}

/// Compressed clock: one bit per entry plus the entries whose bit is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactHvc {
    pub bits: Vec<bool>,
    pub explicit: Vec<Timestamp>,
    /// Set when epsilon is infinite and every entry had to be listed.
    pub degenerate: bool,
}

impl CompactHvc {
    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// The closed span of a server's local state, from the event that created it
/// to the event that replaced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HvcInterval {
    start: HybridVectorClock,
    end: HybridVectorClock,
}

impl HvcInterval {
    pub fn new(start: HybridVectorClock, end: HybridVectorClock) -> Result<Self, HvcError> {
        if start.owner != end.owner {
            return Err(HvcError::MalformedInterval("start and end owned by different processes"));
        }
        if start.len() != end.len() {
            return Err(HvcError::DimensionMismatch { left: start.len(), right: end.len() });
        }
        if start.entries.iter().zip(&end.entries).any(|(s, e)| s > e) {
            return Err(HvcError::MalformedInterval("start exceeds end"));
        }
        Ok(Self { start, end })
    }

    pub fn owner(&self) -> usize {
        self.start.owner
    }

    pub fn start(&self) -> &HybridVectorClock {
        &self.start
    }

    pub fn end(&self) -> &HybridVectorClock {
        &self.end
    }

    /// Relation of `self` to `other` (`Before` means every event of `self`
    /// precedes every event of `other`). Uncertain and boundary cases are
    /// reported as `Concurrent` so that no possible overlap is ruled out.
    pub fn relation(&self, other: &HvcInterval) -> Result<CausalRelation, HvcError> {
        interval_relation(self, other)
    }
}

pub fn interval_relation(i1: &HvcInterval, i2: &HvcInterval) -> Result<CausalRelation, HvcError> {
    if i1.owner() == i2.owner() {
        return Err(HvcError::SameOwner(i1.owner()));
    }
    if i1.start.len() != i2.start.len() {
        return Err(HvcError::DimensionMismatch { left: i1.start.len(), right: i2.start.len() });
    }
    // Orient so that the first interval does not start after the second.
    if i1.start.compare(&i2.start)? == CausalRelation::After {
        return Ok(ordered_relation(i2, i1).flip());
    }
    Ok(ordered_relation(i1, i2))
}

fn ordered_relation(first: &HvcInterval, second: &HvcInterval) -> CausalRelation {
    if second.start.happened_before(&first.end) {
        return CausalRelation::Concurrent;
    }
    if first.end.happened_before(&second.start) {
        // end[S1] <= start[S2] - eps; vacuous when eps is infinite.
        let certain = match first.end.epsilon {
            Epsilon::Infinite => true,
            Epsilon::Finite(eps) => {
                second.start.own_time() >= eps && first.end.own_time() <= second.start.own_time() - eps
            }
        };
        return if certain { CausalRelation::Before } else { CausalRelation::Concurrent };
    }
    CausalRelation::Concurrent
}
