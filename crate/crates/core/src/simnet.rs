//! Seeded discrete-event scheduler with region-aware message latency.
//!
//! Simulated time is in microseconds.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Time = u64;

pub const MS: Time = 1_000;
pub const SEC: Time = 1_000_000;

/// Converts fractional milliseconds to simulated time.
pub fn ms(x: f64) -> Time {
    (x * MS as f64).round() as Time
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no latency configured between regions {0} and {1}")]
    UnknownRegionPair(usize, usize),
    #[error("event scheduled at {at} but clock is already at {now}")]
    PastEvent { at: Time, now: Time },
    #[error("bad latency model: {0}")]
    BadModel(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub label: String,
}

/// A region pair that drops every message sent in `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub a: usize,
    pub b: usize,
    pub start: Time,
    pub end: Time,
}

impl Partition {
    fn cuts(&self, from: usize, to: usize, t: Time) -> bool {
        ((self.a == from && self.b == to) || (self.a == to && self.b == from)) && (self.start..self.end).contains(&t)
    }
}

/// One-way latency: `base + Gamma(shape, base * scale_fraction)`.
#[derive(Clone, Debug)]
pub struct LatencyModel {
    regions: Vec<Region>,
    base: Vec<Vec<Option<Time>>>,
    shape: f64,
    scale_fraction: f64,
    partitions: Vec<Partition>,
}

impl LatencyModel {
    /// Regions with a uniform intra-region latency and no cross-region links.
    pub fn new(labels: &[&str], intra: Time) -> Self {
        let n = labels.len();
        let mut base = vec![vec![None; n]; n];
        for (i, row) in base.iter_mut().enumerate() {
            row[i] = Some(intra);
        }
        Self {
            regions: labels.iter().enumerate().map(|(id, l)| Region { id, label: l.to_string() }).collect(),
            base,
            shape: 2.0,
            scale_fraction: 0.1,
            partitions: Vec::new(),
        }
    }

    /// Builds a model from a full one-way latency matrix.
    pub fn from_matrix(labels: &[String], matrix: Vec<Vec<Time>>) -> Result<Self, SimError> {
        if matrix.len() != labels.len() || matrix.iter().any(|r| r.len() != labels.len()) {
            return Err(SimError::BadModel(format!("matrix must be {0}x{0}", labels.len())));
        }
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let mut m = Self::new(&refs, 0);
        for (i, row) in matrix.into_iter().enumerate() {
            for (j, t) in row.into_iter().enumerate() {
                m.base[i][j] = Some(t);
            }
        }
        Ok(m)
    }

    /// Sets a symmetric one-way latency.
    pub fn link(mut self, a: usize, b: usize, one_way: Time) -> Self {
        self.base[a][b] = Some(one_way);
        self.base[b][a] = Some(one_way);
        self
    }

    /// Gamma jitter parameters. A zero shape or fraction disables jitter.
    pub fn jitter(mut self, shape: f64, scale_fraction: f64) -> Self {
        self.shape = shape;
        self.scale_fraction = scale_fraction;
        self
    }

    pub fn partition(mut self, p: Partition) -> Self {
        self.partitions.push(p);
        self
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn base(&self, from: usize, to: usize) -> Result<Time, SimError> {
        self.base.get(from).and_then(|r| r.get(to)).copied().flatten().ok_or(SimError::UnknownRegionPair(from, to))
    }

    pub fn rtt(&self, a: usize, b: usize) -> Result<Time, SimError> {
        Ok(self.base(a, b)? + self.base(b, a)?)
    }

    pub fn is_cut(&self, from: usize, to: usize, t: Time) -> bool {
        self.partitions.iter().any(|p| p.cuts(from, to, t))
    }

    /// Always at least 1 µs.
    pub fn sample_latency<R: Rng + ?Sized>(&self, from: usize, to: usize, rng: &mut R) -> Result<Time, SimError> {
        let base = self.base(from, to)?;
        let scale = base as f64 * self.scale_fraction;
        let jitter = if self.shape > 0.0 && scale > 0.0 {
            let g = Gamma::new(self.shape, scale).map_err(|e| SimError::BadModel(e.to_string()))?;
            g.sample(rng).round() as Time
        } else {
            0
        };
        Ok((base + jitter).max(1))
    }
}

struct Entry<M> {
    at: Time,
    seq: u64,
    msg: M,
}

impl<M> PartialEq for Entry<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<M> Eq for Entry<M> {}
impl<M> PartialOrd for Entry<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Entry<M> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// When `run_until` stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    At(Time),
    Quiescence,
}

pub struct EventQueue<M> {
    heap: BinaryHeap<Entry<M>>,
    now: Time,
    seq: u64,
    last_delivery: HashMap<(usize, usize), Time>,
}

impl<M> Default for EventQueue<M> {
    fn default() -> Self {
        Self::new()
    }
}

impl<M> EventQueue<M> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), now: 0, seq: 0, last_delivery: HashMap::new() }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: Time, msg: M) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        self.seq += 1;
        self.heap.push(Entry { at, seq: self.seq, msg });
        Ok(())
    }

    /// Schedules a message on the `from -> to` channel, never overtaking an
    /// earlier message on the same channel. Returns the delivery time.
    pub fn send(&mut self, from: usize, to: usize, latency: Time, msg: M) -> Result<Time, SimError> {
        let slot = self.last_delivery.entry((from, to)).or_insert(0);
        let at = (self.now + latency).max(*slot);
        *slot = at;
        self.schedule(at, msg)?;
        Ok(at)
    }

    pub fn pop(&mut self) -> Option<(Time, M)> {
        let e = self.heap.pop()?;
        debug_assert!(e.at >= self.now);
        self.now = e.at;
        Some((e.at, e.msg))
    }

    /// Pops the next event if it is due by `stop`; otherwise moves the clock
    /// to `stop`.
    pub fn pop_until(&mut self, stop: Time) -> Option<(Time, M)> {
        match self.next_time() {
            Some(t) if t <= stop => self.pop(),
            _ => {
                self.now = self.now.max(stop);
                None
            }
        }
    }

    fn next_time(&self) -> Option<Time> {
        self.heap.peek().map(|e| e.at)
    }

    /// Delivers events in order until the stop condition. Events at exactly
    /// the stop time are delivered.
    pub fn run_until<F>(&mut self, stop: Stop, mut handler: F) -> Result<u64, SimError>
    where
        F: FnMut(&mut Self, Time, M) -> Result<(), SimError>,
    {
        let mut count = 0;
        while let Some(t) = self.next_time() {
            if let Stop::At(limit) = stop {
                if t > limit {
                    self.now = limit;
                    return Ok(count);
                }
            }
            let (t, msg) = self.pop().expect("peeked");
            handler(self, t, msg)?;
            count += 1;
        }
        if let Stop::At(limit) = stop {
            self.now = self.now.max(limit);
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> LatencyModel {
        LatencyModel::new(&["a", "b"], 2 * MS).link(0, 1, 50 * MS).jitter(0.0, 0.0)
    }

    #[test]
    fn zero_jitter_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = model();
        assert_eq!(m.sample_latency(0, 0, &mut rng).unwrap(), 2 * MS);
        assert_eq!(m.sample_latency(0, 1, &mut rng).unwrap(), 50 * MS);
        assert_eq!(m.rtt(0, 1).unwrap(), 100 * MS);
    }

    #[test]
    fn unknown_pair_is_config_error() {
        let m = LatencyModel::new(&["a", "b"], MS);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.sample_latency(0, 1, &mut rng), Err(SimError::UnknownRegionPair(0, 1)));
        assert!(m.sample_latency(0, 7, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_above_base() {
        let m = LatencyModel::new(&["a"], 10 * MS);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| m.sample_latency(0, 0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        assert!(a.iter().all(|&x| x >= 10 * MS));
        assert!(a.iter().any(|&x| x > 10 * MS));
    }

    #[test]
    fn empty_queue_runs_zero_events() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert_eq!(q.run_until(Stop::Quiescence, |_, _, _| Ok(())).unwrap(), 0);
    }

    #[test]
    fn single_message() {
        let mut q = EventQueue::new();
        q.schedule(5, "m").unwrap();
        let n = q.run_until(Stop::Quiescence, |_, _, _| Ok(())).unwrap();
        assert_eq!((n, q.now()), (1, 5));
    }

    #[test]
    fn past_event_rejected() {
        let mut q = EventQueue::new();
        q.schedule(10, 0u32).unwrap();
        let err = q.run_until(Stop::Quiescence, |q, _, _| q.schedule(3, 1)).unwrap_err();
        assert_eq!(err, SimError::PastEvent { at: 3, now: 10 });
    }

    #[test]
    fn fifo_per_channel() {
        let mut q = EventQueue::new();
        q.send(0, 1, 100, "first").unwrap();
        let t = q.send(0, 1, 10, "second").unwrap();
        assert_eq!(t, 100);
        q.send(1, 0, 10, "other").unwrap();
        let mut seen = Vec::new();
        q.run_until(Stop::Quiescence, |_, _, m| {
            seen.push(m);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec!["other", "first", "second"]);
    }

    #[test]
    fn stop_at_time_leaves_later_events() {
        let mut q = EventQueue::new();
        for t in [1, 5, 9] {
            q.schedule(t, t).unwrap();
        }
        assert_eq!(q.run_until(Stop::At(5), |_, _, _| Ok(())).unwrap(), 2);
        assert_eq!(q.len(), 1);
        assert_eq!(q.now(), 5);
    }

    #[test]
    fn partition_window() {
        let m = model().partition(Partition { a: 0, b: 1, start: 10, end: 20 });
        assert!(m.is_cut(1, 0, 10));
        assert!(!m.is_cut(1, 0, 20));
        assert!(!m.is_cut(0, 0, 15));
    }
}
