//! Replicated key-value store: versions, multi-version values, quorum
//! configuration and the server-side write path.
//!
//! The client-side replication protocol (GET, GET_VERSION and PUT fan-out with
//! a second round) lives in [`client`]; it runs inside the simulated cluster.

pub mod client;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hvc::HybridVectorClock;

pub type ClientId = u32;
pub type ServerId = usize;
pub type Key = String;
pub type Value = Vec<u8>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("invalid quorum configuration: {0}")]
    InvalidQuorum(String),
    #[error("GET failed: {got} of {needed} responses after two rounds")]
    GetFailed { got: usize, needed: usize },
    #[error("PUT failed: {got} of {needed} acks after two rounds")]
    PutFailed { got: usize, needed: usize },
}

/// Vector clock over client ids. Missing slots are zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Version(BTreeMap<ClientId, u64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VersionOrder {
    Equal,
    Before,
    After,
    Concurrent,
}

impl Version {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ClientId, u64)>) -> Self {
        Self(pairs.into_iter().filter(|&(_, c)| c > 0).collect())
    }

    pub fn get(&self, client: ClientId) -> u64 {
        self.0.get(&client).copied().unwrap_or(0)
    }

    /// Bumps only the issuing client's slot.
    pub fn incremented(&self, client: ClientId) -> Self {
        let mut next = self.clone();
        *next.0.entry(client).or_insert(0) += 1;
        next
    }

    /// Least upper bound.
    pub fn merge(&self, other: &Version) -> Self {
        let mut out = self.clone();
        for (&c, &n) in &other.0 {
            let slot = out.0.entry(c).or_insert(0);
            *slot = (*slot).max(n);
        }
        out
    }

    pub fn order(&self, other: &Version) -> VersionOrder {
        let mut less = false;
        let mut greater = false;
        for (&c, &n) in &self.0 {
            let m = other.get(c);
            if n < m {
                less = true;
            } else if n > m {
                greater = true;
            }
        }
        for (&c, &m) in &other.0 {
            if !self.0.contains_key(&c) && m > 0 {
                less = true;
            }
        }
        match (less, greater) {
            (false, false) => VersionOrder::Equal,
            (true, false) => VersionOrder::Before,
            (false, true) => VersionOrder::After,
            (true, true) => VersionOrder::Concurrent,
        }
    }

    /// Total order used only for deterministic iteration: (sum, entries).
    pub fn total_key(&self) -> (u64, Vec<(ClientId, u64)>) {
        (self.0.values().sum(), self.0.iter().map(|(&c, &n)| (c, n)).collect())
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (c, n)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "c{c}:{n}")?;
        }
        write!(f, "}}")
    }
}

/// The set of mutually concurrent versions stored for one key.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedValue {
    entries: Vec<(Version, Value)>,
}

/// What happened to an incoming write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    /// Stored; `replaced` older versions were dropped.
    Applied { replaced: usize },
    /// Dominated by (or equal to) a stored version and ignored.
    Stale,
}

impl VersionedValue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(version: Version, value: Value) -> Self {
        Self { entries: vec![(version, value)] }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Version, Value)> {
        self.entries.iter()
    }

    pub fn versions(&self) -> impl Iterator<Item = &Version> {
        self.entries.iter().map(|(v, _)| v)
    }

    pub fn values(&self) -> impl Iterator<Item = &Value> {
        self.entries.iter().map(|(_, v)| v)
    }

    /// Least upper bound of every stored version.
    pub fn merged_version(&self) -> Version {
        self.versions().fold(Version::new(), |acc, v| acc.merge(v))
    }

    /// True when `version` strictly dominates every stored version.
    pub fn dominated_by(&self, version: &Version) -> bool {
        self.versions().all(|v| v.order(version) == VersionOrder::Before)
    }

    /// Inserts a version, dropping every stored version it dominates and
    /// keeping concurrent ones. Writes that are not newer than some stored
    /// version are ignored.
    pub fn merge_in(&mut self, version: Version, value: Value) -> Merge {
        if self.versions().any(|v| matches!(v.order(&version), VersionOrder::After | VersionOrder::Equal)) {
            return Merge::Stale;
        }
        let before = self.entries.len();
        self.entries.retain(|(v, _)| v.order(&version) != VersionOrder::Before);
        let replaced = before - self.entries.len();
        self.entries.push((version, value));
        self.entries.sort_by_key(|(v, _)| v.total_key());
        Merge::Applied { replaced }
    }

    /// Folds another replica's response into this set.
    pub fn absorb(&mut self, other: &VersionedValue) {
        for (v, val) in &other.entries {
            self.merge_in(v.clone(), val.clone());
        }
    }

    /// No stored version dominates another.
    pub fn is_antichain(&self) -> bool {
        self.entries
            .iter()
            .enumerate()
            .all(|(i, (a, _))| self.entries.iter().skip(i + 1).all(|(b, _)| a.order(b) == VersionOrder::Concurrent))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Consistency {
    Sequential,
    Eventual,
}

/// How long the first round of a request waits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoundWait {
    /// Return as soon as the required number of replies arrived.
    #[default]
    Quorum,
    /// Wait for every replica (or the timeout) before counting replies.
    AllOrTimeout,
}

/// Client meta-data: replication factor, required reads and writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumConfig {
    pub n: usize,
    pub r: usize,
    pub w: usize,
    /// Per-round timeout in microseconds.
    pub timeout: u64,
    #[serde(default)]
    pub wait: RoundWait,
}

/// 500 ms.
pub const DEFAULT_TIMEOUT_US: u64 = 500_000;

impl QuorumConfig {
    pub fn new(n: usize, r: usize, w: usize) -> Result<Self, KvError> {
        let cfg = Self { n, r, w, timeout: DEFAULT_TIMEOUT_US, wait: RoundWait::Quorum };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), KvError> {
        if self.n == 0 || !(1..=self.n).contains(&self.r) || !(1..=self.n).contains(&self.w) {
            return Err(KvError::InvalidQuorum(format!("need 1 <= R,W <= N, got {}", self.label())));
        }
        Ok(())
    }

    /// Parses labels such as `N3R1W3`.
    pub fn parse(label: &str) -> Result<Self, KvError> {
        let bad = || KvError::InvalidQuorum(format!("cannot parse {label:?}"));
        let s = label.trim().to_ascii_uppercase();
        let s = s.strip_prefix('N').ok_or_else(bad)?;
        let (n, rest) = s.split_once('R').ok_or_else(bad)?;
        let (r, w) = rest.split_once('W').ok_or_else(bad)?;
        Self::new(n.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)
    }

    pub fn label(&self) -> String {
        format!("N{}R{}W{}", self.n, self.r, self.w)
    }

    pub fn consistency(&self) -> Consistency {
        classify_consistency(self)
    }
}

/// Sequential iff `W + R > N` and `W > N/2`.
pub fn classify_consistency(cfg: &QuorumConfig) -> Consistency {
    if cfg.w + cfg.r > cfg.n && 2 * cfg.w > cfg.n {
        Consistency::Sequential
    } else {
        Consistency::Eventual
    }
}

/// Result of a server-side write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PutOutcome {
    Applied,
    Stale,
    /// Conditional write whose version did not dominate the stored set.
    Obsolete,
}

/// Observer invoked on every accepted write, before the table changes.
pub trait PutHook {
    fn before_put(&mut self, server: &ServerState, key: &str, hvc_now: &HybridVectorClock);

    /// Called once the write has been applied.
    fn after_put(&mut self, _server: &ServerState, _key: &str, _hvc_now: &HybridVectorClock) {}
}

/// No-op hook for servers without detectors.
pub struct NoHook;

impl PutHook for NoHook {
    fn before_put(&mut self, _: &ServerState, _: &str, _: &HybridVectorClock) {}
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub id: ServerId,
    pub region: usize,
    table: HashMap<Key, VersionedValue>,
    /// Clock of the last applied write per key.
    last_write: HashMap<Key, HybridVectorClock>,
}

impl ServerState {
    pub fn new(id: ServerId, region: usize) -> Self {
        Self { id, region, table: HashMap::new(), last_write: HashMap::new() }
    }

    pub fn get(&self, key: &str) -> Option<&VersionedValue> {
        self.table.get(key)
    }

    /// Versions of `key`, empty when never written.
    pub fn read(&self, key: &str) -> VersionedValue {
        self.table.get(key).cloned().unwrap_or_default()
    }

    pub fn last_write_clock(&self, key: &str) -> Option<&HybridVectorClock> {
        self.last_write.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Key> {
        self.table.keys()
    }

    /// Applies a replicated write. `conditional` writes must dominate every
    /// stored version. The hook sees the table as it was before the write.
    pub fn server_put(
        &mut self,
        key: &str,
        version: Version,
        value: Value,
        hvc_now: &HybridVectorClock,
        conditional: bool,
        hook: &mut dyn PutHook,
    ) -> PutOutcome {
        let current = self.table.get(key);
        if let Some(cur) = current {
            if cur.versions().any(|v| matches!(v.order(&version), VersionOrder::After | VersionOrder::Equal)) {
                return PutOutcome::Stale;
            }
            if conditional && !cur.dominated_by(&version) {
                return PutOutcome::Obsolete;
            }
        }
        hook.before_put(self, key, hvc_now);
        let slot = self.table.entry(key.to_string()).or_default();
        let merged = slot.merge_in(version, value);
        debug_assert!(matches!(merged, Merge::Applied { .. }));
        self.last_write.insert(key.to_string(), hvc_now.clone());
        hook.after_put(self, key, hvc_now);
        PutOutcome::Applied
    }
}
