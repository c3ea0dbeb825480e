//! Peterson's two-party lock over store variables, one lock per
//! cross-client edge.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::client::Client;
use crate::kvstore::{ClientId, KvError, VersionedValue};
use crate::predicates::Edge;
use crate::simnet::{Time, MS};

pub const TRUE: &[u8] = b"true";
pub const FALSE: &[u8] = b"false";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LockError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("gave up on lock {0:?} after {1} polls")]
    Starved(Edge, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpinConfig {
    /// Pause between polls; one round trip to the slowest replica is a
    /// reasonable choice.
    pub poll_interval: Time,
    pub max_polls: u32,
}

impl Default for SpinConfig {
    fn default() -> Self {
        Self { poll_interval: 100 * MS, max_polls: 50 }
    }
}

/// Records who is inside which edge's critical section, and every moment
/// both endpoints were inside together.
#[derive(Debug, Default)]
pub struct CsTracker {
    inside: BTreeMap<Edge, BTreeSet<ClientId>>,
    pub co_occupancy: Vec<(Time, Edge)>,
}

pub type SharedTracker = Rc<RefCell<CsTracker>>;

impl CsTracker {
    pub fn shared() -> SharedTracker {
        Rc::new(RefCell::new(Self::default()))
    }

    pub fn enter(&mut self, edge: Edge, client: ClientId, now: Time) {
        let set = self.inside.entry(edge).or_default();
        set.insert(client);
        if set.len() > 1 {
            self.co_occupancy.push((now, edge));
        }
    }

    pub fn leave(&mut self, edge: Edge, client: ClientId) {
        if let Some(set) = self.inside.get_mut(&edge) {
            set.remove(&client);
        }
    }
}

fn all_false(vv: &VersionedValue) -> bool {
    vv.values().all(|v| v.as_slice() != TRUE)
}

fn some_other(vv: &VersionedValue, me: &[u8]) -> bool {
    vv.values().any(|v| v.as_slice() != me)
}

/// Lock side held by `me`, an endpoint of `edge` owned by this client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockRef {
    pub edge: Edge,
    pub me: u32,
}

/// Raises this side's flag, yields the turn, then polls until the peer's
/// flag is down in every returned version or some version of the turn
/// names the peer. The flag stays raised on error.
pub async fn acquire(client: &Client, lock: LockRef, spin: SpinConfig) -> Result<u32, LockError> {
    let LockRef { edge, me } = lock;
    let me_s = me.to_string();
    client.put(&edge.flag_var(me), TRUE.to_vec()).await?;
    client.put(&edge.turn_var(), me_s.clone().into_bytes()).await?;
    let peer_flag = edge.flag_var(edge.other(me));
    for poll in 1..=spin.max_polls {
        let flag = client.get(&peer_flag).await?;
        if all_false(&flag) {
            return Ok(poll);
        }
        let turn = client.get(&edge.turn_var()).await?;
        if some_other(&turn, me_s.as_bytes()) {
            return Ok(poll);
        }
        client.sleep(spin.poll_interval).await;
    }
    Err(LockError::Starved(edge, spin.max_polls))
}

pub async fn release(client: &Client, lock: LockRef) -> Result<(), KvError> {
    client.put(&lock.edge.flag_var(lock.me), FALSE.to_vec()).await
}

/// Takes `locks` in order. On failure every flag raised so far, including
/// the failing one, is lowered again before the error is returned.
pub async fn acquire_all(
    client: &Client,
    locks: &[LockRef],
    spin: SpinConfig,
    tracker: Option<&SharedTracker>,
) -> Result<(), LockError> {
    for (i, &l) in locks.iter().enumerate() {
        if let Err(e) = acquire(client, l, spin).await {
            release_all(client, &locks[..=i], tracker).await;
            return Err(e);
        }
        if let Some(t) = tracker {
            t.borrow_mut().enter(l.edge, client.id(), client.now());
        }
    }
    Ok(())
}

/// Lowers every flag. Failed releases are retried once; a flag left up
/// only delays the peer until its own spin bound.
pub async fn release_all(client: &Client, locks: &[LockRef], tracker: Option<&SharedTracker>) {
    for &l in locks.iter().rev() {
        if let Some(t) = tracker {
            t.borrow_mut().leave(l.edge, client.id());
        }
        if release(client, l).await.is_err() {
            let _ = release(client, l).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, ClusterConfig};
    use crate::kvstore::QuorumConfig;
    use crate::simnet::{LatencyModel, SEC};

    fn cluster(q: &str, regions: [usize; 2], monitors: bool) -> Cluster {
        let lat = LatencyModel::new(&["a", "b", "c"], MS)
            .link(0, 1, 40 * MS)
            .link(0, 2, 50 * MS)
            .link(1, 2, 80 * MS)
            .jitter(0.0, 0.0);
        let mut cfg = ClusterConfig::new(lat, vec![0, 1, 2], regions.to_vec(), QuorumConfig::parse(q).unwrap());
        cfg.monitors = monitors;
        Cluster::new(cfg).unwrap()
    }

    fn contend(cl: &mut Cluster, rounds: u32) -> SharedTracker {
        let tracker = CsTracker::shared();
        let edge = Edge::new(1, 2);
        for (id, me) in [(0, 1), (1, 2)] {
            let c = cl.client(id);
            let t = tracker.clone();
            cl.spawn(id, async move {
                let lock = [LockRef { edge, me }];
                for _ in 0..rounds {
                    if acquire_all(&c, &lock, SpinConfig::default(), Some(&t)).await.is_ok() {
                        c.sleep(30 * MS).await;
                        release_all(&c, &lock, Some(&t)).await;
                    }
                }
            })
            .unwrap();
        }
        tracker
    }

    #[test]
    fn uncontended_acquire_takes_one_poll() {
        let mut cl = cluster("N3R1W3", [0, 1], false);
        let c = cl.client(0);
        let polls = Rc::new(RefCell::new(0));
        let p = polls.clone();
        cl.spawn(0, async move {
            *p.borrow_mut() =
                acquire(&c, LockRef { edge: Edge::new(3, 4), me: 3 }, SpinConfig::default()).await.unwrap();
        })
        .unwrap();
        cl.run_until_done(10 * SEC).unwrap();
        assert_eq!(*polls.borrow(), 1);
    }

    #[test]
    fn sequential_contention_is_exclusive() {
        let mut cl = cluster("N3R1W3", [0, 2], true);
        let tracker = contend(&mut cl, 5);
        cl.run_until_done(200 * SEC).unwrap();
        assert!(cl.all_finished());
        assert!(tracker.borrow().co_occupancy.is_empty());
        assert!(cl.reports().is_empty(), "{:?}", cl.reports().first());
    }

    #[test]
    fn eventual_contention_is_flagged() {
        let mut cl = cluster("N3R1W1", [0, 2], true);
        let tracker = contend(&mut cl, 1);
        cl.run_until_done(20 * SEC).unwrap();
        cl.run_for(cl.now() + 2 * SEC).unwrap();
        assert!(!tracker.borrow().co_occupancy.is_empty());
        let r = &cl.reports()[0];
        assert_eq!(r.predicate, Edge::new(1, 2).predicate_name());
        assert!(r.is_sound(&Edge::new(1, 2).mutex_spec()));
    }
}
