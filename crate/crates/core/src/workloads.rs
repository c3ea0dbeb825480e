//! The applications driven against the store.

pub mod graph;
pub mod peterson;

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::kvstore::client::Client;
use crate::kvstore::{ClientId, KvError};
use crate::predicates::{PredicateKind, PredicateSpec, Term};
use crate::simnet::Time;
use graph::WorkGraph;

/// Smallest non-negative color not in `neighbors`.
pub fn coloring_color_choice(neighbors: &[u64]) -> u64 {
    (0..).find(|c| !neighbors.contains(c)).expect("some color is free")
}

/// Integer mean of the node's own value and its neighbours'.
pub fn weather_value(own: u64, neighbors: &[u64]) -> u64 {
    (own + neighbors.iter().sum::<u64>()) / (neighbors.len() as u64 + 1)
}

/// True when every edge's endpoints have different colors.
pub fn is_proper_coloring(g: &WorkGraph, color: impl Fn(u32) -> Option<u64>) -> bool {
    g.edges().iter().all(|e| match (color(e.a), color(e.b)) {
        (Some(x), Some(y)) => x != y,
        _ => false,
    })
}

pub fn conjunctive_var(client: ClientId) -> String {
    format!("local{client}")
}

/// Violated when every client's local variable is true at once.
pub fn conjunctive_spec(clients: usize) -> PredicateSpec {
    let clause = (0..clients as ClientId).map(|c| Term::new(conjunctive_var(c), "true")).collect();
    PredicateSpec::new("conjunctive", PredicateKind::Linear, vec![clause]).expect("non-empty clause")
}

/// Client-side truth of the conjunction, and every moment it became true.
#[derive(Debug)]
pub struct ConjTracker {
    values: Vec<bool>,
    pub onsets: Vec<Time>,
    /// Times at which the conjunction stopped holding, one per finished onset.
    pub ends: Vec<Time>,
}

pub type SharedConj = Rc<RefCell<ConjTracker>>;

impl ConjTracker {
    pub fn shared(clients: usize) -> SharedConj {
        Rc::new(RefCell::new(Self { values: vec![false; clients], onsets: Vec::new(), ends: Vec::new() }))
    }

    pub fn set(&mut self, client: ClientId, value: bool, now: Time) {
        let before = self.values.iter().all(|&v| v);
        self.values[client as usize] = value;
        let after = self.values.iter().all(|&v| v);
        if !before && after {
            self.onsets.push(now);
        } else if before && !after {
            self.ends.push(now);
        }
    }
}

/// Sets the client's local variable true with probability `beta`.
pub async fn conjunctive_step(
    client: &Client,
    beta: f64,
    rng: &mut impl Rng,
    tracker: Option<&SharedConj>,
) -> Result<bool, KvError> {
    let value = rng.random_bool(beta);
    let text: &[u8] = if value { b"true" } else { b"false" };
    client.put(&conjunctive_var(client.id()), text.to_vec()).await?;
    if let Some(t) = tracker {
        t.borrow_mut().set(client.id(), value, client.now());
    }
    Ok(value)
}

/// One GET or PUT on a key drawn from `keys`. Returns true for a PUT.
pub async fn mixed_op(client: &Client, put_ratio: f64, keys: usize, rng: &mut impl Rng) -> Result<bool, KvError> {
    let key = format!("k{}", rng.random_range(0..keys.max(1)));
    if rng.random_bool(put_ratio) {
        let v = rng.random::<u32>().to_string().into_bytes();
        client.put(&key, v).await.map(|_| true)
    } else {
        client.get(&key).await.map(|_| false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, ClusterConfig};
    use crate::kvstore::QuorumConfig;
    use crate::rollback::{make_tasks, ClientRuntime, GraphApp, LivelockStrategy, RuntimeConfig};
    use crate::simnet::{LatencyModel, MS, SEC};
    use graph::{gen_graph, GraphKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn color_choice() {
        assert_eq!(coloring_color_choice(&[]), 0);
        assert_eq!(coloring_color_choice(&[0, 1, 2]), 3);
        assert_eq!(coloring_color_choice(&[0, 2]), 1);
        assert_eq!(coloring_color_choice(&[2, 2, 5]), 0);
    }

    #[test]
    fn weather_mean() {
        assert_eq!(weather_value(40, &[]), 40);
        assert_eq!(weather_value(10, &[20, 31]), 20);
    }

    #[test]
    fn conj_tracker_counts_onsets() {
        let mut t = ConjTracker { values: vec![false; 2], onsets: vec![], ends: vec![] };
        t.set(0, true, 1);
        t.set(1, true, 2);
        t.set(1, true, 3);
        t.set(0, false, 4);
        t.set(0, true, 5);
        assert_eq!(t.onsets, vec![2, 5]);
        assert_eq!(t.ends, vec![4]);
    }

    fn local_cluster(clients: usize) -> Cluster {
        let lat = LatencyModel::new(&["a"], MS).jitter(0.0, 0.0);
        let cfg = ClusterConfig::new(lat, vec![0; 3], vec![0; clients], QuorumConfig::parse("N3R1W1").unwrap());
        Cluster::new(cfg).unwrap()
    }

    #[test]
    fn weather_put_fraction_matches_ratio() {
        let mut cl = local_cluster(1);
        let g = Rc::new(gen_graph(GraphKind::Line, 10, 0).unwrap().split(1).unwrap());
        let cfg = RuntimeConfig { compute_per_node: 0, ..RuntimeConfig::default() };
        let rt = Rc::new(RefCell::new(ClientRuntime::new(
            cl.client(0),
            make_tasks(&g.owned(0), 10),
            LivelockStrategy::None,
            cfg,
            7,
        )));
        let (r, gg) = (rt.clone(), g.clone());
        #[allow(clippy::await_holding_refcell_ref)]
        cl.spawn(0, async move {
            let mut rt = r.borrow_mut();
            rt.run(&gg, GraphApp::Weather { put_ratio: 0.5 }, None, true, 150 * SEC).await;
        })
        .unwrap();
        cl.run_until_done(200 * SEC).unwrap();
        let rt = rt.borrow();
        let steps: usize = rt.stats.progress.iter().map(|&(_, n)| n).sum();
        assert!(steps >= 10_000, "{steps} steps");
        let frac = rt.stats.value_puts as f64 / steps as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn conjunctive_beta_zero_never_violates() {
        let mut cl = local_cluster(2);
        let tracker = ConjTracker::shared(2);
        for id in 0..2 {
            let c = cl.client(id);
            let t = tracker.clone();
            let mut r = ChaCha8Rng::seed_from_u64(id as u64);
            cl.spawn(id, async move {
                for _ in 0..20 {
                    assert!(!conjunctive_step(&c, 0.0, &mut r, Some(&t)).await.unwrap());
                }
            })
            .unwrap();
        }
        cl.run_until_done(60 * SEC).unwrap();
        assert!(tracker.borrow().onsets.is_empty());
    }

    #[test]
    fn mixed_ops_follow_ratio() {
        let mut cl = local_cluster(1);
        let c = cl.client(0);
        let puts = Rc::new(RefCell::new(0));
        let p = puts.clone();
        cl.spawn(0, async move {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..2000 {
                if mixed_op(&c, 0.25, 50, &mut rng).await.unwrap() {
                    *p.borrow_mut() += 1;
                }
            }
        })
        .unwrap();
        cl.run_until_done(100 * SEC).unwrap();
        let frac = *puts.borrow() as f64 / 2000.0;
        assert!((frac - 0.25).abs() < 0.03, "{frac}");
        assert_eq!(cl.client(0).ctx().completed_ops.len(), 2000);
    }
}
