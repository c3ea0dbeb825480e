//! Work graphs and their split across clients.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::ClientId;
use crate::predicates::Edge;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least one node")]
    Empty,
    #[error("no {d}-regular graph on {n} nodes")]
    NoRegular { n: usize, d: usize },
    #[error("power-law graph needs more than {m} nodes")]
    TooSmall { m: usize },
    #[error("need at least one client")]
    NoClients,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    /// Holme-Kim growth: `m` edges per new node, triad closure with probability `p`.
    PowerLawCluster {
        m: usize,
        p: f64,
    },
    Regular {
        d: usize,
    },
    Line,
    /// Row-major grid `width` nodes wide; the last row may be partial.
    Grid {
        width: usize,
    },
    /// Loaded from an edge list.
    Custom,
}

impl GraphKind {
    /// Parses `power_law`, `regular:<d>`, `line`, `grid:<width>`.
    pub fn parse(s: &str) -> Option<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<usize>().ok()?)),
            None => (s, None),
        };
        match (name, arg) {
            ("power_law", None) => Some(GraphKind::PowerLawCluster { m: 3, p: 0.1 }),
            ("power_law", Some(m)) => Some(GraphKind::PowerLawCluster { m, p: 0.1 }),
            ("regular", Some(d)) => Some(GraphKind::Regular { d }),
            ("line", None) => Some(GraphKind::Line),
            ("grid", Some(width)) if width > 0 => Some(GraphKind::Grid { width }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkGraph {
    pub kind: GraphKind,
    adj: Vec<BTreeSet<u32>>,
    owner: Vec<ClientId>,
}

/// Generates a graph owned entirely by client 0; call `split` to spread it.
pub fn gen_graph(kind: GraphKind, n: usize, seed: u64) -> Result<WorkGraph, GraphError> {
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = WorkGraph { kind, adj: vec![BTreeSet::new(); n], owner: vec![0; n] };
    match kind {
        GraphKind::Line => {
            for i in 1..n {
                g.add_edge(i as u32 - 1, i as u32);
            }
        }
        GraphKind::Grid { width } => {
            for i in 0..n {
                if (i + 1) % width != 0 && i + 1 < n {
                    g.add_edge(i as u32, i as u32 + 1);
                }
                if i + width < n {
                    g.add_edge(i as u32, (i + width) as u32);
                }
            }
        }
        GraphKind::Regular { d } => regular(&mut g, d, &mut rng)?,
        GraphKind::PowerLawCluster { m, p } => power_law_cluster(&mut g, m, p, &mut rng)?,
        GraphKind::Custom => {}
    }
    Ok(g)
}

/// Circulant start, then degree-preserving double-edge swaps.
fn regular(g: &mut WorkGraph, d: usize, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
    let n = g.len();
    if d >= n || (n * d) % 2 == 1 {
        return Err(GraphError::NoRegular { n, d });
    }
    for i in 0..n {
        for k in 1..=d / 2 {
            g.add_edge(i as u32, ((i + k) % n) as u32);
        }
        if d % 2 == 1 && i < n / 2 {
            g.add_edge(i as u32, (i + n / 2) as u32);
        }
    }
    let mut edges = g.edges();
    for _ in 0..10 * edges.len() {
        let i = rng.random_range(0..edges.len());
        let j = rng.random_range(0..edges.len());
        let (e, f) = (edges[i], edges[j]);
        // a-b, c-d becomes a-d, c-b (or a-c, b-d).
        let (a, b) = (e.a, e.b);
        let (c, dd) = if rng.random_bool(0.5) { (f.a, f.b) } else { (f.b, f.a) };
        if a == c || a == dd || b == c || b == dd || g.has_edge(a, dd) || g.has_edge(c, b) {
            continue;
        }
        g.remove_edge(a, b);
        g.remove_edge(c, dd);
        g.add_edge(a, dd);
        g.add_edge(c, b);
        edges[i] = Edge::new(a, dd);
        edges[j] = Edge::new(c, b);
    }
    Ok(())
}

fn power_law_cluster(g: &mut WorkGraph, m: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
    let n = g.len();
    if m == 0 || n <= m {
        return Err(GraphError::TooSmall { m });
    }
    // Endpoint multiset: sampling from it is preferential attachment.
    let mut repeated: Vec<u32> = (0..m as u32).collect();
    for source in m..n {
        let src = source as u32;
        let mut added = 0;
        let mut last: Option<u32> = None;
        let mut guard = 0;
        while added < m && guard < 100 * m {
            guard += 1;
            let triad = last.filter(|_| rng.random_bool(p)).and_then(|l| {
                let options: Vec<u32> =
                    g.adj[l as usize].iter().copied().filter(|&w| w != src && !g.has_edge(src, w)).collect();
                options.choose(rng).copied()
            });
            let target = match triad {
                Some(t) => t,
                None => {
                    let t = *repeated.choose(rng).expect("seeded with m nodes");
                    if t == src || g.has_edge(src, t) {
                        continue;
                    }
                    last = Some(t);
                    t
                }
            };
            g.add_edge(src, target);
            repeated.extend([src, target]);
            added += 1;
        }
    }
    Ok(())
}

impl WorkGraph {
    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    fn add_edge(&mut self, a: u32, b: u32) {
        if a != b {
            self.adj[a as usize].insert(b);
            self.adj[b as usize].insert(a);
        }
    }

    fn remove_edge(&mut self, a: u32, b: u32) {
        self.adj[a as usize].remove(&b);
        self.adj[b as usize].remove(&a);
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.adj[a as usize].contains(&b)
    }

    pub fn neighbors(&self, node: u32) -> impl Iterator<Item = u32> + '_ {
        self.adj[node as usize].iter().copied()
    }

    pub fn degree(&self, node: u32) -> usize {
        self.adj[node as usize].len()
    }

    /// Every edge once, sorted.
    pub fn edges(&self) -> Vec<Edge> {
        (0..self.len() as u32)
            .flat_map(|a| self.neighbors(a).filter(move |&b| b > a).map(move |b| Edge::new(a, b)))
            .collect()
    }

    pub fn owner(&self, node: u32) -> ClientId {
        self.owner[node as usize]
    }

    /// Assigns contiguous id ranges of near-equal size to `clients` clients.
    pub fn split(mut self, clients: usize) -> Result<Self, GraphError> {
        if clients == 0 {
            return Err(GraphError::NoClients);
        }
        let n = self.len();
        self.owner = (0..n).map(|i| (i * clients / n) as ClientId).collect();
        Ok(self)
    }

    pub fn owned(&self, client: ClientId) -> Vec<u32> {
        (0..self.len() as u32).filter(|&v| self.owner(v) == client).collect()
    }

    /// Edges whose endpoints belong to different clients.
    pub fn cross_edges(&self) -> Vec<Edge> {
        self.edges().into_iter().filter(|e| self.owner(e.a) != self.owner(e.b)).collect()
    }

    /// Cross-client edges touching `nodes`, in lock acquisition order.
    pub fn locks_for(&self, nodes: &[u32]) -> Vec<Edge> {
        let set: BTreeSet<Edge> = nodes
            .iter()
            .flat_map(|&v| self.neighbors(v).map(move |w| Edge::new(v, w)))
            .filter(|e| self.owner(e.a) != self.owner(e.b))
            .collect();
        set.into_iter().collect()
    }

    /// One `a b` line per edge, preceded by `# nodes <n>`.
    pub fn write_edge_list(&self, mut w: impl Write) -> Result<(), GraphError> {
        writeln!(w, "# nodes {}", self.len())?;
        for e in self.edges() {
            writeln!(w, "{} {}", e.a, e.b)?;
        }
        Ok(())
    }

    /// Reads `write_edge_list` output. Without a `# nodes` header the node
    /// count is one past the largest id.
    pub fn read_edge_list(r: impl BufRead) -> Result<Self, GraphError> {
        let mut declared = None;
        let mut edges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let err = |msg: &str| GraphError::Parse { line: i + 1, msg: msg.to_string() };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(n) = rest.trim().strip_prefix("nodes") {
                    declared = Some(n.trim().parse::<usize>().map_err(|_| err("bad node count"))?);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => return Err(err("expected two node ids")),
            }
        }
        let max = edges.iter().map(|&(a, b)| a.max(b) as usize + 1).max().unwrap_or(0);
        let n = declared.unwrap_or(max);
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if max > n {
            return Err(GraphError::Parse { line: 0, msg: format!("node id beyond declared count {n}") });
        }
        let mut g = WorkGraph { kind: GraphKind::Custom, adj: vec![BTreeSet::new(); n], owner: vec![0; n] };
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        Ok(g)
    }

    /// One `node client` line per node.
    pub fn write_ownership(&self, mut w: impl Write) -> Result<(), GraphError> {
        for (v, c) in self.owner.iter().enumerate() {
            writeln!(w, "{v} {c}")?;
        }
        Ok(())
    }

    pub fn read_ownership(mut self, r: impl BufRead) -> Result<Self, GraphError> {
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = || GraphError::Parse { line: i + 1, msg: "expected `node client`".into() };
            let (v, c) = line.trim().split_once(' ').ok_or_else(err)?;
            let v: usize = v.parse().map_err(|_| err())?;
            let c: ClientId = c.trim().parse().map_err(|_| err())?;
            *self.owner.get_mut(v).ok_or_else(err)? = c;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regular_graph_degrees() {
        let g = gen_graph(GraphKind::Regular { d: 6 }, 1000, 1).unwrap();
        assert!((0..1000).all(|v| g.degree(v) == 6));
        assert_eq!(g.edges().len(), 3000);
        let odd = gen_graph(GraphKind::Regular { d: 3 }, 7, 1);
        assert!(matches!(odd, Err(GraphError::NoRegular { n: 7, d: 3 })));
        let g3 = gen_graph(GraphKind::Regular { d: 3 }, 8, 1).unwrap();
        assert!((0..8).all(|v| g3.degree(v) == 3));
    }

    #[test]
    fn line_split_has_one_cross_edge() {
        let g = gen_graph(GraphKind::Line, 10, 0).unwrap().split(2).unwrap();
        assert_eq!(g.cross_edges(), vec![Edge::new(4, 5)]);
        assert_eq!(g.owned(0), vec![0, 1, 2, 3, 4]);
        assert_eq!(g.locks_for(&[3, 4]), vec![Edge::new(4, 5)]);
    }

    #[test]
    fn power_law_is_heavy_tailed() {
        for seed in 0..5 {
            let g = gen_graph(GraphKind::PowerLawCluster { m: 3, p: 0.1 }, 1000, seed).unwrap();
            let mut deg: Vec<usize> = (0..1000).map(|v| g.degree(v)).collect();
            deg.sort_unstable();
            let (median, max) = (deg[500], deg[999]);
            assert!(max > 3 * median, "seed {seed}: max {max} median {median}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let k = GraphKind::PowerLawCluster { m: 3, p: 0.1 };
        assert_eq!(gen_graph(k, 300, 9).unwrap(), gen_graph(k, 300, 9).unwrap());
        assert_ne!(gen_graph(k, 300, 9).unwrap(), gen_graph(k, 300, 10).unwrap());
    }

    #[test]
    fn grid_shape() {
        let g = gen_graph(GraphKind::Grid { width: 4 }, 12, 0).unwrap();
        assert_eq!(g.edges().len(), 3 * 3 + 4 * 2);
        assert_eq!(g.degree(5), 4);
        assert_eq!(g.degree(0), 2);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = gen_graph(GraphKind::Regular { d: 4 }, 50, 3).unwrap().split(3).unwrap();
        let mut edges = Vec::new();
        g.write_edge_list(&mut edges).unwrap();
        let mut owners = Vec::new();
        g.write_ownership(&mut owners).unwrap();
        let back = WorkGraph::read_edge_list(&edges[..]).unwrap().read_ownership(&owners[..]).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.cross_edges(), g.cross_edges());
        assert!(WorkGraph::read_edge_list(&b"1 x\n"[..]).is_err());
    }
}
