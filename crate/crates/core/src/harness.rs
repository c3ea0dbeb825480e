//! Experiment runner: TOML configuration, seeded trials, per-second
//! metrics and their CSV and event-log output.

pub mod record;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Cluster, ClusterConfig, ClusterError};
use crate::hvc::Epsilon;
use crate::kvstore::{ClientId, KvError, QuorumConfig, RoundWait};
use crate::metrics::Series;
use crate::rollback::{make_tasks, ClientRuntime, GraphApp, LivelockStrategy, RuntimeConfig, RuntimeStats};
use crate::simnet::{ms, LatencyModel, Time, SEC};
use crate::workloads::graph::{gen_graph, GraphError, GraphKind, WorkGraph};
use crate::workloads::peterson::{CsTracker, SpinConfig};
use crate::workloads::{self, conjunctive_spec, ConjTracker};

pub use record::{average, benefit, overhead, stable_phase_metrics, Detection, LogEvent, MetricsRecord, Row, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("record has {seconds} full seconds, nothing left after a {warmup} warm-up")]
    TooShort { seconds: usize, warmup: f64 },
}

fn one() -> usize {
    1
}
fn warmup() -> f64 {
    record::DEFAULT_WARMUP
}
fn task_size() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time limit. Terminating workloads may stop earlier.
    pub duration_s: f64,
    #[serde(default = "warmup")]
    pub warmup_fraction: f64,
    pub cluster: ClusterSection,
    pub topology: Topology,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub runtime: RuntimeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Label such as `N3R1W1`.
    pub quorum: String,
    pub wait: RoundWait,
    pub timeout_ms: f64,
    pub monitors: bool,
    pub eager_candidates: bool,
    /// Clock synchronization bound; unset means unbounded.
    pub epsilon_ms: Option<f64>,
    pub get_service_us: Time,
    pub put_service_us: Time,
    pub jitter_shape: f64,
    pub jitter_fraction: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            quorum: "N3R1W1".into(),
            wait: RoundWait::Quorum,
            timeout_ms: 500.0,
            monitors: false,
            eager_candidates: true,
            epsilon_ms: None,
            get_service_us: 300,
            put_service_us: 500,
            jitter_shape: 2.0,
            jitter_fraction: 0.1,
        }
    }
}

/// Server and client placement. Latencies are mean one-way delays;
/// jitter is added on top of a base chosen to keep that mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// Ohio, Oregon, Frankfurt with 76/103/163 ms round trips.
    CrossRegion {
        #[serde(default = "five")]
        clients_per_region: usize,
    },
    /// Availability zones of one region: 0.5 ms round trip inside a zone,
    /// 1.4 ms between zones.
    SameRegion {
        #[serde(default = "five")]
        zones: usize,
        #[serde(default = "ten")]
        clients: usize,
    },
    /// Three regions, 1 ms one-way inside, `one_way_ms` between.
    Lab {
        one_way_ms: f64,
        #[serde(default = "five")]
        clients_per_region: usize,
    },
    Custom {
        regions: Vec<String>,
        one_way_ms: Vec<Vec<f64>>,
        servers: Vec<usize>,
        clients: Vec<usize>,
    },
}

fn five() -> usize {
    5
}
fn ten() -> usize {
    10
}

pub struct Placement {
    pub latency: LatencyModel,
    pub servers: Vec<usize>,
    pub clients: Vec<usize>,
}

impl Topology {
    /// Regions, mean one-way matrix, server regions, client regions.
    fn layout(&self, n: usize) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
        let round_robin = |r: usize, k: usize| (0..k).map(|i| i % r).collect::<Vec<_>>();
        let per_region = |r: usize, k: usize| (0..r).flat_map(|g| std::iter::repeat_n(g, k)).collect::<Vec<_>>();
        match self {
            Topology::CrossRegion { clients_per_region } => {
                let rtt = [[1.0, 76.0, 103.0], [76.0, 1.0, 163.0], [103.0, 163.0, 1.0]];
                let m = rtt.iter().map(|r| r.iter().map(|x| x / 2.0).collect()).collect();
                let labels = ["ohio", "oregon", "frankfurt"].map(String::from).to_vec();
                (labels, m, round_robin(3, n), per_region(3, *clients_per_region))
            }
            Topology::SameRegion { zones, clients } => {
                let m = (0..*zones).map(|i| (0..*zones).map(|j| if i == j { 0.25 } else { 0.7 }).collect()).collect();
                let labels = (0..*zones).map(|z| format!("az{z}")).collect();
                (labels, m, round_robin(*zones, n), round_robin(*zones, *clients))
            }
            Topology::Lab { one_way_ms, clients_per_region } => {
                let m = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { *one_way_ms }).collect()).collect();
                let labels = ["r0", "r1", "r2"].map(String::from).to_vec();
                (labels, m, round_robin(3, n), per_region(3, *clients_per_region))
            }
            Topology::Custom { regions, one_way_ms, servers, clients } => {
                (regions.clone(), one_way_ms.clone(), servers.clone(), clients.clone())
            }
        }
    }

    pub fn place(&self, n: usize, jitter_shape: f64, jitter_fraction: f64) -> Result<Placement, HarnessError> {
        let (labels, means, servers, clients) = self.layout(n);
        if servers.len() != n {
            return Err(HarnessError::Config(format!("{} server regions for N = {n}", servers.len())));
        }
        // Gamma(shape, base * fraction) has mean base * shape * fraction.
        let inflate = 1.0 + jitter_shape * jitter_fraction;
        let base = means.iter().map(|r| r.iter().map(|&x| ms(x / inflate)).collect()).collect();
        let latency = LatencyModel::from_matrix(&labels, base)
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .jitter(jitter_shape, jitter_fraction);
        Ok(Placement { latency, servers, clients })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadConfig {
    Coloring {
        /// `power_law`, `regular:<d>`, `line` or `grid:<width>`.
        graph: String,
        nodes: usize,
        #[serde(default = "task_size")]
        task_size: usize,
        /// Each client only works on its nodes that have a cross-client edge.
        #[serde(default)]
        boundary_only: bool,
    },
    Weather {
        graph: String,
        nodes: usize,
        #[serde(default = "task_size")]
        task_size: usize,
        put_ratio: f64,
        #[serde(default)]
        boundary_only: bool,
    },
    Conjunctive {
        beta: f64,
        interval_ms: f64,
    },
    Mixed {
        put_ratio: f64,
        #[serde(default = "keys")]
        keys: usize,
    },
}

fn keys() -> usize {
    1000
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    #[default]
    None,
    Backoff {
        max_delay_ms: f64,
    },
    Reorder,
    Adaptive {
        #[serde(default = "three")]
        threshold: usize,
        #[serde(default = "thirty")]
        window_s: f64,
        #[serde(default = "seq_label")]
        sequential: String,
    },
}

fn three() -> usize {
    3
}
fn thirty() -> f64 {
    30.0
}
fn seq_label() -> String {
    "N3R1W3".into()
}

impl StrategyConfig {
    pub fn build(&self, base: &QuorumConfig) -> Result<LivelockStrategy, HarnessError> {
        Ok(match self {
            StrategyConfig::None => LivelockStrategy::None,
            StrategyConfig::Backoff { max_delay_ms } => LivelockStrategy::Backoff { max_delay: ms(*max_delay_ms) },
            StrategyConfig::Reorder => LivelockStrategy::Reorder,
            StrategyConfig::Adaptive { threshold, window_s, sequential } => {
                let mut q = QuorumConfig::parse(sequential)?;
                if q.n != base.n {
                    return Err(HarnessError::Config(format!("adaptive target {sequential} has a different N")));
                }
                q.timeout = base.timeout;
                q.wait = base.wait;
                LivelockStrategy::Adaptive { threshold: *threshold, window: ms(window_s * 1000.0), sequential: q }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub compute_per_node_ms: f64,
    /// Lock poll interval; unset means the largest client-server round trip.
    pub poll_interval_ms: Option<f64>,
    pub max_polls: u32,
    pub park_ms: f64,
    pub rollback: bool,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self { compute_per_node_ms: 50.0, poll_interval_ms: None, max_polls: 50, park_ms: 1000.0, rollback: true }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn quorum(&self) -> Result<QuorumConfig, HarnessError> {
        let mut q = QuorumConfig::parse(&self.cluster.quorum)?;
        q.wait = self.cluster.wait;
        q.timeout = ms(self.cluster.timeout_ms);
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let q = self.quorum()?;
        self.strategy.build(&q)?;
        if self.trials == 0 || self.duration_s <= 0.0 {
            return Err(HarnessError::Config("need at least one trial and a positive duration".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(HarnessError::Config("warmup_fraction must be in [0, 1)".into()));
        }
        let ratio_ok = |p: f64| (0.0..=1.0).contains(&p);
        match &self.workload {
            WorkloadConfig::Coloring { graph, .. } | WorkloadConfig::Weather { graph, .. }
                if GraphKind::parse(graph).is_none() =>
            {
                return Err(HarnessError::Config(format!("unknown graph kind {graph:?}")));
            }
            WorkloadConfig::Weather { put_ratio, .. } | WorkloadConfig::Mixed { put_ratio, .. }
                if !ratio_ok(*put_ratio) =>
            {
                return Err(HarnessError::Config("put_ratio must be in [0, 1]".into()));
            }
            WorkloadConfig::Conjunctive { beta, .. } if !ratio_ok(*beta) => {
                return Err(HarnessError::Config("beta must be in [0, 1]".into()));
            }
            _ => {}
        }
        self.topology.place(q.n, self.cluster.jitter_shape, self.cluster.jitter_fraction)?;
        Ok(())
    }

    fn runtime_config(&self, placement: &Placement) -> RuntimeConfig {
        let poll = match self.runtime.poll_interval_ms {
            Some(x) => ms(x),
            None => placement
                .clients
                .iter()
                .flat_map(|&c| placement.servers.iter().map(move |&s| (c, s)))
                .filter_map(|(c, s)| placement.latency.rtt(c, s).ok())
                .max()
                .unwrap_or(0),
        };
        RuntimeConfig {
            spin: SpinConfig { poll_interval: poll, max_polls: self.runtime.max_polls },
            compute_per_node: ms(self.runtime.compute_per_node_ms),
            park: ms(self.runtime.park_ms),
            rollback: self.runtime.rollback,
        }
    }
}

/// Per-client state kept alive across the run for collection afterwards.
type Runtimes = Vec<Rc<RefCell<ClientRuntime>>>;

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

/// Runs one seeded trial.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<MetricsRecord, HarnessError> {
    cfg.validate()?;
    let quorum = cfg.quorum()?;
    let placement = cfg.topology.place(quorum.n, cfg.cluster.jitter_shape, cfg.cluster.jitter_fraction)?;
    let seed = trial_seed(cfg.seed, trial);
    let deadline = ms(cfg.duration_s * 1000.0);
    let rt_cfg = cfg.runtime_config(&placement);

    let mut cc = ClusterConfig::new(placement.latency, placement.servers, placement.clients, quorum);
    cc.monitors = cfg.cluster.monitors;
    cc.eager_candidates = cfg.cluster.eager_candidates;
    cc.epsilon = cfg.cluster.epsilon_ms.map_or(Epsilon::Infinite, |e| Epsilon::Finite(ms(e)));
    cc.get_service = cfg.cluster.get_service_us;
    cc.put_service = cfg.cluster.put_service_us;
    cc.seed = seed;
    let n_clients = cc.client_regions.len();
    if let WorkloadConfig::Conjunctive { .. } = cfg.workload {
        cc.specs = vec![conjunctive_spec(n_clients)];
        cc.infer_locks = false;
    }
    let mut cluster = Cluster::new(cc)?;
    let strategy = cfg.strategy.build(&quorum)?;

    let mut out = MetricsRecord { label: format!("{}_trial{trial}", cfg.name), ..MetricsRecord::default() };
    let mut runtimes: Runtimes = Vec::new();
    let mut graph_info: Option<(Rc<WorkGraph>, GraphApp, BTreeSet<u32>)> = None;
    let cs = CsTracker::shared();
    let conj = ConjTracker::shared(n_clients);

    match &cfg.workload {
        WorkloadConfig::Coloring { graph, nodes, task_size, boundary_only }
        | WorkloadConfig::Weather { graph, nodes, task_size, boundary_only, .. } => {
            let (app, cycle) = match cfg.workload {
                WorkloadConfig::Weather { put_ratio, .. } => (GraphApp::Weather { put_ratio }, true),
                _ => (GraphApp::Coloring, false),
            };
            let kind = GraphKind::parse(graph).expect("validated");
            let g = Rc::new(gen_graph(kind, *nodes, seed)?.split(n_clients)?);
            let mut covered = BTreeSet::new();
            for c in 0..n_clients as ClientId {
                let owned: Vec<u32> = g
                    .owned(c)
                    .into_iter()
                    .filter(|&v| !boundary_only || g.neighbors(v).any(|w| g.owner(w) != c))
                    .collect();
                covered.extend(owned.iter().copied());
                let rt = Rc::new(RefCell::new(ClientRuntime::new(
                    cluster.client(c),
                    make_tasks(&owned, *task_size),
                    strategy,
                    rt_cfg,
                    seed ^ (u64::from(c) << 32),
                )));
                runtimes.push(rt.clone());
                let (g2, tracker) = (g.clone(), cs.clone());
                // The task owns its runtime for the whole run; the harness
                // only reads it after the task is done or dropped.
                #[allow(clippy::await_holding_refcell_ref)]
                cluster.spawn(c, async move {
                    let mut rt = rt.borrow_mut();
                    rt.run(&g2, app, Some(&tracker), cycle, deadline).await;
                })?;
            }
            out.total_nodes = covered.len() as u64;
            graph_info = Some((g, app, covered));
        }
        WorkloadConfig::Conjunctive { beta, interval_ms } => {
            let (beta, interval) = (*beta, ms(*interval_ms));
            for c in 0..n_clients as ClientId {
                let client = cluster.client(c);
                let tracker = conj.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(c) << 32));
                cluster.spawn(c, async move {
                    while client.now() < deadline {
                        let pause = rng.random_range(interval / 2..=interval + interval / 2);
                        client.sleep(pause.max(1)).await;
                        let _ = workloads::conjunctive_step(&client, beta, &mut rng, Some(&tracker)).await;
                    }
                })?;
            }
        }
        WorkloadConfig::Mixed { put_ratio, keys } => {
            let (p, k) = (*put_ratio, *keys);
            for c in 0..n_clients as ClientId {
                let client = cluster.client(c);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(c) << 32));
                cluster.spawn(c, async move {
                    while client.now() < deadline {
                        let _ = workloads::mixed_op(&client, p, k, &mut rng).await;
                    }
                })?;
            }
        }
    }

    cluster.run_until_done(deadline)?;
    out.completed = cluster.all_finished() && runtimes.iter().all(|r| r.borrow().tasks.is_empty());
    out.duration = cluster.now();
    // Unfinished tasks still hold their runtimes borrowed.
    cluster.cancel_unfinished();
    if matches!(cfg.workload, WorkloadConfig::Coloring { .. }) && out.completed {
        // Let in-flight replication land before checking the result.
        let t = cluster.now();
        cluster.run_for(t + 10 * SEC)?;
    }

    let stats: Vec<RuntimeStats> = runtimes.iter().map(|r| r.borrow().stats.clone()).collect();
    collect(&mut out, &cluster, &stats, &cs.borrow(), &conj.borrow());
    if let (Some((g, GraphApp::Coloring, covered)), true) = (&graph_info, out.completed) {
        out.proper_coloring = Some(coloring_is_proper(&cluster, g, covered));
    }
    Ok(out)
}

fn collect(out: &mut MetricsRecord, cl: &Cluster, stats: &[RuntimeStats], cs: &CsTracker, conj: &ConjTracker) {
    let end = out.duration;
    let within = |t: &Time| *t < end;
    let app = Series::from_times(cl.clients().iter().flat_map(|c| c.ctx().completed_ops.clone()).filter(within));
    let violation_times: Vec<Time> =
        cs.co_occupancy.iter().map(|&(t, _)| t).chain(conj.onsets.iter().copied()).filter(within).collect();
    for &(t, e) in &cs.co_occupancy {
        out.events.push(LogEvent::Violation { time: t, what: e.predicate_name() });
    }
    for &t in &conj.onsets {
        out.events.push(LogEvent::Violation { time: t, what: "conjunctive".into() });
    }
    for &t in conj.ends.iter().filter(|t| within(t)) {
        out.events.push(LogEvent::Cleared { time: t, what: "conjunctive".into() });
    }
    for r in cl.reports() {
        out.events.push(LogEvent::Detection(Detection {
            predicate: r.predicate.clone(),
            t_violate: r.t_violate,
            onset: r.onset,
            detection_time: r.detection_time,
        }));
    }
    let mut progress: Vec<(Time, u64)> = Vec::new();
    for (c, s) in stats.iter().enumerate() {
        out.events.extend(s.aborts.iter().cloned().map(LogEvent::Abort));
        if let Some(t) = s.switched_at {
            out.events.push(LogEvent::Switch { time: t, client: c as u32 });
        }
        out.aborted_value_puts += s.aborted_value_puts;
        progress.extend(s.progress.iter().map(|&(t, n)| (t, n as u64)));
    }
    progress.sort();
    let mut total = 0;
    out.progress = progress
        .into_iter()
        .map(|(t, n)| {
            total += n;
            (t, total)
        })
        .collect();

    let aborts: Vec<_> = out.aborts().cloned().collect();
    out.both_aborted = aborts
        .iter()
        .filter(|a| {
            aborts.iter().any(|b| {
                b.client != a.client && a.time.abs_diff(b.time) <= SEC && b.edges.iter().any(|e| a.edges.contains(e))
            })
        })
        .count() as u64;

    let bins = end.div_ceil(SEC).max(1) as usize;
    let viol = Series::from_times(violation_times);
    let det = Series::from_times(cl.reports().iter().map(|r| r.detection_time).filter(within));
    let ab = Series::from_times(aborts.iter().map(|a| a.time).filter(within));
    let f = |s: &Series, i: usize| s.get(i) as f64;
    out.rows = (0..bins)
        .map(|i| Row {
            server_ops: f(&cl.stats.server_ops, i),
            app_ops: f(&app, i),
            violations: f(&viol, i),
            detections: f(&det, i),
            aborts: f(&ab, i),
            candidates: f(&cl.stats.candidates, i),
        })
        .collect();
}

/// Every covered edge has colored endpoints with disjoint color sets at
/// every replica.
fn coloring_is_proper(cl: &Cluster, g: &WorkGraph, covered: &BTreeSet<u32>) -> bool {
    let app = GraphApp::Coloring;
    (0..cl.config().quorum.n).all(|s| {
        let colors = |v: u32| -> BTreeSet<Vec<u8>> { cl.server(s).read(&app.key(v)).values().cloned().collect() };
        g.edges().iter().filter(|e| covered.contains(&e.a) && covered.contains(&e.b)).all(|e| {
            let (a, b) = (colors(e.a), colors(e.b));
            !a.is_empty() && !b.is_empty() && a.is_disjoint(&b)
        })
    })
}

/// All trials in parallel threads, plus their average.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<MetricsRecord>, MetricsRecord), HarnessError> {
    cfg.validate()?;
    let trials: Vec<Result<MetricsRecord, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.trials).map(|t| s.spawn(move || run_trial(cfg, t))).collect();
        handles.into_iter().map(|h| h.join().expect("trial thread panicked")).collect()
    });
    let trials = trials.into_iter().collect::<Result<Vec<_>, _>>()?;
    let avg = average(&format!("{}_avg", cfg.name), &trials);
    Ok((trials, avg))
}

/// Writes `<label>.csv` and `<label>.events.jsonl` per trial and
/// `<name>_avg.csv`. Returns the CSV paths.
pub fn write_outputs(dir: &Path, trials: &[MetricsRecord], avg: &MetricsRecord) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for r in trials.iter().chain(std::iter::once(avg)) {
        let p = dir.join(format!("{}.csv", r.label));
        r.write_csv(std::io::BufWriter::new(std::fs::File::create(&p)?))?;
        paths.push(p);
    }
    for r in trials {
        let p = dir.join(format!("{}.events.jsonl", r.label));
        r.write_events(std::io::BufWriter::new(std::fs::File::create(&p)?))?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIXED: &str = r#"
        name = "mixed"
        trials = 3
        seed = 4
        duration_s = 5

        [cluster]
        quorum = "N3R1W1"
        monitors = false

        [topology]
        preset = "same_region"
        zones = 3
        clients = 4

        [workload]
        kind = "mixed"
        put_ratio = 0.5
    "#;

    fn csv(r: &MetricsRecord) -> String {
        let mut b = Vec::new();
        r.write_csv(&mut b).unwrap();
        String::from_utf8(b).unwrap()
    }

    #[test]
    fn three_trials_give_four_records_and_repeat_exactly() {
        let cfg = ExperimentConfig::from_toml(MIXED).unwrap();
        let (trials, avg) = run_experiment(&cfg).unwrap();
        assert_eq!(trials.len() + 1, 4);
        let (again, avg2) = run_experiment(&cfg).unwrap();
        assert_eq!(csv(&avg), csv(&avg2));
        for (a, b) in trials.iter().zip(&again) {
            assert_eq!(csv(a), csv(b));
        }
        assert_ne!(csv(&trials[0]), csv(&trials[1]));
        // Monitors off: no candidates and no detections.
        for r in &trials {
            assert!(r.rows.iter().all(|x| x.candidates == 0.0 && x.detections == 0.0));
            assert!(r.rows.iter().all(|x| x.server_ops >= x.app_ops));
        }
    }

    #[test]
    fn unknown_workload_and_strategy_rejected() {
        let bad = MIXED.replace("kind = \"mixed\"", "kind = \"pagerank\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{MIXED}\n[strategy]\nkind = \"pray\"\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{MIXED}\n[strategy]\nkind = \"adaptive\"\nsequential = \"N5R1W5\"\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MIXED.replace("put_ratio = 0.5", "put_ratio = 1.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn calibrated_latency_keeps_mean() {
        let p = Topology::CrossRegion { clients_per_region: 5 }.place(3, 2.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean =
            (0..20_000).map(|_| p.latency.sample_latency(0, 2, &mut rng).unwrap()).sum::<u64>() as f64 / 20_000.0;
        assert!((mean - 51_500.0).abs() < 300.0, "{mean}");
        assert_eq!(p.clients.len(), 15);
        assert_eq!(p.servers, vec![0, 1, 2]);
    }

    #[test]
    fn small_coloring_run_is_proper() {
        let text = r#"
            name = "color"
            duration_s = 600
            [cluster]
            quorum = "N3R1W3"
            monitors = true
            [topology]
            preset = "cross_region"
            clients_per_region = 1
            [workload]
            kind = "coloring"
            graph = "regular:4"
            nodes = 60
            task_size = 5
            [runtime]
            compute_per_node_ms = 5
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let r = run_trial(&cfg, 0).unwrap();
        assert!(r.completed);
        assert_eq!(r.proper_coloring, Some(true));
        assert_eq!(r.detections().count(), 0);
        assert_eq!(r.progress.last().unwrap().1, 60);
        assert!(r.rows.iter().map(|x| x.candidates).sum::<f64>() > 0.0);
    }
}
