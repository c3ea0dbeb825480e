//! Client-side detect-rollback: tasks run a Read phase under edge locks,
//! then a Write phase, and abort if a relevant violation notice arrives
//! before writing.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::client::Client;
use crate::kvstore::{Consistency, Key, KvError, QuorumConfig, Value};
use crate::predicates::Edge;
use crate::simnet::{Time, SEC};
use crate::workloads::graph::WorkGraph;
use crate::workloads::peterson::{self, LockError, LockRef, SharedTracker, SpinConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RollbackError {
    #[error("illegal phase change {from:?} -> {to:?}")]
    Phase { from: Phase, to: Phase },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Read,
    Write,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: usize,
    pub nodes: Vec<u32>,
    pub phase: Phase,
    pub attempt: u32,
}

impl Task {
    pub fn new(id: usize, nodes: Vec<u32>) -> Self {
        Self { id, nodes, phase: Phase::Read, attempt: 0 }
    }

    fn to(&mut self, to: Phase) -> Result<(), RollbackError> {
        let ok = matches!((self.phase, to), (Phase::Read, Phase::Write) | (Phase::Write, Phase::Done));
        if !ok {
            return Err(RollbackError::Phase { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    pub fn begin_write(&mut self) -> Result<(), RollbackError> {
        self.to(Phase::Write)
    }

    pub fn finish(&mut self) -> Result<(), RollbackError> {
        self.to(Phase::Done)
    }

    /// Back to Read for another attempt. Only legal from Read.
    pub fn abort(&mut self) -> Result<(), RollbackError> {
        if self.phase != Phase::Read {
            return Err(RollbackError::Phase { from: self.phase, to: Phase::Read });
        }
        self.attempt += 1;
        Ok(())
    }
}

/// Splits `nodes` into tasks of `size` nodes, keeping order.
pub fn make_tasks(nodes: &[u32], size: usize) -> Vec<Task> {
    nodes.chunks(size.max(1)).enumerate().map(|(i, c)| Task::new(i, c.to_vec())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LivelockStrategy {
    None,
    Backoff {
        max_delay: Time,
    },
    Reorder,
    /// Switches to `sequential` once `threshold` aborts fall inside `window`.
    Adaptive {
        threshold: usize,
        window: Time,
        sequential: QuorumConfig,
    },
}

impl LivelockStrategy {
    pub fn adaptive_default() -> Self {
        LivelockStrategy::Adaptive {
            threshold: 3,
            window: 30 * SEC,
            sequential: QuorumConfig::parse("N3R1W3").expect("valid label"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationAction {
    Ignore,
    AbortCurrent,
    ContinueWrite,
}

/// What to do about a report on `predicate` given the locks held in the
/// current attempt.
pub fn handle_violation(held: &[LockRef], phase: Phase, predicate: &str) -> ViolationAction {
    let involved = Edge::from_predicate_name(predicate).is_some_and(|e| held.iter().any(|l| l.edge == e));
    match (involved, phase) {
        (false, _) | (true, Phase::Done) => ViolationAction::Ignore,
        (true, Phase::Read) => ViolationAction::AbortCurrent,
        (true, Phase::Write) => ViolationAction::ContinueWrite,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetryAction {
    Immediate,
    After(Time),
    Reordered,
    SwitchedToSequential,
}

/// Backoff delay bound for the given attempt: `max_delay * 2^min(attempt, 5)`.
pub fn backoff_bound(max_delay: Time, attempt: u32) -> Time {
    max_delay << attempt.min(5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskOutcome {
    Success,
    Aborted,
    /// Lock acquisition gave up; the task is retried later.
    Parked,
}

/// How a task turns read values into writes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphApp {
    Coloring,
    /// Writes a node's new value with probability `put_ratio`.
    Weather {
        put_ratio: f64,
    },
}

impl GraphApp {
    pub fn key(&self, node: u32) -> Key {
        match self {
            GraphApp::Coloring => format!("color{node}"),
            GraphApp::Weather { .. } => format!("temp{node}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub spin: SpinConfig,
    /// Simulated local computation per task node.
    pub compute_per_node: Time,
    /// Wait after a lock acquisition gives up.
    pub park: Time,
    /// Abort on relevant violation notices. Off means plain execution.
    pub rollback: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { spin: SpinConfig::default(), compute_per_node: 50 * crate::simnet::MS, park: SEC, rollback: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortEvent {
    pub time: Time,
    pub client: u32,
    pub task: usize,
    pub attempt: u32,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuntimeStats {
    pub committed_tasks: u64,
    /// (time, nodes) for every committed task.
    pub progress: Vec<(Time, usize)>,
    pub aborts: Vec<AbortEvent>,
    pub parks: u64,
    /// Workload-value PUTs issued by attempts that later aborted. Stays 0.
    pub aborted_value_puts: u64,
    pub value_puts: u64,
    pub switched_at: Option<Time>,
    pub kv_errors: u64,
}

pub struct ClientRuntime {
    pub client: Client,
    pub tasks: VecDeque<Task>,
    pub strategy: LivelockStrategy,
    pub cfg: RuntimeConfig,
    abort_times: VecDeque<Time>,
    rng: ChaCha8Rng,
    pub stats: RuntimeStats,
}

impl ClientRuntime {
    pub fn new(client: Client, tasks: Vec<Task>, strategy: LivelockStrategy, cfg: RuntimeConfig, seed: u64) -> Self {
        Self {
            client,
            tasks: tasks.into(),
            strategy,
            cfg,
            abort_times: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: RuntimeStats::default(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Reacts to an abort of the task at the front of the queue.
    pub fn apply_livelock_strategy(&mut self, now: Time) -> RetryAction {
        let attempt = self.tasks.front().map_or(0, |t| t.attempt);
        match self.strategy {
            LivelockStrategy::None => RetryAction::Immediate,
            LivelockStrategy::Backoff { max_delay } => {
                let bound = backoff_bound(max_delay, attempt.saturating_sub(1));
                RetryAction::After(if bound == 0 { 0 } else { self.rng.random_range(0..bound) })
            }
            LivelockStrategy::Reorder => {
                if let Some(t) = self.tasks.pop_front() {
                    self.tasks.push_back(t);
                }
                RetryAction::Reordered
            }
            LivelockStrategy::Adaptive { threshold, window, sequential } => {
                self.abort_times.push_back(now);
                while self.abort_times.front().is_some_and(|&t| t + window < now) {
                    self.abort_times.pop_front();
                }
                if self.stats.switched_at.is_none() && self.abort_times.len() >= threshold {
                    self.client.set_quorum(sequential);
                    self.stats.switched_at = Some(now);
                    RetryAction::SwitchedToSequential
                } else {
                    RetryAction::Immediate
                }
            }
        }
    }

    pub fn consistency(&self) -> Consistency {
        self.client.quorum().consistency()
    }

    /// Runs every queued task to completion. With `cycle` set, finished
    /// tasks are requeued and the loop runs until `deadline`.
    pub async fn run(
        &mut self,
        graph: &WorkGraph,
        app: GraphApp,
        tracker: Option<&SharedTracker>,
        cycle: bool,
        deadline: Time,
    ) {
        while let Some(mut task) = self.tasks.pop_front() {
            if self.client.now() >= deadline {
                self.tasks.push_front(task);
                break;
            }
            let outcome = self.perform_task(graph, app, &mut task, tracker).await;
            match outcome {
                TaskOutcome::Success => {
                    self.stats.committed_tasks += 1;
                    self.stats.progress.push((self.client.now(), task.nodes.len()));
                    if cycle {
                        self.tasks.push_back(Task::new(task.id, task.nodes));
                    }
                }
                TaskOutcome::Parked => {
                    self.stats.parks += 1;
                    let park = self.cfg.park;
                    task.phase = Phase::Read;
                    self.tasks.push_front(task);
                    // Spread retries so two parked peers do not resync.
                    let jitter = self.rng.random_range(0..=park);
                    self.client.sleep(park + jitter).await;
                }
                TaskOutcome::Aborted => {
                    self.tasks.push_front(task);
                    match self.apply_livelock_strategy(self.client.now()) {
                        RetryAction::After(d) if d > 0 => self.client.sleep(d).await,
                        _ => {}
                    }
                }
            }
        }
    }

    /// One attempt at `task`, which must be in its Read phase.
    pub async fn perform_task(
        &mut self,
        graph: &WorkGraph,
        app: GraphApp,
        task: &mut Task,
        tracker: Option<&SharedTracker>,
    ) -> TaskOutcome {
        debug_assert_eq!(task.phase, Phase::Read);
        let me = self.client.id();
        let locks: Vec<LockRef> = graph
            .locks_for(&task.nodes)
            .into_iter()
            .map(|edge| LockRef { edge, me: if graph.owner(edge.a) == me { edge.a } else { edge.b } })
            .collect();
        let notice_mark = self.client.ctx().notices.len();

        match peterson::acquire_all(&self.client, &locks, self.cfg.spin, tracker).await {
            Ok(()) => {}
            Err(LockError::Starved(..)) => return TaskOutcome::Parked,
            Err(LockError::Kv(_)) => {
                self.stats.kv_errors += 1;
                return TaskOutcome::Parked;
            }
        }

        let writes = match self.read_and_compute(graph, app, task).await {
            Ok(w) => w,
            Err(_) => {
                self.stats.kv_errors += 1;
                peterson::release_all(&self.client, &locks, tracker).await;
                return TaskOutcome::Parked;
            }
        };

        if self.cfg.rollback && self.violation_since(notice_mark, &locks, task.phase) {
            peterson::release_all(&self.client, &locks, tracker).await;
            let now = self.client.now();
            self.stats.aborts.push(AbortEvent {
                time: now,
                client: me,
                task: task.id,
                attempt: task.attempt,
                edges: locks.iter().map(|l| l.edge).collect(),
            });
            task.abort().expect("abort from Read");
            return TaskOutcome::Aborted;
        }

        task.begin_write().expect("Read to Write");
        // Notices arriving from here on are ignored: this task finishes.
        for (key, value) in writes {
            self.stats.value_puts += 1;
            if self.client.put(&key, value).await.is_err() {
                self.stats.kv_errors += 1;
            }
        }
        peterson::release_all(&self.client, &locks, tracker).await;
        task.finish().expect("Write to Done");
        TaskOutcome::Success
    }

    fn violation_since(&self, mark: usize, held: &[LockRef], phase: Phase) -> bool {
        let ctx = self.client.ctx();
        ctx.notices[mark..].iter().any(|n| handle_violation(held, phase, &n.predicate) == ViolationAction::AbortCurrent)
    }

    /// Reads each task node's neighbours and computes new values in local
    /// memory. Values computed earlier in the task shadow the store.
    async fn read_and_compute(
        &mut self,
        graph: &WorkGraph,
        app: GraphApp,
        task: &Task,
    ) -> Result<Vec<(Key, Value)>, KvError> {
        let mut local: BTreeMap<u32, u64> = BTreeMap::new();
        let mut writes = Vec::new();
        for &v in &task.nodes {
            let mut seen = Vec::new();
            for w in graph.neighbors(v) {
                let val = match local.get(&w) {
                    Some(&x) => Some(x),
                    None => read_number(&self.client, &app.key(w)).await?,
                };
                seen.push((w, val));
            }
            let new = match app {
                GraphApp::Coloring => {
                    let colors: Vec<u64> = seen.iter().filter_map(|&(_, c)| c).collect();
                    Some(crate::workloads::coloring_color_choice(&colors))
                }
                GraphApp::Weather { put_ratio } => {
                    let own = match local.get(&v) {
                        Some(&x) => x,
                        None => read_number(&self.client, &app.key(v)).await?.unwrap_or(initial_temp(v)),
                    };
                    let nbrs: Vec<u64> = seen.iter().map(|&(w, t)| t.unwrap_or(initial_temp(w))).collect();
                    let next = crate::workloads::weather_value(own, &nbrs);
                    self.rng.random_bool(put_ratio).then_some(next)
                }
            };
            if self.cfg.compute_per_node > 0 {
                self.client.sleep(self.cfg.compute_per_node).await;
            }
            if let Some(x) = new {
                local.insert(v, x);
                writes.push((app.key(v), x.to_string().into_bytes()));
            }
        }
        Ok(writes)
    }
}

/// Deterministic starting temperature of a weather node.
pub fn initial_temp(node: u32) -> u64 {
    (node as u64 * 37) % 100
}

/// Largest numeric value among the returned versions, or `None` if unset.
async fn read_number(client: &Client, key: &str) -> Result<Option<u64>, KvError> {
    let vv = client.get(key).await?;
    Ok(vv.values().filter_map(|v| std::str::from_utf8(v).ok()?.parse::<u64>().ok()).max())
}
