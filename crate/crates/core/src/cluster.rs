//! The simulated deployment: servers, clients and monitors wired together on
//! one event queue.

use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Waker};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::detection::{Candidate, DetectionError, LocalDetector, Monitor, ViolationReport};
use crate::hvc::{Epsilon, HybridVectorClock};
use crate::kvstore::client::{Client, ClientCtx, Notice, Reply, Request};
use crate::kvstore::{ClientId, KvError, NoHook, QuorumConfig, ServerId, ServerState};
use crate::metrics::Series;
use crate::predicates::{PredicateRegistry, PredicateSpec, DEFAULT_IDLE_TIMEOUT};
use crate::simnet::{EventQueue, LatencyModel, SimError, Time};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("bad cluster layout: {0}")]
    Layout(String),
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub latency: LatencyModel,
    pub server_regions: Vec<usize>,
    pub client_regions: Vec<usize>,
    pub quorum: QuorumConfig,
    pub epsilon: Epsilon,
    pub monitors: bool,
    pub specs: Vec<PredicateSpec>,
    pub infer_locks: bool,
    /// Detectors also send a point candidate for each state a write opens.
    pub eager_candidates: bool,
    /// Server time to serve a GET or GET_VERSION.
    pub get_service: Time,
    pub put_service: Time,
    pub idle_timeout: Time,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(
        latency: LatencyModel,
        server_regions: Vec<usize>,
        client_regions: Vec<usize>,
        quorum: QuorumConfig,
    ) -> Self {
        Self {
            latency,
            server_regions,
            client_regions,
            quorum,
            epsilon: Epsilon::Infinite,
            monitors: false,
            specs: Vec::new(),
            infer_locks: true,
            eager_candidates: true,
            get_service: 300,
            put_service: 500,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            seed: 0,
        }
    }
}

enum Event {
    ToServer { server: ServerId, client: ClientId, req_id: u64, request: Request, hvc: HybridVectorClock },
    ToClient { client: ClientId, server: ServerId, req_id: u64, reply: Reply, hvc: HybridVectorClock },
    Wake { client: ClientId },
    ToMonitor { monitor: usize, candidate: Candidate },
    Notify { client: ClientId, predicate: String },
    Gc,
}

struct Server {
    state: ServerState,
    hvc: HybridVectorClock,
    last_pt: Time,
    detector: Option<LocalDetector>,
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

/// Counters collected during a run.
#[derive(Clone, Debug, Default)]
pub struct ClusterStats {
    pub server_ops: Series,
    pub candidates: Series,
    pub dropped_messages: u64,
    pub notices: u64,
}

pub struct Cluster {
    cfg: ClusterConfig,
    queue: EventQueue<Event>,
    servers: Vec<Server>,
    clients: Vec<Client>,
    tasks: Vec<Option<Task>>,
    finished: Vec<Option<Time>>,
    monitors: Vec<Monitor>,
    reports: Vec<ViolationReport>,
    data_rng: ChaCha8Rng,
    control_rng: ChaCha8Rng,
    pub stats: ClusterStats,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Result<Self, ClusterError> {
        cfg.quorum.validate()?;
        let s = cfg.server_regions.len();
        if cfg.quorum.n != s {
            return Err(ClusterError::Layout(format!("N = {} but {s} servers", cfg.quorum.n)));
        }
        let regions = cfg.latency.regions().len();
        if cfg.server_regions.iter().chain(&cfg.client_regions).any(|&r| r >= regions) {
            return Err(ClusterError::Layout("process placed in an unknown region".into()));
        }
        let dim = s + cfg.client_regions.len();
        let clock = |owner| HybridVectorClock::new(owner, dim, cfg.epsilon).expect("owner below dimension");
        let servers = cfg
            .server_regions
            .iter()
            .enumerate()
            .map(|(id, &region)| Server {
                state: ServerState::new(id, region),
                hvc: clock(id),
                last_pt: 0,
                detector: cfg.monitors.then(|| {
                    LocalDetector::new(clock(id), cfg.specs.clone(), cfg.infer_locks).eager(cfg.eager_candidates)
                }),
            })
            .collect();
        let clients: Vec<Client> = cfg
            .client_regions
            .iter()
            .enumerate()
            .map(|(c, &region)| Client::new(ClientCtx::new(c as ClientId, region, clock(s + c), cfg.quorum)))
            .collect();
        let monitors = if cfg.monitors {
            (0..s)
                .map(|m| Monitor::new(m, s, cfg.epsilon, PredicateRegistry::new(s, cfg.idle_timeout), &cfg.specs))
                .collect()
        } else {
            Vec::new()
        };
        let mut queue = EventQueue::new();
        if cfg.monitors {
            queue.schedule(cfg.idle_timeout, Event::Gc)?;
        }
        let n_clients = clients.len();
        Ok(Self {
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            control_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de),
            cfg,
            queue,
            servers,
            clients,
            tasks: (0..n_clients).map(|_| None).collect(),
            finished: vec![None; n_clients],
            monitors,
            reports: Vec::new(),
            stats: ClusterStats::default(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.queue.now()
    }

    pub fn client(&self, id: ClientId) -> Client {
        self.clients[id as usize].clone()
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn server(&self, id: ServerId) -> &ServerState {
        &self.servers[id].state
    }

    pub fn reports(&self) -> &[ViolationReport] {
        &self.reports
    }

    pub fn monitors(&self) -> &[Monitor] {
        &self.monitors
    }

    /// Completion time of each client's task, if it finished.
    pub fn finished(&self) -> &[Option<Time>] {
        &self.finished
    }

    pub fn all_finished(&self) -> bool {
        self.finished.iter().zip(&self.tasks).all(|(f, t)| f.is_some() || t.is_none())
    }

    /// Drops every task that has not finished. Returns how many were dropped.
    pub fn cancel_unfinished(&mut self) -> usize {
        let mut n = 0;
        for (f, t) in self.finished.iter().zip(&mut self.tasks) {
            if f.is_none() && t.take().is_some() {
                n += 1;
            }
        }
        n
    }

    /// Installs the client's task; it first runs at the current time.
    pub fn spawn(&mut self, client: ClientId, task: impl Future<Output = ()> + 'static) -> Result<(), ClusterError> {
        self.tasks[client as usize] = Some(Box::pin(task));
        self.finished[client as usize] = None;
        let now = self.queue.now();
        self.queue.schedule(now, Event::Wake { client })?;
        Ok(())
    }

    /// Runs until `stop` or until every spawned task has finished.
    pub fn run_until_done(&mut self, stop: Time) -> Result<u64, ClusterError> {
        let mut count = 0;
        while !self.all_finished() {
            let Some((t, ev)) = self.queue.pop_until(stop) else { break };
            self.handle(t, ev)?;
            count += 1;
        }
        Ok(count)
    }

    /// Runs every event due by `stop`.
    pub fn run_for(&mut self, stop: Time) -> Result<u64, ClusterError> {
        let mut count = 0;
        while let Some((t, ev)) = self.queue.pop_until(stop) {
            self.handle(t, ev)?;
            count += 1;
        }
        Ok(count)
    }

    fn handle(&mut self, t: Time, ev: Event) -> Result<(), ClusterError> {
        match ev {
            Event::ToServer { server, client, req_id, request, hvc } => {
                self.on_server(t, server, client, req_id, request, hvc)?
            }
            Event::ToClient { client, server, req_id, reply, hvc } => {
                self.clients[client as usize].ctx().now = t;
                self.clients[client as usize].ctx().deposit(req_id, server, reply, &hvc);
                self.poll_client(client)?;
            }
            Event::Wake { client } => {
                self.clients[client as usize].ctx().now = t;
                self.poll_client(client)?;
            }
            Event::ToMonitor { monitor, candidate } => {
                let reports = self.monitors[monitor].on_candidate(candidate, t)?;
                for r in reports {
                    self.broadcast(monitor, &r)?;
                    self.reports.push(r);
                }
            }
            Event::Notify { client, predicate } => {
                {
                    let mut c = self.clients[client as usize].ctx();
                    c.now = t;
                    c.notices.push(Notice { predicate, received: t });
                }
                self.poll_client(client)?;
            }
            Event::Gc => {
                for m in &mut self.monitors {
                    m.gc(t);
                }
                self.queue.schedule(t + self.cfg.idle_timeout / 2, Event::Gc)?;
            }
        }
        Ok(())
    }

    fn node_server(&self, s: ServerId) -> usize {
        s
    }

    fn node_client(&self, c: ClientId) -> usize {
        self.servers.len() + c as usize
    }

    fn node_monitor(&self, m: usize) -> usize {
        self.servers.len() + self.clients.len() + m
    }

    fn on_server(
        &mut self,
        t: Time,
        s: ServerId,
        client: ClientId,
        req_id: u64,
        request: Request,
        hvc: HybridVectorClock,
    ) -> Result<(), ClusterError> {
        self.stats.server_ops.add(t);
        let server = &mut self.servers[s];
        server.last_pt = t.max(server.last_pt + 1);
        server.hvc = server.hvc.merge_receive(&hvc, server.last_pt).expect("server clock is monotone");
        let (reply, service) = match request {
            Request::Get { key } | Request::GetVersion { key } => {
                (Reply::Value(server.state.read(&key)), self.cfg.get_service)
            }
            Request::Put { key, version, value, conditional } => {
                let now_hvc = server.hvc.clone();
                let outcome = match server.detector.as_mut() {
                    Some(d) => server.state.server_put(&key, version, value, &now_hvc, conditional, d),
                    None => server.state.server_put(&key, version, value, &now_hvc, conditional, &mut NoHook),
                };
                (Reply::Ack(outcome), self.cfg.put_service)
            }
        };
        let candidates = server.detector.as_mut().map(|d| d.take_candidates()).unwrap_or_default();
        server.last_pt = (t + service).max(server.last_pt + 1);
        server.hvc = server.hvc.advance_send(server.last_pt).expect("server clock is monotone");
        let reply_hvc = server.hvc.clone();
        let s_region = server.state.region;

        for c in candidates {
            let m = crate::predicates::assign_monitor(&c.predicate, self.monitors.len());
            let m_region = self.cfg.server_regions[m];
            let lat = self.cfg.latency.sample_latency(s_region, m_region, &mut self.control_rng)?;
            self.stats.candidates.add(t);
            let (from, to) = (self.node_server(s), self.node_monitor(m));
            self.queue.send(from, to, lat, Event::ToMonitor { monitor: m, candidate: c })?;
        }

        let c_region = self.cfg.client_regions[client as usize];
        if self.cfg.latency.is_cut(s_region, c_region, t) {
            self.stats.dropped_messages += 1;
            return Ok(());
        }
        let lat = self.cfg.latency.sample_latency(s_region, c_region, &mut self.data_rng)?;
        let (from, to) = (self.node_server(s), self.node_client(client));
        self.queue.send(
            from,
            to,
            service + lat,
            Event::ToClient { client, server: s, req_id, reply, hvc: reply_hvc },
        )?;
        Ok(())
    }

    fn broadcast(&mut self, monitor: usize, r: &ViolationReport) -> Result<(), ClusterError> {
        let m_region = self.cfg.server_regions[monitor];
        for c in 0..self.clients.len() {
            let lat = self.cfg.latency.sample_latency(m_region, self.cfg.client_regions[c], &mut self.control_rng)?;
            let (from, to) = (self.node_monitor(monitor), self.node_client(c as ClientId));
            self.queue.send(from, to, lat, Event::Notify { client: c as ClientId, predicate: r.predicate.clone() })?;
            self.stats.notices += 1;
        }
        Ok(())
    }

    fn poll_client(&mut self, client: ClientId) -> Result<(), ClusterError> {
        let idx = client as usize;
        if let Some(task) = self.tasks[idx].as_mut() {
            if self.finished[idx].is_none() && task.as_mut().poll(&mut Context::from_waker(Waker::noop())).is_ready() {
                self.finished[idx] = Some(self.queue.now());
            }
        }
        let (outbox, timers, region) = {
            let mut c = self.clients[idx].ctx();
            (c.take_outbox(), c.take_timers(), c.region)
        };
        let now = self.queue.now();
        for t in timers {
            self.queue.schedule(t.max(now), Event::Wake { client })?;
        }
        for o in outbox {
            let s_region = self.cfg.server_regions[o.server];
            if self.cfg.latency.is_cut(region, s_region, now) {
                self.stats.dropped_messages += 1;
                continue;
            }
            let lat = self.cfg.latency.sample_latency(region, s_region, &mut self.data_rng)?;
            let (from, to) = (self.node_client(client), self.node_server(o.server));
            self.queue.send(
                from,
                to,
                lat,
                Event::ToServer { server: o.server, client, req_id: o.req_id, request: o.request, hvc: o.hvc },
            )?;
        }
        Ok(())
    }
}
