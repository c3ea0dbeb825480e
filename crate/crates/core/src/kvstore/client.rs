//! Client library: quorum GET, GET_VERSION and PUT as async operations.
//!
//! A [`Client`] does no I/O itself. Requests and timers accumulate in its
//! context and the cluster's event loop delivers them; replies are deposited
//! back and the client's task is polled again.

use std::cell::RefCell;
use std::collections::HashMap;
use std::future::{poll_fn, Future};
use std::rc::Rc;
use std::task::Poll;

use crate::hvc::HybridVectorClock;
use crate::simnet::Time;

use super::{
    ClientId, Consistency, KvError, PutOutcome, QuorumConfig, RoundWait, ServerId, Value, Version, VersionedValue,
};

/// Bounded retries of a sequential-mode write rejected by the coordinator.
const MAX_COORDINATOR_RETRIES: u32 = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Get { key: String },
    GetVersion { key: String },
    Put { key: String, version: Version, value: Value, conditional: bool },
}

impl Request {
    pub fn key(&self) -> &str {
        match self {
            Request::Get { key } | Request::GetVersion { key } | Request::Put { key, .. } => key,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Value(VersionedValue),
    Ack(PutOutcome),
}

#[derive(Clone, Debug)]
pub struct Outgoing {
    pub server: ServerId,
    pub req_id: u64,
    pub request: Request,
    pub hvc: HybridVectorClock,
}

/// A monitor's violation notice as seen by a client.
#[derive(Clone, Debug, PartialEq)]
pub struct Notice {
    pub predicate: String,
    pub received: Time,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub gets: u64,
    pub puts: u64,
    pub get_failed: u64,
    pub put_failed: u64,
    pub coordinator_retries: u64,
}

pub struct ClientCtx {
    pub id: ClientId,
    /// Index of this client's entry in HVCs.
    pub hvc_slot: usize,
    pub region: usize,
    pub now: Time,
    pub hvc: HybridVectorClock,
    pub quorum: QuorumConfig,
    pub stats: ClientStats,
    /// Completion times of application-level GETs and PUTs.
    pub completed_ops: Vec<Time>,
    pub notices: Vec<Notice>,
    outbox: Vec<Outgoing>,
    timers: Vec<Time>,
    replies: HashMap<u64, Vec<(ServerId, Reply)>>,
    next_req: u64,
    last_pt: Time,
}

impl ClientCtx {
    pub fn new(id: ClientId, region: usize, hvc: HybridVectorClock, quorum: QuorumConfig) -> Self {
        Self {
            id,
            hvc_slot: hvc.owner(),
            region,
            now: 0,
            hvc,
            quorum,
            stats: ClientStats::default(),
            completed_ops: Vec::new(),
            notices: Vec::new(),
            outbox: Vec::new(),
            timers: Vec::new(),
            replies: HashMap::new(),
            next_req: 0,
            last_pt: 0,
        }
    }

    /// Strictly increasing physical time for the next local event.
    pub fn tick(&mut self) -> Time {
        self.last_pt = self.now.max(self.last_pt + 1);
        self.last_pt
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_timers(&mut self) -> Vec<Time> {
        std::mem::take(&mut self.timers)
    }

    /// Records a reply; replies to finished requests are dropped.
    pub fn deposit(&mut self, req_id: u64, server: ServerId, reply: Reply, hvc: &HybridVectorClock) {
        let pt = self.tick();
        self.hvc = self.hvc.merge_receive(hvc, pt).expect("client clock is monotone");
        if let Some(slot) = self.replies.get_mut(&req_id) {
            if !slot.iter().any(|(s, _)| *s == server) {
                slot.push((server, reply));
            }
        }
    }

    fn send(&mut self, server: ServerId, req_id: u64, request: Request) {
        let pt = self.tick();
        self.hvc = self.hvc.advance_send(pt).expect("client clock is monotone");
        self.outbox.push(Outgoing { server, req_id, request, hvc: self.hvc.clone() });
    }

    fn open(&mut self) -> u64 {
        self.next_req += 1;
        self.replies.insert(self.next_req, Vec::new());
        self.next_req
    }
}

/// Cheap handle shared between the event loop and the client's task.
#[derive(Clone)]
pub struct Client(Rc<RefCell<ClientCtx>>);

impl Client {
    pub fn new(ctx: ClientCtx) -> Self {
        Self(Rc::new(RefCell::new(ctx)))
    }

    pub fn ctx(&self) -> std::cell::RefMut<'_, ClientCtx> {
        self.0.borrow_mut()
    }

    pub fn id(&self) -> ClientId {
        self.0.borrow().id
    }

    pub fn now(&self) -> Time {
        self.0.borrow().now
    }

    pub fn quorum(&self) -> QuorumConfig {
        self.0.borrow().quorum
    }

    pub fn set_quorum(&self, q: QuorumConfig) {
        self.0.borrow_mut().quorum = q;
    }

    /// Resolves once `f` returns `Some`. Re-checked whenever the client is
    /// polled.
    pub fn until<'a, T>(&'a self, mut f: impl FnMut(&mut ClientCtx) -> Option<T> + 'a) -> impl Future<Output = T> + 'a {
        poll_fn(move |_| match f(&mut self.0.borrow_mut()) {
            Some(t) => Poll::Ready(t),
            None => Poll::Pending,
        })
    }

    pub async fn sleep(&self, d: Time) {
        let deadline = {
            let mut c = self.ctx();
            let t = c.now + d;
            c.timers.push(t);
            t
        };
        self.until(|c| (c.now >= deadline).then_some(())).await
    }

    /// Sends `request` to `targets` and waits per the configured round
    /// policy; a second round goes to every target that has not answered.
    async fn rounds(&self, targets: &[ServerId], request: Request, need: usize) -> Vec<(ServerId, Reply)> {
        let (req, timeout, wait) = {
            let mut c = self.ctx();
            let req = c.open();
            for &s in targets {
                c.send(s, req, request.clone());
            }
            (req, c.quorum.timeout, c.quorum.wait)
        };
        for round in 0..2 {
            let deadline = {
                let mut c = self.ctx();
                if round == 1 {
                    let answered: Vec<ServerId> = c.replies[&req].iter().map(|(s, _)| *s).collect();
                    for &s in targets.iter().filter(|s| !answered.contains(s)) {
                        c.send(s, req, request.clone());
                    }
                }
                let t = c.now + timeout;
                c.timers.push(t);
                t
            };
            self.until(|c| {
                let got = c.replies[&req].len();
                let done = match wait {
                    RoundWait::Quorum => got >= need,
                    RoundWait::AllOrTimeout => got == targets.len(),
                };
                (done || got == targets.len() || c.now >= deadline).then_some(())
            })
            .await;
            if self.ctx().replies[&req].len() >= need {
                break;
            }
        }
        self.ctx().replies.remove(&req).unwrap_or_default()
    }

    async fn read_quorum(&self, request: Request) -> Result<VersionedValue, KvError> {
        let q = self.quorum();
        let all: Vec<ServerId> = (0..q.n).collect();
        let replies = self.rounds(&all, request, q.r).await;
        if replies.len() < q.r {
            return Err(KvError::GetFailed { got: replies.len(), needed: q.r });
        }
        let mut merged = VersionedValue::new();
        for (_, r) in &replies {
            if let Reply::Value(v) = r {
                merged.absorb(v);
            }
        }
        Ok(merged)
    }

    /// Every non-dominated version returned by at least R replicas' union.
    pub async fn get(&self, key: &str) -> Result<VersionedValue, KvError> {
        let out = self.read_quorum(Request::Get { key: key.to_string() }).await;
        let mut c = self.ctx();
        match out {
            Ok(_) => {
                c.stats.gets += 1;
                let t = c.now;
                c.completed_ops.push(t);
            }
            Err(_) => c.stats.get_failed += 1,
        }
        out
    }

    /// Version set of `key`, read with R semantics. Values are dropped.
    pub async fn get_version(&self, key: &str) -> Result<Vec<Version>, KvError> {
        let vv = self.read_quorum(Request::GetVersion { key: key.to_string() }).await?;
        Ok(vv.versions().cloned().collect())
    }

    pub async fn put(&self, key: &str, value: Value) -> Result<(), KvError> {
        let out = self.put_inner(key, value).await;
        let mut c = self.ctx();
        match out {
            Ok(()) => {
                c.stats.puts += 1;
                let t = c.now;
                c.completed_ops.push(t);
            }
            Err(_) => c.stats.put_failed += 1,
        }
        out
    }

    async fn put_inner(&self, key: &str, value: Value) -> Result<(), KvError> {
        let q = self.quorum();
        let id = self.id();
        if q.consistency() == Consistency::Eventual {
            let versions = self.get_version(key).await?;
            let version = merge_all(&versions).incremented(id);
            let all: Vec<ServerId> = (0..q.n).collect();
            let req = Request::Put { key: key.to_string(), version, value, conditional: false };
            let acks = count_acks(&self.rounds(&all, req, q.w).await);
            return if acks >= q.w { Ok(()) } else { Err(KvError::PutFailed { got: acks, needed: q.w }) };
        }

        // Sequential mode: the key's coordinator orders writes, so replicas
        // never hold concurrent versions.
        let coord = coordinator(key, q.n);
        let mut attempt = 0;
        let version = loop {
            let versions = self.get_version(key).await?;
            let version = merge_all(&versions).incremented(id);
            let req = Request::Put {
                key: key.to_string(),
                version: version.clone(),
                value: value.clone(),
                conditional: true,
            };
            match self.rounds(&[coord], req, 1).await.first() {
                Some((_, Reply::Ack(PutOutcome::Applied))) => break version,
                Some((_, Reply::Ack(PutOutcome::Obsolete))) if attempt < MAX_COORDINATOR_RETRIES => {
                    attempt += 1;
                    self.ctx().stats.coordinator_retries += 1;
                }
                _ => return Err(KvError::PutFailed { got: 0, needed: q.w }),
            }
        };
        if q.w <= 1 {
            return Ok(());
        }
        let rest: Vec<ServerId> = (0..q.n).filter(|&s| s != coord).collect();
        let req = Request::Put { key: key.to_string(), version, value, conditional: false };
        let acks = 1 + count_acks(&self.rounds(&rest, req, q.w - 1).await);
        if acks >= q.w {
            Ok(())
        } else {
            Err(KvError::PutFailed { got: acks, needed: q.w })
        }
    }
}

fn merge_all(versions: &[Version]) -> Version {
    versions.iter().fold(Version::new(), |acc, v| acc.merge(v))
}

fn count_acks(replies: &[(ServerId, Reply)]) -> usize {
    replies.iter().filter(|(_, r)| matches!(r, Reply::Ack(PutOutcome::Applied | PutOutcome::Stale))).count()
}

/// Replica that orders writes to `key` in sequential mode.
pub fn coordinator(key: &str, n: usize) -> ServerId {
    (crate::predicates::stable_hash(key) % n as u64) as ServerId
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvc::Epsilon;
    use std::pin::pin;
    use std::task::{Context, Waker};

    fn client(cfg: QuorumConfig) -> Client {
        let hvc = HybridVectorClock::new(3, 4, Epsilon::Infinite).unwrap();
        Client::new(ClientCtx::new(0, 0, hvc, cfg))
    }

    fn poll<F: Future>(f: std::pin::Pin<&mut F>) -> Poll<F::Output> {
        f.poll(&mut Context::from_waker(Waker::noop()))
    }

    fn reply(c: &Client, out: &Outgoing, r: Reply) {
        let hvc = HybridVectorClock::new(out.server, 4, Epsilon::Infinite).unwrap();
        c.ctx().deposit(out.req_id, out.server, r, &hvc);
    }

    #[test]
    fn get_returns_after_r_replies() {
        let c = client(QuorumConfig::new(3, 2, 2).unwrap());
        let mut fut = pin!(c.get("k"));
        assert!(poll(fut.as_mut()).is_pending());
        let out = c.ctx().take_outbox();
        assert_eq!(out.len(), 3);
        let v1 = VersionedValue::single(Version::from_pairs([(1, 1)]), b"a".to_vec());
        let v2 = VersionedValue::single(Version::from_pairs([(2, 1)]), b"b".to_vec());
        reply(&c, &out[0], Reply::Value(v1));
        assert!(poll(fut.as_mut()).is_pending());
        reply(&c, &out[1], Reply::Value(v2));
        match poll(fut.as_mut()) {
            Poll::Ready(Ok(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn get_fails_after_two_silent_rounds() {
        let c = client(QuorumConfig::new(3, 1, 1).unwrap());
        let mut fut = pin!(c.get("k"));
        assert!(poll(fut.as_mut()).is_pending());
        assert_eq!(c.ctx().take_outbox().len(), 3);
        let t = c.ctx().take_timers()[0];
        c.ctx().now = t;
        assert!(poll(fut.as_mut()).is_pending());
        assert_eq!(c.ctx().take_outbox().len(), 3, "second round resends");
        let t = c.ctx().take_timers()[0];
        c.ctx().now = t;
        assert!(matches!(poll(fut.as_mut()), Poll::Ready(Err(KvError::GetFailed { got: 0, needed: 1 }))));
        assert_eq!(c.ctx().stats.get_failed, 1);
    }

    #[test]
    fn all_or_timeout_waits_for_every_replica() {
        let mut cfg = QuorumConfig::new(3, 1, 1).unwrap();
        cfg.wait = RoundWait::AllOrTimeout;
        let c = client(cfg);
        let mut fut = pin!(c.get("k"));
        assert!(poll(fut.as_mut()).is_pending());
        let out = c.ctx().take_outbox();
        reply(&c, &out[0], Reply::Value(VersionedValue::new()));
        assert!(poll(fut.as_mut()).is_pending());
        reply(&c, &out[1], Reply::Value(VersionedValue::new()));
        reply(&c, &out[2], Reply::Value(VersionedValue::new()));
        assert!(matches!(poll(fut.as_mut()), Poll::Ready(Ok(_))));
    }

    #[test]
    fn eventual_put_increments_own_slot() {
        let c = client(QuorumConfig::new(3, 1, 1).unwrap());
        let mut fut = pin!(c.put("k", b"x".to_vec()));
        assert!(poll(fut.as_mut()).is_pending());
        let gv = c.ctx().take_outbox();
        let stored = VersionedValue::single(Version::from_pairs([(5, 2)]), b"old".to_vec());
        reply(&c, &gv[0], Reply::Value(stored));
        assert!(poll(fut.as_mut()).is_pending());
        let puts = c.ctx().take_outbox();
        assert_eq!(puts.len(), 3);
        match &puts[0].request {
            Request::Put { version, conditional, .. } => {
                assert_eq!(version, &Version::from_pairs([(5, 2), (0, 1)]));
                assert!(!conditional);
            }
            other => panic!("{other:?}"),
        }
        reply(&c, &puts[2], Reply::Ack(PutOutcome::Applied));
        assert!(matches!(poll(fut.as_mut()), Poll::Ready(Ok(()))));
    }

    #[test]
    fn sequential_put_goes_through_coordinator_first() {
        let c = client(QuorumConfig::new(3, 1, 3).unwrap());
        let coord = coordinator("k", 3);
        let mut fut = pin!(c.put("k", b"x".to_vec()));
        assert!(poll(fut.as_mut()).is_pending());
        let gv = c.ctx().take_outbox();
        reply(&c, &gv[0], Reply::Value(VersionedValue::new()));
        assert!(poll(fut.as_mut()).is_pending());
        let first = c.ctx().take_outbox();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].server, coord);
        reply(&c, &first[0], Reply::Ack(PutOutcome::Obsolete));
        assert!(poll(fut.as_mut()).is_pending());
        // Rejected: a fresh GET_VERSION round.
        let gv = c.ctx().take_outbox();
        assert!(gv.iter().all(|o| matches!(o.request, Request::GetVersion { .. })));
        reply(&c, &gv[0], Reply::Value(VersionedValue::new()));
        assert!(poll(fut.as_mut()).is_pending());
        let first = c.ctx().take_outbox();
        reply(&c, &first[0], Reply::Ack(PutOutcome::Applied));
        assert!(poll(fut.as_mut()).is_pending());
        let rest = c.ctx().take_outbox();
        assert_eq!(rest.len(), 2);
        assert!(rest.iter().all(|o| o.server != coord));
        for o in &rest {
            reply(&c, o, Reply::Ack(PutOutcome::Applied));
        }
        assert!(matches!(poll(fut.as_mut()), Poll::Ready(Ok(()))));
        assert_eq!(c.ctx().stats.coordinator_retries, 1);
    }
}
