//! Deterministic discrete-event simulation of a cluster, its clients and a
//! model owner, driving the same [`Replica`] state machine the daemon runs.
//!
//! Links are FIFO with uniform latency; every random choice comes from one
//! seeded generator consumed in event order, so equal seeds replay the same
//! run byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use quorate_core::agreement::{Action, Behavior, Input, Replica, ReplicaConfig};
use quorate_core::client::{ClientRequest, ClientSession, Endpoints, Outcome, ProxyReply, SessionStep};
use quorate_core::codec::Encode;
use quorate_core::crypto::{hash, KeyPair, PublicKey};
use quorate_core::distance::DistanceDescriptor;
use quorate_core::domain::{
    ClusterConfig, GroupUpdate, InferenceRequest, ModelDescriptor, NodeIndex, Op, OpOutcome,
    SignedUpdate,
};
use quorate_core::inference::{
    ExecError, ExecutionBatch, LinearToyModel, ModelExecutor, ModelStore, Offset, Perturbed,
};
use quorate_core::messages::{PeerMsg, Seq, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::config::{ConfigError, Fault, FaultPlan, Scenario, SimConfig, WorkloadSpec};
use crate::trace_log::{OutcomeKind, Party, TraceLog, TraceRecord};

/// What a client session was for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionKind {
    Define { group: usize },
    Activate { group: usize },
    Request { group: usize },
}

#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub session: u64,
    pub kind: SessionKind,
    pub op: Op,
    pub submitted: Duration,
    pub finished: Option<Duration>,
    pub outcome: Option<Outcome>,
}

impl ClientRecord {
    pub fn latency(&self) -> Option<Duration> {
        Some(self.finished? - self.submitted)
    }

    pub fn is_request(&self) -> bool {
        matches!(self.kind, SessionKind::Request { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deadlock {
    pub at: Duration,
    /// Client sessions still waiting.
    pub outstanding: usize,
    /// The event queue ran dry; otherwise nothing progressed for too long.
    pub queue_empty: bool,
}

/// Everything a run produced, for oracles and reports.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: SimConfig,
    pub faults: FaultPlan,
    pub n: usize,
    pub f: usize,
    pub keys: Vec<PublicKey>,
    pub trace: TraceLog,
    pub clients: Vec<ClientRecord>,
    /// When setup finished and the request workload began.
    pub workload_start: Option<Duration>,
    pub end: Duration,
    pub deadlock: Option<Deadlock>,
    pub final_views: Vec<View>,
    pub last_ordered: Vec<Seq>,
    pub messages: u64,
}

impl ScenarioRun {
    pub fn requests(&self) -> impl Iterator<Item = &ClientRecord> {
        self.clients.iter().filter(|c| c.is_request())
    }

    /// Requests answered with a verified certificate (success or failure).
    pub fn certified(&self) -> usize {
        self.requests()
            .filter(|c| c.outcome.as_ref().is_some_and(Outcome::is_certified))
            .count()
    }

    pub fn all_requests_certified(&self) -> bool {
        self.requests().count() > 0 && self.certified() == self.requests().count()
    }

    /// Certified requests per simulated second of workload.
    pub fn throughput(&self) -> f64 {
        let Some(start) = self.workload_start else {
            return 0.0;
        };
        let last = self
            .requests()
            .filter(|c| c.outcome.as_ref().is_some_and(Outcome::is_certified))
            .filter_map(|c| c.finished)
            .max();
        match last {
            Some(t) if t > start => self.certified() as f64 / (t - start).as_secs_f64(),
            _ => 0.0,
        }
    }
}

enum Event {
    Peer {
        to: NodeIndex,
        from: NodeIndex,
        msg: PeerMsg,
    },
    ToProxy {
        node: NodeIndex,
        session: u64,
        req: ClientRequest,
    },
    ToClient {
        session: u64,
        from: NodeIndex,
        reply: ProxyReply,
    },
    Tick {
        node: NodeIndex,
    },
    ExecDone {
        node: NodeIndex,
        batch: ExecutionBatch,
        outputs: Result<Vec<Vec<f64>>, ExecError>,
    },
    ClientTimeout {
        session: u64,
        deadline: Duration,
    },
    Arrival,
}

struct GroupState {
    /// Versions defined so far.
    versions: u64,
    busy: bool,
}

struct Sim {
    cfg: SimConfig,
    faults: FaultPlan,
    n: usize,
    f: usize,
    keys: Vec<PublicKey>,
    endpoints: Endpoints,
    replicas: Vec<Replica>,
    wake: Vec<Option<Duration>>,
    store: ModelStore,
    rng: ChaCha8Rng,
    queue: BTreeMap<(Duration, u64), Event>,
    next_event: u64,
    links: BTreeMap<(Party, Party), Duration>,
    trace: TraceLog,
    messages: u64,
    // Workload.
    workload: WorkloadSpec,
    wl_rng: ChaCha8Rng,
    owner: KeyPair,
    owner_nonce: u64,
    client_keys: Vec<KeyPair>,
    client_nonces: Vec<u64>,
    groups: Vec<GroupState>,
    sessions: BTreeMap<u64, ClientSession>,
    records: Vec<ClientRecord>,
    issued: usize,
    workload_start: Option<Duration>,
    last_progress: Duration,
}

/// Runs one scenario to completion, deadlock or the time limit.
pub fn run_scenario(
    config: &SimConfig,
    faults: &FaultPlan,
    workload: &WorkloadSpec,
    duration: Duration,
) -> Result<ScenarioRun, ConfigError> {
    let scenario = Scenario {
        config: config.clone(),
        faults: faults.clone(),
        workload: workload.clone(),
        duration_ms: duration.as_millis() as u64,
    };
    scenario.validate()?;
    let mut sim = Sim::new(config, faults, workload)?;
    Ok(sim.run(duration))
}

pub fn run(scenario: &Scenario) -> Result<ScenarioRun, ConfigError> {
    run_scenario(
        &scenario.config,
        &scenario.faults,
        &scenario.workload,
        scenario.duration(),
    )
}

fn node_key(seed: u64, i: usize) -> KeyPair {
    KeyPair::from_label(&format!("sim-node-{seed}-{i}"))
}

impl Sim {
    fn new(cfg: &SimConfig, faults: &FaultPlan, workload: &WorkloadSpec) -> Result<Self, ConfigError> {
        let n = cfg.nodes;
        let pairs: Vec<KeyPair> = (0..n).map(|i| node_key(cfg.seed, i)).collect();
        let members = pairs
            .iter()
            .enumerate()
            .map(|(i, k)| (k.public_key().clone(), format!("sim://{i}")))
            .collect();
        let mut cluster = ClusterConfig::new(members, cfg.f(), cfg.view_timeout())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cluster.exec_batch_max = cfg.exec_batch_max;
        cluster.agree_batch_max = cfg.agree_batch_max;
        cluster.agree_pipeline = cfg.agree_pipeline;
        cluster.checkpoint_interval = cfg.checkpoint_interval;
        cluster.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let keys = cluster.keys();
        let store = ModelStore::new();
        let mut replicas = Vec::with_capacity(n);
        for index in 0..n as NodeIndex {
            let key = pairs
                .iter()
                .find(|k| *k.public_key() == keys[index as usize])
                .expect("member key")
                .clone();
            let fault = faults.fault_of(index);
            let mut rc = ReplicaConfig::new(cluster.clone(), index, key);
            rc.strategy = cfg.strategy.into();
            rc.behavior = Behavior {
                mute_primary: fault == Fault::MutePrimary,
                equivocate: fault == Fault::Equivocate,
                stale_version_primary: fault == Fault::StaleVersionPrimary,
                proxy_discard: fault == Fault::ProxyDiscard,
            };
            let noise = cfg.noise;
            let noise_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(u64::from(index));
            let offset = match fault {
                Fault::CorruptResult { magnitude } => Some(magnitude * cfg.epsilon),
                _ => None,
            };
            let node_store = store.with_wrapper(Arc::new(move |inner: Arc<dyn ModelExecutor>| {
                let perturbed: Arc<dyn ModelExecutor> = Arc::new(Perturbed {
                    inner,
                    seed: noise_seed,
                    magnitude: noise,
                });
                match offset {
                    Some(o) => Arc::new(Offset {
                        inner: perturbed,
                        offset: vec![o],
                    }),
                    None => perturbed,
                }
            }));
            let replica = Replica::new(rc, node_store).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            replicas.push(replica);
        }
        let client_keys = (0..workload.clients)
            .map(|c| KeyPair::from_label(&format!("sim-client-{}-{c}", workload.seed)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            faults: faults.clone(),
            n,
            f: cfg.f() as usize,
            endpoints: Endpoints::from_cluster(&cluster),
            keys,
            replicas,
            wake: vec![None; n],
            store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            queue: BTreeMap::new(),
            next_event: 0,
            links: BTreeMap::new(),
            trace: TraceLog::default(),
            messages: 0,
            workload: workload.clone(),
            wl_rng: ChaCha8Rng::seed_from_u64(workload.seed ^ 0x5eed_0000_0000),
            owner: KeyPair::from_label("sim-owner"),
            owner_nonce: 0,
            client_keys,
            client_nonces: vec![0; workload.clients],
            groups: (0..workload.groups)
                .map(|_| GroupState {
                    versions: 0,
                    busy: false,
                })
                .collect(),
            sessions: BTreeMap::new(),
            records: Vec::new(),
            issued: 0,
            workload_start: None,
            last_progress: Duration::ZERO,
        })
    }

    fn push(&mut self, at: Duration, ev: Event) {
        self.next_event += 1;
        self.queue.insert((at, self.next_event), ev);
    }

    fn latency(&mut self, from: Party, to: Party, now: Duration) -> Duration {
        let lo = (self.cfg.latency_min_ms * 1000.0) as u64;
        let hi = (self.cfg.latency_max_ms * 1000.0) as u64;
        let d = Duration::from_micros(self.rng.gen_range(lo..=hi));
        let last = self.links.entry((from, to)).or_insert(Duration::ZERO);
        let at = (now + d).max(*last);
        *last = at;
        at
    }

    fn send_peer(&mut self, now: Duration, from: NodeIndex, to: NodeIndex, mut msg: PeerMsg) {
        let fault = self.faults.fault_of(from);
        let dropped = match fault {
            Fault::DropFraction { p } => self.rng.gen::<f64>() < p,
            _ => false,
        };
        if fault == Fault::BadSignature {
            msg.corrupt_signatures();
        }
        self.messages += 1;
        if self.cfg.trace_sends {
            self.trace.push(TraceRecord::Send {
                at: now,
                from: Party::Node(from),
                to: Party::Node(to),
                kind: msg.kind().to_string(),
                digest: hash(&msg.to_canonical()),
                dropped,
            });
        }
        if !dropped {
            let at = self.latency(Party::Node(from), Party::Node(to), now);
            self.push(at, Event::Peer { to, from, msg });
        }
    }

    fn apply(&mut self, node: NodeIndex, actions: Vec<Action>, now: Duration) {
        for a in actions {
            match a {
                Action::Send { to, msg } => self.send_peer(now, node, to, msg),
                Action::Broadcast(msg) => {
                    for to in 0..self.n as NodeIndex {
                        if to != node {
                            self.send_peer(now, node, to, msg.clone());
                        }
                    }
                }
                Action::Execute(batch) => {
                    let outputs = batch.run();
                    let done = now + self.cfg.exec_cost(batch.len());
                    self.push(done, Event::ExecDone { node, batch, outputs });
                }
                Action::WakeAt(t) => {
                    self.wake[node as usize] = Some(t);
                    self.push(t.max(now), Event::Tick { node });
                }
                Action::Reply { client, reply } => {
                    if self.cfg.trace_sends {
                        self.trace.push(TraceRecord::Send {
                            at: now,
                            from: Party::Node(node),
                            to: Party::Client(client),
                            kind: "reply".into(),
                            digest: hash(&reply.to_canonical()),
                            dropped: false,
                        });
                    }
                    let at = self.latency(Party::Node(node), Party::Client(client), now);
                    self.push(
                        at,
                        Event::ToClient {
                            session: client,
                            from: node,
                            reply,
                        },
                    );
                }
                Action::Trace(event) => {
                    if matches!(event, quorate_core::trace::TraceEvent::Ordered { .. }) {
                        self.last_progress = now;
                    }
                    self.trace.push(TraceRecord::Node { at: now, event });
                }
            }
        }
    }

    fn deliver(&mut self, node: NodeIndex, input: Input, now: Duration) {
        let actions = self.replicas[node as usize].handle(input, now);
        self.apply(node, actions, now);
    }

    // ---- clients and workload ----

    fn model_descriptors(&mut self, group: usize, version: u64) -> Vec<ModelDescriptor> {
        let dim = self.cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.workload.seed ^ ((group as u64) << 32) ^ version.wrapping_mul(0x9e37_79b9),
        );
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let bias = (0..dim).map(|_| rng.gen_range(-0.5..0.5) + version as f64).collect();
        let model = LinearToyModel::new(dim, dim, weights, bias, false).expect("square model");
        (0..self.n)
            .map(|k| self.store.insert_model(&format!("g{group}-v{version}-m{k}"), &model))
            .collect()
    }

    fn group_name(group: usize) -> String {
        format!("group-{group}")
    }

    fn start_session(&mut self, kind: SessionKind, op: Op, now: Duration) {
        let session = self.records.len() as u64;
        let first = (session % self.n as u64) as NodeIndex;
        let mut s = ClientSession::new(op.clone(), &self.endpoints, first, self.cfg.client_retry());
        let step = s.start(now);
        self.sessions.insert(session, s);
        self.records.push(ClientRecord {
            session,
            kind,
            op,
            submitted: now,
            finished: None,
            outcome: None,
        });
        self.client_step(session, step, now);
    }

    fn owner_update(&mut self, group: usize, update: GroupUpdate, kind: SessionKind, now: Duration) {
        self.owner_nonce += 1;
        let op = Op::Update(SignedUpdate::new(&self.owner, self.owner_nonce, update));
        self.groups[group].busy = true;
        self.start_session(kind, op, now);
    }

    fn define(&mut self, group: usize, now: Duration) {
        let version = self.groups[group].versions + 1;
        let models = self.model_descriptors(group, version);
        let metric = self.cfg.metric().expect("validated");
        let update = GroupUpdate::Define {
            group_id: Self::group_name(group),
            models,
            distance: DistanceDescriptor::new(metric, self.cfg.epsilon).expect("validated"),
        };
        self.owner_update(group, update, SessionKind::Define { group }, now);
    }

    fn request(&mut self, now: Duration) {
        let client = self.wl_rng.gen_range(0..self.client_keys.len());
        let group = self.wl_rng.gen_range(0..self.groups.len());
        let input = (0..self.cfg.dim).map(|_| self.wl_rng.gen_range(-1.0..1.0)).collect();
        self.client_nonces[client] += 1;
        let req = InferenceRequest::new(
            &self.client_keys[client],
            self.client_nonces[client],
            Self::group_name(group),
            input,
            self.workload.epsilon_override,
        );
        self.start_session(SessionKind::Request { group }, Op::Request(req), now);
    }

    fn on_arrival(&mut self, now: Duration) {
        let update = self.wl_rng.gen::<f64>() < self.workload.update_fraction;
        let group = self.wl_rng.gen_range(0..self.groups.len());
        if update && !self.groups[group].busy {
            self.define(group, now);
        } else {
            self.request(now);
            self.issued += 1;
        }
        if self.issued < self.workload.requests {
            let gap = Exp::new(self.workload.rate_per_sec).expect("positive rate").sample(&mut self.wl_rng);
            self.push(now + Duration::from_secs_f64(gap), Event::Arrival);
        }
    }

    fn client_step(&mut self, session: u64, step: SessionStep, now: Duration) {
        match step {
            SessionStep::Send(msgs) => {
                if msgs.is_empty() {
                    return;
                }
                for (node, req) in msgs {
                    let at = self.latency(Party::Client(session), Party::Node(node), now);
                    self.push(at, Event::ToProxy { node, session, req });
                }
                if let Some(deadline) = self.sessions.get(&session).and_then(ClientSession::deadline) {
                    self.push(deadline, Event::ClientTimeout { session, deadline });
                }
            }
            SessionStep::Done(outcome) => self.finish(session, outcome, now),
        }
    }

    fn finish(&mut self, session: u64, outcome: Outcome, now: Duration) {
        self.sessions.remove(&session);
        self.last_progress = now;
        let kind = match &outcome {
            Outcome::Certified { .. } => OutcomeKind::Certified,
            Outcome::Failed { .. } => OutcomeKind::FailureCertified,
            Outcome::Rejected(_) => OutcomeKind::Rejected,
            Outcome::Update { .. } => OutcomeKind::Update,
            Outcome::GaveUp => OutcomeKind::GaveUp,
        };
        let rec = &mut self.records[session as usize];
        rec.finished = Some(now);
        rec.outcome = Some(outcome.clone());
        let key = rec.op.key();
        let what = rec.kind.clone();
        self.trace.push(TraceRecord::Client {
            at: now,
            session,
            key,
            outcome: kind,
        });
        match what {
            SessionKind::Define { group } => match outcome {
                Outcome::Update {
                    outcome: OpOutcome::Applied { version },
                    ..
                } => {
                    self.groups[group].versions = version;
                    self.owner_update(
                        group,
                        GroupUpdate::Activate {
                            group_id: Self::group_name(group),
                        },
                        SessionKind::Activate { group },
                        now,
                    );
                }
                _ => {
                    self.groups[group].busy = false;
                    self.maybe_start_workload(now);
                }
            },
            SessionKind::Activate { group } => {
                self.groups[group].busy = false;
                self.maybe_start_workload(now);
            }
            SessionKind::Request { .. } => {}
        }
    }

    fn maybe_start_workload(&mut self, now: Duration) {
        if self.workload_start.is_none() && self.groups.iter().all(|g| !g.busy) {
            self.workload_start = Some(now);
            if self.workload.requests > 0 {
                self.push(now, Event::Arrival);
            }
        }
    }

    fn outstanding(&self) -> usize {
        self.sessions.len()
    }

    fn finished(&self) -> bool {
        self.workload_start.is_some() && self.issued >= self.workload.requests && self.sessions.is_empty()
    }

    fn stall_limit(&self) -> Duration {
        // View-change timeouts back off up to 32 view timeouts.
        self.cfg.view_timeout() * 80
    }

    fn run(&mut self, duration: Duration) -> ScenarioRun {
        for g in 0..self.groups.len() {
            self.define(g, Duration::ZERO);
        }
        let mut deadlock = None;
        let mut now = Duration::ZERO;
        loop {
            if self.finished() {
                break;
            }
            let Some(((at, _), ev)) = self.queue.pop_first() else {
                if self.outstanding() == 0 {
                    break;
                }
                deadlock = Some(Deadlock {
                    at: now,
                    outstanding: self.outstanding(),
                    queue_empty: true,
                });
                break;
            };
            if at > duration {
                now = duration;
                break;
            }
            now = at;
            if self.outstanding() > 0 && now > self.last_progress + self.stall_limit() {
                deadlock = Some(Deadlock {
                    at: now,
                    outstanding: self.outstanding(),
                    queue_empty: false,
                });
                break;
            }
            match ev {
                Event::Peer { to, from, msg } => self.deliver(to, Input::Peer { from, msg }, now),
                Event::ToProxy { node, session, req } => self.deliver(
                    node,
                    Input::Client {
                        client: session,
                        msg: req,
                    },
                    now,
                ),
                Event::ToClient { session, from, reply } => {
                    if let Some(s) = self.sessions.get_mut(&session) {
                        let step = s.on_reply(from, reply, now);
                        self.client_step(session, step, now);
                    }
                }
                Event::Tick { node } => {
                    if self.wake[node as usize] == Some(at) {
                        self.wake[node as usize] = None;
                        self.deliver(node, Input::Tick, now);
                    }
                }
                Event::ExecDone { node, batch, outputs } => {
                    self.deliver(node, Input::BatchDone { batch, outputs }, now)
                }
                Event::ClientTimeout { session, deadline } => {
                    if let Some(s) = self.sessions.get_mut(&session) {
                        if s.deadline() == Some(deadline) {
                            let step = s.on_timeout(now);
                            self.client_step(session, step, now);
                        }
                    }
                }
                Event::Arrival => self.on_arrival(now),
            }
        }
        if let Some(d) = deadlock {
            self.trace.push(TraceRecord::Deadlock {
                at: d.at,
                outstanding: d.outstanding as u64,
            });
        }
        ScenarioRun {
            config: self.cfg.clone(),
            faults: self.faults.clone(),
            n: self.n,
            f: self.f,
            keys: self.keys.clone(),
            trace: std::mem::take(&mut self.trace),
            clients: std::mem::take(&mut self.records),
            workload_start: self.workload_start,
            end: now,
            deadlock,
            final_views: self.replicas.iter().map(Replica::view).collect(),
            last_ordered: self.replicas.iter().map(Replica::last_ordered).collect(),
            messages: self.messages,
        }
    }
}

/// Node indices in a set, for reports.
pub fn honest_nodes(run: &ScenarioRun) -> BTreeSet<NodeIndex> {
    (0..run.n as NodeIndex).filter(|i| run.faults.is_honest(*i)).collect()
}
