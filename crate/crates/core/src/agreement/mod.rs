//! Per-node agreement coordinator.
//!
//! A [`Replica`] bundles the coordinator, the node's inference engine and
//! its proxy into one deterministic state machine. The caller feeds it
//! [`Input`]s stamped with the current time and carries out the returned
//! [`Action`]s; the simulator and the TCP daemon run the same code.
//!
//! Batches are ordered PBFT-style. The primary's PRE-PREPARE carries the op
//! list and its result tree `R`; each backup answers with a PREPARE carrying
//! its own `R`. Once `N - f` result trees are in, a node runs quorum
//! selection per request, attests the selected results in its tree `A` and
//! sends a COMMIT. A batch is ordered at `N - f` matching COMMITs.

mod checkpoint;
mod ordering;
mod primary;
mod view_change;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::certificate::{NodeCommit, NodeTree};
use crate::client::{ClientRequest, ProxyReply};
use crate::crypto::{Hash32, KeyPair, PublicKey};
use crate::domain::{
    primary_index, ClusterConfig, GroupRegistry, NodeIndex, Op, OpPlan, RequestKey,
};
use crate::inference::{Engine, EngineConfig, ExecError, ExecutionBatch, ModelStore};
use crate::messages::{
    Checkpoint, CheckpointCert, PeerMsg, PrePrepareBundle, PreparedProof, Prepare, ResultLeaf,
    Seq, View, ViewChange,
};
use crate::proxy::ProxyState;
use crate::trace::TraceEvent;

pub type ClientId = u64;

/// How execution is placed relative to agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Execute on arrival, agree on the order, then attest results.
    ExecuteAgreeAttest,
    /// Agree on the order first, then execute.
    AgreeExecute,
}

/// Byzantine behaviors a node can be told to exhibit. All off for an
/// honest node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Behavior {
    /// Never propose while primary.
    pub mute_primary: bool,
    /// As primary, send different batches to different backups.
    pub equivocate: bool,
    /// As primary, report results of the previous group version.
    pub stale_version_primary: bool,
    /// As proxy, silently drop client requests.
    pub proxy_discard: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub cluster: ClusterConfig,
    pub index: NodeIndex,
    pub key: KeyPair,
    pub strategy: Strategy,
    pub flush_interval: Duration,
    /// Nodes sharing each group's models.
    pub owner_nodes: usize,
    /// How long to wait for more result trees before attesting with what is
    /// there, and for an unresolved COMMIT before counting it anyway.
    pub collect_grace: Duration,
    pub behavior: Behavior,
}

impl ReplicaConfig {
    pub fn new(cluster: ClusterConfig, index: NodeIndex, key: KeyPair) -> Self {
        let owner_nodes = cluster.n();
        let collect_grace = cluster.view_timeout / 4;
        Self {
            cluster,
            index,
            key,
            strategy: Strategy::ExecuteAgreeAttest,
            flush_interval: Duration::from_millis(5),
            owner_nodes,
            collect_grace,
            behavior: Behavior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicaError {
    #[error("invalid cluster configuration: {0}")]
    Config(String),
    #[error("node index {0} is out of range")]
    BadIndex(NodeIndex),
    #[error("key does not match node {0} of the cluster configuration")]
    KeyMismatch(NodeIndex),
}

pub enum Input {
    Peer { from: NodeIndex, msg: PeerMsg },
    Client { client: ClientId, msg: ClientRequest },
    BatchDone {
        batch: ExecutionBatch,
        outputs: Result<Vec<Vec<f64>>, ExecError>,
    },
    /// A requested wake-up time was reached.
    Tick,
}

#[derive(Debug)]
pub enum Action {
    Send { to: NodeIndex, msg: PeerMsg },
    /// Send to every other node.
    Broadcast(PeerMsg),
    /// Run the batch and report back with [`Input::BatchDone`].
    Execute(ExecutionBatch),
    /// Deliver [`Input::Tick`] at this time, replacing earlier requests.
    WakeAt(Duration),
    Reply { client: ClientId, reply: ProxyReply },
    Trace(TraceEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Normal,
    ViewChanging { target: View, since: Duration },
}

/// Client ops waiting to be ordered, in arrival order.
#[derive(Default)]
pub(crate) struct Pool {
    entries: HashMap<RequestKey, (u64, Op, Duration)>,
    order: BTreeMap<u64, RequestKey>,
    next: u64,
}

impl Pool {
    pub(crate) fn insert(&mut self, op: Op, now: Duration) -> bool {
        let key = op.key();
        if self.entries.contains_key(&key) {
            return false;
        }
        self.next += 1;
        self.order.insert(self.next, key);
        self.entries.insert(key, (self.next, op, now));
        true
    }

    pub(crate) fn remove(&mut self, key: &RequestKey) {
        if let Some((o, _, _)) = self.entries.remove(key) {
            self.order.remove(&o);
        }
    }

    pub(crate) fn contains(&self, key: &RequestKey) -> bool {
        self.entries.contains_key(key)
    }

    fn oldest(&self) -> Option<Duration> {
        self.order.values().next().map(|k| self.entries[k].2)
    }

    fn iter(&self) -> impl Iterator<Item = &Op> {
        self.order.values().map(|k| &self.entries[k].1)
    }

    pub(crate) fn len(&self) -> usize {
        self.entries.len()
    }
}

/// The PRE-PREPARE a node accepted for a slot and the plans it implies.
pub(crate) struct Accepted {
    pub bundle: PrePrepareBundle,
    pub digest: Hash32,
    pub plans: Vec<OpPlan>,
}

/// Agreement state of one `(seq, view)`.
#[derive(Default)]
pub(crate) struct Slot {
    pub accepted: Option<Accepted>,
    /// PRE-PREPAREs that conflict with the accepted one, by digest.
    pub other_pps: BTreeMap<Hash32, PrePrepareBundle>,
    pub early_prepares: Vec<crate::messages::PrepareBundle>,
    /// Validated result trees; the first entry per node is the one used for
    /// quorum selection, later ones only come from fetches.
    pub trees: BTreeMap<NodeIndex, Vec<NodeTree>>,
    pub prepares: BTreeMap<NodeIndex, Prepare>,
    pub commits: BTreeMap<NodeIndex, NodeCommit>,
    pub fetched_trees: BTreeSet<(NodeIndex, NodeIndex)>,
    pub fetched_pp: bool,
    pub own_sent: bool,
    pub own_leaves: Option<Vec<ResultLeaf>>,
    pub prepared_at: Option<Duration>,
    pub attested: bool,
}

impl Slot {
    pub(crate) fn bundle_for(&self, digest: &Hash32) -> Option<&PrePrepareBundle> {
        match &self.accepted {
            Some(a) if a.digest == *digest => Some(&a.bundle),
            _ => self.other_pps.get(digest),
        }
    }

    /// Whether `node`'s result tree with this root is held.
    pub(crate) fn has_tree(&self, node: NodeIndex, root: &Hash32) -> bool {
        self.trees
            .get(&node)
            .is_some_and(|ts| ts.iter().any(|t| t.root() == *root))
    }

    /// Whether some held result tree of `node` contains this leaf.
    pub(crate) fn has_leaf(&self, node: NodeIndex, leaf_hash: &Hash32) -> bool {
        self.trees
            .get(&node)
            .is_some_and(|ts| ts.iter().any(|t| t.tree.position_of(leaf_hash).is_some()))
    }
}

/// A batch that has collected its ordering quorum.
#[derive(Clone)]
pub(crate) struct Deliverable {
    pub view: View,
    pub digest: Hash32,
    pub ops: Vec<Op>,
}

/// What was delivered at a sequence number, kept until the next stable
/// checkpoint for re-proposals.
pub(crate) struct OrderedEntry {
    pub view: View,
    pub digest: Hash32,
    pub ops: Vec<Op>,
    pub plans: Vec<OpPlan>,
    pub own_leaves: Option<Vec<ResultLeaf>>,
}

/// A batch the primary has planned but not yet sent.
pub(crate) struct Construction {
    pub ops: Vec<Op>,
    pub plans: Vec<OpPlan>,
}

/// The leaf reported for an op-less batch.
pub(crate) fn empty_leaf() -> ResultLeaf {
    ResultLeaf {
        op_digest: Hash32::ZERO,
        body: crate::messages::LeafBody::Empty,
    }
}

#[derive(Default)]
pub(crate) struct CatchUp {
    next_peer: usize,
    ordered_at: Option<(Seq, Duration)>,
    state_at: Option<Duration>,
}

pub struct Replica {
    pub(crate) cfg: ReplicaConfig,
    pub(crate) keys: Vec<PublicKey>,
    pub(crate) n: usize,
    pub(crate) f: usize,
    pub(crate) engine: Engine,
    pub(crate) executing: bool,
    pub(crate) view: View,
    pub(crate) status: Status,
    pub(crate) committed: GroupRegistry,
    pub(crate) tentative: GroupRegistry,
    pub(crate) last_ordered: Seq,
    pub(crate) last_planned: Seq,
    pub(crate) slots: BTreeMap<(Seq, View), Slot>,
    pub(crate) pp_buffer: BTreeMap<Seq, PrePrepareBundle>,
    pub(crate) waiting_own: BTreeSet<(Seq, View)>,
    pub(crate) own_dirty: bool,
    pub(crate) constructions: BTreeMap<Seq, Construction>,
    pub(crate) reproposals: VecDeque<(Seq, Vec<Op>)>,
    pub(crate) nv_headers: BTreeMap<Seq, Hash32>,
    pub(crate) planned_keys: HashSet<RequestKey>,
    pub(crate) ordered: BTreeMap<Seq, OrderedEntry>,
    pub(crate) to_deliver: BTreeMap<Seq, Deliverable>,
    pub(crate) pool: Pool,
    pub(crate) stable: CheckpointCert,
    pub(crate) checkpoints: BTreeMap<Seq, BTreeMap<NodeIndex, Checkpoint>>,
    pub(crate) checkpoint_states: BTreeMap<Seq, GroupRegistry>,
    pub(crate) view_changes: BTreeMap<View, BTreeMap<NodeIndex, ViewChange>>,
    pub(crate) prepared_proofs: BTreeMap<Seq, PreparedProof>,
    pub(crate) new_view_sent: Option<View>,
    pub(crate) last_new_view: Option<crate::messages::NewView>,
    /// Highest checkpoint at least `f + 1` nodes vouched for.
    pub(crate) observed_checkpoint: Seq,
    pub(crate) vc_attempts: u32,
    pub(crate) future: Vec<(NodeIndex, PeerMsg)>,
    pub(crate) last_progress: Duration,
    pub(crate) catchup: CatchUp,
    pub(crate) propose_dirty: bool,
    pub(crate) proxy: ProxyState,
    pub(crate) out: Vec<Action>,
    pub(crate) last_wake: Option<Duration>,
}

/// Messages for views not yet entered are held up to this many.
const FUTURE_CAP: usize = 8192;

impl Replica {
    pub fn new(cfg: ReplicaConfig, store: ModelStore) -> Result<Self, ReplicaError> {
        cfg.cluster
            .validate()
            .map_err(|e| ReplicaError::Config(e.to_string()))?;
        let keys = cfg.cluster.keys();
        let n = keys.len();
        let f = cfg.cluster.f();
        let own = keys
            .get(cfg.index as usize)
            .ok_or(ReplicaError::BadIndex(cfg.index))?;
        if own != cfg.key.public_key() {
            return Err(ReplicaError::KeyMismatch(cfg.index));
        }
        let engine = Engine::new(
            EngineConfig {
                node_index: cfg.index,
                owner_nodes: cfg.owner_nodes.max(1),
                exec_batch_max: cfg.cluster.exec_batch_max as usize,
                flush_interval: cfg.flush_interval,
                eager: cfg.strategy == Strategy::ExecuteAgreeAttest,
            },
            store,
        );
        Ok(Self {
            cfg,
            keys,
            n,
            f,
            engine,
            executing: false,
            view: 0,
            status: Status::Normal,
            committed: GroupRegistry::new(),
            tentative: GroupRegistry::new(),
            last_ordered: 0,
            last_planned: 0,
            slots: BTreeMap::new(),
            pp_buffer: BTreeMap::new(),
            waiting_own: BTreeSet::new(),
            own_dirty: false,
            constructions: BTreeMap::new(),
            reproposals: VecDeque::new(),
            nv_headers: BTreeMap::new(),
            planned_keys: HashSet::new(),
            ordered: BTreeMap::new(),
            to_deliver: BTreeMap::new(),
            pool: Pool::default(),
            stable: CheckpointCert::genesis(),
            checkpoints: BTreeMap::new(),
            checkpoint_states: BTreeMap::from([(0, GroupRegistry::new())]),
            view_changes: BTreeMap::new(),
            prepared_proofs: BTreeMap::new(),
            new_view_sent: None,
            last_new_view: None,
            observed_checkpoint: 0,
            vc_attempts: 0,
            future: Vec::new(),
            last_progress: Duration::ZERO,
            catchup: CatchUp::default(),
            propose_dirty: false,
            proxy: ProxyState::default(),
            out: Vec::new(),
            last_wake: None,
        })
    }

    pub fn index(&self) -> NodeIndex {
        self.cfg.index
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn last_ordered(&self) -> Seq {
        self.last_ordered
    }

    pub fn registry(&self) -> &GroupRegistry {
        &self.committed
    }

    pub fn stable_checkpoint(&self) -> Seq {
        self.stable.seq
    }

    pub fn pending_ops(&self) -> usize {
        self.pool.len()
    }

    pub fn is_primary(&self) -> bool {
        self.primary_of(self.view) == self.cfg.index
    }

    pub(crate) fn primary_of(&self, view: View) -> NodeIndex {
        primary_index(view, self.n)
    }

    pub(crate) fn quorum(&self) -> usize {
        self.n - self.f
    }

    pub(crate) fn grace(&self) -> Duration {
        self.cfg.collect_grace
    }

    fn window(&self) -> Seq {
        4 * u64::from(self.cfg.cluster.checkpoint_interval.max(self.cfg.cluster.agree_pipeline))
    }

    pub(crate) fn emit(&mut self, action: Action) {
        self.out.push(action);
    }

    pub(crate) fn broadcast(&mut self, msg: PeerMsg) {
        self.out.push(Action::Broadcast(msg));
    }

    pub(crate) fn send(&mut self, to: NodeIndex, msg: PeerMsg) {
        if to != self.cfg.index {
            self.out.push(Action::Send { to, msg });
        }
    }

    pub(crate) fn trace(&mut self, event: TraceEvent) {
        self.out.push(Action::Trace(event));
    }

    /// Processes one input and returns what the caller must do.
    pub fn handle(&mut self, input: Input, now: Duration) -> Vec<Action> {
        if self.last_wake.is_some_and(|w| w <= now) {
            self.last_wake = None;
        }
        match input {
            Input::Peer { from, msg } => self.on_peer(from, msg, now),
            Input::Client { client, msg } => self.on_client(client, msg, now),
            Input::BatchDone { batch, outputs } => {
                self.executing = false;
                if !self.engine.complete_batch(&batch, outputs).is_empty() {
                    self.own_dirty = true;
                    self.propose_dirty = true;
                }
            }
            Input::Tick => {}
        }
        self.drive(now);
        std::mem::take(&mut self.out)
    }

    fn on_peer(&mut self, from: NodeIndex, msg: PeerMsg, now: Duration) {
        if from as usize >= self.n || from == self.cfg.index {
            return;
        }
        match msg {
            PeerMsg::Forward(op) => self.admit(op, now),
            PeerMsg::PrePrepare(b) => self.on_pre_prepare(from, b, now),
            PeerMsg::Prepare(b) => self.on_prepare(b, now),
            PeerMsg::Commit(b) => self.on_commit(from, b, now),
            PeerMsg::Checkpoint(c) => self.on_checkpoint(c, now),
            PeerMsg::ViewChange(vc) => self.on_view_change(vc, now),
            PeerMsg::NewView(nv) => self.on_new_view(nv, now),
            PeerMsg::Fetch(f) => self.on_fetch(from, f),
            PeerMsg::Ordered(p) => self.on_ordered_proof(p, now),
            PeerMsg::State(s) => self.on_state(s, now),
        }
    }

    /// Holds a message for a view this node has not entered yet.
    pub(crate) fn defer(&mut self, from: NodeIndex, msg: PeerMsg) {
        if self.future.len() < FUTURE_CAP {
            self.future.push((from, msg));
        }
    }

    /// Adds a client op to the pool and hands requests to the engine.
    pub(crate) fn admit(&mut self, op: Op, now: Duration) {
        let key = op.key();
        if self.pool.contains(&key) || self.committed.has_applied(&key) {
            return;
        }
        match &op {
            Op::Request(r) => {
                if !r.verify_signature() {
                    return;
                }
                let _ = self.engine.submit(r, now);
            }
            Op::Update(u) => {
                if !u.verify_signature() {
                    return;
                }
            }
        }
        self.pool.insert(op, now);
        self.propose_dirty = true;
    }

    fn drive(&mut self, now: Duration) {
        self.check_timers(now);
        if std::mem::take(&mut self.own_dirty) {
            let waiting: Vec<(Seq, View)> = self.waiting_own.iter().copied().collect();
            for (s, v) in waiting {
                self.try_send_own_prepare(s, v, now);
            }
        }
        self.propose(now);
        if !self.executing {
            if let Some(batch) = self.engine.next_batch(now) {
                self.executing = true;
                self.out.push(Action::Execute(batch));
            }
        }
        let wake = self.next_wake(now);
        if let Some(at) = wake.filter(|_| wake != self.last_wake) {
            self.out.push(Action::WakeAt(at));
            self.last_wake = wake;
        }
    }

    fn progress_deadline(&self) -> Option<Duration> {
        let oldest = self.pool.oldest()?;
        Some(oldest.max(self.last_progress) + self.cfg.cluster.view_timeout)
    }

    fn view_change_timeout(&self) -> Duration {
        self.cfg.cluster.view_timeout * 2u32.pow(self.vc_attempts.min(5))
    }

    fn check_timers(&mut self, now: Duration) {
        match self.status {
            Status::Normal => {
                if self.progress_deadline().is_some_and(|d| now >= d) {
                    self.start_view_change(self.view + 1, now);
                }
            }
            Status::ViewChanging { target, since } => {
                if now >= since + self.view_change_timeout() {
                    self.start_view_change(target + 1, now);
                }
            }
        }
        let grace = self.grace();
        let view = self.view;
        let due: Vec<Seq> = self
            .slots
            .iter()
            .filter(|((_, v), slot)| {
                *v == view && !slot.attested && slot.prepared_at.is_some_and(|t| t + grace <= now)
            })
            .map(|((s, _), _)| *s)
            .collect();
        for s in due {
            self.check_attest(s, view, now);
        }
        self.catch_up(now);
    }

    fn next_wake(&self, now: Duration) -> Option<Duration> {
        let grace = self.grace();
        let mut times: Vec<Duration> = Vec::new();
        if !self.executing {
            times.extend(self.engine.next_deadline());
        }
        match self.status {
            Status::Normal => times.extend(self.progress_deadline()),
            Status::ViewChanging { since, .. } => times.push(since + self.view_change_timeout()),
        }
        for ((_, v), slot) in &self.slots {
            if *v == self.view && !slot.attested {
                times.extend(slot.prepared_at.map(|t| t + grace));
            }
        }
        if let Some((_, t)) = self.catchup.ordered_at {
            times.push(t + grace);
        }
        if let Some(t) = self.catchup.state_at {
            times.push(t + grace);
        }
        times.into_iter().filter(|t| *t > now).min()
    }
}

