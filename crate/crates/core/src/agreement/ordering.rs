//! Normal-case ordering: PRE-PREPARE, PREPARE, attestation, COMMIT and
//! delivery to the state fold.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::{empty_leaf, Accepted, Deliverable, OrderedEntry, Replica, Slot, Status};
use crate::certificate::{NodeCommit, NodeTree};
use crate::crypto::Hash32;
use crate::distance::{select_quorum, AgreementOutcome};
use crate::domain::{FailureCode, GroupRegistry, NodeIndex, Op, OpPlan};
use crate::crypto::PublicKey;
use crate::inference::{Readiness, StoredResult};
use crate::messages::{
    attestation_tree, ops_digest, result_tree, AttestationLeaf, Commit, CommitBundle, Fetch,
    LeafBody, PeerMsg, PrePrepareBundle, Prepare, PrepareBundle, PreparedProof, ResultLeaf, Seq,
    View,
};
use crate::trace::TraceEvent;

/// Prepares held for a slot whose PRE-PREPARE has not been accepted yet.
const EARLY_CAP: usize = 32;

/// Plans for `ops` on top of `base`, as delivery would compute them.
pub(crate) fn plan_batch(base: &GroupRegistry, ops: &[Op], owners: &[PublicKey]) -> Vec<OpPlan> {
    if ops.iter().any(|op| matches!(op, Op::Update(_))) {
        let mut reg = base.clone();
        return ops.iter().map(|op| reg.apply(op, owners)).collect();
    }
    // Requests only touch the applied set, so a local one suffices.
    let mut seen = BTreeSet::new();
    ops.iter()
        .map(|op| {
            let req = op.as_request().expect("no updates in batch");
            let plan = base.plan_request(req);
            if let OpPlan::Execute { key, .. } = &plan {
                if !seen.insert(*key) {
                    return OpPlan::Rejected(FailureCode::Duplicate);
                }
            }
            plan
        })
        .collect()
}

/// Checks that `leaves` is a well-formed result tree of `node` for a batch
/// with these ops and plans.
pub(crate) fn leaves_match(plans: &[OpPlan], ops: &[Op], leaves: &[ResultLeaf], node: NodeIndex) -> bool {
    if ops.is_empty() {
        return leaves.len() == 1 && leaves[0] == empty_leaf();
    }
    if leaves.len() != ops.len() || plans.len() != ops.len() {
        return false;
    }
    ops.iter().zip(plans).zip(leaves).all(|((op, plan), leaf)| {
        if leaf.op_digest != op.digest() {
            return false;
        }
        match (plan, &leaf.body) {
            (
                OpPlan::Execute {
                    request_id,
                    group_id,
                    version,
                    output_dim,
                    ..
                },
                LeafBody::Result(r),
            ) => {
                r.request_id == *request_id
                    && r.node_index == node
                    && r.group_id == *group_id
                    && r.group_version == *version
                    && r.output.len() == *output_dim
                    && r.output.iter().all(|x| x.is_finite())
            }
            (OpPlan::Execute { .. }, LeafBody::Missing) => true,
            (OpPlan::Rejected(c), LeafBody::Rejected(d)) => c == d,
            (OpPlan::Update(o), LeafBody::Update(p)) => o == p,
            _ => false,
        }
    })
}

/// Runs quorum selection for every request of an accepted batch and builds
/// the node's attestation leaves.
fn attestation(
    slot: &Slot,
    acc: &Accepted,
    n: usize,
    f: usize,
    me: NodeIndex,
    view: View,
    seq: Seq,
) -> (Vec<AttestationLeaf>, Vec<TraceEvent>) {
    let ops = &acc.bundle.ops;
    let mut quorums: Vec<Option<BTreeSet<NodeIndex>>> = vec![None; ops.len()];
    let mut traces = Vec::new();
    let mut negatives = Vec::new();
    for (i, (op, plan)) in ops.iter().zip(&acc.plans).enumerate() {
        match plan {
            OpPlan::Execute { distance, epsilon, .. } => {
                let outputs: BTreeMap<NodeIndex, Vec<f64>> = slot
                    .trees
                    .iter()
                    .filter_map(|(k, ts)| Some((*k, ts[0].leaves[i].result()?.output.clone())))
                    .collect();
                let outcome = select_quorum(&outputs, n, f, distance.metric, *epsilon)
                    .unwrap_or_else(|_| AgreementOutcome::unsatisfied());
                traces.push(TraceEvent::Attested {
                    node: me,
                    view,
                    seq,
                    op_digest: op.digest(),
                    metric: distance.metric,
                    epsilon: *epsilon,
                    outputs,
                    selected: outcome.selected.clone(),
                    satisfied: outcome.satisfied,
                });
                if outcome.satisfied {
                    quorums[i] = Some(outcome.selected);
                } else {
                    negatives.push(AttestationLeaf::Negative {
                        op_digest: op.digest(),
                        code: FailureCode::QuorumUnsatisfied,
                    });
                }
            }
            OpPlan::Rejected(code) => negatives.push(AttestationLeaf::Negative {
                op_digest: op.digest(),
                code: *code,
            }),
            OpPlan::Update(_) => {}
        }
    }
    let mut leaves = Vec::new();
    let mut whole = BTreeSet::new();
    for (k, ts) in &slot.trees {
        let t = &ts[0];
        let mut results = (0..ops.len()).filter(|&i| t.leaves[i].result().is_some()).peekable();
        if results.peek().is_none() {
            continue;
        }
        if results.all(|i| quorums[i].as_ref().is_some_and(|q| q.contains(k))) {
            whole.insert(*k);
            leaves.push(AttestationLeaf::BatchRoot {
                node: *k,
                root: t.root(),
            });
        }
    }
    for (i, q) in quorums.iter().enumerate() {
        for k in q.iter().flatten().filter(|k| !whole.contains(k)) {
            leaves.push(AttestationLeaf::Result {
                node: *k,
                leaf_hash: slot.trees[k][0].leaves[i].hash(),
            });
        }
    }
    leaves.extend(negatives);
    if leaves.is_empty() {
        leaves.push(AttestationLeaf::Nothing);
    }
    (leaves, traces)
}

impl Replica {
    fn valid_pre_prepare(&self, bundle: &PrePrepareBundle) -> bool {
        let pp = &bundle.msg;
        let primary = self.primary_of(pp.view) as usize;
        bundle.ops.len() <= self.cfg.cluster.agree_batch_max as usize
            && bundle.leaves.len() == bundle.ops.len().max(1)
            && result_tree(&bundle.leaves).is_some_and(|t| t.root() == pp.r_root)
            && ops_digest(&bundle.ops) == pp.ops_digest
            && pp.verify(&self.keys[primary])
    }

    pub(super) fn on_pre_prepare(&mut self, from: NodeIndex, bundle: PrePrepareBundle, now: Duration) {
        let (v, s) = (bundle.msg.view, bundle.msg.seq);
        if v > self.view {
            self.defer(from, PeerMsg::PrePrepare(bundle));
            return;
        }
        if s <= self.stable.seq || s > self.stable.seq + self.window() {
            return;
        }
        if self.slots.get(&(s, v)).is_some_and(|slot| slot.bundle_for(&bundle.msg.digest()).is_some()) {
            return;
        }
        if !self.valid_pre_prepare(&bundle) {
            return;
        }
        let digest = bundle.msg.digest();
        // Keep variants that someone committed to, so they can be delivered.
        if let Some(slot) = self.slots.get_mut(&(s, v)) {
            if slot.commits.values().any(|c| c.msg.pp_digest == digest) {
                slot.other_pps.entry(digest).or_insert_with(|| bundle.clone());
                self.check_ordered(s, v, now);
            }
        }
        if v < self.view
            || self.status != Status::Normal
            || self.primary_of(v) == self.cfg.index
            || self.slots.get(&(s, v)).is_some_and(|slot| slot.accepted.is_some())
        {
            return;
        }
        match self.nv_headers.get(&s) {
            Some(h) if *h != bundle.msg.ops_digest => return,
            None if self.nv_headers.keys().next_back().is_some_and(|m| s <= *m) => return,
            _ => {}
        }
        if s > self.last_ordered && s > self.last_planned + 1 {
            self.pp_buffer.insert(s, bundle);
            return;
        }
        self.accept_pre_prepare(bundle, now);
        while let Some(next) = self.pp_buffer.remove(&(self.last_planned + 1)) {
            if next.msg.view == self.view {
                self.accept_pre_prepare(next, now);
            }
        }
    }

    fn accept_pre_prepare(&mut self, bundle: PrePrepareBundle, now: Duration) {
        let (v, s) = (bundle.msg.view, bundle.msg.seq);
        let primary = self.primary_of(v);
        let plans = if s <= self.last_ordered {
            match self.ordered.get(&s) {
                Some(e) if ops_digest(&e.ops) == bundle.msg.ops_digest => e.plans.clone(),
                _ => return,
            }
        } else if s == self.last_planned + 1 {
            plan_batch(&self.tentative, &bundle.ops, &self.cfg.cluster.owners)
        } else {
            return;
        };
        if !leaves_match(&plans, &bundle.ops, &bundle.leaves, primary) {
            return;
        }
        if s > self.last_ordered {
            let owners = self.cfg.cluster.owners.clone();
            for op in &bundle.ops {
                self.tentative.apply(op, &owners);
            }
            self.last_planned = s;
        }
        self.install_accepted(bundle, plans, now);
        self.waiting_own.insert((s, v));
        self.try_send_own_prepare(s, v, now);
    }

    /// Records the PRE-PREPARE a node goes with for its slot.
    pub(super) fn install_accepted(&mut self, bundle: PrePrepareBundle, plans: Vec<OpPlan>, now: Duration) {
        let (v, s) = (bundle.msg.view, bundle.msg.seq);
        let primary = self.primary_of(v);
        let digest = bundle.msg.digest();
        let tree = result_tree(&bundle.leaves).expect("batches have at least one leaf");
        let slot = self.slots.entry((s, v)).or_default();
        slot.other_pps.remove(&digest);
        slot.trees.insert(
            primary,
            vec![NodeTree {
                leaves: bundle.leaves.clone(),
                tree,
                order_sig: bundle.msg.sig.clone(),
            }],
        );
        slot.accepted = Some(Accepted { bundle, digest, plans });
        let early = std::mem::take(&mut slot.early_prepares);
        for p in early {
            self.on_prepare(p, now);
        }
        self.check_prepared(s, v, now);
        self.check_ordered(s, v, now);
    }

    /// This node's leaf for one op, or `None` while its result is pending.
    fn own_leaf(&mut self, op: &Op, plan: &OpPlan, ordered: bool, now: Duration) -> Option<ResultLeaf> {
        let body = match plan {
            OpPlan::Rejected(c) => LeafBody::Rejected(*c),
            OpPlan::Update(o) => LeafBody::Update(*o),
            // Results of ordered requests have been handed on already.
            OpPlan::Execute { .. } if ordered => LeafBody::Missing,
            OpPlan::Execute {
                key,
                group_id,
                version,
                ..
            } => {
                self.committed.version(group_id, *version)?;
                if !self.engine.knows(key) {
                    if let Some(r) = op.as_request() {
                        let _ = self.engine.submit(r, now);
                    }
                }
                match self.engine.ensure(*key, *version, now) {
                    Readiness::Ready => match self.engine.result(key, *version) {
                        Some(StoredResult::Ok(r)) => LeafBody::Result(r.clone()),
                        _ => LeafBody::Missing,
                    },
                    Readiness::Pending => return None,
                    Readiness::Unavailable => LeafBody::Missing,
                }
            }
        };
        Some(ResultLeaf {
            op_digest: op.digest(),
            body,
        })
    }

    /// This node's result tree leaves for a batch at `seq`, once all are
    /// available.
    pub(super) fn own_leaves(&mut self, seq: Seq, ops: &[Op], plans: &[OpPlan], now: Duration) -> Option<Vec<ResultLeaf>> {
        if ops.is_empty() {
            return Some(vec![empty_leaf()]);
        }
        let ordered = seq <= self.last_ordered;
        if ordered {
            if let Some(leaves) = self.ordered.get(&seq).and_then(|e| e.own_leaves.clone()) {
                if leaves.len() == ops.len() && leaves.iter().zip(ops).all(|(l, o)| l.op_digest == o.digest()) {
                    return Some(leaves);
                }
            }
        }
        // Visit every op so that all pending executions get scheduled.
        let leaves: Vec<Option<ResultLeaf>> = ops
            .iter()
            .zip(plans)
            .map(|(op, plan)| self.own_leaf(op, plan, ordered, now))
            .collect();
        leaves.into_iter().collect()
    }

    pub(super) fn try_send_own_prepare(&mut self, s: Seq, v: View, now: Duration) {
        let me = self.cfg.index;
        let ready = v == self.view && self.status == Status::Normal;
        let Some(slot) = self.slots.get(&(s, v)).filter(|_| ready) else {
            self.waiting_own.remove(&(s, v));
            return;
        };
        let Some(acc) = slot.accepted.as_ref().filter(|_| !slot.own_sent) else {
            self.waiting_own.remove(&(s, v));
            return;
        };
        let (ops, plans, digest) = (acc.bundle.ops.clone(), acc.plans.clone(), acc.digest);
        let Some(leaves) = self.own_leaves(s, &ops, &plans, now) else {
            return;
        };
        self.waiting_own.remove(&(s, v));
        let tree = result_tree(&leaves).expect("non-empty");
        let msg = Prepare::new(&self.cfg.key, v, s, digest, me, tree.root());
        let slot = self.slots.get_mut(&(s, v)).expect("checked above");
        slot.trees.insert(
            me,
            vec![NodeTree {
                leaves: leaves.clone(),
                tree,
                order_sig: msg.sig.clone(),
            }],
        );
        slot.prepares.insert(me, msg.clone());
        slot.own_sent = true;
        slot.own_leaves = Some(leaves.clone());
        self.broadcast(PeerMsg::Prepare(PrepareBundle { msg, leaves }));
        self.check_prepared(s, v, now);
        self.proxy_slot_update(s);
    }

    pub(super) fn on_prepare(&mut self, bundle: PrepareBundle, now: Duration) {
        let p = &bundle.msg;
        let (v, s, k) = (p.view, p.seq, p.node);
        if k as usize >= self.n || k == self.cfg.index || k == self.primary_of(v) {
            return;
        }
        if v > self.view {
            self.defer(k, PeerMsg::Prepare(bundle));
            return;
        }
        if s <= self.stable.seq || s > self.stable.seq + self.window() {
            return;
        }
        if !self.slots.contains_key(&(s, v)) {
            if v < self.view {
                return;
            }
            self.slots.insert((s, v), Slot::default());
        }
        let slot = self.slots.get_mut(&(s, v)).expect("inserted above");
        let Some(acc) = &slot.accepted else {
            if slot.early_prepares.len() < EARLY_CAP {
                slot.early_prepares.push(bundle);
            }
            // Enough backups accepted a PRE-PREPARE this node missed.
            let backers: BTreeSet<NodeIndex> = slot.early_prepares.iter().map(|b| b.msg.node).collect();
            if backers.len() > self.f && !slot.fetched_pp {
                slot.fetched_pp = true;
                let to = *backers.iter().next().expect("non-empty");
                self.send(to, PeerMsg::Fetch(Fetch::PrePrepare { view: v, seq: s }));
            }
            return;
        };
        if p.pp_digest != acc.digest || slot.has_tree(k, &p.r_root) {
            return;
        }
        let Some(tree) = result_tree(&bundle.leaves).filter(|t| t.root() == p.r_root) else {
            return;
        };
        if !leaves_match(&acc.plans, &acc.bundle.ops, &bundle.leaves, k) || !p.verify(&self.keys[k as usize]) {
            return;
        }
        let first = !slot.trees.contains_key(&k);
        slot.trees.entry(k).or_default().push(NodeTree {
            leaves: bundle.leaves,
            tree,
            order_sig: bundle.msg.sig.clone(),
        });
        if first {
            slot.prepares.insert(k, bundle.msg);
        }
        self.check_prepared(s, v, now);
        self.proxy_slot_update(s);
    }

    pub(super) fn check_prepared(&mut self, s: Seq, v: View, now: Duration) {
        let (quorum, me) = (self.quorum(), self.cfg.index);
        let Some(slot) = self.slots.get_mut(&(s, v)) else {
            return;
        };
        let Some(acc) = &slot.accepted else {
            return;
        };
        if slot.prepared_at.is_none() && slot.trees.len() >= quorum && slot.trees.contains_key(&me) {
            slot.prepared_at = Some(now);
        }
        if slot.prepares.len() + 1 >= quorum
            && self.prepared_proofs.get(&s).is_none_or(|p| p.pre_prepare.view < v)
        {
            self.prepared_proofs.insert(
                s,
                PreparedProof {
                    pre_prepare: acc.bundle.msg.clone(),
                    ops: acc.bundle.ops.clone(),
                    prepares: slot.prepares.values().cloned().collect(),
                },
            );
        }
        self.check_attest(s, v, now);
    }

    /// Attests once every node's result tree is in or the grace period after
    /// preparing has passed.
    pub(super) fn check_attest(&mut self, s: Seq, v: View, now: Duration) {
        if v != self.view || self.status != Status::Normal {
            return;
        }
        let (n, f, me, grace) = (self.n, self.f, self.cfg.index, self.grace());
        let Some(slot) = self.slots.get(&(s, v)) else {
            return;
        };
        let (Some(acc), Some(t0)) = (&slot.accepted, slot.prepared_at) else {
            return;
        };
        if slot.attested || (slot.trees.len() < n && now < t0 + grace) {
            return;
        }
        let (leaves, traces) = attestation(slot, acc, n, f, me, v, s);
        let digest = acc.digest;
        let tree = attestation_tree(&leaves).expect("non-empty");
        let msg = Commit::new(&self.cfg.key, v, s, digest, me, tree.root());
        let slot = self.slots.get_mut(&(s, v)).expect("checked above");
        slot.attested = true;
        slot.commits.insert(
            me,
            NodeCommit {
                msg: msg.clone(),
                leaves: leaves.clone(),
                tree,
            },
        );
        for t in traces {
            self.trace(t);
        }
        self.broadcast(PeerMsg::Commit(CommitBundle { msg, leaves }));
        self.check_ordered(s, v, now);
        self.proxy_slot_update(s);
    }

    pub(super) fn on_commit(&mut self, from: NodeIndex, bundle: CommitBundle, now: Duration) {
        let c = &bundle.msg;
        let (v, s) = (c.view, c.seq);
        if c.node != from {
            return;
        }
        if v > self.view {
            self.defer(from, PeerMsg::Commit(bundle));
            return;
        }
        if s <= self.stable.seq || s > self.stable.seq + self.window() {
            return;
        }
        if !self.slots.contains_key(&(s, v)) && v < self.view {
            return;
        }
        if self.slots.get(&(s, v)).is_some_and(|slot| slot.commits.contains_key(&from)) {
            return;
        }
        let Some(tree) = attestation_tree(&bundle.leaves).filter(|t| t.root() == c.a_root) else {
            return;
        };
        if !c.verify(&self.keys[from as usize]) {
            return;
        }
        let slot = self.slots.entry((s, v)).or_default();
        // Fetch result trees the commit attests that this node lacks.
        let mut wanted = BTreeSet::new();
        for leaf in &bundle.leaves {
            match leaf {
                AttestationLeaf::BatchRoot { node, root } if !slot.has_tree(*node, root) => {
                    wanted.insert(*node);
                }
                AttestationLeaf::Result { node, leaf_hash } if !slot.has_leaf(*node, leaf_hash) => {
                    wanted.insert(*node);
                }
                _ => {}
            }
        }
        let ours = slot.accepted.as_ref().is_none_or(|a| a.digest == c.pp_digest);
        let fetch: Vec<NodeIndex> = wanted
            .into_iter()
            .filter(|k| ours && slot.fetched_trees.insert((*k, from)))
            .collect();
        slot.commits.insert(
            from,
            NodeCommit {
                msg: bundle.msg,
                leaves: bundle.leaves,
                tree,
            },
        );
        for node in fetch {
            self.send(from, PeerMsg::Fetch(Fetch::Prepare { view: v, seq: s, node }));
        }
        self.check_ordered(s, v, now);
        self.proxy_slot_update(s);
    }

    /// Queues the batch at `(s, v)` for delivery once `N - f` COMMITs agree.
    pub(super) fn check_ordered(&mut self, s: Seq, v: View, now: Duration) {
        if s <= self.last_ordered || self.to_deliver.contains_key(&s) {
            return;
        }
        let quorum = self.quorum();
        let Some(slot) = self.slots.get_mut(&(s, v)) else {
            return;
        };
        let mut votes: BTreeMap<Hash32, Vec<NodeIndex>> = BTreeMap::new();
        for (i, c) in &slot.commits {
            votes.entry(c.msg.pp_digest).or_default().push(*i);
        }
        let Some((j, who)) = votes.into_iter().find(|(_, w)| w.len() >= quorum) else {
            return;
        };
        let buffered = self.pp_buffer.get(&s).filter(|b| b.msg.view == v && b.msg.digest() == j);
        match slot.bundle_for(&j).or(buffered) {
            Some(b) => {
                let d = Deliverable {
                    view: v,
                    digest: j,
                    ops: b.ops.clone(),
                };
                self.to_deliver.insert(s, d);
                self.deliver_ready(now);
            }
            None if !slot.fetched_pp => {
                slot.fetched_pp = true;
                let me = self.cfg.index;
                if let Some(&to) = who.iter().find(|i| **i != me) {
                    self.send(to, PeerMsg::Fetch(Fetch::PrePrepare { view: v, seq: s }));
                }
            }
            None => {}
        }
    }

    pub(super) fn deliver_ready(&mut self, now: Duration) {
        let last = self.last_ordered;
        self.to_deliver.retain(|s, _| *s > last);
        while let Some(d) = self.to_deliver.remove(&(self.last_ordered + 1)) {
            self.deliver(self.last_ordered + 1, d, now);
        }
    }

    fn deliver(&mut self, s: Seq, d: Deliverable, now: Duration) {
        let owners = self.cfg.cluster.owners.clone();
        let mut plans = Vec::with_capacity(d.ops.len());
        let mut touched = BTreeSet::new();
        for op in &d.ops {
            let plan = self.committed.apply(op, &owners);
            if let (Op::Update(u), OpPlan::Update(crate::domain::OpOutcome::Applied { .. })) = (op, &plan) {
                touched.insert(u.update.group_id().to_string());
            }
            plans.push(plan);
        }
        for g in touched {
            self.sync_engine_group(&g, now);
        }
        let versions = plans
            .iter()
            .map(|p| match p {
                OpPlan::Execute { version, .. } => Some(*version),
                _ => None,
            })
            .collect();
        let own_leaves = self.slots.get(&(s, d.view)).and_then(|slot| slot.own_leaves.clone());
        // A batch other than the planned one invalidates the tentative state.
        let diverged = self
            .slots
            .get(&(s, self.view))
            .and_then(|slot| slot.accepted.as_ref())
            .is_some_and(|a| a.digest != d.digest);
        if self.last_planned <= s || diverged {
            self.last_planned = s;
            self.tentative = self.committed.clone();
            self.constructions.retain(|q, _| *q > s);
        }
        self.last_ordered = s;
        for op in &d.ops {
            let key = op.key();
            self.pool.remove(&key);
            self.planned_keys.remove(&key);
            self.engine.prune(&key);
        }
        self.trace(TraceEvent::Ordered {
            node: self.cfg.index,
            view: d.view,
            seq: s,
            pp_digest: d.digest,
            ops: d.ops.clone(),
            versions,
        });
        self.ordered.insert(
            s,
            OrderedEntry {
                view: d.view,
                digest: d.digest,
                ops: d.ops,
                plans,
                own_leaves,
            },
        );
        self.last_progress = now;
        self.own_dirty = true;
        self.propose_dirty = true;
        self.proxy_on_delivered(s);
        if s.is_multiple_of(u64::from(self.cfg.cluster.checkpoint_interval)) {
            self.take_checkpoint(s);
        }
    }

    /// Brings loaded model versions in line with the ordered registry.
    pub(super) fn sync_engine_group(&mut self, group_id: &str, now: Duration) {
        let versions = self.committed.versions(group_id).to_vec();
        let live = self.engine.live_versions(group_id);
        for g in versions {
            if !g.status.is_live() {
                self.engine.retire_version(group_id, g.version);
            } else if !live.contains(&g.version) {
                if let Err(e) = self.engine.load_group(&g, now) {
                    log::warn!("node {}: cannot load {} v{}: {e}", self.cfg.index, group_id, g.version);
                }
            }
        }
        self.own_dirty = true;
    }
}
