//! Checkpoints, garbage collection, fetches and state transfer.

use std::time::Duration;

use super::{Deliverable, Replica};
use crate::domain::NodeIndex;
use crate::messages::{
    state_digest, Checkpoint, CheckpointCert, Commit, Fetch, OrderedProof, PeerMsg, Prepare,
    PrepareBundle, Seq, StateSnapshot,
};

impl Replica {
    pub(super) fn take_checkpoint(&mut self, s: Seq) {
        let digest = state_digest(s, &self.committed);
        self.checkpoint_states.insert(s, self.committed.clone());
        let c = Checkpoint::new(&self.cfg.key, s, digest, self.cfg.index);
        self.broadcast(PeerMsg::Checkpoint(c.clone()));
        self.record_checkpoint(c);
    }

    pub(super) fn on_checkpoint(&mut self, c: Checkpoint, _now: Duration) {
        let Some(pk) = self.keys.get(c.node as usize) else {
            return;
        };
        if c.seq <= self.stable.seq
            || c.seq > self.stable.seq + 4 * self.window()
            || self.checkpoints.get(&c.seq).is_some_and(|m| m.contains_key(&c.node))
            || !c.verify(pk)
        {
            return;
        }
        self.record_checkpoint(c);
    }

    fn record_checkpoint(&mut self, c: Checkpoint) {
        let (s, digest) = (c.seq, c.digest);
        let votes = self.checkpoints.entry(s).or_default();
        votes.entry(c.node).or_insert(c);
        let matching: Vec<Checkpoint> = votes.values().filter(|x| x.digest == digest).cloned().collect();
        if matching.len() > self.f {
            self.observed_checkpoint = self.observed_checkpoint.max(s);
        }
        if matching.len() >= self.quorum() {
            self.set_stable(CheckpointCert {
                seq: s,
                digest,
                sigs: matching,
            });
        }
    }

    /// Adopts a newer stable checkpoint and drops state it covers. Slots
    /// are kept for one more interval so proxies can finish certificates.
    pub(super) fn set_stable(&mut self, cert: CheckpointCert) {
        if cert.seq <= self.stable.seq {
            return;
        }
        let s = cert.seq;
        self.stable = cert;
        let keep = s.saturating_sub(u64::from(self.cfg.cluster.checkpoint_interval));
        self.slots.retain(|(q, _), _| *q > keep);
        self.ordered.retain(|q, _| *q > keep);
        self.checkpoints.retain(|q, _| *q > s);
        self.checkpoint_states.retain(|q, _| *q >= s);
        self.prepared_proofs.retain(|q, _| *q > s);
        self.pp_buffer.retain(|q, _| *q > s);
        self.proxy_gc(keep);
    }

    pub(super) fn on_state(&mut self, snap: StateSnapshot, now: Duration) {
        let cp = &snap.checkpoint;
        if cp.seq <= self.last_ordered
            || state_digest(cp.seq, &snap.registry) != cp.digest
            || !cp.verify(&self.keys, self.quorum())
        {
            return;
        }
        let s = cp.seq;
        self.committed = snap.registry.clone();
        self.last_ordered = s;
        self.tentative = self.committed.clone();
        self.last_planned = s;
        self.constructions.clear();
        self.checkpoint_states.insert(s, snap.registry);
        self.set_stable(snap.checkpoint);
        let groups: Vec<String> = self.committed.listing().into_iter().map(|g| g.group_id).collect();
        for g in groups {
            self.sync_engine_group(&g, now);
        }
        let applied: Vec<_> = self
            .pool
            .iter()
            .map(|op| op.key())
            .filter(|k| self.committed.has_applied(k))
            .collect();
        for k in applied {
            self.pool.remove(&k);
            self.engine.prune(&k);
        }
        self.catchup.state_at = None;
        self.last_progress = now;
        self.propose_dirty = true;
        self.deliver_ready(now);
    }

    fn snapshot(&self) -> Option<StateSnapshot> {
        Some(StateSnapshot {
            checkpoint: self.stable.clone(),
            registry: self.checkpoint_states.get(&self.stable.seq)?.clone(),
        })
    }

    fn ordered_proof(&self, seq: Seq) -> Option<OrderedProof> {
        let e = self.ordered.get(&seq)?;
        let slot = self.slots.get(&(seq, e.view))?;
        let b = slot.bundle_for(&e.digest)?;
        let commits: Vec<Commit> = slot
            .commits
            .values()
            .filter(|c| c.msg.pp_digest == e.digest)
            .map(|c| c.msg.clone())
            .collect();
        (commits.len() >= self.quorum()).then(|| OrderedProof {
            pre_prepare: b.msg.clone(),
            ops: e.ops.clone(),
            commits,
        })
    }

    pub(super) fn on_fetch(&mut self, from: NodeIndex, fetch: Fetch) {
        let reply: Vec<PeerMsg> = match fetch {
            Fetch::PrePrepare { view, seq } => self
                .slots
                .get(&(seq, view))
                .map(|slot| {
                    slot.accepted
                        .iter()
                        .map(|a| &a.bundle)
                        .chain(slot.other_pps.values())
                        .map(|b| PeerMsg::PrePrepare(b.clone()))
                        .collect()
                })
                .unwrap_or_default(),
            Fetch::Prepare { view, seq, node } => {
                let primary = self.primary_of(view);
                match self.slots.get(&(seq, view)).and_then(|s| Some((s, s.accepted.as_ref()?))) {
                    Some((_, acc)) if node == primary => vec![PeerMsg::PrePrepare(acc.bundle.clone())],
                    Some((slot, acc)) => slot
                        .trees
                        .get(&node)
                        .into_iter()
                        .flatten()
                        .map(|t| {
                            PeerMsg::Prepare(PrepareBundle {
                                msg: Prepare {
                                    view,
                                    seq,
                                    pp_digest: acc.digest,
                                    node,
                                    r_root: t.root(),
                                    sig: t.order_sig.clone(),
                                },
                                leaves: t.leaves.clone(),
                            })
                        })
                        .collect(),
                    None => Vec::new(),
                }
            }
            Fetch::Ordered { seq } => match self.ordered_proof(seq) {
                Some(p) => vec![PeerMsg::Ordered(p)],
                None if seq <= self.stable.seq => self.snapshot().map(PeerMsg::State).into_iter().collect(),
                None => Vec::new(),
            },
            Fetch::State => self.snapshot().map(PeerMsg::State).into_iter().collect(),
        };
        for msg in reply {
            self.send(from, msg);
        }
    }

    pub(super) fn on_ordered_proof(&mut self, p: OrderedProof, now: Duration) {
        let pp = &p.pre_prepare;
        let s = pp.seq;
        if s <= self.last_ordered || s <= self.stable.seq || self.to_deliver.contains_key(&s) {
            return;
        }
        if !p.verify(&self.keys, self.f) {
            return;
        }
        let d = Deliverable {
            view: pp.view,
            digest: pp.digest(),
            ops: p.ops,
        };
        self.to_deliver.insert(s, d);
        self.deliver_ready(now);
    }

    fn next_peer(&mut self) -> NodeIndex {
        let n = self.n as NodeIndex;
        loop {
            let p = (self.catchup.next_peer % self.n) as NodeIndex;
            self.catchup.next_peer += 1;
            if p != self.cfg.index || n == 1 {
                return p;
            }
        }
    }

    /// Fills gaps in the ordered log from peers, retrying every grace period.
    pub(super) fn catch_up(&mut self, now: Duration) {
        let grace = self.grace();
        if self.stable.seq > self.last_ordered {
            if self.catchup.state_at.is_none_or(|t| now >= t + grace) {
                let to = self.next_peer();
                self.send(to, PeerMsg::Fetch(Fetch::State));
                self.catchup.state_at = Some(now);
            }
            return;
        }
        self.catchup.state_at = None;
        let behind = !self.to_deliver.is_empty() || self.observed_checkpoint > self.last_ordered;
        if !behind {
            self.catchup.ordered_at = None;
            return;
        }
        // Pipelined batches can complete out of order; only a gap that
        // persists for a grace period is fetched.
        let want = self.last_ordered + 1;
        match self.catchup.ordered_at {
            Some((w, t)) if w == want => {
                if now >= t + grace {
                    let to = self.next_peer();
                    self.send(to, PeerMsg::Fetch(Fetch::Ordered { seq: want }));
                    self.catchup.ordered_at = Some((want, now));
                }
            }
            _ => self.catchup.ordered_at = Some((want, now)),
        }
    }
}
