//! The client-facing side of a node: admission checks, forwarding and
//! certificate assembly once a request's batch is ordered.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use crate::agreement::{Action, ClientId, Replica};
use crate::certificate::BatchEvidence;
use crate::client::{ClientRequest, ProxyReply};
use crate::crypto::Hash32;
use crate::domain::{FailureCode, Op, OpPlan, RequestKey};
use crate::messages::{PeerMsg, Seq, View};

#[derive(Debug, Clone, Copy)]
struct Located {
    seq: Seq,
    view: View,
    digest: Hash32,
    index: usize,
}

#[derive(Default)]
pub struct ProxyState {
    waiting: HashMap<RequestKey, Vec<ClientId>>,
    answers: HashMap<RequestKey, ProxyReply>,
    /// Where each ordered op sits; the first ordering wins.
    located: HashMap<RequestKey, Located>,
    by_slot: BTreeMap<Seq, Vec<RequestKey>>,
    /// Group updates submitted here and not ordered yet, by group.
    pending_updates: HashMap<String, RequestKey>,
}

impl ProxyState {
    /// Requests waiting for an answer.
    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }
}

impl Replica {
    pub(crate) fn on_client(&mut self, client: ClientId, msg: ClientRequest, now: Duration) {
        match msg {
            ClientRequest::ListGroups => self.emit(Action::Reply {
                client,
                reply: ProxyReply::Groups(self.committed.listing()),
            }),
            ClientRequest::Submit(op) => self.on_submit(client, op, now),
        }
    }

    fn on_submit(&mut self, client: ClientId, op: Op, now: Duration) {
        if self.cfg.behavior.proxy_discard {
            return;
        }
        let key = op.key();
        if let Some(reply) = self.proxy.answers.get(&key).cloned() {
            self.emit(Action::Reply { client, reply });
            return;
        }
        if let Some(code) = self.precheck(&op) {
            self.emit(Action::Reply {
                client,
                reply: ProxyReply::Rejected { key, code },
            });
            return;
        }
        let waiting = self.proxy.waiting.entry(key).or_default();
        if !waiting.contains(&client) {
            waiting.push(client);
        }
        if self.proxy.located.contains_key(&key) {
            self.try_answer(key);
            return;
        }
        if let Op::Update(u) = &op {
            self.proxy.pending_updates.insert(u.update.group_id().to_string(), key);
        }
        self.admit(op.clone(), now);
        self.broadcast(PeerMsg::Forward(op));
    }

    /// Refusals that need no ordering, judged on the ordered state.
    fn precheck(&self, op: &Op) -> Option<FailureCode> {
        let key = op.key();
        match op {
            Op::Request(r) => {
                if self.committed.has_applied(&key) {
                    // Ordered, but this node has no record left to certify.
                    return (!self.proxy.located.contains_key(&key)).then_some(FailureCode::Duplicate);
                }
                match self.committed.plan_request(r) {
                    OpPlan::Rejected(code) => Some(code),
                    _ => None,
                }
            }
            Op::Update(u) => {
                let owners = &self.cfg.cluster.owners;
                if !(owners.is_empty() || owners.contains(&u.owner)) || !u.verify_signature() {
                    return Some(FailureCode::Unauthorized);
                }
                match self.proxy.pending_updates.get(u.update.group_id()) {
                    Some(k) if *k != key => Some(FailureCode::UpdateInProgress),
                    _ => None,
                }
            }
        }
    }

    pub(crate) fn proxy_on_delivered(&mut self, seq: Seq) {
        let Some(e) = self.ordered.get(&seq) else {
            return;
        };
        let (view, digest) = (e.view, e.digest);
        let mut here = Vec::new();
        let mut updates = Vec::new();
        for (index, (op, plan)) in e.ops.iter().zip(&e.plans).enumerate() {
            let key = op.key();
            if let (Op::Update(u), OpPlan::Update(outcome)) = (op, plan) {
                updates.push((key, u.update.group_id().to_string(), *outcome));
                continue;
            }
            if self.proxy.located.contains_key(&key) {
                continue;
            }
            self.proxy.located.insert(
                key,
                Located {
                    seq,
                    view,
                    digest,
                    index,
                },
            );
            here.push(key);
        }
        for (key, group, outcome) in updates {
            if self.proxy.pending_updates.get(&group) == Some(&key) {
                self.proxy.pending_updates.remove(&group);
            }
            if !self.proxy.answers.contains_key(&key) {
                self.answer(key, ProxyReply::UpdateOutcome { key, seq, outcome });
            }
        }
        for key in &here {
            if self.proxy.waiting.contains_key(key) {
                self.try_answer(*key);
            }
        }
        self.proxy.by_slot.insert(seq, here);
    }

    /// Retries waiting requests of an ordered slot after new evidence.
    pub(crate) fn proxy_slot_update(&mut self, seq: Seq) {
        if self.proxy.waiting.is_empty() || seq > self.last_ordered {
            return;
        }
        let Some(keys) = self.proxy.by_slot.get(&seq) else {
            return;
        };
        let keys: Vec<RequestKey> = keys
            .iter()
            .filter(|k| self.proxy.waiting.contains_key(k))
            .copied()
            .collect();
        for k in keys {
            self.try_answer(k);
        }
    }

    fn try_answer(&mut self, key: RequestKey) {
        let Some(loc) = self.proxy.located.get(&key).copied() else {
            return;
        };
        if let Some(reply) = self.build_answer(key, loc) {
            self.answer(key, reply);
        }
    }

    fn build_answer(&self, key: RequestKey, loc: Located) -> Option<ProxyReply> {
        let slot = self.slots.get(&(loc.seq, loc.view))?;
        let acc = slot.accepted.as_ref().filter(|a| a.digest == loc.digest)?;
        let evidence = BatchEvidence {
            pre_prepare: &acc.bundle.msg,
            trees: slot.trees.iter().map(|(k, ts)| (*k, &ts[0])).collect(),
            commits: slot.commits.iter().map(|(k, c)| (*k, c)).collect(),
            n: self.n,
            f: self.f,
        };
        match &acc.plans[loc.index] {
            OpPlan::Execute { distance, epsilon, .. } => {
                if let Some((results, cert)) = evidence.certificate(loc.index) {
                    return Some(ProxyReply::Certified {
                        key,
                        results,
                        cert,
                        distance: *distance,
                        epsilon: *epsilon,
                    });
                }
            }
            OpPlan::Update(_) => return None,
            OpPlan::Rejected(_) => {}
        }
        let cert = evidence.failure_certificate(acc.bundle.ops[loc.index].digest())?;
        Some(ProxyReply::FailureCertified { key, cert })
    }

    fn answer(&mut self, key: RequestKey, reply: ProxyReply) {
        for client in self.proxy.waiting.remove(&key).unwrap_or_default() {
            self.emit(Action::Reply {
                client,
                reply: reply.clone(),
            });
        }
        self.proxy.answers.insert(key, reply);
    }

    /// Forgets where ops of slots at or below `seq` were ordered.
    pub(crate) fn proxy_gc(&mut self, seq: Seq) {
        let rest = self.proxy.by_slot.split_off(&(seq + 1));
        let old = std::mem::replace(&mut self.proxy.by_slot, rest);
        for key in old.into_values().flatten() {
            self.proxy.located.remove(&key);
            self.proxy.waiting.remove(&key);
        }
    }
}
