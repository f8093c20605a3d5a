//! Batch construction on the primary.

use std::collections::HashSet;
use std::time::Duration;

use super::ordering::plan_batch;
use super::{empty_leaf, Construction, Replica, Status, Strategy};
use crate::domain::{Op, OpPlan};
use crate::messages::{ops_digest, result_tree, LeafBody, PeerMsg, PrePrepare, PrePrepareBundle, ResultLeaf, Seq};

fn make_bundle(r: &Replica, seq: Seq, ops: Vec<Op>, leaves: Vec<ResultLeaf>) -> PrePrepareBundle {
    let root = result_tree(&leaves).expect("non-empty").root();
    let msg = PrePrepare::new(&r.cfg.key, r.view, seq, ops_digest(&ops), root);
    PrePrepareBundle { msg, ops, leaves }
}

impl Replica {
    pub(super) fn propose(&mut self, now: Duration) {
        if self.status != Status::Normal || !self.is_primary() || self.cfg.behavior.mute_primary {
            return;
        }
        let owners = self.cfg.cluster.owners.clone();
        while let Some((s, _)) = self.reproposals.front() {
            let s = *s;
            if s > self.last_planned + 1 {
                // Behind the new view's starting point; wait for state.
                return;
            }
            let (_, ops) = self.reproposals.pop_front().expect("non-empty");
            self.planned_keys.extend(ops.iter().map(Op::key));
            if s <= self.stable.seq {
                continue;
            }
            let plans = if s <= self.last_ordered {
                match self.ordered.get(&s) {
                    Some(e) if ops_digest(&e.ops) == ops_digest(&ops) => e.plans.clone(),
                    _ => continue,
                }
            } else {
                let plans = plan_batch(&self.tentative, &ops, &owners);
                for op in &ops {
                    self.tentative.apply(op, &owners);
                }
                self.last_planned = s;
                plans
            };
            self.constructions.insert(
                s,
                Construction {
                    ops,
                    plans,
                },
            );
        }
        let pipeline = u64::from(self.cfg.cluster.agree_pipeline);
        let limit = self.stable.seq + self.window();
        while std::mem::take(&mut self.propose_dirty)
            && self.last_planned - self.last_ordered < pipeline
            && self.last_planned < limit
        {
            let ops = self.pick_batch(now);
            if ops.is_empty() {
                break;
            }
            // More may be ready than one batch holds.
            self.propose_dirty = true;
            let s = self.last_planned + 1;
            let plans = plan_batch(&self.tentative, &ops, &owners);
            for op in &ops {
                self.tentative.apply(op, &owners);
                self.planned_keys.insert(op.key());
            }
            self.last_planned = s;
            self.constructions.insert(
                s,
                Construction {
                    ops,
                    plans,
                },
            );
        }
        self.finalize_constructions(now);
    }

    /// Ops for the next batch, in pool order.
    ///
    /// Under execute/agree/attest a request joins a batch only once this
    /// node's own result is in; under agree/execute any op is taken.
    fn pick_batch(&mut self, now: Duration) -> Vec<Op> {
        let max = self.cfg.cluster.agree_batch_max as usize;
        let eager = self.cfg.strategy == Strategy::ExecuteAgreeAttest;
        let owners = self.cfg.cluster.owners.clone();
        let candidates: Vec<Op> = self
            .pool
            .iter()
            .filter(|op| !self.planned_keys.contains(&op.key()))
            .cloned()
            .collect();
        let mut scratch = None;
        let mut seen = HashSet::new();
        let mut ops = Vec::new();
        for op in candidates {
            if ops.len() >= max {
                break;
            }
            let include = match &op {
                Op::Update(_) => true,
                Op::Request(r) => {
                    if seen.contains(&op.key()) {
                        continue;
                    }
                    let reg = scratch.as_ref().unwrap_or(&self.tentative);
                    match reg.plan_request(r) {
                        OpPlan::Execute {
                            key,
                            group_id,
                            version,
                            ..
                        } if eager => {
                            if self.engine.result(&key, version).is_some()
                                || (self.committed.version(&group_id, version).is_some()
                                    && !self.engine.is_resident(&group_id, version))
                            {
                                true
                            } else {
                                if !self.engine.knows(&key) {
                                    let _ = self.engine.submit(r, now);
                                }
                                false
                            }
                        }
                        _ => true,
                    }
                }
            };
            if !include {
                continue;
            }
            if matches!(op, Op::Update(_)) || scratch.is_some() {
                scratch
                    .get_or_insert_with(|| self.tentative.clone())
                    .apply(&op, &owners);
            }
            seen.insert(op.key());
            ops.push(op);
        }
        ops
    }

    /// Sends PRE-PREPAREs for planned batches, in sequence order, as soon as
    /// this node's own results are in.
    fn finalize_constructions(&mut self, now: Duration) {
        while let Some((&s, c)) = self.constructions.first_key_value() {
            let (ops, plans) = (c.ops.clone(), c.plans.clone());
            let Some(leaves) = self.own_leaves(s, &ops, &plans, now) else {
                return;
            };
            self.constructions.remove(&s);
            self.send_pre_prepare(s, ops, plans, leaves, now);
        }
    }

    fn send_pre_prepare(&mut self, s: Seq, ops: Vec<Op>, plans: Vec<crate::domain::OpPlan>, mut leaves: Vec<ResultLeaf>, now: Duration) {
        let behavior = self.cfg.behavior;
        if behavior.stale_version_primary {
            for l in leaves.iter_mut() {
                if let LeafBody::Result(r) = &mut l.body {
                    r.group_version = r.group_version.saturating_sub(1);
                }
            }
        }
        let bundle = make_bundle(self, s, ops, leaves);
        if behavior.equivocate {
            let keep = bundle.ops.len().saturating_sub(1);
            let (alt_ops, alt_leaves) = if keep == 0 {
                (Vec::new(), vec![empty_leaf()])
            } else {
                (bundle.ops[..keep].to_vec(), bundle.leaves[..keep].to_vec())
            };
            let alt = make_bundle(self, s, alt_ops, alt_leaves);
            let half = (self.n / 2) as u32;
            for to in 0..self.n as u32 {
                let b = if to < half { bundle.clone() } else { alt.clone() };
                self.send(to, PeerMsg::PrePrepare(b));
            }
        } else {
            self.broadcast(PeerMsg::PrePrepare(bundle.clone()));
        }
        let v = self.view;
        let leaves = bundle.leaves.clone();
        self.install_accepted(bundle, plans, now);
        let slot = self.slots.get_mut(&(s, v)).expect("just installed");
        slot.own_sent = true;
        slot.own_leaves = Some(leaves);
        self.check_prepared(s, v, now);
    }
}
