//! View changes.

use std::collections::BTreeSet;
use std::time::Duration;

use super::{Replica, Status};
use crate::messages::{reproposals, NewView, PeerMsg, View, ViewChange};
use crate::trace::TraceEvent;

/// View-change requests further ahead than this are ignored.
const MAX_VIEW_JUMP: View = 1024;

impl Replica {
    fn target_view(&self) -> View {
        match self.status {
            Status::Normal => self.view,
            Status::ViewChanging { target, .. } => target,
        }
    }

    pub(super) fn start_view_change(&mut self, target: View, now: Duration) {
        if target <= self.target_view() {
            return;
        }
        self.status = Status::ViewChanging { target, since: now };
        self.vc_attempts += 1;
        let me = self.cfg.index;
        let prepared = self
            .prepared_proofs
            .values()
            .filter(|p| p.pre_prepare.seq > self.stable.seq && p.pre_prepare.view < target)
            .cloned()
            .collect();
        let vc = ViewChange::new(&self.cfg.key, target, me, self.stable.clone(), prepared);
        self.view_changes.entry(target).or_default().insert(me, vc.clone());
        self.broadcast(PeerMsg::ViewChange(vc));
        self.trace(TraceEvent::ViewChangeSent { node: me, new_view: target });
        self.check_new_view(target, now);
    }

    pub(super) fn on_view_change(&mut self, vc: ViewChange, now: Duration) {
        let v = vc.new_view;
        if v <= self.view {
            // A straggler asking for the view this node leads: repeat the
            // announcement.
            if v == self.view && self.status == Status::Normal && self.new_view_sent == Some(v) {
                if let Some(nv) = self.last_new_view.clone() {
                    self.send(vc.node, PeerMsg::NewView(nv));
                }
            }
            return;
        }
        if v > self.view + MAX_VIEW_JUMP
            || self.view_changes.get(&v).is_some_and(|m| m.contains_key(&vc.node))
            || !vc.verify(&self.keys, self.f)
        {
            return;
        }
        self.view_changes.entry(v).or_default().insert(vc.node, vc);
        // Join once f + 1 nodes want a later view than this node does.
        let current = self.target_view();
        let mut nodes = BTreeSet::new();
        let mut smallest = None;
        for (w, m) in self.view_changes.range(current + 1..) {
            nodes.extend(m.keys().copied());
            smallest.get_or_insert(*w);
        }
        if nodes.len() > self.f {
            if let Some(w) = smallest {
                self.start_view_change(w, now);
            }
        }
        self.check_new_view(v, now);
    }

    fn check_new_view(&mut self, v: View, now: Duration) {
        if self.primary_of(v) != self.cfg.index
            || self.new_view_sent >= Some(v)
            || !matches!(self.status, Status::ViewChanging { target, .. } if target == v)
        {
            return;
        }
        let Some(vcs) = self.view_changes.get(&v).filter(|m| m.len() >= self.quorum()) else {
            return;
        };
        let vcs: Vec<ViewChange> = vcs.values().cloned().collect();
        let nv = NewView::new(&self.cfg.key, v, vcs);
        self.new_view_sent = Some(v);
        self.last_new_view = Some(nv.clone());
        self.broadcast(PeerMsg::NewView(nv.clone()));
        self.enter_view(&nv, now);
    }

    pub(super) fn on_new_view(&mut self, nv: NewView, now: Duration) {
        if nv.view < self.view || (nv.view == self.view && self.status == Status::Normal) {
            return;
        }
        if nv.view > self.view + MAX_VIEW_JUMP || !nv.verify(&self.keys, self.f) {
            return;
        }
        self.enter_view(&nv, now);
    }

    fn enter_view(&mut self, nv: &NewView, now: Duration) {
        let v = nv.view;
        let me = self.cfg.index;
        self.view = v;
        self.status = Status::Normal;
        self.vc_attempts = 0;
        self.last_progress = now;
        if let Some(best) = nv.view_changes.iter().map(|vc| &vc.stable).max_by_key(|c| c.seq) {
            if best.seq > self.stable.seq {
                self.set_stable(best.clone());
            }
        }
        let (_, props) = reproposals(&nv.view_changes);
        self.nv_headers = nv.headers.iter().copied().collect();
        self.tentative = self.committed.clone();
        self.last_planned = self.last_ordered;
        self.constructions.clear();
        self.pp_buffer.clear();
        self.waiting_own.clear();
        self.planned_keys.clear();
        self.reproposals.clear();
        if self.primary_of(v) == me {
            self.reproposals = props.into();
        }
        self.view_changes.retain(|w, _| *w > v);
        self.propose_dirty = true;
        self.trace(TraceEvent::ViewEntered {
            node: me,
            view: v,
            primary: self.primary_of(v),
        });
        for (from, msg) in std::mem::take(&mut self.future) {
            self.on_peer(from, msg, now);
        }
    }
}
