//! Post-hoc checks over a finished run. Nothing here trusts the replicas:
//! logs are compared across honest nodes, the registry fold is replayed
//! from scratch and every certificate a client accepted is re-verified.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use quorate_core::certificate::{verify_cert, verify_failure_cert};
use quorate_core::client::Outcome;
use quorate_core::crypto::Hash32;
use quorate_core::distance::{diameter, Metric};
use quorate_core::domain::{GroupRegistry, NodeIndex, Op, OpPlan};
use quorate_core::messages::{ops_digest, Seq, View};
use quorate_core::trace::TraceEvent;

use crate::config::Fault;
use crate::sim::ScenarioRun;

#[derive(Debug, Clone, Default)]
pub struct SafetyReport {
    /// Honest nodes ordered different batches at one sequence number.
    pub divergent_logs: Vec<String>,
    /// A certificate covers a result no honest node placed in its quorum,
    /// or the covered set breaks the size or threshold bound.
    pub outside_quorum: Vec<String>,
    /// A covered result has fewer than `f + 1` attestations, or none from an
    /// honest node.
    pub thin_attestations: Vec<String>,
    /// A result or logged version disagrees with the replayed registry.
    pub version_violations: Vec<String>,
    /// A client accepted something that does not re-verify.
    pub invalid_certificates: Vec<String>,
    /// An honest quorum included a result beyond the threshold.
    pub bad_quorums: Vec<String>,
    pub ordered_batches: usize,
    pub certificates_checked: usize,
}

impl SafetyReport {
    pub fn violations(&self) -> usize {
        self.divergent_logs.len()
            + self.outside_quorum.len()
            + self.thin_attestations.len()
            + self.version_violations.len()
            + self.invalid_certificates.len()
            + self.bad_quorums.len()
    }

    pub fn is_safe(&self) -> bool {
        self.violations() == 0
    }

    pub fn summary(&self) -> String {
        let mut all: Vec<&String> = self
            .divergent_logs
            .iter()
            .chain(&self.outside_quorum)
            .chain(&self.thin_attestations)
            .chain(&self.version_violations)
            .chain(&self.invalid_certificates)
            .chain(&self.bad_quorums)
            .collect();
        all.truncate(5);
        format!(
            "{} violations over {} batches and {} certificates {:?}",
            self.violations(),
            self.ordered_batches,
            self.certificates_checked,
            all
        )
    }
}

struct Logged<'a> {
    digest: Hash32,
    ops: &'a [Op],
    versions: &'a [Option<u64>],
}

/// Attested outputs by `(seq, op digest)`, then honest node.
type Attestations = BTreeMap<(Seq, Hash32), BTreeMap<NodeIndex, (BTreeSet<NodeIndex>, BTreeMap<NodeIndex, Vec<f64>>)>>;

pub fn check_safety(run: &ScenarioRun) -> SafetyReport {
    let mut rep = SafetyReport::default();
    let honest = |i: NodeIndex| run.faults.is_honest(i);

    // (a) Honest ordered logs agree seq by seq.
    let mut logs: BTreeMap<NodeIndex, BTreeMap<Seq, Logged>> = BTreeMap::new();
    let mut attested: Attestations = BTreeMap::new();
    for (_, ev) in run.trace.node_events() {
        match ev {
            TraceEvent::Ordered {
                node,
                seq,
                ops,
                versions,
                ..
            } if honest(*node) => {
                let entry = Logged {
                    digest: ops_digest(ops),
                    ops,
                    versions,
                };
                let log = logs.entry(*node).or_default();
                if let Some(prev) = log.get(seq) {
                    if prev.digest != entry.digest {
                        rep.divergent_logs
                            .push(format!("node {node} ordered two batches at seq {seq}"));
                    }
                } else {
                    log.insert(*seq, entry);
                }
            }
            TraceEvent::Attested {
                node,
                seq,
                op_digest,
                metric,
                epsilon,
                outputs,
                selected,
                satisfied,
                ..
            } if honest(*node) => {
                check_quorum(run, *node, *seq, *metric, *epsilon, outputs, selected, *satisfied, &mut rep);
                attested
                    .entry((*seq, *op_digest))
                    .or_default()
                    .insert(*node, (selected.clone(), outputs.clone()));
            }
            _ => {}
        }
    }
    let mut merged: BTreeMap<Seq, &Logged> = BTreeMap::new();
    for (node, log) in &logs {
        for (seq, entry) in log {
            match merged.get(seq) {
                Some(other) if other.digest != entry.digest => rep
                    .divergent_logs
                    .push(format!("seq {seq}: node {node} disagrees with another honest node")),
                Some(_) => {}
                None => {
                    merged.insert(*seq, entry);
                }
            }
        }
    }
    rep.ordered_batches = merged.len();

    // Replay the registry fold over the contiguous prefix of the log.
    let mut registry = GroupRegistry::new();
    let mut expected: BTreeMap<(Seq, usize), OpPlan> = BTreeMap::new();
    let mut next = 1;
    while let Some(entry) = merged.get(&next) {
        for (i, op) in entry.ops.iter().enumerate() {
            expected.insert((next, i), registry.apply(op, &[]));
        }
        next += 1;
    }
    for (node, log) in &logs {
        for (seq, entry) in log {
            for (i, logged) in entry.versions.iter().enumerate() {
                let Some(plan) = expected.get(&(*seq, i)) else {
                    continue;
                };
                if *logged != plan_version(plan) {
                    rep.version_violations.push(format!(
                        "node {node} seq {seq} op {i}: logged version {logged:?}, replay gives {:?}",
                        plan_version(plan)
                    ));
                }
            }
        }
    }

    // (b), (c) and versions for every certificate a client accepted.
    let keys = &run.keys;
    for rec in &run.clients {
        match &rec.outcome {
            Some(Outcome::Certified { results, cert, .. }) => {
                rep.certificates_checked += 1;
                let Op::Request(req) = &rec.op else {
                    rep.invalid_certificates
                        .push(format!("session {} got a certificate for an update", rec.session));
                    continue;
                };
                if !verify_cert(req, results, cert, keys, run.f) {
                    rep.invalid_certificates
                        .push(format!("session {}: certificate does not verify", rec.session));
                    continue;
                }
                let op_digest = rec.op.digest();
                let entry = merged.get(&cert.seq);
                let index = entry.and_then(|e| e.ops.iter().position(|o| o.digest() == op_digest));
                if entry.is_some() && index.is_none() {
                    rep.outside_quorum.push(format!(
                        "session {}: op not in the honest log at seq {}",
                        rec.session, cert.seq
                    ));
                }
                // Seqs past the replayable prefix or never logged by an
                // honest node before the run ended are not judged here.
                let plan = index.and_then(|i| expected.get(&(cert.seq, i)));
                match plan {
                    Some(OpPlan::Execute {
                        version,
                        distance,
                        epsilon,
                        ..
                    }) => {
                        if results.iter().any(|r| r.group_version != *version) {
                            rep.version_violations.push(format!(
                                "session {}: certified version {} but version {version} was active at seq {}",
                                rec.session, results[0].group_version, cert.seq
                            ));
                        }
                        let outs: Vec<&[f64]> = results.iter().map(|r| r.output.as_slice()).collect();
                        let d = diameter(distance.metric, &outs).unwrap_or(f64::INFINITY);
                        if results.len() < run.n - run.f || !(d <= *epsilon) {
                            rep.outside_quorum.push(format!(
                                "session {}: {} results with diameter {d} against {epsilon}",
                                rec.session,
                                results.len()
                            ));
                        }
                    }
                    Some(_) => rep.version_violations.push(format!(
                        "session {}: certified op was not executable at seq {}",
                        rec.session, cert.seq
                    )),
                    None => {}
                }
                let votes = attested.get(&(cert.seq, op_digest));
                for r in results {
                    let k = r.node_index;
                    let in_honest_quorum = votes.is_some_and(|v| {
                        v.values()
                            .any(|(sel, outs)| sel.contains(&k) && outs.get(&k) == Some(&r.output))
                    });
                    if !in_honest_quorum {
                        rep.outside_quorum.push(format!(
                            "session {}: result of node {k} is in no honest quorum",
                            rec.session
                        ));
                    }
                    let atts = cert.attestations.get(&k).map(|a| a.keys().copied().collect::<Vec<_>>());
                    let atts = atts.unwrap_or_default();
                    if atts.len() <= run.f || !atts.iter().any(|i| honest(*i)) {
                        rep.thin_attestations.push(format!(
                            "session {}: result of node {k} has attesters {atts:?}",
                            rec.session
                        ));
                    }
                }
            }
            Some(Outcome::Failed { cert, .. }) => {
                rep.certificates_checked += 1;
                if !verify_failure_cert(&rec.op, cert, keys, run.f) {
                    rep.invalid_certificates
                        .push(format!("session {}: failure certificate does not verify", rec.session));
                }
                if cert.attestations.len() <= run.f || !cert.attestations.keys().any(|i| honest(*i)) {
                    rep.thin_attestations
                        .push(format!("session {}: failure certificate too thin", rec.session));
                }
            }
            _ => {}
        }
    }
    rep
}

fn plan_version(plan: &OpPlan) -> Option<u64> {
    match plan {
        OpPlan::Execute { version, .. } => Some(*version),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn check_quorum(
    run: &ScenarioRun,
    node: NodeIndex,
    seq: Seq,
    metric: Metric,
    epsilon: f64,
    outputs: &BTreeMap<NodeIndex, Vec<f64>>,
    selected: &BTreeSet<NodeIndex>,
    satisfied: bool,
    rep: &mut SafetyReport,
) {
    if !satisfied {
        return;
    }
    let outs: Vec<&[f64]> = selected
        .iter()
        .filter_map(|k| outputs.get(k).map(Vec::as_slice))
        .collect();
    let d = diameter(metric, &outs).unwrap_or(f64::INFINITY);
    if outs.len() != selected.len() || selected.len() < run.n - run.f || !(d <= epsilon) {
        rep.bad_quorums.push(format!(
            "node {node} seq {seq}: quorum {selected:?} with diameter {d}"
        ));
    }
    // A node shifted past the threshold must never be selected, as long as
    // the honest results themselves agree.
    let margin = 2.0 * run.config.noise;
    for k in selected {
        if let Fault::CorruptResult { magnitude } = run.faults.fault_of(*k) {
            if magnitude * run.config.epsilon > epsilon + margin {
                rep.bad_quorums
                    .push(format!("node {node} seq {seq}: selected corrupted node {k}"));
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LivenessReport {
    /// Distinct views above 0 that some honest node entered.
    pub views_entered: BTreeSet<View>,
    /// Entered views whose primary is not `view mod n`.
    pub wrong_primaries: Vec<View>,
    /// All client sessions, group updates included.
    pub sessions: usize,
    /// Sessions that ended with a verified certificate or, for updates, an
    /// outcome reported by `f + 1` proxies.
    pub completed: usize,
    pub max_latency: Duration,
    pub deadlocked: bool,
}

impl LivenessReport {
    pub fn view_changes(&self) -> usize {
        self.views_entered.len()
    }

    /// Every session completed within `limit`.
    pub fn all_completed_within(&self, limit: Duration) -> bool {
        !self.deadlocked && self.sessions > 0 && self.completed == self.sessions && self.max_latency <= limit
    }
}

pub fn check_liveness(run: &ScenarioRun) -> LivenessReport {
    let mut rep = LivenessReport::default();
    for (_, ev) in run.trace.node_events() {
        if let TraceEvent::ViewEntered { node, view, primary } = ev {
            if *view > 0 && run.faults.is_honest(*node) {
                rep.views_entered.insert(*view);
                if *primary as u64 != *view % run.n as u64 {
                    rep.wrong_primaries.push(*view);
                }
            }
        }
    }
    for rec in &run.clients {
        rep.sessions += 1;
        let done = match &rec.outcome {
            Some(o @ (Outcome::Certified { .. } | Outcome::Failed { .. })) => rec.is_request() && o.is_certified(),
            Some(Outcome::Update { .. }) => !rec.is_request(),
            _ => false,
        };
        if done {
            rep.completed += 1;
        }
        rep.max_latency = rep.max_latency.max(rec.latency().unwrap_or(Duration::MAX));
    }
    rep.deadlocked = run.deadlock.is_some();
    rep
}
