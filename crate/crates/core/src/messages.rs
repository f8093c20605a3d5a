//! Agreement protocol messages, Merkle leaves and the signed tuples.
//!
//! Signed tuples, one per message kind (all signatures cover the SHA-256
//! digest of the canonical encoding of the tuple):
//!
//! | kind        | tuple                                          |
//! |-------------|------------------------------------------------|
//! | PRE-PREPARE | `("PRE-PREPARE", v, n, H(O), R_r)`             |
//! | PREPARE     | `("PREPARE", v, n, h_pp, K_i, R_r)`            |
//! | COMMIT      | `("COMMIT", v, n, h_pp, K_i, A_r)`             |
//! | CHECKPOINT  | `("CHECKPOINT", n, state digest, K_i)`         |
//! | VIEW-CHANGE | `("VIEW-CHANGE", v', K_i, H(body))`            |
//! | NEW-VIEW    | `("NEW-VIEW", v', H(body))`                    |
//!
//! `h_pp` is the digest of the full PRE-PREPARE message, signature included.

use crate::canonical_struct;
use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{digest_of, sign_value, verify_value, Hash32, KeyPair, PublicKey, Signature};
use crate::domain::{FailureCode, GroupRegistry, InferenceResult, NodeIndex, Op, OpOutcome};
use crate::merkle::{leaf_hash, MerkleTree};

pub type View = u64;
pub type Seq = u64;

/// Digest of an agreement batch's op list, `H(O)`.
pub fn ops_digest(ops: &[Op]) -> Hash32 {
    digest_of(ops)
}

/// What a node reports for one op of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafBody {
    Result(InferenceResult),
    /// The node could not execute the request.
    Missing,
    Rejected(FailureCode),
    Update(OpOutcome),
    /// Placeholder leaf of a batch without ops.
    Empty,
}

impl Encode for LeafBody {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            LeafBody::Result(r) => {
                enc.tag(0);
                enc.put(r);
            }
            LeafBody::Missing => enc.tag(1),
            LeafBody::Rejected(c) => {
                enc.tag(2);
                enc.put(c);
            }
            LeafBody::Update(o) => {
                enc.tag(3);
                enc.put(o);
            }
            LeafBody::Empty => enc.tag(4),
        }
    }
}

impl Decode for LeafBody {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(LeafBody::Result(dec.get()?)),
            1 => Ok(LeafBody::Missing),
            2 => Ok(LeafBody::Rejected(dec.get()?)),
            3 => Ok(LeafBody::Update(dec.get()?)),
            4 => Ok(LeafBody::Empty),
            tag => Err(CodecError::InvalidTag { ty: "LeafBody", tag }),
        }
    }
}

/// A leaf of a node's result tree `R`: an op and what the node produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultLeaf {
    pub op_digest: Hash32,
    pub body: LeafBody,
}

canonical_struct!(ResultLeaf { op_digest, body });

impl ResultLeaf {
    pub fn hash(&self) -> Hash32 {
        leaf_hash(&self.to_canonical())
    }

    pub fn result(&self) -> Option<&InferenceResult> {
        match &self.body {
            LeafBody::Result(r) => Some(r),
            _ => None,
        }
    }
}

pub fn result_tree(leaves: &[ResultLeaf]) -> Option<MerkleTree> {
    MerkleTree::from_leaf_hashes(leaves.iter().map(ResultLeaf::hash).collect()).ok()
}

/// A leaf of an attestation tree `A`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttestationLeaf {
    /// Every result in `node`'s result tree with this root is attested.
    BatchRoot { node: NodeIndex, root: Hash32 },
    /// One result leaf of `node`'s result tree.
    Result { node: NodeIndex, leaf_hash: Hash32 },
    /// The op has no trustworthy result; `code` says why.
    Negative { op_digest: Hash32, code: FailureCode },
    /// Placeholder for batches with nothing to attest.
    Nothing,
}

impl Encode for AttestationLeaf {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            AttestationLeaf::BatchRoot { node, root } => {
                enc.tag(0);
                enc.put(node);
                enc.put(root);
            }
            AttestationLeaf::Result { node, leaf_hash } => {
                enc.tag(1);
                enc.put(node);
                enc.put(leaf_hash);
            }
            AttestationLeaf::Negative { op_digest, code } => {
                enc.tag(2);
                enc.put(op_digest);
                enc.put(code);
            }
            AttestationLeaf::Nothing => enc.tag(3),
        }
    }
}

impl Decode for AttestationLeaf {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(AttestationLeaf::BatchRoot {
                node: dec.get()?,
                root: dec.get()?,
            }),
            1 => Ok(AttestationLeaf::Result {
                node: dec.get()?,
                leaf_hash: dec.get()?,
            }),
            2 => Ok(AttestationLeaf::Negative {
                op_digest: dec.get()?,
                code: dec.get()?,
            }),
            3 => Ok(AttestationLeaf::Nothing),
            tag => Err(CodecError::InvalidTag {
                ty: "AttestationLeaf",
                tag,
            }),
        }
    }
}

impl AttestationLeaf {
    pub fn hash(&self) -> Hash32 {
        leaf_hash(&self.to_canonical())
    }
}

pub fn attestation_tree(leaves: &[AttestationLeaf]) -> Option<MerkleTree> {
    MerkleTree::from_leaf_hashes(leaves.iter().map(AttestationLeaf::hash).collect()).ok()
}

struct Tuple<'a> {
    label: &'static str,
    fields: &'a [&'a dyn Encode],
}

impl Encode for Tuple<'_> {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.put(self.label);
        for f in self.fields {
            f.encode_to(enc);
        }
    }
}

// `dyn Encode` needs these to be object safe; `to_canonical` has a default
// body and no generics, so it is.
fn sign_tuple(key: &KeyPair, label: &'static str, fields: &[&dyn Encode]) -> Signature {
    sign_value(key, &Tuple { label, fields })
}

fn verify_tuple(pk: &PublicKey, sig: &Signature, label: &'static str, fields: &[&dyn Encode]) -> bool {
    verify_value(pk, &Tuple { label, fields }, sig)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrePrepare {
    pub view: View,
    pub seq: Seq,
    pub ops_digest: Hash32,
    pub r_root: Hash32,
    pub sig: Signature,
}

canonical_struct!(PrePrepare {
    view,
    seq,
    ops_digest,
    r_root,
    sig
});

impl PrePrepare {
    pub fn new(key: &KeyPair, view: View, seq: Seq, ops_digest: Hash32, r_root: Hash32) -> Self {
        let sig = sign_tuple(key, "PRE-PREPARE", &[&view, &seq, &ops_digest, &r_root]);
        Self {
            view,
            seq,
            ops_digest,
            r_root,
            sig,
        }
    }

    pub fn verify(&self, primary: &PublicKey) -> bool {
        verify_pre_prepare(primary, self.view, self.seq, &self.ops_digest, &self.r_root, &self.sig)
    }

    /// `h_pp`, referenced by PREPARE and COMMIT messages.
    pub fn digest(&self) -> Hash32 {
        digest_of(self)
    }
}

pub fn verify_pre_prepare(
    pk: &PublicKey,
    view: View,
    seq: Seq,
    ops_digest: &Hash32,
    r_root: &Hash32,
    sig: &Signature,
) -> bool {
    verify_tuple(pk, sig, "PRE-PREPARE", &[&view, &seq, ops_digest, r_root])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepare {
    pub view: View,
    pub seq: Seq,
    pub pp_digest: Hash32,
    pub node: NodeIndex,
    pub r_root: Hash32,
    pub sig: Signature,
}

canonical_struct!(Prepare {
    view,
    seq,
    pp_digest,
    node,
    r_root,
    sig
});

impl Prepare {
    pub fn new(key: &KeyPair, view: View, seq: Seq, pp_digest: Hash32, node: NodeIndex, r_root: Hash32) -> Self {
        let sig = sign_tuple(key, "PREPARE", &[&view, &seq, &pp_digest, key.public_key(), &r_root]);
        Self {
            view,
            seq,
            pp_digest,
            node,
            r_root,
            sig,
        }
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        verify_prepare(pk, self.view, self.seq, &self.pp_digest, &self.r_root, &self.sig)
    }
}

pub fn verify_prepare(
    pk: &PublicKey,
    view: View,
    seq: Seq,
    pp_digest: &Hash32,
    r_root: &Hash32,
    sig: &Signature,
) -> bool {
    verify_tuple(pk, sig, "PREPARE", &[&view, &seq, pp_digest, pk, r_root])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub view: View,
    pub seq: Seq,
    pub pp_digest: Hash32,
    pub node: NodeIndex,
    pub a_root: Hash32,
    pub sig: Signature,
}

canonical_struct!(Commit {
    view,
    seq,
    pp_digest,
    node,
    a_root,
    sig
});

impl Commit {
    pub fn new(key: &KeyPair, view: View, seq: Seq, pp_digest: Hash32, node: NodeIndex, a_root: Hash32) -> Self {
        let sig = sign_tuple(key, "COMMIT", &[&view, &seq, &pp_digest, key.public_key(), &a_root]);
        Self {
            view,
            seq,
            pp_digest,
            node,
            a_root,
            sig,
        }
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        verify_commit(pk, self.view, self.seq, &self.pp_digest, &self.a_root, &self.sig)
    }
}

pub fn verify_commit(
    pk: &PublicKey,
    view: View,
    seq: Seq,
    pp_digest: &Hash32,
    a_root: &Hash32,
    sig: &Signature,
) -> bool {
    verify_tuple(pk, sig, "COMMIT", &[&view, &seq, pp_digest, pk, a_root])
}

/// PRE-PREPARE together with the batch and the primary's result tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PrePrepareBundle {
    pub msg: PrePrepare,
    pub ops: Vec<Op>,
    pub leaves: Vec<ResultLeaf>,
}

canonical_struct!(PrePrepareBundle { msg, ops, leaves });

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareBundle {
    pub msg: Prepare,
    pub leaves: Vec<ResultLeaf>,
}

canonical_struct!(PrepareBundle { msg, leaves });

#[derive(Debug, Clone, PartialEq)]
pub struct CommitBundle {
    pub msg: Commit,
    pub leaves: Vec<AttestationLeaf>,
}

canonical_struct!(CommitBundle { msg, leaves });

/// Digest of the ordered state after `seq`, agreed on by checkpoints.
pub fn state_digest(seq: Seq, registry: &GroupRegistry) -> Hash32 {
    digest_of(&(seq, registry.digest()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub seq: Seq,
    pub digest: Hash32,
    pub node: NodeIndex,
    pub sig: Signature,
}

canonical_struct!(Checkpoint {
    seq,
    digest,
    node,
    sig
});

impl Checkpoint {
    pub fn new(key: &KeyPair, seq: Seq, digest: Hash32, node: NodeIndex) -> Self {
        let sig = sign_tuple(key, "CHECKPOINT", &[&seq, &digest, key.public_key()]);
        Self {
            seq,
            digest,
            node,
            sig,
        }
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        verify_tuple(pk, &self.sig, "CHECKPOINT", &[&self.seq, &self.digest, pk])
    }
}

/// `N - f` matching checkpoint messages, or the genesis state with none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointCert {
    pub seq: Seq,
    pub digest: Hash32,
    pub sigs: Vec<Checkpoint>,
}

canonical_struct!(CheckpointCert { seq, digest, sigs });

impl CheckpointCert {
    pub fn genesis() -> Self {
        Self {
            seq: 0,
            digest: state_digest(0, &GroupRegistry::new()),
            sigs: Vec::new(),
        }
    }

    pub fn verify(&self, keys: &[PublicKey], quorum: usize) -> bool {
        if self.seq == 0 {
            return self.sigs.is_empty() && self.digest == Self::genesis().digest;
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.sigs {
            let Some(pk) = keys.get(c.node as usize) else {
                return false;
            };
            if c.seq != self.seq || c.digest != self.digest || !seen.insert(c.node) || !c.verify(pk) {
                return false;
            }
        }
        seen.len() >= quorum
    }
}

/// Proof that a batch prepared in some view: its PRE-PREPARE, the ops and
/// `N - f - 1` matching PREPAREs from distinct backups.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedProof {
    pub pre_prepare: PrePrepare,
    pub ops: Vec<Op>,
    pub prepares: Vec<Prepare>,
}

canonical_struct!(PreparedProof {
    pre_prepare,
    ops,
    prepares
});

impl PreparedProof {
    pub fn verify(&self, keys: &[PublicKey], f: usize) -> bool {
        let n = keys.len();
        let pp = &self.pre_prepare;
        let primary = crate::domain::primary_index(pp.view, n);
        if ops_digest(&self.ops) != pp.ops_digest || !pp.verify(&keys[primary as usize]) {
            return false;
        }
        let j = pp.digest();
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.prepares {
            let Some(pk) = keys.get(p.node as usize) else {
                return false;
            };
            if p.node == primary
                || p.view != pp.view
                || p.seq != pp.seq
                || p.pp_digest != j
                || !seen.insert(p.node)
                || !p.verify(pk)
            {
                return false;
            }
        }
        seen.len() + f + 1 >= n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewChange {
    pub new_view: View,
    pub node: NodeIndex,
    pub stable: CheckpointCert,
    pub prepared: Vec<PreparedProof>,
    pub sig: Signature,
}

canonical_struct!(ViewChange {
    new_view,
    node,
    stable,
    prepared,
    sig
});

impl ViewChange {
    fn body_digest(stable: &CheckpointCert, prepared: &[PreparedProof]) -> Hash32 {
        digest_of(&(stable, prepared))
    }

    pub fn new(
        key: &KeyPair,
        new_view: View,
        node: NodeIndex,
        stable: CheckpointCert,
        prepared: Vec<PreparedProof>,
    ) -> Self {
        let body = Self::body_digest(&stable, &prepared);
        let sig = sign_tuple(key, "VIEW-CHANGE", &[&new_view, key.public_key(), &body]);
        Self {
            new_view,
            node,
            stable,
            prepared,
            sig,
        }
    }

    pub fn verify(&self, keys: &[PublicKey], f: usize) -> bool {
        let Some(pk) = keys.get(self.node as usize) else {
            return false;
        };
        let body = Self::body_digest(&self.stable, &self.prepared);
        verify_tuple(pk, &self.sig, "VIEW-CHANGE", &[&self.new_view, pk, &body])
            && self.stable.verify(keys, keys.len() - f)
            && self.prepared.iter().all(|p| {
                p.pre_prepare.seq > self.stable.seq
                    && p.pre_prepare.view < self.new_view
                    && p.verify(keys, f)
            })
    }
}

/// What a new primary re-proposes: one op list per sequence number between
/// the latest stable checkpoint and the highest prepared batch.
pub fn reproposals(vcs: &[ViewChange]) -> (Seq, Vec<(Seq, Vec<Op>)>) {
    let min_s = vcs.iter().map(|vc| vc.stable.seq).max().unwrap_or(0);
    let mut best: std::collections::BTreeMap<Seq, &PreparedProof> = Default::default();
    for p in vcs.iter().flat_map(|vc| &vc.prepared) {
        let s = p.pre_prepare.seq;
        if s <= min_s {
            continue;
        }
        match best.get(&s) {
            Some(cur) if cur.pre_prepare.view >= p.pre_prepare.view => {}
            _ => {
                best.insert(s, p);
            }
        }
    }
    let max_s = best.keys().next_back().copied().unwrap_or(min_s);
    let out = (min_s + 1..=max_s)
        .map(|s| (s, best.get(&s).map(|p| p.ops.clone()).unwrap_or_default()))
        .collect();
    (min_s, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewView {
    pub view: View,
    pub view_changes: Vec<ViewChange>,
    /// `(n, H(O))` of every re-proposed batch.
    pub headers: Vec<(Seq, Hash32)>,
    pub sig: Signature,
}

canonical_struct!(NewView {
    view,
    view_changes,
    headers,
    sig
});

impl NewView {
    fn body_digest(vcs: &[ViewChange], headers: &[(Seq, Hash32)]) -> Hash32 {
        digest_of(&(vcs, headers))
    }

    pub fn new(key: &KeyPair, view: View, view_changes: Vec<ViewChange>) -> Self {
        let (_, props) = reproposals(&view_changes);
        let headers: Vec<(Seq, Hash32)> = props.iter().map(|(s, ops)| (*s, ops_digest(ops))).collect();
        let body = Self::body_digest(&view_changes, &headers);
        let sig = sign_tuple(key, "NEW-VIEW", &[&view, &body]);
        Self {
            view,
            view_changes,
            headers,
            sig,
        }
    }

    /// Checks the signature, that `N - f` distinct nodes asked for this view,
    /// and that the headers are exactly what those requests imply.
    pub fn verify(&self, keys: &[PublicKey], f: usize) -> bool {
        let n = keys.len();
        let primary = crate::domain::primary_index(self.view, n) as usize;
        let body = Self::body_digest(&self.view_changes, &self.headers);
        if !verify_tuple(&keys[primary], &self.sig, "NEW-VIEW", &[&self.view, &body]) {
            return false;
        }
        let mut seen = std::collections::BTreeSet::new();
        for vc in &self.view_changes {
            if vc.new_view != self.view || !seen.insert(vc.node) || !vc.verify(keys, f) {
                return false;
            }
        }
        if seen.len() < n - f {
            return false;
        }
        let (_, props) = reproposals(&self.view_changes);
        let expected: Vec<(Seq, Hash32)> = props.iter().map(|(s, ops)| (*s, ops_digest(ops))).collect();
        expected == self.headers
    }
}

/// Proof that a batch was ordered: its PRE-PREPARE, the ops and `N - f`
/// matching COMMITs.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedProof {
    pub pre_prepare: PrePrepare,
    pub ops: Vec<Op>,
    pub commits: Vec<Commit>,
}

canonical_struct!(OrderedProof {
    pre_prepare,
    ops,
    commits
});

impl OrderedProof {
    pub fn verify(&self, keys: &[PublicKey], f: usize) -> bool {
        let n = keys.len();
        let pp = &self.pre_prepare;
        let primary = crate::domain::primary_index(pp.view, n) as usize;
        if ops_digest(&self.ops) != pp.ops_digest || !pp.verify(&keys[primary]) {
            return false;
        }
        let j = pp.digest();
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.commits {
            let Some(pk) = keys.get(c.node as usize) else {
                return false;
            };
            if c.view != pp.view || c.seq != pp.seq || c.pp_digest != j || !seen.insert(c.node) || !c.verify(pk) {
                return false;
            }
        }
        seen.len() >= n - f
    }
}

/// State transfer: a stable checkpoint and the registry it certifies.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub checkpoint: CheckpointCert,
    pub registry: GroupRegistry,
}

canonical_struct!(StateSnapshot {
    checkpoint,
    registry
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fetch {
    PrePrepare { view: View, seq: Seq },
    /// A node's PREPARE and result tree, forwarded by whoever holds it.
    Prepare { view: View, seq: Seq, node: NodeIndex },
    Ordered { seq: Seq },
    State,
}

impl Encode for Fetch {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Fetch::PrePrepare { view, seq } => {
                enc.tag(0);
                enc.put(view);
                enc.put(seq);
            }
            Fetch::Prepare { view, seq, node } => {
                enc.tag(1);
                enc.put(view);
                enc.put(seq);
                enc.put(node);
            }
            Fetch::Ordered { seq } => {
                enc.tag(2);
                enc.put(seq);
            }
            Fetch::State => enc.tag(3),
        }
    }
}

impl Decode for Fetch {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(Fetch::PrePrepare {
                view: dec.get()?,
                seq: dec.get()?,
            }),
            1 => Ok(Fetch::Prepare {
                view: dec.get()?,
                seq: dec.get()?,
                node: dec.get()?,
            }),
            2 => Ok(Fetch::Ordered { seq: dec.get()? }),
            3 => Ok(Fetch::State),
            tag => Err(CodecError::InvalidTag { ty: "Fetch", tag }),
        }
    }
}

/// Node-to-node traffic.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerMsg {
    /// A client op fanned out by a proxy.
    Forward(Op),
    PrePrepare(PrePrepareBundle),
    Prepare(PrepareBundle),
    Commit(CommitBundle),
    Checkpoint(Checkpoint),
    ViewChange(ViewChange),
    NewView(NewView),
    Fetch(Fetch),
    Ordered(OrderedProof),
    State(StateSnapshot),
}

impl Encode for PeerMsg {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            PeerMsg::Forward(m) => {
                enc.tag(0);
                enc.put(m);
            }
            PeerMsg::PrePrepare(m) => {
                enc.tag(1);
                enc.put(m);
            }
            PeerMsg::Prepare(m) => {
                enc.tag(2);
                enc.put(m);
            }
            PeerMsg::Commit(m) => {
                enc.tag(3);
                enc.put(m);
            }
            PeerMsg::Checkpoint(m) => {
                enc.tag(4);
                enc.put(m);
            }
            PeerMsg::ViewChange(m) => {
                enc.tag(5);
                enc.put(m);
            }
            PeerMsg::NewView(m) => {
                enc.tag(6);
                enc.put(m);
            }
            PeerMsg::Fetch(m) => {
                enc.tag(7);
                enc.put(m);
            }
            PeerMsg::Ordered(m) => {
                enc.tag(8);
                enc.put(m);
            }
            PeerMsg::State(m) => {
                enc.tag(9);
                enc.put(m);
            }
        }
    }
}

impl Decode for PeerMsg {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.tag()? {
            0 => PeerMsg::Forward(dec.get()?),
            1 => PeerMsg::PrePrepare(dec.get()?),
            2 => PeerMsg::Prepare(dec.get()?),
            3 => PeerMsg::Commit(dec.get()?),
            4 => PeerMsg::Checkpoint(dec.get()?),
            5 => PeerMsg::ViewChange(dec.get()?),
            6 => PeerMsg::NewView(dec.get()?),
            7 => PeerMsg::Fetch(dec.get()?),
            8 => PeerMsg::Ordered(dec.get()?),
            9 => PeerMsg::State(dec.get()?),
            tag => return Err(CodecError::InvalidTag { ty: "PeerMsg", tag }),
        })
    }
}

impl PeerMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            PeerMsg::Forward(_) => "forward",
            PeerMsg::PrePrepare(_) => "pre-prepare",
            PeerMsg::Prepare(_) => "prepare",
            PeerMsg::Commit(_) => "commit",
            PeerMsg::Checkpoint(_) => "checkpoint",
            PeerMsg::ViewChange(_) => "view-change",
            PeerMsg::NewView(_) => "new-view",
            PeerMsg::Fetch(_) => "fetch",
            PeerMsg::Ordered(_) => "ordered",
            PeerMsg::State(_) => "state",
        }
    }

    /// Overwrites every signature in the message with garbage of the same
    /// length. Used to inject bad-signature faults.
    pub fn corrupt_signatures(&mut self) {
        fn flip(sig: &mut Signature) {
            for b in sig.0.iter_mut() {
                *b ^= 0x5A;
            }
        }
        match self {
            PeerMsg::Forward(_) | PeerMsg::Fetch(_) | PeerMsg::State(_) => {}
            PeerMsg::PrePrepare(b) => flip(&mut b.msg.sig),
            PeerMsg::Prepare(b) => flip(&mut b.msg.sig),
            PeerMsg::Commit(b) => flip(&mut b.msg.sig),
            PeerMsg::Checkpoint(c) => flip(&mut c.sig),
            PeerMsg::ViewChange(v) => flip(&mut v.sig),
            PeerMsg::NewView(v) => flip(&mut v.sig),
            PeerMsg::Ordered(o) => {
                for c in o.commits.iter_mut() {
                    flip(&mut c.sig);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize) -> Vec<KeyPair> {
        (0..n).map(|i| KeyPair::from_label(&format!("m{i}"))).collect()
    }

    #[test]
    fn signed_tuples_bind_every_field() {
        let k = KeyPair::from_label("p");
        let h = Hash32([1; 32]);
        let pp = PrePrepare::new(&k, 3, 7, h, Hash32([2; 32]));
        assert!(pp.verify(k.public_key()));
        let mut bad = pp.clone();
        bad.seq = 8;
        assert!(!bad.verify(k.public_key()));
        let p = Prepare::new(&k, 3, 7, pp.digest(), 1, h);
        assert!(p.verify(k.public_key()));
        let c = Commit::new(&k, 3, 7, pp.digest(), 1, h);
        assert!(c.verify(k.public_key()));
        // A PREPARE signature is not a COMMIT signature over the same fields.
        assert!(!verify_commit(k.public_key(), 3, 7, &pp.digest(), &h, &p.sig));
    }

    #[test]
    fn pp_digest_covers_signature() {
        let a = KeyPair::from_label("a");
        let b = KeyPair::from_label("b");
        let pa = PrePrepare::new(&a, 0, 1, Hash32::ZERO, Hash32::ZERO);
        let pb = PrePrepare::new(&b, 0, 1, Hash32::ZERO, Hash32::ZERO);
        assert_ne!(pa.digest(), pb.digest());
    }

    #[test]
    fn reproposals_fill_gaps_with_null_batches() {
        let ks = keys(4);
        let pk: Vec<PublicKey> = ks.iter().map(|k| k.public_key().clone()).collect();
        let ops: Vec<Op> = Vec::new();
        let pp = PrePrepare::new(&ks[0], 0, 3, ops_digest(&ops), Hash32::ZERO);
        let prepares = (1..3)
            .map(|i| Prepare::new(&ks[i], 0, 3, pp.digest(), i as NodeIndex, Hash32::ZERO))
            .collect();
        let proof = PreparedProof {
            pre_prepare: pp,
            ops,
            prepares,
        };
        assert!(proof.verify(&pk, 1));
        let vcs: Vec<ViewChange> = (1..4)
            .map(|i| {
                let prepared = if i == 1 { vec![proof.clone()] } else { vec![] };
                ViewChange::new(&ks[i], 1, i as NodeIndex, CheckpointCert::genesis(), prepared)
            })
            .collect();
        assert!(vcs.iter().all(|vc| vc.verify(&pk, 1)));
        let (min_s, props) = reproposals(&vcs);
        assert_eq!(min_s, 0);
        assert_eq!(props.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        let nv = NewView::new(&ks[1], 1, vcs.clone());
        assert!(nv.verify(&pk, 1));
        let mut forged = nv.clone();
        forged.headers.pop();
        assert!(!forged.verify(&pk, 1));
        let short = NewView::new(&ks[1], 1, vcs[..2].to_vec());
        assert!(!short.verify(&pk, 1));
    }

    #[test]
    fn prepared_proof_needs_enough_backups() {
        let ks = keys(4);
        let pk: Vec<PublicKey> = ks.iter().map(|k| k.public_key().clone()).collect();
        let pp = PrePrepare::new(&ks[0], 0, 1, ops_digest(&[]), Hash32::ZERO);
        let one = vec![Prepare::new(&ks[1], 0, 1, pp.digest(), 1, Hash32::ZERO)];
        let proof = PreparedProof {
            pre_prepare: pp.clone(),
            ops: vec![],
            prepares: one.clone(),
        };
        assert!(!proof.verify(&pk, 1));
        let dup = PreparedProof {
            pre_prepare: pp,
            ops: vec![],
            prepares: vec![one[0].clone(), one[0].clone()],
        };
        assert!(!dup.verify(&pk, 1));
    }

    #[test]
    fn peer_messages_round_trip() {
        let k = KeyPair::from_label("x");
        let pp = PrePrepare::new(&k, 0, 1, ops_digest(&[]), Hash32::ZERO);
        let msgs = vec![
            PeerMsg::PrePrepare(PrePrepareBundle {
                msg: pp.clone(),
                ops: vec![],
                leaves: vec![ResultLeaf {
                    op_digest: Hash32::ZERO,
                    body: LeafBody::Empty,
                }],
            }),
            PeerMsg::Fetch(Fetch::Prepare { view: 1, seq: 2, node: 3 }),
            PeerMsg::Checkpoint(Checkpoint::new(&k, 4, Hash32::ZERO, 0)),
            PeerMsg::Commit(CommitBundle {
                msg: Commit::new(&k, 0, 1, pp.digest(), 0, Hash32::ZERO),
                leaves: vec![AttestationLeaf::Nothing],
            }),
        ];
        for m in msgs {
            assert_eq!(PeerMsg::from_canonical(&m.to_canonical()).unwrap(), m);
        }
    }
}
