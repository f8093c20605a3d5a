//! Inference certificates: assembly from agreement messages and client-side
//! verification.
//!
//! A certificate `<v, n, H(O), S, P, D>` carries, besides `v`, `n` and
//! `H(O)`, the primary's result-tree root so the PRE-PREPARE digest `h_pp`
//! can be recomputed. `S` maps node index to its ordering signature
//! (PRE-PREPARE for the primary, PREPARE otherwise) and its COMMIT signature;
//! `P` holds one result-tree path per returned result; `D` holds, per
//! returned result, one attestation-tree path per attesting node.
//!
//! Verification is strict: every signature in `S` must be used, paths must
//! agree with their claimed leaf index, and results must be sorted by node.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::canonical_struct;
use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{Hash32, PublicKey, Signature};
use crate::domain::{primary_index, FailureCode, InferenceRequest, InferenceResult, NodeIndex, Op};
use crate::merkle::{root_from_leaf_hash, AuthPath, MerkleTree};
use crate::messages::{
    verify_commit, verify_pre_prepare, verify_prepare, AttestationLeaf, Commit, LeafBody, PrePrepare,
    ResultLeaf, Seq, View,
};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeSigs {
    /// PRE-PREPARE signature for the primary, PREPARE signature otherwise.
    pub order: Option<Signature>,
    pub commit: Option<Signature>,
}

canonical_struct!(NodeSigs { order, commit });

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestationPath {
    /// Path to an `AttestationLeaf::Result` naming the result's leaf.
    Direct(AuthPath),
    /// Path to an `AttestationLeaf::BatchRoot` naming the result tree.
    ViaBatchRoot(AuthPath),
}

impl AttestationPath {
    pub fn path(&self) -> &AuthPath {
        match self {
            AttestationPath::Direct(p) | AttestationPath::ViaBatchRoot(p) => p,
        }
    }
}

impl Encode for AttestationPath {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            AttestationPath::Direct(p) => {
                enc.tag(0);
                enc.put(p);
            }
            AttestationPath::ViaBatchRoot(p) => {
                enc.tag(1);
                enc.put(p);
            }
        }
    }
}

impl Decode for AttestationPath {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(AttestationPath::Direct(dec.get()?)),
            1 => Ok(AttestationPath::ViaBatchRoot(dec.get()?)),
            tag => Err(CodecError::InvalidTag {
                ty: "AttestationPath",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceCertificate {
    pub view: View,
    pub seq: Seq,
    pub ops_digest: Hash32,
    pub primary_root: Hash32,
    pub signatures: BTreeMap<NodeIndex, NodeSigs>,
    pub result_paths: BTreeMap<NodeIndex, AuthPath>,
    pub attestations: BTreeMap<NodeIndex, BTreeMap<NodeIndex, AttestationPath>>,
}

canonical_struct!(InferenceCertificate {
    view,
    seq,
    ops_digest,
    primary_root,
    signatures,
    result_paths,
    attestations
});

/// Proof that at least `f + 1` nodes attested that an ordered op has no
/// trustworthy result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureCertificate {
    pub view: View,
    pub seq: Seq,
    pub ops_digest: Hash32,
    pub primary_root: Hash32,
    pub primary_sig: Signature,
    pub code: FailureCode,
    /// Attesting node → (path to the `Negative` leaf, COMMIT signature).
    pub attestations: BTreeMap<NodeIndex, (AuthPath, Signature)>,
}

canonical_struct!(FailureCertificate {
    view,
    seq,
    ops_digest,
    primary_root,
    primary_sig,
    code,
    attestations
});

fn h_pp(view: View, seq: Seq, ops_digest: Hash32, primary_root: Hash32, sig: &Signature) -> Hash32 {
    PrePrepare {
        view,
        seq,
        ops_digest,
        r_root: primary_root,
        sig: sig.clone(),
    }
    .digest()
}

/// Verifies an inference certificate against the request, the returned
/// results and the cluster keys. Total: malformed input yields `false`.
pub fn verify_cert(
    request: &InferenceRequest,
    results: &[InferenceResult],
    cert: &InferenceCertificate,
    keys: &[PublicKey],
    f: usize,
) -> bool {
    let n = keys.len();
    if n < 3 * f + 1 || results.len() < n - f {
        return false;
    }
    let primary = primary_index(cert.view, n);
    let Some(pp_sig) = cert.signatures.get(&primary).and_then(|s| s.order.as_ref()) else {
        return false;
    };
    if !verify_pre_prepare(
        &keys[primary as usize],
        cert.view,
        cert.seq,
        &cert.ops_digest,
        &cert.primary_root,
        pp_sig,
    ) {
        return false;
    }
    let hpp = h_pp(cert.view, cert.seq, cert.ops_digest, cert.primary_root, pp_sig);
    let op_digest = Op::Request(request.clone()).digest();

    // Results: strictly increasing node indices, all for this request and
    // one group version, matching the path and attestation maps exactly.
    let nodes: Vec<NodeIndex> = results.iter().map(|r| r.node_index).collect();
    if nodes.windows(2).any(|w| w[0] >= w[1]) || nodes.iter().any(|&k| k as usize >= n) {
        return false;
    }
    if !nodes.iter().copied().eq(cert.result_paths.keys().copied())
        || !nodes.iter().copied().eq(cert.attestations.keys().copied())
    {
        return false;
    }
    let version = results[0].group_version;
    if results.iter().any(|r| {
        r.request_id != request.request_id || r.group_id != request.group_id || r.group_version != version
    }) {
        return false;
    }

    let mut order_nodes = BTreeSet::from([primary]);
    let mut commit_nodes = BTreeSet::new();
    let mut checked: HashMap<(NodeIndex, Hash32), bool> = HashMap::new();
    for r in results {
        let k = r.node_index;
        let path = &cert.result_paths[&k];
        if !path.is_consistent() {
            return false;
        }
        let leaf = ResultLeaf {
            op_digest,
            body: LeafBody::Result(r.clone()),
        }
        .hash();
        let m_r = root_from_leaf_hash(path, leaf);
        if k == primary {
            if m_r != cert.primary_root {
                return false;
            }
        } else {
            let Some(sig) = cert.signatures.get(&k).and_then(|s| s.order.as_ref()) else {
                return false;
            };
            if !verify_prepare(&keys[k as usize], cert.view, cert.seq, &hpp, &m_r, sig) {
                return false;
            }
        }
        order_nodes.insert(k);

        let atts = &cert.attestations[&k];
        if atts.len() <= f {
            return false;
        }
        for (&i, ap) in atts {
            if i as usize >= n || !ap.path().is_consistent() {
                return false;
            }
            let Some(sig) = cert.signatures.get(&i).and_then(|s| s.commit.as_ref()) else {
                return false;
            };
            let a_leaf = match ap {
                AttestationPath::Direct(_) => AttestationLeaf::Result { node: k, leaf_hash: leaf },
                AttestationPath::ViaBatchRoot(_) => AttestationLeaf::BatchRoot { node: k, root: m_r },
            };
            let a_root = root_from_leaf_hash(ap.path(), a_leaf.hash());
            let ok = *checked
                .entry((i, a_root))
                .or_insert_with(|| verify_commit(&keys[i as usize], cert.view, cert.seq, &hpp, &a_root, sig));
            if !ok {
                return false;
            }
            commit_nodes.insert(i);
        }
    }

    // No unused signatures.
    let expected: BTreeSet<NodeIndex> = order_nodes.union(&commit_nodes).copied().collect();
    if !expected.iter().copied().eq(cert.signatures.keys().copied()) {
        return false;
    }
    cert.signatures.iter().all(|(k, s)| {
        s.order.is_some() == order_nodes.contains(k) && s.commit.is_some() == commit_nodes.contains(k)
    })
}

/// Verifies a failure certificate for `op`.
pub fn verify_failure_cert(op: &Op, cert: &FailureCertificate, keys: &[PublicKey], f: usize) -> bool {
    let n = keys.len();
    if n < 3 * f + 1 || cert.attestations.len() <= f {
        return false;
    }
    let primary = primary_index(cert.view, n);
    if !verify_pre_prepare(
        &keys[primary as usize],
        cert.view,
        cert.seq,
        &cert.ops_digest,
        &cert.primary_root,
        &cert.primary_sig,
    ) {
        return false;
    }
    let hpp = h_pp(cert.view, cert.seq, cert.ops_digest, cert.primary_root, &cert.primary_sig);
    let leaf = AttestationLeaf::Negative {
        op_digest: op.digest(),
        code: cert.code,
    }
    .hash();
    cert.attestations.iter().all(|(&i, (path, sig))| {
        (i as usize) < n
            && path.is_consistent()
            && verify_commit(
                &keys[i as usize],
                cert.view,
                cert.seq,
                &hpp,
                &root_from_leaf_hash(path, leaf),
                sig,
            )
    })
}

/// A node's result tree as held by a replica.
#[derive(Debug, Clone)]
pub struct NodeTree {
    pub leaves: Vec<ResultLeaf>,
    pub tree: MerkleTree,
    /// PRE-PREPARE signature for the primary, PREPARE signature otherwise.
    pub order_sig: Signature,
}

impl NodeTree {
    pub fn root(&self) -> Hash32 {
        self.tree.root()
    }
}

/// A COMMIT and its attestation tree as held by a replica.
#[derive(Debug, Clone)]
pub struct NodeCommit {
    pub msg: Commit,
    pub leaves: Vec<AttestationLeaf>,
    pub tree: MerkleTree,
}

impl NodeCommit {
    fn path_to(&self, leaf: &AttestationLeaf) -> Option<AuthPath> {
        let pos = self.leaves.iter().position(|l| l == leaf)?;
        self.tree.auth_path(pos).ok()
    }
}

/// Everything a proxy has collected for one ordered batch.
pub struct BatchEvidence<'a> {
    pub pre_prepare: &'a PrePrepare,
    pub trees: BTreeMap<NodeIndex, &'a NodeTree>,
    pub commits: BTreeMap<NodeIndex, &'a NodeCommit>,
    pub n: usize,
    pub f: usize,
}

impl BatchEvidence<'_> {
    fn matching_commits(&self) -> impl Iterator<Item = (&NodeIndex, &NodeCommit)> {
        let j = self.pre_prepare.digest();
        self.commits.iter().filter(move |(_, c)| c.msg.pp_digest == j).map(|(i, c)| (i, *c))
    }

    /// Builds a certificate for the op at `index` covering every result with
    /// more than `f` attestations, if at least `N - f` results qualify.
    pub fn certificate(&self, index: usize) -> Option<(Vec<InferenceResult>, InferenceCertificate)> {
        let pp = self.pre_prepare;
        let primary = primary_index(pp.view, self.n);
        let mut results = Vec::new();
        let mut result_paths = BTreeMap::new();
        let mut attestations = BTreeMap::new();
        let mut signatures: BTreeMap<NodeIndex, NodeSigs> = BTreeMap::new();
        for (&k, &tree) in &self.trees {
            let Some(leaf) = tree.leaves.get(index) else {
                continue;
            };
            let Some(result) = leaf.result() else {
                continue;
            };
            let leaf_hash = leaf.hash();
            let direct = AttestationLeaf::Result { node: k, leaf_hash };
            let whole = AttestationLeaf::BatchRoot {
                node: k,
                root: tree.root(),
            };
            let mut atts = BTreeMap::new();
            for (&i, c) in self.matching_commits() {
                if let Some(p) = c.path_to(&direct) {
                    atts.insert(i, AttestationPath::Direct(p));
                } else if let Some(p) = c.path_to(&whole) {
                    atts.insert(i, AttestationPath::ViaBatchRoot(p));
                }
            }
            if atts.len() <= self.f {
                continue;
            }
            for &i in atts.keys() {
                signatures.entry(i).or_default().commit = Some(self.commits[&i].msg.sig.clone());
            }
            signatures.entry(k).or_default().order = Some(tree.order_sig.clone());
            results.push(result.clone());
            result_paths.insert(k, tree.tree.auth_path(index).ok()?);
            attestations.insert(k, atts);
        }
        if results.len() < self.n - self.f {
            return None;
        }
        signatures.entry(primary).or_default().order = Some(pp.sig.clone());
        Some((
            results,
            InferenceCertificate {
                view: pp.view,
                seq: pp.seq,
                ops_digest: pp.ops_digest,
                primary_root: pp.r_root,
                signatures,
                result_paths,
                attestations,
            },
        ))
    }

    /// Builds a failure certificate for `op_digest` if more than `f` nodes
    /// attested the same negative outcome.
    pub fn failure_certificate(&self, op_digest: Hash32) -> Option<FailureCertificate> {
        let mut by_code: BTreeMap<FailureCode, BTreeMap<NodeIndex, (AuthPath, Signature)>> = BTreeMap::new();
        for (&i, c) in self.matching_commits() {
            for (pos, leaf) in c.leaves.iter().enumerate() {
                if let AttestationLeaf::Negative { op_digest: d, code } = leaf {
                    if *d == op_digest {
                        let path = c.tree.auth_path(pos).ok()?;
                        by_code.entry(*code).or_default().insert(i, (path, c.msg.sig.clone()));
                    }
                }
            }
        }
        let (code, attestations) = by_code.into_iter().find(|(_, a)| a.len() > self.f)?;
        let pp = self.pre_prepare;
        Some(FailureCertificate {
            view: pp.view,
            seq: pp.seq,
            ops_digest: pp.ops_digest,
            primary_root: pp.r_root,
            primary_sig: pp.sig.clone(),
            code,
            attestations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::messages::{attestation_tree, ops_digest, result_tree, Prepare};

    struct Fixture {
        keys: Vec<KeyPair>,
        pks: Vec<PublicKey>,
        request: InferenceRequest,
        pp: PrePrepare,
        trees: BTreeMap<NodeIndex, NodeTree>,
        commits: BTreeMap<NodeIndex, NodeCommit>,
    }

    /// Four nodes, a batch with two requests; every node attests every
    /// result (node 0 through its batch root, the others leaf by leaf).
    fn fixture() -> Fixture {
        let keys: Vec<KeyPair> = (0..4).map(|i| KeyPair::from_label(&format!("c{i}"))).collect();
        let pks = keys.iter().map(|k| k.public_key().clone()).collect();
        let client = KeyPair::from_label("client");
        let reqs: Vec<InferenceRequest> = (0..2)
            .map(|i| InferenceRequest::new(&client, i, "g", vec![1.0], None))
            .collect();
        let ops: Vec<Op> = reqs.iter().cloned().map(Op::Request).collect();
        let leaves_of = |k: NodeIndex| -> Vec<ResultLeaf> {
            ops.iter()
                .zip(&reqs)
                .map(|(op, r)| ResultLeaf {
                    op_digest: op.digest(),
                    body: LeafBody::Result(InferenceResult {
                        request_id: r.request_id,
                        node_index: k,
                        group_id: "g".into(),
                        group_version: 1,
                        output: vec![0.5 + k as f64 * 1e-3],
                        model_digest: Hash32([k as u8; 32]),
                    }),
                })
                .collect()
        };
        let mut trees = BTreeMap::new();
        let t0 = result_tree(&leaves_of(0)).unwrap();
        let pp = PrePrepare::new(&keys[0], 0, 1, ops_digest(&ops), t0.root());
        trees.insert(
            0,
            NodeTree {
                leaves: leaves_of(0),
                tree: t0,
                order_sig: pp.sig.clone(),
            },
        );
        for k in 1..4u32 {
            let leaves = leaves_of(k);
            let tree = result_tree(&leaves).unwrap();
            let p = Prepare::new(&keys[k as usize], 0, 1, pp.digest(), k, tree.root());
            trees.insert(
                k,
                NodeTree {
                    leaves,
                    tree,
                    order_sig: p.sig,
                },
            );
        }
        let mut commits = BTreeMap::new();
        for i in 0..4u32 {
            let mut a = Vec::new();
            for (&k, t) in &trees {
                if i == 0 {
                    a.push(AttestationLeaf::BatchRoot { node: k, root: t.root() });
                } else {
                    for l in &t.leaves {
                        a.push(AttestationLeaf::Result {
                            node: k,
                            leaf_hash: l.hash(),
                        });
                    }
                }
            }
            let tree = attestation_tree(&a).unwrap();
            let msg = Commit::new(&keys[i as usize], 0, 1, pp.digest(), i, tree.root());
            commits.insert(i, NodeCommit { msg, leaves: a, tree });
        }
        Fixture {
            keys,
            pks,
            request: reqs[1].clone(),
            pp,
            trees,
            commits,
        }
    }

    fn evidence(fx: &Fixture) -> BatchEvidence<'_> {
        BatchEvidence {
            pre_prepare: &fx.pp,
            trees: fx.trees.iter().map(|(k, t)| (*k, t)).collect(),
            commits: fx.commits.iter().map(|(k, c)| (*k, c)).collect(),
            n: 4,
            f: 1,
        }
    }

    #[test]
    fn assembled_certificate_verifies() {
        let fx = fixture();
        let (results, cert) = evidence(&fx).certificate(1).unwrap();
        assert_eq!(results.len(), 4);
        assert!(verify_cert(&fx.request, &results, &cert, &fx.pks, 1));
        let bytes = cert.to_canonical();
        assert_eq!(InferenceCertificate::from_canonical(&bytes).unwrap(), cert);
    }

    #[test]
    fn too_few_results_fail() {
        let fx = fixture();
        let (results, mut cert) = evidence(&fx).certificate(1).unwrap();
        // Keep two results: below N - f.
        let keep: Vec<InferenceResult> = results[..2].to_vec();
        cert.result_paths.retain(|k, _| *k < 2);
        cert.attestations.retain(|k, _| *k < 2);
        assert!(!verify_cert(&fx.request, &keep, &cert, &fx.pks, 1));
    }

    #[test]
    fn unused_signature_fails() {
        let fx = fixture();
        let (mut results, mut cert) = evidence(&fx).certificate(1).unwrap();
        // Drop node 3's result but leave its PREPARE signature in place.
        results.pop();
        cert.result_paths.remove(&3);
        cert.attestations.remove(&3);
        assert!(!verify_cert(&fx.request, &results, &cert, &fx.pks, 1));
        cert.signatures.get_mut(&3).unwrap().order = None;
        assert!(verify_cert(&fx.request, &results, &cert, &fx.pks, 1));
    }

    #[test]
    fn wrong_request_fails() {
        let fx = fixture();
        let (results, cert) = evidence(&fx).certificate(1).unwrap();
        let other = InferenceRequest::new(&KeyPair::from_label("client"), 0, "g", vec![1.0], None);
        assert!(!verify_cert(&other, &results, &cert, &fx.pks, 1));
    }

    #[test]
    fn single_attestation_is_not_enough() {
        let mut fx = fixture();
        fx.commits.retain(|i, _| *i == 2);
        assert!(evidence(&fx).certificate(1).is_none());
    }

    #[test]
    fn tampered_output_fails() {
        let fx = fixture();
        let (mut results, cert) = evidence(&fx).certificate(1).unwrap();
        results[2].output[0] += 1e-9;
        assert!(!verify_cert(&fx.request, &results, &cert, &fx.pks, 1));
    }

    #[test]
    fn failure_certificate_round_trip() {
        let fx = fixture();
        let op = Op::Request(fx.request.clone());
        let neg = AttestationLeaf::Negative {
            op_digest: op.digest(),
            code: FailureCode::QuorumUnsatisfied,
        };
        let mut commits = BTreeMap::new();
        for i in 1..3u32 {
            let leaves = vec![AttestationLeaf::Nothing, neg.clone()];
            let tree = attestation_tree(&leaves).unwrap();
            let msg = Commit::new(&fx.keys[i as usize], 0, 1, fx.pp.digest(), i, tree.root());
            commits.insert(i, NodeCommit { msg, leaves, tree });
        }
        let ev = BatchEvidence {
            pre_prepare: &fx.pp,
            trees: fx.trees.iter().map(|(k, t)| (*k, t)).collect(),
            commits: commits.iter().map(|(k, c)| (*k, c)).collect(),
            n: 4,
            f: 1,
        };
        let fc = ev.failure_certificate(op.digest()).unwrap();
        assert!(verify_failure_cert(&op, &fc, &fx.pks, 1));
        let mut bad = fc.clone();
        bad.code = FailureCode::UnknownGroup;
        assert!(!verify_failure_cert(&op, &bad, &fx.pks, 1));
        let mut short = fc;
        short.attestations.remove(&1);
        assert!(!verify_failure_cert(&op, &short, &fx.pks, 1));
    }
}
