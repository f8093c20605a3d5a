//! Core data model: cluster configuration, requests, results, model groups,
//! and the deterministic fold that tracks model-group versions as operations
//! are ordered.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use thiserror::Error;

use crate::canonical_struct;
use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{digest_of, hash_parts, sign_value, verify_value, Hash32, KeyPair, PublicKey, Signature};
use crate::distance::DistanceDescriptor;

pub type NodeIndex = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("cluster of {n} nodes cannot tolerate f={f} (need n >= 3f+1)")]
    TooFewNodes { n: usize, f: usize },
    #[error("node keys must be unique and sorted")]
    UnsortedNodes,
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("model group has no models")]
    EmptyGroup,
    #[error("owner node count must be at least 1")]
    NoOwnerNodes,
    #[error("nonce must not be empty")]
    EmptyNonce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeIdentity {
    pub public_key: PublicKey,
    /// Transport address, e.g. `127.0.0.1:7000`.
    pub endpoint: String,
    pub index: NodeIndex,
}

canonical_struct!(NodeIdentity {
    public_key,
    endpoint,
    index
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    nodes: Vec<NodeIdentity>,
    pub f: u32,
    pub view_timeout: Duration,
    pub exec_batch_max: u32,
    pub agree_batch_max: u32,
    pub agree_pipeline: u32,
    pub checkpoint_interval: u32,
    /// Keys allowed to issue model-group updates; empty means any signer.
    pub owners: Vec<PublicKey>,
}

impl ClusterConfig {
    /// Builds a configuration from `(public key, endpoint)` pairs. Nodes are
    /// sorted by key and assigned their rank as index.
    pub fn new(
        mut members: Vec<(PublicKey, String)>,
        f: u32,
        view_timeout: Duration,
    ) -> Result<Self, DomainError> {
        members.sort_by(|a, b| a.0.cmp(&b.0));
        let nodes = members
            .into_iter()
            .enumerate()
            .map(|(i, (public_key, endpoint))| NodeIdentity {
                public_key,
                endpoint,
                index: i as NodeIndex,
            })
            .collect();
        let cfg = Self {
            nodes,
            f,
            view_timeout,
            exec_batch_max: 4,
            agree_batch_max: 25,
            agree_pipeline: 2,
            checkpoint_interval: 16,
            owners: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let n = self.nodes.len();
        let f = self.f as usize;
        if n < 3 * f + 1 || n == 0 {
            return Err(DomainError::TooFewNodes { n, f });
        }
        for (i, w) in self.nodes.windows(2).enumerate() {
            if w[0].public_key >= w[1].public_key || w[0].index != i as NodeIndex {
                return Err(DomainError::UnsortedNodes);
            }
        }
        if self.nodes.last().map(|l| l.index as usize) != Some(n - 1) {
            return Err(DomainError::UnsortedNodes);
        }
        for (name, v) in [
            ("exec_batch_max", self.exec_batch_max),
            ("agree_batch_max", self.agree_batch_max),
            ("agree_pipeline", self.agree_pipeline),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(DomainError::ZeroParameter(name));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeIdentity] {
        &self.nodes
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn f(&self) -> usize {
        self.f as usize
    }

    /// Results, prepares and commits needed for progress: `N - f`.
    pub fn quorum(&self) -> usize {
        self.n() - self.f()
    }

    pub fn key(&self, index: NodeIndex) -> Option<&PublicKey> {
        self.nodes.get(index as usize).map(|n| &n.public_key)
    }

    pub fn index_of(&self, key: &PublicKey) -> Option<NodeIndex> {
        self.nodes
            .binary_search_by(|n| n.public_key.cmp(key))
            .ok()
            .map(|i| i as NodeIndex)
    }

    pub fn keys(&self) -> Vec<PublicKey> {
        self.nodes.iter().map(|n| n.public_key.clone()).collect()
    }

    pub fn primary(&self, view: u64) -> NodeIndex {
        primary_index(view, self.n())
    }
}

impl Encode for ClusterConfig {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.put(&self.nodes);
        enc.put(&self.f);
        enc.put(&(self.view_timeout.as_micros() as u64));
        enc.put(&self.exec_batch_max);
        enc.put(&self.agree_batch_max);
        enc.put(&self.agree_pipeline);
        enc.put(&self.checkpoint_interval);
        enc.put(&self.owners);
    }
}

impl Decode for ClusterConfig {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let cfg = Self {
            nodes: dec.get()?,
            f: dec.get()?,
            view_timeout: Duration::from_micros(dec.get()?),
            exec_batch_max: dec.get()?,
            agree_batch_max: dec.get()?,
            agree_pipeline: dec.get()?,
            checkpoint_interval: dec.get()?,
            owners: dec.get()?,
        };
        cfg.validate()
            .map_err(|_| CodecError::Invalid("cluster config invariants"))?;
        Ok(cfg)
    }
}

/// Primary for a view: nodes are ranked by public key and the primary is
/// `view mod N`.
pub fn primary_index(view: u64, n: usize) -> NodeIndex {
    (view % n as u64) as NodeIndex
}

/// `H(client_id || 0x1F || nonce)`.
pub fn canonical_request_id(client_id: &[u8], nonce: &[u8]) -> Result<Hash32, DomainError> {
    if nonce.is_empty() {
        return Err(DomainError::EmptyNonce);
    }
    Ok(hash_parts(&[client_id, &[0x1F], nonce]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDescriptor {
    /// File path or `file://` URL (or a simulator store key).
    pub model_url: String,
    pub params: BTreeMap<String, String>,
    pub input_dim: u64,
    pub output_dim: u64,
    pub weights_digest: Hash32,
}

canonical_struct!(ModelDescriptor {
    model_url,
    params,
    input_dim,
    output_dim,
    weights_digest
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupStatus {
    Defined,
    Active,
    Retired,
}

impl GroupStatus {
    pub fn can_transition_to(self, next: GroupStatus) -> bool {
        matches!(
            (self, next),
            (GroupStatus::Defined, GroupStatus::Active)
                | (GroupStatus::Active, GroupStatus::Retired)
                | (GroupStatus::Defined, GroupStatus::Retired)
        )
    }

    pub fn is_live(self) -> bool {
        self != GroupStatus::Retired
    }
}

impl Encode for GroupStatus {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.tag(*self as u8);
    }
}

impl Decode for GroupStatus {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(GroupStatus::Defined),
            1 => Ok(GroupStatus::Active),
            2 => Ok(GroupStatus::Retired),
            tag => Err(CodecError::InvalidTag {
                ty: "GroupStatus",
                tag,
            }),
        }
    }
}

/// One version of a model group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGroup {
    pub group_id: String,
    pub version: u64,
    pub models: Vec<ModelDescriptor>,
    pub distance: DistanceDescriptor,
    pub status: GroupStatus,
}

canonical_struct!(ModelGroup {
    group_id,
    version,
    models,
    distance,
    status
});

impl ModelGroup {
    pub fn input_dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.input_dim as usize)
    }

    pub fn output_dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.output_dim as usize)
    }

    /// All models share dimensions and the metric is defined on them.
    pub fn is_well_formed(&self) -> bool {
        let Some(first) = self.models.first() else {
            return false;
        };
        first.input_dim >= 1
            && first.output_dim >= 1
            && self
                .models
                .iter()
                .all(|m| m.input_dim == first.input_dim && m.output_dim == first.output_dim)
            && self.distance.is_valid()
            && self.distance.metric.accepts_dim(first.output_dim as usize)
    }
}

/// Models a node loads for a group.
///
/// The ordered model list is cut into chunks of `ceil(|G| / d)` models and
/// the node with rank `r` among the `d` owner nodes takes chunk
/// `r mod chunk_count`. With more nodes than models the chunks are replicated;
/// with more models than nodes they are disjoint. Every node gets at least one
/// model and the union covers the group.
pub fn assigned_models(
    d: usize,
    group: &ModelGroup,
    node: &NodeIdentity,
) -> Result<Vec<ModelDescriptor>, DomainError> {
    assigned_models_for_rank(d, &group.models, node.index as usize % d.max(1))
}

pub fn assigned_models_for_rank(
    d: usize,
    models: &[ModelDescriptor],
    rank: usize,
) -> Result<Vec<ModelDescriptor>, DomainError> {
    Ok(models[assigned_positions(d, models.len(), rank)?].to_vec())
}

/// Positions in the ordered model list held by the node of the given rank.
pub fn assigned_positions(
    d: usize,
    group_len: usize,
    rank: usize,
) -> Result<std::ops::Range<usize>, DomainError> {
    if group_len == 0 {
        return Err(DomainError::EmptyGroup);
    }
    if d == 0 {
        return Err(DomainError::NoOwnerNodes);
    }
    let chunk = group_len.div_ceil(d);
    let chunk_count = group_len.div_ceil(chunk);
    let start = (rank % chunk_count) * chunk;
    Ok(start..(start + chunk).min(group_len))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub request_id: Hash32,
    pub client_key: PublicKey,
    pub nonce: u64,
    pub group_id: String,
    pub input: Vec<f64>,
    pub epsilon_override: Option<f64>,
    pub client_sig: Signature,
}

canonical_struct!(InferenceRequest {
    request_id,
    client_key,
    nonce,
    group_id,
    input,
    epsilon_override,
    client_sig
});

/// The signed part of a request.
struct RequestBody<'a>(&'a InferenceRequest);

impl Encode for RequestBody<'_> {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.raw(b"REQ");
        enc.put(&self.0.request_id);
        enc.put(&self.0.client_key);
        enc.put(&self.0.nonce);
        enc.put(&self.0.group_id);
        enc.put(&self.0.input);
        enc.put(&self.0.epsilon_override);
    }
}

impl InferenceRequest {
    pub fn new(
        client: &KeyPair,
        nonce: u64,
        group_id: impl Into<String>,
        input: Vec<f64>,
        epsilon_override: Option<f64>,
    ) -> Self {
        let request_id = canonical_request_id(&client.public_key().0, &nonce.to_be_bytes())
            .expect("nonce is 8 bytes");
        let mut req = Self {
            request_id,
            client_key: client.public_key().clone(),
            nonce,
            group_id: group_id.into(),
            input,
            epsilon_override,
            client_sig: Signature::default(),
        };
        req.client_sig = sign_value(client, &RequestBody(&req));
        req
    }

    /// Checks that the id derives from the client key and nonce and that the
    /// client signed the request.
    pub fn verify_signature(&self) -> bool {
        canonical_request_id(&self.client_key.0, &self.nonce.to_be_bytes()).ok()
            == Some(self.request_id)
            && verify_value(&self.client_key, &RequestBody(self), &self.client_sig)
    }

    /// Retries of the same request with the same threshold share this key.
    pub fn dedup_key(&self) -> RequestKey {
        let mut enc = Encoder::new();
        enc.put(&self.request_id);
        enc.put(&self.epsilon_override);
        RequestKey(crate::crypto::hash(&enc.finish()))
    }

    pub fn epsilon_is_valid(&self) -> bool {
        self.epsilon_override.is_none_or(|e| e >= 0.0)
    }
}

/// Identifies a request for execution and ordering purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestKey(pub Hash32);

impl Encode for RequestKey {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.put(&self.0);
    }
}

impl Decode for RequestKey {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(RequestKey(dec.get()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub request_id: Hash32,
    pub node_index: NodeIndex,
    pub group_id: String,
    pub group_version: u64,
    pub output: Vec<f64>,
    pub model_digest: Hash32,
}

canonical_struct!(InferenceResult {
    request_id,
    node_index,
    group_id,
    group_version,
    output,
    model_digest
});

/// Model-group management operations.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupUpdate {
    Define {
        group_id: String,
        models: Vec<ModelDescriptor>,
        distance: DistanceDescriptor,
    },
    Activate {
        group_id: String,
    },
    Retire {
        group_id: String,
    },
}

impl GroupUpdate {
    pub fn group_id(&self) -> &str {
        match self {
            GroupUpdate::Define { group_id, .. }
            | GroupUpdate::Activate { group_id }
            | GroupUpdate::Retire { group_id } => group_id,
        }
    }
}

impl Encode for GroupUpdate {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            GroupUpdate::Define {
                group_id,
                models,
                distance,
            } => {
                enc.tag(0);
                enc.put(group_id);
                enc.put(models);
                enc.put(distance);
            }
            GroupUpdate::Activate { group_id } => {
                enc.tag(1);
                enc.put(group_id);
            }
            GroupUpdate::Retire { group_id } => {
                enc.tag(2);
                enc.put(group_id);
            }
        }
    }
}

impl Decode for GroupUpdate {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(GroupUpdate::Define {
                group_id: dec.get()?,
                models: dec.get()?,
                distance: dec.get()?,
            }),
            1 => Ok(GroupUpdate::Activate {
                group_id: dec.get()?,
            }),
            2 => Ok(GroupUpdate::Retire {
                group_id: dec.get()?,
            }),
            tag => Err(CodecError::InvalidTag {
                ty: "GroupUpdate",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignedUpdate {
    pub update: GroupUpdate,
    pub owner: PublicKey,
    pub nonce: u64,
    pub sig: Signature,
}

canonical_struct!(SignedUpdate {
    update,
    owner,
    nonce,
    sig
});

impl SignedUpdate {
    pub fn new(owner: &KeyPair, nonce: u64, update: GroupUpdate) -> Self {
        let sig = sign_value(owner, &(&update, nonce));
        Self {
            update,
            owner: owner.public_key().clone(),
            nonce,
            sig,
        }
    }

    pub fn verify_signature(&self) -> bool {
        verify_value(&self.owner, &(&self.update, self.nonce), &self.sig)
    }
}

/// An entry of an agreement batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Request(InferenceRequest),
    Update(SignedUpdate),
}

impl Encode for Op {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Op::Request(r) => {
                enc.tag(0);
                enc.put(r);
            }
            Op::Update(u) => {
                enc.tag(1);
                enc.put(u);
            }
        }
    }
}

impl Decode for Op {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(Op::Request(dec.get()?)),
            1 => Ok(Op::Update(dec.get()?)),
            tag => Err(CodecError::InvalidTag { ty: "Op", tag }),
        }
    }
}

impl Op {
    pub fn digest(&self) -> Hash32 {
        digest_of(self)
    }

    /// Key used to deduplicate retries and to track the op in pools.
    pub fn key(&self) -> RequestKey {
        match self {
            Op::Request(r) => r.dedup_key(),
            Op::Update(_) => RequestKey(self.digest()),
        }
    }

    pub fn group_id(&self) -> &str {
        match self {
            Op::Request(r) => &r.group_id,
            Op::Update(u) => u.update.group_id(),
        }
    }

    pub fn as_request(&self) -> Option<&InferenceRequest> {
        match self {
            Op::Request(r) => Some(r),
            Op::Update(_) => None,
        }
    }
}

/// Why an operation was ordered without effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureCode {
    UnknownGroup,
    GroupRetired,
    NoActiveVersion,
    NoDefinedVersion,
    AlreadyActive,
    InvalidGroup,
    Unauthorized,
    Duplicate,
    DimensionMismatch,
    BadClientSignature,
    InvalidEpsilon,
    QuorumUnsatisfied,
    /// Another update to the same group is still being ordered.
    UpdateInProgress,
}

impl FailureCode {
    pub const ALL: [FailureCode; 13] = [
        FailureCode::UnknownGroup,
        FailureCode::GroupRetired,
        FailureCode::NoActiveVersion,
        FailureCode::NoDefinedVersion,
        FailureCode::AlreadyActive,
        FailureCode::InvalidGroup,
        FailureCode::Unauthorized,
        FailureCode::Duplicate,
        FailureCode::DimensionMismatch,
        FailureCode::BadClientSignature,
        FailureCode::InvalidEpsilon,
        FailureCode::QuorumUnsatisfied,
        FailureCode::UpdateInProgress,
    ];
}

impl Encode for FailureCode {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.tag(*self as u8);
    }
}

impl Decode for FailureCode {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.tag()?;
        FailureCode::ALL
            .get(tag as usize)
            .copied()
            .ok_or(CodecError::InvalidTag {
                ty: "FailureCode",
                tag,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOutcome {
    Applied { version: u64 },
    Failed(FailureCode),
}

impl Encode for OpOutcome {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            OpOutcome::Applied { version } => {
                enc.tag(0);
                enc.put(version);
            }
            OpOutcome::Failed(code) => {
                enc.tag(1);
                enc.put(code);
            }
        }
    }
}

impl Decode for OpOutcome {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(OpOutcome::Applied {
                version: dec.get()?,
            }),
            1 => Ok(OpOutcome::Failed(dec.get()?)),
            tag => Err(CodecError::InvalidTag {
                ty: "OpOutcome",
                tag,
            }),
        }
    }
}

/// What ordering decided for one op of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum OpPlan {
    /// Execute against `version`, agree under `distance` with `epsilon`.
    Execute {
        key: RequestKey,
        request_id: Hash32,
        group_id: String,
        version: u64,
        distance: DistanceDescriptor,
        epsilon: f64,
        output_dim: usize,
    },
    Rejected(FailureCode),
    Update(OpOutcome),
}

impl Encode for GroupRegistry {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.put(&self.groups);
        enc.put(&self.applied);
    }
}

impl Decode for GroupRegistry {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let groups: BTreeMap<String, Vec<ModelGroup>> = dec.get()?;
        for (id, versions) in &groups {
            let ordered = versions
                .iter()
                .enumerate()
                .all(|(i, g)| &g.group_id == id && g.version == i as u64 + 1);
            if versions.is_empty() || !ordered {
                return Err(CodecError::Invalid("registry versions"));
            }
        }
        Ok(Self {
            groups,
            applied: dec.get()?,
        })
    }
}

/// Model-group state as a deterministic fold over ordered operations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupRegistry {
    groups: BTreeMap<String, Vec<ModelGroup>>,
    /// Keys of requests and updates that took effect.
    applied: BTreeSet<RequestKey>,
}

impl GroupRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active_version(&self, group_id: &str) -> Option<&ModelGroup> {
        self.groups
            .get(group_id)?
            .iter()
            .find(|g| g.status == GroupStatus::Active)
    }

    pub fn versions(&self, group_id: &str) -> &[ModelGroup] {
        self.groups.get(group_id).map_or(&[], Vec::as_slice)
    }

    pub fn version(&self, group_id: &str, version: u64) -> Option<&ModelGroup> {
        self.versions(group_id)
            .get(version.checked_sub(1)? as usize)
    }

    /// Latest version record of every group.
    pub fn listing(&self) -> Vec<ModelGroup> {
        self.groups
            .values()
            .filter_map(|v| v.last().cloned())
            .collect()
    }

    pub fn active_map(&self) -> BTreeMap<String, u64> {
        self.groups.keys().filter_map(|id| Some((id.clone(), self.active_version(id)?.version)))
            .collect()
    }

    pub fn has_applied(&self, key: &RequestKey) -> bool {
        self.applied.contains(key)
    }

    pub fn digest(&self) -> Hash32 {
        digest_of(self)
    }

    /// Applies one ordered op and reports its effect.
    pub fn apply(&mut self, op: &Op, owners: &[PublicKey]) -> OpPlan {
        match op {
            Op::Request(req) => self.apply_request(req),
            Op::Update(upd) => OpPlan::Update(self.apply_update(upd, owners)),
        }
    }

    fn apply_request(&mut self, req: &InferenceRequest) -> OpPlan {
        let plan = self.plan_request(req);
        if let OpPlan::Execute { key, .. } = &plan {
            self.applied.insert(*key);
        }
        plan
    }

    /// The plan `apply` would produce for `req`, without applying it.
    pub fn plan_request(&self, req: &InferenceRequest) -> OpPlan {
        let key = req.dedup_key();
        if self.applied.contains(&key) {
            return OpPlan::Rejected(FailureCode::Duplicate);
        }
        if !req.verify_signature() {
            return OpPlan::Rejected(FailureCode::BadClientSignature);
        }
        if !req.epsilon_is_valid() {
            return OpPlan::Rejected(FailureCode::InvalidEpsilon);
        }
        let Some(versions) = self.groups.get(&req.group_id) else {
            return OpPlan::Rejected(FailureCode::UnknownGroup);
        };
        let Some(active) = versions.iter().find(|g| g.status == GroupStatus::Active) else {
            let code = if versions.iter().all(|g| g.status == GroupStatus::Retired) {
                FailureCode::GroupRetired
            } else {
                FailureCode::NoActiveVersion
            };
            return OpPlan::Rejected(code);
        };
        if req.input.len() != active.input_dim() {
            return OpPlan::Rejected(FailureCode::DimensionMismatch);
        }
        OpPlan::Execute {
            key,
            request_id: req.request_id,
            group_id: req.group_id.clone(),
            version: active.version,
            distance: active.distance,
            epsilon: active.distance.effective_epsilon(req.epsilon_override),
            output_dim: active.output_dim(),
        }
    }

    fn apply_update(&mut self, upd: &SignedUpdate, owners: &[PublicKey]) -> OpOutcome {
        let key = RequestKey(digest_of(upd));
        if self.applied.contains(&key) {
            return OpOutcome::Failed(FailureCode::Duplicate);
        }
        if !(owners.is_empty() || owners.contains(&upd.owner)) || !upd.verify_signature() {
            return OpOutcome::Failed(FailureCode::Unauthorized);
        }
        let outcome = match &upd.update {
            GroupUpdate::Define {
                group_id,
                models,
                distance,
            } => {
                let versions = self.groups.entry(group_id.clone()).or_default();
                let group = ModelGroup {
                    group_id: group_id.clone(),
                    version: versions.len() as u64 + 1,
                    models: models.clone(),
                    distance: *distance,
                    status: GroupStatus::Defined,
                };
                if !group.is_well_formed() {
                    if versions.is_empty() {
                        self.groups.remove(group_id);
                    }
                    return OpOutcome::Failed(FailureCode::InvalidGroup);
                }
                let version = group.version;
                versions.push(group);
                OpOutcome::Applied { version }
            }
            GroupUpdate::Activate { group_id } => {
                let Some(versions) = self.groups.get_mut(group_id) else {
                    return OpOutcome::Failed(FailureCode::UnknownGroup);
                };
                let latest = versions.last().expect("groups are never empty");
                match latest.status {
                    GroupStatus::Active => return OpOutcome::Failed(FailureCode::AlreadyActive),
                    GroupStatus::Retired => {
                        return OpOutcome::Failed(FailureCode::NoDefinedVersion)
                    }
                    GroupStatus::Defined => {}
                }
                let version = latest.version;
                for g in versions.iter_mut() {
                    if g.version == version {
                        g.status = GroupStatus::Active;
                    } else if g.status.is_live() {
                        g.status = GroupStatus::Retired;
                    }
                }
                OpOutcome::Applied { version }
            }
            GroupUpdate::Retire { group_id } => {
                let Some(versions) = self.groups.get_mut(group_id) else {
                    return OpOutcome::Failed(FailureCode::UnknownGroup);
                };
                if versions.iter().all(|g| !g.status.is_live()) {
                    return OpOutcome::Failed(FailureCode::GroupRetired);
                }
                for g in versions.iter_mut() {
                    g.status = GroupStatus::Retired;
                }
                OpOutcome::Applied {
                    version: versions.len() as u64,
                }
            }
        };
        self.applied.insert(key);
        outcome
    }
}
