//! Per-node inference engine.
//!
//! Requests are queued per `(group, version, model)` and drained in
//! execution batches of at most `exec_batch_max` requests. A queue is flushed
//! when it is full, when its oldest entry has waited `flush_interval`, or when
//! an entry was marked urgent by [`Engine::ensure`]. Execution itself happens
//! outside the engine: the caller runs [`ExecutionBatch::run`] (possibly on a
//! worker thread or under a simulated cost model) and hands the outputs back
//! through [`Engine::complete_batch`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{hash, Hash32};
use crate::domain::{
    assigned_positions, GroupStatus, InferenceRequest, InferenceResult, ModelDescriptor,
    ModelGroup, NodeIndex, RequestKey,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("input has {got} values, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("executor failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot fetch model {url}: {reason}")]
    Fetch { url: String, reason: String },
    #[error("model {url} digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch {
        url: String,
        expected: Hash32,
        actual: Hash32,
    },
    #[error("model file {url} is malformed: {reason}")]
    BadModel { url: String, reason: String },
    #[error("model {url} dimensions do not match its descriptor")]
    DimensionMismatch { url: String },
    #[error("model group {0} is not well formed")]
    InvalidGroup(String),
    #[error("unknown model group {0}")]
    UnknownGroup(String),
    #[error("model group {0} has no live version")]
    NoLiveVersion(String),
    #[error("request signature does not verify")]
    BadSignature,
}

/// A loaded model. Implementations must be deterministic: the same input
/// always yields bit-identical output on one node.
pub trait ModelExecutor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn run(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ExecError>;
}

/// Dense layer `y = W x + b`, optionally followed by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearToyModel {
    output_dim: usize,
    input_dim: usize,
    softmax: bool,
    /// Row-major `output_dim x input_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearToyModel {
    pub fn new(
        output_dim: usize,
        input_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        softmax: bool,
    ) -> Option<Self> {
        if output_dim == 0
            || input_dim == 0
            || weights.len() != output_dim * input_dim
            || bias.len() != output_dim
        {
            return None;
        }
        Some(Self {
            output_dim,
            input_dim,
            softmax,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self::new(dim, dim, w, vec![0.0; dim], false).expect("square identity")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_canonical()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        Self::from_canonical(bytes)
    }

    /// Digest recorded in a [`ModelDescriptor`] for this model's file.
    pub fn digest(&self) -> Hash32 {
        hash(&self.to_bytes())
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self
            .weights
            .chunks(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi))
            .collect();
        if self.softmax {
            softmax_in_place(&mut y);
        }
        y
    }
}

pub fn softmax_in_place(y: &mut [f64]) {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in y.iter_mut() {
        *v /= sum;
    }
}

impl Encode for LinearToyModel {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.raw(b"QLTM");
        enc.put(&(self.output_dim as u64));
        enc.put(&(self.input_dim as u64));
        enc.put(&self.softmax);
        enc.put(&self.weights);
        enc.put(&self.bias);
    }
}

impl Decode for LinearToyModel {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        if &dec.raw::<4>()? != b"QLTM" {
            return Err(CodecError::Invalid("model magic"));
        }
        let output_dim: u64 = dec.get()?;
        let input_dim: u64 = dec.get()?;
        let softmax = dec.get()?;
        let weights = dec.get()?;
        let bias = dec.get()?;
        LinearToyModel::new(
            usize::try_from(output_dim).map_err(|_| CodecError::IntegerOverflow(output_dim))?,
            usize::try_from(input_dim).map_err(|_| CodecError::IntegerOverflow(input_dim))?,
            weights,
            bias,
            softmax,
        )
        .ok_or(CodecError::Invalid("model dimensions"))
    }
}

impl ModelExecutor for LinearToyModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn run(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ExecError> {
        inputs
            .iter()
            .map(|x| {
                if x.len() != self.input_dim {
                    return Err(ExecError::InputDim {
                        expected: self.input_dim,
                        got: x.len(),
                    });
                }
                Ok(self.forward(x))
            })
            .collect()
    }
}

/// Adds a deterministic pseudo-random perturbation in `[-magnitude, magnitude]`
/// to every output coordinate, keyed by `seed` and the input. Models the small
/// numeric differences between heterogeneous accelerators.
pub struct Perturbed {
    pub inner: Arc<dyn ModelExecutor>,
    pub seed: u64,
    pub magnitude: f64,
}

impl Perturbed {
    fn noise(&self, input: &[f64], coord: usize) -> f64 {
        let mut enc = Encoder::new();
        enc.put(&self.seed);
        enc.put(&(coord as u64));
        enc.put(input);
        let h = hash(&enc.finish());
        let u = u64::from_be_bytes(h.0[..8].try_into().expect("8 bytes")) >> 11;
        let unit = u as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * self.magnitude
    }
}

impl ModelExecutor for Perturbed {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn run(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ExecError> {
        let mut out = self.inner.run(inputs)?;
        for (x, y) in inputs.iter().zip(out.iter_mut()) {
            for (j, v) in y.iter_mut().enumerate() {
                *v += self.noise(x, j);
            }
        }
        Ok(out)
    }
}

/// Shifts every output by a fixed vector (a dishonest node's tampering).
pub struct Offset {
    pub inner: Arc<dyn ModelExecutor>,
    pub offset: Vec<f64>,
}

impl ModelExecutor for Offset {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn run(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ExecError> {
        let mut out = self.inner.run(inputs)?;
        for y in out.iter_mut() {
            for (v, o) in y.iter_mut().zip(self.offset.iter().cycle()) {
                *v += o;
            }
        }
        Ok(out)
    }
}

pub type ExecutorWrapper = Arc<dyn Fn(Arc<dyn ModelExecutor>) -> Arc<dyn ModelExecutor> + Send + Sync>;

/// Resolves model URLs to executors. `mem://` URLs come from an in-process
/// blob map; anything else is read from disk (plain path or `file://`).
#[derive(Clone, Default)]
pub struct ModelStore {
    blobs: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
    wrapper: Option<ExecutorWrapper>,
}

impl fmt::Debug for ModelStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelStore")
            .field("blobs", &self.blobs.lock().map(|b| b.len()).unwrap_or(0))
            .field("wrapped", &self.wrapper.is_some())
            .finish()
    }
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same blobs, but every loaded executor goes through `wrapper`.
    pub fn with_wrapper(&self, wrapper: ExecutorWrapper) -> Self {
        Self {
            blobs: Arc::clone(&self.blobs),
            wrapper: Some(wrapper),
        }
    }

    /// Stages a model in memory and returns its descriptor.
    pub fn insert_model(&self, name: &str, model: &LinearToyModel) -> ModelDescriptor {
        let url = format!("mem://{name}");
        let bytes = model.to_bytes();
        let digest = hash(&bytes);
        self.blobs
            .lock()
            .expect("model store lock")
            .insert(url.clone(), bytes);
        ModelDescriptor {
            model_url: url,
            params: BTreeMap::new(),
            input_dim: model.input_dim as u64,
            output_dim: model.output_dim as u64,
            weights_digest: digest,
        }
    }

    pub fn insert_blob(&self, url: &str, bytes: Vec<u8>) {
        self.blobs
            .lock()
            .expect("model store lock")
            .insert(url.to_string(), bytes);
    }

    pub fn fetch(&self, url: &str) -> Result<Vec<u8>, EngineError> {
        if url.starts_with("mem://") {
            return self
                .blobs
                .lock()
                .expect("model store lock")
                .get(url)
                .cloned()
                .ok_or_else(|| EngineError::Fetch {
                    url: url.into(),
                    reason: "not staged".into(),
                });
        }
        let path = url.strip_prefix("file://").unwrap_or(url);
        std::fs::read(Path::new(path)).map_err(|e| EngineError::Fetch {
            url: url.into(),
            reason: e.to_string(),
        })
    }

    pub fn load(&self, desc: &ModelDescriptor) -> Result<Arc<dyn ModelExecutor>, EngineError> {
        let bytes = self.fetch(&desc.model_url)?;
        let actual = hash(&bytes);
        if actual != desc.weights_digest {
            return Err(EngineError::DigestMismatch {
                url: desc.model_url.clone(),
                expected: desc.weights_digest,
                actual,
            });
        }
        let model = LinearToyModel::from_bytes(&bytes).map_err(|e| EngineError::BadModel {
            url: desc.model_url.clone(),
            reason: e.to_string(),
        })?;
        if model.input_dim as u64 != desc.input_dim || model.output_dim as u64 != desc.output_dim {
            return Err(EngineError::DimensionMismatch {
                url: desc.model_url.clone(),
            });
        }
        let exec: Arc<dyn ModelExecutor> = Arc::new(model);
        Ok(match &self.wrapper {
            Some(w) => w(exec),
            None => exec,
        })
    }
}

/// Requests for one model, ready to run.
#[derive(Clone)]
pub struct ExecutionBatch {
    pub id: u64,
    pub group_id: String,
    pub group_version: u64,
    pub model_digest: Hash32,
    pub executor: Arc<dyn ModelExecutor>,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub key: RequestKey,
    pub request_id: Hash32,
    pub input: Vec<f64>,
}

impl fmt::Debug for ExecutionBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutionBatch")
            .field("id", &self.id)
            .field("group", &self.group_id)
            .field("version", &self.group_version)
            .field("len", &self.items.len())
            .finish()
    }
}

impl ExecutionBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn run(&self) -> Result<Vec<Vec<f64>>, ExecError> {
        let inputs: Vec<Vec<f64>> = self.items.iter().map(|i| i.input.clone()).collect();
        let out = self.executor.run(&inputs)?;
        if out.len() != inputs.len() {
            return Err(ExecError::Backend("output count mismatch".into()));
        }
        Ok(out)
    }
}

/// Outcome of executing one request against one version.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredResult {
    Ok(InferenceResult),
    Failed,
}

/// Per request: one result for every version it was executed against.
#[derive(Debug, Default)]
pub struct PendingResultStore {
    results: HashMap<RequestKey, BTreeMap<u64, StoredResult>>,
}

impl PendingResultStore {
    pub fn insert(&mut self, key: RequestKey, version: u64, result: StoredResult) {
        self.results.entry(key).or_default().insert(version, result);
    }

    pub fn get(&self, key: &RequestKey, version: u64) -> Option<&StoredResult> {
        self.results.get(key)?.get(&version)
    }

    pub fn versions(&self, key: &RequestKey) -> Vec<u64> {
        self.results
            .get(key)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn remove(&mut self, key: &RequestKey) {
        self.results.remove(key);
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub node_index: NodeIndex,
    /// Number of nodes sharing the group's models.
    pub owner_nodes: usize,
    pub exec_batch_max: usize,
    pub flush_interval: Duration,
    /// Execute on arrival (execute/agree/attest). When false, requests only
    /// run once [`Engine::ensure`] asks for them (agree/execute).
    pub eager: bool,
}

struct LoadedModel {
    digest: Hash32,
    executor: Option<Arc<dyn ModelExecutor>>,
}

struct LoadedVersion {
    /// Model positions in the group this node holds.
    chunk: Vec<usize>,
    models: BTreeMap<usize, LoadedModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Lane {
    version: u64,
    model: usize,
}

struct Queued {
    key: RequestKey,
    since: Duration,
}

#[derive(Default)]
struct Queue {
    items: VecDeque<Queued>,
    urgent: usize,
}

/// Whether a result is available for `(request, version)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Ready,
    Pending,
    /// The version is not resident or the request is unknown here.
    Unavailable,
}

pub struct Engine {
    cfg: EngineConfig,
    store: ModelStore,
    versions: BTreeMap<(String, u64), LoadedVersion>,
    requests: HashMap<RequestKey, InferenceRequest>,
    queues: BTreeMap<(String, Lane), Queue>,
    queued: HashSet<(RequestKey, u64)>,
    in_flight: HashSet<(RequestKey, u64)>,
    results: PendingResultStore,
    next_batch_id: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, store: ModelStore) -> Self {
        Self {
            cfg,
            store,
            versions: BTreeMap::new(),
            requests: HashMap::new(),
            queues: BTreeMap::new(),
            queued: HashSet::new(),
            in_flight: HashSet::new(),
            results: PendingResultStore::default(),
            next_batch_id: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Registers a group version and loads this node's share of its models.
    ///
    /// Fails without registering anything if a model cannot be fetched or its
    /// digest does not match. Pending requests of the group are queued
    /// against the new version.
    pub fn load_group(&mut self, group: &ModelGroup, now: Duration) -> Result<(), EngineError> {
        if !group.is_well_formed() {
            return Err(EngineError::InvalidGroup(group.group_id.clone()));
        }
        let rank = self.cfg.node_index as usize % self.cfg.owner_nodes.max(1);
        let chunk: Vec<usize> = assigned_positions(self.cfg.owner_nodes, group.models.len(), rank)
            .map_err(|_| EngineError::InvalidGroup(group.group_id.clone()))?
            .collect();
        let mut models = BTreeMap::new();
        for &pos in &chunk {
            let desc = &group.models[pos];
            let executor = self.store.load(desc)?;
            models.insert(
                pos,
                LoadedModel {
                    digest: desc.weights_digest,
                    executor: Some(executor),
                },
            );
        }
        self.versions.insert(
            (group.group_id.clone(), group.version),
            LoadedVersion { chunk, models },
        );
        if self.cfg.eager {
            let pending: Vec<RequestKey> = self
                .requests
                .iter()
                .filter(|(_, r)| r.group_id == group.group_id)
                .map(|(k, _)| *k)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for key in pending {
                self.enqueue(key, &group.group_id, group.version, now, false);
            }
        }
        Ok(())
    }

    pub fn is_resident(&self, group_id: &str, version: u64) -> bool {
        self.versions
            .get(&(group_id.to_string(), version))
            .is_some_and(|v| v.models.values().all(|m| m.executor.is_some()))
    }

    pub fn live_versions(&self, group_id: &str) -> Vec<u64> {
        self.versions
            .range((group_id.to_string(), 0)..=(group_id.to_string(), u64::MAX))
            .map(|((_, v), _)| *v)
            .collect()
    }

    /// Frees a version and drops its queued work.
    pub fn retire_version(&mut self, group_id: &str, version: u64) {
        self.versions.remove(&(group_id.to_string(), version));
        let lanes: Vec<_> = self
            .queues
            .keys()
            .filter(|(g, l)| g == group_id && l.version == version)
            .cloned()
            .collect();
        for lane in lanes {
            if let Some(q) = self.queues.remove(&lane) {
                for item in q.items {
                    self.queued.remove(&(item.key, version));
                }
            }
        }
    }

    pub fn retire_group(&mut self, group_id: &str) {
        for v in self.live_versions(group_id) {
            self.retire_version(group_id, v);
        }
    }

    /// Keeps residency in line with group statuses after an ordered update.
    pub fn sync_status(&mut self, group: &ModelGroup) {
        if group.status == GroupStatus::Retired {
            self.retire_version(&group.group_id, group.version);
        }
    }

    /// Accepts a request for execution against every resident version of its
    /// group.
    pub fn submit(&mut self, req: &InferenceRequest, now: Duration) -> Result<RequestKey, EngineError> {
        let key = req.dedup_key();
        if self.requests.contains_key(&key) {
            return Ok(key);
        }
        let live = self.live_versions(&req.group_id);
        if live.is_empty() {
            return Err(EngineError::UnknownGroup(req.group_id.clone()));
        }
        if !req.verify_signature() {
            return Err(EngineError::BadSignature);
        }
        self.requests.insert(key, req.clone());
        if self.cfg.eager {
            for v in live {
                self.enqueue(key, &req.group_id, v, now, false);
            }
        }
        Ok(key)
    }

    pub fn knows(&self, key: &RequestKey) -> bool {
        self.requests.contains_key(key)
    }

    /// Makes sure a result for `(key, version)` is or will be produced, moving
    /// it to the front of its queue.
    pub fn ensure(&mut self, key: RequestKey, version: u64, now: Duration) -> Readiness {
        if self.results.get(&key, version).is_some() {
            return Readiness::Ready;
        }
        if self.in_flight.contains(&(key, version)) {
            return Readiness::Pending;
        }
        let Some(group_id) = self.requests.get(&key).map(|r| r.group_id.clone()) else {
            return Readiness::Unavailable;
        };
        if !self.is_resident(&group_id, version) {
            return Readiness::Unavailable;
        }
        self.enqueue(key, &group_id, version, now, true);
        Readiness::Pending
    }

    fn lane_for(&self, key: &RequestKey, group_id: &str, version: u64) -> Option<Lane> {
        let loaded = self.versions.get(&(group_id.to_string(), version))?;
        let req = self.requests.get(key)?;
        let pick = u64::from_be_bytes(req.request_id.0[..8].try_into().expect("8 bytes"));
        let model = loaded.chunk[(pick % loaded.chunk.len() as u64) as usize];
        Some(Lane { version, model })
    }

    fn enqueue(&mut self, key: RequestKey, group_id: &str, version: u64, now: Duration, urgent: bool) {
        if self.results.get(&key, version).is_some() || self.in_flight.contains(&(key, version)) {
            return;
        }
        let Some(lane) = self.lane_for(&key, group_id, version) else {
            return;
        };
        let queue = self.queues.entry((group_id.to_string(), lane)).or_default();
        if self.queued.contains(&(key, version)) {
            if urgent {
                if let Some(pos) = queue.items.iter().position(|q| q.key == key) {
                    if pos >= queue.urgent {
                        let item = queue.items.remove(pos).expect("position in range");
                        queue.items.insert(queue.urgent, item);
                        queue.urgent += 1;
                    }
                }
            }
            return;
        }
        let item = Queued { key, since: now };
        if urgent {
            queue.items.insert(queue.urgent, item);
            queue.urgent += 1;
        } else {
            queue.items.push_back(item);
        }
        self.queued.insert((key, version));
    }

    /// Number of requests waiting in queues.
    pub fn queued_len(&self) -> usize {
        self.queued.len()
    }

    /// Earliest time at which a partially filled queue must be flushed.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.queues
            .values()
            .filter_map(|q| q.items.front().map(|i| i.since + self.cfg.flush_interval))
            .min()
    }

    /// Takes the next batch to execute, if any queue is due.
    pub fn next_batch(&mut self, now: Duration) -> Option<ExecutionBatch> {
        let max = self.cfg.exec_batch_max.max(1);
        let flush = self.cfg.flush_interval;
        let due = |q: &Queue| {
            q.urgent > 0
                || q.items.len() >= max
                || q.items.front().is_some_and(|i| i.since + flush <= now)
        };
        // Urgent work first, then the queue whose head has waited longest.
        let lane = self
            .queues
            .iter()
            .filter(|(_, q)| !q.items.is_empty() && due(q))
            .min_by_key(|(_, q)| (q.urgent == 0, q.items.front().map(|i| i.since)))
            .map(|(k, _)| k.clone())?;
        let (group_id, Lane { version, model }) = lane.clone();
        let queue = self.queues.get_mut(&lane).expect("lane exists");
        let take = queue.items.len().min(max);
        let drained: Vec<Queued> = queue.items.drain(..take).collect();
        queue.urgent = queue.urgent.saturating_sub(take);
        if queue.items.is_empty() {
            self.queues.remove(&lane);
        }
        let loaded = self.versions.get(&(group_id.clone(), version))?;
        let lm = loaded.models.get(&model)?;
        let executor = lm.executor.clone()?;
        let model_digest = lm.digest;
        let mut items = Vec::with_capacity(drained.len());
        for q in drained {
            self.queued.remove(&(q.key, version));
            let Some(req) = self.requests.get(&q.key) else {
                continue;
            };
            self.in_flight.insert((q.key, version));
            items.push(BatchItem {
                key: q.key,
                request_id: req.request_id,
                input: req.input.clone(),
            });
        }
        if items.is_empty() {
            return None;
        }
        self.next_batch_id += 1;
        Some(ExecutionBatch {
            id: self.next_batch_id,
            group_id,
            group_version: version,
            model_digest,
            executor,
            items,
        })
    }

    /// Stores the outputs of a finished batch. Returns the keys whose results
    /// became available.
    pub fn complete_batch(
        &mut self,
        batch: &ExecutionBatch,
        outputs: Result<Vec<Vec<f64>>, ExecError>,
    ) -> Vec<RequestKey> {
        let mut done = Vec::with_capacity(batch.items.len());
        let outputs = outputs.ok().filter(|o| o.len() == batch.items.len());
        for (i, item) in batch.items.iter().enumerate() {
            if !self.in_flight.remove(&(item.key, batch.group_version)) {
                continue;
            }
            let stored = match &outputs {
                Some(out) => StoredResult::Ok(InferenceResult {
                    request_id: item.request_id,
                    node_index: self.cfg.node_index,
                    group_id: batch.group_id.clone(),
                    group_version: batch.group_version,
                    output: out[i].clone(),
                    model_digest: batch.model_digest,
                }),
                None => StoredResult::Failed,
            };
            self.results.insert(item.key, batch.group_version, stored);
            done.push(item.key);
        }
        done
    }

    /// Runs a batch synchronously and stores its results.
    pub fn execute_batch(&mut self, batch: &ExecutionBatch) -> Vec<StoredResult> {
        let out = batch.run();
        self.complete_batch(batch, out);
        batch
            .items
            .iter()
            .filter_map(|i| self.results.get(&i.key, batch.group_version).cloned())
            .collect()
    }

    pub fn result(&self, key: &RequestKey, version: u64) -> Option<&StoredResult> {
        self.results.get(key, version)
    }

    pub fn results(&self) -> &PendingResultStore {
        &self.results
    }

    /// Forgets a request once it is ordered and its result handed on.
    pub fn prune(&mut self, key: &RequestKey) {
        self.requests.remove(key);
        self.results.remove(key);
        self.in_flight.retain(|(k, _)| k != key);
        let stale: Vec<(RequestKey, u64)> =
            self.queued.iter().filter(|(k, _)| k == key).copied().collect();
        for (k, v) in stale {
            self.queued.remove(&(k, v));
            for ((_, lane), q) in self.queues.iter_mut() {
                if lane.version == v {
                    if let Some(pos) = q.items.iter().position(|i| i.key == k) {
                        q.items.remove(pos);
                        if pos < q.urgent {
                            q.urgent -= 1;
                        }
                    }
                }
            }
        }
        self.queues.retain(|_, q| !q.items.is_empty());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::distance::{DistanceDescriptor, Metric};

    fn toy(seed: f64) -> LinearToyModel {
        LinearToyModel::new(
            2,
            3,
            vec![1.0, 2.0, 3.0, seed, -1.0, 0.5],
            vec![0.25, -0.5],
            false,
        )
        .unwrap()
    }

    fn group(store: &ModelStore, version: u64, k: usize) -> ModelGroup {
        ModelGroup {
            group_id: "g".into(),
            version,
            models: (0..k)
                .map(|i| store.insert_model(&format!("g-v{version}-m{i}"), &toy(i as f64)))
                .collect(),
            distance: DistanceDescriptor::new(Metric::Euclidean, 1.0).unwrap(),
            status: GroupStatus::Defined,
        }
    }

    fn engine(store: &ModelStore, node: NodeIndex, eager: bool) -> Engine {
        Engine::new(
            EngineConfig {
                node_index: node,
                owner_nodes: 4,
                exec_batch_max: 4,
                flush_interval: Duration::from_millis(5),
                eager,
            },
            store.clone(),
        )
    }

    fn request(nonce: u64) -> InferenceRequest {
        InferenceRequest::new(&KeyPair::from_label("c"), nonce, "g", vec![1.0, 2.0, 3.0], None)
    }

    fn drain(e: &mut Engine, now: Duration) -> Vec<usize> {
        let mut sizes = Vec::new();
        while let Some(b) = e.next_batch(now) {
            sizes.push(b.len());
            e.execute_batch(&b);
        }
        sizes
    }

    #[test]
    fn identity_model_returns_input() {
        let m = LinearToyModel::identity(3);
        assert_eq!(m.run(&[vec![1.0, -2.0, 0.5]]).unwrap(), vec![vec![1.0, -2.0, 0.5]]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let m = LinearToyModel::new(2, 2, vec![0.0; 4], vec![3.0, 4.0], false).unwrap();
        assert_eq!(m.run(&[vec![9.0, 9.0]]).unwrap(), vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn batch_equals_loop() {
        let m = toy(0.5);
        let inputs: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 1.0 / (i as f64 + 1.0), -0.3]).collect();
        let batched = m.run(&inputs).unwrap();
        for (x, y) in inputs.iter().zip(&batched) {
            let single = m.run(std::slice::from_ref(x)).unwrap();
            assert_eq!(single[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn model_file_round_trip_and_digest() {
        let m = toy(1.5);
        let bytes = m.to_bytes();
        assert_eq!(LinearToyModel::from_bytes(&bytes).unwrap(), m);
        assert_eq!(m.digest(), hash(&bytes));
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(LinearToyModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn softmax_is_a_distribution() {
        let m = LinearToyModel::new(3, 1, vec![1.0, 2.0, 3.0], vec![0.0; 3], true).unwrap();
        let y = &m.run(&[vec![100.0]]).unwrap()[0];
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y[2] > y[1] && y[1] > y[0]);
    }

    #[test]
    fn each_node_holds_its_assigned_model() {
        let store = ModelStore::new();
        let g = group(&store, 1, 4);
        for node in 0..4 {
            let mut e = engine(&store, node, true);
            e.load_group(&g, Duration::ZERO).unwrap();
            let key = e.submit(&request(1), Duration::ZERO).unwrap();
            drain(&mut e, Duration::from_millis(10));
            match e.result(&key, 1).unwrap() {
                StoredResult::Ok(r) => {
                    assert_eq!(r.model_digest, g.models[node as usize].weights_digest);
                    assert_eq!(r.node_index, node);
                }
                StoredResult::Failed => panic!("execution failed"),
            }
        }
    }

    #[test]
    fn digest_mismatch_rejects_group() {
        let store = ModelStore::new();
        let mut g = group(&store, 1, 4);
        g.models[0].weights_digest = Hash32([7; 32]);
        let mut e = engine(&store, 0, true);
        assert!(matches!(
            e.load_group(&g, Duration::ZERO),
            Err(EngineError::DigestMismatch { .. })
        ));
        assert!(e.live_versions("g").is_empty());
    }

    #[test]
    fn executes_against_all_live_versions() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 4), Duration::ZERO).unwrap();
        e.load_group(&group(&store, 2, 4), Duration::ZERO).unwrap();
        let key = e.submit(&request(1), Duration::ZERO).unwrap();
        drain(&mut e, Duration::from_millis(10));
        assert_eq!(e.results().versions(&key), vec![1, 2]);
    }

    #[test]
    fn version_loaded_later_picks_up_pending_requests() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 4), Duration::ZERO).unwrap();
        let key = e.submit(&request(1), Duration::ZERO).unwrap();
        e.load_group(&group(&store, 2, 4), Duration::ZERO).unwrap();
        drain(&mut e, Duration::from_millis(10));
        assert_eq!(e.results().versions(&key), vec![1, 2]);
    }

    #[test]
    fn eight_requests_make_two_batches() {
        let store = ModelStore::new();
        // One model replicated everywhere so all requests share a queue.
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 1), Duration::ZERO).unwrap();
        for n in 0..8 {
            e.submit(&request(n), Duration::ZERO).unwrap();
        }
        assert_eq!(drain(&mut e, Duration::ZERO), vec![4, 4]);
    }

    #[test]
    fn partial_batches_wait_for_the_flush_interval() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 1), Duration::ZERO).unwrap();
        e.submit(&request(1), Duration::ZERO).unwrap();
        assert!(e.next_batch(Duration::from_millis(4)).is_none());
        assert_eq!(e.next_deadline(), Some(Duration::from_millis(5)));
        assert_eq!(e.next_batch(Duration::from_millis(5)).unwrap().len(), 1);
    }

    #[test]
    fn ensure_flushes_immediately_and_lazily_enqueues() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, false);
        e.load_group(&group(&store, 1, 1), Duration::ZERO).unwrap();
        let key = e.submit(&request(1), Duration::ZERO).unwrap();
        assert!(e.next_batch(Duration::from_secs(1)).is_none());
        assert_eq!(e.ensure(key, 1, Duration::ZERO), Readiness::Pending);
        let b = e.next_batch(Duration::ZERO).unwrap();
        assert_eq!(e.ensure(key, 1, Duration::ZERO), Readiness::Pending);
        e.execute_batch(&b);
        assert_eq!(e.ensure(key, 1, Duration::ZERO), Readiness::Ready);
        assert_eq!(e.ensure(key, 9, Duration::ZERO), Readiness::Unavailable);
    }

    #[test]
    fn retired_group_rejects_submissions() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 4), Duration::ZERO).unwrap();
        e.submit(&request(1), Duration::ZERO).unwrap();
        e.retire_group("g");
        assert_eq!(e.queued_len(), 0);
        assert!(matches!(
            e.submit(&request(2), Duration::ZERO),
            Err(EngineError::UnknownGroup(_))
        ));
    }

    #[test]
    fn bad_signature_is_rejected() {
        let store = ModelStore::new();
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 4), Duration::ZERO).unwrap();
        let mut r = request(1);
        r.input[0] = 42.0;
        assert_eq!(e.submit(&r, Duration::ZERO), Err(EngineError::BadSignature));
    }

    #[test]
    fn executor_failure_is_stored_as_failed() {
        struct Broken;
        impl ModelExecutor for Broken {
            fn input_dim(&self) -> usize { 3 }
            fn output_dim(&self) -> usize { 2 }
            fn run(&self, _: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ExecError> {
                Err(ExecError::Backend("boom".into()))
            }
        }
        let store = ModelStore::new().with_wrapper(Arc::new(|_| Arc::new(Broken) as Arc<dyn ModelExecutor>));
        let mut e = engine(&store, 0, true);
        e.load_group(&group(&store, 1, 1), Duration::ZERO).unwrap();
        let key = e.submit(&request(1), Duration::ZERO).unwrap();
        drain(&mut e, Duration::from_secs(1));
        assert_eq!(e.result(&key, 1), Some(&StoredResult::Failed));
    }

    #[test]
    fn perturbation_is_deterministic_and_bounded() {
        let base: Arc<dyn ModelExecutor> = Arc::new(toy(0.0));
        let p = Perturbed { inner: base.clone(), seed: 3, magnitude: 0.01 };
        let x = vec![vec![0.1, 0.2, 0.3]];
        let a = p.run(&x).unwrap();
        assert_eq!(a, p.run(&x).unwrap());
        let clean = base.run(&x).unwrap();
        for (u, v) in a[0].iter().zip(&clean[0]) {
            assert!((u - v).abs() <= 0.01);
        }
        let o = Offset { inner: base.clone(), offset: vec![1.0] };
        assert_eq!(o.run(&x).unwrap()[0][0], clean[0][0] + 1.0);
    }
}
