//! The node daemon: one [`Replica`] driven over TCP.
//!
//! Threads: a listener spawning one reader per inbound connection, one
//! dialer/writer per peer, one writer per client connection, an inference
//! worker, and the event loop that owns the replica. They talk through
//! channels only.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use quorate_core::agreement::{Action, ClientId, Input, Replica, ReplicaConfig, ReplicaError};
use quorate_core::client::{ClientRequest, ProxyReply};
use quorate_core::codec::Encode;
use quorate_core::crypto::{Hash32, KeyPair, PublicKey};
use quorate_core::distance::diameter;
use quorate_core::domain::NodeIndex;
use quorate_core::inference::{ExecError, ExecutionBatch, ModelStore};
use quorate_core::messages::PeerMsg;
use quorate_core::trace::TraceEvent;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, Timeouts, Transport};
use crate::wire::{self, WireMsg};
use crate::{CliError, Result};

/// Longest the event loop sleeps before rechecking the stop flag.
const POLL: Duration = Duration::from_millis(50);
const RECONNECT: Duration = Duration::from_millis(100);

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

/// Routes SIGTERM and SIGINT to a flag the daemon polls, and returns it.
pub fn install_signal_handlers() -> &'static AtomicBool {
    let handler = on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t;
    // SAFETY: the handler only stores to an atomic, which is
    // async-signal-safe.
    unsafe {
        libc::signal(libc::SIGTERM, handler);
        libc::signal(libc::SIGINT, handler);
    }
    &STOP
}

pub struct NodeOptions {
    pub config: LoadedConfig,
    pub index: NodeIndex,
    pub key: KeyPair,
    pub timeouts: Timeouts,
}

/// Written to the state directory on shutdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub index: NodeIndex,
    pub view: u64,
    pub last_ordered: u64,
    pub stable_checkpoint: u64,
    pub registry_digest: String,
    /// Hex of the canonical group registry.
    pub registry: String,
    pub clean_shutdown: bool,
}

impl NodeState {
    fn of(replica: &Replica, clean_shutdown: bool) -> Self {
        Self {
            index: replica.index(),
            view: replica.view(),
            last_ordered: replica.last_ordered(),
            stable_checkpoint: replica.stable_checkpoint(),
            registry_digest: replica.registry().digest().to_hex(),
            registry: hex::encode(replica.registry().to_canonical()),
            clean_shutdown,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        }
        let tmp = path.with_extension("tmp");
        let text = toml::to_string(self).expect("state serializes");
        std::fs::write(&tmp, text).map_err(|e| CliError::io(tmp.display(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))
    }
}

pub fn state_path(config: &LoadedConfig, index: NodeIndex) -> PathBuf {
    config.state_dir().join(format!("node-{index}.state"))
}

enum Event {
    Peer { from: NodeIndex, msg: PeerMsg },
    ClientOpen { id: ClientId, replies: Sender<ProxyReply> },
    Client { id: ClientId, msg: ClientRequest },
    ClientClosed(ClientId),
    Done {
        batch: ExecutionBatch,
        outputs: std::result::Result<Vec<Vec<f64>>, ExecError>,
    },
}

/// Local checks on what the replica reports. Any failure stops the node.
struct Checker {
    n: usize,
    f: usize,
    last_ordered: u64,
    ordered: BTreeMap<u64, Hash32>,
}

impl Checker {
    fn check(&mut self, ev: &TraceEvent) -> std::result::Result<(), String> {
        match ev {
            TraceEvent::Ordered { seq, pp_digest, .. } => {
                if let Some(prev) = self.ordered.insert(*seq, *pp_digest) {
                    if prev != *pp_digest {
                        return Err(format!("seq {seq} ordered twice with different batches"));
                    }
                }
                if *seq <= self.last_ordered {
                    return Err(format!("seq {seq} ordered after {}", self.last_ordered));
                }
                self.last_ordered = *seq;
            }
            TraceEvent::ViewEntered { view, primary, .. } => {
                if u64::from(*primary) != view % self.n as u64 {
                    return Err(format!("view {view} entered with primary {primary}"));
                }
            }
            TraceEvent::Attested {
                seq,
                metric,
                epsilon,
                outputs,
                selected,
                satisfied: true,
                ..
            } => {
                let chosen: Option<Vec<&[f64]>> = selected.iter().map(|i| outputs.get(i).map(Vec::as_slice)).collect();
                let ok = chosen.is_some_and(|c| {
                    c.len() >= self.n - self.f && diameter(*metric, &c).is_ok_and(|d| d <= *epsilon)
                });
                if !ok {
                    return Err(format!("seq {seq}: attested quorum breaks the size or threshold bound"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| CliError::Config(format!("endpoint {endpoint}: {e}")))?
        .next()
        .ok_or_else(|| CliError::Config(format!("endpoint {endpoint} resolves to nothing")))
}

fn random_challenge() -> Hash32 {
    let mut c = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut c);
    Hash32(c)
}

/// Dials `to` until connected, proves our identity, then forwards queued
/// messages. A message whose write fails is lost; the protocol recovers
/// lost messages through its own timers.
fn peer_link(
    me: NodeIndex,
    to: NodeIndex,
    addr: SocketAddr,
    key: KeyPair,
    rx: Receiver<PeerMsg>,
    connect: Duration,
    stop: &'static AtomicBool,
) {
    while !stop.load(Ordering::SeqCst) {
        let Ok(mut stream) = TcpStream::connect_timeout(&addr, connect) else {
            thread::sleep(RECONNECT);
            continue;
        };
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(connect));
        let challenge = match wire::recv(&mut stream) {
            Ok(Some(WireMsg::Challenge(c))) => c,
            _ => {
                thread::sleep(RECONNECT);
                continue;
            }
        };
        let hello = WireMsg::PeerHello {
            index: me,
            sig: wire::sign_hello(&key, &challenge, me, to),
        };
        if wire::send(&mut stream, &hello).is_err() {
            continue;
        }
        log::debug!("node {me}: link to {to} up");
        loop {
            match rx.recv_timeout(POLL) {
                Ok(msg) => {
                    if let Err(e) = wire::send(&mut stream, &WireMsg::Peer(msg)) {
                        log::debug!("node {me}: link to {to} lost: {e}");
                        break;
                    }
                }
                Err(RecvTimeoutError::Timeout) if stop.load(Ordering::SeqCst) => return,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}

fn serve_peer(mut stream: TcpStream, from: NodeIndex, events: Sender<Event>) {
    let _ = stream.set_read_timeout(None);
    while let Ok(Some(frame)) = wire::recv(&mut stream) {
        let WireMsg::Peer(msg) = frame else {
            return;
        };
        if events.send(Event::Peer { from, msg }).is_err() {
            return;
        }
    }
}

fn serve_client(mut stream: TcpStream, id: ClientId, events: Sender<Event>) {
    let _ = stream.set_read_timeout(None);
    let Ok(mut writer) = stream.try_clone() else {
        return;
    };
    let (tx, rx) = mpsc::channel::<ProxyReply>();
    thread::spawn(move || {
        for reply in rx {
            if wire::send(&mut writer, &WireMsg::Reply(reply)).is_err() {
                return;
            }
        }
    });
    if events.send(Event::ClientOpen { id, replies: tx }).is_err() {
        return;
    }
    while let Ok(Some(WireMsg::Request(msg))) = wire::recv(&mut stream) {
        if events.send(Event::Client { id, msg }).is_err() {
            return;
        }
    }
    let _ = events.send(Event::ClientClosed(id));
}

fn accept(
    mut stream: TcpStream,
    me: NodeIndex,
    keys: Arc<Vec<PublicKey>>,
    events: Sender<Event>,
    next_client: Arc<AtomicU64>,
    handshake: Duration,
) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(handshake));
    let challenge = random_challenge();
    if wire::send(&mut stream, &WireMsg::Challenge(challenge)).is_err() {
        return;
    }
    match wire::recv(&mut stream) {
        Ok(Some(WireMsg::PeerHello { index, sig })) => {
            let authentic = index != me
                && keys
                    .get(index as usize)
                    .is_some_and(|k| wire::verify_hello(k, &challenge, index, me, &sig));
            if authentic {
                serve_peer(stream, index, events);
            } else {
                log::warn!("node {me}: rejected peer hello claiming index {index}");
            }
        }
        Ok(Some(WireMsg::ClientHello)) => {
            let id = next_client.fetch_add(1, Ordering::SeqCst);
            serve_client(stream, id, events);
        }
        _ => {}
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct NodeReport {
    pub state: NodeState,
    pub state_file: PathBuf,
}

/// Runs the node until `stop` is set. The state file is written on the
/// way out, also when an invariant check fails.
pub fn run_node(opts: NodeOptions, stop: &'static AtomicBool) -> Result<NodeReport> {
    let cfg = &opts.config;
    if cfg.file.transport != Transport::Sockets {
        return Err(CliError::Config(
            "transport \"sim\" runs the whole cluster in one process: use `harness run --config`".into(),
        ));
    }
    let mut cluster = cfg.cluster.clone();
    cluster.view_timeout = opts.timeouts.view_timeout;
    let n = cluster.n();
    let me = opts.index;
    let mut rc = ReplicaConfig::new(cluster.clone(), me, opts.key.clone());
    rc.collect_grace = opts.timeouts.collect_grace;
    rc.flush_interval = opts.timeouts.flush_interval;
    let mut replica = Replica::new(rc, ModelStore::new()).map_err(|e| match e {
        ReplicaError::KeyMismatch(_) | ReplicaError::BadIndex(_) => CliError::KeyMismatch(e.to_string()),
        ReplicaError::Config(m) => CliError::Config(m),
    })?;

    let state_file = state_path(cfg, me);
    if state_file.exists() {
        match NodeState::read(&state_file) {
            Ok(prev) => log::info!(
                "node {me}: previous run stopped at view {} seq {} (clean: {})",
                prev.view,
                prev.last_ordered,
                prev.clean_shutdown
            ),
            Err(e) => log::warn!("node {me}: ignoring unreadable state file: {e}"),
        }
    }

    let addrs: Vec<SocketAddr> = cluster
        .nodes()
        .iter()
        .map(|node| resolve(&node.endpoint))
        .collect::<Result<_>>()?;
    let listener = TcpListener::bind(addrs[me as usize]).map_err(|e| CliError::io(addrs[me as usize], e))?;
    log::info!("node {me} listening on {}", addrs[me as usize]);

    let (events_tx, events) = mpsc::channel::<Event>();
    let keys = Arc::new(cluster.keys());
    let next_client = Arc::new(AtomicU64::new(1));
    {
        let events_tx = events_tx.clone();
        let handshake = opts.timeouts.connect;
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (keys, events_tx, next_client) = (keys.clone(), events_tx.clone(), next_client.clone());
                thread::spawn(move || accept(stream, me, keys, events_tx, next_client, handshake));
            }
        });
    }
    let mut peers: HashMap<NodeIndex, Sender<PeerMsg>> = HashMap::new();
    for (to, addr) in addrs.iter().enumerate() {
        let to = to as NodeIndex;
        if to == me {
            continue;
        }
        let (tx, rx) = mpsc::channel();
        peers.insert(to, tx);
        let (key, addr, connect) = (opts.key.clone(), *addr, opts.timeouts.connect);
        thread::spawn(move || peer_link(me, to, addr, key, rx, connect, stop));
    }
    let (exec_tx, exec_rx) = mpsc::channel::<ExecutionBatch>();
    {
        let events_tx = events_tx.clone();
        thread::spawn(move || {
            for batch in exec_rx {
                let outputs = batch.run();
                if events_tx.send(Event::Done { batch, outputs }).is_err() {
                    return;
                }
            }
        });
    }
    drop(events_tx);

    let mut checker = Checker {
        n,
        f: cluster.f(),
        last_ordered: 0,
        ordered: BTreeMap::new(),
    };
    let mut clients: HashMap<ClientId, Sender<ProxyReply>> = HashMap::new();
    let mut wake: Option<Duration> = None;
    let start = Instant::now();
    let mut violation: Option<String> = None;

    while !stop.load(Ordering::SeqCst) && violation.is_none() {
        let now = start.elapsed();
        let input = if wake.is_some_and(|w| w <= now) {
            wake = None;
            Some(Input::Tick)
        } else {
            let wait = wake.map_or(POLL, |w| (w - now).min(POLL));
            match events.recv_timeout(wait) {
                Ok(Event::Peer { from, msg }) => Some(Input::Peer { from, msg }),
                Ok(Event::Client { id, msg }) => Some(Input::Client { client: id, msg }),
                Ok(Event::Done { batch, outputs }) => Some(Input::BatchDone { batch, outputs }),
                Ok(Event::ClientOpen { id, replies }) => {
                    clients.insert(id, replies);
                    None
                }
                Ok(Event::ClientClosed(id)) => {
                    clients.remove(&id);
                    None
                }
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        };
        let Some(input) = input else {
            continue;
        };
        for action in replica.handle(input, start.elapsed()) {
            match action {
                Action::Send { to, msg } => {
                    if let Some(p) = peers.get(&to) {
                        let _ = p.send(msg);
                    }
                }
                Action::Broadcast(msg) => {
                    for p in peers.values() {
                        let _ = p.send(msg.clone());
                    }
                }
                Action::Execute(batch) => {
                    let _ = exec_tx.send(batch);
                }
                Action::WakeAt(t) => wake = Some(t),
                Action::Reply { client, reply } => {
                    if let Some(c) = clients.get(&client) {
                        let _ = c.send(reply);
                    }
                }
                Action::Trace(ev) => {
                    if let TraceEvent::ViewEntered { view, primary, .. } = &ev {
                        log::info!("node {me}: entered view {view} (primary {primary})");
                    }
                    if let Err(e) = checker.check(&ev) {
                        log::error!("node {me}: invariant violated: {e}");
                        violation = Some(e);
                    }
                }
            }
        }
    }

    let state = NodeState::of(&replica, violation.is_none());
    state.write(&state_file)?;
    log::info!(
        "node {me}: stopped at view {} seq {}, state written to {}",
        state.view,
        state.last_ordered,
        state_file.display()
    );
    match violation {
        Some(v) => Err(CliError::Invariant(v)),
        None => Ok(NodeReport { state, state_file }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use quorate_core::distance::Metric;
    use std::collections::BTreeSet;

    fn checker() -> Checker {
        Checker {
            n: 4,
            f: 1,
            last_ordered: 0,
            ordered: BTreeMap::new(),
        }
    }

    fn ordered(seq: u64, d: u8) -> TraceEvent {
        TraceEvent::Ordered {
            node: 0,
            view: 0,
            seq,
            pp_digest: Hash32([d; 32]),
            ops: vec![],
            versions: vec![],
        }
    }

    #[test]
    fn checker_flags_reordering_and_bad_primaries() {
        let mut c = checker();
        assert!(c.check(&ordered(1, 1)).is_ok());
        assert!(c.check(&ordered(2, 2)).is_ok());
        assert!(c.check(&ordered(2, 3)).is_err());
        assert!(c.check(&TraceEvent::ViewEntered { node: 0, view: 5, primary: 1 }).is_ok());
        assert!(c.check(&TraceEvent::ViewEntered { node: 0, view: 5, primary: 2 }).is_err());
    }

    #[test]
    fn checker_flags_wide_quorums() {
        let outputs = BTreeMap::from([(0, vec![0.0]), (1, vec![0.1]), (2, vec![0.5])]);
        let ev = |selected: BTreeSet<NodeIndex>| TraceEvent::Attested {
            node: 0,
            view: 0,
            seq: 1,
            op_digest: Hash32([0; 32]),
            metric: Metric::MaxMinusMin,
            epsilon: 0.2,
            outputs: outputs.clone(),
            selected,
            satisfied: true,
        };
        let mut c = checker();
        assert!(c.check(&ev(BTreeSet::from([0, 1, 2]))).is_err());
        assert!(c.check(&ev(BTreeSet::from([0, 1]))).is_err());
        let outputs3 = BTreeMap::from([(0, vec![0.0]), (1, vec![0.1]), (2, vec![0.15])]);
        let ok = TraceEvent::Attested {
            node: 0,
            view: 0,
            seq: 1,
            op_digest: Hash32([0; 32]),
            metric: Metric::MaxMinusMin,
            epsilon: 0.2,
            outputs: outputs3,
            selected: BTreeSet::from([0, 1, 2]),
            satisfied: true,
        };
        assert!(c.check(&ok).is_ok());
    }
}
