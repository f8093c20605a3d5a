//! Client side of the TCP transport: runs a [`ClientSession`] against the
//! cluster's proxies.

use std::collections::BTreeMap;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use quorate_core::client::{ClientRequest, ClientSession, Endpoints, Outcome, ProxyReply, SessionStep};
use quorate_core::domain::{ModelGroup, NodeIndex, Op};

use crate::config::Timeouts;
use crate::wire::{self, WireMsg};
use crate::{CliError, Result};

pub struct NetClient {
    endpoints: Endpoints,
    timeouts: Timeouts,
    conns: BTreeMap<NodeIndex, TcpStream>,
    replies_tx: Sender<(NodeIndex, ProxyReply)>,
    replies: Receiver<(NodeIndex, ProxyReply)>,
}

impl NetClient {
    pub fn new(endpoints: Endpoints, timeouts: Timeouts) -> Self {
        let (replies_tx, replies) = mpsc::channel();
        Self {
            endpoints,
            timeouts,
            conns: BTreeMap::new(),
            replies_tx,
            replies,
        }
    }

    fn connect(&mut self, to: NodeIndex) -> std::io::Result<&mut TcpStream> {
        if !self.conns.contains_key(&to) {
            let endpoint = &self
                .endpoints
                .nodes
                .get(to as usize)
                .ok_or(std::io::ErrorKind::NotFound)?
                .0;
            let addr = endpoint
                .to_socket_addrs()?
                .next()
                .ok_or(std::io::ErrorKind::AddrNotAvailable)?;
            let mut stream = TcpStream::connect_timeout(&addr, self.timeouts.connect)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(self.timeouts.connect))?;
            match wire::recv(&mut stream)? {
                Some(WireMsg::Challenge(_)) => {}
                _ => return Err(std::io::ErrorKind::InvalidData.into()),
            }
            wire::send(&mut stream, &WireMsg::ClientHello)?;
            stream.set_read_timeout(None)?;
            let mut reader = stream.try_clone()?;
            let tx = self.replies_tx.clone();
            thread::spawn(move || {
                while let Ok(Some(WireMsg::Reply(reply))) = wire::recv(&mut reader) {
                    if tx.send((to, reply)).is_err() {
                        return;
                    }
                }
            });
            self.conns.insert(to, stream);
        }
        Ok(self.conns.get_mut(&to).expect("inserted above"))
    }

    fn send(&mut self, to: NodeIndex, msg: ClientRequest) -> bool {
        let sent = self
            .connect(to)
            .and_then(|s| wire::send(s, &WireMsg::Request(msg)));
        if let Err(e) = &sent {
            log::warn!("proxy {to} unreachable: {e}");
            self.conns.remove(&to);
        }
        sent.is_ok()
    }

    /// Submits `op`, starting with proxy `first`, and retries across
    /// proxies until the session ends. An unreachable proxy counts as a
    /// timed-out one.
    pub fn submit(&mut self, op: Op, first: NodeIndex) -> Outcome {
        let start = Instant::now();
        let mut session = ClientSession::new(op, &self.endpoints, first, self.timeouts.client_retry);
        let mut step = session.start(start.elapsed());
        loop {
            let mut unreachable = false;
            match step {
                SessionStep::Done(outcome) => return outcome,
                SessionStep::Send(msgs) => {
                    for (to, msg) in msgs {
                        unreachable |= !self.send(to, msg);
                    }
                }
            }
            if unreachable {
                step = session.on_timeout(start.elapsed());
                continue;
            }
            let Some(deadline) = session.deadline() else {
                return Outcome::GaveUp;
            };
            let wait = deadline.saturating_sub(start.elapsed());
            step = match self.replies.recv_timeout(wait) {
                Ok((from, reply)) => session.on_reply(from, reply, start.elapsed()),
                Err(RecvTimeoutError::Timeout) => session.on_timeout(start.elapsed()),
                Err(RecvTimeoutError::Disconnected) => return Outcome::GaveUp,
            };
        }
    }

    /// Group listing from the first proxy that answers. Not certified: it
    /// reflects one node's ordered state.
    pub fn list_groups(&mut self) -> Result<(NodeIndex, Vec<ModelGroup>)> {
        for to in 0..self.endpoints.nodes.len() as NodeIndex {
            if !self.send(to, ClientRequest::ListGroups) {
                continue;
            }
            let deadline = Instant::now() + self.timeouts.client_retry.min(Duration::from_secs(10));
            while let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                match self.replies.recv_timeout(wait) {
                    Ok((from, ProxyReply::Groups(g))) if from == to => return Ok((from, g)),
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
        }
        Err(CliError::NotCertified("no proxy answered the group listing".into()))
    }
}
