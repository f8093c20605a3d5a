//! Client-facing protocol: requests to a proxy, its replies, endpoint
//! discovery and the retrying client session.

use std::collections::BTreeMap;
use std::time::Duration;

use crate::canonical_struct;
use crate::certificate::{verify_cert, verify_failure_cert, FailureCertificate, InferenceCertificate};
use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{sign_value, verify_value, KeyPair, PublicKey, Signature};
use crate::distance::DistanceDescriptor;
use crate::domain::{ClusterConfig, FailureCode, InferenceResult, ModelGroup, NodeIndex, Op, OpOutcome, RequestKey};
use crate::messages::Seq;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientRequest {
    Submit(Op),
    ListGroups,
}

impl Encode for ClientRequest {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            ClientRequest::Submit(op) => {
                enc.tag(0);
                enc.put(op);
            }
            ClientRequest::ListGroups => enc.tag(1),
        }
    }
}

impl Decode for ClientRequest {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(ClientRequest::Submit(dec.get()?)),
            1 => Ok(ClientRequest::ListGroups),
            tag => Err(CodecError::InvalidTag {
                ty: "ClientRequest",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProxyReply {
    Certified {
        key: RequestKey,
        results: Vec<InferenceResult>,
        cert: InferenceCertificate,
        distance: DistanceDescriptor,
        epsilon: f64,
    },
    /// The op was ordered but has no trustworthy result.
    FailureCertified {
        key: RequestKey,
        cert: FailureCertificate,
    },
    /// Refused by this proxy before ordering. Not certified.
    Rejected {
        key: RequestKey,
        code: FailureCode,
    },
    /// Ordered outcome of a group update. Not certified.
    UpdateOutcome {
        key: RequestKey,
        seq: Seq,
        outcome: OpOutcome,
    },
    Groups(Vec<ModelGroup>),
}

impl Encode for ProxyReply {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            ProxyReply::Certified {
                key,
                results,
                cert,
                distance,
                epsilon,
            } => {
                enc.tag(0);
                enc.put(key);
                enc.put(results);
                enc.put(cert);
                enc.put(distance);
                enc.put(epsilon);
            }
            ProxyReply::FailureCertified { key, cert } => {
                enc.tag(1);
                enc.put(key);
                enc.put(cert);
            }
            ProxyReply::Rejected { key, code } => {
                enc.tag(2);
                enc.put(key);
                enc.put(code);
            }
            ProxyReply::UpdateOutcome { key, seq, outcome } => {
                enc.tag(3);
                enc.put(key);
                enc.put(seq);
                enc.put(outcome);
            }
            ProxyReply::Groups(g) => {
                enc.tag(4);
                enc.put(g);
            }
        }
    }
}

impl Decode for ProxyReply {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.tag()? {
            0 => ProxyReply::Certified {
                key: dec.get()?,
                results: dec.get()?,
                cert: dec.get()?,
                distance: dec.get()?,
                epsilon: dec.get()?,
            },
            1 => ProxyReply::FailureCertified {
                key: dec.get()?,
                cert: dec.get()?,
            },
            2 => ProxyReply::Rejected {
                key: dec.get()?,
                code: dec.get()?,
            },
            3 => ProxyReply::UpdateOutcome {
                key: dec.get()?,
                seq: dec.get()?,
                outcome: dec.get()?,
            },
            4 => ProxyReply::Groups(dec.get()?),
            tag => return Err(CodecError::InvalidTag { ty: "ProxyReply", tag }),
        })
    }
}

impl ProxyReply {
    pub fn key(&self) -> Option<RequestKey> {
        match self {
            ProxyReply::Certified { key, .. }
            | ProxyReply::FailureCertified { key, .. }
            | ProxyReply::Rejected { key, .. }
            | ProxyReply::UpdateOutcome { key, .. } => Some(*key),
            ProxyReply::Groups(_) => None,
        }
    }
}

/// Node endpoints and keys, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    pub nodes: Vec<(String, PublicKey)>,
    pub f: usize,
}

impl Endpoints {
    pub fn from_cluster(cluster: &ClusterConfig) -> Self {
        Self {
            nodes: cluster
                .nodes()
                .iter()
                .map(|n| (n.endpoint.clone(), n.public_key.clone()))
                .collect(),
            f: cluster.f(),
        }
    }

    pub fn keys(&self) -> Vec<PublicKey> {
        self.nodes.iter().map(|(_, k)| k.clone()).collect()
    }
}

/// The cluster configuration signed by a discovery key clients trust.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDiscovery {
    pub cluster: ClusterConfig,
    pub signer: PublicKey,
    pub sig: Signature,
}

canonical_struct!(SignedDiscovery { cluster, signer, sig });

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiscoveryError {
    #[error("discovery file is malformed: {0}")]
    Malformed(String),
    #[error("discovery file is not signed by the trusted key")]
    UntrustedSigner,
    #[error("discovery signature does not verify")]
    BadSignature,
}

impl SignedDiscovery {
    pub fn sign(key: &KeyPair, cluster: ClusterConfig) -> Self {
        let sig = sign_value(key, &("DISCOVERY", &cluster));
        Self {
            cluster,
            signer: key.public_key().clone(),
            sig,
        }
    }

    /// Checks the signature and, when given, that the signer is `trusted`.
    pub fn verify(&self, trusted: Option<&PublicKey>) -> Result<Endpoints, DiscoveryError> {
        if trusted.is_some_and(|t| t != &self.signer) {
            return Err(DiscoveryError::UntrustedSigner);
        }
        if !verify_value(&self.signer, &("DISCOVERY", &self.cluster), &self.sig) {
            return Err(DiscoveryError::BadSignature);
        }
        self.cluster
            .validate()
            .map_err(|e| DiscoveryError::Malformed(e.to_string()))?;
        Ok(Endpoints::from_cluster(&self.cluster))
    }

    /// Text form: hex of the canonical encoding.
    pub fn to_text(&self) -> String {
        hex::encode(self.to_canonical()) + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self, DiscoveryError> {
        let bytes = hex::decode(text.trim()).map_err(|e| DiscoveryError::Malformed(e.to_string()))?;
        Self::from_canonical(&bytes).map_err(|e| DiscoveryError::Malformed(e.to_string()))
    }
}

/// How a client session ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Certified {
        results: Vec<InferenceResult>,
        cert: InferenceCertificate,
        distance: DistanceDescriptor,
        epsilon: f64,
        proxy: NodeIndex,
    },
    Failed {
        cert: FailureCertificate,
        proxy: NodeIndex,
    },
    /// `f + 1` proxies refused the op with this code.
    Rejected(FailureCode),
    /// `f + 1` proxies reported this ordered update outcome.
    Update { seq: Seq, outcome: OpOutcome },
    GaveUp,
}

impl Outcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, Outcome::Certified { .. } | Outcome::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionStep {
    Send(Vec<(NodeIndex, ClientRequest)>),
    Done(Outcome),
}

/// Submits one op and retries across proxies until a reply verifies.
///
/// Certified replies are checked against the node keys and accepted from a
/// single proxy. Uncertified replies (proxy-side rejections, update
/// outcomes) need `f + 1` matching answers from distinct proxies. Sans-IO:
/// the caller moves messages and calls [`ClientSession::on_timeout`] at
/// [`ClientSession::deadline`].
#[derive(Debug, Clone)]
pub struct ClientSession {
    op: Op,
    keys: Vec<PublicKey>,
    f: usize,
    order: Vec<NodeIndex>,
    next: usize,
    timeouts: usize,
    retry_after: Duration,
    deadline: Duration,
    /// Uncertified answers by proxy.
    votes: BTreeMap<NodeIndex, ProxyReply>,
    done: bool,
}

impl ClientSession {
    /// `first` picks the first proxy; the rest follow in index order.
    pub fn new(op: Op, endpoints: &Endpoints, first: NodeIndex, retry_after: Duration) -> Self {
        let n = endpoints.nodes.len() as NodeIndex;
        let order = (0..n).map(|i| (first + i) % n.max(1)).collect();
        Self {
            op,
            keys: endpoints.keys(),
            f: endpoints.f,
            order,
            next: 0,
            timeouts: 0,
            retry_after,
            deadline: Duration::ZERO,
            votes: BTreeMap::new(),
            done: false,
        }
    }

    pub fn key(&self) -> RequestKey {
        self.op.key()
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn deadline(&self) -> Option<Duration> {
        (!self.done).then_some(self.deadline)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn start(&mut self, now: Duration) -> SessionStep {
        self.try_next(now)
    }

    fn try_next(&mut self, now: Duration) -> SessionStep {
        if self.next >= self.order.len() {
            self.done = true;
            return SessionStep::Done(Outcome::GaveUp);
        }
        let proxy = self.order[self.next];
        self.next += 1;
        self.deadline = now + self.retry_after;
        SessionStep::Send(vec![(proxy, ClientRequest::Submit(self.op.clone()))])
    }

    pub fn on_timeout(&mut self, now: Duration) -> SessionStep {
        if self.done {
            return SessionStep::Send(Vec::new());
        }
        // Silence from f + 1 proxies means at least one honest proxy could
        // not get the op certified in time.
        self.timeouts += 1;
        if self.timeouts > self.f {
            self.done = true;
            return SessionStep::Done(Outcome::GaveUp);
        }
        self.try_next(now)
    }

    pub fn on_reply(&mut self, from: NodeIndex, reply: ProxyReply, now: Duration) -> SessionStep {
        if self.done || reply.key() != Some(self.op.key()) {
            return SessionStep::Send(Vec::new());
        }
        match reply {
            ProxyReply::Certified {
                results,
                cert,
                distance,
                epsilon,
                ..
            } => {
                let ok = match &self.op {
                    Op::Request(req) => verify_cert(req, &results, &cert, &self.keys, self.f),
                    Op::Update(_) => false,
                };
                if ok {
                    self.done = true;
                    return SessionStep::Done(Outcome::Certified {
                        results,
                        cert,
                        distance,
                        epsilon,
                        proxy: from,
                    });
                }
                self.try_next(now)
            }
            ProxyReply::FailureCertified { cert, .. } => {
                if verify_failure_cert(&self.op, &cert, &self.keys, self.f) {
                    self.done = true;
                    return SessionStep::Done(Outcome::Failed { cert, proxy: from });
                }
                self.try_next(now)
            }
            vote @ (ProxyReply::Rejected { .. } | ProxyReply::UpdateOutcome { .. }) => {
                self.votes.insert(from, vote.clone());
                let agreeing = self.votes.values().filter(|v| **v == vote).count();
                if agreeing > self.f {
                    self.done = true;
                    return SessionStep::Done(match vote {
                        ProxyReply::Rejected { code, .. } => Outcome::Rejected(code),
                        ProxyReply::UpdateOutcome { seq, outcome, .. } => Outcome::Update { seq, outcome },
                        _ => unreachable!("matched above"),
                    });
                }
                self.try_next(now)
            }
            ProxyReply::Groups(_) => SessionStep::Send(Vec::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::InferenceRequest;

    fn endpoints() -> (ClusterConfig, Endpoints) {
        let members = (0..4)
            .map(|i| {
                (
                    KeyPair::from_label(&format!("e{i}")).public_key().clone(),
                    format!("127.0.0.1:{}", 9000 + i),
                )
            })
            .collect();
        let cluster = ClusterConfig::new(members, 1, Duration::from_millis(100)).unwrap();
        let ep = Endpoints::from_cluster(&cluster);
        (cluster, ep)
    }

    #[test]
    fn discovery_signature() {
        let (cluster, ep) = endpoints();
        let dk = KeyPair::from_label("discovery");
        let signed = SignedDiscovery::sign(&dk, cluster);
        let text = signed.to_text();
        let back = SignedDiscovery::from_text(&text).unwrap();
        assert_eq!(back.verify(Some(dk.public_key())).unwrap(), ep);
        let other = KeyPair::from_label("other");
        assert_eq!(
            back.verify(Some(other.public_key())),
            Err(DiscoveryError::UntrustedSigner)
        );
        let mut tampered = back.clone();
        tampered.sig.0[0] ^= 1;
        assert_eq!(tampered.verify(None), Err(DiscoveryError::BadSignature));
    }

    #[test]
    fn uncertified_rejection_needs_f_plus_one() {
        let (_, ep) = endpoints();
        let req = InferenceRequest::new(&KeyPair::from_label("c"), 0, "g", vec![1.0], None);
        let op = Op::Request(req);
        let key = op.key();
        let mut s = ClientSession::new(op, &ep, 2, Duration::from_millis(50));
        let t = Duration::ZERO;
        assert_eq!(
            s.start(t),
            SessionStep::Send(vec![(2, ClientRequest::Submit(s.op().clone()))])
        );
        let rej = ProxyReply::Rejected {
            key,
            code: FailureCode::UnknownGroup,
        };
        match s.on_reply(2, rej.clone(), t) {
            SessionStep::Send(v) => assert_eq!(v[0].0, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            s.on_reply(3, rej, t),
            SessionStep::Done(Outcome::Rejected(FailureCode::UnknownGroup))
        );
    }

    #[test]
    fn session_gives_up_after_all_proxies() {
        let (_, ep) = endpoints();
        let req = InferenceRequest::new(&KeyPair::from_label("c"), 0, "g", vec![1.0], None);
        let mut s = ClientSession::new(Op::Request(req), &ep, 0, Duration::from_millis(10));
        let mut now = Duration::ZERO;
        let mut step = s.start(now);
        let mut tried = 0;
        while let SessionStep::Send(_) = step {
            tried += 1;
            now += Duration::from_millis(10);
            step = s.on_timeout(now);
        }
        assert_eq!(tried, 2);
        assert_eq!(step, SessionStep::Done(Outcome::GaveUp));
    }

    #[test]
    fn reply_round_trip() {
        let r = ProxyReply::Rejected {
            key: RequestKey(crate::crypto::Hash32([3; 32])),
            code: FailureCode::UpdateInProgress,
        };
        assert_eq!(ProxyReply::from_canonical(&r.to_canonical()).unwrap(), r);
        let c = ClientRequest::ListGroups;
        assert_eq!(ClientRequest::from_canonical(&c.to_canonical()).unwrap(), c);
    }
}
