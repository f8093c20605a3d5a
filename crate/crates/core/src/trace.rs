//! Events a replica reports for post-hoc checking.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::Hash32;
use crate::distance::Metric;
use crate::domain::{NodeIndex, Op};
use crate::messages::{Seq, View};

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    /// A batch was delivered to the state fold.
    Ordered {
        node: NodeIndex,
        view: View,
        seq: Seq,
        pp_digest: Hash32,
        ops: Vec<Op>,
        /// Version each op executes against, `None` for rejections and updates.
        versions: Vec<Option<u64>>,
    },
    /// The node ran quorum selection for one request and attested the result.
    Attested {
        node: NodeIndex,
        view: View,
        seq: Seq,
        op_digest: Hash32,
        metric: Metric,
        epsilon: f64,
        outputs: BTreeMap<NodeIndex, Vec<f64>>,
        selected: BTreeSet<NodeIndex>,
        satisfied: bool,
    },
    ViewChangeSent {
        node: NodeIndex,
        new_view: View,
    },
    ViewEntered {
        node: NodeIndex,
        view: View,
        primary: NodeIndex,
    },
}

impl TraceEvent {
    pub fn node(&self) -> NodeIndex {
        match self {
            TraceEvent::Ordered { node, .. }
            | TraceEvent::Attested { node, .. }
            | TraceEvent::ViewChangeSent { node, .. }
            | TraceEvent::ViewEntered { node, .. } => *node,
        }
    }
}

impl Encode for TraceEvent {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            TraceEvent::Ordered {
                node,
                view,
                seq,
                pp_digest,
                ops,
                versions,
            } => {
                enc.tag(0);
                enc.put(node);
                enc.put(view);
                enc.put(seq);
                enc.put(pp_digest);
                enc.put(ops);
                enc.put(versions);
            }
            TraceEvent::Attested {
                node,
                view,
                seq,
                op_digest,
                metric,
                epsilon,
                outputs,
                selected,
                satisfied,
            } => {
                enc.tag(1);
                enc.put(node);
                enc.put(view);
                enc.put(seq);
                enc.put(op_digest);
                enc.put(metric);
                enc.put(epsilon);
                enc.put(outputs);
                enc.put(selected);
                enc.put(satisfied);
            }
            TraceEvent::ViewChangeSent { node, new_view } => {
                enc.tag(2);
                enc.put(node);
                enc.put(new_view);
            }
            TraceEvent::ViewEntered { node, view, primary } => {
                enc.tag(3);
                enc.put(node);
                enc.put(view);
                enc.put(primary);
            }
        }
    }
}

impl Decode for TraceEvent {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.tag()? {
            0 => TraceEvent::Ordered {
                node: dec.get()?,
                view: dec.get()?,
                seq: dec.get()?,
                pp_digest: dec.get()?,
                ops: dec.get()?,
                versions: dec.get()?,
            },
            1 => TraceEvent::Attested {
                node: dec.get()?,
                view: dec.get()?,
                seq: dec.get()?,
                op_digest: dec.get()?,
                metric: dec.get()?,
                epsilon: dec.get()?,
                outputs: dec.get()?,
                selected: dec.get()?,
                satisfied: dec.get()?,
            },
            2 => TraceEvent::ViewChangeSent {
                node: dec.get()?,
                new_view: dec.get()?,
            },
            3 => TraceEvent::ViewEntered {
                node: dec.get()?,
                view: dec.get()?,
                primary: dec.get()?,
            },
            tag => return Err(CodecError::InvalidTag { ty: "TraceEvent", tag }),
        })
    }
}
