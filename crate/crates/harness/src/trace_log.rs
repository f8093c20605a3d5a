//! Line-delimited trace of a simulated run. Each line is the hex form of a
//! canonically encoded [`TraceRecord`].

use std::io::{self, Write};
use std::time::Duration;

use quorate_core::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use quorate_core::crypto::Hash32;
use quorate_core::domain::{NodeIndex, RequestKey};
use quorate_core::trace::TraceEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Party {
    Node(NodeIndex),
    Client(u64),
}

impl Encode for Party {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Party::Node(i) => {
                enc.tag(0);
                enc.put(i);
            }
            Party::Client(c) => {
                enc.tag(1);
                enc.put(c);
            }
        }
    }
}

impl Decode for Party {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(Party::Node(dec.get()?)),
            1 => Ok(Party::Client(dec.get()?)),
            tag => Err(CodecError::InvalidTag { ty: "Party", tag }),
        }
    }
}

/// Short form of how a client session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Certified,
    FailureCertified,
    Rejected,
    Update,
    GaveUp,
}

impl OutcomeKind {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        [
            OutcomeKind::Certified,
            OutcomeKind::FailureCertified,
            OutcomeKind::Rejected,
            OutcomeKind::Update,
            OutcomeKind::GaveUp,
        ]
        .get(tag as usize)
        .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    Send {
        at: Duration,
        from: Party,
        to: Party,
        kind: String,
        digest: Hash32,
        dropped: bool,
    },
    Node {
        at: Duration,
        event: TraceEvent,
    },
    Client {
        at: Duration,
        session: u64,
        key: RequestKey,
        outcome: OutcomeKind,
    },
    Deadlock {
        at: Duration,
        outstanding: u64,
    },
}

fn put_time(enc: &mut Encoder, t: &Duration) {
    enc.u64(t.as_micros() as u64);
}

fn get_time(dec: &mut Decoder<'_>) -> Result<Duration, CodecError> {
    Ok(Duration::from_micros(dec.u64()?))
}

impl Encode for TraceRecord {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            TraceRecord::Send {
                at,
                from,
                to,
                kind,
                digest,
                dropped,
            } => {
                enc.tag(0);
                put_time(enc, at);
                enc.put(from);
                enc.put(to);
                enc.put(kind);
                enc.put(digest);
                enc.put(dropped);
            }
            TraceRecord::Node { at, event } => {
                enc.tag(1);
                put_time(enc, at);
                enc.put(event);
            }
            TraceRecord::Client {
                at,
                session,
                key,
                outcome,
            } => {
                enc.tag(2);
                put_time(enc, at);
                enc.put(session);
                enc.put(key);
                enc.tag(outcome.tag());
            }
            TraceRecord::Deadlock { at, outstanding } => {
                enc.tag(3);
                put_time(enc, at);
                enc.put(outstanding);
            }
        }
    }
}

impl Decode for TraceRecord {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.tag()? {
            0 => TraceRecord::Send {
                at: get_time(dec)?,
                from: dec.get()?,
                to: dec.get()?,
                kind: dec.get()?,
                digest: dec.get()?,
                dropped: dec.get()?,
            },
            1 => TraceRecord::Node {
                at: get_time(dec)?,
                event: dec.get()?,
            },
            2 => TraceRecord::Client {
                at: get_time(dec)?,
                session: dec.get()?,
                key: dec.get()?,
                outcome: {
                    let tag = dec.tag()?;
                    OutcomeKind::from_tag(tag).ok_or(CodecError::InvalidTag { ty: "OutcomeKind", tag })?
                },
            },
            3 => TraceRecord::Deadlock {
                at: get_time(dec)?,
                outstanding: dec.get()?,
            },
            tag => return Err(CodecError::InvalidTag { ty: "TraceRecord", tag }),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", hex::encode(r.to_canonical()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bytes = hex::decode(line.trim()).map_err(|_| CodecError::Invalid("hex line"))?;
            records.push(TraceRecord::from_canonical(&bytes)?);
        }
        Ok(Self { records })
    }

    pub fn node_events(&self) -> impl Iterator<Item = (Duration, &TraceEvent)> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Node { at, event } => Some((*at, event)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let mut log = TraceLog::default();
        log.push(TraceRecord::Send {
            at: Duration::from_micros(1500),
            from: Party::Node(1),
            to: Party::Client(9),
            kind: "reply".into(),
            digest: Hash32([7; 32]),
            dropped: false,
        });
        log.push(TraceRecord::Node {
            at: Duration::from_millis(3),
            event: TraceEvent::ViewEntered {
                node: 2,
                view: 1,
                primary: 1,
            },
        });
        log.push(TraceRecord::Client {
            at: Duration::from_millis(4),
            session: 3,
            key: RequestKey(Hash32([1; 32])),
            outcome: OutcomeKind::GaveUp,
        });
        log.push(TraceRecord::Deadlock {
            at: Duration::from_millis(5),
            outstanding: 2,
        });
        let text = String::from_utf8(log.to_bytes()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(TraceLog::parse(&text).unwrap(), log);
    }
}
