//! TCP framing: a 4-byte big-endian length followed by one canonically
//! encoded [`WireMsg`].
//!
//! Node-to-node links are one-way. The accepting side sends a random
//! challenge; the dialing node answers with its index and a signature over
//! the challenge and both indices, so `from` on every delivered peer message
//! is authenticated. Clients announce themselves without a key: everything
//! they send is signed and everything they receive is checked against
//! certificates.

use std::io::{self, Read, Write};

use quorate_core::client::{ClientRequest, ProxyReply};
use quorate_core::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use quorate_core::crypto::{sign_value, verify_value, Hash32, KeyPair, PublicKey, Signature};
use quorate_core::domain::NodeIndex;
use quorate_core::messages::PeerMsg;

/// Frames above this size are refused.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone)]
pub enum WireMsg {
    Challenge(Hash32),
    PeerHello { index: NodeIndex, sig: Signature },
    ClientHello,
    Peer(PeerMsg),
    Request(ClientRequest),
    Reply(ProxyReply),
}

impl Encode for WireMsg {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            WireMsg::Challenge(c) => {
                enc.tag(0);
                enc.put(c);
            }
            WireMsg::PeerHello { index, sig } => {
                enc.tag(1);
                enc.put(index);
                enc.put(sig);
            }
            WireMsg::ClientHello => enc.tag(2),
            WireMsg::Peer(m) => {
                enc.tag(3);
                enc.put(m);
            }
            WireMsg::Request(r) => {
                enc.tag(4);
                enc.put(r);
            }
            WireMsg::Reply(r) => {
                enc.tag(5);
                enc.put(r);
            }
        }
    }
}

impl Decode for WireMsg {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.tag()? {
            0 => WireMsg::Challenge(dec.get()?),
            1 => WireMsg::PeerHello {
                index: dec.get()?,
                sig: dec.get()?,
            },
            2 => WireMsg::ClientHello,
            3 => WireMsg::Peer(dec.get()?),
            4 => WireMsg::Request(dec.get()?),
            5 => WireMsg::Reply(dec.get()?),
            tag => return Err(CodecError::InvalidTag { ty: "WireMsg", tag }),
        })
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            k => got += k,
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn send(w: &mut impl Write, msg: &WireMsg) -> io::Result<()> {
    write_frame(w, &msg.to_canonical())
}

pub fn recv(r: &mut impl Read) -> io::Result<Option<WireMsg>> {
    match read_frame(r)? {
        None => Ok(None),
        Some(bytes) => WireMsg::from_canonical(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
    }
}

fn hello_body(challenge: &Hash32, from: NodeIndex, to: NodeIndex) -> impl Encode + '_ {
    (("PEER-HELLO", challenge), (from, to))
}

pub fn sign_hello(key: &KeyPair, challenge: &Hash32, from: NodeIndex, to: NodeIndex) -> Signature {
    sign_value(key, &hello_body(challenge, from, to))
}

pub fn verify_hello(
    key: &PublicKey,
    challenge: &Hash32,
    from: NodeIndex,
    to: NodeIndex,
    sig: &Signature,
) -> bool {
    verify_value(key, &hello_body(challenge, from, to), sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        send(&mut buf, &WireMsg::ClientHello).unwrap();
        send(&mut buf, &WireMsg::Request(ClientRequest::ListGroups)).unwrap();
        let mut r = buf.as_slice();
        assert!(matches!(recv(&mut r).unwrap(), Some(WireMsg::ClientHello)));
        assert!(matches!(
            recv(&mut r).unwrap(),
            Some(WireMsg::Request(ClientRequest::ListGroups))
        ));
        assert!(recv(&mut r).unwrap().is_none());
    }

    #[test]
    fn truncated_and_oversized_frames_fail() {
        let mut buf = Vec::new();
        send(&mut buf, &WireMsg::Challenge(Hash32([7; 32]))).unwrap();
        let mut short = &buf[..buf.len() - 1];
        assert!(recv(&mut short).is_err());
        let huge = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(read_frame(&mut &huge[..]).is_err());
    }

    #[test]
    fn hello_binds_both_ends() {
        let k = KeyPair::from_label("h");
        let c = Hash32([1; 32]);
        let sig = sign_hello(&k, &c, 2, 0);
        assert!(verify_hello(k.public_key(), &c, 2, 0, &sig));
        assert!(!verify_hello(k.public_key(), &c, 2, 1, &sig));
        assert!(!verify_hello(k.public_key(), &c, 3, 0, &sig));
        assert!(!verify_hello(k.public_key(), &Hash32([2; 32]), 2, 0, &sig));
    }
}
