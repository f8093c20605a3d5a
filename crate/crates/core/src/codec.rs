//! Canonical byte encoding.
//!
//! Every value that is hashed, signed or sent over the wire goes through this
//! encoding. The rules are fixed so that independent implementations produce
//! identical bytes:
//!
//! * fields are written in declaration order;
//! * unsigned integers are 8-byte big-endian, whatever their Rust width;
//! * `f64` values are their IEEE-754 bit pattern, big-endian;
//! * byte strings, UTF-8 strings, lists and maps carry a 4-byte big-endian
//!   count prefix;
//! * enum discriminants (including `bool` and `Option`) are a single byte.
//!
//! Decoding is strict: unknown tags, non-canonical booleans, unsorted or
//! duplicate map keys and trailing bytes are all rejected, which makes the
//! encoding injective per type.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input: needed {needed} more bytes")]
    UnexpectedEof { needed: usize },
    #[error("invalid tag {tag} for {ty}")]
    InvalidTag { ty: &'static str, tag: u8 },
    #[error("integer {0} out of range for target type")]
    IntegerOverflow(u64),
    #[error("invalid utf-8 in string")]
    InvalidUtf8,
    #[error("map keys are not strictly increasing")]
    NonCanonicalMap,
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
    }

    pub fn tag(&mut self, t: u8) {
        self.buf.push(t);
    }

    pub fn len_prefix(&mut self, n: usize) {
        let n = u32::try_from(n).expect("canonical encoding: length exceeds u32");
        self.buf.extend_from_slice(&n.to_be_bytes());
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) {
        self.len_prefix(b.len());
        self.buf.extend_from_slice(b);
    }

    /// Fixed-width bytes, no prefix. Only for types whose width is part of
    /// the type (digests).
    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn put<T: Encode + ?Sized>(&mut self, v: &T) {
        v.encode_to(self);
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    input: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input }
    }

    pub fn remaining(&self) -> usize {
        self.input.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.input.len() < n {
            return Err(CodecError::UnexpectedEof {
                needed: n - self.input.len(),
            });
        }
        let (head, tail) = self.input.split_at(n);
        self.input = tail;
        Ok(head)
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn tag(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn len_prefix(&mut self) -> Result<usize, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.len_prefix()?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn raw<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, CodecError> {
        T::decode_from(self)
    }

    /// Length prefix for a list whose elements are at least `min_elem` bytes.
    /// Rejects counts that cannot possibly fit in the remaining input before
    /// anything is allocated.
    fn count(&mut self, min_elem: usize) -> Result<usize, CodecError> {
        let n = self.len_prefix()?;
        if n.saturating_mul(min_elem.max(1)) > self.remaining() {
            return Err(CodecError::UnexpectedEof {
                needed: n * min_elem.max(1) - self.remaining(),
            });
        }
        Ok(n)
    }
}

pub trait Encode {
    fn encode_to(&self, enc: &mut Encoder);

    fn to_canonical(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_to(&mut enc);
        enc.finish()
    }
}

pub trait Decode: Sized {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    /// Decodes a complete value; trailing bytes are an error.
    fn from_canonical(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let v = Self::decode_from(&mut dec)?;
        if dec.remaining() != 0 {
            return Err(CodecError::TrailingBytes(dec.remaining()));
        }
        Ok(v)
    }
}

impl Encode for u64 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(*self);
    }
}

impl Decode for u64 {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u64()
    }
}

impl Encode for u32 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(u64::from(*self));
    }
}

impl Decode for u32 {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let v = dec.u64()?;
        u32::try_from(v).map_err(|_| CodecError::IntegerOverflow(v))
    }
}

impl Encode for f64 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.f64(*self);
    }
}

impl Decode for f64 {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.f64()
    }
}

impl Encode for bool {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.tag(u8::from(*self));
    }
}

impl Decode for bool {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::InvalidTag { ty: "bool", tag }),
        }
    }
}

impl Encode for str {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bytes(self.as_bytes());
    }
}

impl Encode for String {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bytes(self.as_bytes());
    }
}

impl Decode for String {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        String::from_utf8(dec.bytes()?).map_err(|_| CodecError::InvalidUtf8)
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            None => enc.tag(0),
            Some(v) => {
                enc.tag(1);
                v.encode_to(enc);
            }
        }
    }
}

impl<T: Decode> Decode for Option<T> {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(dec)?)),
            tag => Err(CodecError::InvalidTag { ty: "option", tag }),
        }
    }
}

impl<T: Encode> Encode for [T] {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.len_prefix(self.len());
        for item in self {
            item.encode_to(enc);
        }
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode_to(&self, enc: &mut Encoder) {
        self.as_slice().encode_to(enc);
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let n = dec.count(1)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(T::decode_from(dec)?);
        }
        Ok(out)
    }
}

impl<K: Encode, V: Encode> Encode for BTreeMap<K, V> {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.len_prefix(self.len());
        for (k, v) in self {
            k.encode_to(enc);
            v.encode_to(enc);
        }
    }
}

impl<K: Decode + Ord, V: Decode> Decode for BTreeMap<K, V> {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let n = dec.count(2)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = K::decode_from(dec)?;
            let v = V::decode_from(dec)?;
            if let Some((last, _)) = out.last_key_value() {
                if *last >= k {
                    return Err(CodecError::NonCanonicalMap);
                }
            }
            out.insert(k, v);
        }
        Ok(out)
    }
}

impl<K: Encode> Encode for BTreeSet<K> {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.len_prefix(self.len());
        for k in self {
            k.encode_to(enc);
        }
    }
}

impl<K: Decode + Ord> Decode for BTreeSet<K> {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let n = dec.count(1)?;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            let k = K::decode_from(dec)?;
            if let Some(last) = out.last() {
                if *last >= k {
                    return Err(CodecError::NonCanonicalMap);
                }
            }
            out.insert(k);
        }
        Ok(out)
    }
}

impl<T: Encode + ?Sized> Encode for &T {
    fn encode_to(&self, enc: &mut Encoder) {
        (**self).encode_to(enc);
    }
}

impl<A: Encode, B: Encode> Encode for (A, B) {
    fn encode_to(&self, enc: &mut Encoder) {
        self.0.encode_to(enc);
        self.1.encode_to(enc);
    }
}

impl<A: Decode, B: Decode> Decode for (A, B) {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok((A::decode_from(dec)?, B::decode_from(dec)?))
    }
}

/// Implements [`Encode`] and [`Decode`] for a struct by writing its fields in
/// the listed order. Every field type must itself be canonical.
#[macro_export]
macro_rules! canonical_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Encode for $ty {
            fn encode_to(&self, enc: &mut $crate::codec::Encoder) {
                $( enc.put(&self.$field); )*
            }
        }

        impl $crate::codec::Decode for $ty {
            fn decode_from(
                dec: &mut $crate::codec::Decoder<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                Ok(Self { $( $field: dec.get()?, )* })
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_eight_byte_big_endian() {
        assert_eq!(7u64.to_canonical(), vec![0, 0, 0, 0, 0, 0, 0, 7]);
        assert_eq!(7u32.to_canonical(), vec![0, 0, 0, 0, 0, 0, 0, 7]);
    }

    #[test]
    fn floats_are_big_endian_bits() {
        assert_eq!(1.0f64.to_canonical(), 0x3FF0_0000_0000_0000u64.to_be_bytes());
        let neg_zero = f64::from_canonical(&(-0.0f64).to_canonical()).unwrap();
        assert!(neg_zero.is_sign_negative());
    }

    #[test]
    fn strings_and_lists_are_length_prefixed() {
        assert_eq!("ab".to_string().to_canonical(), vec![0, 0, 0, 2, b'a', b'b']);
        let v: Vec<u64> = vec![1];
        assert_eq!(v.to_canonical(), vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn strict_decoding() {
        assert!(matches!(
            bool::from_canonical(&[2]),
            Err(CodecError::InvalidTag { .. })
        ));
        assert!(matches!(
            u64::from_canonical(&[0; 9]),
            Err(CodecError::TrailingBytes(1))
        ));
        assert!(matches!(
            u32::from_canonical(&u64::MAX.to_canonical()),
            Err(CodecError::IntegerOverflow(_))
        ));
        // Map with keys out of order.
        let mut enc = Encoder::new();
        enc.len_prefix(2);
        enc.u64(2);
        enc.u64(0);
        enc.u64(1);
        enc.u64(0);
        assert_eq!(
            BTreeMap::<u64, u64>::from_canonical(&enc.finish()),
            Err(CodecError::NonCanonicalMap)
        );
    }

    #[test]
    fn huge_length_prefix_does_not_allocate() {
        let bytes = [0xFF, 0xFF, 0xFF, 0xFF];
        assert!(matches!(
            Vec::<u64>::from_canonical(&bytes),
            Err(CodecError::UnexpectedEof { .. })
        ));
    }
}
