// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Canonical binary encoding.
//!
//! Every digest, signature payload and on-disk record in this crate is
//! computed over bytes produced by [`Encoder`]. The rules are fixed:
//! integers are big-endian, variable-length fields (strings, byte strings,
//! sequences) carry a `u32` big-endian length prefix, and struct fields are
//! written in declaration order. The format is therefore independent of
//! platform and of any serialization library.

use sha2::{Digest as _, Sha256};
use std::fmt;
use thiserror::Error;

/// Errors raised while decoding canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input while reading {0}")]
    UnexpectedEof(&'static str),
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("invalid tag {tag} for {what}")]
    InvalidTag { what: &'static str, tag: u8 },
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    /// Digest over the concatenation of `parts`, each length-prefixed so
    /// that different splits never collide.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update((part.len() as u32).to_be_bytes());
            hasher.update(part);
        }
        Digest(hasher.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Types with a canonical byte form.
pub trait Encode {
    fn encode(&self, enc: &mut Encoder);

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.into_bytes()
    }

    fn canonical_len(&self) -> usize {
        let mut enc = Encoder::counting();
        self.encode(&mut enc);
        enc.len()
    }

    fn canonical_digest(&self) -> Digest {
        Digest::of(&self.to_canonical_bytes())
    }
}

/// Types that can be read back from their canonical byte form.
pub trait Decode: Sized {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let value = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(value)
    }
}

/// Append-only canonical writer. A counting encoder only tracks length.
#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
    counted: usize,
    counting: bool,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counting() -> Self {
        Encoder {
            counting: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        if self.counting {
            self.counted
        } else {
            self.buf.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        if self.counting {
            self.counted += bytes.len();
        } else {
            self.buf.extend_from_slice(bytes);
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.raw(&[v]);
    }

    pub fn u16(&mut self, v: u16) {
        self.raw(&v.to_be_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.raw(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.raw(&v.to_be_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.raw(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn digest(&mut self, d: &Digest) {
        self.raw(&d.0);
    }

    pub fn seq<T, F>(&mut self, items: &[T], mut f: F)
    where
        F: FnMut(&mut Encoder, &T),
    {
        self.u32(items.len() as u32);
        for item in items {
            f(self, item);
        }
    }
}

/// Cursor over canonical bytes.
#[derive(Debug)]
pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Decoder { input, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }

    pub fn raw(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::UnexpectedEof(what));
        }
        let out = &self.input[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.raw(1, "u8")?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.raw(2, "u16")?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.raw(4, "u32")?;
        Ok(u32::from_be_bytes(b.try_into().expect("length checked")))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.raw(8, "u64")?;
        Ok(u64::from_be_bytes(b.try_into().expect("length checked")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.raw(len, "byte string")
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let b = self.bytes()?;
        std::str::from_utf8(b)
            .map(str::to_owned)
            .map_err(|_| DecodeError::InvalidUtf8)
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        let b = self.raw(32, "digest")?;
        Ok(Digest(b.try_into().expect("length checked")))
    }

    pub fn seq<T, F>(&mut self, mut f: F) -> Result<Vec<T>, DecodeError>
    where
        F: FnMut(&mut Decoder<'a>) -> Result<T, DecodeError>,
    {
        let len = self.u32()? as usize;
        // Each element takes at least one byte; refuse absurd prefixes early.
        if len > self.remaining() {
            return Err(DecodeError::UnexpectedEof("sequence"));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(f(self)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut enc = Encoder::new();
        enc.u16(0x0102);
        enc.u32(0x03040506);
        enc.u64(7);
        assert_eq!(
            enc.into_bytes(),
            vec![1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7]
        );
    }

    #[test]
    fn strings_are_length_prefixed() {
        let mut enc = Encoder::new();
        enc.str("ab");
        assert_eq!(enc.into_bytes(), vec![0, 0, 0, 2, b'a', b'b']);
    }

    #[test]
    fn counting_encoder_matches_real_length() {
        let mut real = Encoder::new();
        let mut count = Encoder::counting();
        for enc in [&mut real, &mut count] {
            enc.str("registry/dev-1");
            enc.u64(42);
            enc.bytes(&[0u8; 100]);
        }
        assert_eq!(real.len(), count.len());
        assert!(count.into_bytes().is_empty());
    }

    #[test]
    fn truncated_input_is_reported() {
        let mut dec = Decoder::new(&[0, 0, 0, 9, 1]);
        assert_eq!(dec.bytes(), Err(DecodeError::UnexpectedEof("byte string")));
    }

    #[test]
    fn part_digest_separates_boundaries() {
        assert_ne!(
            Digest::of_parts(&[b"ab", b"c"]),
            Digest::of_parts(&[b"a", b"bc"])
        );
    }
}
