//! LSB-first bit packing of fixed-width codes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `len` codes of `bits` bits each, packed little-endian LSB-first into a
/// contiguous byte stream (the last byte is zero-padded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: u8,
    len: usize,
    data: Vec<u8>,
}

pub fn packed_len(bits: u8, len: usize) -> usize {
    (bits as usize * len).div_ceil(8)
}

impl PackedCodes {
    pub fn from_unsigned(bits: u8, codes: impl ExactSizeIterator<Item = u32>) -> Self {
        assert!((1..=32).contains(&bits));
        let len = codes.len();
        let mut data = vec![0u8; packed_len(bits, len)];
        for (i, c) in codes.enumerate() {
            let start = i * bits as usize;
            for (pos, b) in (start..).zip(0..bits) {
                if (c >> b) & 1 == 1 {
                    data[pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        PackedCodes { bits, len, data }
    }

    /// Two's complement, truncated to `bits`.
    pub fn from_signed(bits: u8, codes: &[i32]) -> Self {
        let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        PackedCodes::from_unsigned(bits, codes.iter().map(|&c| (c as u32) & mask))
    }

    pub fn from_bytes(bits: u8, len: usize, data: Vec<u8>) -> Result<Self> {
        if !(1..=32).contains(&bits) {
            return Err(Error::Format(format!("unsupported code width {bits}")));
        }
        if data.len() != packed_len(bits, len) {
            return Err(Error::Format(format!(
                "{} code bytes for {len} codes of {bits} bits",
                data.len()
            )));
        }
        Ok(PackedCodes { bits, len, data })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get_unsigned(&self, i: usize) -> u32 {
        debug_assert!(i < self.len);
        let start = i * self.bits as usize;
        (start..).zip(0..self.bits).fold(0u32, |v, (pos, b)| {
            v | u32::from((self.data[pos / 8] >> (pos % 8)) & 1) << b
        })
    }

    pub fn get_signed(&self, i: usize) -> i32 {
        let raw = self.get_unsigned(i);
        if self.bits == 32 {
            return raw as i32;
        }
        let shift = 32 - u32::from(self.bits);
        ((raw << shift) as i32) >> shift
    }

    pub fn unsigned(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.get_unsigned(i)).collect()
    }

    pub fn signed(&self) -> Vec<i32> {
        (0..self.len).map(|i| self.get_signed(i)).collect()
    }
}
