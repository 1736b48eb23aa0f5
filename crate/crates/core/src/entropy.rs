//! Canonical Huffman coding over a byte alphabet, with MSB-first bit I/O.
//!
//! A table is fully described by its 256 code lengths; canonical codes are
//! assigned in `(length, symbol)` order, so the decoder rebuilds the exact
//! encoder table from the lengths alone.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Longest code length the coder accepts. Reaching it requires a histogram
/// whose total count exceeds the 66th Fibonacci number.
pub const MAX_CODE_LEN: u8 = 64;

/// Size of a serialized table: one length byte per symbol.
pub const TABLE_BYTES: usize = 256;

/// Packed bits plus the exact number of meaningful bits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitStream {
    pub fn from_parts(bytes: Vec<u8>, bit_len: u64) -> Result<Self> {
        if bytes.len() as u64 != bit_len.div_ceil(8) {
            return Err(Error::decode(format!(
                "bitstream claims {bit_len} bits but carries {} bytes",
                bytes.len()
            )));
        }
        Ok(BitStream { bytes, bit_len })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bit(&mut self, bit: bool) {
        let shift = 7 - (self.bit_len % 8) as u8;
        if shift == 7 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << shift;
        }
        self.bit_len += 1;
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, n: u8) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn finish(self) -> BitStream {
        BitStream {
            bytes: self.bytes,
            bit_len: self.bit_len,
        }
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    cursor: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(stream: &'a BitStream) -> Self {
        BitReader {
            bytes: &stream.bytes,
            bit_len: stream.bit_len,
            cursor: 0,
        }
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        if self.cursor >= self.bit_len {
            return Err(Error::decode(format!(
                "bitstream exhausted after {} bits",
                self.bit_len
            )));
        }
        let byte = self.bytes[(self.cursor / 8) as usize];
        let bit = (byte >> (7 - (self.cursor % 8))) & 1 == 1;
        self.cursor += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, n: u8) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    pub fn bits_read(&self) -> u64 {
        self.cursor
    }
}

/// Canonical prefix code over bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: [u8; 256],
    codes: [u64; 256],
    // Decoder state, indexed by code length.
    first_code: Vec<u64>,
    first_index: Vec<usize>,
    count: Vec<usize>,
    sorted: Vec<u8>,
}

pub fn histogram(bytes: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &b in bytes {
        h[b as usize] += 1;
    }
    h
}

/// Builds the optimal prefix code for `histogram`.
///
/// Merges always take the two lightest nodes; equal weights resolve by node
/// age (leaves ordered by symbol, then internal nodes in creation order).
pub fn build_table(histogram: &[u64; 256]) -> Result<HuffmanTable> {
    let present: Vec<usize> = (0..256).filter(|&s| histogram[s] > 0).collect();
    if present.is_empty() {
        return Err(Error::invalid("cannot build a huffman table from an all-zero histogram"));
    }
    let mut lengths = [0u8; 256];
    if present.len() == 1 {
        lengths[present[0]] = 1;
        return HuffmanTable::from_lengths(&lengths);
    }

    // parent[i] for nodes 0..256 (leaves) and 256.. (internal).
    let mut parent: Vec<usize> = vec![usize::MAX; 256];
    let mut heap: BinaryHeap<Reverse<(u128, usize)>> = present
        .iter()
        .map(|&s| Reverse((histogram[s] as u128, s)))
        .collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((wa + wb, id)));
    }
    // Internal nodes are created after their children, so a reverse sweep
    // resolves every depth from its parent.
    let mut depth = vec![0u32; parent.len()];
    for id in (0..parent.len()).rev() {
        if parent[id] != usize::MAX {
            depth[id] = depth[parent[id]] + 1;
        }
    }
    for &s in &present {
        if depth[s] > MAX_CODE_LEN as u32 {
            return Err(Error::invalid(format!(
                "huffman code for symbol {s} would need {} bits (limit {MAX_CODE_LEN})",
                depth[s]
            )));
        }
        lengths[s] = depth[s] as u8;
    }
    HuffmanTable::from_lengths(&lengths)
}

impl HuffmanTable {
    /// Rebuilds the canonical table from serialized code lengths.
    pub fn from_lengths(lengths: &[u8; 256]) -> Result<Self> {
        let max_len = *lengths.iter().max().unwrap();
        if max_len == 0 {
            return Err(Error::decode("huffman table has no symbols"));
        }
        if max_len > MAX_CODE_LEN {
            return Err(Error::decode(format!(
                "huffman code length {max_len} exceeds {MAX_CODE_LEN}"
            )));
        }
        // Kraft inequality in fixed point: sum of 2^(64 - len) <= 2^64.
        let kraft: u128 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u128 << (64 - l as u32))
            .sum();
        if kraft > 1u128 << 64 {
            return Err(Error::decode("huffman code lengths violate the Kraft inequality"));
        }

        let max = max_len as usize;
        let mut count = vec![0usize; max + 1];
        for &l in lengths.iter().filter(|&&l| l > 0) {
            count[l as usize] += 1;
        }
        let mut sorted: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));

        let mut first_code = vec![0u64; max + 1];
        let mut first_index = vec![0usize; max + 1];
        let mut code: u128 = 0;
        let mut index = 0usize;
        for len in 1..=max {
            code = (code + count[len - 1] as u128) << 1;
            first_code[len] = code as u64;
            first_index[len] = index;
            index += count[len];
        }
        let mut codes = [0u64; 256];
        for len in 1..=max {
            for k in 0..count[len] {
                let sym = sorted[first_index[len] + k];
                codes[sym as usize] = first_code[len] + k as u64;
            }
        }
        Ok(HuffmanTable {
            lengths: *lengths,
            codes,
            first_code,
            first_index,
            count,
            sorted,
        })
    }

    pub fn lengths(&self) -> &[u8; 256] {
        &self.lengths
    }

    /// `(code, length)` for a symbol, or `None` if absent.
    pub fn code(&self, symbol: u8) -> Option<(u64, u8)> {
        let len = self.lengths[symbol as usize];
        (len > 0).then(|| (self.codes[symbol as usize], len))
    }

    /// Number of bits `encode` will emit for a source with this histogram.
    pub fn cost_bits(&self, histogram: &[u64; 256]) -> Result<u64> {
        let mut bits = 0u64;
        for (s, &n) in histogram.iter().enumerate() {
            if n > 0 {
                if self.lengths[s] == 0 {
                    return Err(Error::invalid(format!("symbol {s} is absent from the huffman table")));
                }
                bits += n * self.lengths[s] as u64;
            }
        }
        Ok(bits)
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<BitStream> {
        let mut w = BitWriter::new();
        for &b in bytes {
            let (code, len) = self
                .code(b)
                .ok_or_else(|| Error::invalid(format!("symbol {b} is absent from the huffman table")))?;
            w.write_bits(code, len);
        }
        Ok(w.finish())
    }

    pub fn decode(&self, bits: &BitStream, count: usize) -> Result<Vec<u8>> {
        let mut r = BitReader::new(bits);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(self.decode_symbol(&mut r)?);
        }
        Ok(out)
    }

    pub fn decode_symbol(&self, r: &mut BitReader<'_>) -> Result<u8> {
        let mut code = 0u64;
        for len in 1..self.count.len() {
            code = (code << 1) | r.read_bit()? as u64;
            let offset = code.wrapping_sub(self.first_code[len]);
            if code >= self.first_code[len] && offset < self.count[len] as u64 {
                return Ok(self.sorted[self.first_index[len] + offset as usize]);
            }
        }
        Err(Error::decode("bit pattern matches no huffman code"))
    }
}

pub fn encode(table: &HuffmanTable, bytes: &[u8]) -> Result<BitStream> {
    table.encode(bytes)
}

pub fn decode(table: &HuffmanTable, bits: &BitStream, count: usize) -> Result<Vec<u8>> {
    table.decode(bits, count)
}

/// Empirical byte entropy in bits per symbol.
pub fn empirical_entropy(histogram: &[u64; 256]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}
