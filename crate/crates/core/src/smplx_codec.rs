//! Lossless coding of pose-parameter sequences.
//!
//! Frames are serialized as little-endian `f32` (`theta ‖ beta ‖ psi`). With
//! temporal delta enabled, every frame after the first is XORed byte-wise
//! against its predecessor, which turns slowly varying parameters into runs
//! of zero bytes. One Huffman table covers the whole sequence.
//!
//! Section layout: `u32` frame count, three `u32` dims, `u8` delta flag, 256
//! code-length bytes, `u64` payload bit count, payload bytes.

use crate::avatar_model::SmplxPose;
use crate::entropy::{self, BitReader, BitStream, HuffmanTable, TABLE_BYTES};
use crate::error::{Error, Result};
use crate::wire::{self, Reader};

#[derive(Debug, Clone, PartialEq)]
pub struct SmplxStream {
    pub frame_count: u32,
    pub dims: (u32, u32, u32),
    pub delta: bool,
    /// `None` when the payload is empty.
    pub table: Option<HuffmanTable>,
    pub payload: BitStream,
}

fn frame_bytes(pose: &SmplxPose, out: &mut Vec<u8>) {
    for v in pose.theta.iter().chain(&pose.beta).chain(&pose.psi) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes with the temporal XOR delta enabled.
pub fn encode_smplx(frames: &[SmplxPose]) -> Result<SmplxStream> {
    encode_smplx_with(frames, true)
}

/// `delta = false` codes the raw parameter bytes with plain Huffman.
pub fn encode_smplx_with(frames: &[SmplxPose], delta: bool) -> Result<SmplxStream> {
    let (t, b, p) = crate::avatar_model::check_dims(frames)?;
    let stride = (t + b + p) * 4;
    let mut bytes = Vec::with_capacity(frames.len() * stride);
    for f in frames {
        frame_bytes(f, &mut bytes);
    }
    if delta {
        // Walk backwards so each frame is XORed with the untouched original
        // of its predecessor.
        for i in (stride..bytes.len()).rev() {
            bytes[i] ^= bytes[i - stride];
        }
    }
    let (table, payload) = if bytes.is_empty() {
        (None, BitStream::default())
    } else {
        let table = entropy::build_table(&entropy::histogram(&bytes))?;
        let payload = table.encode(&bytes)?;
        (Some(table), payload)
    };
    Ok(SmplxStream {
        frame_count: wire::to_u32(frames.len(), "frame count")?,
        dims: (
            wire::to_u32(t, "theta dim")?,
            wire::to_u32(b, "beta dim")?,
            wire::to_u32(p, "psi dim")?,
        ),
        delta,
        table,
        payload,
    })
}

pub fn decode_smplx(stream: &SmplxStream) -> Result<Vec<SmplxPose>> {
    let (t, b, p) = (
        stream.dims.0 as usize,
        stream.dims.1 as usize,
        stream.dims.2 as usize,
    );
    let stride = (t + b + p) * 4;
    let total = (stream.frame_count as usize)
        .checked_mul(stride)
        .ok_or_else(|| Error::decode("smplx: symbol count overflows"))?;
    let mut bytes = if total == 0 {
        if stream.payload.bit_len() != 0 {
            return Err(Error::decode("smplx: payload present for an empty sequence"));
        }
        Vec::new()
    } else {
        let table = stream
            .table
            .as_ref()
            .ok_or_else(|| Error::decode("smplx: nonempty sequence without a huffman table"))?;
        // Every symbol costs at least one bit.
        if stream.payload.bit_len() < total as u64 {
            return Err(Error::decode(format!(
                "smplx: {} payload bits cannot hold {total} symbols",
                stream.payload.bit_len()
            )));
        }
        let mut r = BitReader::new(&stream.payload);
        let mut out = Vec::with_capacity(total);
        for _ in 0..total {
            out.push(table.decode_symbol(&mut r)?);
        }
        if r.bits_read() != stream.payload.bit_len() {
            return Err(Error::decode(format!(
                "smplx: {} payload bits left after the last frame",
                stream.payload.bit_len() - r.bits_read()
            )));
        }
        out
    };
    if stream.delta {
        for i in stride..bytes.len() {
            bytes[i] ^= bytes[i - stride];
        }
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((0..stream.frame_count as usize)
        .map(|i| {
            let f = &floats[i * (t + b + p)..(i + 1) * (t + b + p)];
            SmplxPose {
                theta: f[..t].to_vec(),
                beta: f[t..t + b].to_vec(),
                psi: f[t + b..].to_vec(),
                frame_index: i as u32,
            }
        })
        .collect())
}

impl SmplxStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + TABLE_BYTES + 8 + self.payload.bytes().len());
        wire::put_u32(&mut out, self.frame_count);
        wire::put_u32(&mut out, self.dims.0);
        wire::put_u32(&mut out, self.dims.1);
        wire::put_u32(&mut out, self.dims.2);
        out.push(self.delta as u8);
        match &self.table {
            Some(t) => out.extend_from_slice(t.lengths()),
            None => out.extend_from_slice(&[0u8; TABLE_BYTES]),
        }
        wire::put_u64(&mut out, self.payload.bit_len());
        out.extend_from_slice(self.payload.bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "smplx section");
        let frame_count = r.u32()?;
        let dims = (r.u32()?, r.u32()?, r.u32()?);
        let delta = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::decode(format!("smplx: unknown delta flag {f}"))),
        };
        let lengths: [u8; TABLE_BYTES] = r.bytes(TABLE_BYTES)?.try_into().unwrap();
        let table = if lengths.iter().all(|&l| l == 0) {
            None
        } else {
            Some(HuffmanTable::from_lengths(&lengths)?)
        };
        let bit_len = r.u64()?;
        let n = usize::try_from(bit_len.div_ceil(8)).map_err(|_| Error::decode("smplx: payload too large"))?;
        let payload = BitStream::from_parts(r.bytes(n)?.to_vec(), bit_len)?;
        r.finish()?;
        Ok(SmplxStream {
            frame_count,
            dims,
            delta,
            table,
            payload,
        })
    }

    pub fn byte_len(&self) -> usize {
        17 + TABLE_BYTES + 8 + self.payload.bytes().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(frames: &[SmplxPose]) -> Vec<u32> {
        frames.iter().flat_map(|f| f.to_vector()).map(f32::to_bits).collect()
    }

    fn random_frames(n: usize, seed: u64) -> Vec<SmplxPose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| SmplxPose {
                theta: (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                beta: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                psi: (0..3).map(|_| rng.gen()).collect(),
                frame_index: i as u32,
            })
            .collect()
    }

    fn round_trip(frames: &[SmplxPose], delta: bool) -> Vec<SmplxPose> {
        let s = encode_smplx_with(frames, delta).unwrap();
        let s = SmplxStream::from_bytes(&s.to_bytes()).unwrap();
        decode_smplx(&s).unwrap()
    }

    #[test]
    fn random_frames_round_trip_both_modes() {
        let f = random_frames(50, 1);
        assert_eq!(bits(&round_trip(&f, true)), bits(&f));
        assert_eq!(bits(&round_trip(&f, false)), bits(&f));
    }

    #[test]
    fn special_floats_survive() {
        let f = vec![SmplxPose {
            theta: vec![f32::NAN, -0.0, f32::from_bits(0x7fc0_1234), f32::INFINITY, f32::MIN_POSITIVE / 4.0, 0.0],
            beta: vec![f32::from_bits(0xffff_ffff)],
            psi: vec![],
            frame_index: 0,
        }];
        assert_eq!(bits(&round_trip(&f, true)), bits(&f));
    }

    #[test]
    fn constant_sequence_compresses_far_below_raw() {
        let one = random_frames(1, 2).remove(0);
        let frames: Vec<SmplxPose> = (0..100).map(|i| SmplxPose { frame_index: i, ..one.clone() }).collect();
        let s = encode_smplx(&frames).unwrap();
        let raw = 100 * 19 * 4;
        // 99 frames of zero residual at one bit per byte dominate.
        assert!(s.payload.bytes().len() < raw / 6, "{} vs {raw}", s.payload.bytes().len());
        let h = entropy::histogram(&{
            let mut b = Vec::new();
            for f in &frames {
                frame_bytes(f, &mut b);
            }
            for i in (76..b.len()).rev() {
                b[i] ^= b[i - 76];
            }
            b
        });
        assert!(h[0] >= 99 * 76);
        let random = encode_smplx(&random_frames(100, 3)).unwrap();
        assert!(s.byte_len() < random.byte_len());
    }

    #[test]
    fn empty_sequence() {
        let s = encode_smplx(&[]).unwrap();
        let s = SmplxStream::from_bytes(&s.to_bytes()).unwrap();
        assert!(decode_smplx(&s).unwrap().is_empty());
    }

    #[test]
    fn truncation_and_mismatch_detected() {
        let s = encode_smplx(&random_frames(5, 4)).unwrap();
        let bytes = s.to_bytes();
        assert!(SmplxStream::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().is_decode());

        let mut lying = s.clone();
        lying.frame_count += 1;
        assert!(decode_smplx(&lying).unwrap_err().is_decode());
        let mut short = s.clone();
        short.frame_count -= 1;
        assert!(decode_smplx(&short).unwrap_err().is_decode());
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut f = random_frames(2, 5);
        f[1].psi.push(0.0);
        assert!(matches!(encode_smplx(&f), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_bit_patterns_round_trip(raw in proptest::collection::vec(any::<u32>(), 0..240), dim in 1usize..8) {
            let n = raw.len() / dim;
            let frames: Vec<SmplxPose> = (0..n)
                .map(|i| SmplxPose {
                    theta: raw[i * dim..(i + 1) * dim].iter().map(|&b| f32::from_bits(b)).collect(),
                    beta: vec![],
                    psi: vec![],
                    frame_index: i as u32,
                })
                .collect();
            prop_assert_eq!(bits(&round_trip(&frames, true)), bits(&frames));
        }
    }
}
