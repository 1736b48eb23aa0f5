//! Lossy predictive coding of pose-map sequences.
//!
//! Samples are quantized to integer levels `round(v / q)`; everything after
//! that is lossless, so the only error is the quantizer's (at most `q/2`).
//! Each frame codes its six planes (front RGB, back RGB) in one of three
//! modes:
//!
//! * intra: predict from the left neighbour (first column from the sample
//!   above, the first sample from zero);
//! * inter: predict from the same sample of the previous reconstruction;
//! * skip: inter prediction with an all-zero residual, nothing else sent.
//!
//! Residuals are zig-zag mapped to unsigned values and written as bytes
//! (values ≥ 255 escape to `255, hi, lo`), then Huffman coded per plane.
//! The encoder picks whichever of intra and inter costs fewer payload bits;
//! frame 0 is always intra.
//!
//! Section layout: `u32` frame count, `u16` H, `u16` W, `f32` q, then per
//! frame a `u8` mode and, unless skipped, per plane 256 code-length bytes, a
//! `u64` bit count and the payload.

use crate::avatar_model::PoseMapPair;
use crate::entropy::{self, BitReader, BitStream, HuffmanTable, TABLE_BYTES};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::wire::{self, Reader};

pub const PLANES: usize = 6;
const ESCAPE: u8 = 255;
/// Largest zig-zag residual the escape code can carry.
const MAX_ZIGZAG: u32 = u16::MAX as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    Intra = 0,
    Inter = 1,
    Skip = 2,
}

impl FrameMode {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameMode::Intra),
            1 => Ok(FrameMode::Inter),
            2 => Ok(FrameMode::Skip),
            b => Err(Error::decode(format!("pose-map stream: unknown frame mode {b}"))),
        }
    }

    /// True for modes that predict from the previous frame.
    pub fn is_inter(self) -> bool {
        matches!(self, FrameMode::Inter | FrameMode::Skip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModePolicy {
    /// Cheapest of intra/inter per frame.
    #[default]
    Auto,
    AllIntra,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedPlane {
    pub table: HuffmanTable,
    pub payload: BitStream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedFrame {
    pub mode: FrameMode,
    /// Empty for skipped frames.
    pub planes: Vec<CodedPlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseMapStream {
    pub height: u16,
    pub width: u16,
    pub q: f32,
    pub frames: Vec<CodedFrame>,
}

/// Quantizer step validity: `q ∈ (0, 1]` and small enough levels for the
/// escape code.
pub fn check_step(q: f32) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) || !q.is_finite() {
        return Err(Error::invalid(format!("quantization step {q} outside (0, 1]")));
    }
    if max_level(q) * 2 > MAX_ZIGZAG {
        return Err(Error::invalid(format!("quantization step {q} is too fine (minimum 1/32767)")));
    }
    Ok(())
}

fn max_level(q: f32) -> u32 {
    (1.0f64 / q as f64).round() as u32
}

#[inline]
pub fn quantize(v: f32, q: f32) -> i32 {
    (v as f64 / q as f64).round().clamp(0.0, max_level(q) as f64) as i32
}

#[inline]
pub fn dequantize(level: i32, q: f32) -> f32 {
    ((level as f64 * q as f64) as f32).clamp(0.0, 1.0)
}

#[inline]
fn zigzag(r: i32) -> u32 {
    ((r << 1) ^ (r >> 31)) as u32
}

#[inline]
fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

fn push_residual(out: &mut Vec<u8>, r: i32) {
    let z = zigzag(r);
    if z < ESCAPE as u32 {
        out.push(z as u8);
    } else {
        out.extend_from_slice(&[ESCAPE, (z >> 8) as u8, z as u8]);
    }
}

/// Levels of one frame: six planes of `h·w` samples.
type Levels = Vec<Vec<i32>>;

fn frame_levels(frame: &PoseMapPair, q: f32) -> Levels {
    let mut planes = Vec::with_capacity(PLANES);
    for img in [&frame.front, &frame.back] {
        for c in 0..3 {
            planes.push(img.plane(c).into_iter().map(|v| quantize(v, q)).collect());
        }
    }
    planes
}

fn intra_prediction(plane: &[i32], w: usize, i: usize) -> i32 {
    let (row, col) = (i / w, i % w);
    if col > 0 {
        plane[i - 1]
    } else if row > 0 {
        plane[i - w]
    } else {
        0
    }
}

fn residual_symbols(plane: &[i32], prev: Option<&[i32]>, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(plane.len());
    for (i, &v) in plane.iter().enumerate() {
        let pred = match prev {
            Some(p) => p[i],
            None => intra_prediction(plane, w, i),
        };
        push_residual(&mut out, v - pred);
    }
    out
}

fn code_plane(symbols: &[u8]) -> Result<CodedPlane> {
    let table = entropy::build_table(&entropy::histogram(symbols))?;
    let payload = table.encode(symbols)?;
    Ok(CodedPlane { table, payload })
}

fn payload_bits(planes: &[CodedPlane]) -> u64 {
    planes.iter().map(|p| p.payload.bit_len()).sum()
}

pub fn encode_posemaps(frames: &[PoseMapPair], q: f32) -> Result<PoseMapStream> {
    encode_posemaps_with(frames, q, ModePolicy::Auto)
}

pub fn encode_posemaps_with(frames: &[PoseMapPair], q: f32, policy: ModePolicy) -> Result<PoseMapStream> {
    check_step(q)?;
    let (h, w) = frames.first().map_or((0, 0), PoseMapPair::resolution);
    if !frames.is_empty() && (h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize) {
        return Err(Error::invalid(format!("pose-map resolution {h}×{w} is not codable")));
    }
    if let Some(i) = frames.iter().position(|f| f.resolution() != (h, w)) {
        return Err(Error::invalid(format!(
            "frame {i} is {:?}, frame 0 is {h}×{w}",
            frames[i].resolution()
        )));
    }
    let mut coded = Vec::with_capacity(frames.len());
    let mut prev: Option<Levels> = None;
    for frame in frames {
        let levels = frame_levels(frame, q);
        let intra = levels
            .iter()
            .map(|p| code_plane(&residual_symbols(p, None, w)))
            .collect::<Result<Vec<_>>>()?;
        let choice = match (&prev, policy) {
            (Some(prev), ModePolicy::Auto) => {
                if levels == *prev {
                    CodedFrame {
                        mode: FrameMode::Skip,
                        planes: Vec::new(),
                    }
                } else {
                    let inter = levels
                        .iter()
                        .zip(prev)
                        .map(|(p, pp)| code_plane(&residual_symbols(p, Some(pp), w)))
                        .collect::<Result<Vec<_>>>()?;
                    if payload_bits(&inter) < payload_bits(&intra) {
                        CodedFrame {
                            mode: FrameMode::Inter,
                            planes: inter,
                        }
                    } else {
                        CodedFrame {
                            mode: FrameMode::Intra,
                            planes: intra,
                        }
                    }
                }
            }
            _ => CodedFrame {
                mode: FrameMode::Intra,
                planes: intra,
            },
        };
        coded.push(choice);
        prev = Some(levels);
    }
    Ok(PoseMapStream {
        height: h as u16,
        width: w as u16,
        q,
        frames: coded,
    })
}

fn decode_plane(plane: &CodedPlane, prev: Option<&[i32]>, h: usize, w: usize) -> Result<Vec<i32>> {
    let n = h * w;
    let mut out = Vec::with_capacity(n);
    let mut r = BitReader::new(&plane.payload);
    for i in 0..n {
        let s = plane.table.decode_symbol(&mut r)?;
        let z = if s == ESCAPE {
            let hi = plane.table.decode_symbol(&mut r)? as u32;
            let lo = plane.table.decode_symbol(&mut r)? as u32;
            (hi << 8) | lo
        } else {
            s as u32
        };
        let pred = match prev {
            Some(p) => p[i],
            None => intra_prediction(&out, w, i),
        };
        out.push(pred + unzigzag(z));
    }
    if r.bits_read() != plane.payload.bit_len() {
        return Err(Error::decode("pose-map plane has trailing payload bits"));
    }
    Ok(out)
}

fn levels_to_frame(levels: &Levels, h: usize, w: usize, q: f32) -> PoseMapPair {
    let mut views = Vec::with_capacity(2);
    for v in 0..2 {
        let mut img = Image::zeros(h, w, 3);
        let mut mask = Mask::new(h, w);
        for i in 0..h * w {
            let px = &mut img.data_mut()[i * 3..i * 3 + 3];
            let mut covered = false;
            for c in 0..3 {
                let l = levels[v * 3 + c][i];
                covered |= l != 0;
                px[c] = dequantize(l, q);
            }
            if covered {
                mask.set(i / w, i % w, true);
            }
        }
        views.push((img, mask));
    }
    let (back, mask_back) = views.pop().unwrap();
    let (front, mask_front) = views.pop().unwrap();
    PoseMapPair {
        front,
        back,
        mask_front,
        mask_back,
    }
}

/// Reconstructs every frame. Masks are recovered as the samples with any
/// nonzero level.
pub fn decode_posemaps(stream: &PoseMapStream) -> Result<Vec<PoseMapPair>> {
    check_step(stream.q).map_err(|e| Error::decode(format!("pose-map stream: {e}")))?;
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut out = Vec::with_capacity(stream.frames.len());
    let mut prev: Option<Levels> = None;
    for (k, frame) in stream.frames.iter().enumerate() {
        let levels: Levels = match frame.mode {
            FrameMode::Skip => prev
                .clone()
                .ok_or_else(|| Error::decode(format!("frame {k} skips without a reference")))?,
            mode => {
                if frame.planes.len() != PLANES {
                    return Err(Error::decode(format!("frame {k} carries {} planes", frame.planes.len())));
                }
                if mode == FrameMode::Inter && prev.is_none() {
                    return Err(Error::decode(format!("frame {k} is inter without a reference")));
                }
                frame
                    .planes
                    .iter()
                    .enumerate()
                    .map(|(p, plane)| {
                        let reference = match mode {
                            FrameMode::Inter => prev.as_ref().map(|l| l[p].as_slice()),
                            _ => None,
                        };
                        decode_plane(plane, reference, h, w)
                    })
                    .collect::<Result<_>>()?
            }
        };
        out.push(levels_to_frame(&levels, h, w, stream.q));
        prev = Some(levels);
    }
    Ok(out)
}

impl PoseMapStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        wire::put_u32(&mut out, self.frames.len() as u32);
        wire::put_u16(&mut out, self.height);
        wire::put_u16(&mut out, self.width);
        wire::put_f32(&mut out, self.q);
        for f in &self.frames {
            out.push(f.mode as u8);
            for p in &f.planes {
                out.extend_from_slice(p.table.lengths());
                wire::put_u64(&mut out, p.payload.bit_len());
                out.extend_from_slice(p.payload.bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "pose-map section");
        let n = r.u32()? as usize;
        let height = r.u16()?;
        let width = r.u16()?;
        let q = r.f32()?;
        let mut frames = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            let mode = FrameMode::from_byte(r.u8()?)?;
            let mut planes = Vec::new();
            if mode != FrameMode::Skip {
                for _ in 0..PLANES {
                    let lengths: [u8; TABLE_BYTES] = r.bytes(TABLE_BYTES)?.try_into().unwrap();
                    let table = HuffmanTable::from_lengths(&lengths)?;
                    let bit_len = r.u64()?;
                    let nbytes = usize::try_from(bit_len.div_ceil(8))
                        .map_err(|_| Error::decode("pose-map plane too large"))?;
                    let payload = BitStream::from_parts(r.bytes(nbytes)?.to_vec(), bit_len)?;
                    planes.push(CodedPlane { table, payload });
                }
            }
            frames.push(CodedFrame { mode, planes });
        }
        r.finish()?;
        Ok(PoseMapStream {
            height,
            width,
            q,
            frames,
        })
    }

    pub fn byte_len(&self) -> usize {
        12 + self
            .frames
            .iter()
            .map(|f| 1 + f.planes.iter().map(|p| TABLE_BYTES + 8 + p.payload.bytes().len()).sum::<usize>())
            .sum::<usize>()
    }

    pub fn modes(&self) -> Vec<FrameMode> {
        self.frames.iter().map(|f| f.mode).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random frame with a random mask; unmasked samples are zero.
    fn random_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> PoseMapPair {
        let mut f = PoseMapPair::empty(h, w);
        for (img, mask) in [(&mut f.front, &mut f.mask_front), (&mut f.back, &mut f.mask_back)] {
            for i in 0..h * w {
                if rng.gen_bool(0.7) {
                    mask.set(i / w, i % w, true);
                    for c in 0..3 {
                        img.data_mut()[i * 3 + c] = rng.gen_range(0.01..=1.0);
                    }
                }
            }
        }
        f
    }

    fn smooth_frame(h: usize, w: usize, phase: f32) -> PoseMapPair {
        let mut f = PoseMapPair::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                let x = c as f32 / w as f32;
                let y = r as f32 / h as f32;
                let v = [
                    0.2 + 0.6 * x,
                    0.5 + 0.3 * (3.0 * y + phase).sin(),
                    0.4 + 0.2 * (x * y + phase).cos(),
                ];
                f.front.pixel_mut(r, c).copy_from_slice(&v);
                f.back.pixel_mut(r, c).copy_from_slice(&[v[1], v[2], v[0]]);
                f.mask_front.set(r, c, true);
                f.mask_back.set(r, c, true);
            }
        }
        f
    }

    fn coded(frames: &[PoseMapPair], q: f32, policy: ModePolicy) -> PoseMapStream {
        let s = encode_posemaps_with(frames, q, policy).unwrap();
        PoseMapStream::from_bytes(&s.to_bytes()).unwrap()
    }

    #[test]
    fn zigzag_is_a_bijection_on_small_values() {
        for r in -600..600 {
            assert_eq!(unzigzag(zigzag(r)), r);
        }
        assert_eq!([zigzag(0), zigzag(-1), zigzag(1), zigzag(-2)], [0, 1, 2, 3]);
    }

    #[test]
    fn static_sequence_skips_after_first_frame() {
        let f = smooth_frame(16, 16, 0.3);
        let frames = vec![f; 30];
        let s = coded(&frames, 1.0 / 255.0, ModePolicy::Auto);
        assert_eq!(s.frames[0].mode, FrameMode::Intra);
        assert!(s.frames[1..].iter().all(|f| f.mode.is_inter() && f.planes.is_empty()));
        let intra = coded(&frames, 1.0 / 255.0, ModePolicy::AllIntra);
        assert!(s.byte_len() * 5 <= intra.byte_len());
        assert_eq!(decode_posemaps(&s).unwrap(), decode_posemaps(&intra).unwrap());
    }

    #[test]
    fn error_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<_> = (0..4).map(|_| random_frame(8, 10, &mut rng)).collect();
        for q in [1.0 / 255.0, 4.0 / 255.0, 0.1, 0.3, 1.0] {
            let dec = decode_posemaps(&coded(&frames, q, ModePolicy::Auto)).unwrap();
            for (a, b) in frames.iter().zip(&dec) {
                for (x, y) in a.front.data().iter().chain(a.back.data()).zip(b.front.data().iter().chain(b.back.data())) {
                    assert!((x - y).abs() <= q / 2.0 + 1e-6, "q={q}: {x} vs {y}");
                    assert_eq!(quantize(*x, q), quantize(*y, q));
                }
            }
        }
    }

    #[test]
    fn abrupt_change_switches_to_intra() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let smooth: Vec<_> = (0..4).map(|k| smooth_frame(16, 16, k as f32 * 0.01)).collect();
        let mut frames = smooth.clone();
        // An independent random frame followed by a return to smooth content.
        frames.push(random_frame(16, 16, &mut rng));
        frames.push(smooth_frame(16, 16, 0.5));
        let s = coded(&frames, 1.0 / 255.0, ModePolicy::Auto);
        let modes = s.modes();
        assert_eq!(modes[0], FrameMode::Intra);
        assert!(modes[1..4].iter().all(|m| m.is_inter()), "{modes:?}");
        // Leaving the random frame, inter prediction is worse than intra.
        assert_eq!(modes[5], FrameMode::Intra, "{modes:?}");
    }

    #[test]
    fn empty_sequence() {
        let s = coded(&[], 0.5, ModePolicy::Auto);
        assert!(decode_posemaps(&s).unwrap().is_empty());
    }

    #[test]
    fn unknown_mode_and_truncation_rejected() {
        let s = encode_posemaps(&[smooth_frame(4, 4, 0.0)], 0.1).unwrap();
        let mut bytes = s.to_bytes();
        assert!(PoseMapStream::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().is_decode());
        bytes[12] = 7;
        assert!(PoseMapStream::from_bytes(&bytes).unwrap_err().is_decode());
    }

    #[test]
    fn invalid_arguments() {
        let f = smooth_frame(4, 4, 0.0);
        assert!(encode_posemaps(&[f.clone()], 0.0).is_err());
        assert!(encode_posemaps(&[f.clone()], 1.5).is_err());
        assert!(encode_posemaps(&[f, smooth_frame(4, 6, 0.0)], 0.1).is_err());
    }

    #[test]
    fn fine_steps_use_escape_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<_> = (0..2).map(|_| random_frame(6, 6, &mut rng)).collect();
        let q = 1.0 / 2000.0;
        let dec = decode_posemaps(&coded(&frames, q, ModePolicy::Auto)).unwrap();
        for (a, b) in frames[1].front.data().iter().zip(dec[1].front.data()) {
            assert!((a - b).abs() <= q / 2.0 + 1e-6);
        }
    }

    #[test]
    fn rate_falls_as_step_grows() {
        let frames: Vec<_> = (0..6).map(|k| smooth_frame(16, 16, k as f32 * 0.05)).collect();
        let sizes: Vec<usize> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|k| encode_posemaps(&frames, k / 255.0).unwrap().byte_len())
            .collect();
        assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn closed_loop_reencode_is_stable(seed in any::<u64>(), step in 1u32..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<_> = (0..3).map(|_| random_frame(6, 4, &mut rng)).collect();
            let q = step as f32 / 255.0;
            let once = decode_posemaps(&coded(&frames, q, ModePolicy::Auto)).unwrap();
            let twice = decode_posemaps(&coded(&once, q, ModePolicy::Auto)).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
