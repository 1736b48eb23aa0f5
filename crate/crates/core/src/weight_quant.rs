//! Post-training quantization of generator weights at a fixed bit width.
//!
//! Every kernel tensor gets its own symmetric uniform quantizer
//! `code = clamp(round(w/Δ), −2^(Q−1), 2^(Q−1)−1)`. The step Δ is found by a
//! coarse-to-fine scan of the weight-space MSE: the first pass covers
//! `[0.1, 2.0] × max|w| / (2^(Q−1)−1)`, each later pass rescans a bracket of
//! one previous spacing around each of the best few candidates, and the
//! survivors are polished by alternating code assignment with a
//! least-squares refit of Δ, kept only where it lowers the error.
//! Bias vectors stay at full precision.
//!
//! Section layout (`HGQW`): `u8` Q, `u32` tensor count, then per tensor the
//! name/rank/dims header of the weight file followed by either `f32` Δ and
//! MSB-first packed two's-complement codes (rank > 1), or raw `f32` values
//! (rank 1).

use rayon::prelude::*;

use crate::entropy::{BitReader, BitStream, BitWriter};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorWeights, Tensor};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"HGQW";
/// Brackets carried from one refinement pass to the next.
const BEAM: usize = 8;
const LLOYD_ITERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bit_width: u8,
    pub refinement_levels: usize,
    pub candidates: usize,
}

impl QuantConfig {
    pub fn new(bit_width: u8) -> Result<Self> {
        let cfg = QuantConfig {
            bit_width,
            refinement_levels: 3,
            candidates: 64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bit_width) {
            return Err(Error::invalid(format!("bit width {} outside [2, 8]", self.bit_width)));
        }
        if self.refinement_levels == 0 || self.candidates < 2 {
            return Err(Error::invalid("quantizer search needs ≥1 level and ≥2 candidates"));
        }
        Ok(())
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bit_width)
    }
}

pub fn code_range(bit_width: u8) -> (i32, i32) {
    let half = 1i32 << (bit_width - 1);
    (-half, half - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bit_width: u8,
    pub step: f32,
    pub codes: Vec<i32>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.codes.iter().map(|&c| c as f32 * self.step).collect(),
        }
    }
}

#[inline]
fn code_for(w: f64, step: f64, lo: i32, hi: i32) -> i32 {
    (w / step).round().clamp(lo as f64, hi as f64) as i32
}

/// Codes for `values` at a given step.
pub fn quantize_with_step(values: &[f32], step: f32, bit_width: u8) -> Vec<i32> {
    let (lo, hi) = code_range(bit_width);
    values.iter().map(|&w| code_for(w as f64, step as f64, lo, hi)).collect()
}

/// Reconstruction MSE of `values` quantized at `step`.
pub fn quantization_mse(values: &[f32], step: f32, bit_width: u8) -> f64 {
    let (lo, hi) = code_range(bit_width);
    let s = step as f64;
    let sum: f64 = values
        .iter()
        .map(|&w| {
            let w = w as f64;
            let e = w - code_for(w, s, lo, hi) as f64 * s;
            e * e
        })
        .sum();
    sum / values.len() as f64
}

/// Greedy coarse-to-fine step search. Returns `(step, mse)`.
pub fn search_step(values: &[f32], cfg: &QuantConfig) -> Result<(f32, f64)> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot quantize non-finite weights"));
    }
    let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if max_abs == 0.0 {
        return Ok((1.0, 0.0));
    }
    let q = cfg.bit_width;
    let base = max_abs / (code_range(q).1 as f64);
    let eval = |step: f64| -> Option<(f32, f64)> {
        let s = step as f32;
        (s > 0.0 && s.is_finite()).then(|| (s, quantization_mse(values, s, q)))
    };

    // Refine the few best brackets of each pass rather than a single one;
    // the MSE curve is jagged at fine bit widths.
    let mut brackets = vec![(0.1 * base, 2.0 * base)];
    let mut best: Option<(f32, f64)> = None;
    for _ in 0..cfg.refinement_levels {
        let mut scored: Vec<(f32, f64, f64)> = Vec::new();
        for &(lo, hi) in &brackets {
            let spacing = (hi - lo) / (cfg.candidates - 1) as f64;
            for k in 0..cfg.candidates {
                if let Some((s, m)) = eval(lo + spacing * k as f64) {
                    scored.push((s, m, spacing));
                    if best.is_none_or(|b| m < b.1) {
                        best = Some((s, m));
                    }
                }
            }
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
        scored.dedup_by(|a, b| a.0 == b.0);
        brackets = scored
            .iter()
            .take(BEAM)
            .map(|&(s, _, spacing)| ((s as f64 - spacing).max(spacing * 1e-3), s as f64 + spacing))
            .collect();
    }
    let (mut step, mut mse) = best.unwrap();

    // Alternate code assignment and least-squares refit of Δ from each
    // surviving incumbent; keep whatever lowers the error.
    let starts: Vec<f64> = brackets.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).chain([step as f64]).collect();
    for start in starts {
        let mut s = start as f32;
        for _ in 0..LLOYD_ITERS {
            let Some(next) = ls_step(values, s, q).and_then(eval) else { break };
            if next.1 < mse {
                (step, mse) = next;
            }
            if next.0 == s {
                break;
            }
            s = next.0;
        }
    }

    // Exact guard: MSE is piecewise quadratic in Δ, so its minimum over the
    // search range sits at a piece's least-squares step or a piece boundary.
    // Tiny tensors at wide bit widths have basins narrower than any scan.
    if let Some(exact) = piecewise_min(values, 0.1 * base, 2.0 * base, q) {
        for s in [exact, exact.next_down(), exact.next_up()] {
            if let Some(c) = eval(s as f64) {
                if c.1 < mse {
                    (step, mse) = c;
                }
            }
        }
    }
    Ok((step, mse))
}

/// Sweeps the rounding breakpoints `|w|/(k+½)` in `[lo, hi]` and returns the
/// step minimizing `Σ(|w| − Δm)²` over all pieces.
fn piecewise_min(values: &[f32], lo: f64, hi: f64, q: u8) -> Option<f32> {
    let (min_code, max_code) = code_range(q);
    let mut a2 = 0.0f64;
    let mut b = 0.0f64;
    let mut c = 0.0f64;
    // (breakpoint, |w|, code below the breakpoint)
    let mut events: Vec<(f64, f64, f64)> = Vec::new();
    for &w in values {
        let w = w as f64;
        let a = w.abs();
        let cap = if w < 0.0 { -min_code } else { max_code } as f64;
        let m = (a / lo).round().min(cap);
        a2 += a * a;
        b += a * m;
        c += m * m;
        let mut k = m;
        while k >= 1.0 {
            let at = a / (k - 0.5);
            if at > hi {
                break;
            }
            if at > lo {
                events.push((at, a, k));
            }
            k -= 1.0;
        }
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut best: Option<(f64, f64)> = None;
    let mut consider = |d0: f64, d1: f64, b: f64, c: f64| {
        let d = if c > 0.0 { (b / c).clamp(d0, d1) } else { d0 };
        let err = a2 - 2.0 * d * b + d * d * c;
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((d, err));
        }
    };
    let mut start = lo;
    for &(at, a, k) in &events {
        consider(start, at, b, c);
        // Past the breakpoint the code drops from k to k − 1.
        b -= a;
        c -= 2.0 * k - 1.0;
        start = at;
    }
    consider(start, hi, b, c);
    best.map(|(d, _)| d as f32).filter(|d| *d > 0.0 && d.is_finite())
}

/// Δ minimizing the error for the codes that `step` assigns.
fn ls_step(values: &[f32], step: f32, q: u8) -> Option<f64> {
    let codes = quantize_with_step(values, step, q);
    let (num, den) = values.iter().zip(&codes).fold((0.0f64, 0.0f64), |(n, d), (&w, &c)| {
        (n + w as f64 * c as f64, d + (c as f64) * (c as f64))
    });
    (den > 0.0).then(|| num / den)
}

pub fn quantize_tensor(tensor: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    let (step, _) = search_step(&tensor.data, cfg).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::invalid(format!("tensor `{}`: {m}", tensor.name)),
        e => e,
    })?;
    Ok(QuantizedTensor {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        bit_width: cfg.bit_width,
        step,
        codes: quantize_with_step(&tensor.data, step, cfg.bit_width),
    })
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Tensor {
    q.dequantize()
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantEntry {
    Quantized(QuantizedTensor),
    /// Kept at full precision (biases).
    Raw(Tensor),
}

impl QuantEntry {
    pub fn name(&self) -> &str {
        match self {
            QuantEntry::Quantized(q) => &q.name,
            QuantEntry::Raw(t) => &t.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub bit_width: u8,
    pub entries: Vec<QuantEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSize {
    pub name: String,
    pub numel: usize,
    pub bits_per_value: u32,
    /// `numel × bits_per_value`, plus 32 for Δ on quantized tensors, plus the
    /// name/shape header.
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub tensors: Vec<TensorSize>,
}

impl SizeReport {
    pub fn total_bits(&self) -> u64 {
        self.tensors.iter().map(|t| t.bits).sum()
    }
}

fn header_bits(name: &str, rank: usize) -> u64 {
    8 * (2 + name.len() + 1 + 4 * rank) as u64
}

/// Quantizes every kernel independently; biases pass through.
pub fn quantize_network(weights: &GeneratorWeights, cfg: &QuantConfig) -> Result<(QuantizedNetwork, SizeReport)> {
    cfg.validate()?;
    let entries: Vec<QuantEntry> = weights
        .tensors()
        .par_iter()
        .map(|t| {
            if t.is_bias() {
                Ok(QuantEntry::Raw(t.clone()))
            } else {
                quantize_tensor(t, cfg).map(QuantEntry::Quantized)
            }
        })
        .collect::<Result<_>>()?;
    let tensors = entries
        .iter()
        .map(|e| match e {
            QuantEntry::Quantized(q) => TensorSize {
                name: q.name.clone(),
                numel: q.codes.len(),
                bits_per_value: cfg.bit_width as u32,
                bits: q.codes.len() as u64 * cfg.bit_width as u64 + 32 + header_bits(&q.name, q.shape.len()),
            },
            QuantEntry::Raw(t) => TensorSize {
                name: t.name.clone(),
                numel: t.numel(),
                bits_per_value: 32,
                bits: t.numel() as u64 * 32 + header_bits(&t.name, t.shape.len()),
            },
        })
        .collect();
    Ok((
        QuantizedNetwork {
            bit_width: cfg.bit_width,
            entries,
        },
        SizeReport { tensors },
    ))
}

impl QuantizedNetwork {
    pub fn dequantize(&self) -> Result<GeneratorWeights> {
        GeneratorWeights::from_tensors(
            self.entries
                .iter()
                .map(|e| match e {
                    QuantEntry::Quantized(q) => q.dequantize(),
                    QuantEntry::Raw(t) => t.clone(),
                })
                .collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.bit_width);
        wire::put_u32(&mut out, wire::to_u32(self.entries.len(), "tensor count")?);
        let (lo, hi) = code_range(self.bit_width);
        for e in &self.entries {
            match e {
                QuantEntry::Quantized(q) => {
                    if q.shape.len() < 2 {
                        return Err(Error::invalid(format!("quantized tensor `{}` must have rank ≥ 2", q.name)));
                    }
                    generator::write_tensor_header(&mut out, &q.name, &q.shape)?;
                    wire::put_f32(&mut out, q.step);
                    let mut w = BitWriter::new();
                    let mask = (1u64 << self.bit_width) - 1;
                    for &c in &q.codes {
                        if c < lo || c > hi {
                            return Err(Error::invalid(format!("code {c} of `{}` outside [{lo}, {hi}]", q.name)));
                        }
                        w.write_bits(c as i64 as u64 & mask, self.bit_width);
                    }
                    out.extend_from_slice(w.finish().bytes());
                }
                QuantEntry::Raw(t) => {
                    if t.shape.len() != 1 {
                        return Err(Error::invalid(format!("raw tensor `{}` must have rank 1", t.name)));
                    }
                    generator::write_tensor_header(&mut out, &t.name, &t.shape)?;
                    wire::put_f32s(&mut out, &t.data);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "quantized weights");
        r.magic(MAGIC)?;
        let bit_width = r.u8()?;
        if !(2..=8).contains(&bit_width) {
            return Err(Error::decode(format!("quantized weights: bit width {bit_width}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let (name, shape) = generator::read_tensor_header(&mut r)?;
            let n = generator::checked_numel(&name, &shape)?;
            let ctx = |e: Error| Error::decode(format!("tensor `{name}`: {e}"));
            if shape.len() == 1 {
                let data = r.f32s(n).map_err(ctx)?;
                entries.push(QuantEntry::Raw(Tensor { name, shape, data }));
            } else {
                let step = r.f32().map_err(ctx)?;
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::decode(format!("tensor `{name}` has step {step}")));
                }
                let bits = n as u64 * bit_width as u64;
                let packed = r.bytes(bits.div_ceil(8) as usize).map_err(ctx)?;
                let stream = BitStream::from_parts(packed.to_vec(), bits)?;
                let mut br = BitReader::new(&stream);
                let sign = 1u64 << (bit_width - 1);
                let codes = (0..n)
                    .map(|_| {
                        let raw = br.read_bits(bit_width)?;
                        Ok(if raw & sign != 0 {
                            raw as i64 - (1i64 << bit_width)
                        } else {
                            raw as i64
                        } as i32)
                    })
                    .collect::<Result<Vec<i32>>>()?;
                entries.push(QuantEntry::Quantized(QuantizedTensor {
                    name,
                    shape,
                    bit_width,
                    step,
                    codes,
                }));
            }
        }
        r.finish()?;
        Ok(QuantizedNetwork { bit_width, entries })
    }
}
