//! Fixed-architecture convolutional generator: pose maps in, Gaussian maps
//! out. Its weights form the structural layer of the bitstream.
//!
//! Each view (front, back) has its own weights and runs
//!
//! ```text
//! conv1 3→16 3×3 ─ lrelu ─┬─ conv2 16→32 3×3/2 ─ lrelu ─ up×2 ─ conv3 32→16 3×3 ─ lrelu ─ (+) ─ conv4 16→14 1×1
//!                         └──────────────────────────── skip ──────────────────────────────┘
//! ```
//!
//! with zero padding. The input height and width must be even. The three
//! position-offset outputs are multiplied by a fixed [`OFFSET_SCALE`], so
//! their kernel rows live on the same scale as the other channels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar_model::{
    GaussianMapPair, PoseMapPair, CH_LOG_SCALE, CH_OFFSET, CH_OPACITY, CH_ROTATION, CH_COLOR, GAUSSIAN_CHANNELS,
};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"HGWT";
const LEAK: f32 = 0.2;
/// Meters per unit of raw offset output.
pub const OFFSET_SCALE: f32 = 0.05;

pub const VIEWS: [&str; 2] = ["front", "back"];

/// `(name suffix, shape)` for one view, in architecture order.
const LAYERS: [(&str, &[usize]); 8] = [
    ("conv1.weight", &[16, 3, 3, 3]),
    ("conv1.bias", &[16]),
    ("conv2.weight", &[32, 16, 3, 3]),
    ("conv2.bias", &[32]),
    ("conv3.weight", &[16, 32, 3, 3]),
    ("conv3.bias", &[16]),
    ("conv4.weight", &[GAUSSIAN_CHANNELS, 16, 1, 1]),
    ("conv4.bias", &[GAUSSIAN_CHANNELS]),
];

/// Names and shapes of every tensor, front view first.
pub fn architecture() -> Vec<(String, Vec<usize>)> {
    VIEWS
        .iter()
        .flat_map(|v| LAYERS.iter().map(move |(n, s)| (format!("{v}.{n}"), s.to_vec())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    tensors: Vec<Tensor>,
}

/// Output-layer priors for seeded initialisation, so that an untrained
/// generator already emits plausible Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPrior {
    /// Log of the default Gaussian scale (meters).
    pub log_scale: f32,
    pub opacity_logit: f32,
    pub color: f32,
    /// Multiplier on the random output-layer kernel.
    pub head_gain: f32,
    /// Extra multiplier for the position-offset rows of the output kernel.
    pub offset_gain: f32,
}

impl Default for HeadPrior {
    fn default() -> Self {
        HeadPrior {
            log_scale: (0.02f32).ln(),
            opacity_logit: 2.0,
            color: 0.5,
            head_gain: 0.5,
            offset_gain: 1.0,
        }
    }
}

impl GeneratorWeights {
    /// Assembles weights, checking names, shapes and finiteness against the
    /// fixed architecture.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let arch = architecture();
        if tensors.len() != arch.len() {
            return Err(Error::decode(format!(
                "generator expects {} tensors, got {}",
                arch.len(),
                tensors.len()
            )));
        }
        for (t, (name, shape)) in tensors.iter().zip(&arch) {
            if &t.name != name {
                return Err(Error::decode(format!("tensor `{}` found where `{name}` expected", t.name)));
            }
            if &t.shape != shape {
                return Err(Error::decode(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::decode(format!("tensor `{name}` has {} values", t.data.len())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::decode(format!("tensor `{name}` holds non-finite values")));
            }
        }
        Ok(GeneratorWeights { tensors })
    }

    pub fn zeros() -> Self {
        GeneratorWeights {
            tensors: architecture()
                .into_iter()
                .map(|(name, shape)| Tensor {
                    data: vec![0.0; shape.iter().product()],
                    name,
                    shape,
                })
                .collect(),
        }
    }

    /// He-uniform kernels, zero hidden biases, and an output layer centred
    /// on `prior`.
    pub fn seeded(seed: u64, prior: &HeadPrior) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros();
        for t in &mut w.tensors {
            if t.is_bias() {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let mut bound = (6.0 / fan_in as f32).sqrt();
            let head = t.name.ends_with("conv4.weight");
            if head {
                bound *= prior.head_gain;
            }
            let per_out = fan_in;
            for (i, v) in t.data.iter_mut().enumerate() {
                let mut x = rng.gen_range(-bound..bound);
                if head && i / per_out < 3 {
                    x *= prior.offset_gain;
                }
                *v = x;
            }
        }
        for view in VIEWS {
            let b = &mut w.tensor_mut(&format!("{view}.conv4.bias")).unwrap().data;
            b[CH_LOG_SCALE..CH_LOG_SCALE + 3].fill(prior.log_scale);
            b[CH_ROTATION] = 1.0;
            b[CH_OPACITY] = prior.opacity_logit;
            b[CH_COLOR..CH_COLOR + 3].fill(prior.color);
        }
        w
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn data(&self, view: &str, suffix: &str) -> &[f32] {
        // Names are fixed by construction.
        &self.tensor(&format!("{view}.{suffix}")).unwrap().data
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + self.num_params() * 4 + self.tensors.len() * 40);
        out.extend_from_slice(MAGIC);
        wire::put_u32(&mut out, wire::to_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            write_tensor_header(&mut out, &t.name, &t.shape)?;
            wire::put_f32s(&mut out, &t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weight file");
        r.magic(MAGIC)?;
        let count = r.u32()? as usize;
        let arch = architecture();
        if count != arch.len() {
            return Err(Error::decode(format!(
                "weight file holds {count} tensors, generator expects {}",
                arch.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_shape) in &arch {
            let (name, shape) = read_tensor_header(&mut r)?;
            if &name != want_name || &shape != want_shape {
                return Err(Error::decode(format!(
                    "tensor `{name}` has header shape {shape:?}; expected `{want_name}` {want_shape:?}"
                )));
            }
            let n = checked_numel(&name, &shape)?;
            let data = r
                .f32s(n)
                .map_err(|e| Error::decode(format!("tensor `{name}`: {e}")))?;
            tensors.push(Tensor { name, shape, data });
        }
        r.finish()?;
        Self::from_tensors(tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_weights(weights: &GeneratorWeights, path: impl AsRef<Path>) -> Result<()> {
    weights.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<GeneratorWeights> {
    GeneratorWeights::load(path)
}

pub(crate) fn write_tensor_header(out: &mut Vec<u8>, name: &str, shape: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name `{name}` too long")))?;
    wire::put_u16(out, len);
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(shape.len()).map_err(|_| Error::invalid(format!("tensor `{name}` rank too large")))?;
    out.push(rank);
    for &d in shape {
        wire::put_u32(out, wire::to_u32(d, "tensor dimension")?);
    }
    Ok(())
}

pub(crate) fn read_tensor_header(r: &mut Reader<'_>) -> Result<(String, Vec<usize>)> {
    let len = r.u16()? as usize;
    let name = String::from_utf8(r.bytes(len)?.to_vec())
        .map_err(|_| Error::decode("tensor name is not valid utf-8"))?;
    let rank = r
        .u8()
        .map_err(|e| Error::decode(format!("tensor `{name}`: {e}")))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(
            r.u32()
                .map_err(|e| Error::decode(format!("tensor `{name}`: {e}")))? as usize,
        );
    }
    Ok((name, shape))
}

pub(crate) fn checked_numel(name: &str, shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::decode(format!("tensor `{name}` shape {shape:?} is too large")))
}

#[inline]
fn lrelu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        LEAK * x
    }
}

/// Zero-padded 2-D convolution with an odd square kernel
/// (`weight` is `out × in × k × k`).
pub(crate) fn conv2d(input: &Image, weight: &[f32], bias: &[f32], k: usize, stride: usize) -> Image {
    let (h, w, cin) = input.shape();
    let cout = bias.len();
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    // Re-lay the kernel as [ky][kx][in][out] so the inner loop is contiguous.
    let mut kernel = vec![0.0f32; k * k * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    kernel[((ky * k + kx) * cin + i) * cout + o] = weight[((o * cin + i) * k + ky) * k + kx];
                }
            }
        }
    }
    let mut out = Image::zeros(oh, ow, cout);
    let src = input.data();
    let dst = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut dst[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            acc.copy_from_slice(bias);
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &src[(iy as usize * w + ix as usize) * cin..][..cin];
                    let taps = &kernel[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (i, &x) in px.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (a, &wt) in acc.iter_mut().zip(&taps[i * cout..(i + 1) * cout]) {
                            *a += wt * x;
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample2(input: &Image) -> Image {
    let (h, w, c) = input.shape();
    let mut out = Image::zeros(h * 2, w * 2, c);
    for y in 0..h * 2 {
        for x in 0..w * 2 {
            out.pixel_mut(y, x).copy_from_slice(input.pixel(y / 2, x / 2));
        }
    }
    out
}

pub(crate) fn activate(mut img: Image) -> Image {
    img.data_mut().iter_mut().for_each(|v| *v = lrelu(*v));
    img
}

/// Masked pixels mapped from `[0,1]` to `[-1,1]`; the rest stay zero.
fn centred(input: &Image, mask: &Mask) -> Image {
    let mut out = Image::zeros(input.height(), input.width(), input.channels());
    for (k, &on) in mask.bits().iter().enumerate() {
        if on {
            let c = input.channels();
            for (o, v) in out.data_mut()[k * c..(k + 1) * c].iter_mut().zip(&input.data()[k * c..(k + 1) * c]) {
                *o = 2.0 * v - 1.0;
            }
        }
    }
    out
}

fn forward_view(weights: &GeneratorWeights, view: &str, input: &Image, mask: &Mask) -> Image {
    let f1 = activate(conv2d(
        &centred(input, mask),
        weights.data(view, "conv1.weight"),
        weights.data(view, "conv1.bias"),
        3,
        1,
    ));
    let f2 = activate(conv2d(
        &f1,
        weights.data(view, "conv2.weight"),
        weights.data(view, "conv2.bias"),
        3,
        2,
    ));
    let mut f3 = activate(conv2d(
        &upsample2(&f2),
        weights.data(view, "conv3.weight"),
        weights.data(view, "conv3.bias"),
        3,
        1,
    ));
    for (a, b) in f3.data_mut().iter_mut().zip(f1.data()) {
        *a += b;
    }
    let mut out = conv2d(
        &f3,
        weights.data(view, "conv4.weight"),
        weights.data(view, "conv4.bias"),
        1,
        1,
    );
    for px in out.data_mut().chunks_exact_mut(GAUSSIAN_CHANNELS) {
        px[CH_OFFSET..CH_OFFSET + 3].iter_mut().for_each(|v| *v *= OFFSET_SCALE);
    }
    out
}

/// Runs the generator on both views. Deterministic and free of hidden state.
pub fn forward(weights: &GeneratorWeights, maps: &PoseMapPair) -> Result<GaussianMapPair> {
    let (h, w) = maps.resolution();
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("generator input {h}×{w} must have even, nonzero sides")));
    }
    for (img, _) in maps.views() {
        if img.shape() != (h, w, 3) {
            return Err(Error::invalid("pose map views must be H×W×3 and agree in size"));
        }
    }
    Ok(GaussianMapPair {
        front: forward_view(weights, "front", &maps.front, &maps.mask_front),
        back: forward_view(weights, "back", &maps.back, &maps.mask_back),
        mask_front: maps.mask_front.clone(),
        mask_back: maps.mask_back.clone(),
    })
}
