//! Training objective and a small derivative-free fitting loop.
//!
//! ```text
//! L = w_l1·L_l1 + w_mask·L_mask + w_lpips·L_lpips + w_offset·L_offset
//! L_lpips = Σ_k mean(W_k · ‖F_k(a) − F_k(b)‖²)
//! W_k = 1 + α · M · min(1, iter / total_iter)
//! ```
//!
//! Features come from a fixed, seeded three-layer convolution stack. The
//! fitting loop uses simultaneous-perturbation stochastic approximation
//! (SPSA): two loss evaluations per step estimate a descent direction over
//! all selected parameters at once. Paired runs that share a seed share
//! every perturbation, so they differ only through the objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar_model::{GaussianMapPair, PoseMapPair, SkinnedTemplate, SmplxPose, CH_OFFSET};
use crate::error::{Error, Result};
use crate::generator::{activate, conv2d, GeneratorWeights};
use crate::image::{Image, Mask};
use crate::pipeline;
use crate::renderer::{lbs_deform_gaussians, rasterize, Camera};
use crate::synthetic::{SyntheticScene, ToyTarget};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_mask: f64,
    pub w_lpips: f64,
    pub w_offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_l1: 1.0,
            w_mask: 1.0,
            w_lpips: 0.1,
            w_offset: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_l1, self.w_mask, self.w_lpips, self.w_offset];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

pub fn total_loss(l1: f64, mask: f64, lpips: f64, offset: f64, w: &LossWeights) -> f64 {
    w.w_l1 * l1 + w.w_mask * mask + w.w_lpips * lpips + w.w_offset * offset
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacialWeightConfig {
    pub alpha: f64,
    pub mask: Mask,
    pub iter: u64,
    pub total_iter: u64,
}

impl FacialWeightConfig {
    /// `min(1, iter / total_iter)`.
    pub fn ramp(&self) -> Result<f64> {
        if self.total_iter == 0 {
            return Err(Error::invalid("total_iter must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha = {} must be nonnegative", self.alpha)));
        }
        Ok((self.iter as f64 / self.total_iter as f64).min(1.0))
    }
}

/// Per-pixel facial weight at the mask's resolution.
pub fn facial_weight_map(cfg: &FacialWeightConfig) -> Result<Image> {
    let gain = cfg.alpha * cfg.ramp()?;
    let data = cfg
        .mask
        .bits()
        .iter()
        .map(|&m| (1.0 + if m { gain } else { 0.0 }) as f32)
        .collect();
    Image::from_vec(cfg.mask.height(), cfg.mask.width(), 1, data)
}

fn check_layers(a: &[Image], b: &[Image]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} feature layers vs {}", a.len(), b.len())));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!(
                "feature layer {k} shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Facially weighted feature distance, summed over layers. The mask is
/// resampled to each layer by nearest neighbour.
pub fn weighted_perceptual(a: &[Image], b: &[Image], cfg: &FacialWeightConfig) -> Result<f64> {
    check_layers(a, b)?;
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (h, w, c) = x.shape();
        let layer_cfg = FacialWeightConfig {
            mask: cfg.mask.resample_nearest(h, w),
            ..cfg.clone()
        };
        let weight = facial_weight_map(&layer_cfg)?;
        let mut sum = 0.0;
        for (site, wk) in weight.data().iter().enumerate() {
            let d: f64 = x.data()[site * c..(site + 1) * c]
                .iter()
                .zip(&y.data()[site * c..(site + 1) * c])
                .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
                .sum();
            sum += *wk as f64 * d;
        }
        total += sum / (h * w * c).max(1) as f64;
    }
    Ok(total)
}

/// The perceptual loss split as `base + α·ramp·face`, where `face` is the
/// same distance restricted to the mask.
pub fn perceptual_parts(a: &[Image], b: &[Image], mask: &Mask) -> Result<(f64, f64)> {
    check_layers(a, b)?;
    let (mut base, mut face) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (h, w, c) = x.shape();
        let m = mask.resample_nearest(h, w);
        let n = (h * w * c).max(1) as f64;
        for (site, &inside) in m.bits().iter().enumerate() {
            let d: f64 = x.data()[site * c..(site + 1) * c]
                .iter()
                .zip(&y.data()[site * c..(site + 1) * c])
                .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
                .sum();
            base += d / n;
            if inside {
                face += d / n;
            }
        }
    }
    Ok((base, face))
}

/// Fixed random convolution stack standing in for a pretrained perceptual
/// network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<(Vec<f32>, Vec<f32>, usize)>,
}

/// `(in, out, stride)` of each 3×3 layer.
const FEATURE_LAYERS: [(usize, usize, usize); 3] = [(3, 8, 1), (8, 16, 2), (16, 16, 2)];

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = FEATURE_LAYERS
            .iter()
            .map(|&(cin, cout, stride)| {
                let bound = (6.0 / (cin * 9) as f32).sqrt();
                let w = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                let b = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
                (w, b, stride)
            })
            .collect();
        FeatureExtractor { layers }
    }

    /// One activation map per layer.
    pub fn extract(&self, image: &Image) -> Result<Vec<Image>> {
        if image.channels() != 3 {
            return Err(Error::invalid("feature extractor expects RGB images"));
        }
        let mut x = image.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            x = activate(conv2d(&x, w, b, 3, *stride));
            out.push(x.clone());
        }
        Ok(out)
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / n)
}

/// L1 over the pixels of `mask`, averaged over those pixels and channels.
pub fn masked_l1(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::invalid("mask size differs from the images"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (site, &m) in mask.bits().iter().enumerate() {
        if m {
            for k in 0..c {
                sum += (a.data()[site * c + k] as f64 - b.data()[site * c + k] as f64).abs();
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::invalid("mask is empty"));
    }
    Ok(sum / n as f64)
}

/// Mean squared position offset over the Gaussian-carrying pixels.
pub fn offset_loss(maps: &GaussianMapPair) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (img, mask) in maps.views() {
        for (px, &m) in img.data().chunks_exact(img.channels()).zip(mask.bits()) {
            if m {
                sum += px[CH_OFFSET..CH_OFFSET + 3].iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One supervised view: the generator input, the pose and what the render
/// should look like.
#[derive(Debug, Clone)]
pub struct FitFrame {
    pub maps: PoseMapPair,
    pub pose: SmplxPose,
    pub target: Image,
    pub target_alpha: Image,
    pub face_mask: Mask,
}

#[derive(Debug, Clone)]
pub struct FitScene {
    pub template: SkinnedTemplate,
    pub camera: Camera,
    pub frames: Vec<FitFrame>,
}

impl From<ToyTarget> for FitScene {
    fn from(t: ToyTarget) -> Self {
        FitScene {
            template: t.template,
            camera: t.camera,
            frames: vec![FitFrame {
                maps: t.maps,
                pose: t.pose,
                target: t.target,
                target_alpha: t.target_alpha,
                face_mask: t.face_mask,
            }],
        }
    }
}

impl FitScene {
    /// Supervision rendered by the scene's own generator, so a fit from a
    /// different initialization has a reachable target.
    pub fn from_synthetic(scene: &SyntheticScene) -> Result<Self> {
        let frames = (0..scene.poses.len())
            .map(|i| {
                let r = scene.render(i)?;
                Ok(FitFrame {
                    maps: scene.pose_maps[i].clone(),
                    pose: scene.poses[i].clone(),
                    target: r.color,
                    target_alpha: r.alpha,
                    face_mask: scene.face_mask(&scene.poses[i])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FitScene {
            template: scene.template.clone(),
            camera: scene.camera.clone(),
            frames,
        })
    }
}

/// Loss terms averaged over the frames of a scene.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub mask: f64,
    pub perceptual_base: f64,
    pub perceptual_face: f64,
    pub offset: f64,
    pub face_l1: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights, alpha: f64, ramp: f64) -> f64 {
        let lpips = self.perceptual_base + alpha * ramp * self.perceptual_face;
        total_loss(self.l1, self.mask, lpips, self.offset, w)
    }
}

pub fn evaluate(scene: &FitScene, weights: &GeneratorWeights, features: &FeatureExtractor) -> Result<LossTerms> {
    let mut t = LossTerms::default();
    for f in &scene.frames {
        let c = pipeline::canonical_gaussians(weights, &f.maps, &scene.template)?;
        let posed = lbs_deform_gaussians(&c.gaussians, &scene.template, &f.pose, &c.attachment)?;
        let img = rasterize(&posed, &scene.camera)?;
        let (base, face) = perceptual_parts(&features.extract(&img.color)?, &features.extract(&f.target)?, &f.face_mask)?;
        t.l1 += l1(&img.color, &f.target)?;
        t.mask += l1(&img.alpha, &f.target_alpha)?;
        t.perceptual_base += base;
        t.perceptual_face += face;
        t.offset += offset_loss(&c.maps);
        t.face_l1 += masked_l1(&img.color, &f.target, &f.face_mask)?;
    }
    let n = scene.frames.len().max(1) as f64;
    for v in [&mut t.l1, &mut t.mask, &mut t.perceptual_base, &mut t.perceptual_face, &mut t.offset, &mut t.face_l1] {
        *v /= n;
    }
    Ok(t)
}

/// Which generator tensors the fit may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamSet {
    /// The 1×1 output layers of both views.
    #[default]
    Head,
    All,
}

impl ParamSet {
    fn includes(self, name: &str) -> bool {
        match self {
            ParamSet::Head => name.contains("conv4."),
            ParamSet::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Iterations over which the facial weight ramps up; defaults to
    /// `iterations` when zero.
    pub total_iter: u64,
    pub weights: LossWeights,
    pub params: ParamSet,
    /// SPSA gain `a`.
    pub step: f64,
    /// SPSA perturbation size `c`.
    pub perturbation: f64,
    pub feature_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 200,
            seed: 0,
            alpha: 0.2,
            total_iter: 0,
            weights: LossWeights::default(),
            params: ParamSet::Head,
            step: 0.02,
            perturbation: 0.01,
            feature_seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub weights: GeneratorWeights,
    pub initial: LossTerms,
    pub last: LossTerms,
    /// Full objective at the final schedule position, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// False when the run ended worse than it started and `init` was
    /// returned instead.
    pub improved: bool,
}

fn gather(w: &GeneratorWeights, params: ParamSet) -> Vec<f32> {
    w.tensors()
        .iter()
        .filter(|t| params.includes(&t.name))
        .flat_map(|t| t.data.iter().copied())
        .collect()
}

fn scatter(w: &mut GeneratorWeights, params: ParamSet, theta: &[f32]) {
    let names: Vec<String> = w.tensors().iter().filter(|t| params.includes(&t.name)).map(|t| t.name.clone()).collect();
    let mut at = 0;
    for name in names {
        let t = w.tensor_mut(&name).unwrap();
        let n = t.data.len();
        t.data.copy_from_slice(&theta[at..at + n]);
        at += n;
    }
}

/// Fits generator parameters to a scene. Deterministic for a given seed;
/// the returned weights never score worse than `init` at the end of the
/// schedule.
pub fn fit_generator(scene: &FitScene, init: &GeneratorWeights, cfg: &FitConfig) -> Result<FitReport> {
    cfg.weights.validate()?;
    if !(cfg.step > 0.0 && cfg.perturbation > 0.0) {
        return Err(Error::invalid("step and perturbation must be positive"));
    }
    let total_iter = if cfg.total_iter == 0 { cfg.iterations.max(1) as u64 } else { cfg.total_iter };
    let ramp_at = |k: usize| {
        FacialWeightConfig {
            alpha: cfg.alpha,
            mask: Mask::new(0, 0),
            iter: k as u64,
            total_iter,
        }
        .ramp()
    };
    let end_ramp = ramp_at(cfg.iterations)?;
    let features = FeatureExtractor::seeded(cfg.feature_seed);
    let initial = evaluate(scene, init, &features)?;
    let initial_loss = initial.total(&cfg.weights, cfg.alpha, end_ramp);
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { iteration: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = gather(init, cfg.params);
    let mut trial = init.clone();
    let stability = (cfg.iterations / 10) as f64;
    for k in 0..cfg.iterations {
        let ramp = ramp_at(k)?;
        let a_k = cfg.step / (k as f64 + 1.0 + stability).powf(0.602);
        let c_k = cfg.perturbation / (k as f64 + 1.0).powf(0.101);
        let delta: Vec<f32> = (0..theta.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();

        let mut probe = |sign: f32| -> Result<f64> {
            let t: Vec<f32> = theta.iter().zip(&delta).map(|(v, d)| v + sign * c_k as f32 * d).collect();
            scatter(&mut trial, cfg.params, &t);
            Ok(evaluate(scene, &trial, &features)?.total(&cfg.weights, cfg.alpha, ramp))
        };
        let (plus, minus) = (probe(1.0)?, probe(-1.0)?);
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Diverged { iteration: k });
        }
        let g = (plus - minus) / (2.0 * c_k);
        // Keep each coordinate move within a few perturbation widths.
        let step = (a_k * g).clamp(-4.0 * c_k, 4.0 * c_k) as f32;
        theta.iter_mut().zip(&delta).for_each(|(v, d)| *v -= step * d);
    }

    let mut weights = init.clone();
    scatter(&mut weights, cfg.params, &theta);
    let last = evaluate(scene, &weights, &features)?;
    let final_loss = last.total(&cfg.weights, cfg.alpha, end_ramp);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { iteration: cfg.iterations });
    }
    if final_loss > initial_loss {
        return Ok(FitReport {
            weights: init.clone(),
            initial,
            last: initial,
            initial_loss,
            final_loss: initial_loss,
            improved: false,
        });
    }
    Ok(FitReport {
        weights,
        initial,
        last,
        initial_loss,
        final_loss,
        improved: true,
    })
}
