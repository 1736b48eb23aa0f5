//! Gaussian deformation and CPU splatting.
//!
//! Gaussians are projected to screen-space ellipses, globally sorted by view
//! depth and alpha-composited front to back within 16×16 tiles that are
//! processed in parallel. Each tile sees the same global order, so the image
//! does not depend on the thread count or the input order.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::avatar_model::{blend_point, skinning_transforms, Gaussian3D, JointTransform, SkinnedTemplate, SmplxPose};
use crate::error::{Error, Result};
use crate::image::Image;

pub const TILE: usize = 16;
pub const MAX_ALPHA: f32 = 0.999;
/// Squared Mahalanobis radius of the 3σ footprint.
const CUTOFF: f64 = 9.0;
const MIN_DET: f64 = 1e-12;
const NEAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// `u = scale·x + cx`, `v = scale·y + cy` in pixels.
    Orthographic { scale: f64, cx: f64, cy: f64 },
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
}

/// World-to-view transform `x_v = R·x + t`; the image `v` axis follows view
/// `y` and depth is view `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub projection: Projection,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub height: usize,
    pub width: usize,
    pub background: [f32; 3],
}

impl Camera {
    pub fn orthographic(height: usize, width: usize, scale: f64) -> Self {
        Camera {
            projection: Projection::Orthographic {
                scale,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            height,
            width,
            background: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 || !r.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        let ok = match self.projection {
            Projection::Orthographic { scale, cx, cy } => scale > 0.0 && cx.is_finite() && cy.is_finite(),
            Projection::Pinhole { fx, fy, cx, cy } => fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite(),
        };
        if !ok || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera intrinsics or translation are invalid"));
        }
        Ok(())
    }

    /// Text form: one `key values…` line each for `mode`, `rotation` (9,
    /// row-major), `translation`, `intrinsics`, `size` (H W) and
    /// `background`. `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (mode, intr) = match self.projection {
            Projection::Orthographic { scale, cx, cy } => ("orthographic", vec![scale, cx, cy]),
            Projection::Pinhole { fx, fy, cx, cy } => ("pinhole", vec![fx, fy, cx, cy]),
        };
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let rot: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| self.rotation[(i, j)]).collect();
        let _ = writeln!(s, "mode {mode}");
        let _ = writeln!(s, "rotation {}", join(&rot));
        let _ = writeln!(s, "translation {}", join(self.translation.as_slice()));
        let _ = writeln!(s, "intrinsics {}", join(&intr));
        let _ = writeln!(s, "size {} {}", self.height, self.width);
        let bg: Vec<f64> = self.background.iter().map(|&v| v as f64).collect();
        let _ = writeln!(s, "background {}", join(&bg));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mode = None;
        let mut rotation = None;
        let mut translation = None;
        let mut intrinsics = None;
        let mut size = None;
        let mut background = [0.0f32; 3];
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let parse = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::invalid(format!("camera line {}: {e}", n + 1)))
            };
            let nums = |want: usize| -> Result<Vec<f64>> {
                let v = parse()?;
                if v.len() != want {
                    return Err(Error::invalid(format!("camera line {}: `{key}` needs {want} values", n + 1)));
                }
                Ok(v)
            };
            match key {
                "mode" => mode = rest.first().map(|s| s.to_string()),
                "rotation" => rotation = Some(Matrix3::from_row_slice(&nums(9)?)),
                "translation" => translation = Some(Vector3::from_column_slice(&nums(3)?)),
                "intrinsics" => intrinsics = Some(parse()?),
                "size" => {
                    let v = nums(2)?;
                    size = Some((v[0] as usize, v[1] as usize));
                }
                "background" => {
                    let v = nums(3)?;
                    background = [v[0] as f32, v[1] as f32, v[2] as f32];
                }
                other => return Err(Error::invalid(format!("camera line {}: unknown key `{other}`", n + 1))),
            }
        }
        let intr = intrinsics.ok_or_else(|| Error::invalid("camera file lacks `intrinsics`"))?;
        let projection = match mode.as_deref() {
            Some("orthographic") if intr.len() == 3 => Projection::Orthographic {
                scale: intr[0],
                cx: intr[1],
                cy: intr[2],
            },
            Some("pinhole") if intr.len() == 4 => Projection::Pinhole {
                fx: intr[0],
                fy: intr[1],
                cx: intr[2],
                cy: intr[3],
            },
            Some(m) => return Err(Error::invalid(format!("camera mode `{m}` with {} intrinsics", intr.len()))),
            None => return Err(Error::invalid("camera file lacks `mode`")),
        };
        let (height, width) = size.ok_or_else(|| Error::invalid("camera file lacks `size`"))?;
        let cam = Camera {
            projection,
            rotation: rotation.ok_or_else(|| Error::invalid("camera file lacks `rotation`"))?,
            translation: translation.unwrap_or_else(Vector3::zeros),
            height,
            width,
            background,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Rendered color and accumulated alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatImage {
    pub color: Image,
    pub alpha: Image,
    /// Gaussians dropped for a singular footprint or lying behind a pinhole
    /// camera.
    pub skipped: usize,
}

fn quat_matrix(q: [f32; 4]) -> Matrix3<f64> {
    let q = Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Nearest rotation to `m` (polar decomposition).
fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    if (m.transpose() * m - Matrix3::identity()).amax() < 1e-12 && m.determinant() > 0.0 {
        return *m;
    }
    let svd = m.svd(true, true);
    let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(2);
        col.neg_mut();
    }
    u * v_t
}

/// Skin weights of the nearest canonical template vertex, per point.
pub fn attach_nearest(points: &[[f32; 3]], template: &SkinnedTemplate) -> Result<Vec<Vec<f32>>> {
    let verts = template.vertices();
    if verts.is_empty() {
        return Err(Error::invalid("template has no vertices to attach to"));
    }
    Ok(points
        .par_iter()
        .map(|&p| {
            let nearest = (0..verts.len())
                .min_by(|&a, &b| {
                    let d = |v: [f32; 3]| (0..3).map(|k| (v[k] - p[k]).powi(2)).sum::<f32>();
                    d(verts[a]).total_cmp(&d(verts[b])).then(a.cmp(&b))
                })
                .unwrap();
            template.weights_of(nearest).to_vec()
        })
        .collect())
}

/// Moves canonical Gaussians into the posed space of `pose`.
pub fn lbs_deform_gaussians(
    gaussians: &[Gaussian3D],
    template: &SkinnedTemplate,
    pose: &SmplxPose,
    attachment: &[Vec<f32>],
) -> Result<Vec<Gaussian3D>> {
    let transforms = skinning_transforms(template, pose)?;
    deform_with(gaussians, &transforms, attachment)
}

pub fn deform_with(gaussians: &[Gaussian3D], transforms: &[JointTransform], attachment: &[Vec<f32>]) -> Result<Vec<Gaussian3D>> {
    if attachment.len() != gaussians.len() {
        return Err(Error::invalid(format!(
            "{} attachment rows for {} gaussians",
            attachment.len(),
            gaussians.len()
        )));
    }
    if let Some(i) = attachment.iter().position(|r| r.len() != transforms.len()) {
        return Err(Error::invalid(format!(
            "attachment row {i} has {} weights, skeleton has {} joints",
            attachment[i].len(),
            transforms.len()
        )));
    }
    Ok(gaussians
        .par_iter()
        .zip(attachment)
        .map(|(g, w)| {
            let mut blend = Matrix3::zeros();
            for (wj, t) in w.iter().zip(transforms) {
                if *wj != 0.0 {
                    blend += t.rotation * *wj as f64;
                }
            }
            let r = polar_rotation(&blend);
            let q_r = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
            let q = UnitQuaternion::from_quaternion(Quaternion::new(
                g.rotation[0] as f64,
                g.rotation[1] as f64,
                g.rotation[2] as f64,
                g.rotation[3] as f64,
            ));
            let out = (q_r * q).into_inner();
            Gaussian3D {
                position: blend_point(g.position, w, transforms),
                rotation: [out.w as f32, out.i as f32, out.j as f32, out.k as f32],
                ..*g
            }
        })
        .collect())
}

/// A Gaussian reduced to what the compositor needs.
#[derive(Debug, Clone, Copy)]
struct Splat {
    depth: f64,
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f32,
    color: [f32; 3],
    /// Pixel bounds, inclusive.
    rows: (usize, usize),
    cols: (usize, usize),
}

fn project(g: &Gaussian3D, cam: &Camera) -> Option<Splat> {
    let p = Vector3::new(g.position[0] as f64, g.position[1] as f64, g.position[2] as f64);
    let pv = cam.rotation * p + cam.translation;
    let rot = quat_matrix(g.rotation);
    let s = Matrix3::from_diagonal(&Vector3::new(g.scale[0] as f64, g.scale[1] as f64, g.scale[2] as f64));
    let rs = cam.rotation * rot * s;
    let cov_v = rs * rs.transpose();
    let (mean, j) = match cam.projection {
        Projection::Orthographic { scale, cx, cy } => (
            [scale * pv.x + cx, scale * pv.y + cy],
            nalgebra::Matrix2x3::new(scale, 0.0, 0.0, 0.0, scale, 0.0),
        ),
        Projection::Pinhole { fx, fy, cx, cy } => {
            if pv.z <= NEAR {
                return None;
            }
            let z = pv.z;
            (
                [fx * pv.x / z + cx, fy * pv.y / z + cy],
                nalgebra::Matrix2x3::new(fx / z, 0.0, -fx * pv.x / (z * z), 0.0, fy / z, -fy * pv.y / (z * z)),
            )
        }
    };
    let cov: Matrix2<f64> = j * cov_v * j.transpose();
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det >= MIN_DET) || !mean.iter().all(|v| v.is_finite()) {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = CUTOFF.sqrt() * lambda.sqrt();
    let span = |c: f64, n: usize| -> Option<(usize, usize)> {
        // Pixel k has its centre at k + 0.5.
        let lo = (c - radius - 0.5).ceil().max(0.0);
        let hi = (c + radius - 0.5).floor().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let cols = span(mean[0], cam.width);
    let rows = span(mean[1], cam.height);
    Some(Splat {
        depth: pv.z,
        mean,
        conic,
        opacity: g.opacity,
        color: g.color,
        // Off-screen footprints get an empty range.
        rows: rows.unwrap_or((1, 0)),
        cols: cols.unwrap_or((1, 0)),
    })
}

/// Total order on Gaussians: depth first, then every attribute, so ties
/// resolve identically for any input permutation.
fn order_key(a: &(f64, &Gaussian3D), b: &(f64, &Gaussian3D)) -> std::cmp::Ordering {
    let attrs = |g: &Gaussian3D| {
        let mut v = Vec::with_capacity(14);
        v.extend_from_slice(&g.position);
        v.extend_from_slice(&g.scale);
        v.extend_from_slice(&g.rotation);
        v.push(g.opacity);
        v.extend_from_slice(&g.color);
        v
    };
    a.0.total_cmp(&b.0).then_with(|| {
        attrs(a.1)
            .iter()
            .zip(attrs(b.1).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

pub fn rasterize(gaussians: &[Gaussian3D], cam: &Camera) -> Result<SplatImage> {
    cam.validate()?;
    let finite = |g: &Gaussian3D| {
        g.position.iter().chain(&g.scale).chain(&g.rotation).chain(&g.color).all(|v| v.is_finite()) && g.opacity.is_finite()
    };
    if let Some(i) = gaussians.iter().position(|g| !finite(g)) {
        return Err(Error::invalid(format!("gaussian {i} has non-finite attributes")));
    }

    let projected: Vec<Option<Splat>> = gaussians.par_iter().map(|g| project(g, cam)).collect();
    let skipped = projected.iter().filter(|s| s.is_none()).count();
    let mut keyed: Vec<(f64, &Gaussian3D, Splat)> = projected
        .into_iter()
        .zip(gaussians)
        .filter_map(|(s, g)| s.map(|s| (s.depth, g, s)))
        .collect();
    keyed.sort_by(|a, b| order_key(&(a.0, a.1), &(b.0, b.1)));
    let splats: Vec<Splat> = keyed.into_iter().map(|(_, _, s)| s).collect();

    let (h, w) = (cam.height, cam.width);
    let (tiles_y, tiles_x) = (h.div_ceil(TILE), w.div_ceil(TILE));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_y * tiles_x];
    for (i, s) in splats.iter().enumerate() {
        if s.rows.0 > s.rows.1 || s.cols.0 > s.cols.1 {
            continue;
        }
        for ty in s.rows.0 / TILE..=s.rows.1 / TILE {
            for tx in s.cols.0 / TILE..=s.cols.1 / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let tiles: Vec<(Vec<f32>, Vec<f32>)> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (r0, c0) = (t / tiles_x * TILE, t % tiles_x * TILE);
            let (r1, c1) = ((r0 + TILE).min(h), (c0 + TILE).min(w));
            let mut color = Vec::with_capacity((r1 - r0) * (c1 - c0) * 3);
            let mut alpha = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                for c in c0..c1 {
                    let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                    let mut acc = [0.0f32; 3];
                    let mut trans = 1.0f32;
                    for &i in list {
                        let s = &splats[i as usize];
                        let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                        let m = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if m > CUTOFF {
                            continue;
                        }
                        let a = (s.opacity * (-0.5 * m).exp() as f32).clamp(0.0, MAX_ALPHA);
                        for k in 0..3 {
                            acc[k] += s.color[k] * a * trans;
                        }
                        trans *= 1.0 - a;
                    }
                    for k in 0..3 {
                        color.push((acc[k] + trans * cam.background[k]).clamp(0.0, 1.0));
                    }
                    alpha.push((1.0 - trans).clamp(0.0, 1.0));
                }
            }
            (color, alpha)
        })
        .collect();

    let mut color = Image::zeros(h, w, 3);
    let mut alpha = Image::zeros(h, w, 1);
    for (t, (tc, ta)) in tiles.iter().enumerate() {
        let (r0, c0) = (t / tiles_x * TILE, t % tiles_x * TILE);
        let tw = (c0 + TILE).min(w) - c0;
        for (k, a) in ta.iter().enumerate() {
            let (r, c) = (r0 + k / tw, c0 + k % tw);
            alpha.set(r, c, 0, *a);
            color.pixel_mut(r, c).copy_from_slice(&tc[3 * k..3 * k + 3]);
        }
    }
    Ok(SplatImage { color, alpha, skipped })
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.data().is_empty() {
        return Err(Error::invalid("images are empty"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at 99.
pub fn psnr(a: &Image, b: &Image, max_value: f32) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse < 1e-12 {
        return Ok(99.0);
    }
    Ok((10.0 * ((max_value as f64).powi(2) / mse).log10()).min(99.0))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter, keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Structural similarity for data range 1 with an 11×11 Gaussian window
/// (σ = 1.5), averaged over the fully covered positions of every channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, ch) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let taps = gaussian_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..ch {
        let x: Vec<f64> = a.plane(k).into_iter().map(f64::from).collect();
        let y: Vec<f64> = b.plane(k).into_iter().map(f64::from).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}
