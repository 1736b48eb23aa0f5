//! PCA pose space with ±kσ coefficient clipping.
//!
//! A novel pose `x` is pulled into the span of the training poses and its
//! coefficients are clamped to `k` standard deviations per component:
//!
//! ```text
//! P(x) = S · clamp(Sᵀ(x − μ), −kσ, kσ) + μ
//! ```
//!
//! Components come from the SVD of the centred training matrix; each column
//! of `S` is signed so that its largest-magnitude entry is positive.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::avatar_model::{PoseMapPair, SmplxPose};
use crate::error::{Error, Result};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"HGPC";
pub const DEFAULT_K: f64 = 3.0;
const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `D × d`, orthonormal columns.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Population standard deviation of each training coefficient.
    pub sigma: DVector<f64>,
    pub k: f64,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.components.ncols()
    }

    pub fn with_k(mut self, k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::invalid(format!("clipping multiplier k = {k} must be positive")));
        }
        self.k = k;
        Ok(self)
    }

    /// Coefficients `Sᵀ(x − μ)` without clipping.
    pub fn coefficients(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "pose vector has {} entries, basis expects {}",
                x.len(),
                self.dim()
            )));
        }
        let centred = DVector::from_column_slice(x) - &self.mean;
        Ok(self.components.tr_mul(&centred))
    }

    pub fn project_clip(&self, x: &[f64]) -> Result<Vec<f64>> {
        project_clip(self, x)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (dim, rank) = (self.dim(), self.rank());
        let mut out = Vec::with_capacity(16 + 4 * (dim + dim * rank + rank + 1));
        out.extend_from_slice(MAGIC);
        wire::put_u32(&mut out, wire::to_u32(dim, "basis dimension")?);
        wire::put_u32(&mut out, wire::to_u32(rank, "basis rank")?);
        let f = |v: &f64| *v as f32;
        wire::put_f32s(&mut out, &self.mean.iter().map(f).collect::<Vec<_>>());
        // nalgebra storage is column-major already.
        wire::put_f32s(&mut out, &self.components.iter().map(f).collect::<Vec<_>>());
        wire::put_f32s(&mut out, &self.sigma.iter().map(f).collect::<Vec<_>>());
        wire::put_f32(&mut out, self.k as f32);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "pca basis");
        r.magic(MAGIC)?;
        let dim = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let need = 4 * (dim as u64 + dim as u64 * rank as u64 + rank as u64 + 1);
        if (r.remaining() as u64) != need {
            return Err(Error::decode(format!(
                "pca basis: {dim}×{rank} needs {need} bytes after the header, {} present",
                r.remaining()
            )));
        }
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let mean = DVector::from_vec(widen(r.f32s(dim)?));
        let components = DMatrix::from_vec(dim, rank, widen(r.f32s(dim * rank)?));
        let sigma = DVector::from_vec(widen(r.f32s(rank)?));
        let k = r.f32()? as f64;
        r.finish()?;
        let gram = components.tr_mul(&components);
        if (gram - DMatrix::identity(rank, rank)).amax() > 1e-4 {
            return Err(Error::decode("pca basis columns are not orthonormal"));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) || !(k > 0.0) {
            return Err(Error::decode("pca basis has nonpositive sigma or k"));
        }
        Ok(PcaBasis {
            components,
            mean,
            sigma,
            k,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Fits a `d`-component basis to `M` training vectors of length `D`.
pub fn fit_pca(training: &[Vec<f64>], d: usize) -> Result<PcaBasis> {
    let m = training.len();
    if d == 0 {
        return Err(Error::invalid("pca needs at least one component"));
    }
    if m < d {
        return Err(Error::invalid(format!("{m} training vectors cannot support {d} components")));
    }
    let dim = training[0].len();
    if let Some(i) = training.iter().position(|v| v.len() != dim) {
        return Err(Error::invalid(format!("training vector {i} has {} entries, expected {dim}", training[i].len())));
    }
    if training.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training vectors must be finite"));
    }
    if d > dim {
        return Err(Error::RankDeficient { component: dim });
    }

    let x = DMatrix::from_fn(m, dim, |i, j| training[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let mut centred = x;
    for j in 0..dim {
        let mu = mean[j];
        centred.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }

    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = s_max * (m.max(dim) as f64) * f64::EPSILON * 16.0;

    let mut components = DMatrix::zeros(dim, d);
    for c in 0..d {
        let Some(&src) = order.get(c) else {
            return Err(Error::RankDeficient { component: c });
        };
        if !(svd.singular_values[src] > tol) {
            return Err(Error::RankDeficient { component: c });
        }
        let mut col = v_t.row(src).transpose();
        let lead = col.iter().enumerate().fold(0, |best, (i, v)| {
            if v.abs() > col[best].abs() {
                i
            } else {
                best
            }
        });
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        components.set_column(c, &col);
    }

    let coeffs = &centred * &components; // M × d
    let sigma = DVector::from_fn(d, |c, _| {
        let var = coeffs.column(c).iter().map(|v| v * v).sum::<f64>() / m as f64;
        var.sqrt().max(SIGMA_FLOOR)
    });
    Ok(PcaBasis {
        components,
        mean,
        sigma,
        k: DEFAULT_K,
    })
}

/// `S · clamp(Sᵀ(x − μ), −kσ, kσ) + μ`.
pub fn project_clip(basis: &PcaBasis, x: &[f64]) -> Result<Vec<f64>> {
    let mut coef = basis.coefficients(x)?;
    for (c, s) in coef.iter_mut().zip(basis.sigma.iter()) {
        let band = basis.k * s;
        *c = c.clamp(-band, band);
    }
    Ok((&basis.components * coef + &basis.mean).iter().copied().collect())
}

/// Fits a basis to pose vectors (`theta ‖ beta ‖ psi`).
pub fn fit_poses(poses: &[SmplxPose], d: usize) -> Result<PcaBasis> {
    let rows: Vec<Vec<f64>> = poses
        .iter()
        .map(|p| p.to_vector().iter().map(|&v| v as f64).collect())
        .collect();
    fit_pca(&rows, d)
}

/// Pulls a novel pose into the fitted space; dimensions and frame index are
/// kept.
pub fn drive_pose(basis: &PcaBasis, pose: &SmplxPose) -> Result<SmplxPose> {
    let x: Vec<f64> = pose.to_vector().iter().map(|&v| v as f64).collect();
    let y: Vec<f32> = project_clip(basis, &x)?.iter().map(|&v| v as f32).collect();
    SmplxPose::from_vector(&y, pose.dims(), pose.frame_index)
}

/// Pose space fitted on `(flattened pose map ‖ pose vector)` with each block
/// scaled to unit mean variance, so neither block dominates the components.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPoseSpace {
    pub basis: PcaBasis,
    pub map_len: usize,
    pub pose_len: usize,
    pub map_scale: f64,
    pub pose_scale: f64,
}

pub fn flatten_pose_maps(maps: &PoseMapPair) -> Vec<f64> {
    maps.front
        .data()
        .iter()
        .chain(maps.back.data())
        .map(|&v| v as f64)
        .collect()
}

fn block_scale(rows: &[&[f64]]) -> f64 {
    let m = rows.len() as f64;
    let dim = rows.first().map_or(0, |r| r.len());
    if dim == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m;
        total += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
    }
    let mean_var = total / dim as f64;
    if mean_var > 1e-12 {
        1.0 / mean_var.sqrt()
    } else {
        1.0
    }
}

impl JointPoseSpace {
    pub fn fit(poses: &[Vec<f64>], maps: &[PoseMapPair], d: usize) -> Result<Self> {
        if poses.len() != maps.len() {
            return Err(Error::invalid(format!("{} poses but {} pose maps", poses.len(), maps.len())));
        }
        let flat: Vec<Vec<f64>> = maps.iter().map(flatten_pose_maps).collect();
        let map_len = flat.first().map_or(0, Vec::len);
        let pose_len = poses.first().map_or(0, Vec::len);
        let map_scale = block_scale(&flat.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let pose_scale = block_scale(&poses.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let joint: Vec<Vec<f64>> = flat
            .iter()
            .zip(poses)
            .map(|(m, p)| {
                m.iter()
                    .map(|v| v * map_scale)
                    .chain(p.iter().map(|v| v * pose_scale))
                    .collect()
            })
            .collect();
        Ok(JointPoseSpace {
            basis: fit_pca(&joint, d)?,
            map_len,
            pose_len,
            map_scale,
            pose_scale,
        })
    }

    /// Projects a `(pose map, pose)` pair; returns the clipped pose-map block
    /// and pose block in their original units.
    pub fn project(&self, map: &[f64], pose: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if map.len() != self.map_len || pose.len() != self.pose_len {
            return Err(Error::invalid("joint projection input has the wrong block sizes"));
        }
        let joint: Vec<f64> = map
            .iter()
            .map(|v| v * self.map_scale)
            .chain(pose.iter().map(|v| v * self.pose_scale))
            .collect();
        let out = project_clip(&self.basis, &joint)?;
        Ok((
            out[..self.map_len].iter().map(|v| v / self.map_scale).collect(),
            out[self.map_len..].iter().map(|v| v / self.pose_scale).collect(),
        ))
    }
}
