use super::{Bbox, PoseMapPair};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Channels of a Gaussian map pixel.
pub const GAUSSIAN_CHANNELS: usize = 14;
pub const CH_OFFSET: usize = 0;
pub const CH_LOG_SCALE: usize = 3;
pub const CH_ROTATION: usize = 6;
pub const CH_OPACITY: usize = 10;
pub const CH_COLOR: usize = 11;

/// One anisotropic Gaussian. `rotation` is a unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub position: [f32; 3],
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
    pub opacity: f32,
    pub color: [f32; 3],
}

impl Gaussian3D {
    pub fn isotropic(position: [f32; 3], radius: f32, opacity: f32, color: [f32; 3]) -> Self {
        Gaussian3D {
            position,
            scale: [radius; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        }
    }
}

/// Per-pixel Gaussian attributes for the front and back views, with the
/// pose-map masks that say which pixels carry a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMapPair {
    pub front: Image,
    pub back: Image,
    pub mask_front: Mask,
    pub mask_back: Mask,
}

impl GaussianMapPair {
    pub fn resolution(&self) -> (usize, usize) {
        (self.front.height(), self.front.width())
    }

    /// A zeroed map sharing the masks of `pose_maps`.
    pub fn zeros_like(pose_maps: &PoseMapPair) -> Self {
        let (h, w) = pose_maps.resolution();
        GaussianMapPair {
            front: Image::zeros(h, w, GAUSSIAN_CHANNELS),
            back: Image::zeros(h, w, GAUSSIAN_CHANNELS),
            mask_front: pose_maps.mask_front.clone(),
            mask_back: pose_maps.mask_back.clone(),
        }
    }

    pub fn views(&self) -> [(&Image, &Mask); 2] {
        [(&self.front, &self.mask_front), (&self.back, &self.mask_back)]
    }
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Canonical back-projection of every masked pixel, front view first and
/// row-major, the order [`extract_gaussians`] emits Gaussians in.
///
/// `anchors` are the pose maps of the template in its rest pose: each pixel
/// holds the bbox-normalized canonical surface point it was rendered from.
pub fn anchor_points(maps: &GaussianMapPair, anchors: &PoseMapPair, bbox: &Bbox) -> Result<Vec<[f32; 3]>> {
    let (h, w) = maps.resolution();
    for (img, mask) in maps.views() {
        if img.shape() != (h, w, GAUSSIAN_CHANNELS) || mask.height() != h || mask.width() != w {
            return Err(Error::invalid("gaussian map views are malformed"));
        }
    }
    if anchors.resolution() != (h, w) {
        return Err(Error::invalid(format!(
            "anchor maps are {:?}, gaussian maps {:?}",
            anchors.resolution(),
            (h, w)
        )));
    }
    let mut out = Vec::with_capacity(maps.mask_front.count() + maps.mask_back.count());
    let views = [(&maps.mask_front, &anchors.front, &anchors.mask_front), (&maps.mask_back, &anchors.back, &anchors.mask_back)];
    for (mask, img, covered) in views {
        for row in 0..h {
            for col in 0..w {
                if !mask.get(row, col) {
                    continue;
                }
                if !covered.get(row, col) {
                    return Err(Error::invalid(format!("pixel ({row}, {col}) has no surface point behind it")));
                }
                let px = img.pixel(row, col);
                out.push(bbox.denormalize([px[0], px[1], px[2]]));
            }
        }
    }
    Ok(out)
}

/// Turns every masked pixel of both maps into a Gaussian in canonical space,
/// placed at the pixel's anchor (see [`anchor_points`]) moved by the
/// position-offset channels.
pub fn extract_gaussians(maps: &GaussianMapPair, anchors: &PoseMapPair, bbox: &Bbox) -> Result<Vec<Gaussian3D>> {
    let (h, w) = maps.resolution();
    let base = anchor_points(maps, anchors, bbox)?;
    let mut base = base.into_iter();
    let mut out = Vec::with_capacity(base.len());
    for (img, mask) in maps.views() {
        for row in 0..h {
            for col in 0..w {
                if !mask.get(row, col) {
                    continue;
                }
                let p = base.next().expect("one anchor per masked pixel");
                let px = img.pixel(row, col);
                let o = &px[CH_OFFSET..CH_OFFSET + 3];
                let q = &px[CH_ROTATION..CH_ROTATION + 4];
                let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
                let rotation = if norm > 1e-12 && norm.is_finite() {
                    [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                };
                let ls = &px[CH_LOG_SCALE..CH_LOG_SCALE + 3];
                let c = &px[CH_COLOR..CH_COLOR + 3];
                out.push(Gaussian3D {
                    position: [p[0] + o[0], p[1] + o[1], p[2] + o[2]],
                    scale: [ls[0].exp(), ls[1].exp(), ls[2].exp()],
                    rotation,
                    opacity: logistic(px[CH_OPACITY]),
                    color: [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)],
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox() -> Bbox {
        Bbox {
            min: [0.0; 3],
            max: [2.0; 3],
        }
    }

    fn maps(h: usize, w: usize) -> GaussianMapPair {
        GaussianMapPair::zeros_like(&PoseMapPair::empty(h, w))
    }

    /// Anchors covering every pixel, all at normalized `(0.75, 0.25, 0.5)`.
    fn anchors(h: usize, w: usize) -> PoseMapPair {
        let mut a = PoseMapPair::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                a.mask_front.set(r, c, true);
                a.mask_back.set(r, c, true);
                a.front.pixel_mut(r, c).copy_from_slice(&[0.75, 0.25, 0.5]);
                a.back.pixel_mut(r, c).copy_from_slice(&[0.75, 0.25, 0.5]);
            }
        }
        a
    }

    #[test]
    fn empty_mask_gives_no_gaussians() {
        assert!(extract_gaussians(&maps(4, 4), &anchors(4, 4), &bbox()).unwrap().is_empty());
    }

    #[test]
    fn zero_pixel_defaults() {
        let mut m = maps(2, 2);
        m.mask_front.set(0, 1, true);
        let g = extract_gaussians(&m, &anchors(2, 2), &bbox()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].position, [1.5, 0.5, 1.0]);
        assert_eq!(g[0].scale, [1.0; 3]);
        assert_eq!(g[0].opacity, 0.5);
        assert_eq!(g[0].rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn counts_follow_masks() {
        let mut m = maps(3, 3);
        m.mask_front.set(0, 0, true);
        m.mask_front.set(2, 2, true);
        for k in 0..3 {
            m.mask_back.set(1, k, true);
        }
        assert_eq!(extract_gaussians(&m, &anchors(3, 3), &bbox()).unwrap().len(), 5);
    }

    #[test]
    fn quaternion_normalized_and_offset_applied() {
        let mut m = maps(1, 1);
        m.mask_back.set(0, 0, true);
        let px = m.back.pixel_mut(0, 0);
        px[CH_OFFSET..CH_OFFSET + 3].copy_from_slice(&[0.1, -0.2, 0.3]);
        px[CH_ROTATION..CH_ROTATION + 4].copy_from_slice(&[0.0, 3.0, 0.0, 4.0]);
        px[CH_OPACITY] = 2.0;
        px[CH_COLOR..CH_COLOR + 3].copy_from_slice(&[1.5, 0.5, -1.0]);
        let g = extract_gaussians(&m, &anchors(1, 1), &bbox()).unwrap()[0];
        assert_eq!(g.rotation, [0.0, 0.6, 0.0, 0.8]);
        assert_eq!(g.position, [1.6, 0.3, 1.3]);
        assert!((g.opacity - 0.880797).abs() < 1e-6);
        assert_eq!(g.color, [1.0, 0.5, 0.0]);
    }

    #[test]
    fn uncovered_pixel_is_rejected() {
        let mut m = maps(2, 2);
        m.mask_back.set(1, 1, true);
        let mut a = anchors(2, 2);
        a.mask_back.set(1, 1, false);
        assert!(matches!(extract_gaussians(&m, &a, &bbox()), Err(Error::InvalidArgument(_))));
        assert!(extract_gaussians(&m, &anchors(3, 2), &bbox()).is_err());
    }
}
