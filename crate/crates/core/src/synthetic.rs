//! Seeded synthetic avatars for tests, examples and the RD sweep.
//!
//! The humanoid is a set of capsules and spheres around a 17-joint skeleton
//! standing on the ground plane, facing +z, arms out to the side.

use std::f32::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar_model::{skinning_transforms, Bbox, Gaussian3D, PoseMapPair, SkinnedTemplate, SmplxPose};
use crate::error::{Error, Result};
use crate::generator::{GeneratorWeights, HeadPrior};
use crate::image::{Image, Mask};
use crate::pipeline;
use crate::renderer::{rasterize, Camera, Projection, SplatImage};

pub const JOINT_NAMES: [&str; 17] = [
    "pelvis", "spine", "chest", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
    "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];
pub const HEAD: usize = 4;
const PARENTS: [Option<usize>; 17] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(2),
    Some(5),
    Some(6),
    Some(2),
    Some(8),
    Some(9),
    Some(0),
    Some(11),
    Some(12),
    Some(0),
    Some(14),
    Some(15),
];
const REST: [[f32; 3]; 17] = [
    [0.0, 0.95, 0.0],
    [0.0, 1.10, 0.0],
    [0.0, 1.30, 0.0],
    [0.0, 1.50, 0.0],
    [0.0, 1.60, 0.0],
    [0.18, 1.45, 0.0],
    [0.45, 1.45, 0.0],
    [0.70, 1.45, 0.0],
    [-0.18, 1.45, 0.0],
    [-0.45, 1.45, 0.0],
    [-0.70, 1.45, 0.0],
    [0.10, 0.90, 0.0],
    [0.10, 0.50, 0.0],
    [0.10, 0.08, 0.0],
    [-0.10, 0.90, 0.0],
    [-0.10, 0.50, 0.0],
    [-0.10, 0.08, 0.0],
];
pub const HEAD_CENTER: [f32; 3] = [0.0, 1.70, 0.0];
pub const HEAD_RADIUS: f32 = 0.11;
pub const BETA_DIM: usize = 10;
pub const PSI_DIM: usize = 10;
/// Surface sample spacing in meters.
const SPACING: f32 = 0.025;

enum Part {
    /// Open cylinder from `a` to `b`.
    Limb {
        joint: usize,
        a: [f32; 3],
        b: [f32; 3],
        radius: f32,
        child: Option<usize>,
    },
    Ball {
        joint: usize,
        center: [f32; 3],
        radius: f32,
    },
}

fn parts() -> Vec<Part> {
    use Part::*;
    let mut p = vec![
        Limb { joint: 0, a: [0.0, 0.85, 0.0], b: [0.0, 1.05, 0.0], radius: 0.15, child: Some(1) },
        Limb { joint: 1, a: [0.0, 1.05, 0.0], b: [0.0, 1.25, 0.0], radius: 0.14, child: Some(2) },
        Limb { joint: 2, a: [0.0, 1.25, 0.0], b: [0.0, 1.50, 0.0], radius: 0.16, child: None },
        Limb { joint: 3, a: [0.0, 1.50, 0.0], b: [0.0, 1.60, 0.0], radius: 0.05, child: Some(HEAD) },
        Ball { joint: HEAD, center: HEAD_CENTER, radius: HEAD_RADIUS },
    ];
    for (side, s) in [(0usize, 1.0f32), (3, -1.0)] {
        p.push(Limb { joint: 5 + side, a: [s * 0.18, 1.45, 0.0], b: [s * 0.45, 1.45, 0.0], radius: 0.05, child: Some(6 + side) });
        p.push(Limb { joint: 6 + side, a: [s * 0.45, 1.45, 0.0], b: [s * 0.70, 1.45, 0.0], radius: 0.04, child: Some(7 + side) });
        p.push(Ball { joint: 7 + side, center: [s * 0.75, 1.45, 0.0], radius: 0.045 });
    }
    for (side, s) in [(0usize, 1.0f32), (3, -1.0)] {
        p.push(Limb { joint: 11 + side, a: [s * 0.10, 0.90, 0.0], b: [s * 0.10, 0.50, 0.0], radius: 0.075, child: Some(12 + side) });
        p.push(Limb { joint: 12 + side, a: [s * 0.10, 0.50, 0.0], b: [s * 0.10, 0.08, 0.0], radius: 0.055, child: Some(13 + side) });
        p.push(Ball { joint: 13 + side, center: [s * 0.10, 0.05, 0.04], radius: 0.05 });
    }
    p
}

/// Weights for a point a fraction `s` along a limb owned by `joint`, blended
/// with the parent near the start and with `child` near the end.
fn limb_weights(joint: usize, s: f32, child: Option<usize>) -> Vec<f32> {
    let mut w = vec![0.0f32; JOINT_NAMES.len()];
    w[joint] = 1.0;
    if let Some(p) = PARENTS[joint] {
        if s < 0.25 {
            let t = 0.5 * (1.0 - s / 0.25);
            w[p] += t;
            w[joint] -= t;
        }
    }
    if let Some(c) = child {
        if s > 0.75 {
            let t = 0.5 * (s - 0.75) / 0.25;
            w[c] += t;
            w[joint] -= t;
        }
    }
    w
}

/// An orthonormal pair spanning the plane perpendicular to `axis`.
fn frame(axis: Vector3<f32>) -> (Vector3<f32>, Vector3<f32>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    (u, axis.cross(&u))
}

/// The 17-joint capsule humanoid with outward normals. The bbox leaves
/// `margin` meters of room for posed motion.
pub fn humanoid_template(margin: f32) -> Result<SkinnedTemplate> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut weights = Vec::new();
    for part in parts() {
        match part {
            Part::Limb { joint, a, b, radius, child } => {
                let (va, vb) = (Vector3::from(a), Vector3::from(b));
                let axis = vb - va;
                let len = axis.norm();
                let (u, v) = frame(axis / len);
                let rings = (len / SPACING).ceil() as usize + 1;
                let around = ((2.0 * PI * radius / SPACING).ceil() as usize).max(8);
                for r in 0..rings {
                    let s = r as f32 / (rings - 1) as f32;
                    let c = va + axis * s;
                    let w = limb_weights(joint, s, child);
                    for k in 0..around {
                        let phi = 2.0 * PI * (k as f32 + 0.5 * (r % 2) as f32) / around as f32;
                        let n = u * phi.cos() + v * phi.sin();
                        vertices.push((c + n * radius).into());
                        normals.push(n.into());
                        weights.extend_from_slice(&w);
                    }
                }
            }
            Part::Ball { joint, center, radius } => {
                // Fibonacci sphere.
                let count = ((4.0 * PI * radius * radius) / (SPACING * SPACING)).ceil() as usize + 8;
                let golden = PI * (3.0 - 5f32.sqrt());
                let mut w = vec![0.0f32; JOINT_NAMES.len()];
                w[joint] = 1.0;
                for i in 0..count {
                    let y = 1.0 - 2.0 * (i as f32 + 0.5) / count as f32;
                    let r = (1.0 - y * y).sqrt();
                    let phi = golden * i as f32;
                    let n = [r * phi.cos(), y, r * phi.sin()];
                    vertices.push(std::array::from_fn(|a| center[a] + radius * n[a]));
                    normals.push(n);
                    weights.extend_from_slice(&w);
                }
            }
        }
    }
    let bbox = Bbox::of_points(&vertices).expect("humanoid has vertices").grow(margin);
    SkinnedTemplate::new(vertices, PARENTS.to_vec(), REST.to_vec(), weights, bbox)?.with_normals(normals)
}

/// A smooth seeded motion: arm swings, elbow and knee bends, a stepping
/// gait, head turns and an expression drift.
pub fn animate(frames: usize, seed: u64) -> Vec<SmplxPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.gen_range(24.0f32..40.0);
    let phase: Vec<f32> = (0..8).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let amp: Vec<f32> = (0..8).map(|_| rng.gen_range(0.6f32..1.0)).collect();
    (0..frames)
        .map(|f| {
            let t = 2.0 * PI * f as f32 / period;
            let mut pose = SmplxPose::identity(JOINT_NAMES.len(), BETA_DIM, PSI_DIM);
            pose.frame_index = f as u32;
            let mut set = |joint: usize, axis: usize, v: f32| pose.theta[3 * joint + axis] = v;
            let arm = 0.45 * amp[0] * (t + phase[0]).sin();
            set(5, 2, arm);
            set(8, 2, -arm);
            set(6, 1, 0.35 * amp[1] * (1.0 - (t + phase[1]).cos()));
            set(9, 1, -0.35 * amp[1] * (1.0 - (t + phase[1]).cos()));
            let gait = 0.30 * amp[2] * (t + phase[2]).sin();
            set(11, 0, gait);
            set(14, 0, -gait);
            set(12, 0, 0.25 * amp[3] * (1.0 - (t + phase[3]).cos()).max(0.0));
            set(15, 0, 0.25 * amp[3] * (1.0 + (t + phase[3]).cos()).max(0.0));
            set(HEAD, 1, 0.25 * amp[4] * (0.5 * t + phase[4]).sin());
            set(1, 1, 0.10 * amp[5] * (t + phase[5]).sin());
            for (k, e) in pose.psi.iter_mut().enumerate() {
                *e = 0.3 * amp[6] * (0.7 * t + phase[7] + k as f32).sin();
            }
            pose
        })
        .collect()
}

/// Orthographic camera looking along −z at the bbox, with image `v`
/// pointing down world −y.
pub fn framing_camera(bbox: &Bbox, size: usize) -> Camera {
    let ext = bbox.extent();
    let c = bbox.center();
    let mut cam = Camera::orthographic(size, size, size as f64 / (ext[0].max(ext[1]) as f64 * 1.02));
    cam.rotation = nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    cam.translation = -(cam.rotation * Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64));
    cam
}

/// Pixel coordinates of a world point, if it lies in front of the camera.
pub fn project_point(cam: &Camera, p: [f32; 3]) -> Option<[f64; 2]> {
    let pv = cam.rotation * Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) + cam.translation;
    match cam.projection {
        Projection::Orthographic { scale, cx, cy } => Some([scale * pv.x + cx, scale * pv.y + cy]),
        Projection::Pinhole { fx, fy, cx, cy } => (pv.z > 0.0).then(|| [fx * pv.x / pv.z + cx, fy * pv.y / pv.z + cy]),
    }
}

/// Pixels whose centres lie within `radius_px` of `centre`.
pub fn disc_mask(height: usize, width: usize, centre: [f64; 2], radius_px: f64) -> Mask {
    let mut m = Mask::new(height, width);
    for r in 0..height {
        for c in 0..width {
            let (dx, dy) = (c as f64 + 0.5 - centre[0], r as f64 + 0.5 - centre[1]);
            if dx * dx + dy * dy <= radius_px * radius_px {
                m.set(r, c, true);
            }
        }
    }
    m
}

/// Output prior whose Gaussians are about as wide as a pose-map pixel, so
/// a seeded generator already draws a closed surface.
pub fn surface_prior(bbox: &Bbox, map_resolution: (usize, usize)) -> HeadPrior {
    let ext = bbox.extent();
    let pixel = (ext[0] / map_resolution.1 as f32).max(ext[1] / map_resolution.0 as f32);
    HeadPrior {
        log_scale: (0.6 * pixel).ln(),
        ..HeadPrior::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub map_resolution: (usize, usize),
    pub image_size: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 7,
            frames: 6,
            map_resolution: (32, 32),
            image_size: 128,
        }
    }
}

/// A complete avatar: template, motion, pose maps, a seeded generator and
/// a camera.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub template: SkinnedTemplate,
    pub poses: Vec<SmplxPose>,
    pub pose_maps: Vec<PoseMapPair>,
    pub weights: GeneratorWeights,
    pub camera: Camera,
}

impl SyntheticScene {
    pub fn new(config: SceneConfig) -> Result<Self> {
        if config.frames == 0 || config.image_size == 0 {
            return Err(Error::invalid("scene needs at least one frame and a nonzero image size"));
        }
        let template = humanoid_template(0.3)?;
        let poses = animate(config.frames, config.seed);
        let pose_maps = poses
            .iter()
            .map(|p| pipeline::pose_maps_for(&template, p, config.map_resolution))
            .collect::<Result<Vec<_>>>()?;
        let weights = GeneratorWeights::seeded(config.seed, &surface_prior(template.bbox(), config.map_resolution));
        let camera = framing_camera(template.bbox(), config.image_size);
        Ok(SyntheticScene {
            config,
            template,
            poses,
            pose_maps,
            weights,
            camera,
        })
    }

    /// Uncompressed-pipeline render of frame `i`.
    pub fn render(&self, i: usize) -> Result<SplatImage> {
        pipeline::render_frame(&self.weights, &self.template, &self.pose_maps[i], &self.poses[i], &self.camera)
    }

    /// Image-space face region of `pose`: a disc around the posed head.
    pub fn face_mask(&self, pose: &SmplxPose) -> Result<Mask> {
        let t = skinning_transforms(&self.template, pose)?[HEAD];
        let c = t.apply(&Vector3::new(HEAD_CENTER[0] as f64, HEAD_CENTER[1] as f64, HEAD_CENTER[2] as f64));
        let centre = project_point(&self.camera, [c.x as f32, c.y as f32, c.z as f32])
            .ok_or_else(|| Error::invalid("head is behind the camera"))?;
        let scale = match self.camera.projection {
            Projection::Orthographic { scale, .. } => scale,
            Projection::Pinhole { fx, .. } => fx / self.camera.translation.z.abs().max(1e-6),
        };
        Ok(disc_mask(self.camera.height, self.camera.width, centre, HEAD_RADIUS as f64 * scale))
    }
}

/// A one-frame fitting target: a ball-and-head template whose reference
/// image is two Gaussians, a broad body and a small face of a different
/// colour.
#[derive(Debug, Clone)]
pub struct ToyTarget {
    pub template: SkinnedTemplate,
    pub pose: SmplxPose,
    pub maps: PoseMapPair,
    pub camera: Camera,
    pub target: Image,
    pub target_alpha: Image,
    pub face_mask: Mask,
}

pub const TOY_FACE: [f32; 3] = [0.0, 0.62, 0.2];

pub fn toy_target(map_resolution: (usize, usize), image_size: usize) -> Result<ToyTarget> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    for (centre, radius, count) in [([0.0f32, 0.0, 0.0], 0.45f32, 600usize), ([0.0, 0.62, 0.05], 0.2, 200)] {
        let golden = PI * (3.0 - 5f32.sqrt());
        for i in 0..count {
            let y = 1.0 - 2.0 * (i as f32 + 0.5) / count as f32;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f32;
            let n = [r * phi.cos(), y, r * phi.sin()];
            vertices.push(std::array::from_fn(|a| centre[a] + radius * n[a]));
            normals.push(n);
        }
    }
    let n = vertices.len();
    let bbox = Bbox::of_points(&vertices).unwrap().grow(0.05);
    let template = SkinnedTemplate::new(vertices, vec![None], vec![[0.0; 3]], vec![1.0; n], bbox)?.with_normals(normals)?;
    let pose = SmplxPose::identity(1, 0, 0);
    let maps = pipeline::pose_maps_for(&template, &pose, map_resolution)?;
    let camera = framing_camera(&bbox, image_size);
    let body = Gaussian3D::isotropic([0.0, 0.0, 0.0], 0.3, 0.95, [0.85, 0.55, 0.35]);
    let face = Gaussian3D::isotropic(TOY_FACE, 0.1, 0.95, [0.25, 0.35, 0.8]);
    let reference = rasterize(&[body, face], &camera)?;
    let Projection::Orthographic { scale, .. } = camera.projection else { unreachable!() };
    let centre = project_point(&camera, TOY_FACE).unwrap();
    Ok(ToyTarget {
        face_mask: disc_mask(image_size, image_size, centre, 0.2 * scale),
        template,
        pose,
        maps,
        camera,
        target: reference.color,
        target_alpha: reference.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar_model::pose_template;

    #[test]
    fn humanoid_is_valid_and_framed() {
        let t = humanoid_template(0.3).unwrap();
        assert_eq!(t.joint_count(), 17);
        assert!(t.vertex_count() > 500);
        let cam = framing_camera(t.bbox(), 64);
        // Head projects near the top centre, feet near the bottom.
        let head = project_point(&cam, HEAD_CENTER).unwrap();
        let foot = project_point(&cam, [0.1, 0.05, 0.0]).unwrap();
        assert!((head[0] - 32.0).abs() < 1.0 && head[1] < 20.0, "{head:?}");
        assert!(foot[1] > 44.0, "{foot:?}");
    }

    #[test]
    fn animation_stays_in_bbox() {
        let t = humanoid_template(0.3).unwrap();
        let b = t.bbox();
        for pose in animate(40, 3) {
            for p in pose_template(&t, &pose).unwrap() {
                assert!((0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]), "{p:?}");
            }
        }
    }

    #[test]
    fn scene_renders_a_figure() {
        let s = SyntheticScene::new(SceneConfig {
            frames: 2,
            image_size: 64,
            ..SceneConfig::default()
        })
        .unwrap();
        let img = s.render(1).unwrap();
        let covered = img.alpha.data().iter().filter(|&&a| a > 0.5).count();
        assert!(covered > 200 && covered < 64 * 64 / 2, "{covered}");
        let face = s.face_mask(&s.poses[1]).unwrap();
        assert!(face.count() > 4);
    }

    #[test]
    fn toy_target_has_face_inside_mask() {
        let toy = toy_target((16, 16), 32).unwrap();
        assert!(toy.face_mask.count() > 10);
        let blue_in_face = (0..32)
            .flat_map(|r| (0..32).map(move |c| (r, c)))
            .filter(|&(r, c)| toy.face_mask.get(r, c))
            .all(|(r, c)| toy.target.get(r, c, 2) > toy.target.get(r, c, 0) - 0.3);
        assert!(blue_in_face);
    }
}
