use nalgebra::{Matrix3, Vector3};

use super::{SkinnedTemplate, SmplxPose};
use crate::error::{Error, Result};

/// Affine joint transform `x ↦ R·x + t` from rest space to posed space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl JointTransform {
    pub fn identity() -> Self {
        JointTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `apply(x) - x`; exactly zero for the identity transform.
    #[inline]
    pub fn displacement(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x - x + self.translation
    }
}

/// Rodrigues' formula; the zero vector maps to the exact identity.
pub fn axis_angle_to_matrix(v: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(v);
    let angle = v.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let k = v / angle;
    let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + skew * angle.sin() + skew * skew * (1.0 - angle.cos())
}

/// Forward kinematics: one rest-to-posed transform per joint.
///
/// Each joint rotates about its rest position; children inherit the parent's
/// motion. The root pivots in place, so no global translation is applied.
pub fn skinning_transforms(template: &SkinnedTemplate, pose: &SmplxPose) -> Result<Vec<JointTransform>> {
    let j = template.joint_count();
    if pose.theta.len() != 3 * j {
        return Err(Error::invalid(format!(
            "pose has {} theta values, template needs 3×{j}",
            pose.theta.len()
        )));
    }
    let rest: Vec<Vector3<f64>> = template
        .rest_joints()
        .iter()
        .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect();
    let mut world_rot = vec![Matrix3::identity(); j];
    // Displacement of each joint centre from its rest position.
    let mut shift = vec![Vector3::zeros(); j];
    for &i in template.joint_order() {
        let local = axis_angle_to_matrix(pose.joint_rotation(i).map(|v| v as f64));
        match template.parents()[i] {
            None => {
                world_rot[i] = local;
            }
            Some(p) => {
                world_rot[i] = world_rot[p] * local;
                let bone = rest[i] - rest[p];
                shift[i] = (world_rot[p] * bone - bone) + shift[p];
            }
        }
    }
    Ok((0..j)
        .map(|i| JointTransform {
            rotation: world_rot[i],
            translation: shift[i] - (world_rot[i] * rest[i] - rest[i]),
        })
        .collect())
}

/// Linear blend of joint transforms applied to one point.
pub fn blend_point(x: [f32; 3], weights: &[f32], transforms: &[JointTransform]) -> [f32; 3] {
    let p = Vector3::new(x[0] as f64, x[1] as f64, x[2] as f64);
    let mut d = Vector3::zeros();
    for (w, t) in weights.iter().zip(transforms) {
        if *w != 0.0 {
            d += t.displacement(&p) * *w as f64;
        }
    }
    let out = p + d;
    [out.x as f32, out.y as f32, out.z as f32]
}

/// Poses every canonical vertex with linear blend skinning.
pub fn pose_template(template: &SkinnedTemplate, pose: &SmplxPose) -> Result<Vec<[f32; 3]>> {
    let transforms = skinning_transforms(template, pose)?;
    Ok(template
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &v)| blend_point(v, template.weights_of(i), &transforms))
        .collect())
}
