//! Decoder-side reconstruction of one frame: pose maps through the
//! generator to canonical Gaussians, skinned into the frame's pose and
//! splatted.

use crate::avatar_model::{
    anchor_points, extract_gaussians, pose_template, render_pose_maps, Gaussian3D, GaussianMapPair, PoseMapPair,
    SkinnedTemplate, SmplxPose,
};
use crate::error::Result;
use crate::generator::{forward, GeneratorWeights};
use crate::renderer::{attach_nearest, lbs_deform_gaussians, rasterize, Camera, SplatImage};

/// One frame's avatar in canonical space.
#[derive(Debug, Clone)]
pub struct Canonical {
    /// Raw generator output.
    pub maps: GaussianMapPair,
    pub gaussians: Vec<Gaussian3D>,
    /// Skin weights per Gaussian, taken from the template vertex nearest to
    /// the Gaussian's anchor rather than to its offset position, so they do
    /// not depend on the generator.
    pub attachment: Vec<Vec<f32>>,
}

/// Rest-pose maps of the template: the canonical surface point behind each
/// pose-map pixel.
pub fn anchor_maps(template: &SkinnedTemplate, resolution: (usize, usize)) -> Result<PoseMapPair> {
    pose_maps_for(template, &SmplxPose::identity(template.joint_count(), 0, 0), resolution)
}

pub fn canonical_gaussians(weights: &GeneratorWeights, maps: &PoseMapPair, template: &SkinnedTemplate) -> Result<Canonical> {
    let gmaps = forward(weights, maps)?;
    let anchors = anchor_maps(template, maps.resolution())?;
    let gaussians = extract_gaussians(&gmaps, &anchors, template.bbox())?;
    let attachment = attach_nearest(&anchor_points(&gmaps, &anchors, template.bbox())?, template)?;
    Ok(Canonical {
        maps: gmaps,
        gaussians,
        attachment,
    })
}

/// Canonical Gaussians deformed into `pose`.
pub fn posed_gaussians(
    weights: &GeneratorWeights,
    template: &SkinnedTemplate,
    maps: &PoseMapPair,
    pose: &SmplxPose,
) -> Result<Vec<Gaussian3D>> {
    let c = canonical_gaussians(weights, maps, template)?;
    lbs_deform_gaussians(&c.gaussians, template, pose, &c.attachment)
}

pub fn render_frame(
    weights: &GeneratorWeights,
    template: &SkinnedTemplate,
    maps: &PoseMapPair,
    pose: &SmplxPose,
    camera: &Camera,
) -> Result<SplatImage> {
    rasterize(&posed_gaussians(weights, template, maps, pose)?, camera)
}

/// Pose maps of `pose` generated on the receiver from the template alone.
pub fn pose_maps_for(template: &SkinnedTemplate, pose: &SmplxPose, resolution: (usize, usize)) -> Result<PoseMapPair> {
    render_pose_maps(&pose_template(template, pose)?, template, resolution)
}

/// Renders the rest pose; needs only the structural layer and the template.
pub fn render_canonical(
    weights: &GeneratorWeights,
    template: &SkinnedTemplate,
    camera: &Camera,
    resolution: (usize, usize),
) -> Result<SplatImage> {
    let pose = SmplxPose::identity(template.joint_count(), 0, 0);
    let maps = pose_maps_for(template, &pose, resolution)?;
    render_frame(weights, template, &maps, &pose, camera)
}
