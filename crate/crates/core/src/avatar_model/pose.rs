use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"HGPS";

/// Per-frame body pose (`theta`, axis-angle per joint), shape (`beta`) and
/// expression (`psi`) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SmplxPose {
    pub theta: Vec<f32>,
    pub beta: Vec<f32>,
    pub psi: Vec<f32>,
    pub frame_index: u32,
}

impl SmplxPose {
    /// Rest pose for a template with `joint_count` joints.
    pub fn identity(joint_count: usize, beta_dim: usize, psi_dim: usize) -> Self {
        SmplxPose {
            theta: vec![0.0; joint_count * 3],
            beta: vec![0.0; beta_dim],
            psi: vec![0.0; psi_dim],
            frame_index: 0,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.theta.len(), self.beta.len(), self.psi.len())
    }

    pub fn joint_rotation(&self, joint: usize) -> [f32; 3] {
        [
            self.theta[joint * 3],
            self.theta[joint * 3 + 1],
            self.theta[joint * 3 + 2],
        ]
    }

    /// `theta ‖ beta ‖ psi`, the layout used on the wire and by the pose space.
    pub fn to_vector(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.theta.len() + self.beta.len() + self.psi.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.psi);
        v
    }

    pub fn from_vector(v: &[f32], dims: (usize, usize, usize), frame_index: u32) -> Result<Self> {
        let (t, b, p) = dims;
        if v.len() != t + b + p {
            return Err(Error::invalid(format!(
                "pose vector has {} values, expected {}",
                v.len(),
                t + b + p
            )));
        }
        Ok(SmplxPose {
            theta: v[..t].to_vec(),
            beta: v[t..t + b].to_vec(),
            psi: v[t + b..].to_vec(),
            frame_index,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.beta)
            .chain(&self.psi)
            .all(|v| v.is_finite())
    }
}

pub(crate) fn check_uniform_dims(frames: &[SmplxPose]) -> Result<(usize, usize, usize)> {
    let Some(first) = frames.first() else {
        return Ok((0, 0, 0));
    };
    let dims = first.dims();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
        return Err(Error::invalid(format!(
            "frame {i} has dims {:?}, frame 0 has {dims:?}",
            f.dims()
        )));
    }
    Ok(dims)
}

/// Serializes a pose sequence: magic, frame count, the three dimensions, then
/// the per-frame `f32` values.
pub fn write_pose_sequence(frames: &[SmplxPose]) -> Result<Vec<u8>> {
    let (t, b, p) = check_uniform_dims(frames)?;
    let mut out = Vec::with_capacity(20 + frames.len() * (t + b + p) * 4);
    out.extend_from_slice(MAGIC);
    wire::put_u32(&mut out, wire::to_u32(frames.len(), "frame count")?);
    for d in [t, b, p] {
        wire::put_u32(&mut out, wire::to_u32(d, "pose dimension")?);
    }
    for f in frames {
        wire::put_f32s(&mut out, &f.theta);
        wire::put_f32s(&mut out, &f.beta);
        wire::put_f32s(&mut out, &f.psi);
    }
    Ok(out)
}

pub fn read_pose_sequence(bytes: &[u8]) -> Result<Vec<SmplxPose>> {
    let mut r = Reader::new(bytes, "pose sequence");
    r.magic(MAGIC)?;
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let b = r.u32()? as usize;
    let p = r.u32()? as usize;
    let per_frame = (t + b + p) * 4;
    if per_frame > 0 && r.remaining() / per_frame < n {
        return Err(Error::decode(format!(
            "pose sequence: header declares {n} frames but only {} bytes follow",
            r.remaining()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(SmplxPose {
            theta: r.f32s(t)?,
            beta: r.f32s(b)?,
            psi: r.f32s(p)?,
            frame_index: i as u32,
        });
    }
    r.finish()?;
    Ok(frames)
}

pub fn save_pose_sequence(frames: &[SmplxPose], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_pose_sequence(frames)?)?;
    Ok(())
}

pub fn load_pose_sequence(path: impl AsRef<Path>) -> Result<Vec<SmplxPose>> {
    read_pose_sequence(&std::fs::read(path)?)
}
