use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"HGTM";

/// Axis-aligned box in template space (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Bbox {
    pub fn extent(&self) -> [f32; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f32; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]) || !self.extent()[a].is_finite())
    }

    /// Maps a point to `[0,1]³`, clamping anything outside the box.
    pub fn normalize(&self, p: [f32; 3]) -> [f32; 3] {
        let e = self.extent();
        std::array::from_fn(|a| ((p[a] - self.min[a]) / e[a]).clamp(0.0, 1.0))
    }

    /// Inverse of [`normalize`](Self::normalize) for points inside the box.
    pub fn denormalize(&self, n: [f32; 3]) -> [f32; 3] {
        let e = self.extent();
        std::array::from_fn(|a| self.min[a] + n[a] * e[a])
    }

    pub fn grow(&self, margin: f32) -> Bbox {
        Bbox {
            min: self.min.map(|v| v - margin),
            max: self.max.map(|v| v + margin),
        }
    }

    pub fn of_points(points: &[[f32; 3]]) -> Option<Bbox> {
        let first = points.first()?;
        let mut b = Bbox {
            min: *first,
            max: *first,
        };
        for p in points {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }
}

/// Canonical mesh vertices with a joint tree and per-vertex skinning weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedTemplate {
    vertices: Vec<[f32; 3]>,
    parents: Vec<Option<usize>>,
    rest_joints: Vec<[f32; 3]>,
    skin_weights: Vec<f32>,
    bbox: Bbox,
    normals: Option<Vec<[f32; 3]>>,
    // Joints ordered so every parent precedes its children.
    order: Vec<usize>,
}

impl SkinnedTemplate {
    /// Validates and assembles a template. `skin_weights` is `N × J`, row-major.
    pub fn new(
        vertices: Vec<[f32; 3]>,
        parents: Vec<Option<usize>>,
        rest_joints: Vec<[f32; 3]>,
        skin_weights: Vec<f32>,
        bbox: Bbox,
    ) -> Result<Self> {
        let j = parents.len();
        if j == 0 {
            return Err(Error::invalid("template needs at least one joint"));
        }
        if rest_joints.len() != j {
            return Err(Error::invalid(format!(
                "{} rest joints for {j} parents",
                rest_joints.len()
            )));
        }
        if skin_weights.len() != vertices.len() * j {
            return Err(Error::invalid(format!(
                "skin weights hold {} values, expected {}×{j}",
                skin_weights.len(),
                vertices.len()
            )));
        }
        for (i, row) in skin_weights.chunks_exact(j).enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::invalid(format!("skin weights of vertex {i} are not nonnegative")));
            }
            let sum: f64 = row.iter().map(|&w| w as f64).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("skin weights of vertex {i} sum to {sum}")));
            }
        }
        if vertices.iter().chain(&rest_joints).flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("template coordinates must be finite"));
        }
        let order = joint_order(&parents)?;
        Ok(SkinnedTemplate {
            vertices,
            parents,
            rest_joints,
            skin_weights,
            bbox,
            normals: None,
            order,
        })
    }

    /// Attaches canonical outward normals; they decide the front/back split
    /// of pose maps.
    pub fn with_normals(mut self, normals: Vec<[f32; 3]>) -> Result<Self> {
        if normals.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} vertices",
                normals.len(),
                self.vertices.len()
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn vertices(&self) -> &[[f32; 3]] {
        &self.vertices
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_joints(&self) -> &[[f32; 3]] {
        &self.rest_joints
    }

    pub fn skin_weights(&self) -> &[f32] {
        &self.skin_weights
    }

    pub fn weights_of(&self, vertex: usize) -> &[f32] {
        let j = self.joint_count();
        &self.skin_weights[vertex * j..(vertex + 1) * j]
    }

    pub fn bbox(&self) -> &Bbox {
        &self.bbox
    }

    pub fn normals(&self) -> Option<&[[f32; 3]]> {
        self.normals.as_deref()
    }

    /// Whether a vertex lands in the front pose map.
    pub fn faces_front(&self, vertex: usize) -> bool {
        match &self.normals {
            Some(n) => n[vertex][2] >= 0.0,
            None => self.vertices[vertex][2] >= 0.0,
        }
    }

    pub(crate) fn joint_order(&self) -> &[usize] {
        &self.order
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.vertex_count();
        let j = self.joint_count();
        let mut out = Vec::with_capacity(12 + (n * 3 + j * 4 + n * j + 6) * 4);
        out.extend_from_slice(MAGIC);
        wire::put_u32(&mut out, wire::to_u32(n, "vertex count")?);
        wire::put_u32(&mut out, wire::to_u32(j, "joint count")?);
        for v in &self.vertices {
            wire::put_f32s(&mut out, v);
        }
        for p in &self.parents {
            wire::put_i32(&mut out, p.map_or(-1, |p| p as i32));
        }
        for v in &self.rest_joints {
            wire::put_f32s(&mut out, v);
        }
        wire::put_f32s(&mut out, &self.skin_weights);
        wire::put_f32s(&mut out, &self.bbox.min);
        wire::put_f32s(&mut out, &self.bbox.max);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "template");
        r.magic(MAGIC)?;
        let n = r.u32()? as usize;
        let j = r.u32()? as usize;
        let need = (n as u64 * 3 + j as u64 * 4 + n as u64 * j as u64 + 6) * 4;
        if (r.remaining() as u64) < need {
            return Err(Error::decode(format!(
                "template: {n} vertices × {j} joints need {need} bytes, {} present",
                r.remaining()
            )));
        }
        let triples = |flat: Vec<f32>| -> Vec<[f32; 3]> {
            flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
        };
        let vertices = triples(r.f32s(n * 3)?);
        let mut parents = Vec::with_capacity(j);
        for i in 0..j {
            let p = r.i32()?;
            parents.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < j => Some(p as usize),
                p => return Err(Error::decode(format!("template: joint {i} has parent {p}"))),
            });
        }
        let rest_joints = triples(r.f32s(j * 3)?);
        let skin_weights = r.f32s(n * j)?;
        let b = r.f32s(6)?;
        r.finish()?;
        let bbox = Bbox {
            min: [b[0], b[1], b[2]],
            max: [b[3], b[4], b[5]],
        };
        SkinnedTemplate::new(vertices, parents, rest_joints, skin_weights, bbox)
            .map_err(|e| Error::decode(format!("template: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn joint_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let j = parents.len();
    let roots: Vec<usize> = (0..j).filter(|&i| parents[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::invalid(format!(
            "joint tree must have exactly one root, found {}",
            roots.len()
        )));
    }
    let mut children = vec![Vec::new(); j];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= j {
                return Err(Error::invalid(format!("joint {i} has out-of-range parent {p}")));
            }
            children[p].push(i);
        }
    }
    let mut order = Vec::with_capacity(j);
    let mut stack = vec![roots[0]];
    while let Some(i) = stack.pop() {
        order.push(i);
        stack.extend(children[i].iter().rev());
    }
    if order.len() != j {
        return Err(Error::invalid("joint parents contain a cycle"));
    }
    Ok(order)
}
