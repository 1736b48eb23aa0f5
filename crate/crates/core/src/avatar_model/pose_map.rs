use super::SkinnedTemplate;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const DEFAULT_POSE_MAP_RESOLUTION: (usize, usize) = (256, 256);

/// Front and back orthographic pose maps. Each covered pixel stores the
/// bbox-normalized posed position of the vertex that won the depth test.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMapPair {
    pub front: Image,
    pub back: Image,
    pub mask_front: Mask,
    pub mask_back: Mask,
}

impl PoseMapPair {
    pub fn empty(height: usize, width: usize) -> Self {
        PoseMapPair {
            front: Image::zeros(height, width, 3),
            back: Image::zeros(height, width, 3),
            mask_front: Mask::new(height, width),
            mask_back: Mask::new(height, width),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.front.height(), self.front.width())
    }

    pub fn views(&self) -> [(&Image, &Mask); 2] {
        [(&self.front, &self.mask_front), (&self.back, &self.mask_back)]
    }

    /// Checks shapes, value range, and that unmasked pixels are zero.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution();
        for (img, mask) in self.views() {
            if img.shape() != (h, w, 3) || mask.height() != h || mask.width() != w {
                return Err(Error::invalid("pose map views disagree on resolution"));
            }
            for (px, &m) in img.data().chunks_exact(3).zip(mask.bits()) {
                if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("pose map value outside [0,1]"));
                }
                if !m && px.iter().any(|&v| v != 0.0) {
                    return Err(Error::invalid("pose map has a nonzero pixel outside its mask"));
                }
            }
        }
        Ok(())
    }
}

/// Splats vertices into front/back pose maps.
///
/// Pixel placement and the depth test use the canonical vertex positions, so
/// the covered footprint is fixed per template; the pixel colour carries the
/// posed position. Front-facing vertices go to the front map (camera on +z
/// looking along −z), the rest to the back map (camera on −z). Both maps use
/// the same, unmirrored pixel grid.
pub fn render_pose_maps(
    posed_vertices: &[[f32; 3]],
    template: &SkinnedTemplate,
    resolution: (usize, usize),
) -> Result<PoseMapPair> {
    let bbox = template.bbox();
    if bbox.is_degenerate() {
        return Err(Error::invalid(format!("degenerate template bbox {bbox:?}")));
    }
    if posed_vertices.len() != template.vertex_count() {
        return Err(Error::invalid(format!(
            "{} posed vertices for a template with {}",
            posed_vertices.len(),
            template.vertex_count()
        )));
    }
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::invalid("pose map resolution must be nonzero"));
    }
    let mut maps = PoseMapPair::empty(h, w);
    let mut depth_front = vec![f32::INFINITY; h * w];
    let mut depth_back = vec![f32::INFINITY; h * w];
    let ext = bbox.extent();

    for (i, (canon, posed)) in template.vertices().iter().zip(posed_vertices).enumerate() {
        let u = (canon[0] - bbox.min[0]) / ext[0];
        let v = (bbox.max[1] - canon[1]) / ext[1];
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            continue;
        }
        let col = ((u * w as f32) as usize).min(w - 1);
        let row = ((v * h as f32) as usize).min(h - 1);
        let front = template.faces_front(i);
        let (img, mask, depth_buf, depth) = if front {
            (&mut maps.front, &mut maps.mask_front, &mut depth_front, bbox.max[2] - canon[2])
        } else {
            (&mut maps.back, &mut maps.mask_back, &mut depth_back, canon[2] - bbox.min[2])
        };
        let k = row * w + col;
        if depth < depth_buf[k] {
            depth_buf[k] = depth;
            mask.set(row, col, true);
            img.pixel_mut(row, col).copy_from_slice(&bbox.normalize(*posed));
        }
    }
    Ok(maps)
}
