//! Synthetic scene descriptions and their procedurally rendered images.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::Tensor;

/// Category index 0 is reserved for background / "no relation".
pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    /// 1-based category index.
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneRelation {
    pub subj: usize,
    /// 1-based predicate index.
    pub predicate: usize,
    pub obj: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<SceneRelation>,
}

/// Names for object categories and predicates (background excluded).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSpace {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
}

impl LabelSpace {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// Name of a 1-based class index.
    pub fn class_name(&self, class: usize) -> Option<&str> {
        class.checked_sub(1).and_then(|i| self.classes.get(i)).map(String::as_str)
    }

    pub fn predicate_name(&self, predicate: usize) -> Option<&str> {
        predicate.checked_sub(1).and_then(|i| self.predicates.get(i)).map(String::as_str)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name).map(|i| i + 1)
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|c| c == name).map(|i| i + 1)
    }
}

impl Scene {
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene", "image size must be positive"));
        }
        for o in &self.objects {
            o.bbox.validate()?;
            if o.class == BACKGROUND || o.class > labels.num_classes() {
                return Err(Error::invalid("scene", alloc::format!("class {} out of range", o.class)));
            }
        }
        for r in &self.relations {
            let n = self.objects.len();
            if r.subj >= n || r.obj >= n || r.subj == r.obj {
                return Err(Error::invalid("scene", "relation endpoints must be distinct object indices"));
            }
            if r.predicate == BACKGROUND || r.predicate > labels.num_predicates() {
                return Err(Error::invalid("scene", alloc::format!("predicate {} out of range", r.predicate)));
            }
        }
        Ok(())
    }
}

const BACKGROUND_RGB: [f64; 3] = [-0.6, -0.6, -0.6];

/// Flat colour for a category, in `[-1, 1]`.
pub fn class_color(class: usize) -> [f64; 3] {
    // Evenly spaced hues on a small palette; deterministic in the class id.
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, -0.8, -0.8],
        [-0.8, 0.9, -0.8],
        [-0.8, -0.8, 0.9],
        [0.9, 0.9, -0.8],
        [-0.8, 0.9, 0.9],
        [0.9, -0.8, 0.9],
        [0.9, 0.2, -0.5],
        [0.2, -0.4, 0.9],
    ];
    let base = PALETTE[(class.max(1) - 1) % PALETTE.len()];
    let shade = 1.0 - 0.15 * (((class.max(1) - 1) / PALETTE.len()) as f64);
    [base[0] * shade, base[1] * shade, base[2] * shade]
}

/// Renders flat-coloured rectangles (in object order) over a grey background as a `3×H×W` image.
pub fn render_scene(scene: &Scene) -> Tensor {
    let (w, h) = (scene.width, scene.height);
    let mut data = Vec::with_capacity(3 * w * h);
    for c in BACKGROUND_RGB {
        data.extend(core::iter::repeat_n(c, w * h));
    }
    for o in &scene.objects {
        let col = class_color(o.class);
        for py in 0..h {
            let cy = py as f64 + 0.5;
            if cy < o.bbox.y || cy >= o.bbox.y2() {
                continue;
            }
            for px in 0..w {
                let cx = px as f64 + 0.5;
                if cx >= o.bbox.x && cx < o.bbox.x2() {
                    for (ch, v) in col.iter().enumerate() {
                        data[(ch * h + py) * w + px] = *v;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("image shape")
}
