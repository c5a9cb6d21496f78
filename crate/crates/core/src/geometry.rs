use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]` with `(x, y)` the top-left corner, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid("box", "width and height must be positive and finite"));
        }
        Ok(())
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x && self.y <= other.y && self.x2() >= other.x2() && self.y2() >= other.y2()
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x: self.x * sx,
            y: self.y * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    let x = a.x.min(b.x);
    let y = a.y.min(b.y);
    BBox {
        x,
        y,
        w: extent(x, a.x2().max(b.x2())),
        h: extent(y, a.y2().max(b.y2())),
    }
}

/// `end - start`, rounded up so that `start + extent >= end` holds in floating point.
fn extent(start: f64, end: f64) -> f64 {
    let mut w = end - start;
    while start + w < end {
        w = w.next_up();
    }
    w
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x.max(b.x);
    let h = a.y2().min(b.y2()) - a.y.max(b.y);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
