//! Dense `f64` tensors and tape-based reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math;

/// Stretches a `[D×gh×gw]` grid into `box` on an `out_h × out_w` canvas.
///
/// Each output cell whose centre lies inside the box samples the grid
/// bilinearly at the centre's box-normalized position (edge-clamped); cells
/// outside the box are zero.
pub fn bilinear_warp(tape: &mut Tape, embedding: Var, bbox: &BBox, out_h: usize, out_w: usize) -> Result<Var> {
    let shape = tape.shape(embedding).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("bilinear_warp", "embedding must be D×gh×gw"));
    }
    let taps = warp_taps(shape[1], shape[2], bbox, out_h, out_w)?;
    tape.warp_with_taps(embedding, taps, out_h, out_w)
}

fn axis_taps(pos: f64, origin: f64, extent: f64, cells: usize) -> [(usize, f64); 2] {
    let u = ((pos - origin) / extent * cells as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
    let lo = math::floor(u) as usize;
    let hi = (lo + 1).min(cells - 1);
    let frac = u - lo as f64;
    [(lo, 1.0 - frac), (hi, frac)]
}

fn warp_taps(gh: usize, gw: usize, bbox: &BBox, out_h: usize, out_w: usize) -> Result<Vec<tape::WarpTaps>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_warp", "output size must be positive"));
    }
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::invalid("bilinear_warp", "zero-area box"));
    }
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x >= out_w as f64 || bbox.y >= out_h as f64 {
        return Err(Error::invalid("bilinear_warp", "box does not intersect the canvas"));
    }
    let mut taps = Vec::with_capacity(out_h * out_w);
    for py in 0..out_h {
        let cy = py as f64 + 0.5;
        for px in 0..out_w {
            let cx = px as f64 + 0.5;
            let inside = cx >= bbox.x && cx < bbox.x2() && cy >= bbox.y && cy < bbox.y2();
            if !inside {
                taps.push(None);
                continue;
            }
            let ty = axis_taps(cy, bbox.y, bbox.h, gh);
            let tx = axis_taps(cx, bbox.x, bbox.w, gw);
            taps.push(Some([
                (ty[0].0 * gw + tx[0].0, ty[0].1 * tx[0].1),
                (ty[0].0 * gw + tx[1].0, ty[0].1 * tx[1].1),
                (ty[1].0 * gw + tx[0].0, ty[1].1 * tx[0].1),
                (ty[1].0 * gw + tx[1].0, ty[1].1 * tx[1].1),
            ]));
        }
    }
    Ok(taps)
}
