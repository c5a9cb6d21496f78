use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;

use super::{check_leaves, GradCheck, OP_TOLERANCE};
use crate::error::Result;
use crate::geometry::BBox;
use crate::numcore::{bilinear_warp, Tape, Tensor, Var};
use crate::rng::{rng_for, Rng};

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(lo, hi).expect("bounds");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Reduces `out` to a scalar with fixed pseudo-random weights, so that every
/// output entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = rng_for(seed, "gradcheck.weights", 0);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let wv = tape.constant(&shape, w.into_data())?;
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

type Case = (Vec<Tensor>, alloc::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn run(name: &str, cases: Vec<Case>) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for (inputs, f) in cases {
        let (err, n) = check_leaves(&inputs, |t, v| f(t, v))?;
        worst = worst.max(err);
        count += n;
    }
    Ok(GradCheck {
        name: name.to_string(),
        count,
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
    })
}

macro_rules! case {
    ($inputs:expr, $seed:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let seed = $seed;
        let f: alloc::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>> =
            alloc::boxed::Box::new(move |$tape: &mut Tape, $v: &[Var]| {
                let out: Var = $body;
                weighted_sum($tape, out, seed)
            });
        ($inputs, f)
    }};
}

/// Checks every differentiable primitive over `shapes` random shapes each.
pub fn op_suite(seed: u64, shapes: usize) -> Result<Vec<GradCheck>> {
    let mut rng = rng_for(seed, "gradcheck.ops", 0);
    let mut report = Vec::new();
    let rng = &mut rng;

    macro_rules! suite {
        ($name:expr, |$rng:ident, $i:ident| $make:expr) => {{
            let mut cases = Vec::new();
            for $i in 0..shapes {
                let $rng: &mut Rng = rng;
                cases.push($make);
            }
            report.push(run($name, cases)?);
        }};
    }

    suite!("matmul", |r, i| {
        let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        let ins = vec![random_tensor(r, &[m, k], -1., 1.), random_tensor(r, &[k, n], -1., 1.)];
        case!(ins, i as u64, |t, v| t.matmul(v[0], v[1])?)
    });
    suite!("matvec", |r, i| {
        let (m, k) = (dim(r, 1, 5), dim(r, 1, 5));
        let ins = vec![random_tensor(r, &[m, k], -1., 1.), random_tensor(r, &[k], -1., 1.)];
        case!(ins, i as u64, |t, v| t.matvec(v[0], v[1])?)
    });
    suite!("add", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &s, -1., 1.), random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.add(v[0], v[1])?)
    });
    suite!("sub", |r, i| {
        let s = [dim(r, 1, 6)];
        let ins = vec![random_tensor(r, &s, -1., 1.), random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.sub(v[0], v[1])?)
    });
    suite!("mul", |r, i| {
        let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
        let ins = vec![random_tensor(r, &s, -1., 1.), random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.mul(v[0], v[1])?)
    });
    suite!("affine", |r, i| {
        let s = [dim(r, 1, 6)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.affine(v[0], -1.5, 0.25))
    });
    suite!("scale_by", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &[1], -1., 1.), random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.scale_by(v[0], v[1])?)
    });
    suite!("tanh", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.tanh(v[0]))
    });
    suite!("relu", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.relu(v[0]))
    });
    suite!("leaky_relu", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.leaky_relu(v[0], 0.2))
    });
    suite!("sigmoid", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.sigmoid(v[0]))
    });
    suite!("abs", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.abs(v[0]))
    });
    suite!("ln_clamped", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, 0.05, 1.0)];
        case!(ins, i as u64, |t, v| t.ln_clamped(v[0], 1e-7, 1.0 - 1e-7))
    });
    suite!("smooth_l1", |r, i| {
        let s = [dim(r, 1, 8)];
        let ins = vec![random_tensor(r, &s, -2., 2.)];
        case!(ins, i as u64, |t, v| t.smooth_l1(v[0]))
    });
    suite!("softmax", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
        let axis = dim(r, 0, 2);
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.softmax(v[0], axis)?)
    });
    suite!("softmax_cross_entropy", |r, i| {
        let n = dim(r, 1, 7);
        let target = dim(r, 0, n - 1);
        let ins = vec![random_tensor(r, &[n], -1., 1.)];
        case!(ins, i as u64, |t, v| t.softmax_cross_entropy(v[0], target)?)
    });
    suite!("sum", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.sum(v[0]))
    });
    suite!("mean", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.mean(v[0]))
    });
    suite!("mean_last", |r, i| {
        let s = [dim(r, 1, 4), dim(r, 1, 5)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.mean_last(v[0]))
    });
    suite!("add_bias", |r, i| {
        let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
        let axis = dim(r, 0, 2);
        let ins = vec![random_tensor(r, &s, -1., 1.), random_tensor(r, &[s[axis]], -1., 1.)];
        case!(ins, i as u64, |t, v| t.add_bias(v[0], v[1], axis)?)
    });
    suite!("broadcast_rows", |r, i| {
        let rows = dim(r, 1, 4);
        let s = [dim(r, 1, 5)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.broadcast_rows(v[0], rows)?)
    });
    suite!("select", |r, i| {
        let n = dim(r, 1, 6);
        let idx = dim(r, 0, n - 1);
        let ins = vec![random_tensor(r, &[n], -1., 1.)];
        case!(ins, i as u64, |t, v| t.select(v[0], idx)?)
    });
    suite!("row", |r, i| {
        let (m, n) = (dim(r, 1, 5), dim(r, 1, 4));
        let row = dim(r, 0, m - 1);
        let s = [m, n];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.row(v[0], row)?)
    });
    suite!("reshape", |r, i| {
        let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
        let ins = vec![random_tensor(r, &[a, b], -1., 1.)];
        case!(ins, i as u64, |t, v| t.reshape(v[0], &[b, a])?)
    });
    suite!("concat", |r, i| {
        let axis = dim(r, 0, 1);
        let mut s1 = [dim(r, 1, 3), dim(r, 1, 3)];
        let mut s2 = s1;
        s2[axis] = dim(r, 1, 3);
        s1[axis] = dim(r, 1, 3);
        let ins = vec![random_tensor(r, &s1, -1., 1.), random_tensor(r, &s2, -1., 1.)];
        case!(ins, i as u64, |t, v| t.concat(v, axis)?)
    });
    suite!("stack", |r, i| {
        let s = [dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &s, -1., 1.), random_tensor(r, &s, -1., 1.), random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.stack(v)?)
    });
    suite!("conv2d", |r, i| {
        let (c, o) = (dim(r, 1, 3), dim(r, 1, 3));
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { dim(r, 0, 1) } else { 0 };
        let stride = dim(r, 1, 2);
        // Keep (h + 2·pad − k) divisible by the stride.
        let h = k + stride * dim(r, 1, 3) - 2 * pad;
        let w = k + stride * dim(r, 1, 2) - 2 * pad;
        let ins = vec![random_tensor(r, &[c, h, w], -1., 1.), random_tensor(r, &[o, c, k, k], -1., 1.)];
        case!(ins, i as u64, |t, v| t.conv2d(v[0], v[1], stride, pad)?)
    });
    suite!("bilinear_warp", |r, i| {
        let d = dim(r, 1, 3);
        let (oh, ow) = (dim(r, 4, 10), dim(r, 4, 10));
        let bw = 1.0 + r.random::<f64>() * (ow as f64 - 1.0);
        let bh = 1.0 + r.random::<f64>() * (oh as f64 - 1.0);
        let bx = r.random::<f64>() * (ow as f64 - bw);
        let by = r.random::<f64>() * (oh as f64 - bh);
        let bbox = BBox::new(bx, by, bw, bh).expect("box");
        let ins = vec![random_tensor(r, &[d, 8, 8], -1., 1.)];
        case!(ins, i as u64, |t, v| bilinear_warp(t, v[0], &bbox, oh, ow)?)
    });
    suite!("upsample_nearest", |r, i| {
        let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.upsample_nearest(v[0])?)
    });
    suite!("avg_pool", |r, i| {
        let f = dim(r, 1, 3);
        let s = [dim(r, 1, 3), f * dim(r, 1, 3), f * dim(r, 1, 3)];
        let ins = vec![random_tensor(r, &s, -1., 1.)];
        case!(ins, i as u64, |t, v| t.avg_pool(v[0], f)?)
    });
    suite!("composite_3layer", |r, i| {
        let (a, b, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        let ins = vec![
            random_tensor(r, &[b, a], -1., 1.),
            random_tensor(r, &[c, b], -1., 1.),
            random_tensor(r, &[1, c], -1., 1.),
            random_tensor(r, &[a], -1., 1.),
        ];
        case!(ins, i as u64, |t, v| {
            let h1 = t.matvec(v[0], v[3])?;
            let h1 = t.tanh(h1);
            let h2 = t.matvec(v[1], h1)?;
            let h2 = t.sigmoid(h2);
            t.matvec(v[2], h2)?
        })
    });
    Ok(report)
}
