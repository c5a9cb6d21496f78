use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sampling taps for one output cell of a bilinear warp: (grid index, weight).
pub(crate) type WarpTaps = Option<[(usize, f64); 4]>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatVec { w: Var, x: Var, m: usize, k: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    ScaleBy { s: Var, x: Var },
    Tanh(Var),
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Abs(Var),
    LnClamped { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanLast { x: Var, n: usize },
    AddBias { x: Var, b: Var, outer: usize, n: usize, inner: usize },
    BroadcastRows { x: Var, rows: usize },
    Select { x: Var, idx: usize },
    Row { x: Var, row: usize, n: usize },
    Conv2d(ConvGeom),
    Warp { x: Var, taps: Vec<WarpTaps>, channels: usize, grid: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize },
    AvgPool { x: Var, c: usize, h: usize, w: usize, f: usize },
    SoftmaxCe { logits: Var, target: usize, probs: Vec<f64> },
    SmoothL1(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    x: Var,
    k: Var,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so index order is a topological
/// order and the backward sweep simply walks the indices in reverse.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.add_grad(g);
        }
    }
}

fn unary_shape(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid tensors")
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::dims("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh non-differentiable constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- linear algebra ----

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `[m×k] · [k] → [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::dims("matvec", sw, sx));
        }
        let (m, k) = (sw[0], sw[1]);
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = (0..m)
            .map(|i| wv[i * k..(i + 1) * k].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(vec![m], out, Op::MatVec { w, x, m, k }, rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        self.push(unary_shape(self.shape(x)), out, op, rg)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::dims("scale_by", self.shape(s), &[1]));
        }
        let sv = self.nodes[s.0].value[0];
        let rg = self.rg(s) || self.rg(x);
        let out = self.nodes[x.0].value.iter().map(|v| sv * v).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { s, x }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, math::abs, Op::Abs(x))
    }

    /// Natural log of `x` clamped into `[lo, hi]`; the gradient vanishes where clamping is active.
    pub fn ln_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| math::ln(v.clamp(lo, hi)), Op::LnClamped { x, lo, hi })
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                let a = math::abs(v);
                if a < 1.0 {
                    0.5 * v * v
                } else {
                    a - 0.5
                }
            },
            Op::SmoothL1(x),
        )
    }

    // ---- reductions and normalization ----

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", "axis out of range"));
        }
        let (outer, n, inner) = Self::axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mx = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = math::exp(xv[at(j)] - mx);
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// `-log softmax(logits)[target]` for a 1-D logit vector; returns a `[1]` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 1 || target >= shape[0] {
            return Err(Error::invalid("softmax_cross_entropy", "target out of range or logits not 1-D"));
        }
        let lv = &self.nodes[logits.0].value;
        let mx = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = lv.iter().map(|v| math::exp(v - mx)).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let loss = -(lv[target] - mx - math::ln(z));
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCe { logits, target, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over the last axis: `[.., n] → [..]` (a 1-D input reduces to `[1]`).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = self.nodes[x.0]
            .value
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(x);
        self.push(out_shape, out, Op::MeanLast { x, n }, rg)
    }

    /// Adds the 1-D `b` along `axis` of `x`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bs = self.shape(b);
        if axis >= shape.len() || bs.len() != 1 || bs[0] != shape[axis] {
            return Err(Error::dims("add_bias", &shape, bs));
        }
        let (outer, n, inner) = Self::axis_split(&shape, axis);
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(shape, out, Op::AddBias { x, b, outer, n, inner }, rg))
    }

    /// Repeats a 1-D `[n]` tensor into `[rows×n]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || rows == 0 {
            return Err(Error::dims("broadcast_rows", s, &[rows]));
        }
        let n = s[0];
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, n], out, Op::BroadcastRows { x, rows }, rg))
    }

    /// Picks element `idx` of the flattened tensor as a `[1]` tensor.
    pub fn select(&mut self, x: Var, idx: usize) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if idx >= n {
            return Err(Error::dims("select", &[n], &[idx]));
        }
        let v = self.nodes[x.0].value[idx];
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![v], Op::Select { x, idx }, rg))
    }

    /// Row `row` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::dims("row", s, &[row]));
        }
        let n = s[1];
        let v = self.nodes[x.0].value[row * n..(row + 1) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![n], v, Op::Row { x, row, n }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::dims("reshape", self.shape(x), shape));
        }
        let v = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.shape(*p).to_vec(),
            None => return Err(Error::Empty("concat")),
        };
        if axis >= first.len() {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(Error::dims("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Self::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.shape(*p).to_vec(),
            None => return Err(Error::Empty("stack")),
        };
        let mut out = Vec::with_capacity(parts.len() * numel(&first));
        for p in parts {
            if self.shape(*p) != first.as_slice() {
                return Err(Error::dims("stack", &first, self.shape(*p)));
            }
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer: 1,
                inner: 1,
            },
            rg,
        ))
    }

    // ---- spatial ----

    /// Cross-correlation of `[C×H×W]` with `[O×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::dims("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::dims("conv2d", &sx, &sk));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::invalid("conv2d", "non-integral output size"));
        }
        let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        let g = ConvGeom {
            x,
            k,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = vec![0.0; o * oh * ow];
        conv_forward(&g, &self.nodes[x.0].value, &self.nodes[k.0].value, &mut out);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(vec![o, oh, ow], out, Op::Conv2d(g), rg))
    }

    pub(crate) fn warp_with_taps(&mut self, x: Var, taps: Vec<WarpTaps>, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || taps.len() != out_h * out_w {
            return Err(Error::dims("bilinear_warp", &s, &[out_h, out_w]));
        }
        let (channels, grid) = (s[0], s[1] * s[2]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; channels * out_h * out_w];
        for ch in 0..channels {
            let src = &xv[ch * grid..(ch + 1) * grid];
            let dst = &mut out[ch * taps.len()..(ch + 1) * taps.len()];
            for (d, t) in dst.iter_mut().zip(&taps) {
                if let Some(t) = t {
                    *d = t.iter().map(|(i, wgt)| src[*i] * wgt).sum();
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![channels, out_h, out_w],
            out,
            Op::Warp {
                x,
                taps,
                channels,
                grid,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C×H×W]`.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("upsample_nearest", "expected C×H×W"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample { x, c, h, w }, rg))
    }

    /// Average pooling of `[C×H×W]` over non-overlapping `f×f` windows.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || f == 0 || s[1] % f != 0 || s[2] % f != 0 {
            return Err(Error::invalid("avg_pool", "spatial size must be divisible by the factor"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if f == 1 {
            return self.reshape(x, &s);
        }
        let (oh, ow) = (h / f, w / f);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (f * f) as f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / f) * ow + xx / f] += xv[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool { x, c, h, w, f }, rg))
    }

    // ---- backward ----

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every differentiable leaf receives a gradient (zeros when disconnected).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &self.nodes[out].value;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let av = &self.nodes[a.0].value;
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatVec { w, x, m, k } => {
                let (m, k) = (*m, *k);
                let xv = &self.nodes[x.0].value;
                if let Some(gw) = self.slot(grads, *w) {
                    for i in 0..m {
                        for (d, xj) in gw[i * k..(i + 1) * k].iter_mut().zip(xv) {
                            *d += g[i] * xj;
                        }
                    }
                }
                let wv = &self.nodes[w.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for (d, wij) in gx.iter_mut().zip(&wv[i * k..(i + 1) * k]) {
                            *d += g[i] * wij;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                let av = &self.nodes[a.0].value;
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s);
                }
            }
            Op::ScaleBy { s, x } => {
                let xv = &self.nodes[x.0].value;
                let sv = self.nodes[s.0].value[0];
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += sv * v);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), t) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if *v > 0.0 { *s } else { slope * s };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), t) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * t * (1.0 - t);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += s;
                        } else if *v < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            Op::LnClamped { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > *lo && *v < *hi {
                            *d += s / v;
                        }
                    }
                }
            }
            Op::SmoothL1(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * v.clamp(-1.0, 1.0);
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, target, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let t = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - t);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let mut offset = 0;
                let total: usize = y.len() / outer;
                for p in parts {
                    let len = self.nodes[p.0].value.len() / outer;
                    if let Some(gp) = self.slot(grads, *p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            gp[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
                debug_assert!(*inner >= 1);
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanLast { x, n } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (chunk, s) in gx.chunks_mut(*n).zip(g) {
                        let v = s / *n as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::AddBias { x, b, outer, n, inner } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for o in 0..*outer {
                        for (j, d) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BroadcastRows { x, rows } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    for r in 0..*rows {
                        gx.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Select { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx[*idx] += g[0];
                }
            }
            Op::Row { x, row, n } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx[row * n..(row + 1) * n].iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Conv2d(geom) => {
                let xv = &self.nodes[geom.x.0].value;
                let kv = &self.nodes[geom.k.0].value;
                if let Some(gk) = self.slot(grads, geom.k) {
                    conv_backward_kernel(geom, xv, g, gk);
                }
                if let Some(gx) = self.slot(grads, geom.x) {
                    conv_backward_input(geom, kv, g, gx);
                }
            }
            Op::Warp {
                x,
                taps,
                channels,
                grid,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cells = taps.len();
                    for ch in 0..*channels {
                        let src = &mut gx[ch * grid..(ch + 1) * grid];
                        for (t, s) in taps.iter().zip(&g[ch * cells..(ch + 1) * cells]) {
                            if let Some(t) = t {
                                for (i, w) in t {
                                    src[*i] += w * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ch * h + yy / 2) * w + xx / 2] += g[(ch * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, c, h, w, f } => {
                let (c, h, w, f) = (*c, *h, *w, *f);
                let (oh, ow) = (h / f, w / f);
                let norm = 1.0 / (f * f) as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                gx[(ch * h + yy) * w + xx] += g[(ch * oh + yy / f) * ow + xx / f] * norm;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (h, w, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for o in 0..g.o {
        let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.c {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kval = k[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                    if kval == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += kval * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &ConvGeom, x: &[f64], grad: &[f64], gk: &mut [f64]) {
    let (h, w, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for o in 0..g.o {
        let gout = &grad[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.c {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        for (ox, gv) in grow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += gv * srow[ix as usize];
                            }
                        }
                    }
                    gk[((o * g.c + c) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, k: &[f64], grad: &[f64], gx: &mut [f64]) {
    let (h, w, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for o in 0..g.o {
        let gout = &grad[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.c {
            let dst = &mut gx[c * h * w..(c + 1) * h * w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kval = k[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                    if kval == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        for (ox, gv) in grow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += kval * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
