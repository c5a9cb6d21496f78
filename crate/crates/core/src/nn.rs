//! Small parameterized building blocks shared by the pipeline stages.

use alloc::format;

use crate::error::Result;
use crate::numcore::Var;
use crate::params::{Group, Init, ParamId, ParamStore, Session};

/// `y = W·x + b` on 1-D inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let w = store.register(&format!("{name}.w"), group, &[out_dim, in_dim], Init::FanIn(in_dim), seed);
        let b = store.register(&format!("{name}.b"), group, &[out_dim], Init::Zeros, seed);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.tape.matvec(w, x)?;
        s.tape.add(y, b)
    }
}

/// 2-D convolution with a per-output-channel bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let fan_in = in_ch * size * size;
        let k = store.register(&format!("{name}.k"), group, &[out_ch, in_ch, size, size], Init::FanIn(fan_in), seed);
        let b = store.register(&format!("{name}.b"), group, &[out_ch], Init::Zeros, seed);
        Self {
            k,
            b,
            stride,
            pad: size / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (k, b) = (s.p(self.k), s.p(self.b));
        let y = s.tape.conv2d(x, k, self.stride, self.pad)?;
        s.tape.add_bias(y, b, 0)
    }
}

/// Standard GRU cell:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r∘h) + b_h)`, `h' = (1−z)∘h + z∘ĥ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, input: usize, hidden: usize, seed: u64) -> Self {
        let fan = Init::FanIn(hidden);
        let mut reg = |suffix: &str, shape: &[usize], init: Init| store.register(&format!("{name}.{suffix}"), group, shape, init, seed);
        Self {
            input,
            hidden,
            wz: reg("w_z", &[hidden, input], fan.clone()),
            uz: reg("u_z", &[hidden, hidden], fan.clone()),
            bz: reg("b_z", &[hidden], Init::Zeros),
            wr: reg("w_r", &[hidden, input], fan.clone()),
            ur: reg("u_r", &[hidden, hidden], fan.clone()),
            br: reg("b_r", &[hidden], Init::Zeros),
            wh: reg("w_h", &[hidden, input], fan.clone()),
            uh: reg("u_h", &[hidden, hidden], fan),
            bh: reg("b_h", &[hidden], Init::Zeros),
        }
    }

    fn gate(s: &mut Session, w: ParamId, u: ParamId, b: ParamId, x: Var, h: Var) -> Result<Var> {
        let (w, u, b) = (s.p(w), s.p(u), s.p(b));
        let wx = s.tape.matvec(w, x)?;
        let uh = s.tape.matvec(u, h)?;
        let sum = s.tape.add(wx, uh)?;
        s.tape.add(sum, b)
    }

    pub fn step(&self, s: &mut Session, x: Var, h: Var) -> Result<Var> {
        let z = Self::gate(s, self.wz, self.uz, self.bz, x, h)?;
        let z = s.tape.sigmoid(z);
        let r = Self::gate(s, self.wr, self.ur, self.br, x, h)?;
        let r = s.tape.sigmoid(r);
        let rh = s.tape.mul(r, h)?;
        let cand = Self::gate(s, self.wh, self.uh, self.bh, x, rh)?;
        let cand = s.tape.tanh(cand);
        let delta = s.tape.sub(cand, h)?;
        let upd = s.tape.mul(z, delta)?;
        s.tape.add(h, upd)
    }
}
