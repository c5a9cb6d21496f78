//! Central finite-difference checks of analytic gradients.
//!
//! Relative error is `|a − n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
//! round-off on near-zero gradients from reading as a relative failure.

mod ops;
mod pipeline;

pub use ops::op_suite;
pub use pipeline::{end_to_end_suite, module_suite, tiny_config, Fixture};

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{GroupMask, ParamStore, Session};

pub const FD_STEP: f64 = 1e-6;
/// Fallback step for entries whose central difference straddles a kink
/// (ReLU family) at `FD_STEP`.
pub const KINK_STEP: f64 = 1e-8;
pub const REL_FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric)).max(REL_FLOOR);
    math::abs(analytic - numeric) / denom
}

/// One row of a gradient-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Number of scalar entries compared.
    pub count: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// entry of every input. Returns `(max relative error, entries checked)`.
pub fn check_leaves<F>(inputs: &[Tensor], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").to_vec();
        for (j, a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Like [`check_leaves`], but `f` runs inside a [`Session`] over `params`.
/// Inputs are checked, and so is every parameter in a group of `mask`.
/// Returns the maximum relative error per checked parameter name (inputs
/// appear as `input.{i}`) in parameter order.
/// Relative error of `analytic` against a central difference. An entry that
/// misses the op tolerance at `FD_STEP` is re-measured at `KINK_STEP` and the
/// smaller error kept.
fn probe(analytic: f64, mut diff: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let err = rel_err(analytic, diff(FD_STEP)?);
    if err <= OP_TOLERANCE {
        return Ok(err);
    }
    Ok(err.min(rel_err(analytic, diff(KINK_STEP)?)))
}

pub fn check_session<F>(params: &ParamStore, mask: GroupMask, inputs: &[Tensor], f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let run = |store: &ParamStore, ins: &[Tensor], grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> {
        let mut s = Session::new(store, if grad { mask } else { GroupMask::NONE });
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| if grad { s.tape.leaf(&t.clone().with_grad()) } else { s.tape.leaf(t) })
            .collect();
        let out = f(&mut s, &vars)?;
        let value = s.tape.scalar(out);
        if !grad {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let grads = s.tape.backward(out)?;
        let pg = s.param_grads(&grads).grads;
        let ig = vars.iter().map(|v| grads.get(*v).map(|g| g.to_vec())).collect();
        Ok((value, pg, ig))
    };
    let (_, pgrads, igrads) = run(params, inputs, true)?;

    let mut report = Vec::new();
    let mut work = inputs.to_vec();
    for (i, g) in igrads.iter().enumerate() {
        let g = g.clone().unwrap_or_else(|| alloc::vec![0.0; inputs[i].len()]);
        let mut worst = 0.0f64;
        for (j, a) in g.iter().enumerate() {
            let orig = work[i].data()[j];
            let err = probe(*a, |h| {
                work[i].data_mut()[j] = orig + h;
                let plus = run(params, &work, false)?.0;
                work[i].data_mut()[j] = orig - h;
                let minus = run(params, &work, false)?.0;
                work[i].data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            })?;
            worst = worst.max(err);
        }
        report.push((alloc::format!("input.{i}"), worst));
    }

    let mut store = params.clone();
    let ids: Vec<_> = params.ids().collect();
    for (pos, id) in ids.into_iter().enumerate() {
        let p = params.get(id);
        if !mask.contains(p.group) {
            continue;
        }
        let g = pgrads[pos].clone().unwrap_or_else(|| alloc::vec![0.0; p.tensor.len()]);
        let mut worst = 0.0f64;
        for (j, a) in g.iter().enumerate() {
            let orig = store.tensor(id).data()[j];
            let err = probe(*a, |h| {
                store.tensor_mut(id).data_mut()[j] = orig + h;
                let plus = run(&store, inputs, false)?.0;
                store.tensor_mut(id).data_mut()[j] = orig - h;
                let minus = run(&store, inputs, false)?.0;
                store.tensor_mut(id).data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            })?;
            worst = worst.max(err);
        }
        report.push((p.name.clone(), worst));
    }
    Ok(report)
}

/// Largest error in a [`check_session`] report.
pub fn worst(report: &[(String, f64)]) -> f64 {
    report.iter().map(|r| r.1).fold(0.0, f64::max)
}
