//! Finite-difference gradient checking.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Absolute-agreement guard for op-level checks.
///
/// Central differences carry float noise of roughly |f|·1e-16/(2h); when
/// analytic and numeric gradients differ by less than this they agree to the
/// oracle's resolution, so the coordinate scores 0 instead of noise/1e-8
/// (which would spuriously fail exactly-zero gradients such as sum∘softmax).
pub const FD_ATOL_OP: f64 = 1e-9;

/// Absolute-agreement guard for whole-model checks, where the loss passes
/// through thousands of accumulations and the noise floor is higher.
pub const FD_ATOL_MODEL: f64 = 1e-7;

/// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8),
/// with differences below `atol` scored as exact agreement.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= atol {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-8)
            }
        })
        .fold(0.0, f64::max)
}

/// Checks the tape gradient of a scalar-valued tensor function against
/// central finite differences, returning the max relative error.
///
/// `f` must be deterministic: it is re-evaluated 2·numel + 1 times, so any
/// internal randomness (dropout) has to be replayed from a cloned or derived
/// rng inside the closure. A mismatch between two evaluations at the same
/// point is reported as an error.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::Precondition(format!("finite_diff_check h must be > 0, got {h}")));
    }

    let mut tape = Tape::new();
    let xid = tape.leaf(x, true);
    let out = f(&mut tape, xid)?;
    let f0 = tape.scalar_value(out)?;
    tape.backward(out)?;
    let analytic: Vec<f64> =
        tape.grad(xid).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(point, false);
        let out = f(&mut tape, id)?;
        tape.scalar_value(out)
    };

    if eval(x)? != f0 {
        return Err(Error::Precondition(
            "finite_diff_check requires a deterministic function (freeze dropout masks)".into(),
        ));
    }

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    Ok(max_rel_error(&analytic, &numeric, FD_ATOL_OP))
}

/// Finite-difference check over every trainable parameter that `build`
/// records on its tape.
///
/// `build` reconstructs the full forward pass from current parameter values
/// and returns the scalar loss; `nudge(name, coord, delta)` adds `delta` to
/// one coordinate of the named parameter in the underlying model. Returns
/// (name, max relative error) per trainable parameter, in name order.
pub fn finite_diff_check_params(
    build: &mut dyn FnMut(&mut Tape) -> Result<TensorId>,
    nudge: &mut dyn FnMut(&str, usize, f64),
    h: f64,
    atol: f64,
) -> Result<Vec<(String, f64)>> {
    if h <= 0.0 {
        return Err(Error::Precondition(format!("finite_diff_check_params h must be > 0, got {h}")));
    }

    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    let f0 = tape.scalar_value(out)?;
    tape.backward(out)?;
    let targets: Vec<(String, usize, Vec<f64>)> = tape
        .params()
        .filter(|(_, id)| tape.requires_grad(*id))
        .map(|(name, id)| {
            let numel = tape.value(id).len();
            let analytic = tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
            (name.to_string(), numel, analytic)
        })
        .collect();

    let eval = |build: &mut dyn FnMut(&mut Tape) -> Result<TensorId>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape)?;
        tape.scalar_value(out)
    };

    if eval(build)? != f0 {
        return Err(Error::Precondition(
            "finite_diff_check_params requires a deterministic forward (freeze dropout masks)".into(),
        ));
    }

    let mut report = Vec::with_capacity(targets.len());
    for (name, numel, analytic) in targets {
        let mut numeric = vec![0.0; numel];
        for i in 0..numel {
            nudge(&name, i, h);
            let fp = eval(build)?;
            nudge(&name, i, -2.0 * h);
            let fm = eval(build)?;
            nudge(&name, i, h);
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        report.push((name, max_rel_error(&analytic, &numeric, atol)));
    }
    Ok(report)
}
