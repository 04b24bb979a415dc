//! Finite-difference gradient checking.

// element loops probe several buffers at the same index
#![allow(clippy::needless_range_loop)]

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, Result};

/// Relative error used by the checks: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return arg_err(format!("checked function must return a scalar, got {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

/// Compares the tape gradient of scalar `f` at `x` with central
/// differences of step `h`, returning the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    scalar(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let xv = tape.constant(p.clone());
        let y = f(&mut tape, xv)?;
        scalar(&tape, y)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Result of a parameter-space gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Elements whose ±h probe moved some ReLU input across zero and were
    /// re-probed with a step of `h / 100`. A step that crosses a kink leaves
    /// the linear piece, so its central difference is not a derivative.
    pub refined: usize,
    /// Elements where even the smaller step crossed a kink; not compared.
    pub skipped_kinks: usize,
}

/// Checks `d f / d θ` for every trainable element of `store` (or only the
/// names accepted by `filter`). Probes that change the tape's ReLU sign
/// pattern are retried with a smaller step (see [`ParamCheck`]).
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, filter: impl Fn(&str) -> bool) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    scalar(&tape, y)?;
    tape.backward(y)?;
    let grads = tape.param_grads();
    let base_kinks = tape.kink_signature();

    let mut probe = store.clone();
    let names: Vec<String> = store
        .iter()
        .filter(|(n, t)| t.requires_grad() && filter(n))
        .map(|(n, _)| n.clone())
        .collect();
    let mut out = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        refined: 0,
        skipped_kinks: 0,
    };
    let probe_eval = |p: &ParamStore| -> Result<(f64, u64)> {
        let mut t = Tape::inference();
        let y = f(&mut t, p)?;
        Ok((scalar(&t, y)?, t.kink_signature()))
    };
    for name in names {
        let n = store.get(&name)?.len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(&name).unwrap_or(&zeros);
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            let mut numeric = None;
            for step in [h, h * 1e-2] {
                probe.get_mut(&name)?.data_mut()[i] = orig + step;
                let (fp, kp) = probe_eval(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig - step;
                let (fm, km) = probe_eval(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig;
                if kp == base_kinks && km == base_kinks {
                    numeric = Some((fp - fm) / (2.0 * step));
                    if step != h {
                        out.refined += 1;
                    }
                    break;
                }
            }
            let Some(numeric) = numeric else {
                out.skipped_kinks += 1;
                continue;
            };
            let e = relative_error(analytic[i], numeric);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst_param = format!("{name}[{i}]");
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
