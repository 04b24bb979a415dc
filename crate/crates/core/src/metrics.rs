//! Scale-invariant separation metrics and evaluation reports.

use std::fmt::Write as _;

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Upper clamp for all ratio metrics, hit when the residual energy falls
/// below `CAP_RATIO` times the signal energy.
pub const CAP_DB: f64 = 100.0;
const CAP_RATIO: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return shape_err(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return arg_err("empty signal");
    }
    Ok(())
}

fn ratio_db(signal: f64, residual: f64) -> f64 {
    if residual < CAP_RATIO * signal {
        CAP_DB
    } else {
        10.0 * (signal / residual).log10()
    }
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let r = dot(reference, reference);
    if r == 0.0 {
        return arg_err("si_sdr: reference has zero energy");
    }
    let alpha = dot(est, reference) / r;
    let residual: f64 = est.iter().zip(reference).map(|(e, s)| (alpha * s - e).powi(2)).sum();
    Ok(ratio_db(alpha * alpha * r, residual))
}

/// Scale-invariant signal-to-interference ratio in dB. The target
/// component is projected out first and the interference component is
/// then taken from what remains.
pub fn si_sir(est: &[f64], speech: &[f64], background: &[f64]) -> Result<f64> {
    check_pair(est, speech)?;
    check_pair(est, background)?;
    let (ss, vv) = (dot(speech, speech), dot(background, background));
    if ss == 0.0 || vv == 0.0 {
        return arg_err("si_sir: references must have nonzero energy");
    }
    let a = dot(est, speech) / ss;
    let rest: Vec<f64> = est.iter().zip(speech).map(|(e, s)| e - a * s).collect();
    let b = dot(&rest, background) / vv;
    Ok(ratio_db(a * a * ss, b * b * vv))
}

/// `10 log10(‖s‖² / ‖v‖²)`.
pub fn snr_db(s: &[f64], v: &[f64]) -> Result<f64> {
    let (es, ev) = (dot(s, s), dot(v, v));
    if es == 0.0 || ev == 0.0 {
        return arg_err("snr_db: zero-energy signal");
    }
    Ok(10.0 * (es / ev).log10())
}

impl Tape {
    /// Differentiable SI-SDR of a 1-D estimate against a fixed reference.
    /// At the cap the gradient is zero.
    pub fn si_sdr(&mut self, est: Var, reference: &[f64]) -> Result<Var> {
        let e = self.value(est).data();
        check_pair(e, reference)?;
        let r = dot(reference, reference);
        if r == 0.0 {
            return arg_err("si_sdr: reference has zero energy");
        }
        let p = dot(e, reference);
        let alpha = p / r;
        let d: Vec<f64> = e.iter().zip(reference).map(|(e, s)| e - alpha * s).collect();
        let dd = dot(&d, &d);
        let capped = dd < CAP_RATIO * alpha * alpha * r;
        let value = ratio_db(alpha * alpha * r, dd);
        let reference = reference.to_vec();
        Ok(self.push(Tensor::scalar(value), &[est], move || {
            move |ctx| {
                if capped || p == 0.0 {
                    return vec![Some(vec![0.0; d.len()])];
                }
                let c = 20.0 / std::f64::consts::LN_10 * ctx.grad[0];
                let g = reference.iter().zip(&d).map(|(s, di)| c * (s / p - di / dd)).collect();
                vec![Some(g)]
            }
        }))
    }
}

/// Per-item metric table with aggregate statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<String>,
    pub items: Vec<(String, Vec<f64>)>,
}

impl EvalReport {
    pub fn new(metrics: &[&str]) -> Self {
        Self {
            metrics: metrics.iter().map(|m| m.to_string()).collect(),
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.metrics.len() {
            return shape_err(format!(
                "report row has {} values for {} metrics",
                values.len(),
                self.metrics.len()
            ));
        }
        self.items.push((id.into(), values));
        Ok(())
    }

    /// Mean and population standard deviation of each metric.
    pub fn summary(&self) -> Vec<(f64, f64)> {
        let n = self.items.len() as f64;
        (0..self.metrics.len())
            .map(|j| {
                if self.items.is_empty() {
                    return (f64::NAN, f64::NAN);
                }
                let mean = self.items.iter().map(|(_, v)| v[j]).sum::<f64>() / n;
                let var = self.items.iter().map(|(_, v)| (v[j] - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// One row per item followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", self.metrics.join(","));
        for (id, vals) in &self.items {
            let cols: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{id},{}", cols.join(","));
        }
        let summary = self.summary();
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let cols: Vec<String> = summary
                .iter()
                .map(|&(m, s)| format!("{:.6}", if pick == 0 { m } else { s }))
                .collect();
            let _ = writeln!(out, "{label},{}", cols.join(","));
        }
        out
    }

    /// Aggregate table with one `mean (± std)` cell per metric.
    pub fn to_table(&self) -> String {
        let cells: Vec<String> = self
            .summary()
            .iter()
            .map(|(m, s)| format!("{m:.2} (± {s:.2})"))
            .collect();
        let n = format!("{}", self.items.len());
        let mut out = String::new();
        let head: Vec<&str> = std::iter::once("items")
            .chain(self.metrics.iter().map(String::as_str))
            .collect();
        let body: Vec<&str> = std::iter::once(n.as_str())
            .chain(cells.iter().map(String::as_str))
            .collect();
        let widths: Vec<usize> = head
            .iter()
            .zip(&body)
            .map(|(h, c)| h.chars().count().max(c.chars().count()))
            .collect();
        let fmt = |vals: Vec<&str>| {
            vals.iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let h = fmt(head);
        let _ = writeln!(out, "{h}");
        let _ = writeln!(out, "{}", "-".repeat(h.chars().count()));
        let _ = writeln!(out, "{}", fmt(body));
        out
    }
}
