use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by a training-mode batch norm. The caller folds
/// them into the running buffers with [`BatchStats::update_running`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, m) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

impl Tape {
    /// Per-channel batch normalization of a `[C, ...]` tensor.
    ///
    /// With `running: None` the batch statistics of `x` are used (training
    /// mode) and returned; otherwise `(mean, var)` are used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs.iter().product::<usize>() == 0 {
            return shape_err(format!("batch_norm on empty input {xs:?}"));
        }
        let c = xs[0];
        let n = xs[1..].iter().product::<usize>();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batch_norm affine params must be [{c}]"));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("batch_norm running stats length");
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let mut unbiased = vec![0.0; c];
                for ch in 0..c {
                    let s = &xd[ch * n..(ch + 1) * n];
                    let m = s.iter().sum::<f64>() / n as f64;
                    let ss: f64 = s.iter().map(|v| (v - m) * (v - m)).sum();
                    mean[ch] = m;
                    var[ch] = ss / n as f64;
                    unbiased[ch] = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for i in ch * n..(ch + 1) * n {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + b[ch];
            }
        }
        let training = stats.is_some();
        let t = Tensor::new(xs, out)?;
        let v = self.push(t, &[x, gamma, beta], move || {
            move |ctx| {
                let gy = ctx.grad;
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * n..(ch + 1) * n;
                    let sum_g: f64 = gy[r.clone()].iter().sum();
                    let sum_gh: f64 = gy[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                    gg[ch] = sum_gh;
                    gb[ch] = sum_g;
                    let k = g[ch] * inv_std[ch];
                    if training {
                        let (mg, mgh) = (sum_g / n as f64, sum_gh / n as f64);
                        for i in r {
                            gx[i] = k * (gy[i] - mg - xhat[i] * mgh);
                        }
                    } else {
                        for i in r {
                            gx[i] = k * gy[i];
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }
        });
        Ok((v, stats))
    }
}
