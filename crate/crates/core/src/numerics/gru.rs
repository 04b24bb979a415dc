//! Fused GRU over a batch of sequences.
//!
//! Gate layout follows the common `(reset, update, candidate)` stacking:
//! `w_ih` is `[3H, I]`, `w_hh` is `[3H, H]`, biases are `[3H]`.
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use super::ops::sigmoid;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::par;

#[derive(Clone, Copy)]
struct Dims {
    len: usize,
    input: usize,
    hidden: usize,
    reverse: bool,
}

impl Dims {
    fn step_index(&self, s: usize) -> usize {
        if self.reverse {
            self.len - 1 - s
        } else {
            s
        }
    }
}

/// Values saved per step for back-propagation.
struct SeqCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
    h_prev: Vec<f64>,
}

fn matvec_acc(out: &mut [f64], w: &[f64], cols: usize, v: &[f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn run_sequence(d: Dims, x: &[f64], w_ih: &[f64], w_hh: &[f64], b_ih: &[f64], b_hh: &[f64]) -> (Vec<f64>, SeqCache) {
    let (l, i_n, h_n) = (d.len, d.input, d.hidden);
    let mut out = vec![0.0; l * h_n];
    let mut cache = SeqCache {
        r: vec![0.0; l * h_n],
        z: vec![0.0; l * h_n],
        n: vec![0.0; l * h_n],
        gh_n: vec![0.0; l * h_n],
        h_prev: vec![0.0; l * h_n],
    };
    let mut h = vec![0.0; h_n];
    let mut gi = vec![0.0; 3 * h_n];
    let mut gh = vec![0.0; 3 * h_n];
    for s in 0..l {
        let t = d.step_index(s);
        gi.copy_from_slice(b_ih);
        matvec_acc(&mut gi, w_ih, i_n, &x[t * i_n..(t + 1) * i_n]);
        gh.copy_from_slice(b_hh);
        matvec_acc(&mut gh, w_hh, h_n, &h);
        let o = t * h_n;
        cache.h_prev[o..o + h_n].copy_from_slice(&h);
        for j in 0..h_n {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[h_n + j] + gh[h_n + j]);
            let n = (gi[2 * h_n + j] + r * gh[2 * h_n + j]).tanh();
            let hn = (1.0 - z) * n + z * h[j];
            cache.r[o + j] = r;
            cache.z[o + j] = z;
            cache.n[o + j] = n;
            cache.gh_n[o + j] = gh[2 * h_n + j];
            h[j] = hn;
        }
        out[o..o + h_n].copy_from_slice(&h);
    }
    (out, cache)
}

struct SeqGrads {
    x: Vec<f64>,
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    b_ih: Vec<f64>,
    b_hh: Vec<f64>,
}

fn backward_sequence(d: Dims, gy: &[f64], x: &[f64], w_ih: &[f64], w_hh: &[f64], c: &SeqCache) -> SeqGrads {
    let (l, i_n, h_n) = (d.len, d.input, d.hidden);
    let mut gr = SeqGrads {
        x: vec![0.0; l * i_n],
        w_ih: vec![0.0; 3 * h_n * i_n],
        w_hh: vec![0.0; 3 * h_n * h_n],
        b_ih: vec![0.0; 3 * h_n],
        b_hh: vec![0.0; 3 * h_n],
    };
    let mut dh_next = vec![0.0; h_n];
    let mut dgi = vec![0.0; 3 * h_n];
    let mut dgh = vec![0.0; 3 * h_n];
    for s in (0..l).rev() {
        let t = d.step_index(s);
        let o = t * h_n;
        let mut dh_prev = vec![0.0; h_n];
        for j in 0..h_n {
            let dh = gy[o + j] + dh_next[j];
            let (r, z, n, ghn, hp) = (c.r[o + j], c.z[o + j], c.n[o + j], c.gh_n[o + j], c.h_prev[o + j]);
            let dz = dh * (hp - n);
            let dn = dh * (1.0 - z);
            dh_prev[j] = dh * z;
            let dan = dn * (1.0 - n * n);
            let dr = dan * ghn;
            let dar = dr * r * (1.0 - r);
            let daz = dz * z * (1.0 - z);
            dgi[j] = dar;
            dgi[h_n + j] = daz;
            dgi[2 * h_n + j] = dan;
            dgh[j] = dar;
            dgh[h_n + j] = daz;
            dgh[2 * h_n + j] = dan * r;
        }
        let xt = &x[t * i_n..(t + 1) * i_n];
        let hp = &c.h_prev[o..o + h_n];
        let gx = &mut gr.x[t * i_n..(t + 1) * i_n];
        for (row, &g) in dgi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &w_ih[row * i_n..(row + 1) * i_n];
            let gw = &mut gr.w_ih[row * i_n..(row + 1) * i_n];
            for k in 0..i_n {
                gx[k] += w[k] * g;
                gw[k] += g * xt[k];
            }
            gr.b_ih[row] += g;
        }
        for (row, &g) in dgh.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &w_hh[row * h_n..(row + 1) * h_n];
            let gw = &mut gr.w_hh[row * h_n..(row + 1) * h_n];
            for k in 0..h_n {
                dh_prev[k] += w[k] * g;
                gw[k] += g * hp[k];
            }
            gr.b_hh[row] += g;
        }
        dh_next = dh_prev;
    }
    gr
}

fn sum_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

impl Tape {
    /// Runs a GRU over `x: [batch, len, input]` with a zero initial state,
    /// returning `[batch, len, hidden]`. With `reverse` the sequence is
    /// consumed from the last position to the first; outputs stay aligned
    /// with their input positions.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let [batch, len, input] = self.value(x).dims3()?;
        let [g3, wi_cols] = self.value(w_ih).dims2()?;
        if g3 % 3 != 0 || wi_cols != input {
            return shape_err(format!(
                "gru w_ih {:?} incompatible with input width {input}",
                self.shape(w_ih)
            ));
        }
        let hidden = g3 / 3;
        if self.shape(w_hh) != [3 * hidden, hidden]
            || self.shape(b_ih) != [3 * hidden]
            || self.shape(b_hh) != [3 * hidden]
        {
            return shape_err(format!("gru parameter shapes inconsistent with hidden size {hidden}"));
        }
        let d = Dims {
            len,
            input,
            hidden,
            reverse,
        };
        let (xd, wi, wh, bi, bh) = (
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b_ih).data(),
            self.value(b_hh).data(),
        );
        let seq_in = len * input;
        let results = par::map_range(batch, |b| {
            run_sequence(d, &xd[b * seq_in..(b + 1) * seq_in], wi, wh, bi, bh)
        });
        let mut out = Vec::with_capacity(batch * len * hidden);
        let mut caches = Vec::with_capacity(batch);
        for (o, c) in results {
            out.extend_from_slice(&o);
            caches.push(c);
        }
        let t = Tensor::new(vec![batch, len, hidden], out)?;
        Ok(self.push(t, &[x, w_ih, w_hh, b_ih, b_hh], move || {
            move |ctx| {
                let (xd, wi, wh) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let seq_out = len * hidden;
                let per_seq = par::map_range(batch, |b| {
                    backward_sequence(
                        d,
                        &ctx.grad[b * seq_out..(b + 1) * seq_out],
                        &xd[b * seq_in..(b + 1) * seq_in],
                        wi,
                        wh,
                        &caches[b],
                    )
                });
                let mut gx = Vec::with_capacity(batch * seq_in);
                let mut gwi = vec![0.0; 3 * hidden * input];
                let mut gwh = vec![0.0; 3 * hidden * hidden];
                let mut gbi = vec![0.0; 3 * hidden];
                let mut gbh = vec![0.0; 3 * hidden];
                for g in &per_seq {
                    gx.extend_from_slice(&g.x);
                    sum_into(&mut gwi, &g.w_ih);
                    sum_into(&mut gwh, &g.w_hh);
                    sum_into(&mut gbi, &g.b_ih);
                    sum_into(&mut gbh, &g.b_hh);
                }
                vec![Some(gx), Some(gwi), Some(gwh), Some(gbi), Some(gbh)]
            }
        }))
    }
}
