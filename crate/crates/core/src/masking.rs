//! Complex masking algebra: element-wise masks, multi-frame/multi-bin
//! filtering and the residual combination used by the refinement stage.

use crate::error::{shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::stft::Spectrogram;

/// Per-bin complex multiplier with `re`, `im` of shape `[T, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMask {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexMask {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        re.dims2()?;
        if re.shape() != im.shape() {
            return shape_err(format!("mask re {:?} vs im {:?}", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    pub fn identity(frames: usize, bins: usize) -> Self {
        Self {
            re: Tensor::full(&[frames, bins], 1.0),
            im: Tensor::zeros(&[frames, bins]),
        }
    }

    /// Splits a packed `[2, T, K]` tensor.
    pub fn from_packed(packed: &Tensor) -> Result<Self> {
        let [c, t, k] = packed.dims3()?;
        if c != 2 {
            return shape_err(format!("packed mask needs 2 channels, got {c}"));
        }
        let n = t * k;
        Self::new(
            Tensor::new(vec![t, k], packed.data()[..n].to_vec())?,
            Tensor::new(vec![t, k], packed.data()[n..].to_vec())?,
        )
    }

    pub fn magnitude_max(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// `Ŝ = M · Y` per bin.
pub fn apply_complex_mask(y: &Spectrogram, m: &ComplexMask) -> Result<Spectrogram> {
    if y.re.shape() != m.re.shape() {
        return shape_err(format!("mask {:?} vs spectrogram {:?}", m.re.shape(), y.re.shape()));
    }
    let (yr, yi, mr, mi) = (y.re.data(), y.im.data(), m.re.data(), m.im.data());
    let re = Tensor::from_fn(y.re.shape(), |i| mr[i] * yr[i] - mi[i] * yi[i]);
    let im = Tensor::from_fn(y.re.shape(), |i| mr[i] * yi[i] + mi[i] * yr[i]);
    Spectrogram::new(re, im, y.frame_hop, y.window_len)
}

/// Support of a multi-frame/multi-bin filter. Frame offsets run over
/// `p in -p1..=p2` and read `Y(m - p, ·)`, so positive `p` looks into the past;
/// bin offsets run over `q in -q1..=q2` and read `Y(·, k - q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FilterSupport {
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
}

impl FilterSupport {
    pub fn taps_t(&self) -> usize {
        self.p1 + self.p2 + 1
    }

    pub fn taps_f(&self) -> usize {
        self.q1 + self.q2 + 1
    }
}

/// `Ŝ(m,k) = Σ_{p=-P1}^{P2} Σ_{q=-Q1}^{Q2} M_{p,q}(m,k) Y(m-p, k-q)` with
/// out-of-range neighbours treated as zero. `coeffs` is
/// `[P1+P2+1, Q1+Q2+1, 2, T, K]`, indexed by `p + P1`, `q + Q1`.
pub fn deep_filter(y: &Spectrogram, coeffs: &Tensor, support: FilterSupport) -> Result<Spectrogram> {
    let (t_n, k_n) = (y.frames(), y.bins());
    let want = [support.taps_t(), support.taps_f(), 2, t_n, k_n];
    if coeffs.shape() != want {
        return shape_err(format!("filter {:?}, expected {want:?}", coeffs.shape()));
    }
    if support.taps_t() > t_n || support.taps_f() > k_n {
        return shape_err(format!(
            "filter support {}x{} exceeds spectrogram {t_n}x{k_n}",
            support.taps_t(),
            support.taps_f()
        ));
    }
    let (yr, yi, c) = (y.re.data(), y.im.data(), coeffs.data());
    let plane = t_n * k_n;
    let mut re = vec![0.0; plane];
    let mut im = vec![0.0; plane];
    for pi in 0..support.taps_t() {
        let p = pi as isize - support.p1 as isize;
        for qi in 0..support.taps_f() {
            let q = qi as isize - support.q1 as isize;
            let base = (pi * support.taps_f() + qi) * 2 * plane;
            let (cr, ci) = (&c[base..base + plane], &c[base + plane..base + 2 * plane]);
            for m in 0..t_n {
                let src_m = m as isize - p;
                if src_m < 0 || src_m >= t_n as isize {
                    continue;
                }
                for k in 0..k_n {
                    let src_k = k as isize - q;
                    if src_k < 0 || src_k >= k_n as isize {
                        continue;
                    }
                    let s = src_m as usize * k_n + src_k as usize;
                    let d = m * k_n + k;
                    re[d] += cr[d] * yr[s] - ci[d] * yi[s];
                    im[d] += cr[d] * yi[s] + ci[d] * yr[s];
                }
            }
        }
    }
    Spectrogram::new(
        Tensor::new(vec![t_n, k_n], re)?,
        Tensor::new(vec![t_n, k_n], im)?,
        y.frame_hop,
        y.window_len,
    )
}

/// `Ŝ = Ŝ₁ + residual`.
pub fn nlr_combine(s1: &Spectrogram, residual: &Spectrogram) -> Result<Spectrogram> {
    if s1.re.shape() != residual.re.shape() {
        return shape_err(format!(
            "residual {:?} vs estimate {:?}",
            residual.re.shape(),
            s1.re.shape()
        ));
    }
    let add = |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
    Spectrogram::new(
        add(&s1.re, &residual.re),
        add(&s1.im, &residual.im),
        s1.frame_hop,
        s1.window_len,
    )
}

impl Tape {
    /// Complex product of two packed `[2, ...]` tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.first() != Some(&2) || sa != self.shape(b) {
            return shape_err(format!(
                "complex_mul needs equal packed shapes, got {sa:?} and {:?}",
                self.shape(b)
            ));
        }
        let n = self.value(a).len() / 2;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let (ar, ai, br, bi) = (ad[i], ad[n + i], bd[i], bd[n + i]);
            out[i] = ar * br - ai * bi;
            out[n + i] = ar * bi + ai * br;
        }
        let t = Tensor::new(sa, out)?;
        Ok(self.push(t, &[a, b], move || {
            move |ctx| {
                let (ad, bd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut ga = vec![0.0; 2 * n];
                let mut gb = vec![0.0; 2 * n];
                for i in 0..n {
                    let (ar, ai, br, bi) = (ad[i], ad[n + i], bd[i], bd[n + i]);
                    let (gr, gi) = (g[i], g[n + i]);
                    ga[i] = gr * br + gi * bi;
                    ga[n + i] = -gr * bi + gi * br;
                    gb[i] = gr * ar + gi * ai;
                    gb[n + i] = -gr * ai + gi * ar;
                }
                vec![Some(ga), Some(gb)]
            }
        }))
    }
}
