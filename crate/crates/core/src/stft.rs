//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are not centre-padded: frame `m` covers samples
//! `[m * hop, m * hop + window_len)`. Synthesis divides by the summed squared
//! window, so analysis followed by synthesis is exact on every sample covered
//! by at least one frame.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::par;

pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;
pub const DEFAULT_WINDOW: usize = 2048;
pub const DEFAULT_HOP: usize = 1024;

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return arg_err("sample rate must be positive");
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return arg_err("waveform contains non-finite samples");
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Complex time-frequency representation with `re`, `im` of shape `[T, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub re: Tensor,
    pub im: Tensor,
    pub frame_hop: usize,
    pub window_len: usize,
}

impl Spectrogram {
    pub fn new(re: Tensor, im: Tensor, frame_hop: usize, window_len: usize) -> Result<Self> {
        let [_, k] = re.dims2()?;
        if re.shape() != im.shape() {
            return shape_err(format!("re {:?} vs im {:?}", re.shape(), im.shape()));
        }
        if k != window_len / 2 + 1 {
            return shape_err(format!("{k} bins for a window of {window_len}"));
        }
        Ok(Self {
            re,
            im,
            frame_hop,
            window_len,
        })
    }

    pub fn zeros(frames: usize, window_len: usize, frame_hop: usize) -> Self {
        let k = window_len / 2 + 1;
        Self {
            re: Tensor::zeros(&[frames, k]),
            im: Tensor::zeros(&[frames, k]),
            frame_hop,
            window_len,
        }
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[1]
    }

    /// Channel 0 = real part, channel 1 = imaginary part: `[2, T, K]`.
    pub fn pack(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.re.len());
        data.extend_from_slice(self.re.data());
        data.extend_from_slice(self.im.data());
        Tensor::new(vec![2, self.frames(), self.bins()], data).expect("packed shape")
    }

    pub fn unpack(packed: &Tensor, frame_hop: usize, window_len: usize) -> Result<Self> {
        let [c, t, k] = packed.dims3()?;
        if c != 2 {
            return shape_err(format!("packed spectrogram needs 2 channels, got {c}"));
        }
        let n = t * k;
        let re = Tensor::new(vec![t, k], packed.data()[..n].to_vec())?;
        let im = Tensor::new(vec![t, k], packed.data()[n..].to_vec())?;
        Self::new(re, im, frame_hop, window_len)
    }
}

pub fn pack_complex(s: &Spectrogram) -> Tensor {
    s.pack()
}

pub fn unpack_complex(packed: &Tensor, frame_hop: usize, window_len: usize) -> Result<Spectrogram> {
    Spectrogram::unpack(packed, frame_hop, window_len)
}

/// Periodic Hamming window `0.54 - 0.46 cos(2πn/N)`.
pub fn hamming_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Analysis/synthesis pair for a fixed window length and hop.
#[derive(Clone)]
pub struct Stft {
    window_len: usize,
    hop: usize,
    window: Arc<Vec<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("window_len", &self.window_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if window_len < 2 || !window_len.is_multiple_of(2) {
            return arg_err(format!("window length must be even and ≥ 2, got {window_len}"));
        }
        if hop == 0 || hop > window_len {
            return arg_err(format!("hop {hop} must be in 1..={window_len}"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_len,
            hop,
            window: Arc::new(hamming_periodic(window_len)),
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `1 + floor((n - window_len) / hop)`, or `None` when shorter than one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.window_len).then(|| 1 + (n - self.window_len) / self.hop)
    }

    /// Length of the signal synthesized from `frames` frames.
    pub fn synth_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }

    /// Samples `[window_len, synth_len - window_len)`: the region used for
    /// losses and metrics.
    pub fn interior(&self, frames: usize) -> std::ops::Range<usize> {
        let l = self.synth_len(frames);
        self.window_len.min(l)..l.saturating_sub(self.window_len).max(self.window_len.min(l))
    }

    pub fn analyze(&self, x: &Waveform) -> Result<Spectrogram> {
        let Some(frames) = self.frame_count(x.len()) else {
            return arg_err(format!(
                "signal of {} samples is shorter than one window ({})",
                x.len(),
                self.window_len
            ));
        };
        let k = self.bins();
        let (n, hop) = (self.window_len, self.hop);
        let rows = par::map_range(frames, |m| {
            let mut buf: Vec<Complex64> = x.samples[m * hop..m * hop + n]
                .iter()
                .zip(self.window.iter())
                .map(|(s, w)| Complex64::new(s * w, 0.0))
                .collect();
            self.forward.process(&mut buf);
            buf.truncate(k);
            buf
        });
        let mut re = Vec::with_capacity(frames * k);
        let mut im = Vec::with_capacity(frames * k);
        for row in rows {
            re.extend(row.iter().map(|c| c.re));
            im.extend(row.iter().map(|c| c.im));
        }
        Spectrogram::new(
            Tensor::new(vec![frames, k], re)?,
            Tensor::new(vec![frames, k], im)?,
            hop,
            n,
        )
    }

    fn check(&self, s_hop: usize, s_win: usize, bins: usize) -> Result<()> {
        if s_hop != self.hop || s_win != self.window_len || bins != self.bins() {
            return arg_err(format!(
                "spectrogram (window {s_win}, hop {s_hop}) does not match synthesis (window {}, hop {})",
                self.window_len, self.hop
            ));
        }
        Ok(())
    }

    /// Squared-window overlap-add normalization for `frames` frames.
    fn ola_norm(&self, frames: usize) -> Vec<f64> {
        let mut norm = vec![0.0; self.synth_len(frames)];
        for m in 0..frames {
            for (j, w) in self.window.iter().enumerate() {
                norm[m * self.hop + j] += w * w;
            }
        }
        norm
    }

    fn synthesize_packed(&self, re: &[f64], im: &[f64], frames: usize) -> Vec<f64> {
        let (n, k, hop) = (self.window_len, self.bins(), self.hop);
        let blocks = par::map_range(frames, |m| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for b in 0..k {
                buf[b] = Complex64::new(re[m * k + b], im[m * k + b]);
            }
            for b in 1..n - k + 1 {
                buf[n - b] = buf[b].conj();
            }
            self.inverse.process(&mut buf);
            buf.iter()
                .zip(self.window.iter())
                .map(|(c, w)| c.re / n as f64 * w)
                .collect::<Vec<f64>>()
        });
        let norm = self.ola_norm(frames);
        let mut out = vec![0.0; self.synth_len(frames)];
        for (m, blk) in blocks.iter().enumerate() {
            for (j, v) in blk.iter().enumerate() {
                out[m * hop + j] += v;
            }
        }
        for (o, d) in out.iter_mut().zip(&norm) {
            *o = if *d > 1e-12 { *o / d } else { 0.0 };
        }
        out
    }

    pub fn synthesize(&self, s: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
        self.check(s.frame_hop, s.window_len, s.bins())?;
        let out = self.synthesize_packed(s.re.data(), s.im.data(), s.frames());
        Waveform::new(out, sample_rate)
    }

    /// Differentiable synthesis of a packed `[2, T, K]` spectrogram into a
    /// rank-1 waveform of `synth_len(T)` samples.
    pub fn synthesize_var(&self, tape: &mut Tape, packed: Var) -> Result<Var> {
        let [c, frames, k] = tape.value(packed).dims3()?;
        if c != 2 {
            return shape_err(format!("packed spectrogram needs 2 channels, got {c}"));
        }
        self.check(self.hop, self.window_len, k)?;
        let d = tape.value(packed).data();
        let out = self.synthesize_packed(&d[..frames * k], &d[frames * k..], frames);
        let len = out.len();
        let t = Tensor::new(vec![len], out)?;
        let this = self.clone();
        Ok(tape.push(t, &[packed], move || {
            move |ctx| vec![Some(this.synthesis_adjoint(ctx.grad, frames))]
        }))
    }

    /// Adjoint of `synthesize_packed` with respect to (re, im).
    fn synthesis_adjoint(&self, g: &[f64], frames: usize) -> Vec<f64> {
        let (n, k, hop) = (self.window_len, self.bins(), self.hop);
        let norm = self.ola_norm(frames);
        let rows = par::map_range(frames, |m| {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|j| {
                    let d = norm[m * hop + j];
                    let v = if d > 1e-12 {
                        g[m * hop + j] * self.window[j] / d
                    } else {
                        0.0
                    };
                    Complex64::new(v, 0.0)
                })
                .collect();
            self.forward.process(&mut buf);
            let scale = |b: usize| {
                if b == 0 || b == n / 2 {
                    1.0 / n as f64
                } else {
                    2.0 / n as f64
                }
            };
            let re: Vec<f64> = (0..k).map(|b| scale(b) * buf[b].re).collect();
            let im: Vec<f64> = (0..k)
                .map(|b| {
                    if b == 0 || b == n / 2 {
                        0.0
                    } else {
                        scale(b) * buf[b].im
                    }
                })
                .collect();
            (re, im)
        });
        let mut out = vec![0.0; 2 * frames * k];
        for (m, (re, im)) in rows.into_iter().enumerate() {
            out[m * k..(m + 1) * k].copy_from_slice(&re);
            out[frames * k + m * k..frames * k + (m + 1) * k].copy_from_slice(&im);
        }
        out
    }
}

/// Analysis with the default 2048-sample Hamming window and 1024 hop.
pub fn stft(x: &Waveform) -> Result<Spectrogram> {
    Stft::new(DEFAULT_WINDOW, DEFAULT_HOP)?.analyze(x)
}

/// Synthesis matching the spectrogram's own window and hop.
pub fn istft(s: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
    Stft::new(s.window_len, s.frame_hop)?.synthesize(s, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 48_000).unwrap()
    }

    #[test]
    fn one_second_frame_count() {
        let s = stft(&noise(48_000, 0)).unwrap();
        assert_eq!((s.frames(), s.bins()), (45, 1025));
        assert_eq!(s.pack().shape(), &[2, 45, 1025]);
    }

    #[test]
    fn zeros_map_to_zeros() {
        let x = Waveform::new(vec![0.0; 5000], 48_000).unwrap();
        let s = stft(&x).unwrap();
        assert!(s.re.data().iter().chain(s.im.data()).all(|&v| v == 0.0));
        let y = istft(&Spectrogram::zeros(4, 2048, 1024), 48_000).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(stft(&noise(2047, 1)).is_err());
    }

    #[test]
    fn sine_at_bin_centre_is_concentrated() {
        let f = 100.0 * 48_000.0 / 2048.0;
        let x = Waveform::new(
            (0..48_000)
                .map(|i| (2.0 * PI * f * i as f64 / 48_000.0).sin())
                .collect(),
            48_000,
        )
        .unwrap();
        let s = stft(&x).unwrap();
        for m in 0..s.frames() {
            let e = |k: usize| s.re.data()[m * 1025 + k].powi(2) + s.im.data()[m * 1025 + k].powi(2);
            let total: f64 = (0..1025).map(e).sum();
            let near: f64 = (98..=102).map(e).sum();
            assert!(near / total >= 0.99);
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let s = stft(&noise(6000, 2)).unwrap();
        let back = unpack_complex(&pack_complex(&s), s.frame_hop, s.window_len).unwrap();
        assert_eq!(back, s);
        assert!(unpack_complex(&Tensor::zeros(&[3, 2, 1025]), 1024, 2048).is_err());
    }

    #[test]
    fn real_spectrogram_packs_zero_imag() {
        let mut s = Spectrogram::zeros(3, 16, 8);
        s.re.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let p = s.pack();
        assert!(p.data()[3 * 9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_reconstructs_interior() {
        let x = noise(48_000, 3);
        let st = Stft::new(2048, 1024).unwrap();
        let s = st.analyze(&x).unwrap();
        let y = st.synthesize(&s, 48_000).unwrap();
        let r = st.interior(s.frames());
        let num: f64 = r.clone().map(|i| (y.samples[i] - x.samples[i]).powi(2)).sum();
        let den: f64 = r.map(|i| x.samples[i].powi(2)).sum();
        assert!((num / den).sqrt() <= 1e-6);
    }

    #[test]
    fn roundtrip_is_idempotent() {
        let st = Stft::new(256, 128).unwrap();
        let x = noise(4000, 4);
        let once = st.synthesize(&st.analyze(&x).unwrap(), 48_000).unwrap();
        let twice = st.synthesize(&st.analyze(&once).unwrap(), 48_000).unwrap();
        let d = once
            .samples
            .iter()
            .zip(&twice.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn parseval_energy_within_one_percent() {
        let st = Stft::new(2048, 1024).unwrap();
        let x = noise(480_000, 5);
        let s = st.analyze(&x).unwrap();
        let n = st.window_len() as f64;
        let mut spec_energy = 0.0;
        for m in 0..s.frames() {
            for k in 0..s.bins() {
                let e = s.re.data()[m * s.bins() + k].powi(2) + s.im.data()[m * s.bins() + k].powi(2);
                let w = if k == 0 || k == s.bins() - 1 { 1.0 } else { 2.0 };
                spec_energy += w * e / n;
            }
        }
        let win_pow: f64 = st.window().iter().map(|w| w * w).sum::<f64>() / st.hop() as f64;
        let ratio = spec_energy / win_pow / x.energy();
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn synthesis_gradient_matches_finite_differences() {
        let st = Stft::new(16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[2, 4, 9], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[st.synth_len(4)], |_| rng.random_range(-1.0..1.0));
        let e = grad_check(
            |t, v| {
                let y = st.synthesize_var(t, v)?;
                t.weighted_sum(y, &w)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let st = Stft::new(256, 128).unwrap();
        let s = Spectrogram::zeros(3, 512, 256);
        assert!(st.synthesize(&s, 48_000).is_err());
    }
}
