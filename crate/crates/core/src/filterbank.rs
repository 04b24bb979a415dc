//! Fixed gammatone band mapping between linear STFT bins and ERB-spaced
//! auditory bands.
//!
//! Band `b` has centre `f_c` equally spaced on the ERB-rate scale and a
//! 4th-order gammatone magnitude response
//! `|H(f)| = [1 + ((f - f_c) / b_w)^2]^-2` with `b_w = 1.019 ERB(f_c)`.
//! Analysis rows are L1-normalized; synthesis is the transposed analysis
//! rescaled per bin so that a flat band spectrum maps back to a flat bin
//! spectrum.

use std::io::Write;
use std::sync::Arc;

use crate::error::{arg_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Glasberg-Moore equivalent rectangular bandwidth in Hz.
pub fn erb(f_hz: f64) -> f64 {
    24.7 * (4.37 * f_hz / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `f_hz`).
pub fn erb_rate(f_hz: f64) -> f64 {
    21.4 * (4.37 * f_hz / 1000.0 + 1.0).log10()
}

pub fn erb_rate_inverse(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Magnitude response of a 4th-order gammatone filter at `f_hz`.
pub fn gammatone_magnitude(f_hz: f64, center_hz: f64) -> f64 {
    let bw = 1.019 * erb(center_hz);
    let d = (f_hz - center_hz) / bw;
    (1.0 + d * d).powi(-2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterbankMatrices {
    /// `[B, K]`, rows sum to one.
    pub analysis: Arc<Tensor>,
    /// `[K, B]`.
    pub synthesis: Arc<Tensor>,
    pub centers_hz: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterbankSpec {
    pub bins: usize,
    pub bands: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FilterbankSpec {
    fn default() -> Self {
        Self {
            bins: 1025,
            bands: 256,
            sample_rate: 48_000,
            f_min: 50.0,
            f_max: 23_000.0,
        }
    }
}

pub fn build_filterbank(spec: FilterbankSpec) -> Result<FilterbankMatrices> {
    let FilterbankSpec {
        bins,
        bands,
        sample_rate,
        f_min,
        f_max,
    } = spec;
    let nyquist = f64::from(sample_rate) / 2.0;
    if bands < 2 {
        return arg_err(format!("need at least 2 bands, got {bands}"));
    }
    if bins < 2 {
        return arg_err(format!("need at least 2 bins, got {bins}"));
    }
    if !(f_min > 0.0 && f_min < f_max && f_max <= nyquist) {
        return arg_err(format!(
            "invalid frequency range [{f_min}, {f_max}] Hz for sample rate {sample_rate}"
        ));
    }
    let (e_lo, e_hi) = (erb_rate(f_min), erb_rate(f_max));
    let centers_hz: Vec<f64> = (0..bands)
        .map(|b| erb_rate_inverse(e_lo + (e_hi - e_lo) * b as f64 / (bands - 1) as f64))
        .collect();
    let bin_hz = nyquist / (bins - 1) as f64;
    let mut analysis = vec![0.0; bands * bins];
    for (b, &fc) in centers_hz.iter().enumerate() {
        let row = &mut analysis[b * bins..(b + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            *v = gammatone_magnitude(k as f64 * bin_hz, fc);
        }
        let l1: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= l1);
    }
    let mut synthesis = vec![0.0; bins * bands];
    for k in 0..bins {
        let col_sum: f64 = (0..bands).map(|b| analysis[b * bins + k]).sum();
        for b in 0..bands {
            synthesis[k * bands + b] = if col_sum > 0.0 {
                analysis[b * bins + k] / col_sum
            } else {
                0.0
            };
        }
    }
    Ok(FilterbankMatrices {
        analysis: Arc::new(Tensor::new(vec![bands, bins], analysis)?),
        synthesis: Arc::new(Tensor::new(vec![bins, bands], synthesis)?),
        centers_hz,
        sample_rate,
    })
}

impl FilterbankMatrices {
    pub fn bands(&self) -> usize {
        self.analysis.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.analysis.shape()[1]
    }

    /// `[C, T, K] -> [C, T, B]`.
    pub fn analyze(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.matmul_last(x, &self.analysis)
    }

    /// `[C, T, B] -> [C, T, K]`.
    pub fn synthesize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.matmul_last(x, &self.synthesis)
    }

    pub fn analyze_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = self.analyze(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    pub fn synthesize_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = self.synthesize(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    /// Bin index nearest to each band centre.
    pub fn center_bins(&self) -> Vec<usize> {
        let bin_hz = f64::from(self.sample_rate) / 2.0 / (self.bins() - 1) as f64;
        self.centers_hz.iter().map(|f| (f / bin_hz).round() as usize).collect()
    }

    /// Writes the analysis matrix as CSV: a header of bin frequencies, then
    /// one row per band led by its centre frequency.
    pub fn write_analysis_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (b_n, k_n) = (self.bands(), self.bins());
        let bin_hz = f64::from(self.sample_rate) / 2.0 / (k_n - 1) as f64;
        write!(w, "center_hz")?;
        for k in 0..k_n {
            write!(w, ",{}", k as f64 * bin_hz)?;
        }
        writeln!(w)?;
        for b in 0..b_n {
            write!(w, "{}", self.centers_hz[b])?;
            for v in &self.analysis.data()[b * k_n..(b + 1) * k_n] {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
