//! WAV I/O, SNR-exact mixing, the synthetic speech/background corpus and
//! the corpus manifest format.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Error, Result};
use crate::par;
use crate::stft::Waveform;

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav(format!("{}: {e}", path.display()))
}

/// Reads PCM16 or float32 WAV; multichannel files yield their first channel.
/// PCM16 is scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported sample format {bits}-bit {fmt:?}; expected 16-bit PCM or 32-bit float"),
            ))
        }
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(wav_err(path, "non-finite sample"));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono float32 WAV. The file appears only once fully written.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    write_atomic(path, |tmp| {
        let mut writer = WavWriter::create(tmp, spec).map_err(|e| wav_err(path, e))?;
        for &s in &w.samples {
            writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
        }
        writer.finalize().map_err(|e| wav_err(path, e))
    })
}

/// Runs `write` against a sibling temp path, then renames it over `path`.
/// On failure the temp file is removed and `path` is untouched.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(name);
    let res = write(&tmp).and_then(|()| fs::rename(&tmp, path).map_err(Error::from));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

/// A mixing recipe. `seed` drives the optional white-noise augmentation.
#[derive(Clone, Debug)]
pub struct MixSpec {
    pub speech: Waveform,
    pub background: Waveform,
    pub snr_db: f64,
    pub awgn_snr_db: Option<f64>,
    pub seed: u64,
}

/// Components of a mixture, all trimmed to the same length.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: Waveform,
    pub speech: Waveform,
    /// Background after the SNR gain.
    pub background: Waveform,
    /// White noise added on top, all zeros without augmentation.
    pub noise: Waveform,
    pub gain: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Scales the background so that speech-to-background energy equals
/// `snr_db`, then optionally adds white Gaussian noise whose energy sits
/// `awgn_snr_db` below the mixture.
pub fn mix_at_snr(spec: &MixSpec) -> Result<Mixture> {
    let (s, v) = (&spec.speech, &spec.background);
    if s.sample_rate != v.sample_rate {
        return arg_err(format!(
            "sample rates differ: speech {} Hz, background {} Hz",
            s.sample_rate, v.sample_rate
        ));
    }
    if !spec.snr_db.is_finite() || spec.awgn_snr_db.is_some_and(|x| !x.is_finite()) {
        return arg_err("SNR must be finite");
    }
    let n = s.len().min(v.len());
    let (s, v) = (&s.samples[..n], &v.samples[..n]);
    let (es, ev) = (energy(s), energy(v));
    if es == 0.0 || ev == 0.0 {
        return arg_err("speech and background must have nonzero energy");
    }
    let gain = (es / ev * 10f64.powf(-spec.snr_db / 10.0)).sqrt();
    let bg: Vec<f64> = v.iter().map(|x| gain * x).collect();
    let mut mix: Vec<f64> = s.iter().zip(&bg).map(|(a, b)| a + b).collect();
    let mut noise = vec![0.0; n];
    if let Some(awgn) = spec.awgn_snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        noise.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let target = energy(&mix) * 10f64.powf(-awgn / 10.0);
        let g = (target / energy(&noise)).sqrt();
        noise.iter_mut().for_each(|x| *x *= g);
        mix.iter_mut().zip(&noise).for_each(|(m, w)| *m += w);
    }
    let sr = spec.speech.sample_rate;
    Ok(Mixture {
        mixture: Waveform::new(mix, sr)?,
        speech: Waveform::new(s.to_vec(), sr)?,
        background: Waveform::new(bg, sr)?,
        noise: Waveform::new(noise, sr)?,
        gain,
    })
}

/// RMS level both corpus signals are normalized to.
const CORPUS_RMS: f64 = 0.1;

fn normalize_rms(x: &mut [f64]) {
    let rms = (energy(x) / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= CORPUS_RMS / rms);
    }
}

/// Vowel-like formant sets (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];

fn formant_gain(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .enumerate()
        .map(|(i, &fc)| {
            let bw = 80.0 + 40.0 * i as f64;
            let amp = [1.0, 0.6, 0.3][i];
            amp / (1.0 + ((f - fc) / bw).powi(2))
        })
        .sum()
}

/// Harmonic source with a drifting F0 in 80-300 Hz, shaped by one vowel
/// per syllable and gated by a raised-cosine syllable envelope.
fn synth_speech(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0_base: f64 = rng.random_range(100.0..220.0);
    let drift_rate: f64 = rng.random_range(0.5..3.0);
    let drift_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let f_top = 5000.0f64.min(0.45 * sr);

    // syllables: (start, len, vowel)
    let mut syllables = Vec::new();
    let mut t = (rng.random_range(0.0..0.05) * sr) as usize;
    while t < n {
        let len = (rng.random_range(0.12..0.3) * sr) as usize;
        syllables.push((t, len, rng.random_range(0..VOWELS.len())));
        t += len + (rng.random_range(0.03..0.12) * sr) as usize;
    }

    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let mut phases = vec![0.0; n];
    for (i, p) in phases.iter_mut().enumerate() {
        let ts = i as f64 / sr;
        let f0 = (f0_base * (1.0 + 0.25 * (2.0 * PI * drift_rate * ts + drift_phase).sin())).clamp(80.0, 300.0);
        phase += 2.0 * PI * f0 / sr;
        *p = phase;
    }
    for &(start, len, vowel) in &syllables {
        let end = (start + len).min(n);
        let max_h = (f_top / 80.0) as usize;
        let amps: Vec<f64> = (1..=max_h)
            .map(|h| formant_gain(f0_base * h as f64, &VOWELS[vowel]) / (h as f64).sqrt())
            .collect();
        for i in start..end {
            let env = (PI * (i - start) as f64 / len as f64).sin().powi(2);
            let f0_now = (phases[i] - if i > 0 { phases[i - 1] } else { 0.0 }) * sr / (2.0 * PI);
            let mut acc = 0.0;
            for (h, a) in amps.iter().enumerate() {
                let fh = f0_now * (h + 1) as f64;
                if fh > f_top {
                    break;
                }
                acc += a * (phases[i] * (h + 1) as f64).sin();
            }
            out[i] = env * acc;
        }
    }
    // faint breath noise so silent gaps are not exactly zero
    for v in out.iter_mut() {
        *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    normalize_rms(&mut out);
    out
}

/// One-pole filtered noise bursts plus a few steady or wavering tones.
fn synth_background(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let bursts = rng.random_range(2..6) + (n as f64 / sr) as usize;
    for _ in 0..bursts {
        let len = ((rng.random_range(0.1..0.8) * sr) as usize).min(n);
        let start = rng.random_range(0..=n - len);
        let cutoff: f64 = rng.random_range(200.0..12_000.0f64.min(0.45 * sr));
        let a = (-2.0 * PI * cutoff / sr).exp();
        let highpass = rng.random_bool(0.5);
        let level: f64 = rng.random_range(0.3..1.0);
        let mut lp = 0.0;
        for i in 0..len {
            let w: f64 = rng.sample(StandardNormal);
            lp = a * lp + (1.0 - a) * w;
            let y = if highpass { w - lp } else { lp };
            let env = (PI * i as f64 / len as f64).sin();
            out[start + i] += level * env * y;
        }
    }
    let tones = rng.random_range(1..4);
    for _ in 0..tones {
        let f: f64 = rng.random_range(100.0..6000.0f64.min(0.4 * sr));
        let vib_rate: f64 = rng.random_range(0.0..6.0);
        let vib_depth: f64 = rng.random_range(0.0..0.02);
        let level: f64 = rng.random_range(0.05..0.3);
        let mut phase: f64 = rng.random_range(0.0..2.0 * PI);
        for (i, v) in out.iter_mut().enumerate() {
            let inst = f * (1.0 + vib_depth * (2.0 * PI * vib_rate * i as f64 / sr).sin());
            phase += 2.0 * PI * inst / sr;
            *v += level * phase.sin();
        }
    }
    normalize_rms(&mut out);
    out
}

/// Generates `n_items` (speech, background) pairs of `duration_s` seconds.
/// Item `i` depends only on `(seed, i)`.
pub fn synth_corpus(seed: u64, n_items: usize, duration_s: f64, sample_rate: u32) -> Result<Vec<(Waveform, Waveform)>> {
    if !(duration_s >= 0.25) {
        return arg_err(format!("corpus items must be at least 0.25 s, got {duration_s}"));
    }
    if sample_rate == 0 {
        return arg_err("sample rate must be positive");
    }
    let sr = f64::from(sample_rate);
    let n = (duration_s * sr).round() as usize;
    par::map_range(n_items, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let s = synth_speech(&mut rng, n, sr);
        let v = synth_background(&mut rng, n, sr);
        Ok((Waveform::new(s, sample_rate)?, Waveform::new(v, sample_rate)?))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub speech: PathBuf,
    pub background: PathBuf,
    pub snr_db: f64,
    /// Precomputed mixture; when present it is used instead of remixing.
    pub mixture: Option<PathBuf>,
}

/// Parses `id<TAB>speech<TAB>background<TAB>snr_db[<TAB>mixture]` lines.
/// Relative paths are resolved against `base`. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Config(format!("manifest line {}: {m}", lineno + 1));
        if cols.len() != 4 && cols.len() != 5 {
            return Err(bad(&format!(
                "expected 4 or 5 tab-separated fields, got {}",
                cols.len()
            )));
        }
        let snr_db: f64 = cols[3].trim().parse().map_err(|_| bad("snr_db is not a number"))?;
        if !snr_db.is_finite() {
            return Err(bad("snr_db must be finite"));
        }
        out.push(ManifestEntry {
            id: cols[0].to_string(),
            speech: base.join(cols[1]),
            background: base.join(cols[2]),
            snr_db,
            mixture: cols.get(4).map(|m| base.join(m)),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            let mut line = format!(
                "{}\t{}\t{}\t{}",
                e.id,
                e.speech.display(),
                e.background.display(),
                e.snr_db
            );
            if let Some(m) = &e.mixture {
                line.push_str(&format!("\t{}", m.display()));
            }
            line.push('\n');
            line
        })
        .collect()
}

/// Writes a synthetic corpus as WAV pairs plus `manifest.tsv` into `dir`,
/// drawing per-item SNRs uniformly from `snr_range`.
pub fn write_synth_corpus(
    dir: &Path,
    seed: u64,
    n_items: usize,
    duration_s: f64,
    sample_rate: u32,
    snr_range: (f64, f64),
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let pairs = synth_corpus(seed, n_items, duration_s, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5e1f);
    let mut entries = Vec::new();
    for (i, (s, v)) in pairs.iter().enumerate() {
        let id = format!("item{i:04}");
        let (sp, bp) = (format!("{id}_speech.wav"), format!("{id}_background.wav"));
        write_wav(s, &dir.join(&sp))?;
        write_wav(v, &dir.join(&bp))?;
        let snr_db = if snr_range.0 < snr_range.1 {
            rng.random_range(snr_range.0..snr_range.1)
        } else {
            snr_range.0
        };
        entries.push(ManifestEntry {
            id,
            speech: sp.into(),
            background: bp.into(),
            snr_db,
            mixture: None,
        });
    }
    let path = dir.join("manifest.tsv");
    let text = format_manifest(&entries);
    write_atomic(&path, |tmp| Ok(fs::write(tmp, text)?))?;
    Ok(path)
}
