use concatenet::data::{mix_at_snr, read_wav, synth_corpus, write_wav, MixSpec};
use concatenet::masking::{apply_complex_mask, deep_filter, ComplexMask, FilterSupport};
use concatenet::metrics::{si_sdr, si_sir, snr_db};
use concatenet::numerics::conv::conv2d_reference;
use concatenet::numerics::{Tape, Tensor};
use concatenet::stft::{Spectrogram, Stft, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components of `x` along each of `basis` (Gram-Schmidt).
fn orthogonalize(mut x: Vec<f64>, basis: &[&[f64]]) -> Vec<f64> {
    for b in basis {
        let c = dot(&x, b) / dot(b, b);
        x.iter_mut().zip(b.iter()).for_each(|(v, bb)| *v -= c * bb);
    }
    x
}

fn wave(v: Vec<f64>, sr: u32) -> Waveform {
    Waveform::new(v, sr).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixer_hits_target_snr(seed in 0u64..10_000, snr in -5.0f64..15.0, n in 200usize..4000, extra in 0usize..300) {
        let s = wave(noise(seed, n), 16_000);
        let v = wave(noise(seed + 1, n + extra).iter().map(|x| 3.0 * x).collect(), 16_000);
        let m = mix_at_snr(&MixSpec { speech: s, background: v, snr_db: snr, awgn_snr_db: None, seed }).unwrap();
        prop_assert_eq!(m.mixture.len(), n);
        let got = snr_db(&m.speech.samples, &m.background.samples).unwrap();
        prop_assert!((got - snr).abs() <= 0.01, "target {} got {}", snr, got);
        for i in 0..n {
            prop_assert!((m.mixture.samples[i] - m.speech.samples[i] - m.background.samples[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn awgn_sits_at_requested_level(seed in 0u64..1000, snr in -5.0f64..15.0, awgn in 10.0f64..30.0) {
        let s = wave(noise(seed, 3000), 16_000);
        let v = wave(noise(seed + 7, 3000), 16_000);
        let m = mix_at_snr(&MixSpec { speech: s, background: v, snr_db: snr, awgn_snr_db: Some(awgn), seed }).unwrap();
        let clean: Vec<f64> = m.speech.samples.iter().zip(&m.background.samples).map(|(a, b)| a + b).collect();
        let got = snr_db(&clean, &m.noise.samples).unwrap();
        prop_assert!((got - awgn).abs() <= 0.01, "awgn target {} got {}", awgn, got);
        let bg = snr_db(&m.speech.samples, &m.background.samples).unwrap();
        prop_assert!((bg - snr).abs() <= 0.01);
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(seed in 0u64..10_000, log_scale in -3.0f64..3.0) {
        let s = noise(seed, 512);
        let e: Vec<f64> = s.iter().zip(noise(seed + 1, 512)).map(|(a, b)| a + 0.3 * b).collect();
        let scaled: Vec<f64> = e.iter().map(|x| x * 10f64.powf(log_scale)).collect();
        let (a, b) = (si_sdr(&e, &s).unwrap(), si_sdr(&scaled, &s).unwrap());
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn si_sdr_of_orthogonal_noise_is_the_energy_ratio(seed in 0u64..10_000, db in -20.0f64..40.0, gain in 0.1f64..10.0) {
        let s = noise(seed, 700);
        let d = orthogonalize(noise(seed + 3, 700), &[&s]);
        let k = (dot(&s, &s) / dot(&d, &d) * 10f64.powf(-db / 10.0)).sqrt();
        let e: Vec<f64> = s.iter().zip(&d).map(|(a, b)| gain * (a + k * b)).collect();
        let got = si_sdr(&e, &s).unwrap();
        prop_assert!((got - db).abs() <= 1e-6, "{} vs {}", got, db);
    }

    #[test]
    fn si_sir_matches_projection_oracle(seed in 0u64..10_000, a in 0.2f64..3.0, b in 0.01f64..2.0, art in 0.0f64..1.0) {
        // est = a s + b v + artefact, with s, v, artefact mutually orthogonal:
        // interference energy is b²|v|², target energy a²|s|².
        let s = noise(seed, 600);
        let v = orthogonalize(noise(seed + 1, 600), &[&s]);
        let r = orthogonalize(noise(seed + 2, 600), &[&s, &v]);
        let e: Vec<f64> = (0..600).map(|i| a * s[i] + b * v[i] + art * r[i]).collect();
        let want = 10.0 * (a * a * dot(&s, &s) / (b * b * dot(&v, &v))).log10();
        let got = si_sir(&e, &s, &v).unwrap();
        prop_assert!((got - want).abs() <= 1e-6, "{} vs {}", got, want);
    }

    #[test]
    fn stft_round_trip_on_interior(seed in 0u64..10_000, n in 300usize..3000, log_w in 4u32..8) {
        let w = 1usize << log_w;
        let stft = Stft::new(w, w / 2).unwrap();
        let x = wave(noise(seed, n), 8000);
        let y = stft.synthesize(&stft.analyze(&x).unwrap(), 8000).unwrap();
        let r = stft.interior(stft.frame_count(n).unwrap());
        prop_assume!(!r.is_empty());
        let num: f64 = r.clone().map(|i| (x.samples[i] - y.samples[i]).powi(2)).sum();
        let den: f64 = r.map(|i| x.samples[i].powi(2)).sum();
        prop_assert!((num / den).sqrt() <= 1e-10);
    }

    #[test]
    fn conv_is_linear_and_matches_nested_loops(
        seed in 0u64..1000,
        c in 1usize..4,
        t in 1usize..6,
        f in 2usize..9,
        stride in 1usize..3,
        depthwise in any::<bool>(),
        transposed in any::<bool>(),
    ) {
        let (groups, c_out, cin_pg) = if depthwise { (c, c, 1) } else { (1, c + 1, c) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let x1 = rand_t(&[c, t, f]);
        let x2 = rand_t(&[c, t, f]);
        let w = rand_t(&[c_out, cin_pg, 2, 3]);
        let zero = vec![0.0; c_out];
        let run = |x: &Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(Tensor::new(vec![c_out], zero.clone()).unwrap());
            let y = if transposed {
                tape.conv2d_transposed(xv, wv, bv, stride, groups).unwrap()
            } else {
                tape.conv2d(xv, wv, bv, stride, groups).unwrap()
            };
            tape.value(y).clone()
        };
        let (alpha, beta) = (0.7, -1.3);
        let mix = Tensor::from_fn(&[c, t, f], |i| alpha * x1.data()[i] + beta * x2.data()[i]);
        let (y1, y2, ym) = (run(&x1), run(&x2), run(&mix));
        for i in 0..ym.len() {
            prop_assert!((ym.data()[i] - alpha * y1.data()[i] - beta * y2.data()[i]).abs() < 1e-12);
        }
        let oracle = conv2d_reference(&x1, &w, &zero, stride, groups, transposed);
        prop_assert_eq!(y1.shape(), oracle.shape());
        prop_assert!(y1.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn single_tap_deep_filter_is_mask_multiplication(seed in 0u64..10_000, t in 1usize..6, k in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let y = Spectrogram::new(r(&[t, k]), r(&[t, k]), k - 1, 2 * (k - 1)).unwrap();
        let m = ComplexMask::new(r(&[t, k]), r(&[t, k])).unwrap();
        let mut coeffs = Vec::new();
        coeffs.extend_from_slice(m.re.data());
        coeffs.extend_from_slice(m.im.data());
        let coeffs = Tensor::new(vec![1, 1, 2, t, k], coeffs).unwrap();
        let a = apply_complex_mask(&y, &m).unwrap();
        let b = deep_filter(&y, &coeffs, FilterSupport::default()).unwrap();
        prop_assert!(a.re.max_abs_diff(&b.re) <= 1e-10 && a.im.max_abs_diff(&b.im) <= 1e-10);
        // complex product by hand
        for i in 0..t * k {
            let (yr, yi, mr, mi) = (y.re.data()[i], y.im.data()[i], m.re.data()[i], m.im.data()[i]);
            prop_assert!((a.re.data()[i] - (mr * yr - mi * yi)).abs() < 1e-12);
            prop_assert!((a.im.data()[i] - (mr * yi + mi * yr)).abs() < 1e-12);
        }
    }
}

#[test]
fn float_wav_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let samples: Vec<f64> = noise(4, 1000).iter().map(|v| f64::from(*v as f32)).collect();
    let w = wave(samples, 22_050);
    write_wav(&w, &path).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate, 22_050);
    assert_eq!(back.samples, w.samples);
}

#[test]
fn pcm16_scaling_and_channel_selection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pcm.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wr = hound::WavWriter::create(&path, spec).unwrap();
    for (l, r) in [(-32768i16, 1i16), (16384, 2), (32767, 3), (0, 4)] {
        wr.write_sample(l).unwrap();
        wr.write_sample(r).unwrap();
    }
    wr.finalize().unwrap();
    let w = read_wav(&path).unwrap();
    assert_eq!(w.samples, vec![-1.0, 0.5, 32767.0 / 32768.0, 0.0]);
    assert_eq!(w.sample_rate, 8000);
}

#[test]
fn unsupported_wav_format_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x24.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 24,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wr = hound::WavWriter::create(&path, spec).unwrap();
    wr.write_sample(5i32).unwrap();
    wr.finalize().unwrap();
    let err = read_wav(&path).unwrap_err().to_string();
    assert!(err.contains("24-bit"), "{err}");
}

#[test]
fn synthetic_speech_is_low_frequency_weighted() {
    use rustfft::num_complex::Complex;
    let sr = 16_000;
    let corpus = synth_corpus(9, 4, 1.0, sr).unwrap();
    for (speech, _) in &corpus {
        let n = speech.len();
        let mut buf: Vec<Complex<f64>> = speech.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let cutoff = 4000 * n / sr as usize;
        let power: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect();
        let low: f64 = power[..cutoff].iter().sum();
        let total: f64 = power.iter().sum();
        assert!(low / total >= 0.6, "low-band share {}", low / total);
        let rms = (speech.energy() / n as f64).sqrt();
        assert!((rms - 0.1).abs() < 1e-9);
    }
}
