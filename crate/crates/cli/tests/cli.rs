use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concatenet::checkpoint::Checkpoint;
use concatenet::data::{read_wav, synth_corpus, write_wav};
use concatenet::stft::{Stft, Waveform};

const SR: u32 = 16_000;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concatenet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn concatenet")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        String::from_utf8_lossy(&o.stdout)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny 16 kHz checkpoint written through `init`.
fn tiny_model(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.ckpt");
    ok(&[
        "init",
        "--tiny",
        "--set",
        "model.sample_rate=16000",
        "--set",
        "model.seed=3",
        "--output",
        s(&path),
    ]);
    path
}

/// Interior sample range of the tiny model's STFT for an `n`-sample signal.
fn interior(n: usize) -> std::ops::Range<usize> {
    let stft = Stft::new(64, 32).unwrap();
    stft.interior(stft.frame_count(n).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes a speech/background pair whose background is orthogonal to the
/// speech on the interior samples (after float32 storage of the speech).
fn orthogonal_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let (speech, bg) = synth_corpus(21, 1, 0.5, SR).unwrap().remove(0);
    let sp = dir.join("speech.wav");
    write_wav(&speech, &sp).unwrap();
    let speech = read_wav(&sp).unwrap();
    let r = interior(speech.len());
    let si = &speech.samples[r.clone()];
    let mut v = bg.samples.clone();
    let c = dot(&v[r.clone()], si) / dot(si, si);
    for (x, y) in v[r.clone()].iter_mut().zip(si) {
        *x -= c * y;
    }
    let bp = dir.join("background.wav");
    write_wav(&Waveform::new(v, SR).unwrap(), &bp).unwrap();
    (sp, bp)
}

fn read_csv(path: &Path) -> Vec<(String, Vec<f64>)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,snr_db,si_sdr,si_sir");
    lines
        .map(|l| {
            let mut cols = l.split(',');
            let id = cols.next().unwrap().to_string();
            (id, cols.map(|c| c.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn mix_then_identity_evaluate_reports_the_input_snr() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let (sp, bp) = orthogonal_pair(dir.path());
    let mix = dir.path().join("mix.wav");
    ok(&[
        "mix",
        "--speech",
        s(&sp),
        "--background",
        s(&bp),
        "--snr",
        "0",
        "--output",
        s(&mix),
    ]);

    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "a\tspeech.wav\tbackground.wav\t0\tmix.wav\n").unwrap();
    let report = dir.path().join("r.csv");
    ok(&[
        "evaluate",
        "--model",
        s(&model),
        "--manifest",
        s(&manifest),
        "--report",
        s(&report),
        "--identity-mask",
    ]);

    // Recompute the SNR directly from the files on the interior samples.
    let (speech, mixture) = (read_wav(&sp).unwrap(), read_wav(&mix).unwrap());
    let r = interior(mixture.len());
    let si = &speech.samples[r.clone()];
    let resid: Vec<f64> = mixture.samples[r].iter().zip(si).map(|(m, s)| m - s).collect();
    let snr = 10.0 * (dot(si, si) / dot(&resid, &resid)).log10();
    assert!(snr.abs() < 1.0, "interior snr {snr}");

    let rows = read_csv(&report);
    let (_, vals) = &rows[0];
    assert!((vals[1] - snr).abs() <= 0.01, "si_sdr {} vs snr {snr}", vals[1]);
    assert!((vals[0] - snr).abs() <= 0.01, "snr column {} vs {snr}", vals[0]);
}

#[test]
fn identity_separation_reproduces_the_input_interior() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let (sp, _) = orthogonal_pair(dir.path());
    let out = dir.path().join("out.wav");
    ok(&[
        "separate",
        "--model",
        s(&model),
        "--input",
        s(&sp),
        "--output",
        s(&out),
        "--identity-mask",
    ]);
    let (x, y) = (read_wav(&sp).unwrap(), read_wav(&out).unwrap());
    assert_eq!(x.len(), y.len());
    let r = interior(x.len());
    let err = x.samples[r.clone()]
        .iter()
        .zip(&y.samples[r])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "max interior error {err}");
}

#[test]
fn separation_is_deterministic_and_fresh_refinement_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let (sp, _) = orthogonal_pair(dir.path());
    let outs: Vec<PathBuf> = ["a.wav", "b.wav", "c.wav"].iter().map(|n| dir.path().join(n)).collect();
    ok(&[
        "separate",
        "--model",
        s(&model),
        "--input",
        s(&sp),
        "--output",
        s(&outs[0]),
    ]);
    ok(&[
        "separate",
        "--model",
        s(&model),
        "--input",
        s(&sp),
        "--output",
        s(&outs[1]),
    ]);
    ok(&[
        "separate",
        "--model",
        s(&model),
        "--input",
        s(&sp),
        "--output",
        s(&outs[2]),
        "--no-nlr",
    ]);
    let bytes: Vec<Vec<u8>> = outs.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    // the refinement output layer starts at zero
    assert_eq!(bytes[0], bytes[2]);
}

#[test]
fn info_total_matches_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let text = ok(&["info", "--model", s(&model)]);
    let net = Checkpoint::load(&model).unwrap().into_model().unwrap();
    let total: usize = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("total"))
        .expect("total line")
        .trim()
        .parse()
        .unwrap();
    assert_eq!(total, net.param_count());
    let listed: usize = net.param_breakdown().iter().map(|(_, n)| n).sum();
    assert_eq!(listed, total);
    for (module, n) in net.param_breakdown() {
        assert!(text.contains(&module.to_string()) && text.contains(&n.to_string()));
    }
    assert!(text.contains("channels") && text.contains("sample_rate"));
    // deterministic
    assert_eq!(text, ok(&["info", "--model", s(&model)]));
}

#[test]
fn evaluate_aggregates_match_the_item_rows() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&[
        "synth",
        "--out",
        s(&corpus),
        "--items",
        "3",
        "--seconds",
        "0.5",
        "--sample-rate",
        "16000",
        "--seed",
        "4",
    ]);
    let report = dir.path().join("r.csv");
    let table = ok(&[
        "evaluate",
        "--model",
        s(&model),
        "--manifest",
        s(&corpus.join("manifest.tsv")),
        "--report",
        s(&report),
    ]);
    assert!(table.contains("si_sdr") && table.contains('±'));
    let rows = read_csv(&report);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[3].0, "mean");
    assert_eq!(rows[4].0, "std");
    for j in 0..3 {
        let vals: Vec<f64> = rows[..3].iter().map(|(_, v)| v[j]).collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((rows[3].1[j] - mean).abs() <= 2e-6, "mean col {j}");
        assert!((rows[4].1[j] - std).abs() <= 2e-6, "std col {j}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["separate", "--model", "x"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&[
            "mix",
            "--speech",
            "a",
            "--background",
            "b",
            "--snr",
            "loud",
            "--output",
            "c"
        ])
        .status
        .code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "train.steps = 1\nmodel.chanels = 8\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = run(&["train", "--set", "train.lr=-1", "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn runtime_failures_exit_1_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.wav");
    let o = run(&[
        "separate",
        "--model",
        "/nonexistent.ckpt",
        "--input",
        "/nonexistent.wav",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    // 16 kHz model fed 48 kHz audio
    let model = tiny_model(dir.path());
    let wav = dir.path().join("in48k.wav");
    write_wav(&Waveform::new(vec![0.1; 4800], 48_000).unwrap(), &wav).unwrap();
    let o = run(&[
        "separate",
        "--model",
        s(&model),
        "--input",
        s(&wav),
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Hz"));
    assert!(!out.exists());

    // corrupt checkpoint
    let bad = dir.path().join("bad.ckpt");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(run(&["info", "--model", s(&bad)]).status.code(), Some(1));

    let report = dir.path().join("r.csv");
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "a\tmissing.wav\tmissing.wav\t0\n").unwrap();
    let o = run(&[
        "evaluate",
        "--model",
        s(&model),
        "--manifest",
        s(&manifest),
        "--report",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!report.exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains("partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn help_documents_flags_and_config_keys() {
    let text = ok(&["train", "--help"]);
    for flag in [
        "--config",
        "--no-nlr",
        "--out-dir",
        "--steps",
        "--seed",
        "--resume",
        "--set",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for key in ["model.channels", "train.lr", "data.manifest", "out_dir"] {
        assert!(text.contains(key), "missing {key}");
    }
    let text = ok(&["separate", "--help"]);
    assert!(text.contains("--identity-mask") && text.contains("--no-nlr"));
    let text = ok(&["mix", "--help"]);
    assert!(text.contains("--awgn-snr") && text.contains("--seed"));
}

#[test]
fn mix_reports_the_target_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (sp, bp) = orthogonal_pair(dir.path());
    let out = dir.path().join("mix.wav");
    let text = ok(&[
        "mix",
        "--speech",
        s(&sp),
        "--background",
        s(&bp),
        "--snr",
        "-3.5",
        "--output",
        s(&out),
    ]);
    assert!(text.contains("snr -3.5000 dB"), "{text}");
    let with_noise = dir.path().join("noisy.wav");
    ok(&[
        "mix",
        "--speech",
        s(&sp),
        "--background",
        s(&bp),
        "--snr",
        "-3.5",
        "--awgn-snr",
        "20",
        "--seed",
        "9",
        "--output",
        s(&with_noise),
    ]);
    assert_ne!(std::fs::read(&out).unwrap(), std::fs::read(&with_noise).unwrap());
}

#[test]
fn train_then_resume_appends_to_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny smoke run\n\
         model.channels = 8\nmodel.bands = 16\nmodel.depth = 2\nmodel.bins = 33\nmodel.sample_rate = 16000\n\
         train.batch_size = 2\ntrain.segment_s = 0.25\ntrain.steps = 2\ntrain.checkpoint_every = 1\n\
         data.synth_items = 2\ndata.synth_seconds = 0.5\nout_dir = run\n",
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg), "--quiet"]);
    let run_dir = dir.path().join("run");
    for f in ["train_log.csv", "step_000001.ckpt", "step_000002.ckpt", "final.ckpt"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let ck = Checkpoint::load(&run_dir.join("final.ckpt")).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap().step, 2);

    let resume = run_dir.join("step_000002.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--resume",
        s(&resume),
        "--steps",
        "3",
        "--quiet",
    ]);
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,si_sdr_est,wall_ms");
    assert_eq!(lines.len(), 4, "{log}");
    assert!(lines[1].starts_with("0,") && lines[3].starts_with("2,"), "{log}");

    // ablation flag reaches the checkpoint metadata
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--no-nlr",
        "--steps",
        "1",
        "--out-dir",
        s(&dir.path().join("abl")),
        "--quiet",
    ]);
    let ck = Checkpoint::load(&dir.path().join("abl/final.ckpt")).unwrap();
    assert_eq!(ck.metadata.get("nlr_enabled").map(String::as_str), Some("false"));
}
