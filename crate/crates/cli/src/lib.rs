//! Command-line front end for the `concatenet` library.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use concatenet::checkpoint::Checkpoint;
use concatenet::data::{self, MixSpec};
use concatenet::metrics::{self, EvalReport};
use concatenet::model::{ConcateNet, SeparateOptions};
use concatenet::par;
use concatenet::stft::Waveform;
use concatenet::trainer::{self, RunOutput, Trainer};

use config::{DataSource, RunConfig};

/// Exit code for bad flags, config keys or values.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a valid command.
pub const EXIT_FAILURE: i32 = 1;

/// An error in what the user asked for, as opposed to a failure doing it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(
    name = "concatenet",
    version,
    about = "Dialogue separation: train, separate, mix, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Write an untrained checkpoint.
    Init(InitArgs),
    /// Extract dialogue from a WAV file.
    Separate(SeparateArgs),
    /// Score a model on a manifest and write a CSV report.
    Evaluate(EvaluateArgs),
    /// Mix speech and background at a target SNR.
    Mix(MixArgs),
    /// Write a synthetic speech/background corpus with a manifest.
    Synth(SynthArgs),
    /// Print a checkpoint's configuration and parameter counts.
    Info(InfoArgs),
}

fn config_help() -> String {
    format!(
        "Config keys (`key = value`, `#` starts a comment):\n{}",
        config::keys_help()
    )
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file with `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Train the ablation without the refinement stage.
    #[arg(long)]
    pub no_nlr: bool,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Total optimizer steps (overrides `train.steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Batch sampling seed (overrides `train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint (overrides `resume`).
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Config file; only `model.*` keys are used.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Use the small test configuration as the starting point.
    #[arg(long)]
    pub tiny: bool,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Destination checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[arg(long, value_name = "WAV")]
    pub input: PathBuf,
    #[arg(long, value_name = "WAV")]
    pub output: PathBuf,
    /// Skip the refinement stage.
    #[arg(long)]
    pub no_nlr: bool,
    /// Debug: bypass the network and apply a 1+0i mask.
    #[arg(long)]
    pub identity_mask: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Tab-separated `id speech background snr_db [mixture]` lines.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// CSV output with per-item rows followed by mean and std.
    #[arg(long, value_name = "CSV")]
    pub report: PathBuf,
    /// Skip the refinement stage.
    #[arg(long)]
    pub no_nlr: bool,
    /// Debug: score the mixture itself as the estimate.
    #[arg(long)]
    pub identity_mask: bool,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long, value_name = "WAV")]
    pub speech: PathBuf,
    #[arg(long, value_name = "WAV")]
    pub background: PathBuf,
    /// Speech-to-background ratio in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: f64,
    /// Add white noise this many dB below the mixture.
    #[arg(long, allow_hyphen_values = true)]
    pub awgn_snr: Option<f64>,
    /// Seed for the white noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "WAV")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives WAV pairs and manifest.tsv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub items: usize,
    #[arg(long, default_value_t = 5.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 48_000)]
    pub sample_rate: u32,
    /// Lowest manifest SNR in dB.
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    pub snr_low: f64,
    /// Highest manifest SNR in dB.
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    pub snr_high: f64,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Messages go to stdout/stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run(cmd: Command, out: &mut impl Write) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a, out),
        Command::Init(a) => init(a, out),
        Command::Separate(a) => separate(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Mix(a) => mix(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Info(a) => info(a, out),
    }
}

fn load_config(file: Option<&Path>, sets: &[String], base_cfg: RunConfig) -> Result<RunConfig> {
    let mut cfg = base_cfg;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let pairs = match config::parse_pairs(&text) {
            Ok(p) => p,
            Err(e) => return usage(format!("{}: {e}", path.display())),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if let Err(e) = cfg.apply(&pairs, base) {
            return usage(format!("{}: {e}", path.display()));
        }
    }
    let mut pairs = Vec::new();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got `{s}`"));
        };
        let k = k.trim();
        if let Err(e) = config::check_key(k) {
            return usage(format!("--set: {e}"));
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    if let Err(e) = cfg.apply(&pairs, Path::new(".")) {
        return usage(format!("--set: {e}"));
    }
    Ok(cfg)
}

fn load_corpus(data: &DataSource, sample_rate: u32) -> Result<Vec<(Waveform, Waveform)>> {
    match data {
        DataSource::Synth { items, seconds, seed } => Ok(data::synth_corpus(*seed, *items, *seconds, sample_rate)?),
        DataSource::Manifest(path) => {
            let entries = data::read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
            par::map_slice(&entries, |e| -> Result<_> {
                let s = data::read_wav(&e.speech)?;
                let v = data::read_wav(&e.background)?;
                Ok((s, v))
            })
            .into_iter()
            .collect()
        }
    }
}

fn train(a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.set, RunConfig::default())?;
    if a.no_nlr {
        cfg.train.nlr_enabled = false;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = a.resume {
        cfg.resume = Some(r);
    }
    let resume = match &cfg.resume {
        Some(path) => Some(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    if let Some(ck) = &resume {
        cfg.model = ck.config.clone();
    }
    if let Err(e) = cfg.validate() {
        return usage(e);
    }

    let corpus = load_corpus(&cfg.data, cfg.model.sample_rate)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, corpus, cfg.train.clone())?,
        None => Trainer::new(
            ConcateNet::new(cfg.model.clone(), cfg.init_seed)?,
            corpus,
            cfg.train.clone(),
        )?,
    };
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let run = RunOutput {
        dir: cfg.out_dir.clone(),
    };
    let log = trainer::open_log(&run.log_path(), cfg.resume.is_some())?;
    writeln!(
        out,
        "training {} parameters for {} steps (from step {}), nlr {}",
        trainer.model.param_count(),
        cfg.train.steps,
        trainer.step_count(),
        if cfg.train.nlr_enabled { "on" } else { "off" }
    )?;
    let progress = Progress { log, quiet: a.quiet };
    let reports = trainer::train_loop(&mut trainer, Some(&run), progress)?;
    if let Some(last) = reports.last() {
        writeln!(out, "final step {} loss {:.4} dB", last.step, last.loss)?;
    }
    writeln!(out, "wrote {}", run.final_path().display())?;
    Ok(())
}

/// Log sink that also echoes rows to stderr.
struct Progress {
    log: std::fs::File,
    quiet: bool,
}

impl Write for Progress {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if !self.quiet {
            std::io::stderr().write_all(buf)?;
        }
        self.log.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.log.flush()
    }
}

fn init(a: InitArgs, out: &mut impl Write) -> Result<()> {
    let mut base = RunConfig::default();
    if a.tiny {
        base.model = concatenet::model::ModelConfig::tiny();
    }
    let cfg = load_config(a.config.as_deref(), &a.set, base)?;
    if let Err(e) = cfg.model.validate() {
        return usage(e.to_string());
    }
    let model = ConcateNet::new(cfg.model, cfg.init_seed)?;
    let mut ck = Checkpoint::from_model(&model);
    ck.metadata.insert("step".into(), "0".into());
    ck.save(&a.output)?;
    writeln!(out, "wrote {} ({} parameters)", a.output.display(), model.param_count())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ConcateNet> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_model()?)
}

fn read_input(path: &Path) -> Result<Waveform> {
    data::read_wav(path).with_context(|| format!("reading {}", path.display()))
}

fn separate(a: SeparateArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let x = read_input(&a.input)?;
    let opts = SeparateOptions {
        nlr_enabled: !a.no_nlr,
        identity_mask: a.identity_mask,
    };
    let y = model.separate(&x, opts)?;
    data::write_wav(&y, &a.output)?;
    writeln!(out, "wrote {} ({:.2} s)", a.output.display(), y.duration_s())?;
    Ok(())
}

pub const EVAL_METRICS: [&str; 3] = ["snr_db", "si_sdr", "si_sir"];

/// Scores one manifest item on the fully overlapped interior samples.
/// Returns `[input snr, si_sdr, si_sir]`.
fn score_item(model: &ConcateNet, e: &data::ManifestEntry, opts: SeparateOptions) -> Result<Vec<f64>> {
    let speech = read_input(&e.speech)?;
    let (mixture, speech) = match &e.mixture {
        Some(path) => {
            let m = read_input(path)?;
            let n = m.len().min(speech.len());
            let s = Waveform::new(speech.samples[..n].to_vec(), speech.sample_rate)?;
            let m = Waveform::new(m.samples[..n].to_vec(), m.sample_rate)?;
            (m, s)
        }
        None => {
            let bg = read_input(&e.background)?;
            let mixed = data::mix_at_snr(&MixSpec {
                speech,
                background: bg,
                snr_db: e.snr_db,
                awgn_snr_db: None,
                seed: 0,
            })?;
            (mixed.mixture, mixed.speech)
        }
    };
    if mixture.sample_rate != speech.sample_rate {
        bail!("{}: mixture and speech sample rates differ", e.id);
    }
    let est = model.separate(&mixture, opts)?;
    let stft = model.stft();
    let frames = stft.frame_count(mixture.len()).unwrap_or(0);
    let r = stft.interior(frames);
    if r.is_empty() {
        bail!("{}: too short to score ({} samples)", e.id, mixture.len());
    }
    let s = &speech.samples[r.clone()];
    let interference: Vec<f64> = mixture.samples[r.clone()].iter().zip(s).map(|(m, s)| m - s).collect();
    let est = &est.samples[r];
    Ok(vec![
        metrics::snr_db(s, &interference)?,
        metrics::si_sdr(est, s)?,
        metrics::si_sir(est, s, &interference)?,
    ])
}

fn evaluate(a: EvaluateArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let entries =
        data::read_manifest(&a.manifest).with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    if entries.is_empty() {
        bail!("manifest {} has no items", a.manifest.display());
    }
    let opts = SeparateOptions {
        nlr_enabled: !a.no_nlr,
        identity_mask: a.identity_mask,
    };
    let rows = par::map_slice(&entries, |e| {
        score_item(&model, e, opts).with_context(|| format!("item {}", e.id))
    });
    let mut report = EvalReport::new(&EVAL_METRICS);
    for (e, row) in entries.iter().zip(rows) {
        report.push(e.id.clone(), row?)?;
    }
    let csv = report.to_csv();
    data::write_atomic(&a.report, |tmp| Ok(std::fs::write(tmp, csv.as_bytes())?))?;
    write!(out, "{}", report.to_table())?;
    writeln!(out, "wrote {}", a.report.display())?;
    Ok(())
}

fn mix(a: MixArgs, out: &mut impl Write) -> Result<()> {
    let speech = read_input(&a.speech)?;
    let background = read_input(&a.background)?;
    let m = data::mix_at_snr(&MixSpec {
        speech,
        background,
        snr_db: a.snr,
        awgn_snr_db: a.awgn_snr,
        seed: a.seed,
    })?;
    data::write_wav(&m.mixture, &a.output)?;
    let achieved = metrics::snr_db(&m.speech.samples, &m.background.samples)?;
    writeln!(
        out,
        "wrote {} ({} samples, snr {achieved:.4} dB, background gain {:.6})",
        a.output.display(),
        m.mixture.len(),
        m.gain
    )?;
    Ok(())
}

fn synth(a: SynthArgs, out: &mut impl Write) -> Result<()> {
    if !(a.snr_low <= a.snr_high) {
        return usage("--snr-low must not exceed --snr-high");
    }
    let path = data::write_synth_corpus(
        &a.out,
        a.seed,
        a.items,
        a.seconds,
        a.sample_rate,
        (a.snr_low, a.snr_high),
    )?;
    writeln!(out, "wrote {} items, manifest {}", a.items, path.display())?;
    Ok(())
}

fn info(a: InfoArgs, out: &mut impl Write) -> Result<()> {
    let ck = Checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let meta = ck.metadata.clone();
    let has_opt = ck.optimizer.is_some();
    let model = ck.into_model()?;
    let c = &model.config;
    writeln!(out, "config")?;
    for (k, v) in [
        ("channels", c.channels.to_string()),
        ("bands", c.bands.to_string()),
        ("depth", c.depth.to_string()),
        ("bins", c.bins.to_string()),
        ("nlr_channels", c.nlr_channels.to_string()),
        ("sample_rate", c.sample_rate.to_string()),
        ("window", c.window_len().to_string()),
        ("hop", c.hop().to_string()),
    ] {
        writeln!(out, "  {k:<14}{v}")?;
    }
    writeln!(out, "parameters")?;
    for (module, n) in model.param_breakdown() {
        writeln!(out, "  {module:<14}{n}")?;
    }
    writeln!(out, "  {:<14}{}", "total", model.param_count())?;
    if !meta.is_empty() || has_opt {
        writeln!(out, "metadata")?;
        for (k, v) in &meta {
            writeln!(out, "  {k:<14}{v}")?;
        }
        writeln!(out, "  {:<14}{}", "optimizer", if has_opt { "yes" } else { "no" })?;
    }
    Ok(())
}
