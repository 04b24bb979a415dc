//! SI-SDR training with Adam, deterministic batch sampling, logging and
//! checkpoint/resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{mix_at_snr, MixSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::metrics::si_sdr;
use crate::model::ConcateNet;
use crate::numerics::{apply_bn_updates, BatchStats, Graph, Mode, ParamStore, Tape, Var};
use crate::par;
use crate::stft::{Spectrogram, Stft, Waveform};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round updated parameters to f32 so checkpoints store them exactly.
    pub round_f32: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            round_f32: true,
        }
    }
}

/// Step count and per-parameter first/second moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        if !t.requires_grad() {
            continue;
        }
        match grads.get(name) {
            None => return arg_err(format!("missing gradient for `{name}`")),
            Some(g) if g.len() != t.len() => {
                return shape_err(format!(
                    "gradient for `{name}` has {} values, expected {}",
                    g.len(),
                    t.len()
                ))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let upd = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *x -= upd;
            if cfg.round_f32 {
                *x = *x as f32 as f64;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub segment_s: f64,
    pub steps: u64,
    pub seed: u64,
    pub snr_low: f64,
    pub snr_high: f64,
    pub nlr_enabled: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Global gradient-norm clip (0: off).
    pub grad_clip: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every`
    /// steps (0: constant rate).
    pub lr_decay: f64,
    pub lr_decay_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            segment_s: 4.0,
            steps: 1000,
            seed: 0,
            snr_low: -5.0,
            snr_high: 15.0,
            nlr_enabled: true,
            checkpoint_every: 0,
            grad_clip: 0.0,
            lr_decay: 1.0,
            lr_decay_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.segment_s > 0.0) {
            return bad("segment_s must be positive");
        }
        if !(self.snr_low.is_finite() && self.snr_high.is_finite() && self.snr_low <= self.snr_high) {
            return bad("snr range must be finite with low <= high");
        }
        if !(self.grad_clip >= 0.0) || !(self.lr_decay > 0.0) {
            return bad("grad_clip must be >= 0 and lr_decay > 0");
        }
        Ok(())
    }

    pub fn adam(&self, step: u64) -> AdamConfig {
        let decays = step.checked_div(self.lr_decay_every).unwrap_or(0);
        AdamConfig {
            lr: self.lr * self.lr_decay.powi(decays.min(i32::MAX as u64) as i32),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            round_f32: true,
        }
    }
}

/// Differentiable negative SI-SDR between the synthesized estimate and the
/// reference, restricted to the fully overlapped interior samples.
pub fn si_sdr_loss_var(tape: &mut Tape, stft: &Stft, estimate: Var, reference: &[f64]) -> Result<Var> {
    let frames = tape.value(estimate).dims3()?[1];
    let wave = stft.synthesize_var(tape, estimate)?;
    let range = stft.interior(frames);
    if range.is_empty() {
        return arg_err("segment too short: no interior samples");
    }
    if reference.len() < range.end {
        return shape_err(format!("reference has {} samples, need {}", reference.len(), range.end));
    }
    let inner = tape.slice1(wave, range.start, range.end)?;
    let sdr = tape.si_sdr(inner, &reference[range])?;
    Ok(tape.scale(sdr, -1.0))
}

/// Value of the loss for a finished estimate.
pub fn si_sdr_loss(stft: &Stft, estimate: &Spectrogram, reference: &Waveform) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = tape.constant(estimate.pack());
    let l = si_sdr_loss_var(&mut tape, stft, v, &reference.samples)?;
    Ok(tape.value(l).data()[0])
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub mixture: Waveform,
    pub speech: Waveform,
}

/// Log row written per step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub si_sdr_est: f64,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,loss,si_sdr_est,wall_ms";

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.6},{:.3}",
            self.step, self.loss, self.si_sdr_est, self.wall_ms
        )
    }
}

pub struct Trainer {
    pub model: ConcateNet,
    pub cfg: TrainConfig,
    pub opt: AdamState,
    corpus: Vec<(Waveform, Waveform)>,
    segment: usize,
}

struct ItemResult {
    loss: f64,
    grads: BTreeMap<String, Vec<f64>>,
    bn: Vec<(String, BatchStats)>,
}

impl Trainer {
    pub fn new(model: ConcateNet, corpus: Vec<(Waveform, Waveform)>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return arg_err("training corpus is empty");
        }
        let sr = model.config.sample_rate;
        let segment = (cfg.segment_s * f64::from(sr)).round() as usize;
        let stft = model.stft();
        let frames = stft.frame_count(segment).unwrap_or(0);
        if stft.interior(frames).is_empty() {
            return arg_err(format!("segment of {segment} samples leaves no interior region"));
        }
        for (i, (s, v)) in corpus.iter().enumerate() {
            if s.sample_rate != sr || v.sample_rate != sr {
                return arg_err(format!("corpus item {i} is not sampled at {sr} Hz"));
            }
            if s.len().min(v.len()) < segment {
                return arg_err(format!(
                    "corpus item {i} has {} samples, shorter than the {segment}-sample segment",
                    s.len().min(v.len())
                ));
            }
        }
        Ok(Self {
            model,
            cfg,
            opt: AdamState::default(),
            corpus,
            segment,
        })
    }

    /// Restores model and optimizer state saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, corpus: Vec<(Waveform, Waveform)>, cfg: TrainConfig) -> Result<Self> {
        let opt = ckpt.optimizer.clone().unwrap_or_default();
        let mut t = Self::new(ckpt.into_model()?, corpus, cfg)?;
        t.opt = opt;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.optimizer = Some(self.opt.clone());
        ck.metadata.insert("step".into(), self.opt.step.to_string());
        ck.metadata.insert("seed".into(), self.cfg.seed.to_string());
        ck.metadata
            .insert("nlr_enabled".into(), self.cfg.nlr_enabled.to_string());
        ck
    }

    /// The examples used at `step`; a pure function of `(seed, step)`.
    pub fn batch(&self, step: u64) -> Result<Vec<Example>> {
        (0..self.cfg.batch_size)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(step * self.cfg.batch_size as u64 + b as u64);
                let (s, v) = &self.corpus[rng.random_range(0..self.corpus.len())];
                let snr = if self.cfg.snr_low < self.cfg.snr_high {
                    rng.random_range(self.cfg.snr_low..self.cfg.snr_high)
                } else {
                    self.cfg.snr_low
                };
                let span = s.len().min(v.len()) - self.segment;
                let off = if span > 0 { rng.random_range(0..=span) } else { 0 };
                let cut = |w: &Waveform| Waveform::new(w.samples[off..off + self.segment].to_vec(), w.sample_rate);
                let m = mix_at_snr(&MixSpec {
                    speech: cut(s)?,
                    background: cut(v)?,
                    snr_db: snr,
                    awgn_snr_db: None,
                    seed: 0,
                })?;
                Ok(Example {
                    mixture: m.mixture,
                    speech: m.speech,
                })
            })
            .collect()
    }

    fn item(&self, ex: &Example, with_grads: bool) -> Result<ItemResult> {
        let model = &self.model;
        let y = model.stft().analyze(&ex.mixture)?;
        let mut g = Graph::new(&model.params, Mode::Train, with_grads);
        let x = g.tape.constant(y.pack());
        let out = model.forward(&mut g, x, self.cfg.nlr_enabled)?;
        let loss = si_sdr_loss_var(&mut g.tape, model.stft(), out.estimate, &ex.speech.samples)?;
        let value = g.tape.value(loss).data()[0];
        let grads = if with_grads {
            g.tape.backward(loss)?;
            g.tape.param_grads()
        } else {
            BTreeMap::new()
        };
        Ok(ItemResult {
            loss: value,
            grads,
            bn: g.bn_updates,
        })
    }

    /// Mean loss of the batch at `step` under the current parameters,
    /// without updating anything.
    pub fn batch_loss(&self, step: u64) -> Result<f64> {
        let batch = self.batch(step)?;
        let items: Vec<Result<ItemResult>> = par::map_slice(&batch, |ex| self.item(ex, false));
        let mut sum = 0.0;
        for r in items {
            sum += r?.loss;
        }
        Ok(sum / batch.len() as f64)
    }

    /// Runs one optimization step and returns its log row.
    pub fn step(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        let step = self.opt.step;
        let batch = self.batch(step)?;
        let items: Vec<Result<ItemResult>> = par::map_slice(&batch, |ex| self.item(ex, true));
        let mut grads: BTreeMap<String, Vec<f64>> = self
            .model
            .params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
            .collect();
        let mut loss = 0.0;
        let mut bn = Vec::new();
        for r in items {
            let r = r?;
            loss += r.loss;
            for (name, g) in r.grads {
                if let Some(acc) = grads.get_mut(&name) {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
            bn.extend(r.bn);
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        let mut sq = 0.0;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        if self.cfg.grad_clip > 0.0 && sq.sqrt() > self.cfg.grad_clip {
            let c = self.cfg.grad_clip / sq.sqrt();
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= c));
        }
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss at step {step}")));
        }
        adam_step(&mut self.model.params, &grads, &mut self.opt, &self.cfg.adam(step))?;
        apply_bn_updates(&mut self.model.params, &bn)?;
        Ok(StepReport {
            step,
            loss,
            si_sdr_est: -loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// SI-SDR of the eval-mode estimate and of the unprocessed mixture on
    /// the interior region of `ex`.
    pub fn evaluate_example(&self, ex: &Example) -> Result<(f64, f64)> {
        let stft = self.model.stft();
        let y = stft.analyze(&ex.mixture)?;
        let (est, _) = self.model.separate_spectrogram(&y, self.cfg.nlr_enabled)?;
        let wave = stft.synthesize(&est, ex.mixture.sample_rate)?;
        let r = stft.interior(y.frames());
        Ok((
            si_sdr(&wave.samples[r.clone()], &ex.speech.samples[r.clone()])?,
            si_sdr(&ex.mixture.samples[r.clone()], &ex.speech.samples[r])?,
        ))
    }
}

/// Where a training run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

/// Runs until `cfg.steps` optimizer steps have been taken, appending one
/// CSV row per step to `log` and writing checkpoints when `out` is given.
pub fn train_loop(trainer: &mut Trainer, out: Option<&RunOutput>, mut log: impl Write) -> Result<Vec<StepReport>> {
    let mut reports = Vec::new();
    while trainer.step_count() < trainer.cfg.steps {
        let r = trainer.step()?;
        writeln!(log, "{}", r.csv_row())?;
        reports.push(r);
        let done = trainer.step_count();
        if let Some(out) = out {
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && done.is_multiple_of(every) {
                trainer.checkpoint().save(&out.checkpoint_path(done))?;
            }
        }
    }
    log.flush()?;
    if let Some(out) = out {
        trainer.checkpoint().save(&out.final_path())?;
    }
    Ok(reports)
}

/// Opens (or continues) a log file, writing the header for a new file.
pub fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    if !append || !exists {
        writeln!(f, "{LOG_HEADER}")?;
    }
    Ok(f)
}
