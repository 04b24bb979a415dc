//! The separation network and its parameter set.
//!
//! Parameter layout (prefixes):
//!
//! ```text
//! input.conv, input.bn                        full 3x3 conv 2 -> C
//! encoder.{i}.down.{dw,pw,bn}                 stride-2 separable conv
//! encoder.{i}.fparallel.local.*               separable conv C -> C/2
//! encoder.{i}.fparallel.global.cnn.*          separable conv C -> C/2
//! encoder.{i}.fparallel.global.gru.{fwd,bwd}  GRU over frequency
//! encoder.{i}.conv{0,1}.*                     separable conv C -> C
//! bottleneck.tparallel.{local,global.cnn,global.gru}
//! decoder.{i}.up.{dw,pw,bn}                   transposed stride-2 separable conv
//! decoder.{i}.fparallel.*, decoder.{i}.conv{0,1}.*
//! output.conv                                 full 3x3 conv C -> 2, tanh
//! nlr.{0..4}.{conv,bn}, nlr.out.conv          refinement stack
//! ```

use std::sync::Arc;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::filterbank::{build_filterbank, FilterbankMatrices, FilterbankSpec};
use crate::masking::ComplexMask;
use crate::numerics::layers::init;
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};
use crate::stft::{Spectrogram, Stft, Waveform};

/// Number of hidden layers (each conv + BN + ReLU) in the refinement stack.
pub const NLR_HIDDEN_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub bands: usize,
    pub depth: usize,
    pub bins: usize,
    pub nlr_channels: usize,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            bands: 256,
            depth: 3,
            bins: 1025,
            nlr_channels: 8,
            sample_rate: 48_000,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            bands: 16,
            depth: 2,
            bins: 33,
            nlr_channels: 8,
            sample_rate: 48_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels < 4 || !self.channels.is_multiple_of(4) {
            // the frequency GRU runs bidirectionally over C/2 features
            return bad(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let div = 1usize << self.depth.min(30);
        if self.bands < 2 || !self.bands.is_multiple_of(div) {
            return bad(format!("bands ({}) must be divisible by 2^depth ({div})", self.bands));
        }
        if self.bins < 3 {
            return bad(format!("bins must be at least 3, got {}", self.bins));
        }
        if self.nlr_channels == 0 {
            return bad("nlr_channels must be positive".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * (self.bins - 1)
    }

    pub fn hop(&self) -> usize {
        self.window_len() / 2
    }

    /// Band count at the bottleneck.
    pub fn bottleneck_bands(&self) -> usize {
        self.bands >> self.depth
    }

    pub fn filterbank_spec(&self) -> FilterbankSpec {
        FilterbankSpec {
            bins: self.bins,
            bands: self.bands,
            sample_rate: self.sample_rate,
            f_min: 50.0,
            f_max: 23_000.0f64.min(0.48 * f64::from(self.sample_rate)),
        }
    }
}

/// Handles returned by [`ConcateNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Final packed estimate `[2, T, K]`.
    pub estimate: Var,
    /// Masked estimate before refinement.
    pub masked: Var,
    /// Packed complex mask, each component in (-1, 1).
    pub mask: Var,
    /// Bottleneck feature map `[C, T, B / 2^depth]`.
    pub bottleneck: Var,
}

#[derive(Clone, Debug)]
pub struct ConcateNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    filterbank: Arc<FilterbankMatrices>,
    stft: Stft,
}

fn init_separable(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, seed: u64) -> Result<()> {
    init::conv(store, &format!("{prefix}.dw"), c_in, 1, 3, 3, seed)?;
    init::conv(store, &format!("{prefix}.pw"), c_out, c_in, 1, 1, seed)?;
    init::batch_norm(store, &format!("{prefix}.bn"), c_out)
}

fn init_parallel(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    gru_features: usize,
    bidirectional: bool,
    seed: u64,
) -> Result<()> {
    init_separable(store, &format!("{prefix}.local"), c, c / 2, seed)?;
    init_separable(store, &format!("{prefix}.global.cnn"), c, c / 2, seed)?;
    init::gru(
        store,
        &format!("{prefix}.global.gru"),
        gru_features,
        bidirectional,
        seed,
    )
}

/// Registers every parameter of a model with `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let c = config.channels;
    let mut s = ParamStore::new();
    init::conv(&mut s, "input.conv", c, 2, 3, 3, seed)?;
    init::batch_norm(&mut s, "input.bn", c)?;
    for i in 0..config.depth {
        for side in ["encoder", "decoder"] {
            let p = format!("{side}.{i}");
            let resample = if side == "encoder" { "down" } else { "up" };
            init_separable(&mut s, &format!("{p}.{resample}"), c, c, seed)?;
            init_parallel(&mut s, &format!("{p}.fparallel"), c, c / 2, true, seed)?;
            init_separable(&mut s, &format!("{p}.conv0"), c, c, seed)?;
            init_separable(&mut s, &format!("{p}.conv1"), c, c, seed)?;
        }
    }
    init_parallel(
        &mut s,
        "bottleneck.tparallel",
        c,
        config.bottleneck_bands(),
        false,
        seed,
    )?;
    init::conv(&mut s, "output.conv", 2, c, 3, 3, seed)?;
    let n = config.nlr_channels;
    for i in 0..NLR_HIDDEN_LAYERS {
        init::conv(
            &mut s,
            &format!("nlr.{i}.conv"),
            n,
            if i == 0 { 2 } else { n },
            3,
            3,
            seed,
        )?;
        init::batch_norm(&mut s, &format!("nlr.{i}.bn"), n)?;
    }
    // zero residual at init: the refinement starts as a no-op and the
    // ablation pair shares all non-refinement gradients at step 0
    init::conv(&mut s, "nlr.out.conv", 2, n, 3, 3, seed)?;
    for name in ["nlr.out.conv.weight", "nlr.out.conv.bias"] {
        s.get_mut(name)?.data_mut().fill(0.0);
    }
    Ok(s)
}

/// Top-level submodule a parameter belongs to, used for count breakdowns.
pub fn submodule_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    match first {
        "encoder" | "decoder" => {
            let second = parts.next().unwrap_or("");
            &name[..first.len() + 1 + second.len()]
        }
        _ => first,
    }
}

impl ConcateNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set after checking that it has exactly
    /// the names and shapes `config` requires.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let expected = init_params(&config, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Ok(p) if p.shape() == t.shape() => {}
                Ok(p) => {
                    return shape_err(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    ))
                }
                Err(_) => return arg_err(format!("missing parameter `{name}`")),
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return arg_err(format!("unexpected parameter `{extra}`"));
        }
        let filterbank = Arc::new(build_filterbank(config.filterbank_spec())?);
        let stft = Stft::new(config.window_len(), config.hop())?;
        Ok(Self {
            config,
            params,
            filterbank,
            stft,
        })
    }

    pub fn filterbank(&self) -> &FilterbankMatrices {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Trainable scalar count; batch-norm running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable scalar count per top-level submodule, in network order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut order = vec!["input".to_string()];
        order.extend((0..self.config.depth).map(|i| format!("encoder.{i}")));
        order.push("bottleneck".into());
        order.extend((0..self.config.depth).map(|i| format!("decoder.{i}")));
        order.push("output".into());
        order.push("nlr".into());
        order
            .into_iter()
            .map(|m| {
                let n = self
                    .params
                    .iter()
                    .filter(|(name, t)| t.requires_grad() && submodule_of(name) == m)
                    .map(|(_, t)| t.len())
                    .sum();
                (m, n)
            })
            .collect()
    }

    /// Builds the full graph for a packed mixture `[2, T, K]`.
    pub fn forward(&self, g: &mut Graph, mixture: Var, nlr_enabled: bool) -> Result<ForwardOutput> {
        let [ch, _, k] = g.tape.value(mixture).dims3()?;
        if ch != 2 || k != self.config.bins {
            return shape_err(format!(
                "mixture must be [2, T, {}], got {:?}",
                self.config.bins,
                g.tape.shape(mixture)
            ));
        }
        let x = self.input_module(g, mixture)?;
        let mut x = self.filterbank.analyze(&mut g.tape, x)?;
        for i in 0..self.config.depth {
            x = self.encoder_module(g, i, x)?;
        }
        let bottleneck = self.t_parallel(g, x)?;
        let mut x = bottleneck;
        for i in 0..self.config.depth {
            x = self.decoder_module(g, i, x)?;
        }
        let mask = self.output_module(g, x)?;
        let masked = g.tape.complex_mul(mask, mixture)?;
        let estimate = if nlr_enabled {
            let r = self.nlr(g, masked)?;
            g.tape.add(masked, r)?
        } else {
            masked
        };
        Ok(ForwardOutput {
            estimate,
            masked,
            mask,
            bottleneck,
        })
    }

    pub fn input_module(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [ch, _, _] = g.tape.value(x).dims3()?;
        if ch != 2 {
            return shape_err(format!("input module expects 2 channels, got {ch}"));
        }
        let y = g.conv("input.conv", x, 1, 1)?;
        let y = g.batch_norm("input.bn", y)?;
        Ok(g.tape.relu(y))
    }

    /// Depthwise 3x3 conv, pointwise 1x1 conv, batch norm, ReLU.
    fn separable(&self, g: &mut Graph, prefix: &str, x: Var, stride_f: usize, transposed: bool) -> Result<Var> {
        let c_in = g.tape.value(x).dims3()?[0];
        let dw = format!("{prefix}.dw");
        let y = if transposed {
            g.conv_transposed(&dw, x, stride_f, c_in)?
        } else {
            g.conv(&dw, x, stride_f, c_in)?
        };
        let y = g.conv(&format!("{prefix}.pw"), y, 1, 1)?;
        let y = g.batch_norm(&format!("{prefix}.bn"), y)?;
        Ok(g.tape.relu(y))
    }

    /// Local conv branch next to a conv + bidirectional frequency GRU branch.
    pub fn f_parallel(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let local = self.separable(g, &format!("{prefix}.local"), x, 1, false)?;
        let global = self.separable(g, &format!("{prefix}.global.cnn"), x, 1, false)?;
        // [C/2, T, F] -> [T, F, C/2]: one frequency sequence per frame
        let seq = g.tape.permute3(global, [1, 2, 0])?;
        let seq = g.gru(&format!("{prefix}.global.gru"), seq, true)?;
        let global = g.tape.permute3(seq, [2, 0, 1])?;
        g.tape.concat(&[local, global], 0)
    }

    /// Local conv branch next to a conv + causal time GRU branch that
    /// treats bands as features and channels as independent sequences.
    pub fn t_parallel(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [_, _, f] = g.tape.value(x).dims3()?;
        if f != self.config.bottleneck_bands() {
            return shape_err(format!(
                "bottleneck expects {} bands, got {f}",
                self.config.bottleneck_bands()
            ));
        }
        let p = "bottleneck.tparallel";
        let local = self.separable(g, &format!("{p}.local"), x, 1, false)?;
        let global = self.separable(g, &format!("{p}.global.cnn"), x, 1, false)?;
        let global = g.gru(&format!("{p}.global.gru"), global, false)?;
        g.tape.concat(&[local, global], 0)
    }

    pub fn encoder_module(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        let f = g.tape.value(x).dims3()?[2];
        if f % 2 != 0 {
            return shape_err(format!("encoder module needs an even band count, got {f}"));
        }
        let p = format!("encoder.{i}");
        let y = self.separable(g, &format!("{p}.down"), x, 2, false)?;
        let y = self.f_parallel(g, &format!("{p}.fparallel"), y)?;
        let y = self.separable(g, &format!("{p}.conv0"), y, 1, false)?;
        self.separable(g, &format!("{p}.conv1"), y, 1, false)
    }

    pub fn decoder_module(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        let p = format!("decoder.{i}");
        let y = self.separable(g, &format!("{p}.up"), x, 2, true)?;
        let y = self.f_parallel(g, &format!("{p}.fparallel"), y)?;
        let y = self.separable(g, &format!("{p}.conv0"), y, 1, false)?;
        self.separable(g, &format!("{p}.conv1"), y, 1, false)
    }

    /// Bands back to bins, conv to two channels, tanh.
    pub fn output_module(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.filterbank.synthesize(&mut g.tape, x)?;
        let y = g.conv("output.conv", y, 1, 1)?;
        Ok(g.tape.tanh(y))
    }

    /// Residual predicted from the masked estimate.
    pub fn nlr(&self, g: &mut Graph, s1: Var) -> Result<Var> {
        let ch = g.tape.value(s1).dims3()?[0];
        if ch != 2 {
            return shape_err(format!("refinement expects 2 channels, got {ch}"));
        }
        let mut x = s1;
        for i in 0..NLR_HIDDEN_LAYERS {
            let y = g.conv(&format!("nlr.{i}.conv"), x, 1, 1)?;
            let y = g.batch_norm(&format!("nlr.{i}.bn"), y)?;
            x = g.tape.relu(y);
        }
        g.conv("nlr.out.conv", x, 1, 1)
    }

    /// Sets every batch-norm running statistic to the mean of the batch
    /// statistics observed on `mixtures` (packed `[2, T, K]` tensors).
    pub fn calibrate_norms(&mut self, mixtures: &[Tensor]) -> Result<()> {
        if mixtures.is_empty() {
            return arg_err("calibrate_norms needs at least one mixture");
        }
        let mut sums: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for (n, x) in mixtures.iter().enumerate() {
            let mut g = Graph::new(&self.params, Mode::Train, false);
            let v = g.tape.constant(x.clone());
            self.forward(&mut g, v, true)?;
            for (j, (prefix, st)) in g.bn_updates.into_iter().enumerate() {
                if n == 0 {
                    sums.push((prefix, st.mean, st.var));
                } else {
                    sums[j].1.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
                    sums[j].2.iter_mut().zip(&st.var).for_each(|(a, b)| *a += b);
                }
            }
        }
        let scale = 1.0 / mixtures.len() as f64;
        for (prefix, mean, var) in sums {
            let m = self.params.get_mut(&format!("{prefix}.running_mean"))?;
            m.data_mut()
                .iter_mut()
                .zip(&mean)
                .for_each(|(d, s)| *d = (s * scale) as f32 as f64);
            let v = self.params.get_mut(&format!("{prefix}.running_var"))?;
            v.data_mut()
                .iter_mut()
                .zip(&var)
                .for_each(|(d, s)| *d = (s * scale) as f32 as f64);
        }
        Ok(())
    }

    /// Eval-mode inference on a spectrogram; returns the estimate and mask.
    pub fn separate_spectrogram(&self, y: &Spectrogram, nlr_enabled: bool) -> Result<(Spectrogram, ComplexMask)> {
        let mut g = Graph::new(&self.params, Mode::Eval, false);
        let x = g.tape.constant(y.pack());
        let out = self.forward(&mut g, x, nlr_enabled)?;
        let est = Spectrogram::unpack(g.tape.value(out.estimate), y.frame_hop, y.window_len)?;
        let mask = ComplexMask::from_packed(g.tape.value(out.mask))?;
        Ok((est, mask))
    }

    /// Waveform in, waveform out. Samples past the last full frame are
    /// returned as zeros so the output length matches the input.
    pub fn separate(&self, x: &Waveform, opts: SeparateOptions) -> Result<Waveform> {
        if x.sample_rate != self.config.sample_rate {
            return arg_err(format!(
                "input is sampled at {} Hz but the model expects {} Hz",
                x.sample_rate, self.config.sample_rate
            ));
        }
        let y = self.stft.analyze(x)?;
        let est = if opts.identity_mask {
            y
        } else {
            self.separate_spectrogram(&y, opts.nlr_enabled)?.0
        };
        let mut out = self.stft.synthesize(&est, x.sample_rate)?;
        out.samples.resize(x.len(), 0.0);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeparateOptions {
    pub nlr_enabled: bool,
    /// Debug path: skip the network and apply a 1+0i mask.
    pub identity_mask: bool,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        Self {
            nlr_enabled: true,
            identity_mask: false,
        }
    }
}

/// Packs a mixture spectrogram into a `[2, T, K]` tensor for the network.
pub fn pack_mixture(y: &Spectrogram) -> Tensor {
    y.pack()
}
