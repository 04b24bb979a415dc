//! Named-parameter layers built on the tape ops.
//!
//! Parameter naming: a convolution under prefix `p` owns `p.weight` and
//! `p.bias`; a batch norm owns `p.gamma`, `p.beta` (trainable) and
//! `p.running_mean`, `p.running_var` (buffers); a GRU owns `p.w_ih`,
//! `p.w_hh`, `p.b_ih`, `p.b_hh`.

use super::norm::BatchStats;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{arg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running buffers are left untouched
    /// and the observed statistics are reported instead.
    Train,
    /// Running statistics in batch norm; no state changes.
    Eval,
}

/// One forward pass: a tape plus read-only access to the parameters.
pub struct Graph<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// Batch statistics observed in training mode, keyed by norm prefix.
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, record: bool) -> Self {
        Self {
            tape: if record { Tape::new() } else { Tape::inference() },
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride_f: usize, groups: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, b, stride_f, groups)
    }

    pub fn conv_transposed(&mut self, prefix: &str, x: Var, stride_f: usize, groups: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv2d_transposed(x, w, b, stride_f, groups)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, None)?;
                if let Some(s) = stats {
                    self.bn_updates.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let m = self.store.get(&format!("{prefix}.running_mean"))?.data();
                let v = self.store.get(&format!("{prefix}.running_var"))?.data();
                Ok(self.tape.batch_norm(x, g, b, Some((m, v)))?.0)
            }
        }
    }

    /// GRU over `x: [batch, len, features]`. Unidirectional: hidden =
    /// features. Bidirectional: two GRUs of hidden features/2 under
    /// `prefix.fwd` / `prefix.bwd`, concatenated so the output width equals
    /// the input width.
    pub fn gru(&mut self, prefix: &str, x: Var, bidirectional: bool) -> Result<Var> {
        let feat = self.tape.value(x).dims3()?[2];
        if bidirectional {
            if feat % 2 != 0 {
                return arg_err(format!("bidirectional GRU needs an even feature size, got {feat}"));
            }
            let f = self.gru_dir(&format!("{prefix}.fwd"), x, false)?;
            let b = self.gru_dir(&format!("{prefix}.bwd"), x, true)?;
            self.tape.concat(&[f, b], 2)
        } else {
            self.gru_dir(prefix, x, false)
        }
    }

    fn gru_dir(&mut self, prefix: &str, x: Var, reverse: bool) -> Result<Var> {
        let wi = self.param(&format!("{prefix}.w_ih"))?;
        let wh = self.param(&format!("{prefix}.w_hh"))?;
        let bi = self.param(&format!("{prefix}.b_ih"))?;
        let bh = self.param(&format!("{prefix}.b_hh"))?;
        self.tape.gru(x, wi, wh, bi, bh, reverse)
    }
}

/// Applies observed batch statistics to the running buffers in `store`.
/// Results are rounded to f32 like every other stored parameter.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, stats) in updates {
        let mut m = store.get(&format!("{prefix}.running_mean"))?.data().to_vec();
        let mut v = store.get(&format!("{prefix}.running_var"))?.data().to_vec();
        stats.update_running(&mut m, &mut v);
        m.iter_mut().chain(v.iter_mut()).for_each(|x| *x = *x as f32 as f64);
        store
            .get_mut(&format!("{prefix}.running_mean"))?
            .data_mut()
            .copy_from_slice(&m);
        store
            .get_mut(&format!("{prefix}.running_var"))?
            .data_mut()
            .copy_from_slice(&v);
    }
    Ok(())
}

/// Parameter registration helpers mirroring the [`Graph`] layers.
pub mod init {
    use super::*;

    pub fn conv(
        store: &mut ParamStore,
        prefix: &str,
        c_out: usize,
        cin_per_group: usize,
        kt: usize,
        kf: usize,
        seed: u64,
    ) -> Result<()> {
        let fan_in = cin_per_group * kt * kf;
        store.init_uniform(
            &format!("{prefix}.weight"),
            &[c_out, cin_per_group, kt, kf],
            fan_in,
            seed,
        )?;
        store.init_uniform(&format!("{prefix}.bias"), &[c_out], fan_in, seed)
    }

    pub fn batch_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
        store.init_const(&format!("{prefix}.gamma"), &[c], 1.0, true)?;
        store.init_const(&format!("{prefix}.beta"), &[c], 0.0, true)?;
        store.init_const(&format!("{prefix}.running_mean"), &[c], 0.0, false)?;
        store.init_const(&format!("{prefix}.running_var"), &[c], 1.0, false)
    }

    fn gru_dir(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, seed: u64) -> Result<()> {
        store.init_uniform(&format!("{prefix}.w_ih"), &[3 * hidden, input], hidden, seed)?;
        store.init_uniform(&format!("{prefix}.w_hh"), &[3 * hidden, hidden], hidden, seed)?;
        store.init_const(&format!("{prefix}.b_ih"), &[3 * hidden], 0.0, true)?;
        store.init_const(&format!("{prefix}.b_hh"), &[3 * hidden], 0.0, true)
    }

    pub fn gru(store: &mut ParamStore, prefix: &str, features: usize, bidirectional: bool, seed: u64) -> Result<()> {
        if bidirectional {
            if !features.is_multiple_of(2) {
                return arg_err(format!("bidirectional GRU needs an even feature size, got {features}"));
            }
            gru_dir(store, &format!("{prefix}.fwd"), features, features / 2, seed)?;
            gru_dir(store, &format!("{prefix}.bwd"), features, features / 2, seed)
        } else {
            gru_dir(store, prefix, features, features, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn bidirectional_gru_keeps_width() {
        let mut store = ParamStore::new();
        init::gru(&mut store, "g", 6, true, 1).unwrap();
        assert_eq!(store.get("g.fwd.w_ih").unwrap().shape(), &[9, 6]);
        let mut g = Graph::new(&store, Mode::Eval, false);
        let x = g.tape.constant(Tensor::from_fn(&[2, 5, 6], |i| (i as f64).sin()));
        let y = g.gru("g", x, true).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 5, 6]);
    }

    #[test]
    fn bidirectional_gru_rejects_odd_width() {
        let mut store = ParamStore::new();
        assert!(init::gru(&mut store, "g", 5, true, 1).is_err());
        init::gru(&mut store, "h", 6, true, 1).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let x = g.tape.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(g.gru("h", x, true).is_err());
    }

    #[test]
    fn train_mode_reports_stats_without_mutating() {
        let mut store = ParamStore::new();
        init::batch_norm(&mut store, "bn", 2).unwrap();
        let before = store.clone();
        let mut g = Graph::new(&store, Mode::Train, false);
        let x = g.tape.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        g.batch_norm("bn", x).unwrap();
        let updates = std::mem::take(&mut g.bn_updates);
        drop(g);
        assert_eq!(store, before);
        assert_eq!(updates.len(), 1);
        apply_bn_updates(&mut store, &updates).unwrap();
        assert!(store.get("bn.running_mean").unwrap().data()[0] > 0.0);
    }
}
