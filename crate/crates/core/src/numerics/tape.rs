//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every differentiable op appends a node holding its output value, the ids
//! of its inputs and (only when some input is tracked) a closure mapping the
//! output gradient to input gradients. `backward` walks the tape once in
//! reverse.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward closure sees: the gradient flowing into the node's
/// output, the node's input values and its own output value.
pub struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

pub type InputGrads = Vec<Option<Vec<f64>>>;

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> InputGrads + Send + Sync>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    tracked: bool,
    param: Option<String>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    kinks: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            kinks: FNV_OFFSET,
        }
    }

    /// A tape that only computes values; `backward` is a no-op on it.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Hash of the side every ReLU input fell on so far. Two evaluations
    /// with equal signatures lie in the same linear piece of every ReLU.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub(crate) fn record_kinks(&mut self, x: Var) {
        let mut h = self.kinks;
        for &v in self.nodes[x.0].value.data() {
            h = (h ^ u64::from(v > 0.0)).wrapping_mul(FNV_PRIME);
        }
        self.kinks = h;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Tensor, inputs: Vec<usize>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward: None,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, vec![], false)
    }

    /// Tracked input whose gradient can be read back with [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rec = self.recording;
        self.push_node(value, vec![], rec)
    }

    /// Records the named parameter. It is tracked when the stored tensor
    /// has `requires_grad` set.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let tracked = self.recording && t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.push_node(value, vec![], tracked);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Appends an op node. `make_backward` is only invoked when at least one
    /// input is tracked, so ops can defer saving intermediates to it.
    pub fn push<F, B>(&mut self, value: Tensor, inputs: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> B,
        B: Fn(&BackwardCtx<'_>) -> InputGrads + Send + Sync + 'static,
    {
        let tracked = self.recording && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let v = self.push_node(value, inputs.iter().map(|v| v.0).collect(), tracked);
        if tracked {
            self.nodes[v.0].backward = Some(Box::new(make_backward()));
        }
        v
    }

    /// Back-propagates from a scalar `loss`. Calling it again on the same
    /// tape accumulates into the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        if !self.recording {
            return arg_err("backward called on an inference tape");
        }
        self.grads.resize(self.nodes.len(), None);
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(bw) = &node.backward {
                let ctx = BackwardCtx {
                    grad: &g,
                    inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                    output: &node.value,
                };
                let input_grads = bw(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[inp].tracked {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), self.nodes[inp].value.len());
                    add_into(&mut work[inp], ig);
                }
            }
            add_into(&mut self.grads[id], g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter recorded on this tape, summed over
    /// repeated uses of the same name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(Some(g))) = (&node.param, self.grads.get(id)) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Adds this tape's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.param_grads() {
            store.get_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Runs backward from `loss` and accumulates parameter gradients into the
/// `requires_grad` tensors of `store`.
pub fn backward(tape: &mut Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    tape.backward(loss)?;
    tape.accumulate_into(store)
}
