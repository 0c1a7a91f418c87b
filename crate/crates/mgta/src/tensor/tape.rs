//! Reverse-mode tape: an ordered record of executed primitive ops.
//!
//! Each op pushes one node holding the op's output value plus a backward
//! record that knows how to turn the output gradient into input-gradient
//! contributions. Backward walks nodes in exact reverse execution order, so
//! values shared by several consumers accumulate gradients additively.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::{shape_str, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

pub(crate) enum Source {
    /// Input data; gradient is tracked but goes nowhere.
    Leaf,
    /// Parameter leased from a store; names are tracked in `Tape::param_ids`.
    Param,
    /// Output of a recorded op.
    Op(Box<dyn TapeOp>),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub source: Source,
}

/// Gradient slots parallel to tape nodes; ops accumulate into these.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient flowing into `id`'s output, if any consumer produced one.
    pub fn output(&self, id: ValueId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    /// Adds `delta` into the gradient slot of `id`.
    pub fn accumulate(&mut self, id: ValueId, delta: Tensor) -> Result<()> {
        match &mut self.slots[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }
}

/// Backward record for one primitive op.
pub(crate) trait TapeOp {
    fn name(&self) -> &'static str;

    /// Distributes the gradient at `out` to the op's inputs.
    ///
    /// Called only when a gradient reached `out`. `nodes` gives read access
    /// to every recorded value (inputs and outputs alike).
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()>;
}

/// Normalization statistics collected during forward when probing is on.
///
/// Softmax entries record `|sum - 1|` per normalized group; layer-norm
/// entries record per-position `|mean|` and `|std - 1|` of the pre-affine
/// normalized vector.
#[derive(Debug, Default, Clone)]
pub struct NormProbe {
    pub softmax_groups: usize,
    pub softmax_max_sum_dev: f64,
    pub layernorm_positions: usize,
    pub layernorm_max_mean: f64,
    pub layernorm_max_std_dev: f64,
}

/// Attention-weight snapshot emitted by the deformable cross-attention op
/// when tracing is on: one `[J, H, W]` tensor per (frame lag, head).
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub label: String,
    pub lag: usize,
    pub head: usize,
    pub weights: Tensor,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    train: bool,
    param_ids: BTreeMap<String, ValueId>,
    pub(crate) probe: Option<NormProbe>,
    pub(crate) attn_trace: Option<Vec<AttnRecord>>,
    /// Label prepended to attention trace records; set by callers.
    pub attn_label: String,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            param_ids: BTreeMap::new(),
            probe: None,
            attn_trace: None,
            attn_label: String::new(),
        }
    }

    /// Tape in training mode: dropout masks are applied.
    pub fn train() -> Tape {
        let mut t = Tape::new();
        t.train = true;
        t
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Starts collecting normalization statistics from this point on.
    pub fn enable_probe(&mut self) {
        self.probe = Some(NormProbe::default());
    }

    pub fn probe(&self) -> Option<&NormProbe> {
        self.probe.as_ref()
    }

    /// Starts collecting attention-weight snapshots from this point on.
    pub fn enable_attn_trace(&mut self) {
        self.attn_trace = Some(Vec::new());
    }

    pub fn attn_trace(&self) -> &[AttnRecord] {
        self.attn_trace.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves receive gradients but own no name.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Source::Leaf)
    }

    /// Leases a parameter from `store`. Repeated leases of the same name
    /// return the same id, so gradient contributions accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Source::Param);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` seed with respect to `id`.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, value: Tensor, source: Source) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, source });
        id
    }

    /// Records an op output, surfacing non-finite values immediately.
    pub(crate) fn push_op(&mut self, mut value: Tensor, op: Box<dyn TapeOp>) -> Result<ValueId> {
        value.quantize();
        value.check_finite(op.name())?;
        Ok(self.push(value, Source::Op(op)))
    }

    /// Runs backward from a scalar seed value (gradient 1.0).
    pub fn backward(&mut self, seed: ValueId) -> Result<()> {
        let shape = self.nodes[seed.0].value.shape().to_vec();
        if self.nodes[seed.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward seed must be scalar, got shape {}",
                shape_str(&shape)
            )));
        }
        self.backward_with(seed, Tensor::filled(&shape, 1.0))
    }

    /// Runs backward from `seed` with an explicit output gradient.
    pub fn backward_with(&mut self, seed: ValueId, seed_grad: Tensor) -> Result<()> {
        if seed_grad.shape() != self.nodes[seed.0].value.shape() {
            return Err(Error::shape(format!(
                "seed gradient shape {} does not match value shape {}",
                shape_str(seed_grad.shape()),
                shape_str(self.nodes[seed.0].value.shape())
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        let mut grads = Grads {
            slots: std::mem::take(&mut self.grads),
        };
        grads.slots[seed.0] = Some(seed_grad);
        for i in (0..=seed.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Source::Op(op) = &self.nodes[i].source {
                op.backward(ValueId(i), &self.nodes, &mut grads)?;
            }
        }
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                g.check_finite(&format!("gradient of node {i}"))?;
            }
        }
        self.grads = grads.slots;
        Ok(())
    }

    /// Adds `scale` times each leased parameter's gradient into the store's
    /// gradient buffers. Parameters that received no gradient contribute 0.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, scale: f64) -> Result<()> {
        for (name, &id) in &self.param_ids {
            if let Some(g) = self.grad(id) {
                let mut g = g.clone();
                g.scale_in_place(scale);
                store.accumulate_grad(name, &g)?;
            }
        }
        Ok(())
    }

    /// Names and gradients of all leased parameters that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.param_ids {
            if let Some(g) = self.grad(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_requires_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn leaf_gradients_accumulate_across_consumers() {
        // y = sum(x + x); dy/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = ops::add(&mut tape, x, x).unwrap();
        let y = ops::sum_all(&mut tape, s).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn nan_from_op_is_surfaced() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![1e308]).unwrap());
        let err = ops::add(&mut tape, x, x).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
