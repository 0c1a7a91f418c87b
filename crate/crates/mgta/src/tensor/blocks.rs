//! Reusable layer blocks composed from primitive ops: named fully-connected
//! and convolution layers, squeeze-style channel gating, and a non-local
//! (global self-similarity) block.

use crate::error::{Error, Result};
use crate::tensor::conv::{conv2d, Pad};
use crate::tensor::ops::{
    broadcast_mul_last, fc, matmul, mean_leading, mul, relu, reshape, sigmoid, softmax,
    transpose2d,
};
use crate::tensor::params::{Init, ParamStore};
use crate::tensor::tape::{Tape, ValueId};
use crate::tensor::shape_str;

/// Registers `{prefix}.w [c_in, c_out]` and `{prefix}.b [c_out]`.
pub fn register_fc(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    store.register(&format!("{prefix}.w"), &[c_in, c_out], Init::UniformFanIn(c_in))?;
    store.register(&format!("{prefix}.b"), &[c_out], Init::UniformFanIn(c_in))
}

/// Applies the fully-connected layer registered under `prefix`.
pub fn fc_layer(tape: &mut Tape, store: &ParamStore, prefix: &str, x: ValueId) -> Result<ValueId> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    fc(tape, x, w, Some(b))
}

/// Registers `{prefix}.w [c_out, c_in, k, k]` and `{prefix}.b [c_out]`.
pub fn register_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<()> {
    let fan_in = c_in * k * k;
    store.register(&format!("{prefix}.w"), &[c_out, c_in, k, k], Init::UniformFanIn(fan_in))?;
    store.register(&format!("{prefix}.b"), &[c_out], Init::UniformFanIn(fan_in))
}

/// Applies the same-padded convolution registered under `prefix`.
pub fn conv_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: ValueId,
    stride: usize,
) -> Result<ValueId> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    conv2d(tape, x, w, Some(b), stride, Pad::Same)
}

/// Channel gating block: a two-layer bottleneck (reduction 4) produces a
/// sigmoid gate per channel. The gate input is either the mean feature over
/// all leading axes (pooled) or each row itself (row-wise).
pub struct ChannelGate {
    prefix: String,
    channels: usize,
}

impl ChannelGate {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<ChannelGate> {
        if channels == 0 {
            return Err(Error::config("channel gate needs at least one channel"));
        }
        let hidden = (channels / 4).max(1);
        register_fc(store, &format!("{prefix}.fc1"), channels, hidden)?;
        register_fc(store, &format!("{prefix}.fc2"), hidden, channels)?;
        Ok(ChannelGate {
            prefix: prefix.to_string(),
            channels,
        })
    }

    fn check_channels(&self, tape: &Tape, x: ValueId) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.last() != Some(&self.channels) {
            return Err(Error::shape(format!(
                "channel gate '{}' built for {} channels, input {}",
                self.prefix,
                self.channels,
                shape_str(shape)
            )));
        }
        Ok(())
    }

    /// Gate from the mean over leading axes: `x * sigmoid(W2 relu(W1 mean(x)))`.
    pub fn forward_pooled(&self, tape: &mut Tape, store: &ParamStore, x: ValueId) -> Result<ValueId> {
        self.check_channels(tape, x)?;
        let pooled = mean_leading(tape, x)?;
        let z = fc_layer(tape, store, &format!("{}.fc1", self.prefix), pooled)?;
        let z = relu(tape, z)?;
        let g = fc_layer(tape, store, &format!("{}.fc2", self.prefix), z)?;
        let g = sigmoid(tape, g)?;
        broadcast_mul_last(tape, x, g)
    }

    /// Per-row gate on `[R, C]`: each row is gated by its own features, so
    /// this equals the pooled form applied to every row separately.
    pub fn forward_rowwise(&self, tape: &mut Tape, store: &ParamStore, x: ValueId) -> Result<ValueId> {
        self.check_channels(tape, x)?;
        if tape.value(x).shape().len() != 2 {
            return Err(Error::shape(format!(
                "row-wise channel gate expects [R, C], got {}",
                shape_str(tape.value(x).shape())
            )));
        }
        let z = fc_layer(tape, store, &format!("{}.fc1", self.prefix), x)?;
        let z = relu(tape, z)?;
        let g = fc_layer(tape, store, &format!("{}.fc2", self.prefix), z)?;
        let g = sigmoid(tape, g)?;
        mul(tape, x, g)
    }
}

/// Non-local block: embedded-Gaussian global attention over all grid
/// positions. Inputs and outputs are `[C, H, W]`; the residual connection is
/// left to the caller.
pub struct NonLocal {
    prefix: String,
    channels: usize,
}

impl NonLocal {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<NonLocal> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::config(format!(
                "non-local block needs an even channel count >= 2, got {channels}"
            )));
        }
        let c2 = channels / 2;
        register_conv(store, &format!("{prefix}.theta"), c2, channels, 1)?;
        register_conv(store, &format!("{prefix}.phi"), c2, channels, 1)?;
        register_conv(store, &format!("{prefix}.g"), c2, channels, 1)?;
        register_conv(store, &format!("{prefix}.out"), channels, c2, 1)?;
        Ok(NonLocal {
            prefix: prefix.to_string(),
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: ValueId) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::shape(format!(
                "non-local block '{}' built for {} channels, input {}",
                self.prefix,
                self.channels,
                shape_str(&shape)
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let hw = h * w;
        let c2 = self.channels / 2;
        let theta = conv_layer(tape, store, &format!("{}.theta", self.prefix), x, 1)?;
        let phi = conv_layer(tape, store, &format!("{}.phi", self.prefix), x, 1)?;
        let gmap = conv_layer(tape, store, &format!("{}.g", self.prefix), x, 1)?;
        let theta = reshape(tape, theta, &[c2, hw])?;
        let theta_t = transpose2d(tape, theta)?; // [HW, C2]
        let phi = reshape(tape, phi, &[c2, hw])?;
        let logits = matmul(tape, theta_t, phi)?; // [HW, HW]
        let attn = softmax(tape, logits)?;
        let gmap = reshape(tape, gmap, &[c2, hw])?;
        let g_t = transpose2d(tape, gmap)?; // [HW, C2]
        let y = matmul(tape, attn, g_t)?; // [HW, C2]
        let y = transpose2d(tape, y)?;
        let y = reshape(tape, y, &[c2, h, w])?;
        conv_layer(tape, store, &format!("{}.out", self.prefix), y, 1)
    }
}
