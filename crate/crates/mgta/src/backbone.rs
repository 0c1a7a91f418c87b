//! Dense two-scale BEV backbone.
//!
//! The scattered voxel canvas passes a full-resolution stage and a
//! half-resolution stage; the half-resolution features are upsampled and
//! fused back so each frame yields `F1` (full), `F2` (half) and the fused
//! map `F`, all with the same channel width.

use crate::error::{Error, Result};
use crate::tensor::blocks::{conv_layer, register_conv};
use crate::tensor::conv::upsample_bilinear_2x;
use crate::tensor::ops::{concat_channels, relu};
use crate::tensor::{ParamStore, Tape, ValueId};

/// Two-scale convolutional backbone over a BEV canvas.
pub struct Backbone {
    prefix: String,
    channels: usize,
}

/// Full-resolution, half-resolution, and fused per-frame BEV maps.
pub struct BackboneMaps {
    /// `[C, H, W]`.
    pub f1: ValueId,
    /// `[C, H/2, W/2]`.
    pub f2: ValueId,
    /// `[C, H, W]` fusion of both scales.
    pub f: ValueId,
}

impl Backbone {
    /// Registers all backbone convolutions: two stride-1 convs at full
    /// resolution, one stride-2 reduction plus two stride-1 convs at half
    /// resolution, and the two-scale fusion conv.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        channels: usize,
    ) -> Result<Backbone> {
        if c_in == 0 || channels == 0 {
            return Err(Error::config("backbone widths must be positive"));
        }
        register_conv(store, &format!("{prefix}.s1a"), channels, c_in, 3)?;
        register_conv(store, &format!("{prefix}.s1b"), channels, channels, 3)?;
        register_conv(store, &format!("{prefix}.s2a"), channels, channels, 3)?;
        register_conv(store, &format!("{prefix}.s2b"), channels, channels, 3)?;
        register_conv(store, &format!("{prefix}.s2c"), channels, channels, 3)?;
        register_conv(store, &format!("{prefix}.fuse"), channels, 2 * channels, 3)?;
        Ok(Backbone { prefix: prefix.to_string(), channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Encodes one frame's canvas. Requires even spatial dims so the
    /// half-resolution stage divides cleanly.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        canvas: ValueId,
    ) -> Result<BackboneMaps> {
        let shape = tape.value(canvas).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "backbone expects [C, H, W], got rank {}",
                shape.len()
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "backbone needs even spatial dims, got {h}x{w}"
            )));
        }
        let p = &self.prefix;
        let x = conv_layer(tape, store, &format!("{p}.s1a"), canvas, 1)?;
        let x = relu(tape, x)?;
        let x = conv_layer(tape, store, &format!("{p}.s1b"), x, 1)?;
        let f1 = relu(tape, x)?;
        let x = conv_layer(tape, store, &format!("{p}.s2a"), f1, 2)?;
        let x = conv_layer(tape, store, &format!("{p}.s2b"), x, 1)?;
        let x = relu(tape, x)?;
        let x = conv_layer(tape, store, &format!("{p}.s2c"), x, 1)?;
        let f2 = relu(tape, x)?;
        let up = upsample_bilinear_2x(tape, f2)?;
        let cat = concat_channels(tape, &[f1, up])?;
        let f = conv_layer(tape, store, &format!("{p}.fuse"), cat, 1)?;
        Ok(BackboneMaps { f1, f2, f })
    }
}
