//! Motion-guided deformable alignment of a past BEV map onto the current
//! frame.
//!
//! Two-scale motion features are computed from each (past, current) map pair
//! — a 3x3 conv over the concatenation of the past map and the map
//! difference, refined by a residual non-local block — then fused across
//! scales. A single 1x1 conv over the fused motion features predicts the
//! per-pixel offsets and sigmoid modulation of a 3x3 modulated deformable
//! convolution that warps the past map. One parameter set is shared across
//! all frame lags.

use crate::error::{Error, Result};
use crate::tensor::blocks::{conv_layer, register_conv, NonLocal};
use crate::tensor::conv::upsample_bilinear_2x;
use crate::tensor::deform::deform_conv2d;
use crate::tensor::ops::{add, concat_channels, sigmoid, slice_channels, sub};
use crate::tensor::{Init, ParamStore, Tape, ValueId};

const TAPS: usize = 9; // 3x3 deformable kernel

/// Offsets and modulation weights for one aligned frame pair.
pub struct AlignmentMask {
    /// `[18, H, W]`: per tap `(dy, dx)` in grid-cell units.
    pub offsets: ValueId,
    /// `[9, H, W]`: sigmoid-activated per-tap weights.
    pub modulation: ValueId,
}

/// Motion-guided deformable alignment with parameters shared across lags.
pub struct Mgda {
    prefix: String,
    channels: usize,
    nl1: NonLocal,
    nl2: NonLocal,
}

impl Mgda {
    /// Registers the two motion-feature convs, their non-local blocks, the
    /// zero-initialized mask head, and the alignment kernel (random weights,
    /// zero bias) so training starts from an identity-like warp.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Mgda> {
        if channels == 0 {
            return Err(Error::config("alignment channel width must be positive"));
        }
        register_conv(store, &format!("{prefix}.mf1"), channels, 2 * channels, 3)?;
        register_conv(store, &format!("{prefix}.mf2"), channels, 2 * channels, 3)?;
        let nl1 = NonLocal::register(store, &format!("{prefix}.nl1"), channels)?;
        let nl2 = NonLocal::register(store, &format!("{prefix}.nl2"), channels)?;
        store.register(
            &format!("{prefix}.mask.w"),
            &[3 * TAPS, channels, 1, 1],
            Init::Zeros,
        )?;
        store.register(&format!("{prefix}.mask.b"), &[3 * TAPS], Init::Zeros)?;
        store.register(
            &format!("{prefix}.align.w"),
            &[channels, channels, 3, 3],
            Init::UniformFanIn(channels * TAPS),
        )?;
        store.register(&format!("{prefix}.align.b"), &[channels], Init::Zeros)?;
        Ok(Mgda {
            prefix: prefix.to_string(),
            channels,
            nl1,
            nl2,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check_pair(&self, tape: &Tape, prev: ValueId, cur: ValueId, scale: usize) -> Result<()> {
        let a = tape.value(prev).shape().to_vec();
        let b = tape.value(cur).shape().to_vec();
        if a != b {
            return Err(Error::config(format!(
                "scale-{scale} maps disagree: {a:?} vs {b:?}"
            )));
        }
        if a.len() != 3 || a[0] != self.channels {
            return Err(Error::config(format!(
                "scale-{scale} maps must be [{}, H, W], got {a:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Fused motion features between a past frame and the current frame:
    /// per scale `conv([prev, cur - prev])` plus a non-local residual, with
    /// the half-resolution result upsampled and summed onto scale 1.
    pub fn motion_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f1_prev: ValueId,
        f2_prev: ValueId,
        f1_cur: ValueId,
        f2_cur: ValueId,
    ) -> Result<ValueId> {
        self.check_pair(tape, f1_prev, f1_cur, 1)?;
        self.check_pair(tape, f2_prev, f2_cur, 2)?;
        let s1 = tape.value(f1_prev).shape().to_vec();
        let s2 = tape.value(f2_prev).shape().to_vec();
        if s1[1] != 2 * s2[1] || s1[2] != 2 * s2[2] {
            return Err(Error::config(format!(
                "scale-2 dims {}x{} must be half of scale-1 {}x{}",
                s2[1], s2[2], s1[1], s1[2]
            )));
        }
        let mut per_scale = Vec::with_capacity(2);
        for (prev, cur, conv, nl) in [
            (f1_prev, f1_cur, format!("{}.mf1", self.prefix), &self.nl1),
            (f2_prev, f2_cur, format!("{}.mf2", self.prefix), &self.nl2),
        ] {
            let diff = sub(tape, cur, prev)?;
            let cat = concat_channels(tape, &[prev, diff])?;
            let mt = conv_layer(tape, store, &conv, cat, 1)?;
            let refined = nl.forward(tape, store, mt)?;
            per_scale.push(add(tape, mt, refined)?);
        }
        let up = upsample_bilinear_2x(tape, per_scale[1])?;
        add(tape, per_scale[0], up)
    }

    /// One 1x1 conv over the motion features: the first 18 channels are raw
    /// offsets, the last 9 pass a sigmoid as modulation weights.
    pub fn predict_mask(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        motion: ValueId,
    ) -> Result<AlignmentMask> {
        let raw = conv_layer(tape, store, &format!("{}.mask", self.prefix), motion, 1)?;
        let offsets = slice_channels(tape, raw, 0, 2 * TAPS)?;
        let gate = slice_channels(tape, raw, 2 * TAPS, 3 * TAPS)?;
        let modulation = sigmoid(tape, gate)?;
        Ok(AlignmentMask { offsets, modulation })
    }

    /// Warps `f_prev` with the predicted mask through the modulated
    /// deformable convolution.
    pub fn deform_align(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_prev: ValueId,
        mask: &AlignmentMask,
    ) -> Result<ValueId> {
        let w = tape.param(store, &format!("{}.align.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.align.b", self.prefix))?;
        deform_conv2d(tape, f_prev, mask.offsets, mask.modulation, w, Some(b))
    }

    /// Full alignment of one past frame onto the current frame.
    pub fn align_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_prev: ValueId,
        f1_prev: ValueId,
        f2_prev: ValueId,
        f1_cur: ValueId,
        f2_cur: ValueId,
    ) -> Result<ValueId> {
        let motion = self.motion_features(tape, store, f1_prev, f2_prev, f1_cur, f2_cur)?;
        let mask = self.predict_mask(tape, store, motion)?;
        self.deform_align(tape, store, f_prev, &mask)
    }
}
