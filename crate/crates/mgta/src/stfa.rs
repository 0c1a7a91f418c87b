//! Temporal aggregation of BEV maps by layered deformable cross-attention.
//!
//! The current map seeds a query that is refined over `layers` rounds. Each
//! round derives one query per frame — the current slot passes through
//! unchanged, past slots run a 3x3 conv over the aligned map concatenated
//! with the query — then attends into all frames with multi-head deformable
//! sampling, and finally applies a dropout/residual/layer-norm update with a
//! feed-forward block. Derivation convs are shared across frames but owned
//! per layer.

use crate::error::{Error, Result};
use crate::tensor::blocks::{conv_layer, fc_layer, register_conv, register_fc};
use crate::tensor::deform::{deformable_cross_attention, DeformAttnCfg};
use crate::tensor::ops::{
    add, concat_channels, dropout, layer_norm, relu, reshape, transpose2d,
};
use crate::tensor::{Init, ParamStore, Tape, ValueId};
use crate::util::derive_seed;

/// Sizing and behavior knobs for [`Stfa`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StfaConfig {
    /// Number of frames attended over, current frame included.
    pub frames: usize,
    /// Attention heads; must divide `channels`.
    pub heads: usize,
    /// Sampling points per (frame, head).
    pub points: usize,
    /// Refinement rounds; zero means the input passes through untouched.
    pub layers: usize,
    /// BEV channel width.
    pub channels: usize,
    /// Feed-forward hidden width.
    pub ffn_hidden: usize,
    /// Dropout rate applied to the attention output in training mode.
    pub dropout: f64,
    /// Normalize attention jointly over all frames and points instead of
    /// per frame.
    pub joint_softmax: bool,
    /// Keep the residual connection inside the feed-forward block.
    pub ffn_residual: bool,
}

impl Default for StfaConfig {
    fn default() -> StfaConfig {
        StfaConfig {
            frames: 3,
            heads: 4,
            points: 4,
            layers: 2,
            channels: 32,
            ffn_hidden: 64,
            dropout: 0.1,
            joint_softmax: false,
            ffn_residual: true,
        }
    }
}

impl StfaConfig {
    pub fn check(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("aggregation needs at least one frame"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.channels < 2 {
            return Err(Error::config(
                "channel width must be at least 2 for layer normalization",
            ));
        }
        if self.points == 0 {
            return Err(Error::config("sampling points must be positive"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("feed-forward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Layered deformable temporal aggregation over a window of BEV maps.
pub struct Stfa {
    prefix: String,
    cfg: StfaConfig,
}

impl Stfa {
    /// Registers per-layer parameters: one query-derivation conv shared by
    /// all past frames, per-head projections (offset and weight heads
    /// zero-initialized so step 0 samples each query's own location), two
    /// layer norms, and the feed-forward pair.
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: StfaConfig) -> Result<Stfa> {
        cfg.check()?;
        let c = cfg.channels;
        let d = c / cfg.heads;
        let j = cfg.points;
        for l in 0..cfg.layers {
            register_conv(store, &format!("{prefix}.l{l}.derive"), c, 2 * c, 3)?;
            for m in 0..cfg.heads {
                let head = format!("{prefix}.l{l}.h{m}");
                store.register(&format!("{head}.offset.w"), &[2 * j, c], Init::Zeros)?;
                store.register(&format!("{head}.offset.b"), &[2 * j], Init::Zeros)?;
                store.register(&format!("{head}.attn.w"), &[j, c], Init::Zeros)?;
                store.register(&format!("{head}.attn.b"), &[j], Init::Zeros)?;
                store.register(&format!("{head}.value.w"), &[d, c], Init::UniformFanIn(c))?;
                store.register(&format!("{head}.out.w"), &[c, d], Init::UniformFanIn(d))?;
            }
            store.register(&format!("{prefix}.l{l}.ln1.g"), &[c], Init::Const(1.0))?;
            store.register(&format!("{prefix}.l{l}.ln1.b"), &[c], Init::Zeros)?;
            store.register(&format!("{prefix}.l{l}.ln2.g"), &[c], Init::Const(1.0))?;
            store.register(&format!("{prefix}.l{l}.ln2.b"), &[c], Init::Zeros)?;
            register_fc(store, &format!("{prefix}.l{l}.ffn1"), c, cfg.ffn_hidden)?;
            register_fc(store, &format!("{prefix}.l{l}.ffn2"), cfg.ffn_hidden, c)?;
        }
        Ok(Stfa {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn cfg(&self) -> &StfaConfig {
        &self.cfg
    }

    fn check_map(&self, tape: &Tape, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let s = tape.value(id).shape().to_vec();
        if s.len() != 3 || s[0] != self.cfg.channels {
            return Err(Error::config(format!(
                "{what} must be [{}, H, W], got {s:?}",
                self.cfg.channels
            )));
        }
        Ok((s[1], s[2]))
    }

    /// One query per frame for layer `layer`: slot 0 is the main query
    /// unchanged; slot k > 0 is `conv3x3([aligned[k-1], query])`.
    pub fn derive_queries(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        query: ValueId,
        aligned: &[ValueId],
    ) -> Result<Vec<ValueId>> {
        if aligned.len() + 1 != self.cfg.frames {
            return Err(Error::config(format!(
                "expected {} aligned maps for a {}-frame window, got {}",
                self.cfg.frames - 1,
                self.cfg.frames,
                aligned.len()
            )));
        }
        let hw = self.check_map(tape, query, "query")?;
        let name = format!("{}.l{layer}.derive", self.prefix);
        let mut out = Vec::with_capacity(self.cfg.frames);
        out.push(query);
        for (i, &map) in aligned.iter().enumerate() {
            if self.check_map(tape, map, "aligned map")? != hw {
                return Err(Error::config(format!(
                    "aligned map {i} does not match the query's spatial dims"
                )));
            }
            let cat = concat_channels(tape, &[map, query])?;
            out.push(conv_layer(tape, store, &name, cat, 1)?);
        }
        Ok(out)
    }

    /// Multi-head deformable cross-attention of the layer's derivative
    /// queries into the frame maps.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        queries: &[ValueId],
        inputs: &[ValueId],
    ) -> Result<ValueId> {
        let mut offset_w = Vec::with_capacity(self.cfg.heads);
        let mut offset_b = Vec::with_capacity(self.cfg.heads);
        let mut attn_w = Vec::with_capacity(self.cfg.heads);
        let mut attn_b = Vec::with_capacity(self.cfg.heads);
        let mut value_w = Vec::with_capacity(self.cfg.heads);
        let mut out_w = Vec::with_capacity(self.cfg.heads);
        for m in 0..self.cfg.heads {
            let head = format!("{}.l{layer}.h{m}", self.prefix);
            offset_w.push(tape.param(store, &format!("{head}.offset.w"))?);
            offset_b.push(tape.param(store, &format!("{head}.offset.b"))?);
            attn_w.push(tape.param(store, &format!("{head}.attn.w"))?);
            attn_b.push(tape.param(store, &format!("{head}.attn.b"))?);
            value_w.push(tape.param(store, &format!("{head}.value.w"))?);
            out_w.push(tape.param(store, &format!("{head}.out.w"))?);
        }
        deformable_cross_attention(
            tape,
            inputs,
            queries,
            &offset_w,
            &offset_b,
            &attn_w,
            &attn_b,
            &value_w,
            &out_w,
            DeformAttnCfg {
                heads: self.cfg.heads,
                points: self.cfg.points,
                joint_softmax: self.cfg.joint_softmax,
            },
        )
    }

    /// Residual update of the main query from the attention output:
    /// `z = LN(Dropout(y) + Q)` then a feed-forward block with its own
    /// residual and normalization (residual omitted when configured off).
    pub fn layer_update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        y: ValueId,
        query: ValueId,
        seed: u64,
    ) -> Result<ValueId> {
        let (h, w) = self.check_map(tape, query, "query")?;
        self.check_map(tape, y, "attention output")?;
        let c = self.cfg.channels;
        let rows = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
            let flat = reshape(tape, id, &[c, h * w])?;
            transpose2d(tape, flat)
        };
        let y_rows = rows(tape, y)?;
        let q_rows = rows(tape, query)?;
        let dy = dropout(tape, y_rows, self.cfg.dropout, seed)?;
        let pre = add(tape, dy, q_rows)?;
        let ln1g = tape.param(store, &format!("{}.l{layer}.ln1.g", self.prefix))?;
        let ln1b = tape.param(store, &format!("{}.l{layer}.ln1.b", self.prefix))?;
        let z = layer_norm(tape, pre, ln1g, ln1b)?;
        let hidden = fc_layer(tape, store, &format!("{}.l{layer}.ffn1", self.prefix), z)?;
        let hidden = relu(tape, hidden)?;
        let ff = fc_layer(tape, store, &format!("{}.l{layer}.ffn2", self.prefix), hidden)?;
        let pre2 = if self.cfg.ffn_residual {
            add(tape, z, ff)?
        } else {
            ff
        };
        let ln2g = tape.param(store, &format!("{}.l{layer}.ln2.g", self.prefix))?;
        let ln2b = tape.param(store, &format!("{}.l{layer}.ln2.b", self.prefix))?;
        let out_rows = layer_norm(tape, pre2, ln2g, ln2b)?;
        let back = transpose2d(tape, out_rows)?;
        reshape(tape, back, &[c, h, w])
    }

    /// Runs all layers: the query starts as the current map and each round
    /// re-derives per-frame queries, attends, and updates. Zero layers
    /// return the input unchanged.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_cur: ValueId,
        aligned: &[ValueId],
        seed: u64,
    ) -> Result<ValueId> {
        self.check_map(tape, f_cur, "current map")?;
        let mut query = f_cur;
        for l in 0..self.cfg.layers {
            let queries = self.derive_queries(tape, store, l, query, aligned)?;
            let mut inputs = Vec::with_capacity(self.cfg.frames);
            inputs.push(query);
            inputs.extend_from_slice(aligned);
            let label = format!("layer{l}");
            tape.attn_label = label;
            let y = self.attention(tape, store, l, &queries, &inputs)?;
            query = self.layer_update(tape, store, l, y, query, derive_seed(seed, &[l as u64]))?;
        }
        Ok(query)
    }
}
