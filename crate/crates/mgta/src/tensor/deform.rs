//! Deformable sampling kernels: bilinear sampling at continuous positions,
//! modulated deformable convolution, and multi-head deformable cross-attention
//! over a stack of feature maps.
//!
//! Sample positions are `(y, x)` in cell coordinates. Sampling outside the
//! map reads zeros; gradients with respect to positions use only in-bounds
//! corners.

use crate::error::{Error, Result};
use crate::tensor::ops::{softmax_row, val};
use crate::tensor::tape::{AttnRecord, Grads, Node, Tape, TapeOp, ValueId};
use crate::tensor::{shape_str, Tensor};

/// One interpolation corner: integer cell, weight, and weight derivatives
/// with respect to the sample position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    pub iy: isize,
    pub ix: isize,
    pub w: f64,
    pub dw_dy: f64,
    pub dw_dx: f64,
}

/// Positions beyond this many cells (or non-finite ones) cannot touch any
/// real map; they are redirected to a far-away cell so the zero-padding path
/// handles them without overflowing the integer indices. Diverged offset
/// weights would otherwise panic instead of sampling zero.
const FAR_OUTSIDE: f64 = (1u64 << 40) as f64;

/// Four bilinear corners for position `(y, x)`.
pub(crate) fn bilinear_corners(y: f64, x: f64) -> [Corner; 4] {
    let sanitize = |v: f64| {
        if v.is_finite() && v.abs() < FAR_OUTSIDE {
            v
        } else {
            -FAR_OUTSIDE
        }
    };
    let y = sanitize(y);
    let x = sanitize(x);
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (iy0, ix0) = (y0 as isize, x0 as isize);
    [
        Corner {
            iy: iy0,
            ix: ix0,
            w: (1.0 - fy) * (1.0 - fx),
            dw_dy: -(1.0 - fx),
            dw_dx: -(1.0 - fy),
        },
        Corner {
            iy: iy0,
            ix: ix0 + 1,
            w: (1.0 - fy) * fx,
            dw_dy: -fx,
            dw_dx: 1.0 - fy,
        },
        Corner {
            iy: iy0 + 1,
            ix: ix0,
            w: fy * (1.0 - fx),
            dw_dy: 1.0 - fx,
            dw_dx: -fy,
        },
        Corner {
            iy: iy0 + 1,
            ix: ix0 + 1,
            w: fy * fx,
            dw_dy: fx,
            dw_dx: fy,
        },
    ]
}

#[inline]
pub(crate) fn in_bounds(c: &Corner, h: usize, w: usize) -> bool {
    c.iy >= 0 && c.ix >= 0 && (c.iy as usize) < h && (c.ix as usize) < w
}

/// Samples every channel of `plane_data` (`[C, H, W]`) at `(y, x)` into `out`.
pub(crate) fn sample_channels(
    plane_data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    corners: &[Corner; 4],
    out: &mut [f64],
) {
    out[..c].fill(0.0);
    let hw = h * w;
    for corner in corners {
        if corner.w == 0.0 || !in_bounds(corner, h, w) {
            continue;
        }
        let base = corner.iy as usize * w + corner.ix as usize;
        for (ci, o) in out[..c].iter_mut().enumerate() {
            *o += corner.w * plane_data[ci * hw + base];
        }
    }
}

// ---------------------------------------------------------------- bilinear_sample

struct BilinearSampleOp {
    x: ValueId,
    p: ValueId,
    c: usize,
    h: usize,
    w: usize,
}

impl TapeOp for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let (c, h, w) = (self.c, self.h, self.w);
        let hw = h * w;
        let xv = val(nodes, self.x).data();
        let pv = val(nodes, self.p).data();
        let corners = bilinear_corners(pv[0], pv[1]);
        let mut dx = vec![0.0; c * hw];
        let mut dp = [0.0; 2];
        for corner in &corners {
            if !in_bounds(corner, h, w) {
                continue;
            }
            let base = corner.iy as usize * w + corner.ix as usize;
            for ci in 0..c {
                let gv = g.data()[ci];
                dx[ci * hw + base] += gv * corner.w;
                let xval = xv[ci * hw + base];
                dp[0] += gv * corner.dw_dy * xval;
                dp[1] += gv * corner.dw_dx * xval;
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(&[c, h, w], dx)?)?;
        grads.accumulate(self.p, Tensor::from_vec(&[2], dp.to_vec())?)
    }
}

/// Samples `x: [C, H, W]` at continuous position `p = [y, x]` (cell
/// coordinates, zero padding outside). Returns `[C]`; differentiable in both
/// `x` and `p`.
pub fn bilinear_sample(tape: &mut Tape, x: ValueId, p: ValueId) -> Result<ValueId> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 3 {
        return Err(Error::shape(format!(
            "bilinear_sample expects [C,H,W], got {}",
            shape_str(&xs)
        )));
    }
    if tape.value(p).shape() != [2] {
        return Err(Error::shape(format!(
            "bilinear_sample expects position [2], got {}",
            shape_str(tape.value(p).shape())
        )));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let pv = tape.value(p).data();
    let corners = bilinear_corners(pv[0], pv[1]);
    let mut out = vec![0.0; c];
    sample_channels(tape.value(x).data(), c, h, w, &corners, &mut out);
    let out = Tensor::from_vec(&[c], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(out, Box::new(BilinearSampleOp { x, p, c, h, w }))
}

// ---------------------------------------------------------------- deform conv

struct DeformConv2dSpec {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

struct DeformConv2dOp {
    x: ValueId,
    offsets: ValueId,
    modulation: ValueId,
    weight: ValueId,
    bias: Option<ValueId>,
    spec: DeformConv2dSpec,
}

impl TapeOp for DeformConv2dOp {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let s = &self.spec;
        let (h, w, hw) = (s.h, s.w, s.h * s.w);
        let taps = s.kh * s.kw;
        let xv = val(nodes, self.x).data();
        let ov = val(nodes, self.offsets).data();
        let mv = val(nodes, self.modulation).data();
        let wv = val(nodes, self.weight).data();
        let gy = g.data();
        let mut dx = vec![0.0; s.c_in * hw];
        let mut doff = vec![0.0; 2 * taps * hw];
        let mut dmod = vec![0.0; taps * hw];
        let mut dw = vec![0.0; s.c_out * s.c_in * taps];
        let mut db = vec![0.0; s.c_out];
        let mut sample = vec![0.0; s.c_in];
        let mut u = vec![0.0; s.c_in];
        let pad_y = (s.kh as isize - 1) / 2;
        let pad_x = (s.kw as isize - 1) / 2;
        for oy in 0..h {
            for ox in 0..w {
                let pos = oy * w + ox;
                for co in 0..s.c_out {
                    db[co] += gy[co * hw + pos];
                }
                for t in 0..taps {
                    let (ky, kx) = ((t / s.kw) as isize, (t % s.kw) as isize);
                    let sy = oy as f64 + (ky - pad_y) as f64 + ov[2 * t * hw + pos];
                    let sx = ox as f64 + (kx - pad_x) as f64 + ov[(2 * t + 1) * hw + pos];
                    let a = mv[t * hw + pos];
                    let corners = bilinear_corners(sy, sx);
                    sample_channels(xv, s.c_in, h, w, &corners, &mut sample);
                    // u[ci] = sum_co g[co] * W[co, ci, t]
                    for ci in 0..s.c_in {
                        let mut acc = 0.0;
                        for co in 0..s.c_out {
                            acc += gy[co * hw + pos] * wv[(co * s.c_in + ci) * taps + t];
                        }
                        u[ci] = acc;
                    }
                    // Modulation and weight gradients.
                    let mut dmod_acc = 0.0;
                    for ci in 0..s.c_in {
                        dmod_acc += u[ci] * sample[ci];
                        let asample = a * sample[ci];
                        if asample != 0.0 {
                            for co in 0..s.c_out {
                                dw[(co * s.c_in + ci) * taps + t] += gy[co * hw + pos] * asample;
                            }
                        }
                    }
                    dmod[t * hw + pos] += dmod_acc;
                    // Input and position gradients through the corners.
                    let mut dz = [0.0f64; 2];
                    for corner in &corners {
                        if !in_bounds(corner, h, w) {
                            continue;
                        }
                        let base = corner.iy as usize * w + corner.ix as usize;
                        for ci in 0..s.c_in {
                            let uci = u[ci];
                            if uci == 0.0 {
                                continue;
                            }
                            dx[ci * hw + base] += a * uci * corner.w;
                            let xval = xv[ci * hw + base];
                            dz[0] += a * uci * corner.dw_dy * xval;
                            dz[1] += a * uci * corner.dw_dx * xval;
                        }
                    }
                    doff[2 * t * hw + pos] += dz[0];
                    doff[(2 * t + 1) * hw + pos] += dz[1];
                }
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(&[s.c_in, h, w], dx)?)?;
        grads.accumulate(self.offsets, Tensor::from_vec(&[2 * taps, h, w], doff)?)?;
        grads.accumulate(self.modulation, Tensor::from_vec(&[taps, h, w], dmod)?)?;
        grads.accumulate(
            self.weight,
            Tensor::from_vec(&[s.c_out, s.c_in, s.kh, s.kw], dw)?,
        )?;
        if let Some(b) = self.bias {
            grads.accumulate(b, Tensor::from_vec(&[s.c_out], db)?)?;
        }
        Ok(())
    }
}

/// Modulated deformable convolution (stride 1, same padding, odd kernel).
///
/// For output position `p`, tap `i` at base offset `p_i`, learned offset
/// `dp_i(p)` and modulation `a_i(p)`:
/// `y(p)[co] = bias[co] + sum_i sum_ci W[co,ci,i] * a_i(p) * sample(x[ci], p + p_i + dp_i(p))`.
///
/// `offsets: [2*kh*kw, H, W]` with channels `(2i, 2i+1) = (dy, dx)` of tap
/// `i`; `modulation: [kh*kw, H, W]` (caller applies any squashing).
pub fn deform_conv2d(
    tape: &mut Tape,
    x: ValueId,
    offsets: ValueId,
    modulation: ValueId,
    weight: ValueId,
    bias: Option<ValueId>,
) -> Result<ValueId> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(weight).shape().to_vec();
    if xs.len() != 3 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "deform_conv2d: expected x [C,H,W] and weight [Co,Ci,kh,kw], got {} and {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if ws[1] != c_in {
        return Err(Error::shape(format!(
            "deform_conv2d: input channels {} do not match weight {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config(format!(
            "deform_conv2d requires odd kernels, got {kh}x{kw}"
        )));
    }
    let taps = kh * kw;
    if tape.value(offsets).shape() != [2 * taps, h, w] {
        return Err(Error::shape(format!(
            "deform_conv2d: offsets {} do not match [{}x{h}x{w}]",
            shape_str(tape.value(offsets).shape()),
            2 * taps
        )));
    }
    if tape.value(modulation).shape() != [taps, h, w] {
        return Err(Error::shape(format!(
            "deform_conv2d: modulation {} does not match [{taps}x{h}x{w}]",
            shape_str(tape.value(modulation).shape())
        )));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [c_out] {
            return Err(Error::shape(format!(
                "deform_conv2d: bias shape {} does not match C_out {}",
                shape_str(tape.value(b).shape()),
                c_out
            )));
        }
    }
    let hw = h * w;
    let xv = tape.value(x).data();
    let ov = tape.value(offsets).data();
    let mv = tape.value(modulation).data();
    let wv = tape.value(weight).data();
    let bv: Option<Vec<f64>> = bias.map(|b| tape.value(b).data().to_vec());
    let mut out = vec![0.0; c_out * hw];
    let mut sample = vec![0.0; c_in];
    let pad_y = (kh as isize - 1) / 2;
    let pad_x = (kw as isize - 1) / 2;
    for oy in 0..h {
        for ox in 0..w {
            let pos = oy * w + ox;
            if let Some(bv) = &bv {
                for co in 0..c_out {
                    out[co * hw + pos] = bv[co];
                }
            }
            for t in 0..taps {
                let (ky, kx) = ((t / kw) as isize, (t % kw) as isize);
                let sy = oy as f64 + (ky - pad_y) as f64 + ov[2 * t * hw + pos];
                let sx = ox as f64 + (kx - pad_x) as f64 + ov[(2 * t + 1) * hw + pos];
                let a = mv[t * hw + pos];
                if a == 0.0 {
                    continue;
                }
                let corners = bilinear_corners(sy, sx);
                sample_channels(xv, c_in, h, w, &corners, &mut sample);
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        acc += wv[(co * c_in + ci) * taps + t] * sample[ci];
                    }
                    out[co * hw + pos] += a * acc;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[c_out, h, w], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(
        out,
        Box::new(DeformConv2dOp {
            x,
            offsets,
            modulation,
            weight,
            bias,
            spec: DeformConv2dSpec {
                c_in,
                c_out,
                h,
                w,
                kh,
                kw,
            },
        }),
    )
}

// ------------------------------------------------- deformable cross-attention

/// Configuration for [`deformable_cross_attention`].
#[derive(Clone, Copy, Debug)]
pub struct DeformAttnCfg {
    pub heads: usize,
    pub points: usize,
    /// Normalize attention jointly over (frame, point) instead of per frame.
    pub joint_softmax: bool,
}

struct DeformAttnOp {
    values: Vec<ValueId>,
    queries: Vec<ValueId>,
    offset_w: Vec<ValueId>,
    offset_b: Vec<ValueId>,
    attn_w: Vec<ValueId>,
    attn_b: Vec<ValueId>,
    value_w: Vec<ValueId>,
    out_w: Vec<ValueId>,
    cfg: DeformAttnCfg,
    c: usize,
    h: usize,
    w: usize,
}

/// Per-query scratch recomputed identically in forward and backward.
struct HeadScratch {
    h_vecs: Vec<Vec<f64>>,   // K x C query features at q
    deltas: Vec<Vec<f64>>,   // K x 2J offsets
    attn: Vec<f64>,          // K*J weights after softmax
    samples: Vec<Vec<f64>>,  // K*J x C sampled values
    projected: Vec<Vec<f64>>, // K*J x d projected values
    head_out: Vec<f64>,      // d
}

impl DeformAttnOp {
    /// Recomputes all per-(query, head) intermediates at `(py, px)`.
    #[allow(clippy::too_many_arguments)]
    fn head_scratch(
        &self,
        m: usize,
        py: usize,
        px: usize,
        value_data: &[&[f64]],
        query_data: &[&[f64]],
        offw: &[&[f64]],
        offb: &[&[f64]],
        attw: &[&[f64]],
        attb: &[&[f64]],
        valw: &[&[f64]],
    ) -> HeadScratch {
        let (c, h, w) = (self.c, self.h, self.w);
        let hw = h * w;
        let k_frames = self.values.len();
        let j = self.cfg.points;
        let d = c / self.cfg.heads;
        let pos = py * w + px;
        let mut h_vecs = Vec::with_capacity(k_frames);
        let mut deltas = Vec::with_capacity(k_frames);
        let mut attn = Vec::with_capacity(k_frames * j);
        for k in 0..k_frames {
            let mut hv = vec![0.0; c];
            for ci in 0..c {
                hv[ci] = query_data[k][ci * hw + pos];
            }
            let mut delta = offb[m].to_vec();
            let mut araw = attb[m].to_vec();
            for ci in 0..c {
                let hvi = hv[ci];
                if hvi == 0.0 {
                    continue;
                }
                for r in 0..2 * j {
                    delta[r] += offw[m][r * c + ci] * hvi;
                }
                for r in 0..j {
                    araw[r] += attw[m][r * c + ci] * hvi;
                }
            }
            h_vecs.push(hv);
            deltas.push(delta);
            if !self.cfg.joint_softmax {
                softmax_row(&mut araw);
            }
            attn.extend_from_slice(&araw);
        }
        if self.cfg.joint_softmax {
            softmax_row(&mut attn);
        }
        let mut samples = Vec::with_capacity(k_frames * j);
        let mut projected = Vec::with_capacity(k_frames * j);
        let mut head_out = vec![0.0; d];
        for k in 0..k_frames {
            for jj in 0..j {
                let sy = py as f64 + deltas[k][2 * jj];
                let sx = px as f64 + deltas[k][2 * jj + 1];
                let corners = bilinear_corners(sy, sx);
                let mut v = vec![0.0; c];
                sample_channels(value_data[k], c, h, w, &corners, &mut v);
                let mut u = vec![0.0; d];
                for dd in 0..d {
                    let row = &valw[m][dd * c..(dd + 1) * c];
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += row[ci] * v[ci];
                    }
                    u[dd] = acc;
                }
                let a = attn[k * j + jj];
                for dd in 0..d {
                    head_out[dd] += a * u[dd];
                }
                samples.push(v);
                projected.push(u);
            }
        }
        HeadScratch {
            h_vecs,
            deltas,
            attn,
            samples,
            projected,
            head_out,
        }
    }
}

impl TapeOp for DeformAttnOp {
    fn name(&self) -> &'static str {
        "deformable_cross_attention"
    }

    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let (c, h, w) = (self.c, self.h, self.w);
        let hw = h * w;
        let k_frames = self.values.len();
        let m_heads = self.cfg.heads;
        let j = self.cfg.points;
        let d = c / m_heads;
        let value_data: Vec<&[f64]> = self.values.iter().map(|&v| val(nodes, v).data()).collect();
        let query_data: Vec<&[f64]> = self.queries.iter().map(|&v| val(nodes, v).data()).collect();
        let offw: Vec<&[f64]> = self.offset_w.iter().map(|&v| val(nodes, v).data()).collect();
        let offb: Vec<&[f64]> = self.offset_b.iter().map(|&v| val(nodes, v).data()).collect();
        let attw: Vec<&[f64]> = self.attn_w.iter().map(|&v| val(nodes, v).data()).collect();
        let attb: Vec<&[f64]> = self.attn_b.iter().map(|&v| val(nodes, v).data()).collect();
        let valw: Vec<&[f64]> = self.value_w.iter().map(|&v| val(nodes, v).data()).collect();
        let outw: Vec<&[f64]> = self.out_w.iter().map(|&v| val(nodes, v).data()).collect();

        let mut d_values = vec![vec![0.0; c * hw]; k_frames];
        let mut d_queries = vec![vec![0.0; c * hw]; k_frames];
        let mut d_offw = vec![vec![0.0; 2 * j * c]; m_heads];
        let mut d_offb = vec![vec![0.0; 2 * j]; m_heads];
        let mut d_attw = vec![vec![0.0; j * c]; m_heads];
        let mut d_attb = vec![vec![0.0; j]; m_heads];
        let mut d_valw = vec![vec![0.0; d * c]; m_heads];
        let mut d_outw = vec![vec![0.0; c * d]; m_heads];

        for py in 0..h {
            for px in 0..w {
                let pos = py * w + px;
                let mut gq = vec![0.0; c];
                for ci in 0..c {
                    gq[ci] = g.data()[ci * hw + pos];
                }
                for m in 0..m_heads {
                    let scratch = self.head_scratch(
                        m, py, px, &value_data, &query_data, &offw, &offb, &attw, &attb, &valw,
                    );
                    // dW_out and dhead.
                    let mut dhead = vec![0.0; d];
                    for ci in 0..c {
                        let gv = gq[ci];
                        if gv == 0.0 {
                            continue;
                        }
                        for dd in 0..d {
                            d_outw[m][ci * d + dd] += gv * scratch.head_out[dd];
                            dhead[dd] += gv * outw[m][ci * d + dd];
                        }
                    }
                    let mut d_attn = vec![0.0; k_frames * j];
                    let mut d_delta = vec![vec![0.0; 2 * j]; k_frames];
                    for k in 0..k_frames {
                        for jj in 0..j {
                            let slot = k * j + jj;
                            let a = scratch.attn[slot];
                            let u = &scratch.projected[slot];
                            let v = &scratch.samples[slot];
                            let mut da = 0.0;
                            let mut du = vec![0.0; d];
                            for dd in 0..d {
                                da += dhead[dd] * u[dd];
                                du[dd] = dhead[dd] * a;
                            }
                            d_attn[slot] = da;
                            // dW_value and dv.
                            let mut dv = vec![0.0; c];
                            for dd in 0..d {
                                let dudd = du[dd];
                                if dudd == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    d_valw[m][dd * c + ci] += dudd * v[ci];
                                    dv[ci] += valw[m][dd * c + ci] * dudd;
                                }
                            }
                            // Bilinear backward into values and positions.
                            let sy = py as f64 + scratch.deltas[k][2 * jj];
                            let sx = px as f64 + scratch.deltas[k][2 * jj + 1];
                            let corners = bilinear_corners(sy, sx);
                            let mut dz = [0.0f64; 2];
                            for corner in &corners {
                                if !in_bounds(corner, h, w) {
                                    continue;
                                }
                                let base = corner.iy as usize * w + corner.ix as usize;
                                for ci in 0..c {
                                    let dvc = dv[ci];
                                    if dvc == 0.0 {
                                        continue;
                                    }
                                    d_values[k][ci * hw + base] += dvc * corner.w;
                                    let xval = value_data[k][ci * hw + base];
                                    dz[0] += dvc * corner.dw_dy * xval;
                                    dz[1] += dvc * corner.dw_dx * xval;
                                }
                            }
                            d_delta[k][2 * jj] += dz[0];
                            d_delta[k][2 * jj + 1] += dz[1];
                        }
                    }
                    // Softmax backward over the configured scope.
                    let mut d_araw = vec![0.0; k_frames * j];
                    if self.cfg.joint_softmax {
                        let a = &scratch.attn;
                        let dot: f64 = (0..k_frames * j).map(|i| a[i] * d_attn[i]).sum();
                        for i in 0..k_frames * j {
                            d_araw[i] = a[i] * (d_attn[i] - dot);
                        }
                    } else {
                        for k in 0..k_frames {
                            let a = &scratch.attn[k * j..(k + 1) * j];
                            let da = &d_attn[k * j..(k + 1) * j];
                            let dot: f64 = a.iter().zip(da).map(|(a, d)| a * d).sum();
                            for jj in 0..j {
                                d_araw[k * j + jj] = a[jj] * (da[jj] - dot);
                            }
                        }
                    }
                    // Head projections back to the query features.
                    for k in 0..k_frames {
                        let hv = &scratch.h_vecs[k];
                        let mut dh = vec![0.0; c];
                        for r in 0..2 * j {
                            let dd = d_delta[k][r];
                            if dd == 0.0 {
                                continue;
                            }
                            d_offb[m][r] += dd;
                            for ci in 0..c {
                                d_offw[m][r * c + ci] += dd * hv[ci];
                                dh[ci] += offw[m][r * c + ci] * dd;
                            }
                        }
                        for r in 0..j {
                            let dr = d_araw[k * j + r];
                            if dr == 0.0 {
                                continue;
                            }
                            d_attb[m][r] += dr;
                            for ci in 0..c {
                                d_attw[m][r * c + ci] += dr * hv[ci];
                                dh[ci] += attw[m][r * c + ci] * dr;
                            }
                        }
                        for ci in 0..c {
                            d_queries[k][ci * hw + pos] += dh[ci];
                        }
                    }
                }
            }
        }

        for (k, dv) in d_values.into_iter().enumerate() {
            grads.accumulate(self.values[k], Tensor::from_vec(&[c, h, w], dv)?)?;
        }
        for (k, dq) in d_queries.into_iter().enumerate() {
            grads.accumulate(self.queries[k], Tensor::from_vec(&[c, h, w], dq)?)?;
        }
        for m in 0..m_heads {
            grads.accumulate(self.offset_w[m], Tensor::from_vec(&[2 * j, c], d_offw[m].clone())?)?;
            grads.accumulate(self.offset_b[m], Tensor::from_vec(&[2 * j], d_offb[m].clone())?)?;
            grads.accumulate(self.attn_w[m], Tensor::from_vec(&[j, c], d_attw[m].clone())?)?;
            grads.accumulate(self.attn_b[m], Tensor::from_vec(&[j], d_attb[m].clone())?)?;
            grads.accumulate(self.value_w[m], Tensor::from_vec(&[d, c], d_valw[m].clone())?)?;
            grads.accumulate(self.out_w[m], Tensor::from_vec(&[c, d], d_outw[m].clone())?)?;
        }
        Ok(())
    }
}

/// Multi-head deformable cross-attention over `K` feature maps.
///
/// For each grid position `q` (its own reference point), head `m` and frame
/// slot `k`: the query feature `H_k(q)` is projected to `J` sampling offsets
/// and `J` attention logits; logits are softmax-normalized over `J` per frame
/// (or jointly over `K*J` when configured); sampled values are projected to
/// the head dimension, combined as `sum_k sum_j a * W_v * sample`, and heads
/// are mixed back by `W_o`:
/// `y(q) = sum_m W_o[m] (sum_k sum_j a[m,k,j](q) * W_v[m] * X_k(q + dp[m,k,j](q)))`.
///
/// `values[k]` and `queries[k]` are `[C, H, W]`; per head `m`:
/// `offset_w [2J, C]`, `offset_b [2J]`, `attn_w [J, C]`, `attn_b [J]`,
/// `value_w [C/M, C]`, `out_w [C, C/M]`.
#[allow(clippy::too_many_arguments)]
pub fn deformable_cross_attention(
    tape: &mut Tape,
    values: &[ValueId],
    queries: &[ValueId],
    offset_w: &[ValueId],
    offset_b: &[ValueId],
    attn_w: &[ValueId],
    attn_b: &[ValueId],
    value_w: &[ValueId],
    out_w: &[ValueId],
    cfg: DeformAttnCfg,
) -> Result<ValueId> {
    if values.is_empty() || values.len() != queries.len() {
        return Err(Error::config(format!(
            "deformable_cross_attention: {} value maps vs {} query maps",
            values.len(),
            queries.len()
        )));
    }
    let shape = tape.value(values[0]).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "deformable_cross_attention expects [C,H,W] maps, got {}",
            shape_str(&shape)
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for &id in values.iter().chain(queries) {
        if tape.value(id).shape() != [c, h, w] {
            return Err(Error::shape(format!(
                "deformable_cross_attention: map {} does not match {}",
                shape_str(tape.value(id).shape()),
                shape_str(&shape)
            )));
        }
    }
    let (m_heads, j) = (cfg.heads, cfg.points);
    if m_heads == 0 || c % m_heads != 0 {
        return Err(Error::config(format!(
            "deformable_cross_attention: heads {m_heads} must divide channels {c}"
        )));
    }
    if j == 0 {
        return Err(Error::config("deformable_cross_attention: points must be positive"));
    }
    let d = c / m_heads;
    let expect = |ids: &[ValueId], shape: &[usize], what: &str| -> Result<()> {
        if ids.len() != m_heads {
            return Err(Error::config(format!(
                "deformable_cross_attention: {} {what} tensors for {m_heads} heads",
                ids.len()
            )));
        }
        for &id in ids {
            if tape.value(id).shape() != shape {
                return Err(Error::shape(format!(
                    "deformable_cross_attention: {what} shape {} expected {}",
                    shape_str(tape.value(id).shape()),
                    shape_str(shape)
                )));
            }
        }
        Ok(())
    };
    expect(offset_w, &[2 * j, c], "offset weight")?;
    expect(offset_b, &[2 * j], "offset bias")?;
    expect(attn_w, &[j, c], "attention weight")?;
    expect(attn_b, &[j], "attention bias")?;
    expect(value_w, &[d, c], "value projection")?;
    expect(out_w, &[c, d], "output projection")?;

    let op = DeformAttnOp {
        values: values.to_vec(),
        queries: queries.to_vec(),
        offset_w: offset_w.to_vec(),
        offset_b: offset_b.to_vec(),
        attn_w: attn_w.to_vec(),
        attn_b: attn_b.to_vec(),
        value_w: value_w.to_vec(),
        out_w: out_w.to_vec(),
        cfg,
        c,
        h,
        w,
    };
    let hw = h * w;
    let k_frames = values.len();
    let value_data: Vec<&[f64]> = values.iter().map(|&v| tape.value(v).data()).collect();
    let query_data: Vec<&[f64]> = queries.iter().map(|&v| tape.value(v).data()).collect();
    let offw: Vec<&[f64]> = offset_w.iter().map(|&v| tape.value(v).data()).collect();
    let offb: Vec<&[f64]> = offset_b.iter().map(|&v| tape.value(v).data()).collect();
    let attw: Vec<&[f64]> = attn_w.iter().map(|&v| tape.value(v).data()).collect();
    let attb: Vec<&[f64]> = attn_b.iter().map(|&v| tape.value(v).data()).collect();
    let valw: Vec<&[f64]> = value_w.iter().map(|&v| tape.value(v).data()).collect();
    let outw: Vec<&[f64]> = out_w.iter().map(|&v| tape.value(v).data()).collect();
    let mut out = vec![0.0; c * hw];
    let mut trace: Option<Vec<Tensor>> = tape.attn_trace.as_ref().map(|_| {
        (0..k_frames * m_heads)
            .map(|_| Tensor::zeros(&[j, h, w]))
            .collect()
    });
    let mut probe_dev: Option<(usize, f64)> = tape.probe.as_ref().map(|_| (0, 0.0));
    for py in 0..h {
        for px in 0..w {
            let pos = py * w + px;
            for m in 0..m_heads {
                let scratch = op.head_scratch(
                    m, py, px, &value_data, &query_data, &offw, &offb, &attw, &attb, &valw,
                );
                if let Some((groups, dev)) = probe_dev.as_mut() {
                    if cfg.joint_softmax {
                        let sum: f64 = scratch.attn.iter().sum();
                        *groups += 1;
                        *dev = dev.max((sum - 1.0).abs());
                    } else {
                        for k in 0..k_frames {
                            let sum: f64 = scratch.attn[k * j..(k + 1) * j].iter().sum();
                            *groups += 1;
                            *dev = dev.max((sum - 1.0).abs());
                        }
                    }
                }
                if let Some(trace) = trace.as_mut() {
                    for k in 0..k_frames {
                        for jj in 0..j {
                            trace[k * m_heads + m].data_mut()[jj * hw + pos] =
                                scratch.attn[k * j + jj];
                        }
                    }
                }
                for ci in 0..c {
                    let row = &outw[m][ci * d..(ci + 1) * d];
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += row[dd] * scratch.head_out[dd];
                    }
                    out[ci * hw + pos] += acc;
                }
            }
        }
    }
    if let Some((groups, dev)) = probe_dev {
        if let Some(probe) = tape.probe.as_mut() {
            probe.softmax_groups += groups;
            probe.softmax_max_sum_dev = probe.softmax_max_sum_dev.max(dev);
        }
    }
    if let Some(trace) = trace {
        let label = tape.attn_label.clone();
        if let Some(records) = tape.attn_trace.as_mut() {
            for k in 0..k_frames {
                for m in 0..m_heads {
                    records.push(AttnRecord {
                        label: label.clone(),
                        lag: k,
                        head: m,
                        weights: trace[k * m_heads + m].clone(),
                    });
                }
            }
        }
    }
    let out = Tensor::from_vec(&[c, h, w], out)?.with_dtype(tape.value(values[0]).dtype());
    tape.push_op(out, Box::new(op))
}
