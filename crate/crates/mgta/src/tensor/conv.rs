//! Spatial kernels over `[C, H, W]` maps: 2-D convolution (cross-correlation),
//! 2x bilinear upsampling, segment max-pooling, and scatter to a canvas.

use crate::error::{Error, Result};
use crate::tensor::ops::val;
use crate::tensor::tape::{Grads, Node, Tape, TapeOp, ValueId};
use crate::tensor::{shape_str, Tensor};

/// Padding mode for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// `(k - 1) / 2` on each side; requires odd kernels.
    Same,
    Explicit(usize),
}

struct Conv2dSpec {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dSpec {
    /// Valid output-column range for kernel column `kx`:
    /// `0 <= ox*stride - pad + kx < w`.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        range_for(kx, self.pad, self.stride, self.w, self.ow)
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        range_for(ky, self.pad, self.stride, self.h, self.oh)
    }
}

fn range_for(k: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad <= extent - 1
    let hi_raw = extent + pad;
    let hi = if hi_raw > k {
        ((hi_raw - 1 - k) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct Conv2dOp {
    x: ValueId,
    w: ValueId,
    b: Option<ValueId>,
    spec: Conv2dSpec,
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let s = &self.spec;
        let x = val(nodes, self.x).data();
        let w = val(nodes, self.w).data();
        let gy = g.data();
        let mut dx = vec![0.0; s.c_in * s.h * s.w];
        let mut dw = vec![0.0; s.c_out * s.c_in * s.kh * s.kw];
        for co in 0..s.c_out {
            for ci in 0..s.c_in {
                for ky in 0..s.kh {
                    let (oy_lo, oy_hi) = s.oy_range(ky);
                    for kx in 0..s.kw {
                        let (ox_lo, ox_hi) = s.ox_range(kx);
                        let wv = w[((co * s.c_in + ci) * s.kh + ky) * s.kw + kx];
                        let mut dw_acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s.stride + ky - s.pad;
                            let grow = &gy[(co * s.oh + oy) * s.ow..][..s.ow];
                            let xrow = &x[(ci * s.h + iy) * s.w..][..s.w];
                            let dxrow = &mut dx[(ci * s.h + iy) * s.w..][..s.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s.stride + kx - s.pad;
                                let gv = grow[ox];
                                dw_acc += gv * xrow[ix];
                                dxrow[ix] += gv * wv;
                            }
                        }
                        dw[((co * s.c_in + ci) * s.kh + ky) * s.kw + kx] += dw_acc;
                    }
                }
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(&[s.c_in, s.h, s.w], dx)?)?;
        grads.accumulate(
            self.w,
            Tensor::from_vec(&[s.c_out, s.c_in, s.kh, s.kw], dw)?,
        )?;
        if let Some(b) = self.b {
            let mut db = vec![0.0; s.c_out];
            for co in 0..s.c_out {
                db[co] = gy[co * s.oh * s.ow..(co + 1) * s.oh * s.ow].iter().sum();
            }
            grads.accumulate(b, Tensor::from_vec(&[s.c_out], db)?)?;
        }
        Ok(())
    }
}

/// 2-D convolution (cross-correlation, zero padding).
///
/// `x: [C_in, H, W]`, `weight: [C_out, C_in, kh, kw]`, optional bias
/// `[C_out]`. `Pad::Same` keeps `H, W` at stride 1 and requires odd kernels.
pub fn conv2d(
    tape: &mut Tape,
    x: ValueId,
    weight: ValueId,
    bias: Option<ValueId>,
    stride: usize,
    pad: Pad,
) -> Result<ValueId> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(weight).shape().to_vec();
    if xs.len() != 3 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d: expected x [C,H,W] and weight [Co,Ci,kh,kw], got {} and {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    if xs[0] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d: input channels {} do not match weight {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive".to_string()));
    }
    let (kh, kw) = (ws[2], ws[3]);
    let pad = match pad {
        Pad::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::config(format!(
                    "conv2d: same padding requires odd kernels, got {kh}x{kw}"
                )));
            }
            (kh - 1) / 2
        }
        Pad::Explicit(p) => p,
    };
    let (h, w) = (xs[1], xs[2]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let c_out = ws[0];
    if let Some(b) = bias {
        if tape.value(b).shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {} does not match C_out {}",
                shape_str(tape.value(b).shape()),
                c_out
            )));
        }
    }
    let spec = Conv2dSpec {
        c_in: xs[0],
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    let xv = tape.value(x).data();
    let wv = tape.value(weight).data();
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        if let Some(b) = bias {
            let bv = tape.value(b).data()[co];
            for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *v = bv;
            }
        }
        for ci in 0..spec.c_in {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = spec.oy_range(ky);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = spec.ox_range(kx);
                    let wval = wv[((co * spec.c_in + ci) * kh + ky) * kw + kx];
                    if wval == 0.0 {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xv[(ci * h + iy) * w..][..w];
                        let orow = &mut out[(co * oh + oy) * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            orow[ox] += wval * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[c_out, oh, ow], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(
        out,
        Box::new(Conv2dOp {
            x,
            w: weight,
            b: bias,
            spec,
        }),
    )
}

// ---------------------------------------------------------------- upsample 2x

struct Upsample2xOp {
    x: ValueId,
    c: usize,
    h: usize,
    w: usize,
}

/// Source row/col index pair plus interpolation weight for one output index,
/// half-pixel convention with border replication.
fn up2_sources(o: usize, extent: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let i0f = src.floor();
    let frac = src - i0f;
    let i0 = (i0f.max(0.0) as usize).min(extent - 1);
    let i1 = ((i0f + 1.0).max(0.0) as usize).min(extent - 1);
    (i0, i1, frac)
}

impl TapeOp for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample_bilinear_2x"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let (c, h, w) = (self.c, self.h, self.w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = up2_sources(oy, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = up2_sources(ox, w);
                    let gv = g.data()[(ch * oh + oy) * ow + ox];
                    dx[(ch * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[(ch * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                    dx[(ch * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                    dx[(ch * h + y1) * w + x1] += gv * fy * fx;
                }
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Doubles spatial dims of a `[C, H, W]` map with bilinear interpolation
/// (half-pixel sampling, border replication).
pub fn upsample_bilinear_2x(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "upsample_bilinear_2x expects [C,H,W], got {}",
            shape_str(&s)
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let xv = tape.value(x).data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = up2_sources(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = up2_sources(ox, w);
                let v = (1.0 - fy) * (1.0 - fx) * xv[(ch * h + y0) * w + x0]
                    + (1.0 - fy) * fx * xv[(ch * h + y0) * w + x1]
                    + fy * (1.0 - fx) * xv[(ch * h + y1) * w + x0]
                    + fy * fx * xv[(ch * h + y1) * w + x1];
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    let out = Tensor::from_vec(&[c, oh, ow], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(out, Box::new(Upsample2xOp { x, c, h, w }))
}

// ---------------------------------------------------------------- segment max

struct SegmentMaxOp {
    x: ValueId,
    argmax: Vec<usize>,
    c: usize,
}

impl TapeOp for SegmentMaxOp {
    fn name(&self) -> &'static str {
        "segment_max"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let mut dx = vec![0.0; val(nodes, self.x).numel()];
        for (slot, &src_row) in self.argmax.iter().enumerate() {
            let chan = slot % self.c;
            dx[src_row * self.c + chan] += g.data()[slot];
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Per-segment channel-wise max over rows of `x: [P, C]`.
///
/// `segments` are non-empty `[start, end)` row ranges. Gradient flows to the
/// argmax row per (segment, channel); ties go to the lowest row index.
pub fn segment_max(tape: &mut Tape, x: ValueId, segments: &[(usize, usize)]) -> Result<ValueId> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!(
            "segment_max expects [P, C], got {}",
            shape_str(&s)
        )));
    }
    let (p, c) = (s[0], s[1]);
    let xv = tape.value(x).data();
    let mut out = vec![0.0; segments.len() * c];
    let mut argmax = vec![0usize; segments.len() * c];
    for (si, &(start, end)) in segments.iter().enumerate() {
        if start >= end || end > p {
            return Err(Error::config(format!(
                "segment_max: segment {si} range {start}..{end} invalid for {p} rows"
            )));
        }
        for chan in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = start;
            for row in start..end {
                let v = xv[row * c + chan];
                if v > best {
                    best = v;
                    best_row = row;
                }
            }
            out[si * c + chan] = best;
            argmax[si * c + chan] = best_row;
        }
    }
    let out = Tensor::from_vec(&[segments.len(), c], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(out, Box::new(SegmentMaxOp { x, argmax, c }))
}

// ---------------------------------------------------------------- scatter

struct ScatterChwOp {
    x: ValueId,
    coords: Vec<(usize, usize)>,
    c: usize,
    h: usize,
    w: usize,
}

impl TapeOp for ScatterChwOp {
    fn name(&self) -> &'static str {
        "scatter_chw"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let mut dx = vec![0.0; self.coords.len() * self.c];
        for (v, &(iy, ix)) in self.coords.iter().enumerate() {
            for chan in 0..self.c {
                dx[v * self.c + chan] = g.data()[(chan * self.h + iy) * self.w + ix];
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Scatters per-row features `x: [V, C]` onto a zero canvas `[C, H, W]` at
/// the given `(iy, ix)` cells; rows mapping to the same cell sum.
pub fn scatter_chw(
    tape: &mut Tape,
    x: ValueId,
    coords: &[(usize, usize)],
    h: usize,
    w: usize,
) -> Result<ValueId> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 2 || s[0] != coords.len() {
        return Err(Error::shape(format!(
            "scatter_chw: rows of {} must match {} coords",
            shape_str(&s),
            coords.len()
        )));
    }
    let c = s[1];
    for &(iy, ix) in coords {
        if iy >= h || ix >= w {
            return Err(Error::config(format!(
                "scatter_chw: cell ({iy}, {ix}) outside {h}x{w} canvas"
            )));
        }
    }
    let xv = tape.value(x).data();
    let mut out = vec![0.0; c * h * w];
    for (v, &(iy, ix)) in coords.iter().enumerate() {
        for chan in 0..c {
            out[(chan * h + iy) * w + ix] += xv[v * c + chan];
        }
    }
    let out = Tensor::from_vec(&[c, h, w], out)?.with_dtype(tape.value(x).dtype());
    tape.push_op(
        out,
        Box::new(ScatterChwOp {
            x,
            coords: coords.to_vec(),
            c,
            h,
            w,
        }),
    )
}
