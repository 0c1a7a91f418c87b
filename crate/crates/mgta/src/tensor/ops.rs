//! Elementwise, shape, linear and normalization primitives.
//!
//! Every function records exactly one op on the tape and returns the output
//! value id. Backward implementations live next to their forward and are
//! exercised against central finite differences in the tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Grads, Node, Tape, TapeOp, ValueId};
use crate::tensor::{shape_str, Tensor};
use crate::util::rng_from_seed;

pub(crate) fn val(nodes: &[Node], id: ValueId) -> &Tensor {
    &nodes[id.0].value
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shape mismatch {} vs {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    Ok(())
}

/// Output tensor inheriting dtype from an input.
fn like(tape: &Tape, id: ValueId, shape: &[usize], data: Vec<f64>) -> Tensor {
    let dtype = tape.value(id).dtype();
    Tensor::from_vec(shape, data)
        .expect("internal: op produced wrong element count")
        .with_dtype(dtype)
}

// ---------------------------------------------------------------- add / sub

struct AddOp {
    a: ValueId,
    b: ValueId,
}

impl TapeOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        grads.accumulate(self.a, g.clone())?;
        grads.accumulate(self.b, g)
    }
}

pub fn add(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    same_shape(tape.value(a), tape.value(b), "add")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let out = like(tape, a, &tape.value(a).shape().to_vec(), data);
    tape.push_op(out, Box::new(AddOp { a, b }))
}

struct SubOp {
    a: ValueId,
    b: ValueId,
}

impl TapeOp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let mut neg = g.clone();
        neg.scale_in_place(-1.0);
        grads.accumulate(self.a, g)?;
        grads.accumulate(self.b, neg)
    }
}

pub fn sub(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    same_shape(tape.value(a), tape.value(b), "sub")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x - y)
        .collect();
    let out = like(tape, a, &tape.value(a).shape().to_vec(), data);
    tape.push_op(out, Box::new(SubOp { a, b }))
}

// ---------------------------------------------------------------- mul / scale

struct MulOp {
    a: ValueId,
    b: ValueId,
}

impl TapeOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let da: Vec<f64> = g
            .data()
            .iter()
            .zip(val(nodes, self.b).data())
            .map(|(g, b)| g * b)
            .collect();
        let db: Vec<f64> = g
            .data()
            .iter()
            .zip(val(nodes, self.a).data())
            .map(|(g, a)| g * a)
            .collect();
        let shape = g.shape().to_vec();
        grads.accumulate(self.a, Tensor::from_vec(&shape, da)?)?;
        grads.accumulate(self.b, Tensor::from_vec(&shape, db)?)
    }
}

pub fn mul(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    same_shape(tape.value(a), tape.value(b), "mul")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let out = like(tape, a, &tape.value(a).shape().to_vec(), data);
    tape.push_op(out, Box::new(MulOp { a, b }))
}

struct ScaleOp {
    x: ValueId,
    k: f64,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let mut g = grads.output(out).unwrap().clone();
        g.scale_in_place(self.k);
        grads.accumulate(self.x, g)
    }
}

pub fn scale(tape: &mut Tape, x: ValueId, k: f64) -> Result<ValueId> {
    let data = tape.value(x).data().iter().map(|v| v * k).collect();
    let out = like(tape, x, &tape.value(x).shape().to_vec(), data);
    tape.push_op(out, Box::new(ScaleOp { x, k }))
}

// ---------------------------------------------------------------- relu / sigmoid

struct ReluOp {
    x: ValueId,
}

impl TapeOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let dx: Vec<f64> = g
            .data()
            .iter()
            .zip(val(nodes, self.x).data())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        let shape = g.shape().to_vec();
        grads.accumulate(self.x, Tensor::from_vec(&shape, dx)?)
    }
}

pub fn relu(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let data = tape.value(x).data().iter().map(|v| v.max(0.0)).collect();
    let out = like(tape, x, &tape.value(x).shape().to_vec(), data);
    tape.push_op(out, Box::new(ReluOp { x }))
}

struct SigmoidOp {
    x: ValueId,
}

impl TapeOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let s = val(nodes, out);
        let dx: Vec<f64> = g
            .data()
            .iter()
            .zip(s.data())
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        let shape = g.shape().to_vec();
        grads.accumulate(self.x, Tensor::from_vec(&shape, dx)?)
    }
}

pub fn sigmoid(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let data = tape
        .value(x)
        .data()
        .iter()
        .map(|v| {
            // Split by sign so neither exp overflows.
            if *v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let out = like(tape, x, &tape.value(x).shape().to_vec(), data);
    tape.push_op(out, Box::new(SigmoidOp { x }))
}

// ---------------------------------------------------------------- shape ops

struct ReshapeOp {
    x: ValueId,
    in_shape: Vec<usize>,
}

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let dx = Tensor::from_vec(&self.in_shape, g.data().to_vec())?;
        grads.accumulate(self.x, dx)
    }
}

pub fn reshape(tape: &mut Tape, x: ValueId, shape: &[usize]) -> Result<ValueId> {
    let n: usize = shape.iter().product();
    if n != tape.value(x).numel() {
        return Err(Error::shape(format!(
            "reshape: {} has {} elements, target {} needs {}",
            shape_str(tape.value(x).shape()),
            tape.value(x).numel(),
            shape_str(shape),
            n
        )));
    }
    let in_shape = tape.value(x).shape().to_vec();
    let out = like(tape, x, shape, tape.value(x).data().to_vec());
    tape.push_op(out, Box::new(ReshapeOp { x, in_shape }))
}

struct Transpose2dOp {
    x: ValueId,
    rows: usize,
    cols: usize,
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

impl TapeOp for Transpose2dOp {
    fn name(&self) -> &'static str {
        "transpose2d"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let dx = transpose_data(g.data(), self.cols, self.rows);
        grads.accumulate(self.x, Tensor::from_vec(&[self.rows, self.cols], dx)?)
    }
}

pub fn transpose2d(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "transpose2d expects rank 2, got {}",
            shape_str(&shape)
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let data = transpose_data(tape.value(x).data(), rows, cols);
    let out = like(tape, x, &[cols, rows], data);
    tape.push_op(out, Box::new(Transpose2dOp { x, rows, cols }))
}

// ---------------------------------------------------------------- concatenation

struct ConcatColsOp {
    a: ValueId,
    b: ValueId,
    rows: usize,
    ca: usize,
    cb: usize,
}

impl TapeOp for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, out: ValueId, _nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let (ca, cb) = (self.ca, self.cb);
        let mut da = vec![0.0; self.rows * ca];
        let mut db = vec![0.0; self.rows * cb];
        for r in 0..self.rows {
            let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
            da[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
            db[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
        }
        grads.accumulate(self.a, Tensor::from_vec(&[self.rows, ca], da)?)?;
        grads.accumulate(self.b, Tensor::from_vec(&[self.rows, cb], db)?)
    }
}

/// Concatenates two `[R, C]` matrices along columns.
pub fn concat_cols(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::shape(format!(
            "concat_cols: incompatible shapes {} and {}",
            shape_str(sa),
            shape_str(sb)
        )));
    }
    let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&tape.value(a).data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&tape.value(b).data()[r * cb..(r + 1) * cb]);
    }
    let out = like(tape, a, &[rows, ca + cb], data);
    tape.push_op(out, Box::new(ConcatColsOp { a, b, rows, ca, cb }))
}

struct ConcatChannelsOp {
    parts: Vec<ValueId>,
    channels: Vec<usize>,
    plane: usize,
}

impl TapeOp for ConcatChannelsOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let mut offset = 0;
        for (part, &c) in self.parts.iter().zip(&self.channels) {
            let n = c * self.plane;
            let dx = Tensor::from_vec(
                val(nodes, *part).shape(),
                g.data()[offset..offset + n].to_vec(),
            )?;
            grads.accumulate(*part, dx)?;
            offset += n;
        }
        Ok(())
    }
}

/// Concatenates `[C_i, H, W]` maps along the channel axis.
pub fn concat_channels(tape: &mut Tape, parts: &[ValueId]) -> Result<ValueId> {
    if parts.is_empty() {
        return Err(Error::config("concat_channels: no inputs"));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let first = tape.value(parts[0]).shape().to_vec();
    if first.len() != 3 {
        return Err(Error::shape(format!(
            "concat_channels expects rank-3 maps, got {}",
            shape_str(&first)
        )));
    }
    let (h, w) = (first[1], first[2]);
    let mut channels = Vec::new();
    let mut data = Vec::new();
    for &p in parts {
        let s = tape.value(p).shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(Error::shape(format!(
                "concat_channels: map {} incompatible with {}",
                shape_str(s),
                shape_str(&first)
            )));
        }
        channels.push(s[0]);
        data.extend_from_slice(tape.value(p).data());
    }
    let c_total: usize = channels.iter().sum();
    let out = like(tape, parts[0], &[c_total, h, w], data);
    tape.push_op(
        out,
        Box::new(ConcatChannelsOp {
            parts: parts.to_vec(),
            channels,
            plane: h * w,
        }),
    )
}

struct SliceChannelsOp {
    x: ValueId,
    lo: usize,
    hi: usize,
    in_c: usize,
    plane: usize,
}

impl TapeOp for SliceChannelsOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let mut dx = vec![0.0; self.in_c * self.plane];
        dx[self.lo * self.plane..self.hi * self.plane].copy_from_slice(g.data());
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Takes channels `lo..hi` of a `[C, H, W]` map.
pub fn slice_channels(tape: &mut Tape, x: ValueId, lo: usize, hi: usize) -> Result<ValueId> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "slice_channels expects rank-3 map, got {}",
            shape_str(&s)
        )));
    }
    if lo >= hi || hi > s[0] {
        return Err(Error::config(format!(
            "slice_channels: range {lo}..{hi} invalid for {} channels",
            s[0]
        )));
    }
    let plane = s[1] * s[2];
    let data = tape.value(x).data()[lo * plane..hi * plane].to_vec();
    let out = like(tape, x, &[hi - lo, s[1], s[2]], data);
    tape.push_op(
        out,
        Box::new(SliceChannelsOp {
            x,
            lo,
            hi,
            in_c: s[0],
            plane,
        }),
    )
}

// ---------------------------------------------------------------- matmul / fc

struct MatmulOp {
    a: ValueId,
    b: ValueId,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl TapeOp for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let (m, k, n) = (self.m, self.k, self.n);
        let a = val(nodes, self.a).data();
        let b = val(nodes, self.b).data();
        // dA = g · Bᵀ
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                let mut acc = 0.0;
                let grow = &g.data()[i * n..(i + 1) * n];
                let brow = &b[p * n..(p + 1) * n];
                for (gv, bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                da[i * k + p] = acc;
            }
        }
        // dB = Aᵀ · g
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let grow = &g.data()[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &mut db[p * n..(p + 1) * n];
                for (o, gv) in brow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        grads.accumulate(self.a, Tensor::from_vec(&[m, k], da)?)?;
        grads.accumulate(self.b, Tensor::from_vec(&[k, n], db)?)
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(format!(
            "matmul: incompatible shapes {} and {}",
            shape_str(&sa),
            shape_str(&sb)
        )));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = matmul_data(tape.value(a).data(), tape.value(b).data(), m, k, n);
    let out = like(tape, a, &[m, n], data);
    tape.push_op(out, Box::new(MatmulOp { a, b, m, k, n }))
}

struct FcOp {
    x: ValueId,
    w: ValueId,
    b: Option<ValueId>,
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl TapeOp for FcOp {
    fn name(&self) -> &'static str {
        "fc"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let (rows, ci, co) = (self.rows, self.c_in, self.c_out);
        let x = val(nodes, self.x).data();
        let w = val(nodes, self.w).data();
        let mut dx = vec![0.0; rows * ci];
        let mut dw = vec![0.0; ci * co];
        for r in 0..rows {
            let grow = &g.data()[r * co..(r + 1) * co];
            let xrow = &x[r * ci..(r + 1) * ci];
            for i in 0..ci {
                let wrow = &w[i * co..(i + 1) * co];
                let mut acc = 0.0;
                for (gv, wv) in grow.iter().zip(wrow) {
                    acc += gv * wv;
                }
                dx[r * ci + i] = acc;
                let xv = xrow[i];
                if xv != 0.0 {
                    let dwrow = &mut dw[i * co..(i + 1) * co];
                    for (d, gv) in dwrow.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)?;
        grads.accumulate(self.w, Tensor::from_vec(&[ci, co], dw)?)?;
        if let Some(b) = self.b {
            let mut db = vec![0.0; co];
            for r in 0..rows {
                for c in 0..co {
                    db[c] += g.data()[r * co + c];
                }
            }
            grads.accumulate(b, Tensor::from_vec(&[co], db)?)?;
        }
        Ok(())
    }
}

/// Fully connected layer over the last axis: `[.., C_in] -> [.., C_out]`
/// with weight `[C_in, C_out]` and optional bias `[C_out]`.
pub fn fc(tape: &mut Tape, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.is_empty() || ws.len() != 2 {
        return Err(Error::shape(format!(
            "fc: expected [.., C_in] x [C_in, C_out], got {} and {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    let c_in = *xs.last().unwrap();
    if c_in != ws[0] {
        return Err(Error::shape(format!(
            "fc: input channels {} do not match weight {}",
            shape_str(&xs),
            shape_str(&ws)
        )));
    }
    let c_out = ws[1];
    if let Some(b) = b {
        let bs = tape.value(b).shape();
        if bs != [c_out] {
            return Err(Error::shape(format!(
                "fc: bias shape {} does not match C_out {}",
                shape_str(bs),
                c_out
            )));
        }
    }
    let rows = tape.value(x).numel() / c_in;
    let mut data = matmul_data(tape.value(x).data(), tape.value(w).data(), rows, c_in, c_out);
    if let Some(bid) = b {
        let bias = tape.value(bid).data().to_vec();
        for r in 0..rows {
            for c in 0..c_out {
                data[r * c_out + c] += bias[c];
            }
        }
    }
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = c_out;
    let out = like(tape, x, &out_shape, data);
    tape.push_op(
        out,
        Box::new(FcOp {
            x,
            w,
            b,
            rows,
            c_in,
            c_out,
        }),
    )
}

// ---------------------------------------------------------------- softmax

struct SoftmaxOp {
    x: ValueId,
    rows: usize,
    c: usize,
}

impl TapeOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let s = val(nodes, out).data();
        let mut dx = vec![0.0; self.rows * self.c];
        for r in 0..self.rows {
            let srow = &s[r * self.c..(r + 1) * self.c];
            let grow = &g.data()[r * self.c..(r + 1) * self.c];
            let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
            for i in 0..self.c {
                dx[r * self.c + i] = srow[i] * (grow[i] - dot);
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Computes one softmax row in place, max-subtracted for stability.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::shape("softmax on rank-0 tensor".to_string()))?;
    if c == 0 {
        return Err(Error::shape("softmax over empty axis".to_string()));
    }
    let rows = tape.value(x).numel() / c;
    let mut data = tape.value(x).data().to_vec();
    for r in 0..rows {
        softmax_row(&mut data[r * c..(r + 1) * c]);
    }
    if let Some(probe) = tape.probe.as_mut() {
        for r in 0..rows {
            let sum: f64 = data[r * c..(r + 1) * c].iter().sum();
            probe.softmax_groups += 1;
            probe.softmax_max_sum_dev = probe.softmax_max_sum_dev.max((sum - 1.0).abs());
        }
    }
    let out = like(tape, x, &shape, data);
    tape.push_op(out, Box::new(SoftmaxOp { x, rows, c }))
}

// ---------------------------------------------------------------- layer norm

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct LayerNormOp {
    x: ValueId,
    gamma: ValueId,
    beta: ValueId,
    rows: usize,
    c: usize,
}

impl TapeOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().clone();
        let (rows, c) = (self.rows, self.c);
        let x = val(nodes, self.x).data();
        let gamma = val(nodes, self.gamma).data();
        let mut dx = vec![0.0; rows * c];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let cf = c as f64;
        for r in 0..rows {
            let xrow = &x[r * c..(r + 1) * c];
            let grow = &g.data()[r * c..(r + 1) * c];
            let mean = xrow.iter().sum::<f64>() / cf;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            // dy_hat = dy * gamma; dx = inv * (dy_hat - mean(dy_hat) - xhat * mean(dy_hat * xhat))
            let mut sum_dyh = 0.0;
            let mut sum_dyh_xhat = 0.0;
            for i in 0..c {
                let xhat = (xrow[i] - mean) * inv;
                let dyh = grow[i] * gamma[i];
                sum_dyh += dyh;
                sum_dyh_xhat += dyh * xhat;
                dgamma[i] += grow[i] * xhat;
                dbeta[i] += grow[i];
            }
            let m1 = sum_dyh / cf;
            let m2 = sum_dyh_xhat / cf;
            for i in 0..c {
                let xhat = (xrow[i] - mean) * inv;
                let dyh = grow[i] * gamma[i];
                dx[r * c + i] = inv * (dyh - m1 - xhat * m2);
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)?;
        grads.accumulate(self.gamma, Tensor::from_vec(&[c], dgamma)?)?;
        grads.accumulate(self.beta, Tensor::from_vec(&[c], dbeta)?)
    }
}

/// Layer normalization over the last axis (`C >= 2`), with affine params.
/// Epsilon sits inside the square root: `(x - mean) / sqrt(var + 1e-5)`.
pub fn layer_norm(tape: &mut Tape, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::shape("layer_norm on rank-0 tensor".to_string()))?;
    if c < 2 {
        return Err(Error::config(format!(
            "layer_norm needs at least 2 channels, got {c}"
        )));
    }
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm: affine shapes {} / {} do not match C={}",
            shape_str(tape.value(gamma).shape()),
            shape_str(tape.value(beta).shape()),
            c
        )));
    }
    let rows = tape.value(x).numel() / c;
    let xv = tape.value(x).data().to_vec();
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let cf = c as f64;
    let mut data = vec![0.0; rows * c];
    let mut probe_stats: Option<(f64, f64)> = tape.probe.as_ref().map(|_| (0.0, 0.0));
    for r in 0..rows {
        let xrow = &xv[r * c..(r + 1) * c];
        let mean = xrow.iter().sum::<f64>() / cf;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        if let Some((max_mean, max_std_dev)) = probe_stats.as_mut() {
            let mut nm = 0.0;
            let mut nsq = 0.0;
            for v in xrow {
                let xhat = (v - mean) * inv;
                nm += xhat;
                nsq += xhat * xhat;
            }
            nm /= cf;
            let nstd = (nsq / cf - nm * nm).max(0.0).sqrt();
            *max_mean = max_mean.max(nm.abs());
            *max_std_dev = max_std_dev.max((nstd - 1.0).abs());
        }
        for i in 0..c {
            let xhat = (xrow[i] - mean) * inv;
            data[r * c + i] = gv[i] * xhat + bv[i];
        }
    }
    if let (Some(probe), Some((max_mean, max_std_dev))) = (tape.probe.as_mut(), probe_stats) {
        probe.layernorm_positions += rows;
        probe.layernorm_max_mean = probe.layernorm_max_mean.max(max_mean);
        probe.layernorm_max_std_dev = probe.layernorm_max_std_dev.max(max_std_dev);
    }
    let out = like(tape, x, &shape, data);
    tape.push_op(
        out,
        Box::new(LayerNormOp {
            x,
            gamma,
            beta,
            rows,
            c,
        }),
    )
}

// ---------------------------------------------------------------- dropout

struct DropoutOp {
    x: ValueId,
    mult: Vec<f64>,
}

impl TapeOp for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let dx: Vec<f64> = g.data().iter().zip(&self.mult).map(|(g, m)| g * m).collect();
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Inverted dropout: in training mode zeroes each element with probability
/// `rate` and scales survivors by `1/(1-rate)`; in eval mode it is the
/// identity (the input id is returned unchanged). The mask is a pure
/// function of `seed`.
pub fn dropout(tape: &mut Tape, x: ValueId, rate: f64, seed: u64) -> Result<ValueId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !tape.is_train() || rate == 0.0 {
        return Ok(x);
    }
    let mut rng = rng_from_seed(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    let mult: Vec<f64> = (0..tape.value(x).numel())
        .map(|_| {
            if rng.gen::<f64>() >= rate {
                keep_scale
            } else {
                0.0
            }
        })
        .collect();
    let data = tape
        .value(x)
        .data()
        .iter()
        .zip(&mult)
        .map(|(v, m)| v * m)
        .collect();
    let out = like(tape, x, &tape.value(x).shape().to_vec(), data);
    tape.push_op(out, Box::new(DropoutOp { x, mult }))
}

// ---------------------------------------------------------------- reductions

struct MeanLeadingOp {
    x: ValueId,
    rows: usize,
    c: usize,
}

impl TapeOp for MeanLeadingOp {
    fn name(&self) -> &'static str {
        "mean_leading"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap();
        let scale = 1.0 / self.rows as f64;
        let mut dx = vec![0.0; self.rows * self.c];
        for r in 0..self.rows {
            for i in 0..self.c {
                dx[r * self.c + i] = g.data()[i] * scale;
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)
    }
}

/// Mean over all leading (non-channel) axes: `[.., C] -> [C]`.
pub fn mean_leading(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::shape("mean_leading on rank-0 tensor".to_string()))?;
    let rows = tape.value(x).numel() / c;
    if rows == 0 {
        return Err(Error::shape("mean_leading over zero rows".to_string()));
    }
    let mut data = vec![0.0; c];
    for r in 0..rows {
        for i in 0..c {
            data[i] += tape.value(x).data()[r * c + i];
        }
    }
    for v in &mut data {
        *v /= rows as f64;
    }
    let out = like(tape, x, &[c], data);
    tape.push_op(out, Box::new(MeanLeadingOp { x, rows, c }))
}

struct BroadcastMulLastOp {
    x: ValueId,
    g: ValueId,
    rows: usize,
    c: usize,
}

impl TapeOp for BroadcastMulLastOp {
    fn name(&self) -> &'static str {
        "broadcast_mul_last"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let up = grads.output(out).unwrap().clone();
        let x = val(nodes, self.x).data();
        let gate = val(nodes, self.g).data();
        let mut dx = vec![0.0; self.rows * self.c];
        let mut dg = vec![0.0; self.c];
        for r in 0..self.rows {
            for i in 0..self.c {
                let u = up.data()[r * self.c + i];
                dx[r * self.c + i] = u * gate[i];
                dg[i] += u * x[r * self.c + i];
            }
        }
        grads.accumulate(self.x, Tensor::from_vec(val(nodes, self.x).shape(), dx)?)?;
        grads.accumulate(self.g, Tensor::from_vec(&[self.c], dg)?)
    }
}

/// Multiplies `[.., C]` by a per-channel gate `[C]`.
pub fn broadcast_mul_last(tape: &mut Tape, x: ValueId, gate: ValueId) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::shape("broadcast_mul_last on rank-0 tensor".to_string()))?;
    if tape.value(gate).shape() != [c] {
        return Err(Error::shape(format!(
            "broadcast_mul_last: gate {} does not match channels {}",
            shape_str(tape.value(gate).shape()),
            c
        )));
    }
    let rows = tape.value(x).numel() / c;
    let gv = tape.value(gate).data().to_vec();
    let data = tape
        .value(x)
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gv[i % c])
        .collect();
    let out = like(tape, x, &shape, data);
    tape.push_op(out, Box::new(BroadcastMulLastOp { x, g: gate, rows, c }))
}

struct SumAllOp {
    x: ValueId,
}

impl TapeOp for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, out: ValueId, nodes: &[Node], grads: &mut Grads) -> Result<()> {
        let g = grads.output(out).unwrap().item()?;
        let n = val(nodes, self.x).numel();
        grads.accumulate(
            self.x,
            Tensor::from_vec(val(nodes, self.x).shape(), vec![g; n])?,
        )
    }
}

/// Sum of all elements, as a `[1]` scalar.
pub fn sum_all(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let s: f64 = tape.value(x).data().iter().sum();
    let out = like(tape, x, &[1], vec![s]);
    tape.push_op(out, Box::new(SumAllOp { x }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> ValueId {
        tape.leaf(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn softmax_rows_sum_to_one_and_large_inputs_do_not_overflow() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], vec![1000.0, 0.0, 0.0]);
        let s = softmax(&mut tape, x).unwrap();
        let out = tape.value(s).data();
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4], vec![0.3, -1.0, 2.0, 0.0, 5.0, 5.0, 5.0, 5.0]);
        let s = softmax(&mut tape, x).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn softmax_backward_matches_hand_computed_jacobian() {
        // s = softmax([a, b]); d(s0)/da = s0*(1-s0), d(s0)/db = -s0*s1.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![0.7, -0.2]);
        let s = softmax(&mut tape, x).unwrap();
        let s0 = tape.value(s).data()[0];
        let s1 = tape.value(s).data()[1];
        tape.backward_with(s, Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let g = tape.grad(x).unwrap().data();
        assert!((g[0] - s0 * (1.0 - s0)).abs() < 1e-14);
        assert!((g[1] + s0 * s1).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_normalizes_before_affine() {
        let mut tape = Tape::new();
        tape.enable_probe();
        let c = 32;
        let mut rng = crate::util::rng_from_seed(9);
        let data: Vec<f64> = (0..4 * c)
            .map(|_| {
                // Roughly N(0, 2^2) via sum of uniforms; amplitude keeps the
                // epsilon bias on sigma well under the asserted tolerance.
                let u: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                2.0 * u
            })
            .collect();
        let x = leaf(&mut tape, &[4, c], data);
        let gamma = tape.leaf(Tensor::filled(&[c], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[c]));
        layer_norm(&mut tape, x, gamma, beta).unwrap();
        let probe = tape.probe().unwrap();
        assert_eq!(probe.layernorm_positions, 4);
        assert!(probe.layernorm_max_mean < 1e-10, "{probe:?}");
        assert!(probe.layernorm_max_std_dev < 1e-5, "{probe:?}");
    }

    #[test]
    fn layer_norm_constant_input_yields_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4], vec![3.5; 4]);
        let gamma = tape.leaf(Tensor::filled(&[4], 2.0));
        let beta = leaf(&mut tape, &[4], vec![0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&mut tape, x, gamma, beta).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - 0.1 * (i + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_single_channel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 1], vec![1.0, 2.0, 3.0]);
        let gamma = tape.leaf(Tensor::filled(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        assert!(layer_norm(&mut tape, x, gamma, beta).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[8], (0..8).map(|i| i as f64).collect());
        let y = dropout(&mut tape, x, 0.5, 7).unwrap();
        assert_eq!(x, y, "eval mode must pass the value through untouched");

        let run = |seed: u64| {
            let mut tape = Tape::train();
            let x = tape.leaf(Tensor::filled(&[64], 1.0));
            let y = dropout(&mut tape, x, 0.5, seed).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(7), run(7), "same seed must give the same mask");
        assert_ne!(run(7), run(8), "different seeds should differ");
        let kept: Vec<f64> = run(7).into_iter().filter(|v| *v != 0.0).collect();
        assert!(kept.iter().all(|v| (*v - 2.0).abs() < 1e-15));
        assert!(!kept.is_empty() && kept.len() < 64);
    }

    #[test]
    fn fc_matches_hand_computed_values_and_grads() {
        // x = [[1, 2]], w = [[1, 0, -1], [2, 1, 0]], b = [0.5, 0, 0]
        // y = [1*1+2*2, 1*0+2*1, -1] + b = [5.5, 2, -1]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut tape, &[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
        let b = leaf(&mut tape, &[3], vec![0.5, 0.0, 0.0]);
        let y = fc(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5, 2.0, -1.0]);
        let loss = sum_all(&mut tape, y).unwrap();
        tape.backward(loss).unwrap();
        // dy/dx = row sums of w; dy/dw = x outer ones; db = ones.
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_transpose_reshape_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose2d(&mut tape, a).unwrap();
        assert_eq!(tape.value(at).shape(), &[3, 2]);
        assert_eq!(tape.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = reshape(&mut tape, at, &[2, 3]).unwrap();
        let c = matmul(&mut tape, a, at).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        // [1 2 3; 4 5 6] * its transpose = [[14, 32], [32, 77]]
        assert_eq!(tape.value(c).data(), &[14.0, 32.0, 32.0, 77.0]);
        let loss = sum_all(&mut tape, c).unwrap();
        let loss2 = sum_all(&mut tape, b).unwrap();
        let total = add(&mut tape, loss, loss2).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(a).is_some());
    }

    #[test]
    fn concat_and_slice_route_gradients_to_sources() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2, 2, 2], (0..8).map(|i| i as f64).collect());
        let cat = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2, 2]);
        let sl = slice_channels(&mut tape, cat, 1, 3).unwrap();
        let loss = sum_all(&mut tape, sl).unwrap();
        tape.backward(loss).unwrap();
        // Slice drops channel 0 (= a), keeps b's both channels.
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn mean_leading_and_broadcast_mul() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
        let m = mean_leading(&mut tape, x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 4.0]);
        let gate = leaf(&mut tape, &[3], vec![1.0, 0.0, 2.0]);
        let y = broadcast_mul_last(&mut tape, x, gate).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 6.0, 3.0, 0.0, 10.0]);
        let loss = sum_all(&mut tape, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(gate).unwrap().data(), &[4.0, 6.0, 8.0]);
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[1.0, 0.0, 2.0, 1.0, 0.0, 2.0]
        );
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![0.0; 4]);
        let b = leaf(&mut tape, &[4], vec![0.0; 4]);
        let err = add(&mut tape, a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x2]") && msg.contains("[4]"), "{msg}");
    }
}
