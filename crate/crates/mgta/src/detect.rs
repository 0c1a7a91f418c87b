//! Center-based detection on the aggregated BEV map: a small convolutional
//! head, Gaussian-heatmap target rendering, the focal + masked-L1 training
//! loss, peak decoding back to boxes, and a center-distance AP metric.

use crate::error::{Error, Result};
use crate::points::{wrap_angle, GtBox};
use crate::tensor::blocks::{conv_layer, register_conv};
use crate::tensor::loss::{gaussian_focal_loss, masked_l1_loss};
use crate::tensor::ops::{add, relu, scale, sigmoid};
use crate::tensor::{ParamStore, Tape, Tensor, ValueId};
use crate::voxel::GridConfig;

/// One decoded box in keyframe sensor coordinates.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub class_id: usize,
    /// BEV center in meters.
    pub x: f64,
    pub y: f64,
    /// Vertical center in meters.
    pub z: f64,
    /// Sizes in meters; always positive (decoded through exp).
    pub l: f64,
    pub w: f64,
    pub h: f64,
    /// Heading in `[-pi, pi)`.
    pub yaw: f64,
    /// Sigmoid heatmap peak value.
    pub score: f64,
}

/// One detection tagged with its scene and frame, as serialized to the
/// JSON-lines detections file.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene: usize,
    pub frame: usize,
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(scene: usize, frame: usize, d: &Detection) -> DetectionRecord {
        DetectionRecord {
            scene,
            frame,
            class: d.class_id,
            x: d.x,
            y: d.y,
            z: d.z,
            l: d.l,
            w: d.w,
            h: d.h,
            yaw: d.yaw,
            score: d.score,
        }
    }
}

// ------------------------------------------------------------------- head

/// Predicted maps from the detection head. The heatmap is already sigmoid
/// probabilities; `heatmap_logits` is kept for diagnostics.
pub struct HeadOutput {
    pub heatmap_logits: ValueId,
    /// `[num_classes, H, W]` probabilities.
    pub heatmap: ValueId,
    /// `[2, H, W]` sub-cell center offsets in cell units.
    pub offset: ValueId,
    /// `[1, H, W]` vertical center in meters.
    pub z: ValueId,
    /// `[3, H, W]` log sizes.
    pub size: ValueId,
    /// `[2, H, W]` raw (sin, cos) heading.
    pub yaw: ValueId,
}

/// Shared 3x3 conv + ReLU followed by 1x1 branch convs per output map.
pub struct DetectHead {
    prefix: String,
    num_classes: usize,
}

/// Bias of the class-heatmap branch at init; sigmoid(-2.19) ~ 0.1 keeps the
/// focal loss from swamping the early gradient with easy negatives.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;

impl DetectHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Result<DetectHead> {
        if num_classes == 0 || hidden == 0 || c_in == 0 {
            return Err(Error::config("detection head widths must be positive"));
        }
        register_conv(store, &format!("{prefix}.shared"), hidden, c_in, 3)?;
        register_conv(store, &format!("{prefix}.hm"), num_classes, hidden, 1)?;
        store.set(
            &format!("{prefix}.hm.b"),
            Tensor::filled(&[num_classes], HEATMAP_BIAS_INIT),
        )?;
        register_conv(store, &format!("{prefix}.offset"), 2, hidden, 1)?;
        register_conv(store, &format!("{prefix}.z"), 1, hidden, 1)?;
        register_conv(store, &format!("{prefix}.size"), 3, hidden, 1)?;
        register_conv(store, &format!("{prefix}.yaw"), 2, hidden, 1)?;
        Ok(DetectHead {
            prefix: prefix.to_string(),
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: ValueId) -> Result<HeadOutput> {
        let shape = tape.value(f).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::config(format!(
                "detection head expects a [C, H, W] map, got {shape:?}"
            )));
        }
        let shared = conv_layer(tape, store, &format!("{}.shared", self.prefix), f, 1)?;
        let shared = relu(tape, shared)?;
        let branch = |tape: &mut Tape, name: &str| -> Result<ValueId> {
            conv_layer(tape, store, &format!("{}.{name}", self.prefix), shared, 1)
        };
        let heatmap_logits = branch(tape, "hm")?;
        let heatmap = sigmoid(tape, heatmap_logits)?;
        Ok(HeadOutput {
            heatmap_logits,
            heatmap,
            offset: branch(tape, "offset")?,
            z: branch(tape, "z")?,
            size: branch(tape, "size")?,
            yaw: branch(tape, "yaw")?,
        })
    }
}

// ---------------------------------------------------------------- targets

/// Training targets rendered from ground-truth boxes on the BEV grid.
pub struct TargetMaps {
    /// `[num_classes, H, W]` Gaussian heatmap, peak 1 per box.
    pub heatmap: Tensor,
    /// `[2, H, W]` sub-cell offsets, written at center cells.
    pub offset: Tensor,
    /// `[1, H, W]` vertical centers.
    pub z: Tensor,
    /// `[3, H, W]` log sizes.
    pub size: Tensor,
    /// `[2, H, W]` (sin, cos) heading.
    pub yaw: Tensor,
    /// `[1, H, W]` 1.0 at box center cells.
    pub mask: Tensor,
    /// Number of boxes rendered (center cells marked).
    pub num_pos: usize,
}

/// Renders per-class Gaussian heatmaps and center-cell regression targets.
///
/// Each box paints a Gaussian whose radius scales with its smaller BEV
/// extent (floored at 2 cells) into its class channel; overlapping Gaussians
/// are max-composited. Boxes whose center cell falls outside the grid are
/// skipped; the second return value counts them.
pub fn render_targets(
    gt: &[GtBox],
    grid: &GridConfig,
    num_classes: usize,
) -> Result<(TargetMaps, usize)> {
    grid.check()?;
    let (wv, hv, _) = grid.dims();
    let mut heatmap = Tensor::zeros(&[num_classes, hv, wv]);
    let mut offset = Tensor::zeros(&[2, hv, wv]);
    let mut zt = Tensor::zeros(&[1, hv, wv]);
    let mut size = Tensor::zeros(&[3, hv, wv]);
    let mut yaw = Tensor::zeros(&[2, hv, wv]);
    let mut mask = Tensor::zeros(&[1, hv, wv]);
    let mut num_pos = 0usize;
    let mut skipped = 0usize;
    for b in gt {
        if b.class_id >= num_classes {
            return Err(Error::data(format!(
                "ground-truth class {} exceeds head classes {num_classes}",
                b.class_id
            )));
        }
        if !(b.l > 0.0 && b.w > 0.0 && b.h > 0.0) {
            return Err(Error::data("ground-truth box sizes must be positive"));
        }
        // Continuous grid coordinates; the integer cell plus the fractional
        // remainder reconstructs the exact center at decode time.
        let gx = (b.x - grid.range_min[0]) / grid.voxel_size[0];
        let gy = (b.y - grid.range_min[1]) / grid.voxel_size[1];
        if gx < 0.0 || gy < 0.0 || gx >= wv as f64 || gy >= hv as f64 {
            skipped += 1;
            continue;
        }
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let lc = b.l / grid.voxel_size[0];
        let wc = b.w / grid.voxel_size[1];
        let radius = ((lc.min(wc) / 2.0).floor() as i64).max(2);
        let sigma = radius as f64 / 3.0;
        let hm = heatmap.data_mut();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (py, px) = (iy as i64 + dy, ix as i64 + dx);
                if py < 0 || px < 0 || py >= hv as i64 || px >= wv as i64 {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = (b.class_id * hv + py as usize) * wv + px as usize;
                if g > hm[cell] {
                    hm[cell] = g;
                }
            }
        }
        let at = iy * wv + ix;
        let plane = hv * wv;
        offset.data_mut()[at] = gy - iy as f64; // y offset in channel 0
        offset.data_mut()[plane + at] = gx - ix as f64; // x offset in channel 1
        zt.data_mut()[at] = b.z;
        size.data_mut()[at] = b.l.ln();
        size.data_mut()[plane + at] = b.w.ln();
        size.data_mut()[2 * plane + at] = b.h.ln();
        yaw.data_mut()[at] = b.yaw.sin();
        yaw.data_mut()[plane + at] = b.yaw.cos();
        if mask.data()[at] == 0.0 {
            num_pos += 1;
        }
        mask.data_mut()[at] = 1.0;
    }
    Ok((
        TargetMaps {
            heatmap,
            offset,
            z: zt,
            size,
            yaw,
            mask,
            num_pos,
        },
        skipped,
    ))
}

// ------------------------------------------------------------------- loss

/// Scalar copies of the loss terms for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub heatmap: f64,
    pub regression: f64,
}

/// Repeats the `[1, H, W]` foreground mask across `c` channels.
fn repeat_mask(mask: &Tensor, c: usize) -> Result<Tensor> {
    let s = mask.shape();
    let plane = s[1] * s[2];
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        out[ch * plane..(ch + 1) * plane].copy_from_slice(&mask.data()[..plane]);
    }
    Tensor::from_vec(&[c, s[1], s[2]], out)
}

/// Gaussian focal loss on the class heatmap plus masked L1 on the
/// regression maps at foreground cells, weighted 1.0 and 0.25. Both terms
/// normalize by the number of boxes.
pub fn detection_loss(
    tape: &mut Tape,
    pred: &HeadOutput,
    targets: &TargetMaps,
) -> Result<(ValueId, LossBreakdown)> {
    let focal = gaussian_focal_loss(tape, pred.heatmap, &targets.heatmap)?;
    let norm = targets.num_pos.max(1) as f64;
    let mut reg: Option<ValueId> = None;
    for (p, t, c) in [
        (pred.offset, &targets.offset, 2usize),
        (pred.z, &targets.z, 1),
        (pred.size, &targets.size, 3),
        (pred.yaw, &targets.yaw, 2),
    ] {
        let m = repeat_mask(&targets.mask, c)?;
        let term = masked_l1_loss(tape, p, t, &m, norm)?;
        reg = Some(match reg {
            None => term,
            Some(acc) => add(tape, acc, term)?,
        });
    }
    let reg = reg.expect("at least one regression branch");
    let reg_w = scale(tape, reg, 0.25)?;
    let total = add(tape, focal, reg_w)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item()?,
        heatmap: tape.value(focal).item()?,
        regression: tape.value(reg).item()?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::numeric(format!(
            "detection loss is not finite: {}",
            breakdown.total
        )));
    }
    Ok((total, breakdown))
}

// ----------------------------------------------------------------- decode

/// Peak-picking parameters for [`decode`].
#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub score_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig {
            top_k: 50,
            score_threshold: 0.1,
        }
    }
}

/// Plain-tensor predictions for decoding (no tape involvement).
pub struct PredMaps<'a> {
    /// `[num_classes, H, W]` sigmoid probabilities.
    pub heatmap: &'a Tensor,
    pub offset: &'a Tensor,
    pub z: &'a Tensor,
    pub size: &'a Tensor,
    pub yaw: &'a Tensor,
}

/// Decodes boxes from predicted maps: a cell is a peak when no 3x3 neighbor
/// beats it (ties broken toward the lowest raster index), peaks below the
/// score threshold are dropped, and the best `top_k` across classes survive.
pub fn decode(pred: &PredMaps, grid: &GridConfig, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let s = pred.heatmap.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("heatmap must be [C, H, W], got {s:?}")));
    }
    let (ncls, hv, wv) = (s[0], s[1], s[2]);
    let plane = hv * wv;
    for (t, c, what) in [
        (pred.offset, 2usize, "offset"),
        (pred.z, 1, "z"),
        (pred.size, 3, "size"),
        (pred.yaw, 2, "yaw"),
    ] {
        if t.shape() != [c, hv, wv] {
            return Err(Error::config(format!(
                "{what} map must be [{c}, {hv}, {wv}], got {:?}",
                t.shape()
            )));
        }
    }
    let hm = pred.heatmap.data();
    let mut picks: Vec<(f64, usize, usize)> = Vec::new(); // (score, class, cell)
    for c in 0..ncls {
        for iy in 0..hv {
            for ix in 0..wv {
                let at = iy * wv + ix;
                let v = hm[c * plane + at];
                if v < cfg.score_threshold {
                    continue;
                }
                let mut peak = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (iy as i64 + dy, ix as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= hv as i64 || nx >= wv as i64 {
                            continue;
                        }
                        let nat = ny as usize * wv + nx as usize;
                        let nv = hm[c * plane + nat];
                        if nv > v || (nv == v && nat < at) {
                            peak = false;
                            break 'scan;
                        }
                    }
                }
                if peak {
                    picks.push((v, c, at));
                }
            }
        }
    }
    // Descending score; ties resolved by class then raster index so the
    // output order is deterministic.
    picks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    picks.truncate(cfg.top_k);
    let mut out = Vec::with_capacity(picks.len());
    for (score, c, at) in picks {
        let (iy, ix) = (at / wv, at % wv);
        let off_y = pred.offset.data()[at];
        let off_x = pred.offset.data()[plane + at];
        let x = grid.range_min[0] + (ix as f64 + off_x) * grid.voxel_size[0];
        let y = grid.range_min[1] + (iy as f64 + off_y) * grid.voxel_size[1];
        let sin = pred.yaw.data()[at];
        let cos = pred.yaw.data()[plane + at];
        out.push(Detection {
            class_id: c,
            x,
            y,
            z: pred.z.data()[at],
            l: pred.size.data()[at].exp(),
            w: pred.size.data()[plane + at].exp(),
            h: pred.size.data()[2 * plane + at].exp(),
            yaw: wrap_angle(sin.atan2(cos)),
            score,
        });
    }
    Ok(out)
}

// --------------------------------------------------------------------- AP

/// Detections and ground truth for one evaluated keyframe.
pub struct EvalSample {
    pub dets: Vec<Detection>,
    pub gt: Vec<GtBox>,
}

/// Per-class, per-threshold average precision.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ApReport {
    /// `per_class[threshold_index][class]`; `None` when the class has no
    /// ground truth anywhere.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub thresholds: Vec<f64>,
    /// Mean over all defined (threshold, class) cells.
    pub map: Option<f64>,
}

/// 101-point interpolated area under the precision/recall points.
fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    // points: (precision, recall) after each detection, in score order.
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        ap += best;
    }
    ap / 101.0
}

/// AP for one class at one distance threshold, with ignore support: a
/// detection whose nearest unmatched box within the threshold is an ignored
/// one is dropped from the curve (neither hit nor false positive).
fn class_ap(
    samples: &[EvalSample],
    class_id: usize,
    threshold: f64,
    counted: &dyn Fn(&GtBox) -> bool,
) -> Option<f64> {
    let mut npos = 0usize;
    for s in samples {
        npos += s
            .gt
            .iter()
            .filter(|b| b.class_id == class_id && counted(b))
            .count();
    }
    if npos == 0 {
        return None;
    }
    // (score, sample, det index) in descending score; ties broken by sample
    // and insertion order for determinism.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (di, d) in s.dets.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, si, di));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut matched: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gt.len()]).collect();
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, si, di) in dets {
        let d = &samples[si].dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in samples[si].gt.iter().enumerate() {
            if g.class_id != class_id || matched[si][gi] {
                continue;
            }
            let dist = ((d.x - g.x).powi(2) + (d.y - g.y).powi(2)).sqrt();
            if dist <= threshold && best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) if counted(&samples[si].gt[gi]) => {
                matched[si][gi] = true;
                tp += 1;
            }
            Some((_, gi)) => {
                // Nearest candidate is outside the evaluated subset: the
                // detection is explained by an ignored box and dropped.
                matched[si][gi] = true;
                continue;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / (tp + fp) as f64, tp as f64 / npos as f64));
    }
    Some(interpolated_ap(&points))
}

/// AP over all classes and thresholds, counting every ground-truth box.
pub fn evaluate_ap(
    samples: &[EvalSample],
    num_classes: usize,
    thresholds: &[f64],
) -> ApReport {
    evaluate_ap_subset(samples, num_classes, thresholds, &|_| true)
}

/// AP restricted to boxes selected by `counted`; detections matching
/// non-counted boxes are ignored rather than penalized.
pub fn evaluate_ap_subset(
    samples: &[EvalSample],
    num_classes: usize,
    thresholds: &[f64],
    counted: &dyn Fn(&GtBox) -> bool,
) -> ApReport {
    let mut per_class = Vec::with_capacity(thresholds.len());
    let mut sum = 0.0;
    let mut cells = 0usize;
    for &thr in thresholds {
        let mut row = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let ap = class_ap(samples, c, thr, counted);
            if let Some(v) = ap {
                sum += v;
                cells += 1;
            }
            row.push(ap);
        }
        per_class.push(row);
    }
    ApReport {
        per_class,
        thresholds: thresholds.to_vec(),
        map: if cells == 0 { None } else { Some(sum / cells as f64) },
    }
}

/// The metric's distance thresholds in meters.
pub const AP_THRESHOLDS: [f64; 2] = [0.5, 1.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_store_gradients, FdOptions};
    use crate::tensor::ops::{mul, sum_all};
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn gt(class_id: usize, x: f64, y: f64) -> GtBox {
        GtBox {
            class_id,
            x,
            y,
            z: 0.7,
            l: 4.0,
            w: 1.8,
            h: 1.5,
            yaw: 0.3,
            vx: 0.0,
            vy: 0.0,
            occluded: false,
            n_points: 10,
        }
    }

    fn det(class_id: usize, x: f64, y: f64, score: f64) -> Detection {
        Detection {
            class_id,
            x,
            y,
            z: 0.7,
            l: 4.0,
            w: 1.8,
            h: 1.5,
            yaw: 0.3,
            score,
        }
    }

    fn small_grid() -> GridConfig {
        GridConfig {
            range_min: [-8.0, -8.0, -3.0],
            range_max: [8.0, 8.0, 1.0],
            voxel_size: [1.0, 1.0, 4.0],
            ..GridConfig::default()
        }
    }

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn zero_input_with_zeroed_branch_weights_scores_a_tenth_everywhere() {
        let mut store = ParamStore::new(1);
        let head = DetectHead::register(&mut store, "head", 4, 8, 2).unwrap();
        let zero_w = Tensor::zeros(store.get("head.hm.w").unwrap().shape());
        store.set("head.hm.w", zero_w).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[4, 6, 6]));
        let out = head.forward(&mut tape, &store, f).unwrap();
        let expect = 1.0 / (1.0 + (2.19f64).exp());
        for &p in tape.value(out.heatmap).data() {
            assert!((p - expect).abs() < 1e-12);
            assert!((p - 0.1).abs() < 1e-3, "init probability {p} strays from 0.1");
        }
    }

    #[test]
    fn head_branches_keep_the_spatial_dims() {
        let mut store = ParamStore::new(2);
        let head = DetectHead::register(&mut store, "head", 6, 8, 3).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(rand_map(6, 5, 7, 3));
        let out = head.forward(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(out.heatmap).shape(), &[3, 5, 7]);
        assert_eq!(tape.value(out.offset).shape(), &[2, 5, 7]);
        assert_eq!(tape.value(out.z).shape(), &[1, 5, 7]);
        assert_eq!(tape.value(out.size).shape(), &[3, 5, 7]);
        assert_eq!(tape.value(out.yaw).shape(), &[2, 5, 7]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut store = ParamStore::new(4);
        let head = DetectHead::register(&mut store, "head", 3, 4, 2).unwrap();
        let f = rand_map(3, 4, 4, 5);
        let mut rng = rng_from_seed(6);
        let mut wsums: Vec<Vec<f64>> = Vec::new();
        for c in [2usize, 2, 1, 3, 2] {
            wsums.push((0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let weighted = |tape: &mut Tape,
                        store: &ParamStore|
         -> Result<ValueId> {
            let fi = tape.leaf(f.clone());
            let out = head.forward(tape, store, fi)?;
            let mut total: Option<ValueId> = None;
            for (i, (id, c)) in [
                (out.heatmap, 2usize),
                (out.offset, 2),
                (out.z, 1),
                (out.size, 3),
                (out.yaw, 2),
            ]
            .into_iter()
            .enumerate()
            {
                let wv = tape.leaf(Tensor::from_vec(&[c, 4, 4], wsums[i].clone())?);
                let p = mul(tape, id, wv)?;
                let s = sum_all(tape, p)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => add(tape, acc, s)?,
                });
            }
            Ok(total.unwrap())
        };
        let loss = |st: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let s = weighted(&mut tape, st)?;
            tape.value(s).item()
        };
        let mut tape = Tape::train();
        let s = weighted(&mut tape, &store).unwrap();
        tape.backward(s).unwrap();
        let grads = tape.param_grads();
        let names = store.names();
        let report = check_store_gradients(
            &mut store,
            &names,
            loss,
            &grads,
            &FdOptions { max_components_per_param: 4, seed: 7, ..FdOptions::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "worst {:?}", report.worst());
    }

    #[test]
    fn empty_ground_truth_renders_blank_targets() {
        let (t, skipped) = render_targets(&[], &small_grid(), 2).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(t.num_pos, 0);
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert!(t.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_box_renders_a_unit_peak_at_the_center_cell() {
        let grid = small_grid();
        let (wv, hv, _) = grid.dims();
        let (t, _) = render_targets(&[gt(0, 0.5, 0.5)], &grid, 2).unwrap();
        // x = 0.5 m -> gx = 8.5 -> cell 8; same for y.
        let peak = (0 * hv + 8) * wv + 8;
        assert_eq!(t.heatmap.data()[peak], 1.0);
        let (mut best, mut best_at) = (f64::MIN, 0);
        for (i, &v) in t.heatmap.data().iter().enumerate() {
            if v > best {
                best = v;
                best_at = i;
            }
        }
        assert_eq!(best_at, peak);
        assert_eq!(t.num_pos, 1);
        assert_eq!(t.offset.data()[8 * wv + 8], 0.5);
        assert_eq!(t.offset.data()[hv * wv + 8 * wv + 8], 0.5);
        assert_eq!(t.size.data()[8 * wv + 8], 4.0f64.ln());
        assert_eq!(t.yaw.data()[8 * wv + 8], 0.3f64.sin());
    }

    #[test]
    fn overlapping_gaussians_take_the_maximum_not_the_sum() {
        let grid = small_grid();
        let (wv, hv, _) = grid.dims();
        let boxes = vec![gt(0, 0.5, 0.5), gt(0, 2.5, 0.5)]; // cells x=8 and x=10
        let (t, _) = render_targets(&boxes, &grid, 1).unwrap();
        // Cell x=9 between the peaks: one cell from each center. With the
        // same radius both Gaussians contribute exp(-1/(2 sigma^2)); a sum
        // would double it.
        let lc: f64 = 4.0;
        let wc: f64 = 1.8;
        let radius = (lc.min(wc) / 2.0).floor().max(2.0);
        let sigma = radius / 3.0;
        let expect = (-1.0 / (2.0 * sigma * sigma)).exp();
        let between = (8 * wv + 9) as usize;
        assert!((t.heatmap.data()[between] - expect).abs() < 1e-12);
        assert!(t.heatmap.data().iter().all(|&v| v <= 1.0));
        assert_eq!(t.num_pos, 2);
        let _ = hv;
    }

    #[test]
    fn out_of_grid_boxes_are_skipped_and_counted() {
        let grid = small_grid();
        let (t, skipped) = render_targets(&[gt(0, 100.0, 0.0), gt(1, 0.0, 0.0)], &grid, 2).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(t.num_pos, 1);
    }

    #[test]
    fn perfect_predictions_reach_exactly_zero_loss() {
        let grid = small_grid();
        let (t, _) = render_targets(&[gt(0, 0.5, 0.5), gt(1, -3.0, 2.0)], &grid, 2).unwrap();
        // Binarized heatmap (1 at peaks, 0 elsewhere) plus exact regressions
        // is the loss's global optimum.
        let mut hm = t.heatmap.clone();
        for v in hm.data_mut() {
            *v = if *v == 1.0 { 1.0 } else { 0.0 };
        }
        let mut tape = Tape::new();
        let pred = HeadOutput {
            heatmap_logits: tape.leaf(Tensor::zeros(hm.shape())),
            heatmap: tape.leaf(hm),
            offset: tape.leaf(t.offset.clone()),
            z: tape.leaf(t.z.clone()),
            size: tape.leaf(t.size.clone()),
            yaw: tape.leaf(t.yaw.clone()),
        };
        let (_, breakdown) = detection_loss(&mut tape, &pred, &t).unwrap();
        assert_eq!(breakdown.total, 0.0);
        assert_eq!(breakdown.heatmap, 0.0);
        assert_eq!(breakdown.regression, 0.0);
    }

    #[test]
    fn loss_is_nonnegative_for_random_predictions() {
        let grid = small_grid();
        let (wv, hv, _) = grid.dims();
        let (t, _) = render_targets(&[gt(0, 1.0, -2.0)], &grid, 2).unwrap();
        let mut rng = rng_from_seed(8);
        let mut tape = Tape::new();
        let logits = rand_map(2, hv, wv, 9);
        let li = tape.leaf(logits);
        let probs = sigmoid(&mut tape, li).unwrap();
        let pred = HeadOutput {
            heatmap_logits: li,
            heatmap: probs,
            offset: tape.leaf(rand_map(2, hv, wv, 10)),
            z: tape.leaf(rand_map(1, hv, wv, 11)),
            size: tape.leaf(rand_map(3, hv, wv, 12)),
            yaw: tape.leaf(rand_map(2, hv, wv, 13)),
        };
        let (_, breakdown) = detection_loss(&mut tape, &pred, &t).unwrap();
        assert!(breakdown.total > 0.0);
        assert!(breakdown.heatmap >= 0.0);
        assert!(breakdown.regression >= 0.0);
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn loss_gradients_match_finite_differences_through_the_head() {
        let grid = GridConfig {
            range_min: [-3.0, -3.0, -3.0],
            range_max: [3.0, 3.0, 1.0],
            voxel_size: [1.0, 1.0, 4.0],
            ..GridConfig::default()
        };
        let (t, _) = render_targets(&[gt(0, 0.3, -0.4), gt(1, -1.2, 1.7)], &grid, 2).unwrap();
        let mut store = ParamStore::new(14);
        let head = DetectHead::register(&mut store, "head", 3, 4, 2).unwrap();
        let f = rand_map(3, 6, 6, 15);
        let loss = |st: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let fi = tape.leaf(f.clone());
            let out = head.forward(&mut tape, st, fi)?;
            let (_, b) = detection_loss(&mut tape, &out, &t)?;
            Ok(b.total)
        };
        let mut tape = Tape::train();
        let fi = tape.leaf(f.clone());
        let out = head.forward(&mut tape, &store, fi).unwrap();
        let (total, _) = detection_loss(&mut tape, &out, &t).unwrap();
        tape.backward(total).unwrap();
        let grads = tape.param_grads();
        let names = store.names();
        let report = check_store_gradients(
            &mut store,
            &names,
            loss,
            &grads,
            &FdOptions { max_components_per_param: 4, seed: 16, ..FdOptions::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "worst {:?}", report.worst());
    }

    #[test]
    fn uniform_heatmap_keeps_only_the_first_cell_per_class() {
        let grid = small_grid();
        let (wv, hv, _) = grid.dims();
        let maps = (
            Tensor::filled(&[2, hv, wv], 0.5),
            Tensor::zeros(&[2, hv, wv]),
            Tensor::zeros(&[1, hv, wv]),
            Tensor::zeros(&[3, hv, wv]),
            Tensor::filled(&[2, hv, wv], 0.5),
        );
        let pred = PredMaps {
            heatmap: &maps.0,
            offset: &maps.1,
            z: &maps.2,
            size: &maps.3,
            yaw: &maps.4,
        };
        // Above the plateau score: exactly one surviving peak per class, at
        // the lowest raster index.
        let dets = decode(&pred, &grid, &DecodeConfig { top_k: 50, score_threshold: 0.4 }).unwrap();
        assert_eq!(dets.len(), 2);
        for d in &dets {
            assert_eq!(d.x, grid.range_min[0]);
            assert_eq!(d.y, grid.range_min[1]);
        }
        // Threshold above the plateau: nothing survives.
        let none = decode(&pred, &grid, &DecodeConfig { top_k: 50, score_threshold: 0.6 }).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn rendered_targets_decode_back_to_the_boxes() {
        let grid = small_grid();
        let boxes = vec![gt(0, 1.3, -2.6), gt(1, -4.2, 3.9)];
        let (t, _) = render_targets(&boxes, &grid, 2).unwrap();
        let pred = PredMaps {
            heatmap: &t.heatmap,
            offset: &t.offset,
            z: &t.z,
            size: &t.size,
            yaw: &t.yaw,
        };
        let dets = decode(&pred, &grid, &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        for b in &boxes {
            let d = dets
                .iter()
                .find(|d| d.class_id == b.class_id)
                .expect("class decoded");
            let half_cell = 0.5 * grid.voxel_size[0];
            assert!((d.x - b.x).abs() < half_cell, "x {} vs {}", d.x, b.x);
            assert!((d.y - b.y).abs() < half_cell, "y {} vs {}", d.y, b.y);
            assert!((d.yaw - b.yaw).abs() < 1e-6);
            assert!((d.z - b.z).abs() < 1e-9);
            assert!((d.l - b.l).abs() < 1e-9);
            assert_eq!(d.score, 1.0);
        }
    }

    #[test]
    fn decoded_yaw_stays_in_the_half_open_interval() {
        let grid = small_grid();
        let (wv, hv, _) = grid.dims();
        let mut rng = rng_from_seed(17);
        let mut heatmap = Tensor::zeros(&[1, hv, wv]);
        heatmap.data_mut()[5 * wv + 5] = 0.9;
        let mut yaw = Tensor::zeros(&[2, hv, wv]);
        for v in yaw.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        // Force the atan2(0, -1) = pi corner onto the peak cell.
        yaw.data_mut()[5 * wv + 5] = 0.0;
        yaw.data_mut()[hv * wv + 5 * wv + 5] = -1.0;
        let (offset, z, size) = (
            Tensor::zeros(&[2, hv, wv]),
            Tensor::zeros(&[1, hv, wv]),
            Tensor::zeros(&[3, hv, wv]),
        );
        let pred = PredMaps { heatmap: &heatmap, offset: &offset, z: &z, size: &size, yaw: &yaw };
        let dets = decode(&pred, &grid, &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(dets[0].yaw >= -std::f64::consts::PI && dets[0].yaw < std::f64::consts::PI);
    }

    #[test]
    fn exact_detections_score_perfect_ap() {
        let samples = vec![EvalSample {
            dets: vec![det(0, 1.0, 2.0, 0.9), det(0, -3.0, 4.0, 0.8)],
            gt: vec![gt(0, 1.0, 2.0), gt(0, -3.0, 4.0)],
        }];
        let report = evaluate_ap(&samples, 1, &AP_THRESHOLDS);
        assert_eq!(report.map, Some(1.0));
    }

    #[test]
    fn no_detections_score_zero_ap() {
        let samples = vec![EvalSample { dets: vec![], gt: vec![gt(0, 1.0, 2.0)] }];
        let report = evaluate_ap(&samples, 1, &AP_THRESHOLDS);
        assert_eq!(report.map, Some(0.0));
    }

    #[test]
    fn classes_without_ground_truth_stay_out_of_the_mean() {
        let samples = vec![EvalSample {
            dets: vec![det(0, 1.0, 2.0, 0.9), det(1, 0.0, 0.0, 0.8)],
            gt: vec![gt(0, 1.0, 2.0)],
        }];
        let report = evaluate_ap(&samples, 2, &[1.0]);
        assert_eq!(report.per_class[0][0], Some(1.0));
        assert_eq!(report.per_class[0][1], None);
        assert_eq!(report.map, Some(1.0));
    }

    #[test]
    fn hit_miss_hit_matches_the_hand_enumerated_area() {
        // Two boxes; three detections: 0.9 on target, 0.8 in open space,
        // 0.7 on the second target. Precision/recall after each detection:
        // (1.0, 0.5), (0.5, 0.5), (2/3, 1.0). The 101-point rule averages
        // 51 recall stops at precision 1 and 50 at 2/3.
        let samples = vec![EvalSample {
            dets: vec![
                det(0, 0.0, 0.0, 0.9),
                det(0, 5.0, 5.0, 0.8),
                det(0, -4.0, 2.0, 0.7),
            ],
            gt: vec![gt(0, 0.1, 0.0), gt(0, -4.0, 2.1)],
        }];
        let report = evaluate_ap(&samples, 1, &[1.0]);
        let expect = 253.0 / 303.0;
        let ap = report.per_class[0][0].unwrap();
        assert!((ap - expect).abs() < 1e-12, "{ap} vs {expect}");
    }

    #[test]
    fn ap_ignores_monotone_score_transforms() {
        let samples = |f: &dyn Fn(f64) -> f64| -> Vec<EvalSample> {
            vec![EvalSample {
                dets: vec![
                    det(0, 0.0, 0.0, f(0.9)),
                    det(0, 5.0, 5.0, f(0.6)),
                    det(0, -4.0, 2.0, f(0.3)),
                    det(1, 2.0, 2.0, f(0.5)),
                ],
                gt: vec![gt(0, 0.1, 0.0), gt(0, -4.0, 2.1), gt(1, 2.0, 2.2)],
            }]
        };
        let base = evaluate_ap(&samples(&|s| s), 2, &AP_THRESHOLDS);
        let cubed = evaluate_ap(&samples(&|s| s * s * s), 2, &AP_THRESHOLDS);
        assert_eq!(base.map, cubed.map);
        assert_eq!(base.per_class[0], cubed.per_class[0]);
    }

    #[test]
    fn duplicating_detections_never_raises_ap() {
        let dets = vec![
            det(0, 0.0, 0.0, 0.9),
            det(0, 5.0, 5.0, 0.6),
            det(0, -4.0, 2.0, 0.3),
        ];
        let gts = vec![gt(0, 0.1, 0.0), gt(0, -4.0, 2.1)];
        let single = vec![EvalSample { dets: dets.clone(), gt: gts.clone() }];
        let mut doubled_dets = dets.clone();
        doubled_dets.extend(dets.iter().cloned());
        let doubled = vec![EvalSample { dets: doubled_dets, gt: gts }];
        let a = evaluate_ap(&single, 1, &AP_THRESHOLDS).map.unwrap();
        let b = evaluate_ap(&doubled, 1, &AP_THRESHOLDS).map.unwrap();
        assert!(b <= a + 1e-12, "duplication raised AP: {a} -> {b}");
    }

    #[test]
    fn subset_evaluation_ignores_detections_on_excluded_boxes() {
        let mut hidden = gt(0, 6.0, 6.0);
        hidden.occluded = true;
        let samples = vec![EvalSample {
            dets: vec![
                det(0, 6.0, 6.0, 0.95), // explains the non-subset box
                det(0, 0.0, 0.0, 0.9),  // hits the subset box
            ],
            gt: vec![hidden, gt(0, 0.0, 0.1)],
        }];
        // Occluded-only subset: the non-occluded box is out; the detection
        // explaining it must not count as a false positive.
        let report = evaluate_ap_subset(&samples, 1, &[1.0], &|b| b.occluded);
        assert_eq!(report.per_class[0][0], Some(1.0));
        // Flipping the subset: the high-score detection is the only hit.
        let flipped = evaluate_ap_subset(&samples, 1, &[1.0], &|b| !b.occluded);
        assert_eq!(flipped.per_class[0][0], Some(1.0));
    }

    #[test]
    fn detection_records_round_trip_as_json_lines() {
        let d = det(1, 1.25, -3.5, 0.625);
        let rec = DetectionRecord::new(7, 2, &d);
        let line = serde_json::to_string(&rec).unwrap();
        let back: DetectionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert!(line.contains("\"scene\":7"));
    }
}
