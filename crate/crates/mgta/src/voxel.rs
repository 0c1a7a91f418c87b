//! Scan-order-preserving voxelization and motion-aware pillar encoding.
//!
//! Points of a compensated frame are binned into pillars while keeping one
//! bucket per scan. Each populated pillar yields a base feature (shared FC
//! over per-point descriptors, max-pooled) and a motion embedding built from
//! the per-scan centroid deltas relative to the latest scan, which is
//! concatenated and scattered onto a dense BEV canvas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{Frame, Point};
use crate::tensor::blocks::{fc_layer, register_fc, ChannelGate};
use crate::tensor::conv::{scatter_chw, segment_max};
use crate::tensor::ops::{concat_cols, relu};
use crate::tensor::{ParamStore, Tape, Tensor, ValueId};
use crate::util::{derive_seed, rng_from_seed};

/// Metric extent and resolution of the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel_scan: usize,
    pub max_voxels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            range_min: [-25.6, -25.6, -3.0],
            range_max: [25.6, 25.6, 1.0],
            voxel_size: [0.8, 0.8, 4.0],
            max_points_per_voxel_scan: 16,
            max_voxels: 1 << 16,
        }
    }
}

impl GridConfig {
    /// Grid dimensions `(wv, hv, dv)` along x, y, z.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = |axis: usize| -> usize {
            ((self.range_max[axis] - self.range_min[axis]) / self.voxel_size[axis]).ceil() as usize
        };
        (d(0), d(1), d(2))
    }

    pub fn check(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.voxel_size[axis] > 0.0) {
                return Err(Error::config(format!(
                    "voxel size along axis {axis} must be positive"
                )));
            }
            if !(self.range_max[axis] > self.range_min[axis]) {
                return Err(Error::config(format!(
                    "grid range along axis {axis} is empty"
                )));
            }
        }
        let (wv, hv, dv) = self.dims();
        if wv == 0 || hv == 0 || dv == 0 {
            return Err(Error::config("grid has zero cells along some axis"));
        }
        if self.max_points_per_voxel_scan == 0 || self.max_voxels == 0 {
            return Err(Error::config("voxel capacities must be positive"));
        }
        Ok(())
    }

    /// Cell index for a point, or `None` when out of range
    /// (inclusive-min / exclusive-max on every axis).
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let p = [x, y, z];
        let (wv, hv, dv) = self.dims();
        let dims = [wv, hv, dv];
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            if !(p[axis] >= self.range_min[axis] && p[axis] < self.range_max[axis]) {
                return None;
            }
            let i = ((p[axis] - self.range_min[axis]) / self.voxel_size[axis]).floor() as usize;
            idx[axis] = i.min(dims[axis] - 1);
        }
        Some((idx[0], idx[1], idx[2]))
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> (f64, f64, f64) {
        (
            self.range_min[0] + (ix as f64 + 0.5) * self.voxel_size[0],
            self.range_min[1] + (iy as f64 + 0.5) * self.voxel_size[1],
            self.range_min[2] + (iz as f64 + 0.5) * self.voxel_size[2],
        )
    }
}

/// One populated cell: `(ix, iy, iz)` plus one point bucket per scan, in
/// scan order. Buckets are kept sorted by point value so the result does not
/// depend on input point order.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalVoxel {
    pub coord: (usize, usize, usize),
    pub buckets: Vec<Vec<Point>>,
}

impl TemporalVoxel {
    pub fn total_points(&self) -> usize {
        self.buckets.iter().map(|b| b.len()).sum()
    }
}

fn point_key(p: &Point) -> [f64; 5] {
    [p.x, p.y, p.z, p.r, p.dt]
}

fn cmp_points(a: &Point, b: &Point) -> std::cmp::Ordering {
    point_key(a)
        .iter()
        .zip(point_key(b).iter())
        .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
        .find(|o| *o != std::cmp::Ordering::Equal)
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Bins an ego-compensated frame into temporal voxels. Every scan keeps its
/// own bucket; buckets over capacity are subsampled with a per-cell seeded
/// draw after sorting candidates by value, so the outcome is invariant to
/// input point order. Out-of-range points are dropped; a frame with no
/// in-range points yields an empty list.
pub fn voxelize(frame: &Frame, cfg: &GridConfig, seed: u64) -> Result<Vec<TemporalVoxel>> {
    cfg.check()?;
    if frame.scans.is_empty() {
        return Err(Error::data("voxelize: frame has no scans"));
    }
    // Compensated frames share one pose across scans.
    let key = frame.scans[frame.scans.len() - 1].ego_pose;
    if frame.scans.iter().any(|s| s.ego_pose != key) {
        return Err(Error::data(
            "voxelize: scans have differing poses; compensate the frame first",
        ));
    }
    let n = frame.scans.len();
    let mut cells: BTreeMap<(usize, usize, usize), Vec<Vec<Point>>> = BTreeMap::new();
    for (si, scan) in frame.scans.iter().enumerate() {
        for p in &scan.points {
            if !p.is_finite() {
                return Err(Error::data("voxelize: non-finite point"));
            }
            if let Some((ix, iy, iz)) = cfg.cell_of(p.x, p.y, p.z) {
                cells
                    .entry((iz, iy, ix))
                    .or_insert_with(|| vec![Vec::new(); n])
                    .get_mut(si)
                    .expect("bucket count matches scan count")
                    .push(*p);
            }
        }
    }
    let cap = cfg.max_points_per_voxel_scan;
    let mut out = Vec::with_capacity(cells.len().min(cfg.max_voxels));
    for ((iz, iy, ix), mut buckets) in cells {
        if out.len() == cfg.max_voxels {
            break;
        }
        for (si, bucket) in buckets.iter_mut().enumerate() {
            bucket.sort_by(cmp_points);
            if bucket.len() > cap {
                let mut rng = rng_from_seed(derive_seed(
                    seed,
                    &[ix as u64, iy as u64, iz as u64, si as u64],
                ));
                let mut picks: Vec<usize> =
                    rand::seq::index::sample(&mut rng, bucket.len(), cap).into_vec();
                picks.sort_unstable();
                *bucket = picks.iter().map(|&i| bucket[i]).collect();
            }
        }
        out.push(TemporalVoxel { coord: (ix, iy, iz), buckets });
    }
    Ok(out)
}

/// Per-scan centroids of a voxel: the mean `(x, y, z, r, dt)` over each
/// bucket, with empty buckets mapped to the zero vector.
pub fn scan_centroids(v: &TemporalVoxel) -> Vec<[f64; 5]> {
    v.buckets
        .iter()
        .map(|bucket| {
            let mut c = [0.0; 5];
            if bucket.is_empty() {
                return c;
            }
            for p in bucket {
                let k = point_key(p);
                for (acc, val) in c.iter_mut().zip(k.iter()) {
                    *acc += val;
                }
            }
            for acc in &mut c {
                *acc /= bucket.len() as f64;
            }
            c
        })
        .collect()
}

/// Widths of the voxel feature pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelWidths {
    /// Encoded width of each per-scan delta.
    pub c_q: usize,
    /// Motion embedding width.
    pub c_m: usize,
    /// Base pillar feature width.
    pub c_b: usize,
}

impl Default for VoxelWidths {
    fn default() -> Self {
        VoxelWidths { c_q: 16, c_m: 32, c_b: 32 }
    }
}

/// Encodes per-scan centroid deltas into one motion vector per voxel:
/// each delta `(latest centroid - scan centroid)` passes a shared FC and
/// ReLU, is gated channel-wise, and the concatenation of all encoded deltas
/// passes a final FC.
pub struct MotionEncoder {
    prefix: String,
    gate: ChannelGate,
    n_scans: usize,
    c_q: usize,
    c_m: usize,
}

impl MotionEncoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_scans: usize,
        c_q: usize,
        c_m: usize,
    ) -> Result<MotionEncoder> {
        if n_scans < 2 {
            return Err(Error::config(
                "motion encoding needs at least two scans per frame",
            ));
        }
        if c_q == 0 || c_m == 0 {
            return Err(Error::config("motion widths must be positive"));
        }
        register_fc(store, &format!("{prefix}.delta_fc"), 5, c_q)?;
        let gate = ChannelGate::register(store, &format!("{prefix}.gate"), c_q)?;
        register_fc(store, &format!("{prefix}.out_fc"), (n_scans - 1) * c_q, c_m)?;
        Ok(MotionEncoder { prefix: prefix.to_string(), gate, n_scans, c_q, c_m })
    }

    pub fn c_m(&self) -> usize {
        self.c_m
    }

    /// Encodes all voxels at once; `centroids[v]` holds the N per-scan
    /// centroids of voxel `v`. Returns `[V, c_m]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        centroids: &[Vec<[f64; 5]>],
    ) -> Result<ValueId> {
        let v = centroids.len();
        if v == 0 {
            return Err(Error::shape("motion encoding of zero voxels"));
        }
        if centroids.iter().any(|c| c.len() != self.n_scans) {
            return Err(Error::shape(format!(
                "every voxel must provide {} centroids",
                self.n_scans
            )));
        }
        let n = self.n_scans;
        let mut concat: Option<ValueId> = None;
        for slot in 0..n - 1 {
            let mut rows = Vec::with_capacity(v * 5);
            for c in centroids {
                let last = &c[n - 1];
                let cur = &c[slot];
                rows.extend((0..5).map(|i| last[i] - cur[i]));
            }
            let delta = tape.leaf(Tensor::from_vec(&[v, 5], rows)?);
            let enc = fc_layer(tape, store, &format!("{}.delta_fc", self.prefix), delta)?;
            let enc = relu(tape, enc)?;
            let enc = self.gate.forward_rowwise(tape, store, enc)?;
            concat = Some(match concat {
                None => enc,
                Some(prev) => concat_cols(tape, prev, enc)?,
            });
        }
        let stacked = concat.expect("n_scans >= 2 guarantees one slot");
        let got = tape.value(stacked).shape()[1];
        if got != (n - 1) * self.c_q {
            return Err(Error::shape(format!(
                "stacked delta width {got}, want {}",
                (n - 1) * self.c_q
            )));
        }
        fc_layer(tape, store, &format!("{}.out_fc", self.prefix), stacked)
    }
}

/// Base + motion voxel encoder producing the dense BEV canvas.
pub struct VoxelEncoder {
    prefix: String,
    motion: Option<MotionEncoder>,
    widths: VoxelWidths,
    /// Append one occupancy indicator channel per scan bucket.
    pub occupancy_channels: bool,
    n_scans: usize,
}

/// Encoded frame: populated cell coordinates plus their feature rows.
pub struct EncodedFrame {
    pub coords: Vec<(usize, usize)>,
    /// `[V, C_v]` feature rows, one per coordinate.
    pub features: ValueId,
}

impl VoxelEncoder {
    /// Registers encoder parameters. With `use_motion` off the canvas only
    /// carries the base features (plus optional occupancy channels).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_scans: usize,
        widths: VoxelWidths,
        use_motion: bool,
        occupancy_channels: bool,
    ) -> Result<VoxelEncoder> {
        if widths.c_b == 0 {
            return Err(Error::config("base feature width must be positive"));
        }
        register_fc(store, &format!("{prefix}.point_fc"), 10, widths.c_b)?;
        let motion = if use_motion {
            Some(MotionEncoder::register(
                store,
                &format!("{prefix}.motion"),
                n_scans,
                widths.c_q,
                widths.c_m,
            )?)
        } else {
            None
        };
        Ok(VoxelEncoder {
            prefix: prefix.to_string(),
            motion,
            widths,
            occupancy_channels,
            n_scans,
        })
    }

    /// Channels of the scattered canvas.
    pub fn canvas_channels(&self) -> usize {
        self.widths.c_b
            + self.motion.as_ref().map_or(0, |m| m.c_m())
            + if self.occupancy_channels { self.n_scans } else { 0 }
    }

    /// Per-point descriptors -> shared FC -> ReLU -> per-voxel max pool.
    /// Returns `[V, c_b]`.
    fn base_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        voxels: &[TemporalVoxel],
        cfg: &GridConfig,
    ) -> Result<ValueId> {
        let mut rows: Vec<f64> = Vec::new();
        let mut segments = Vec::with_capacity(voxels.len());
        let mut cursor = 0usize;
        for v in voxels {
            let total = v.total_points();
            if total == 0 {
                return Err(Error::data(
                    "voxel with no points reached the feature encoder",
                ));
            }
            let mut mean = [0.0f64; 3];
            for bucket in &v.buckets {
                for p in bucket {
                    mean[0] += p.x;
                    mean[1] += p.y;
                    mean[2] += p.z;
                }
            }
            for m in &mut mean {
                *m /= total as f64;
            }
            let (cx, cy, _) = cfg.cell_center(v.coord.0, v.coord.1, v.coord.2);
            for bucket in &v.buckets {
                for p in bucket {
                    rows.extend_from_slice(&[
                        p.x,
                        p.y,
                        p.z,
                        p.r,
                        p.dt,
                        p.x - mean[0],
                        p.y - mean[1],
                        p.z - mean[2],
                        p.x - cx,
                        p.y - cy,
                    ]);
                }
            }
            segments.push((cursor, cursor + total));
            cursor += total;
        }
        let pts = tape.leaf(Tensor::from_vec(&[cursor, 10], rows)?);
        let enc = fc_layer(tape, store, &format!("{}.point_fc", self.prefix), pts)?;
        let enc = relu(tape, enc)?;
        segment_max(tape, enc, &segments)
    }

    /// Encodes the populated voxels of one frame into feature rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        voxels: &[TemporalVoxel],
        cfg: &GridConfig,
    ) -> Result<EncodedFrame> {
        let (_, _, dv) = cfg.dims();
        if dv != 1 {
            return Err(Error::config(
                "BEV encoding requires a single voxel layer along z (pillar mode)",
            ));
        }
        if voxels.is_empty() {
            return Err(Error::data("encode: no populated voxels"));
        }
        if voxels.iter().any(|v| v.buckets.len() != self.n_scans) {
            return Err(Error::shape(format!(
                "every voxel must carry {} scan buckets",
                self.n_scans
            )));
        }
        let coords: Vec<(usize, usize)> = voxels.iter().map(|v| (v.coord.1, v.coord.0)).collect();
        let mut features = self.base_features(tape, store, voxels, cfg)?;
        if let Some(motion) = &self.motion {
            let centroids: Vec<Vec<[f64; 5]>> = voxels.iter().map(scan_centroids).collect();
            let m = motion.forward(tape, store, &centroids)?;
            features = concat_cols(tape, features, m)?;
        }
        if self.occupancy_channels {
            let mut occ = Vec::with_capacity(voxels.len() * self.n_scans);
            for v in voxels {
                occ.extend(
                    v.buckets
                        .iter()
                        .map(|b| if b.is_empty() { 0.0 } else { 1.0 }),
                );
            }
            let occ = tape.leaf(Tensor::from_vec(&[voxels.len(), self.n_scans], occ)?);
            features = concat_cols(tape, features, occ)?;
        }
        Ok(EncodedFrame { coords, features })
    }

    /// Encodes and scatters one frame onto the `[C_v, Hv, Wv]` canvas.
    /// A frame with no populated voxels yields an all-zero canvas.
    pub fn encode_to_bev(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        voxels: &[TemporalVoxel],
        cfg: &GridConfig,
    ) -> Result<ValueId> {
        let (wv, hv, _) = cfg.dims();
        if voxels.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(&[self.canvas_channels(), hv, wv])));
        }
        let frame = self.encode(tape, store, voxels, cfg)?;
        scatter_chw(tape, frame.features, &frame.coords, hv, wv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::{Pose, Scan};
    use crate::tensor::gradcheck::{check_store_gradients, FdOptions};
    use crate::tensor::ops::sum_all;
    use rand::Rng;

    fn small_grid() -> GridConfig {
        GridConfig {
            range_min: [-4.0, -4.0, -2.0],
            range_max: [4.0, 4.0, 2.0],
            voxel_size: [1.0, 1.0, 4.0],
            max_points_per_voxel_scan: 16,
            max_voxels: 1 << 12,
        }
    }

    fn frame_of(scans: Vec<Vec<Point>>) -> Frame {
        Frame {
            frame_index: 0,
            scans: scans
                .into_iter()
                .enumerate()
                .map(|(i, points)| Scan {
                    scan_index: i + 1,
                    points,
                    ego_pose: Pose::IDENTITY,
                })
                .collect(),
        }
    }

    fn p5(x: f64, y: f64, z: f64, r: f64, dt: f64) -> Point {
        Point { x, y, z, r, dt }
    }

    #[test]
    fn boundary_point_lands_in_cell_zero() {
        let cfg = small_grid();
        assert_eq!(cfg.cell_of(-4.0, -4.0, -2.0), Some((0, 0, 0)));
        // Exclusive max: the upper boundary is out of range.
        assert_eq!(cfg.cell_of(4.0, 0.0, 0.0), None);
        assert_eq!(cfg.cell_of(3.999, 3.999, 1.999), Some((7, 7, 0)));
    }

    #[test]
    fn binning_matches_brute_force_oracle_on_1000_points() {
        let cfg = small_grid();
        let mut rng = rng_from_seed(77);
        let points: Vec<Point> = (0..1000)
            .map(|_| {
                p5(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..1.0),
                    -0.05,
                )
            })
            .collect();
        let frame = frame_of(vec![points.clone()]);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        // Brute-force assignment.
        let mut oracle: BTreeMap<(usize, usize, usize), Vec<Point>> = BTreeMap::new();
        for p in &points {
            let inside = (0..3).all(|a| {
                let v = [p.x, p.y, p.z][a];
                v >= cfg.range_min[a] && v < cfg.range_max[a]
            });
            if inside {
                let ix = ((p.x - cfg.range_min[0]) / cfg.voxel_size[0]).floor() as usize;
                let iy = ((p.y - cfg.range_min[1]) / cfg.voxel_size[1]).floor() as usize;
                let iz = ((p.z - cfg.range_min[2]) / cfg.voxel_size[2]).floor() as usize;
                oracle.entry((ix, iy, iz)).or_default().push(*p);
            }
        }
        assert_eq!(voxels.len(), oracle.len());
        for v in &voxels {
            let mut expect = oracle.remove(&v.coord).expect("voxel not in oracle");
            expect.sort_by(cmp_points);
            assert_eq!(v.buckets[0], expect);
        }
    }

    #[test]
    fn scan_buckets_stay_separate() {
        // Two points in one cell from scans 3 and 7 of an 8-scan frame.
        let mut scans = vec![Vec::new(); 8];
        scans[2] = vec![p5(0.5, 0.5, 0.0, 0.3, -0.25)];
        scans[6] = vec![p5(0.6, 0.4, 0.1, 0.7, -0.05)];
        let voxels = voxelize(&frame_of(scans), &small_grid(), 0).unwrap();
        assert_eq!(voxels.len(), 1);
        let v = &voxels[0];
        assert_eq!(v.coord, (4, 4, 0));
        for (i, bucket) in v.buckets.iter().enumerate() {
            assert_eq!(bucket.len(), usize::from(i == 2 || i == 6), "bucket {i}");
        }
    }

    #[test]
    fn overfull_buckets_subsample_deterministically_and_order_free() {
        let cfg = GridConfig { max_points_per_voxel_scan: 5, ..small_grid() };
        let mut rng = rng_from_seed(3);
        let points: Vec<Point> = (0..40)
            .map(|_| {
                p5(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    0.0,
                    rng.gen_range(0.0..1.0),
                    -0.05,
                )
            })
            .collect();
        let a = voxelize(&frame_of(vec![points.clone()]), &cfg, 11).unwrap();
        assert_eq!(a[0].buckets[0].len(), 5);
        // Every kept point is one of the originals.
        for p in &a[0].buckets[0] {
            assert!(points.contains(p));
        }
        // Same seed, same result; different seed, different pick.
        let b = voxelize(&frame_of(vec![points.clone()]), &cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = voxelize(&frame_of(vec![points.clone()]), &cfg, 12).unwrap();
        assert_ne!(a, c);
        // Reversing the input point order changes nothing.
        let mut rev = points.clone();
        rev.reverse();
        let d = voxelize(&frame_of(vec![rev]), &cfg, 11).unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn voxelize_rejects_uncompensated_frames() {
        let mut frame = frame_of(vec![vec![p5(0.0, 0.0, 0.0, 0.5, -0.1)], vec![]]);
        frame.scans[0].ego_pose = Pose { x: 1.0, y: 0.0, z: 0.0, yaw: 0.0 };
        assert!(voxelize(&frame, &small_grid(), 0).is_err());
    }

    #[test]
    fn centroids_follow_the_mean_and_empty_rule() {
        let scans = vec![
            vec![p5(0.0, 0.0, 0.0, 0.0, 0.0), p5(2.0, 2.0, 2.0, 1.0, -0.1)],
            vec![],
            vec![p5(1.5, 1.5, 1.5, 0.25, -0.05)],
        ];
        let cfg = GridConfig {
            range_min: [-4.0, -4.0, -2.0],
            range_max: [4.0, 4.0, 4.0],
            voxel_size: [8.0, 8.0, 6.0],
            ..small_grid()
        };
        let voxels = voxelize(&frame_of(scans), &cfg, 0).unwrap();
        assert_eq!(voxels.len(), 1);
        let c = scan_centroids(&voxels[0]);
        assert_eq!(c[0], [1.0, 1.0, 1.0, 0.5, -0.05]);
        assert_eq!(c[1], [0.0; 5]);
        assert_eq!(c[2], [1.5, 1.5, 1.5, 0.25, -0.05]);
    }

    fn motion_fixture(seed: u64) -> (ParamStore, MotionEncoder) {
        let mut store = ParamStore::new(seed);
        let enc = MotionEncoder::register(&mut store, "m", 4, 6, 8).unwrap();
        (store, enc)
    }

    #[test]
    fn static_centroids_give_a_constant_motion_vector() {
        let (store, enc) = motion_fixture(5);
        let run = |value: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let centroids = vec![vec![[value, value, value, 0.5, -0.1]; 4]];
            let m = enc.forward(&mut tape, &store, &centroids).unwrap();
            tape.value(m).data().to_vec()
        };
        // All-equal centroids zero out every delta, so the embedding cannot
        // depend on the centroid value.
        let a = run(0.0);
        let b = run(3.75);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn motion_vector_is_invariant_to_constant_centroid_shifts() {
        let (store, enc) = motion_fixture(6);
        let base: Vec<[f64; 5]> = vec![
            [1.0, 2.0, 0.5, 0.25, -0.15],
            [1.25, 2.25, 0.5, 0.5, -0.1],
            [1.5, 2.5, 0.75, 0.25, -0.05],
            [2.0, 3.0, 1.0, 0.5, 0.0],
        ];
        // Dyadic shift keeps the delta arithmetic exact.
        let shift = [0.5, -0.25, 0.125, 0.0625, 0.03125];
        let shifted: Vec<[f64; 5]> = base
            .iter()
            .map(|c| {
                let mut s = *c;
                for i in 0..5 {
                    s[i] += shift[i];
                }
                s
            })
            .collect();
        let mut tape = Tape::new();
        let m = enc
            .forward(&mut tape, &store, &[base, shifted])
            .unwrap();
        let vals = tape.value(m).data().to_vec();
        let (a, b) = vals.split_at(vals.len() / 2);
        assert_eq!(a, b);
    }

    #[test]
    fn motion_encoder_gradients_match_finite_differences() {
        let (mut store, enc) = motion_fixture(7);
        let mut rng = rng_from_seed(8);
        let centroids: Vec<Vec<[f64; 5]>> = (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let mut c = [0.0; 5];
                        for v in &mut c {
                            *v = rng.gen_range(-1.0..1.0);
                        }
                        c
                    })
                    .collect()
            })
            .collect();
        let weights: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |st: &ParamStore| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let m = enc.forward(&mut tape, st, &centroids)?;
            let wv = tape.leaf(Tensor::from_vec(&[3, 8], weights.clone())?);
            let prod = crate::tensor::ops::mul(&mut tape, m, wv)?;
            let l = sum_all(&mut tape, prod)?;
            Ok(tape.value(l).item()?)
        };
        let mut tape = Tape::train();
        let m = enc.forward(&mut tape, &store, &centroids).unwrap();
        let wv = tape.leaf(Tensor::from_vec(&[3, 8], weights.clone()).unwrap());
        let prod = crate::tensor::ops::mul(&mut tape, m, wv).unwrap();
        let l = sum_all(&mut tape, prod).unwrap();
        tape.backward(l).unwrap();
        let grads = tape.param_grads();
        let names: Vec<String> = store.names();
        let report = check_store_gradients(
            &mut store,
            &names,
            loss,
            &grads,
            &FdOptions { max_components_per_param: 6, seed: 9, ..FdOptions::default() },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "worst {:?}",
            report.worst()
        );
    }

    fn encoder_fixture(
        use_motion: bool,
        occupancy: bool,
    ) -> (ParamStore, VoxelEncoder, GridConfig) {
        let mut store = ParamStore::new(21);
        let enc = VoxelEncoder::register(
            &mut store,
            "vox",
            3,
            VoxelWidths { c_q: 4, c_m: 6, c_b: 8 },
            use_motion,
            occupancy,
        )
        .unwrap();
        (store, enc, small_grid())
    }

    #[test]
    fn single_point_voxel_feature_equals_direct_encoding() {
        let (store, enc, cfg) = encoder_fixture(false, false);
        let pt = p5(0.3, 0.4, 0.1, 0.8, -0.05);
        let frame = frame_of(vec![vec![pt], vec![], vec![]]);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &voxels, &cfg).unwrap();
        let got = tape.value(out.features).data().to_vec();
        // Independent single-row computation: mean offset is zero, center
        // offsets use the cell center of (4, 4).
        let (cx, cy, _) = cfg.cell_center(4, 4, 0);
        let row = vec![
            pt.x,
            pt.y,
            pt.z,
            pt.r,
            pt.dt,
            0.0,
            0.0,
            0.0,
            pt.x - cx,
            pt.y - cy,
        ];
        let mut tape2 = Tape::new();
        let x = tape2.leaf(Tensor::from_vec(&[1, 10], row).unwrap());
        let y = fc_layer(&mut tape2, &store, "vox.point_fc", x).unwrap();
        let y = relu(&mut tape2, y).unwrap();
        let want = tape2.value(y).data().to_vec();
        assert_eq!(got, want);
        assert_eq!(out.coords, vec![(4, 4)]);
    }

    #[test]
    fn duplicating_points_leaves_base_feature_unchanged() {
        let (store, enc, cfg) = encoder_fixture(false, false);
        let pts = vec![
            p5(0.3, 0.4, 0.1, 0.8, -0.05),
            p5(0.1, 0.9, -0.4, 0.2, -0.1),
            p5(0.7, 0.2, 0.6, 0.5, 0.0),
        ];
        let run = |points: Vec<Point>| -> Vec<f64> {
            let frame = frame_of(vec![points, vec![], vec![]]);
            let voxels = voxelize(&frame, &cfg, 0).unwrap();
            let mut tape = Tape::new();
            let out = enc.encode(&mut tape, &store, &voxels, &cfg).unwrap();
            tape.value(out.features).data().to_vec()
        };
        let single = run(pts.clone());
        let mut doubled = pts.clone();
        doubled.extend(pts.iter().copied());
        // Max-pooling is idempotent; the point-mean accumulation order can
        // still shift the inputs by an ulp, hence the tight tolerance.
        for (a, b) in single.iter().zip(run(doubled)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn five_point_voxel_matches_naive_oracle() {
        let (store, enc, cfg) = encoder_fixture(false, false);
        let mut rng = rng_from_seed(31);
        let pts: Vec<Point> = (0..5)
            .map(|_| {
                p5(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(-0.2..0.0),
                )
            })
            .collect();
        let frame = frame_of(vec![pts.clone(), vec![], vec![]]);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        assert_eq!(voxels.len(), 1);
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &voxels, &cfg).unwrap();
        let got = tape.value(out.features).data().to_vec();
        // Naive per-point FC + ReLU + coordinate-wise max.
        let w = store.get("vox.point_fc.w").unwrap().data().to_vec();
        let b = store.get("vox.point_fc.b").unwrap().data().to_vec();
        let c_b = b.len();
        let mean = {
            let mut m = [0.0; 3];
            for p in &pts {
                m[0] += p.x;
                m[1] += p.y;
                m[2] += p.z;
            }
            m.map(|v| v / pts.len() as f64)
        };
        let (cx, cy, _) = cfg.cell_center(voxels[0].coord.0, voxels[0].coord.1, 0);
        let mut want = vec![f64::NEG_INFINITY; c_b];
        for p in &pts {
            let row = [
                p.x,
                p.y,
                p.z,
                p.r,
                p.dt,
                p.x - mean[0],
                p.y - mean[1],
                p.z - mean[2],
                p.x - cx,
                p.y - cy,
            ];
            for o in 0..c_b {
                let mut acc = b[o];
                for (i, item) in row.iter().enumerate() {
                    acc += item * w[i * c_b + o];
                }
                let acc = acc.max(0.0);
                if acc > want[o] {
                    want[o] = acc;
                }
            }
        }
        assert_eq!(got.len(), c_b);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn scatter_places_rows_and_preserves_mass() {
        let (store, enc, cfg) = encoder_fixture(true, false);
        let scans = vec![
            vec![p5(-0.7, 1.3, 0.0, 0.5, -0.1), p5(2.3, -3.1, 0.2, 0.4, -0.1)],
            vec![p5(-0.6, 1.2, 0.1, 0.6, -0.05)],
            vec![p5(2.2, -3.3, 0.0, 0.2, 0.0)],
        ];
        let frame = frame_of(scans);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let rows = enc.encode(&mut tape, &store, &voxels, &cfg).unwrap();
        let canvas = enc.encode_to_bev(&mut tape, &store, &voxels, &cfg).unwrap();
        let shape = tape.value(canvas).shape().to_vec();
        assert_eq!(shape, vec![enc.canvas_channels(), 8, 8]);
        let sum_rows: f64 = tape.value(rows.features).data().iter().sum();
        let sum_canvas: f64 = tape.value(canvas).data().iter().sum();
        assert!((sum_rows - sum_canvas).abs() < 1e-12);
        // Non-zero cells are exactly the populated coordinates.
        let data = tape.value(canvas).data().to_vec();
        let mut hot = std::collections::BTreeSet::new();
        for c in 0..shape[0] {
            for iy in 0..8 {
                for ix in 0..8 {
                    if data[(c * 8 + iy) * 8 + ix] != 0.0 {
                        hot.insert((iy, ix));
                    }
                }
            }
        }
        let want: std::collections::BTreeSet<(usize, usize)> =
            rows.coords.iter().copied().collect();
        assert_eq!(hot, want);
    }

    #[test]
    fn empty_frame_scatters_to_zero_canvas() {
        let (store, enc, cfg) = encoder_fixture(true, false);
        let mut tape = Tape::new();
        let canvas = enc.encode_to_bev(&mut tape, &store, &[], &cfg).unwrap();
        assert_eq!(tape.value(canvas).shape(), &[enc.canvas_channels(), 8, 8]);
        assert!(tape.value(canvas).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_world_gives_identical_motion_vectors_everywhere() {
        // Every scan sees the same points: deltas vanish in every voxel, so
        // all voxels share one motion vector bit for bit.
        let (store, enc, cfg) = encoder_fixture(true, false);
        let mut rng = rng_from_seed(55);
        let base: Vec<Point> = (0..60)
            .map(|_| {
                p5(
                    rng.gen_range(-3.9..3.9),
                    rng.gen_range(-3.9..3.9),
                    rng.gen_range(-1.9..1.9),
                    rng.gen_range(0.0..1.0),
                    0.0,
                )
            })
            .collect();
        let frame = frame_of(vec![base.clone(), base.clone(), base]);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        assert!(voxels.len() > 5);
        let motion = enc.motion.as_ref().unwrap();
        let centroids: Vec<Vec<[f64; 5]>> = voxels.iter().map(scan_centroids).collect();
        let mut tape = Tape::new();
        let m = motion.forward(&mut tape, &store, &centroids).unwrap();
        let vals = tape.value(m).data();
        let c_m = motion.c_m();
        let first = &vals[..c_m];
        for v in 1..voxels.len() {
            assert_eq!(&vals[v * c_m..(v + 1) * c_m], first, "voxel {v}");
        }
    }

    #[test]
    fn occupancy_channels_extend_width_when_enabled() {
        let (store, enc, cfg) = encoder_fixture(true, true);
        assert_eq!(enc.canvas_channels(), 8 + 6 + 3);
        let scans = vec![
            vec![p5(0.5, 0.5, 0.0, 0.5, -0.1)],
            vec![],
            vec![p5(0.6, 0.6, 0.0, 0.5, 0.0)],
        ];
        let voxels = voxelize(&frame_of(scans), &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &voxels, &cfg).unwrap();
        let vals = tape.value(out.features).data().to_vec();
        assert_eq!(vals.len(), 17);
        assert_eq!(&vals[14..], &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_validation_rejects_bad_configs() {
        let mut cfg = small_grid();
        cfg.voxel_size[0] = 0.0;
        assert!(cfg.check().is_err());
        let mut cfg = small_grid();
        cfg.range_max[1] = cfg.range_min[1];
        assert!(cfg.check().is_err());
        let cfg = small_grid();
        assert_eq!(cfg.dims(), (8, 8, 1));
        assert_eq!(GridConfig::default().dims(), (64, 64, 1));
    }

    #[test]
    fn encoder_rejects_non_pillar_grids_for_bev() {
        let (store, enc, mut cfg) = encoder_fixture(false, false);
        cfg.voxel_size[2] = 1.0; // four z layers
        let frame = frame_of(vec![vec![p5(0.5, 0.5, 0.0, 0.5, -0.1)], vec![], vec![]]);
        let voxels = voxelize(&frame, &cfg, 0).unwrap();
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &store, &voxels, &cfg).is_err());
    }
}
