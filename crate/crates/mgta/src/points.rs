//! Point/scan/frame/sequence data model, ego-motion compensation, synthetic
//! scene generation, sequence-consistent augmentation, and the on-disk
//! sequence format.
//!
//! A frame groups `N` consecutive scans acquired at 20 Hz; the last scan is
//! the keyframe. A sequence holds `K` frames; the last frame is the frame of
//! interest. Points carry `(x, y, z, reflectance, dt)` where `dt <= 0` is the
//! time offset from the keyframe scan. Generated coordinates are rounded
//! through `f32` so in-memory values equal their on-disk representation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from_seed;

/// Scan period in seconds (20 Hz).
pub const SCAN_PERIOD: f64 = 0.05;
/// Sensor height above ground in meters.
pub const SENSOR_HEIGHT: f64 = 1.8;

const SEQUENCE_FORMAT_VERSION: u32 = 1;

#[inline]
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

/// One LiDAR return: position (meters, sensor or keyframe coordinates),
/// reflectance in `[0, 1]`, and time offset from the keyframe scan (`<= 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub dt: f64,
}

impl Point {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.r.is_finite()
            && self.dt.is_finite()
    }
}

/// Planar sensor pose with height: world position `(x, y, z)` and yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { x: 0.0, y: 0.0, z: 0.0, yaw: 0.0 };

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.yaw.is_finite()
    }

    /// Sensor coordinates -> world coordinates.
    pub fn to_world(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y, self.z + z)
    }

    /// World coordinates -> sensor coordinates.
    pub fn to_sensor(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy, z - self.z)
    }
}

/// One scan: acquisition index `1..=N` within its frame, points in the
/// sensor frame at scan time, and the sensor pose at that time.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub scan_index: usize,
    pub points: Vec<Point>,
    pub ego_pose: Pose,
}

/// `N` consecutive scans; the last one is the keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_index: usize,
    pub scans: Vec<Scan>,
}

impl Frame {
    pub fn keyframe_pose(&self) -> Result<Pose> {
        self.scans
            .last()
            .map(|s| s.ego_pose)
            .ok_or_else(|| Error::data("frame has no scans"))
    }

    fn check(&self) -> Result<()> {
        if self.scans.is_empty() {
            return Err(Error::data(format!("frame {} has no scans", self.frame_index)));
        }
        for (i, scan) in self.scans.iter().enumerate() {
            if scan.scan_index != i + 1 {
                return Err(Error::data(format!(
                    "frame {}: scan at slot {} has index {} (want {})",
                    self.frame_index,
                    i,
                    scan.scan_index,
                    i + 1
                )));
            }
            if !scan.ego_pose.is_finite() {
                return Err(Error::data(format!(
                    "frame {} scan {}: non-finite ego pose",
                    self.frame_index, scan.scan_index
                )));
            }
        }
        Ok(())
    }
}

/// `K` frames ordered by time; the last frame is the frame of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn n(&self) -> usize {
        self.frames.first().map_or(0, |f| f.scans.len())
    }
}

/// Ground-truth box at a frame's keyframe time, in that keyframe's sensor
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtBox {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    /// Object emission is damped around this frame's keyframe.
    pub occluded: bool,
    /// Points this object emitted within the frame (all scans).
    pub n_points: usize,
}

impl GtBox {
    /// Axis-aligned BEV envelope (conservative for rotated boxes).
    pub fn bev_envelope(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let ex = (c * self.l / 2.0).abs() + (s * self.w / 2.0).abs();
        let ey = (s * self.l / 2.0).abs() + (c * self.w / 2.0).abs();
        (self.x - ex, self.x + ex, self.y - ey, self.y + ey)
    }

    pub fn envelope_overlaps(&self, other: &GtBox) -> bool {
        let (ax0, ax1, ay0, ay1) = self.bev_envelope();
        let (bx0, bx1, by0, by1) = other.bev_envelope();
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }
}

// ------------------------------------------------------------- compensation

/// Re-expresses every scan of `frame` in the keyframe (last scan) coordinate
/// system. Scans whose pose already equals the keyframe pose are returned
/// unchanged bit for bit, so the operation is idempotent. `dt` and
/// reflectance are preserved.
pub fn compensate_ego_motion(frame: &Frame) -> Result<Frame> {
    frame.check()?;
    let key = frame.keyframe_pose()?;
    let mut scans = Vec::with_capacity(frame.scans.len());
    for scan in &frame.scans {
        if scan.ego_pose == key {
            scans.push(scan.clone());
            continue;
        }
        let points = scan
            .points
            .iter()
            .map(|p| {
                let (wx, wy, wz) = scan.ego_pose.to_world(p.x, p.y, p.z);
                let (x, y, z) = key.to_sensor(wx, wy, wz);
                Point { x, y, z, r: p.r, dt: p.dt }
            })
            .collect();
        scans.push(Scan { scan_index: scan.scan_index, points, ego_pose: key });
    }
    Ok(Frame { frame_index: frame.frame_index, scans })
}

// ----------------------------------------------------------- scene generator

/// Synthetic scene parameters. All ranges are `[min, max]` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Frames per sequence (K).
    pub frames: usize,
    /// Scans per frame (N) at 20 Hz.
    pub scans_per_frame: usize,
    /// Objects and ground spawn inside `±half_range` meters of the world
    /// origin for the whole sequence duration.
    pub half_range: f64,
    pub vehicles: [usize; 2],
    pub pedestrians: [usize; 2],
    /// Speed of moving vehicles in m/s.
    pub vehicle_speed: [f64; 2],
    /// Fraction of vehicles that move; the rest are parked.
    pub moving_vehicle_fraction: f64,
    pub pedestrian_speed: [f64; 2],
    pub ego_speed: [f64; 2],
    /// Fraction of objects whose emission is damped during the final frame.
    pub occluded_fraction: f64,
    /// Emission multiplier applied to occluded objects in the final frame.
    pub occlusion_damping: f64,
    /// Surface points per square meter per scan at 1 m range.
    pub base_density: f64,
    pub ground_points_per_scan: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frames: 3,
            scans_per_frame: 10,
            half_range: 11.0,
            vehicles: [2, 4],
            pedestrians: [2, 4],
            vehicle_speed: [3.0, 6.0],
            moving_vehicle_fraction: 0.6,
            pedestrian_speed: [0.3, 1.5],
            ego_speed: [0.0, 1.5],
            occluded_fraction: 0.3,
            occlusion_damping: 0.02,
            base_density: 40.0,
            ground_points_per_scan: 256,
        }
    }
}

impl SceneSpec {
    pub fn check(&self) -> Result<()> {
        if self.frames == 0 || self.scans_per_frame == 0 {
            return Err(Error::config("scene needs at least one frame and one scan"));
        }
        if self.half_range <= 0.0 || self.base_density < 0.0 {
            return Err(Error::config("scene ranges and densities must be positive"));
        }
        for r in [
            self.vehicle_speed,
            self.pedestrian_speed,
            self.ego_speed,
        ] {
            if r[0] > r[1] || r[0] < 0.0 {
                return Err(Error::config(format!("invalid speed range [{}, {}]", r[0], r[1])));
            }
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction)
            || !(0.0..=1.0).contains(&self.moving_vehicle_fraction)
            || !(0.0..=1.0).contains(&self.occlusion_damping)
        {
            return Err(Error::config("scene fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct SceneObject {
    class_id: usize,
    size: [f64; 3], // l, w, h
    start: [f64; 2],
    velocity: [f64; 2],
    yaw: f64,
    base_reflectance: f64,
    occluded: bool,
}

impl SceneObject {
    fn center_at(&self, t: f64) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t]
    }
}

fn draw_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn draw_count(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Generates one synthetic sequence plus per-frame ground truth.
///
/// Objects follow constant-velocity trajectories; the ego sensor translates
/// at a drawn speed and slowly yaws. Points are emitted on box faces visible
/// from the sensor with a `1/range` density falloff, then stored in each
/// scan's own sensor frame with `f32`-rounded coordinates.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Sequence, Vec<Vec<GtBox>>)> {
    spec.check()?;
    let mut rng = rng_from_seed(seed);
    let (k_frames, n_scans) = (spec.frames, spec.scans_per_frame);
    let total_time = (k_frames * n_scans - 1) as f64 * SCAN_PERIOD;

    // Ego trajectory: constant velocity plus a slow yaw drift.
    let ego_speed = draw_range(&mut rng, spec.ego_speed);
    let ego_heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let ego_vel = [ego_speed * ego_heading.cos(), ego_speed * ego_heading.sin()];
    let ego_yaw_rate = rng.gen_range(-0.1..0.1);
    let ego_pose_at = |t: f64| Pose {
        x: ego_vel[0] * t,
        y: ego_vel[1] * t,
        z: SENSOR_HEIGHT,
        yaw: ego_yaw_rate * t,
    };

    // Objects with rejection-sampled in-range trajectories.
    let mut objects: Vec<SceneObject> = Vec::new();
    let n_veh = draw_count(&mut rng, spec.vehicles);
    let n_ped = draw_count(&mut rng, spec.pedestrians);
    for i in 0..n_veh + n_ped {
        let vehicle = i < n_veh;
        let (size, speed, refl): ([f64; 3], f64, f64) = if vehicle {
            let size = [
                rng.gen_range(3.6..4.8),
                rng.gen_range(1.6..2.0),
                rng.gen_range(1.4..1.7),
            ];
            let speed = if rng.gen::<f64>() < spec.moving_vehicle_fraction {
                draw_range(&mut rng, spec.vehicle_speed)
            } else {
                0.0
            };
            (size, speed, 0.45)
        } else {
            let size = [
                rng.gen_range(0.5..0.8),
                rng.gen_range(0.5..0.8),
                rng.gen_range(1.6..1.8),
            ];
            (size, draw_range(&mut rng, spec.pedestrian_speed), 0.25)
        };
        let occluded = rng.gen::<f64>() < spec.occluded_fraction;
        let margin = size[0].max(size[1]) / 2.0 + 0.5;
        let lo = -spec.half_range + margin;
        let hi = spec.half_range - margin;
        if lo >= hi {
            return Err(Error::config("scene half_range too small for object sizes"));
        }
        let mut placed = false;
        for _ in 0..40 {
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let start = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            let vel = [speed * heading.cos(), speed * heading.sin()];
            let end = [start[0] + vel[0] * total_time, start[1] + vel[1] * total_time];
            if end[0] < lo || end[0] > hi || end[1] < lo || end[1] > hi {
                continue;
            }
            let candidate = SceneObject {
                class_id: if vehicle { 0 } else { 1 },
                size,
                start,
                velocity: vel,
                yaw: heading,
                base_reflectance: refl,
                occluded,
            };
            // Reject swept-envelope overlap with already placed objects.
            let collides = objects.iter().any(|o| {
                let times = [0.0, total_time / 2.0, total_time];
                times.iter().any(|&t| {
                    let a = candidate.center_at(t);
                    let b = o.center_at(t);
                    let ra = (candidate.size[0] + candidate.size[1]) / 2.0;
                    let rb = (o.size[0] + o.size[1]) / 2.0;
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() < (ra + rb) / 1.5
                })
            });
            if !collides {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded scene: skip this object rather than fail.
            continue;
        }
    }

    // Emit scans.
    let mut frames = Vec::with_capacity(k_frames);
    let mut gt_per_frame: Vec<Vec<GtBox>> = Vec::with_capacity(k_frames);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new(); // (frame, object) -> points
    for fk in 0..k_frames {
        let mut scans = Vec::with_capacity(n_scans);
        for sn in 1..=n_scans {
            let t = (fk * n_scans + sn - 1) as f64 * SCAN_PERIOD;
            let dt = q32((sn as f64 - n_scans as f64) * SCAN_PERIOD);
            let pose = ego_pose_at(t);
            let mut points = Vec::new();
            // Ground plane around the sensor.
            for _ in 0..spec.ground_points_per_scan {
                let gx = pose.x + rng.gen_range(-spec.half_range..spec.half_range);
                let gy = pose.y + rng.gen_range(-spec.half_range..spec.half_range);
                let gz = rng.gen_range(-0.03..0.03);
                let (sx, sy, sz) = pose.to_sensor(gx, gy, gz);
                points.push(Point {
                    x: q32(sx),
                    y: q32(sy),
                    z: q32(sz),
                    r: q32(rng.gen_range(0.05..0.15)),
                    dt,
                });
            }
            for (oi, obj) in objects.iter().enumerate() {
                let damped = obj.occluded && fk == k_frames - 1;
                let factor = if damped { spec.occlusion_damping } else { 1.0 };
                let emitted = emit_box_points(
                    &mut rng,
                    obj,
                    t,
                    &pose,
                    spec.base_density * factor,
                    dt,
                    &mut points,
                );
                *counts.entry((fk, oi)).or_insert(0) += emitted;
            }
            scans.push(Scan { scan_index: sn, points, ego_pose: pose });
        }
        frames.push(Frame { frame_index: fk, scans });
    }

    // Ground truth at each frame's keyframe, in keyframe sensor coordinates.
    for fk in 0..k_frames {
        let t_key = (fk * n_scans + n_scans - 1) as f64 * SCAN_PERIOD;
        let pose = ego_pose_at(t_key);
        let mut boxes = Vec::with_capacity(objects.len());
        for (oi, obj) in objects.iter().enumerate() {
            let c = obj.center_at(t_key);
            let (x, y, z) = pose.to_sensor(c[0], c[1], obj.size[2] / 2.0);
            let (s, cy) = pose.yaw.sin_cos();
            boxes.push(GtBox {
                class_id: obj.class_id,
                x,
                y,
                z,
                l: obj.size[0],
                w: obj.size[1],
                h: obj.size[2],
                yaw: wrap_angle(obj.yaw - pose.yaw),
                vx: cy * obj.velocity[0] + s * obj.velocity[1],
                vy: -s * obj.velocity[0] + cy * obj.velocity[1],
                occluded: obj.occluded && fk == k_frames - 1,
                n_points: counts.get(&(fk, oi)).copied().unwrap_or(0),
            });
        }
        gt_per_frame.push(boxes);
    }
    Ok((Sequence { frames }, gt_per_frame))
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = (a + std::f64::consts::PI) % two_pi;
    if a < 0.0 {
        a += two_pi;
    }
    a - std::f64::consts::PI
}

/// Emits surface points for one box at world time `t` into `out` (sensor
/// frame of `pose`), returning how many were emitted.
fn emit_box_points(
    rng: &mut impl Rng,
    obj: &SceneObject,
    t: f64,
    pose: &Pose,
    density: f64,
    dt: f64,
    out: &mut Vec<Point>,
) -> usize {
    let c = obj.center_at(t);
    let (l, w, h) = (obj.size[0], obj.size[1], obj.size[2]);
    let dist = ((c[0] - pose.x).powi(2) + (c[1] - pose.y).powi(2)).sqrt();
    // Sensor direction in box-local coordinates.
    let (s, cy) = obj.yaw.sin_cos();
    let dxw = pose.x - c[0];
    let dyw = pose.y - c[1];
    let dx = cy * dxw + s * dyw;
    let dy = -s * dxw + cy * dyw;
    // Candidate faces: (area, kind). Kinds: 0 +x, 1 -x, 2 +y, 3 -y, 4 top.
    let mut faces: Vec<(f64, usize)> = Vec::with_capacity(3);
    if dx > l / 2.0 {
        faces.push((w * h, 0));
    } else if dx < -l / 2.0 {
        faces.push((w * h, 1));
    }
    if dy > w / 2.0 {
        faces.push((l * h, 2));
    } else if dy < -w / 2.0 {
        faces.push((l * h, 3));
    }
    if pose.z > h {
        faces.push((l * w, 4));
    }
    if faces.is_empty() {
        return 0;
    }
    let total_area: f64 = faces.iter().map(|f| f.0).sum();
    let expected = density * total_area / dist.max(1.0);
    let mut n = expected.floor() as usize;
    if rng.gen::<f64>() < expected.fract() {
        n += 1;
    }
    for _ in 0..n {
        // Pick a face proportional to area, then a uniform spot on it.
        let mut pick = rng.gen::<f64>() * total_area;
        let mut kind = faces[faces.len() - 1].1;
        for &(area, k) in &faces {
            if pick < area {
                kind = k;
                break;
            }
            pick -= area;
        }
        let (bx, by, bz) = match kind {
            0 => (l / 2.0, rng.gen_range(-w / 2.0..w / 2.0), rng.gen_range(0.0..h)),
            1 => (-l / 2.0, rng.gen_range(-w / 2.0..w / 2.0), rng.gen_range(0.0..h)),
            2 => (rng.gen_range(-l / 2.0..l / 2.0), w / 2.0, rng.gen_range(0.0..h)),
            3 => (rng.gen_range(-l / 2.0..l / 2.0), -w / 2.0, rng.gen_range(0.0..h)),
            _ => (rng.gen_range(-l / 2.0..l / 2.0), rng.gen_range(-w / 2.0..w / 2.0), h),
        };
        let wx = c[0] + cy * bx - s * by;
        let wy = c[1] + s * bx + cy * by;
        let (sx, sy, sz) = pose.to_sensor(wx, wy, bz);
        let r = (obj.base_reflectance + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        out.push(Point { x: q32(sx), y: q32(sy), z: q32(sz), r: q32(r), dt });
    }
    n
}

// ------------------------------------------------------------- augmentation

/// Global augmentation ranges; a single draw is applied to the whole
/// sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Rotation drawn from `[-rotation, rotation]` radians.
    pub rotation: f64,
    /// Scale drawn from `[min, max]`.
    pub scale: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_prob: 0.5,
            rotation: std::f64::consts::FRAC_PI_4,
            scale: [0.95, 1.05],
        }
    }
}

/// Applies one shared `(flip about x, rotate, scale)` world transform to all
/// scans, poses and ground-truth boxes of a sequence. An identity draw
/// returns the inputs unchanged bit for bit.
pub fn apply_global_transform(
    seq: &Sequence,
    gt: &[Vec<GtBox>],
    flip: bool,
    theta: f64,
    scale: f64,
) -> (Sequence, Vec<Vec<GtBox>>) {
    if !flip && theta == 0.0 && scale == 1.0 {
        return (seq.clone(), gt.to_vec());
    }
    let (st, ct) = theta.sin_cos();
    let map_xy = |x: f64, y: f64| -> (f64, f64) {
        let y = if flip { -y } else { y };
        (scale * (ct * x - st * y), scale * (st * x + ct * y))
    };
    // Directions expressed inside a coordinate frame rotate with the map.
    let map_yaw = |yaw: f64| -> f64 {
        wrap_angle(if flip { theta - yaw } else { theta + yaw })
    };
    // Poses conjugate (sensor frames transform along with the world), so
    // their rotation part only reacts to the flip.
    let map_pose_yaw = |yaw: f64| -> f64 { if flip { wrap_angle(-yaw) } else { yaw } };
    let frames = seq
        .frames
        .iter()
        .map(|f| Frame {
            frame_index: f.frame_index,
            scans: f
                .scans
                .iter()
                .map(|scan| {
                    let (px, py) = map_xy(scan.ego_pose.x, scan.ego_pose.y);
                    Scan {
                        scan_index: scan.scan_index,
                        ego_pose: Pose {
                            x: px,
                            y: py,
                            z: scale * scan.ego_pose.z,
                            yaw: map_pose_yaw(scan.ego_pose.yaw),
                        },
                        points: scan
                            .points
                            .iter()
                            .map(|p| {
                                let (x, y) = map_xy(p.x, p.y);
                                Point { x, y, z: scale * p.z, r: p.r, dt: p.dt }
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let gt = gt
        .iter()
        .map(|boxes| {
            boxes
                .iter()
                .map(|b| {
                    let (x, y) = map_xy(b.x, b.y);
                    let (vx, vy) = map_xy(b.vx, b.vy);
                    GtBox {
                        x,
                        y,
                        z: scale * b.z,
                        l: scale * b.l,
                        w: scale * b.w,
                        h: scale * b.h,
                        yaw: map_yaw(b.yaw),
                        vx,
                        vy,
                        ..*b
                    }
                })
                .collect()
        })
        .collect();
    (Sequence { frames }, gt)
}

/// Draws one transform from `params` and applies it to the whole sequence.
pub fn augment_sequence(
    seq: &Sequence,
    gt: &[Vec<GtBox>],
    params: &AugmentParams,
    seed: u64,
) -> (Sequence, Vec<Vec<GtBox>>) {
    let mut rng = rng_from_seed(seed);
    let flip = rng.gen::<f64>() < params.flip_prob;
    let theta = if params.rotation > 0.0 {
        rng.gen_range(-params.rotation..params.rotation)
    } else {
        0.0
    };
    let scale = draw_range(&mut rng, params.scale);
    apply_global_transform(seq, gt, flip, theta, scale)
}

// -------------------------------------------------------------- GT sampling

/// One harvestable object: its per-frame world pose deltas relative to
/// frame 0 and its points in object-local coordinates, kept per frame and
/// scan so the paste reproduces the original motion pattern including the
/// within-frame smear.
#[derive(Clone, Debug)]
pub struct DonorObject {
    pub class_id: usize,
    pub size: [f64; 3],
    /// Per frame: world pose of the object at that frame's keyframe,
    /// relative to its frame-0 pose: `(dx, dy, dyaw)` in frame-0 object axes.
    pub frame_deltas: Vec<[f64; 3]>,
    /// Per frame, per scan: points in the object frame, with each point's
    /// within-frame motion (velocity times `dt`) removed so they can be
    /// re-smeared at paste time.
    pub points: Vec<Vec<Vec<Point>>>,
    pub occluded: bool,
}

/// World-frame box pose derived from a keyframe-coordinates box.
fn world_box(b: &GtBox, key: &Pose) -> (f64, f64, f64, f64) {
    let (wx, wy, wz) = key.to_world(b.x, b.y, b.z);
    (wx, wy, wz, wrap_angle(b.yaw + key.yaw))
}

/// Extracts donor objects from a sequence: for each ground-truth object
/// (index-aligned across frames) with at least `min_points` cropped points
/// in total, gathers its per-scan clusters in object-local coordinates.
pub fn build_donor_bank(
    seq: &Sequence,
    gt: &[Vec<GtBox>],
    min_points: usize,
) -> Result<Vec<DonorObject>> {
    let mut bank = Vec::new();
    let k = seq.frames.len();
    if k == 0 || gt.len() != k {
        return Ok(bank);
    }
    let n_obj = gt[0].len();
    if gt.iter().any(|g| g.len() != n_obj) {
        return Err(Error::data(
            "donor harvesting needs index-aligned ground truth across frames",
        ));
    }
    // Work in each frame's keyframe coordinates.
    let mut compensated = Vec::with_capacity(k);
    let mut key_poses = Vec::with_capacity(k);
    for frame in &seq.frames {
        key_poses.push(frame.keyframe_pose()?);
        compensated.push(compensate_ego_motion(frame)?);
    }
    for oi in 0..n_obj {
        let (bx0, by0, _, byaw0) = world_box(&gt[0][oi], &key_poses[0]);
        let (s0, c0) = byaw0.sin_cos();
        let mut frame_deltas = Vec::with_capacity(k);
        let mut points = Vec::with_capacity(k);
        let mut total = 0usize;
        for fk in 0..k {
            let b = &gt[fk][oi];
            let (wx, wy, _, wyaw) = world_box(b, &key_poses[fk]);
            frame_deltas.push([
                c0 * (wx - bx0) + s0 * (wy - by0),
                -s0 * (wx - bx0) + c0 * (wy - by0),
                wrap_angle(wyaw - byaw0),
            ]);
            let (sb, cb) = b.yaw.sin_cos();
            let mut per_scan = Vec::with_capacity(compensated[fk].scans.len());
            for scan in &compensated[fk].scans {
                let mut cluster = Vec::new();
                for p in &scan.points {
                    // Crop against the box moved back to the point's scan
                    // time so fast movers keep their full smear.
                    let cx = b.x + b.vx * p.dt;
                    let cy = b.y + b.vy * p.dt;
                    let dx = p.x - cx;
                    let dy = p.y - cy;
                    let lx = cb * dx + sb * dy;
                    let ly = -sb * dx + cb * dy;
                    let lz = p.z - b.z;
                    if lx.abs() <= b.l / 2.0 + 0.05
                        && ly.abs() <= b.w / 2.0 + 0.05
                        && lz.abs() <= b.h / 2.0 + 0.05
                    {
                        cluster.push(Point { x: lx, y: ly, z: lz, r: p.r, dt: p.dt });
                        total += 1;
                    }
                }
                per_scan.push(cluster);
            }
            points.push(per_scan);
        }
        if total >= min_points {
            bank.push(DonorObject {
                class_id: gt[0][oi].class_id,
                size: [gt[0][oi].l, gt[0][oi].w, gt[0][oi].h],
                frame_deltas,
                points,
                occluded: gt.last().map_or(false, |g| g[oi].occluded),
            });
        }
    }
    Ok(bank)
}

/// Pastes one donor object into the sequence, preserving the donor's
/// frame-to-frame motion deltas exactly. The placement (position and yaw of
/// the object at frame 0) is drawn at random; a draw whose keyframe box
/// overlaps an existing ground-truth envelope is rejected. After
/// `max_tries` failed draws, or with an empty bank, the sequence is
/// returned unchanged and `pasted` is false.
pub struct PasteOutcome {
    pub sequence: Sequence,
    pub gt: Vec<Vec<GtBox>>,
    pub pasted: bool,
}

pub fn gt_sample_sequence(
    seq: &Sequence,
    gt: &[Vec<GtBox>],
    bank: &[DonorObject],
    half_range: f64,
    seed: u64,
) -> Result<PasteOutcome> {
    let mut rng = rng_from_seed(seed);
    let noop = || PasteOutcome { sequence: seq.clone(), gt: gt.to_vec(), pasted: false };
    if bank.is_empty() || seq.frames.is_empty() {
        return Ok(noop());
    }
    let donor = &bank[rng.gen_range(0..bank.len())];
    let k = seq.frames.len();
    if donor.frame_deltas.len() != k || gt.len() != k {
        return Err(Error::data(format!(
            "donor has {} frame deltas, target sequence has {k} frames",
            donor.frame_deltas.len()
        )));
    }
    let mut key_poses = Vec::with_capacity(k);
    for frame in &seq.frames {
        key_poses.push(frame.keyframe_pose()?);
    }
    let frame_period = seq.n() as f64 * SCAN_PERIOD;
    let margin = donor.size[0].max(donor.size[1]) / 2.0 + 0.5;
    let lo = -half_range + margin;
    let hi = half_range - margin;
    for _ in 0..20 {
        if lo >= hi {
            break;
        }
        // Placement: world pose of the donor trajectory at frame 0.
        let yaw0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let x0 = rng.gen_range(lo..hi);
        let y0 = rng.gen_range(lo..hi);
        let (s0, c0) = yaw0.sin_cos();
        let world_pose_at = |fk: usize| -> (f64, f64, f64) {
            let d = donor.frame_deltas[fk];
            (
                x0 + c0 * d[0] - s0 * d[1],
                y0 + s0 * d[0] + c0 * d[1],
                wrap_angle(yaw0 + d[2]),
            )
        };
        // World velocity per frame, from the placed trajectory.
        let world_vel_at = |fk: usize| -> (f64, f64) {
            let (ax, ay, _) = world_pose_at(fk);
            let (bx, by, _) = world_pose_at(if fk + 1 < k { fk + 1 } else { fk });
            if fk + 1 < k {
                ((bx - ax) / frame_period, (by - ay) / frame_period)
            } else if k >= 2 {
                let (px, py, _) = world_pose_at(fk - 1);
                ((ax - px) / frame_period, (ay - py) / frame_period)
            } else {
                (0.0, 0.0)
            }
        };
        // Per-frame boxes in keyframe coordinates, with range and collision
        // checks; any overlap with existing ground truth rejects the draw.
        let mut boxes = Vec::with_capacity(k);
        let mut ok = true;
        for fk in 0..k {
            let (wx, wy, wyaw) = world_pose_at(fk);
            if wx.abs() > half_range || wy.abs() > half_range {
                ok = false;
                break;
            }
            let key = &key_poses[fk];
            let (bx, by, bz) = key.to_sensor(wx, wy, donor.size[2] / 2.0);
            let (wvx, wvy) = world_vel_at(fk);
            let (sk, ck) = key.yaw.sin_cos();
            let b = GtBox {
                class_id: donor.class_id,
                x: bx,
                y: by,
                z: bz,
                l: donor.size[0],
                w: donor.size[1],
                h: donor.size[2],
                yaw: wrap_angle(wyaw - key.yaw),
                vx: ck * wvx + sk * wvy,
                vy: -sk * wvx + ck * wvy,
                occluded: donor.occluded && fk == k - 1,
                n_points: donor.points[fk].iter().map(|c| c.len()).sum(),
            };
            if gt[fk].iter().any(|existing| b.envelope_overlaps(existing)) {
                ok = false;
                break;
            }
            boxes.push(b);
        }
        if !ok {
            continue;
        }
        // Accepted: re-emit the donor clusters into each scan's own frame.
        let mut out_seq = seq.clone();
        let mut out_gt = gt.to_vec();
        for fk in 0..k {
            let (wx, wy, wyaw) = world_pose_at(fk);
            let (wvx, wvy) = world_vel_at(fk);
            let (sb, cb) = wyaw.sin_cos();
            let wz = donor.size[2] / 2.0;
            for (scan, cluster) in out_seq.frames[fk].scans.iter_mut().zip(&donor.points[fk]) {
                for p in cluster {
                    // Object frame -> world at the point's scan time.
                    let px = wx + cb * p.x - sb * p.y + wvx * p.dt;
                    let py = wy + sb * p.x + cb * p.y + wvy * p.dt;
                    let (sx, sy, sz) = scan.ego_pose.to_sensor(px, py, wz + p.z);
                    scan.points.push(Point { x: sx, y: sy, z: sz, r: p.r, dt: p.dt });
                }
            }
            out_gt[fk].push(boxes[fk]);
        }
        return Ok(PasteOutcome { sequence: out_seq, gt: out_gt, pasted: true });
    }
    Ok(noop())
}

// ------------------------------------------------------------------ file IO

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanMeta {
    scan_index: usize,
    pose: Pose,
    file: String,
    count: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameMeta {
    frame_index: usize,
    scans: Vec<ScanMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceManifest {
    version: u32,
    k: usize,
    n: usize,
    frames: Vec<FrameMeta>,
    gt: Vec<Vec<GtBox>>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

/// Writes a sequence directory: `manifest.json` plus one binary point file
/// per scan (`count: u64 LE`, then `count` records of five `f32` LE values
/// `x, y, z, r, dt`).
pub fn save_sequence(dir: &Path, seq: &Sequence, gt: &[Vec<GtBox>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let mut scans = Vec::with_capacity(frame.scans.len());
        for scan in &frame.scans {
            let file = format!("scan_{:03}_{:03}.bin", frame.frame_index, scan.scan_index);
            let path = dir.join(&file);
            let mut buf =
                Vec::with_capacity(8 + scan.points.len() * 20);
            buf.extend_from_slice(&(scan.points.len() as u64).to_le_bytes());
            for p in &scan.points {
                for v in [p.x, p.y, p.z, p.r, p.dt] {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
            scans.push(ScanMeta {
                scan_index: scan.scan_index,
                pose: scan.ego_pose,
                file,
                count: scan.points.len() as u64,
            });
        }
        frames.push(FrameMeta { frame_index: frame.frame_index, scans });
    }
    let manifest = SequenceManifest {
        version: SEQUENCE_FORMAT_VERSION,
        k: seq.frames.len(),
        n: seq.n(),
        frames,
        gt: gt.to_vec(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

/// Reads a sequence directory written by [`save_sequence`].
pub fn load_sequence(dir: &Path) -> Result<(Sequence, Vec<Vec<GtBox>>)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: SequenceManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", mpath.display())))?;
    if manifest.version != SEQUENCE_FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported sequence format version {}",
            mpath.display(),
            manifest.version
        )));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for fm in &manifest.frames {
        let mut scans = Vec::with_capacity(fm.scans.len());
        for sm in &fm.scans {
            let path = dir.join(&sm.file);
            let mut file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
            let mut header = [0u8; 8];
            file.read_exact(&mut header).map_err(|e| io_err(&path, e))?;
            let count = u64::from_le_bytes(header) as usize;
            if count != sm.count as usize {
                return Err(Error::data(format!(
                    "{}: header count {} does not match manifest {}",
                    path.display(),
                    count,
                    sm.count
                )));
            }
            let mut raw = vec![0u8; count * 20];
            file.read_exact(&mut raw).map_err(|e| io_err(&path, e))?;
            let mut trailing = [0u8; 1];
            if file.read(&mut trailing).map_err(|e| io_err(&path, e))? != 0 {
                return Err(Error::data(format!("{}: trailing bytes", path.display())));
            }
            let mut points = Vec::with_capacity(count);
            for i in 0..count {
                let at = |j: usize| -> f64 {
                    let off = i * 20 + j * 4;
                    f32::from_le_bytes([raw[off], raw[off + 1], raw[off + 2], raw[off + 3]]) as f64
                };
                let p = Point { x: at(0), y: at(1), z: at(2), r: at(3), dt: at(4) };
                if !p.is_finite() {
                    return Err(Error::data(format!(
                        "{}: non-finite point at record {i}",
                        path.display()
                    )));
                }
                points.push(p);
            }
            scans.push(Scan { scan_index: sm.scan_index, points, ego_pose: sm.pose });
        }
        let frame = Frame { frame_index: fm.frame_index, scans };
        frame.check()?;
        frames.push(frame);
    }
    Ok((Sequence { frames }, manifest.gt))
}
