//! End-to-end pipeline: raw scan sequences through temporal voxel encoding,
//! the BEV backbone, cross-frame alignment and aggregation, and the
//! detection head.
//!
//! The aggregator is switchable so ablations map to configuration: `none`
//! runs single-frame, `concat` mixes unaligned frame maps with one conv, and
//! `stfa` runs layered deformable attention over maps that are first warped
//! by the motion-guided aligner when `use_mgda` is set.

use crate::backbone::{Backbone, BackboneMaps};
use crate::detect::{DetectHead, HeadOutput};
use crate::error::{Error, Result};
use crate::mgda::Mgda;
use crate::points::{compensate_ego_motion, Sequence};
use crate::stfa::{Stfa, StfaConfig};
use crate::tensor::blocks::{conv_layer, register_conv};
use crate::tensor::ops::concat_channels;
use crate::tensor::{ParamStore, Tape, ValueId};
use crate::util::{derive_seed, derive_seed_named, rng_from_seed};
use crate::voxel::{voxelize, GridConfig, VoxelEncoder, VoxelWidths};
use rand::Rng;

/// Cross-frame aggregation strategy.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Aggregator {
    /// Single-frame: the current map feeds the head directly.
    None,
    /// Channel-concatenate all frame maps (unaligned) and mix with one
    /// 3x3 conv.
    Concat,
    /// Layered deformable attention; past maps are first aligned when
    /// `use_mgda` is on.
    Stfa { use_mgda: bool },
}

/// Full pipeline sizing. `stfa.frames` and `stfa.channels` are ignored in
/// favor of the model-level `frames` and `channels`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub widths: VoxelWidths,
    /// Scans per frame.
    pub n_scans: usize,
    /// Frames in the temporal window (1 = single-frame).
    pub frames: usize,
    /// BEV feature width after the backbone.
    pub channels: usize,
    /// Encode per-scan centroid motion into the voxel features.
    pub use_motion: bool,
    /// Append per-scan occupancy bits to the voxel features.
    pub occupancy: bool,
    pub aggregator: Aggregator,
    pub stfa: StfaConfig,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            grid: GridConfig::default(),
            widths: VoxelWidths::default(),
            n_scans: 10,
            frames: 3,
            channels: 32,
            use_motion: true,
            occupancy: false,
            aggregator: Aggregator::Stfa { use_mgda: true },
            stfa: StfaConfig::default(),
            head_hidden: 32,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// The attention configuration actually used: window and width follow
    /// the model-level fields.
    pub fn stfa_cfg(&self) -> StfaConfig {
        StfaConfig {
            frames: self.frames,
            channels: self.channels,
            ..self.stfa
        }
    }

    pub fn check(&self) -> Result<()> {
        self.grid.check()?;
        let (wv, hv, dv) = self.grid.dims();
        if dv != 1 {
            return Err(Error::config("the pipeline needs a single voxel layer along z"));
        }
        if wv % 2 != 0 || hv % 2 != 0 {
            return Err(Error::config(format!(
                "BEV grid {hv}x{wv} must have even dims for the strided backbone"
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("the temporal window needs at least one frame"));
        }
        if self.n_scans == 0 {
            return Err(Error::config("frames need at least one scan"));
        }
        if self.use_motion && self.n_scans < 2 {
            return Err(Error::config(
                "motion encoding needs at least two scans per frame",
            ));
        }
        if self.channels == 0 || self.head_hidden == 0 || self.num_classes == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        match self.aggregator {
            Aggregator::None if self.frames != 1 => Err(Error::config(
                "a multi-frame window needs an aggregator; set frames to 1 or pick one",
            )),
            Aggregator::Stfa { .. } => self.stfa_cfg().check(),
            _ => Ok(()),
        }
    }
}

/// Parameter initialization flavor.
///
/// `Train` keeps the production zero-initializations (offset and attention
/// heads start at identity-like behavior). `GradCheck` nudges those heads to
/// small non-zero values so every bilinear sample sits off the integer
/// lattice, where finite-difference references are valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitStyle {
    Train,
    GradCheck,
}

/// Backbone maps of one encoded frame plus its canvas.
pub struct FrameFeatures {
    pub canvas: ValueId,
    pub maps: BackboneMaps,
}

/// Everything the forward pass produces, intermediates included so
/// diagnostics can dump them.
pub struct ModelOutput {
    /// Encoded frames, oldest first; the last entry is the current frame.
    pub frames: Vec<FrameFeatures>,
    /// Past maps as fed to the aggregator (aligned when the aligner runs),
    /// nearest lag first.
    pub aligned: Vec<ValueId>,
    /// Aligner motion features per past lag, nearest first (empty without
    /// the aligner).
    pub motion: Vec<ValueId>,
    /// Aligner sampling offsets per past lag.
    pub offsets: Vec<ValueId>,
    /// Aligner modulation weights per past lag.
    pub modulation: Vec<ValueId>,
    /// Aggregated BEV map feeding the head.
    pub f_hat: ValueId,
    pub head: HeadOutput,
}

/// The assembled pipeline; parameters live in the caller's store under the
/// prefixes `enc`, `bb`, `align`, `agg`, and `head`.
pub struct Model {
    cfg: ModelConfig,
    encoder: VoxelEncoder,
    backbone: Backbone,
    mgda: Option<Mgda>,
    stfa: Option<Stfa>,
    head: DetectHead,
}

/// Single-frame parameter prefixes: what stage-1 training owns and what a
/// temporal model inherits from a stage-1 checkpoint.
pub const STAGE1_PREFIXES: [&str; 3] = ["enc.", "bb.", "head."];

/// True if a parameter belongs to the single-frame (stage-1) subset.
pub fn is_stage1_param(name: &str) -> bool {
    STAGE1_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl Model {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, init: InitStyle) -> Result<Model> {
        cfg.check()?;
        let encoder = VoxelEncoder::register(
            store,
            "enc",
            cfg.n_scans,
            cfg.widths,
            cfg.use_motion,
            cfg.occupancy,
        )?;
        let backbone = Backbone::register(store, "bb", encoder.canvas_channels(), cfg.channels)?;
        let (mut mgda, mut stfa) = (None, None);
        match cfg.aggregator {
            Aggregator::None => {}
            Aggregator::Concat => {
                register_conv(store, "agg.cat", cfg.channels, cfg.frames * cfg.channels, 3)?;
            }
            Aggregator::Stfa { use_mgda } => {
                stfa = Some(Stfa::register(store, "agg", cfg.stfa_cfg())?);
                if use_mgda {
                    mgda = Some(Mgda::register(store, "align", cfg.channels)?);
                }
            }
        }
        let head = DetectHead::register(store, "head", cfg.channels, cfg.head_hidden, cfg.num_classes)?;
        if init == InitStyle::GradCheck {
            nudge_sampling_heads(store)?;
        }
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            backbone,
            mgda,
            stfa,
            head,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Compensates, voxelizes, encodes, and runs the backbone on one frame.
    pub fn encode_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &crate::points::Frame,
        seed: u64,
    ) -> Result<FrameFeatures> {
        let comp = compensate_ego_motion(frame)?;
        let voxels = voxelize(&comp, &self.cfg.grid, seed)?;
        let canvas = self
            .encoder
            .encode_to_bev(tape, store, &voxels, &self.cfg.grid)?;
        let maps = self.backbone.forward(tape, store, canvas)?;
        Ok(FrameFeatures { canvas, maps })
    }

    /// Runs the full pipeline on the last `frames` frames of a sequence.
    /// `seed` drives voxel subsampling and dropout; fixed seed, fixed output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &Sequence,
        seed: u64,
    ) -> Result<ModelOutput> {
        if seq.frames.len() < self.cfg.frames {
            return Err(Error::data(format!(
                "sequence has {} frames, the window needs {}",
                seq.frames.len(),
                self.cfg.frames
            )));
        }
        let used = &seq.frames[seq.frames.len() - self.cfg.frames..];
        let mut frames = Vec::with_capacity(used.len());
        for (i, frame) in used.iter().enumerate() {
            frames.push(self.encode_frame(tape, store, frame, derive_seed(seed, &[i as u64]))?);
        }
        let cur = frames.last().expect("window is non-empty");
        let mut aligned = Vec::new();
        let mut motion = Vec::new();
        let mut offsets = Vec::new();
        let mut modulation = Vec::new();
        // Past frames, nearest lag first.
        for lag in 1..self.cfg.frames {
            let past = &frames[self.cfg.frames - 1 - lag];
            if let Some(mgda) = &self.mgda {
                let m = mgda.motion_features(
                    tape,
                    store,
                    past.maps.f1,
                    past.maps.f2,
                    cur.maps.f1,
                    cur.maps.f2,
                )?;
                let mask = mgda.predict_mask(tape, store, m)?;
                let warped = mgda.deform_align(tape, store, past.maps.f, &mask)?;
                motion.push(m);
                offsets.push(mask.offsets);
                modulation.push(mask.modulation);
                aligned.push(warped);
            } else {
                aligned.push(past.maps.f);
            }
        }
        let f_hat = match self.cfg.aggregator {
            Aggregator::None => cur.maps.f,
            Aggregator::Concat => {
                let mut maps = Vec::with_capacity(self.cfg.frames);
                maps.push(cur.maps.f);
                maps.extend(aligned.iter().copied());
                let cat = concat_channels(tape, &maps)?;
                conv_layer(tape, store, "agg.cat", cat, 1)?
            }
            Aggregator::Stfa { .. } => {
                let stfa = self.stfa.as_ref().expect("registered with the aggregator");
                stfa.forward(tape, store, cur.maps.f, &aligned, derive_seed(seed, &[0xa77]))?
            }
        };
        let head = self.head.forward(tape, store, f_hat)?;
        Ok(ModelOutput {
            frames,
            aligned,
            motion,
            offsets,
            modulation,
            f_hat,
            head,
        })
    }
}

/// Moves every zero-initialized sampling head slightly off zero: offset
/// biases land away from integer positions and projection weights become
/// small random values. Pure function of each parameter's name.
fn nudge_sampling_heads(store: &mut ParamStore) -> Result<()> {
    let names = store.names();
    for name in names {
        let is_offset_bias = name.ends_with(".offset.b") || name.ends_with(".mask.b");
        let is_sampling_w = name.ends_with(".offset.w")
            || name.ends_with(".mask.w")
            || name.ends_with(".attn.w");
        if !is_offset_bias && !is_sampling_w {
            continue;
        }
        let mut rng = rng_from_seed(derive_seed_named(0x6ead_c4ec, &name));
        let mut t = store.get(&name)?.clone();
        for v in t.data_mut() {
            *v = if is_offset_bias {
                // Uniform over +-[0.25, 0.45]: clearly off-lattice.
                let mag = rng.gen_range(0.25..0.45);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            } else {
                rng.gen_range(-0.05..0.05)
            };
        }
        store.set(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{detection_loss, render_targets};
    use crate::points::{Frame, Point, Pose, Scan};
    use crate::tensor::gradcheck::{check_store_gradients, FdOptions};

    fn tiny_cfg(frames: usize, aggregator: Aggregator) -> ModelConfig {
        ModelConfig {
            grid: GridConfig {
                range_min: [-4.0, -4.0, -3.0],
                range_max: [4.0, 4.0, 1.0],
                voxel_size: [1.0, 1.0, 4.0],
                ..GridConfig::default()
            },
            widths: VoxelWidths { c_q: 2, c_m: 2, c_b: 4 },
            n_scans: 2,
            frames,
            channels: 4,
            use_motion: true,
            occupancy: false,
            aggregator,
            stfa: StfaConfig {
                heads: 2,
                points: 2,
                layers: 1,
                ffn_hidden: 8,
                dropout: 0.0,
                ..StfaConfig::default()
            },
            head_hidden: 4,
            num_classes: 2,
        }
    }

    /// A hand-built sequence: a few fixed points per scan, identity poses.
    fn tiny_sequence(frames: usize) -> Sequence {
        let mut out = Vec::with_capacity(frames);
        for fi in 0..frames {
            let shift = fi as f64 * 0.4;
            let mut scans = Vec::new();
            for si in 1..=2usize {
                let dt = -((2 - si) as f64) * 0.05;
                let points = vec![
                    Point { x: 1.2 + shift, y: 0.3, z: 0.4, r: 0.5, dt },
                    Point { x: 1.3 + shift, y: 0.4, z: 0.2, r: 0.4, dt },
                    Point { x: -2.1, y: -1.7, z: 0.1, r: 0.3, dt },
                    Point { x: -2.3, y: -1.5, z: 0.0, r: 0.6, dt },
                    Point { x: 0.1, y: 2.6 - shift, z: 0.3, r: 0.2, dt },
                ];
                scans.push(Scan {
                    scan_index: si,
                    points,
                    ego_pose: Pose::IDENTITY,
                });
            }
            out.push(Frame {
                frame_index: fi,
                scans,
            });
        }
        Sequence { frames: out }
    }

    #[test]
    fn config_validation_covers_window_and_grid_shape() {
        assert!(tiny_cfg(1, Aggregator::None).check().is_ok());
        assert!(tiny_cfg(3, Aggregator::None).check().is_err());
        assert!(tiny_cfg(3, Aggregator::Stfa { use_mgda: true }).check().is_ok());
        let mut odd = tiny_cfg(1, Aggregator::None);
        odd.grid.range_max[0] = 3.0; // 7 cells wide
        assert!(odd.check().is_err());
    }

    #[test]
    fn parameter_names_split_into_stage_one_and_temporal_sets() {
        let mut store = ParamStore::new(1);
        let cfg = tiny_cfg(3, Aggregator::Stfa { use_mgda: true });
        Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
        let names = store.names();
        let stage1: Vec<_> = names.iter().filter(|n| is_stage1_param(n)).collect();
        let temporal: Vec<_> = names.iter().filter(|n| !is_stage1_param(n)).collect();
        assert!(!stage1.is_empty());
        assert!(!temporal.is_empty());
        assert!(stage1.iter().all(|n| {
            n.starts_with("enc.") || n.starts_with("bb.") || n.starts_with("head.")
        }));
        assert!(temporal
            .iter()
            .all(|n| n.starts_with("align.") || n.starts_with("agg.")));
        // A single-frame registration produces exactly the stage-1 subset.
        let mut single = ParamStore::new(1);
        Model::register(&mut single, &tiny_cfg(1, Aggregator::None), InitStyle::Train).unwrap();
        let single_names = single.names();
        assert_eq!(
            single_names,
            stage1.iter().map(|s| s.to_string()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_frame_pipeline_produces_head_maps() {
        let cfg = tiny_cfg(1, Aggregator::None);
        let mut store = ParamStore::new(2);
        let model = Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
        let seq = tiny_sequence(1);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &seq, 7).unwrap();
        assert_eq!(tape.value(out.f_hat).shape(), &[4, 8, 8]);
        assert_eq!(tape.value(out.head.heatmap).shape(), &[2, 8, 8]);
        assert!(out.aligned.is_empty());
        assert!(out.motion.is_empty());
        assert_eq!(out.frames.len(), 1);
    }

    #[test]
    fn temporal_pipeline_aligns_each_past_frame() {
        let cfg = tiny_cfg(3, Aggregator::Stfa { use_mgda: true });
        let mut store = ParamStore::new(3);
        let model = Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
        let seq = tiny_sequence(3);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &seq, 11).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(out.aligned.len(), 2);
        assert_eq!(out.motion.len(), 2);
        assert_eq!(out.offsets.len(), 2);
        assert_eq!(tape.value(out.offsets[0]).shape(), &[18, 8, 8]);
        assert_eq!(tape.value(out.modulation[0]).shape(), &[9, 8, 8]);
        assert_eq!(tape.value(out.f_hat).shape(), &[4, 8, 8]);
    }

    #[test]
    fn concat_aggregator_runs_without_alignment() {
        let cfg = tiny_cfg(3, Aggregator::Concat);
        let mut store = ParamStore::new(4);
        let model = Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
        assert!(store.names().iter().any(|n| n == "agg.cat.w"));
        assert!(!store.names().iter().any(|n| n.starts_with("align.")));
        let seq = tiny_sequence(3);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &seq, 13).unwrap();
        assert!(out.motion.is_empty());
        assert_eq!(out.aligned.len(), 2);
        assert_eq!(tape.value(out.f_hat).shape(), &[4, 8, 8]);
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_seed() {
        let cfg = tiny_cfg(2, Aggregator::Stfa { use_mgda: true });
        let run = || -> Vec<f64> {
            let mut store = ParamStore::new(5);
            let model = Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
            let seq = tiny_sequence(2);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &seq, 17).unwrap();
            tape.value(out.head.heatmap).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_sequences_are_rejected_as_data_errors() {
        let cfg = tiny_cfg(3, Aggregator::Stfa { use_mgda: false });
        let mut store = ParamStore::new(6);
        let model = Model::register(&mut store, &cfg, InitStyle::Train).unwrap();
        let seq = tiny_sequence(2);
        let mut tape = Tape::new();
        assert!(model.forward(&mut tape, &store, &seq, 0).is_err());
    }

    #[test]
    fn gradcheck_init_moves_sampling_heads_off_zero() {
        let cfg = tiny_cfg(2, Aggregator::Stfa { use_mgda: true });
        let mut train = ParamStore::new(7);
        Model::register(&mut train, &cfg, InitStyle::Train).unwrap();
        let mut check = ParamStore::new(7);
        Model::register(&mut check, &cfg, InitStyle::GradCheck).unwrap();
        for name in ["align.mask.b", "agg.l0.h0.offset.b", "agg.l0.h0.offset.w"] {
            assert!(train.get(name).unwrap().data().iter().all(|&v| v == 0.0));
            let nudged = check.get(name).unwrap();
            assert!(nudged.data().iter().any(|&v| v != 0.0), "{name} still zero");
        }
        for name in ["align.mask.b", "agg.l0.h0.offset.b"] {
            for &v in check.get(name).unwrap().data() {
                assert!(
                    (v.abs() - v.abs().round()).abs() > 0.05,
                    "{name} bias {v} sits near the integer lattice"
                );
            }
        }
        // Non-sampling parameters are untouched.
        assert_eq!(
            train.get("bb.s1a.w").unwrap().data(),
            check.get("bb.s1a.w").unwrap().data()
        );
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let cfg = tiny_cfg(2, Aggregator::Stfa { use_mgda: true });
        let mut store = ParamStore::new(8);
        let model = Model::register(&mut store, &cfg, InitStyle::GradCheck).unwrap();
        let seq = tiny_sequence(2);
        let boxes = vec![crate::points::GtBox {
            class_id: 0,
            x: 1.4,
            y: 0.3,
            z: 0.3,
            l: 1.5,
            w: 0.8,
            h: 1.0,
            yaw: 0.2,
            vx: 0.0,
            vy: 0.0,
            occluded: false,
            n_points: 5,
        }];
        let (targets, _) = render_targets(&boxes, &cfg.grid, cfg.num_classes).unwrap();
        let loss = |st: &ParamStore| -> Result<f64> {
            let mut tape = Tape::train();
            let out = model.forward(&mut tape, st, &seq, 21)?;
            let (_, b) = detection_loss(&mut tape, &out.head, &targets)?;
            Ok(b.total)
        };
        let mut tape = Tape::train();
        let out = model.forward(&mut tape, &store, &seq, 21).unwrap();
        let (total, _) = detection_loss(&mut tape, &out.head, &targets).unwrap();
        tape.backward(total).unwrap();
        let grads = tape.param_grads();
        let names = store.names();
        let report = check_store_gradients(
            &mut store,
            &names,
            loss,
            &grads,
            &FdOptions { max_components_per_param: 2, seed: 22, ..FdOptions::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst());
    }

    #[test]
    fn aggregator_configs_round_trip_through_json() {
        for agg in [
            Aggregator::None,
            Aggregator::Concat,
            Aggregator::Stfa { use_mgda: true },
            Aggregator::Stfa { use_mgda: false },
        ] {
            let cfg = tiny_cfg(1, agg);
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ModelConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }
}
