//! Two-stage trainer: single-frame pre-training feeds its weights into the
//! full temporal pipeline, each stage running a one-cycle learning-rate
//! schedule with Adam. Every random choice derives from the run seed, so
//! equal seeds reproduce the loss log bit for bit.

use crate::checkpoint::{load_partial, save_checkpoint};
use crate::config::RunConfig;
use crate::detect::{
    decode, detection_loss, evaluate_ap, render_targets, ApReport, DecodeConfig, EvalSample,
    LossBreakdown, PredMaps, AP_THRESHOLDS,
};
use crate::error::{Error, Result};
use crate::model::{Aggregator, InitStyle, Model, ModelConfig};
use crate::points::{
    augment_sequence, build_donor_bank, gt_sample_sequence, load_sequence, DonorObject, GtBox,
    Sequence,
};
use crate::tensor::params::ParamStore;
use crate::tensor::tape::Tape;
use crate::util::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Stage 2 peaks at the stage-1 learning rate divided by this.
pub const STAGE2_LR_DIVISOR: f64 = 5.0;

/// One-cycle schedule: cosine ramp from `lr_max / 25` to `lr_max` over the
/// first 30% of steps, then cosine decay to `lr_max / 1000`.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let warm = ((0.3 * total_steps as f64).ceil() as usize).clamp(1, total_steps - 1);
    let t = step.min(total_steps - 1);
    if t < warm {
        let p = t as f64 / warm as f64;
        let lo = lr_max / 25.0;
        lr_max - (lr_max - lo) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    } else {
        let p = (t - warm) as f64 / (total_steps - 1 - warm).max(1) as f64;
        let lo = lr_max / 1000.0;
        lo + (lr_max - lo) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Top-level index of a generated dataset: sequence directories in order.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub sequences: Vec<String>,
}

/// File name of the dataset index inside a dataset directory.
pub const DATASET_INDEX: &str = "dataset.json";

pub fn write_dataset_index(dir: &Path, index: &DatasetIndex) -> Result<()> {
    let path = dir.join(DATASET_INDEX);
    let text = serde_json::to_string_pretty(index)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_dataset_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(DATASET_INDEX);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("dataset index {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Loads every sequence listed in a dataset directory's index.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Sequence, Vec<Vec<GtBox>>)>> {
    let index = read_dataset_index(dir)?;
    index
        .sequences
        .iter()
        .map(|name| load_sequence(&dir.join(name)))
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub stage: usize,
    pub epoch: usize,
    /// Step index within the stage.
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub heatmap: f64,
    pub regression: f64,
}

impl LossRow {
    pub fn csv_header() -> &'static str {
        "stage,epoch,step,lr,total,heatmap,regression"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.stage, self.epoch, self.step, self.lr, self.total, self.heatmap, self.regression
        )
    }
}

/// What a finished (or aborted) training run produced on disk.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    /// Written when stage 1 ran here (absent when seeded from a file).
    pub stage1_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    /// Best quality-probe checkpoint, when the probe was enabled.
    pub best_checkpoint: Option<PathBuf>,
    pub best_map: Option<f64>,
}

/// Runs each sequence through the model in eval mode and decodes boxes,
/// pairing them with the keyframe ground truth.
pub fn eval_samples(
    model: &Model,
    store: &ParamStore,
    data: &[(Sequence, Vec<Vec<GtBox>>)],
    seed: u64,
    decode_cfg: &DecodeConfig,
) -> Result<Vec<EvalSample>> {
    let mut samples = Vec::with_capacity(data.len());
    for (i, (seq, gt)) in data.iter().enumerate() {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, seq, derive_seed(seed, &[i as u64]))?;
        let pred = PredMaps {
            heatmap: tape.value(out.head.heatmap),
            offset: tape.value(out.head.offset),
            z: tape.value(out.head.z),
            size: tape.value(out.head.size),
            yaw: tape.value(out.head.yaw),
        };
        let dets = decode(&pred, &model.cfg().grid, decode_cfg)?;
        let gt_key = gt.last().cloned().unwrap_or_default();
        samples.push(EvalSample { dets, gt: gt_key });
    }
    Ok(samples)
}

/// Convenience wrapper: detections vs. keyframe ground truth, averaged over
/// the standard center-distance thresholds.
pub fn eval_map(
    model: &Model,
    store: &ParamStore,
    data: &[(Sequence, Vec<Vec<GtBox>>)],
    seed: u64,
) -> Result<ApReport> {
    let samples = eval_samples(model, store, data, seed, &DecodeConfig::default())?;
    Ok(evaluate_ap(
        &samples,
        model.cfg().num_classes,
        &AP_THRESHOLDS,
    ))
}

/// One optimizer step on one sequence; the caller picks the learning rate.
fn train_step(
    model: &Model,
    store: &mut ParamStore,
    seq: &Sequence,
    gt_key: &[GtBox],
    lr: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::train();
    let out = model.forward(&mut tape, store, seq, seed)?;
    let (targets, _skipped) = render_targets(gt_key, &model.cfg().grid, model.cfg().num_classes)?;
    let (loss, breakdown) = detection_loss(&mut tape, &out.head, &targets)?;
    tape.backward(loss)?;
    store.zero_grads();
    for (name, grad) in tape.param_grads() {
        store.accumulate_grad(&name, &grad)?;
    }
    store.adam_step(lr)?;
    Ok(breakdown)
}

struct StageCtx<'a> {
    cfg: &'a RunConfig,
    data: &'a [(Sequence, Vec<Vec<GtBox>>)],
    bank: &'a [DonorObject],
    csv: &'a mut BufWriter<File>,
    rows: &'a mut Vec<LossRow>,
}

/// Runs `epochs` epochs over the dataset, checkpointing at the start of the
/// stage and after every epoch so an abort always leaves the latest good
/// weights behind. Returns the best probe mAP seen (stage 2 only).
fn run_stage(
    ctx: &mut StageCtx,
    stage: usize,
    model: &Model,
    store: &mut ParamStore,
    epochs: usize,
    lr_max: f64,
    ckpt_path: &Path,
    best_path: Option<&Path>,
) -> Result<Option<f64>> {
    save_checkpoint(ckpt_path, store)?;
    let tcfg = &ctx.cfg.train;
    let total_steps = epochs * ctx.data.len();
    let mut best: Option<f64> = None;
    let probe_n = tcfg.probe_sequences.min(ctx.data.len());
    let probe_seed = derive_seed(tcfg.seed, &[stage as u64, 0xbe57]);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..ctx.data.len()).collect();
        let shuffle_seed = derive_seed(tcfg.seed, &[stage as u64, epoch as u64, 0x0bde8]);
        order.shuffle(&mut rng_from_seed(shuffle_seed));
        for (i, &si) in order.iter().enumerate() {
            let step = epoch * ctx.data.len() + i;
            let lr = one_cycle_lr(step, total_steps, lr_max);
            let step_seed =
                derive_seed(tcfg.seed, &[stage as u64, epoch as u64, i as u64, si as u64]);
            let (seq, gt) = &ctx.data[si];
            let (mut seq_s, mut gt_s) = (None, None);
            if tcfg.gt_sampling && !ctx.bank.is_empty() {
                let pasted = gt_sample_sequence(
                    seq,
                    gt,
                    ctx.bank,
                    ctx.cfg.scene.half_range,
                    derive_seed(step_seed, &[2]),
                )?;
                seq_s = Some(pasted.sequence);
                gt_s = Some(pasted.gt);
            }
            if tcfg.augment {
                let (a_seq, a_gt) = augment_sequence(
                    seq_s.as_ref().unwrap_or(seq),
                    gt_s.as_deref().unwrap_or(gt),
                    &tcfg.augment_params,
                    derive_seed(step_seed, &[3]),
                );
                seq_s = Some(a_seq);
                gt_s = Some(a_gt);
            }
            let seq_t = seq_s.as_ref().unwrap_or(seq);
            let gt_t = gt_s.as_deref().unwrap_or(gt);
            let gt_key = gt_t.last().map(Vec::as_slice).unwrap_or(&[]);
            let breakdown = train_step(
                model,
                store,
                seq_t,
                gt_key,
                lr,
                derive_seed(step_seed, &[1]),
            )?;
            let row = LossRow {
                stage,
                epoch,
                step,
                lr,
                total: breakdown.total,
                heatmap: breakdown.heatmap,
                regression: breakdown.regression,
            };
            writeln!(ctx.csv, "{}", row.csv_line())
                .and_then(|()| ctx.csv.flush())
                .map_err(|e| Error::io("loss.csv".to_string(), e))?;
            ctx.rows.push(row);
        }
        save_checkpoint(ckpt_path, store)?;
        if probe_n > 0 && best_path.is_some() {
            let report = eval_map(model, store, &ctx.data[..probe_n], probe_seed)?;
            let score = report.map.unwrap_or(f64::NEG_INFINITY);
            if best.map_or(true, |b| score > b) {
                best = Some(score);
                save_checkpoint(best_path.unwrap(), store)?;
            }
        }
    }
    Ok(best)
}

/// Stage-1 variant of a model config: one frame, no aggregation.
pub fn stage1_model_cfg(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        frames: 1,
        aggregator: Aggregator::None,
        ..cfg.clone()
    }
}

/// Trains in two stages and leaves `stage1.ckpt`, `model.ckpt`, `loss.csv`
/// (and `best.ckpt` when the probe is on) in the training output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.check()?;
    let data = load_dataset(Path::new(&cfg.train.data_dir))?;
    if data.is_empty() {
        return Err(Error::data(format!(
            "no sequences in dataset {}",
            cfg.train.data_dir
        )));
    }
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("loss.csv");
    let mut csv = BufWriter::new(
        File::create(&csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?,
    );
    writeln!(csv, "{}", LossRow::csv_header())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let mut bank = Vec::new();
    if cfg.train.gt_sampling {
        for (seq, gt) in &data {
            bank.extend(build_donor_bank(seq, gt, cfg.train.gt_sampling_min_points)?);
        }
    }
    let mut rows = Vec::new();

    let stage1_path = out_dir.join("stage1.ckpt");
    let mut stage1_written = None;
    if cfg.train.stage1_init.is_none() && cfg.train.stage1_epochs > 0 {
        let mut store1 = ParamStore::new(derive_seed(cfg.train.seed, &[1]));
        let model1 = Model::register(&mut store1, &stage1_model_cfg(&cfg.model), InitStyle::Train)?;
        let mut ctx = StageCtx {
            cfg,
            data: &data,
            bank: &bank,
            csv: &mut csv,
            rows: &mut rows,
        };
        run_stage(
            &mut ctx,
            1,
            &model1,
            &mut store1,
            cfg.train.stage1_epochs,
            cfg.train.lr_max,
            &stage1_path,
            None,
        )?;
        stage1_written = Some(stage1_path.clone());
    }

    let mut store2 = ParamStore::new(derive_seed(cfg.train.seed, &[2]));
    let model2 = Model::register(&mut store2, &cfg.model, InitStyle::Train)?;
    let init_from = cfg
        .train
        .stage1_init
        .as_ref()
        .map(PathBuf::from)
        .or(stage1_written.clone());
    if let Some(path) = &init_from {
        load_partial(path, &mut store2)?;
    }
    let final_path = out_dir.join("model.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let want_best = cfg.train.probe_sequences > 0;
    let mut ctx = StageCtx {
        cfg,
        data: &data,
        bank: &bank,
        csv: &mut csv,
        rows: &mut rows,
    };
    let best_map = run_stage(
        &mut ctx,
        2,
        &model2,
        &mut store2,
        cfg.train.stage2_epochs,
        cfg.train.lr_max / STAGE2_LR_DIVISOR,
        &final_path,
        want_best.then_some(best_path.as_path()),
    )?;
    csv.flush()
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(TrainReport {
        rows,
        stage1_checkpoint: stage1_written,
        final_checkpoint: final_path,
        best_checkpoint: best_map.map(|_| best_path),
        best_map: best_map.filter(|m| m.is_finite()),
    })
}
