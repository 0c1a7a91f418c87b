//! Entry points behind the `mgta` binary: dataset generation, two-stage
//! training, evaluation, and diagnostic dumps. Every command takes a parsed
//! [`RunConfig`] plus the optional `--seed` / `--out` overrides and leaves
//! deterministic artifacts on disk.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::detect::{evaluate_ap, DetectionRecord, AP_THRESHOLDS};
use crate::error::{Error, Result};
use crate::model::{Aggregator, InitStyle, Model};
use crate::points::{generate_scene, load_sequence, save_sequence};
use crate::tensor::params::{Init, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{
    eval_samples, load_dataset, train, write_dataset_index, DatasetIndex,
};
use crate::util::derive_seed;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Generates `gen.count` sequences under the output directory as
/// `seq_000`, `seq_001`, ... plus a top-level `dataset.json` index. A count
/// of zero still writes the (empty) index. Bit-identical for equal seeds.
pub fn cmd_gen(cfg: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seed = seed.unwrap_or(cfg.seed);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.gen.out_dir));
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let mut names = Vec::with_capacity(cfg.gen.count);
    for i in 0..cfg.gen.count {
        let (seq, gt) = generate_scene(&cfg.scene, derive_seed(seed, &[i as u64]))?;
        let name = format!("seq_{i:03}");
        save_sequence(&out_dir.join(&name), &seq, &gt)?;
        names.push(name);
    }
    write_dataset_index(&out_dir, &DatasetIndex { seed, sequences: names })?;
    println!(
        "generated {} sequence(s) in {}",
        cfg.gen.count,
        out_dir.display()
    );
    Ok(())
}

/// Runs the two-stage trainer; see [`crate::train::train`] for artifacts.
pub fn cmd_train(cfg: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.train.out_dir = o.display().to_string();
    }
    let report = train(&cfg)?;
    println!(
        "trained {} step(s); final checkpoint {}",
        report.rows.len(),
        report.final_checkpoint.display()
    );
    if let (Some(best), Some(m)) = (&report.best_checkpoint, report.best_map) {
        println!("best probe mAP {m:.4} at {}", best.display());
    }
    Ok(())
}

/// Evaluation artifacts: `metrics.json` is bit-stable across identical runs;
/// wall-clock latency goes to the `timing.json` sidecar so it never perturbs
/// the metrics bytes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    /// Mean AP over classes and match thresholds; `null` without ground truth
    /// (in particular on an empty dataset).
    pub map: Option<f64>,
    /// `per_class[threshold_index][class]`.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub thresholds: Vec<f64>,
    pub num_sequences: usize,
    /// True when the dataset had no sequences at all.
    pub empty: bool,
}

/// Timing sidecar written next to `metrics.json`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub mean_seconds_per_sequence: Option<f64>,
    pub num_sequences: usize,
}

/// Restores a model from a checkpoint and scores it on a dataset, writing
/// `metrics.json`, `timing.json`, and per-box `detections.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<Metrics> {
    let seed = seed.unwrap_or(cfg.eval.seed);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.eval.out_dir));
    let data = load_dataset(Path::new(&cfg.eval.data_dir))?;
    let mut store = ParamStore::new(0);
    let model = Model::register(&mut store, &cfg.model, InitStyle::Train)?;
    load_checkpoint(Path::new(&cfg.eval.checkpoint), &mut store)?;

    let start = Instant::now();
    let samples = eval_samples(&model, &store, &data, seed, &Default::default())?;
    let elapsed = start.elapsed().as_secs_f64();

    let report = evaluate_ap(&samples, cfg.model.num_classes, &AP_THRESHOLDS);
    let metrics = Metrics {
        map: report.map,
        per_class: report.per_class,
        thresholds: report.thresholds,
        num_sequences: data.len(),
        empty: data.is_empty(),
    };
    let timing = Timing {
        total_seconds: elapsed,
        mean_seconds_per_sequence: (!data.is_empty()).then(|| elapsed / data.len() as f64),
        num_sequences: data.len(),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let mpath = out_dir.join("metrics.json");
    let mtext = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::data(format!("metrics: {e}")))?;
    std::fs::write(&mpath, mtext).map_err(|e| io_err(&mpath, e))?;
    let tpath = out_dir.join("timing.json");
    let ttext =
        serde_json::to_string_pretty(&timing).map_err(|e| Error::data(format!("timing: {e}")))?;
    std::fs::write(&tpath, ttext).map_err(|e| io_err(&tpath, e))?;
    let dpath = out_dir.join("detections.jsonl");
    let mut lines = String::new();
    for (scene, sample) in samples.iter().enumerate() {
        let keyframe = data[scene].0.frames.len().saturating_sub(1);
        for det in &sample.dets {
            let rec = DetectionRecord::new(scene, keyframe, det);
            lines.push_str(
                &serde_json::to_string(&rec).map_err(|e| Error::data(format!("detections: {e}")))?,
            );
            lines.push('\n');
        }
    }
    std::fs::write(&dpath, lines).map_err(|e| io_err(&dpath, e))?;

    match metrics.map {
        Some(m) => println!("mAP {m:.4} over {} sequence(s)", data.len()),
        None => println!("mAP undefined ({} sequence(s))", data.len()),
    }
    for (ti, thr) in metrics.thresholds.iter().enumerate() {
        for (c, ap) in metrics.per_class[ti].iter().enumerate() {
            match ap {
                Some(v) => println!("AP class {c} @ {thr} m: {v:.4}"),
                None => println!("AP class {c} @ {thr} m: n/a (no ground truth)"),
            }
        }
    }
    println!("latency {:.3} s total", timing.total_seconds);
    Ok(metrics)
}

/// Valid `inspect` selectors.
pub const SELECTORS: [&str; 5] = ["bev", "motion", "offsets", "attention", "heatmap"];

/// Writes one tensor as a binary dump (single-entry checkpoint container,
/// reloadable bit for bit) and a grayscale preview image.
fn dump_pair(dir: &Path, stem: &str, t: &Tensor) -> Result<()> {
    let bin = dir.join(format!("{stem}.bin"));
    let mut one = ParamStore::new(0);
    one.register(stem, t.shape(), Init::Value(t.clone()))?;
    save_checkpoint(&bin, &one)?;
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "preview of '{stem}' expects [C, H, W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut mean = vec![0.0; h * w];
    for ch in 0..c {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += t.data()[ch * h * w + i];
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    write_pgm(&dir.join(format!("{stem}.pgm")), h, w, &mean)
}

/// Binary P5 image; the value range maps to 0..255 and a constant map (for
/// example from zero-initialized weights) renders mid-gray.
pub fn write_pgm(path: &Path, h: usize, w: usize, vals: &[f64]) -> Result<()> {
    if vals.len() != h * w {
        return Err(Error::shape(format!(
            "image {}x{} needs {} values, got {}",
            h,
            w,
            h * w,
            vals.len()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in vals {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value in image {}",
                path.display()
            )));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in vals {
        let g = if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        };
        buf.push(g);
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Runs one sequence through a restored model and dumps the tensor the
/// selector names: aggregated BEV features, per-lag motion features or
/// sampling offsets, per-(layer, lag, head) attention maps, or the class
/// heatmap. Each dump is a `.bin` tensor plus a `.pgm` preview.
pub fn cmd_inspect(cfg: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let sel = cfg.inspect.selector.as_str();
    if !SELECTORS.contains(&sel) {
        return Err(Error::config(format!(
            "unknown selector '{sel}'; expected one of {}",
            SELECTORS.join(", ")
        )));
    }
    let seed = seed.unwrap_or(cfg.inspect.seed);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.inspect.out_dir));
    let (seq, _gt) = load_sequence(Path::new(&cfg.inspect.sequence))?;
    let mut store = ParamStore::new(0);
    let model = Model::register(&mut store, &cfg.model, InitStyle::Train)?;
    load_checkpoint(Path::new(&cfg.inspect.checkpoint), &mut store)?;

    let mut tape = Tape::new();
    if sel == "attention" {
        if !matches!(cfg.model.aggregator, Aggregator::Stfa { .. }) {
            return Err(Error::config(
                "selector 'attention' needs the attention aggregator",
            ));
        }
        tape.enable_attn_trace();
    }
    let output = model.forward(&mut tape, &store, &seq, seed)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let mut written = Vec::new();
    let dump = |dir: &Path, stem: &str, t: &Tensor, written: &mut Vec<PathBuf>| -> Result<()> {
        dump_pair(dir, stem, t)?;
        written.push(dir.join(format!("{stem}.bin")));
        written.push(dir.join(format!("{stem}.pgm")));
        Ok(())
    };
    match sel {
        "bev" => dump(&out_dir, "bev", tape.value(output.f_hat), &mut written)?,
        "heatmap" => dump(
            &out_dir,
            "heatmap",
            tape.value(output.head.heatmap),
            &mut written,
        )?,
        "motion" | "offsets" => {
            let ids = if sel == "motion" {
                &output.motion
            } else {
                &output.offsets
            };
            if ids.is_empty() {
                return Err(Error::config(format!(
                    "selector '{sel}' needs the motion-guided alignment stage"
                )));
            }
            for (lag, &id) in ids.iter().enumerate() {
                dump(
                    &out_dir,
                    &format!("{sel}_lag{}", lag + 1),
                    tape.value(id),
                    &mut written,
                )?;
            }
        }
        "attention" => {
            let records = tape.attn_trace().to_vec();
            if records.is_empty() {
                return Err(Error::config(
                    "the forward pass produced no attention records",
                ));
            }
            for r in &records {
                let stem = format!("attention_{}_lag{}_h{}", r.label, r.lag, r.head);
                dump(&out_dir, &stem, &r.weights, &mut written)?;
            }
        }
        _ => unreachable!("selector validated above"),
    }
    println!(
        "wrote {} file(s) for selector '{sel}' in {}",
        written.len(),
        out_dir.display()
    );
    Ok(written)
}
