//! Temporary sizing probe for the benchmark (deleted before release).

use mgta::checkpoint::load_checkpoint;
use mgta::config::RunConfig;
use mgta::detect::{evaluate_ap, evaluate_ap_subset, AP_THRESHOLDS};
use mgta::harness::cmd_gen;
use mgta::model::{Aggregator, InitStyle, Model, ModelConfig};
use mgta::points::SceneSpec;
use mgta::stfa::StfaConfig;
use mgta::tensor::params::ParamStore;
use mgta::train::{eval_samples, load_dataset, train};
use mgta::voxel::{GridConfig, VoxelWidths};
use std::path::Path;
use std::time::Instant;
use tempfile::TempDir;

fn model_cfg(frames: usize, use_motion: bool, aggregator: Aggregator) -> ModelConfig {
    ModelConfig {
        grid: GridConfig {
            range_min: [-12.8, -12.8, -3.0],
            range_max: [12.8, 12.8, 3.0],
            voxel_size: [0.8, 0.8, 6.0],
            max_points_per_voxel_scan: 16,
            max_voxels: 1024,
        },
        widths: VoxelWidths { c_q: 8, c_m: 16, c_b: 16 },
        n_scans: 10,
        frames,
        channels: 16,
        use_motion,
        occupancy: false,
        aggregator,
        stfa: StfaConfig {
            frames,
            heads: 2,
            points: 4,
            layers: 1,
            channels: 16,
            ffn_hidden: 32,
            dropout: 0.0,
            joint_softmax: false,
            ffn_residual: true,
        },
        head_hidden: 16,
        num_classes: 2,
    }
}

fn run_cfg(root: &Path, mcfg: ModelConfig, name: &str, stage1_init: Option<String>) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = mcfg;
    cfg.scene = SceneSpec {
        frames: 3,
        scans_per_frame: 10,
        half_range: 11.0,
        vehicles: [3, 6],
        pedestrians: [3, 6],
        vehicle_speed: [4.0, 8.0],
        moving_vehicle_fraction: 0.9,
        pedestrian_speed: [1.5, 2.5],
        occluded_fraction: 0.4,
        ..SceneSpec::default()
    };
    cfg.seed = 20240601;
    cfg.gen.count = 60;
    cfg.gen.out_dir = root.join("train_data").display().to_string();
    cfg.train.data_dir = cfg.gen.out_dir.clone();
    cfg.train.out_dir = root.join(name).display().to_string();
    cfg.train.stage1_epochs = 4;
    cfg.train.stage2_epochs = 18;
    cfg.train.lr_max = 5e-3;
    cfg.train.seed = 99;
    cfg.train.augment = false;
    cfg.train.stage1_init = stage1_init;
    cfg
}

fn eval_map_of(
    root: &Path,
    name: &str,
    mcfg: &ModelConfig,
    test: &[(mgta::points::Sequence, Vec<Vec<mgta::points::GtBox>>)],
) -> (f64, f64) {
    let mut store = ParamStore::new(0);
    let model = Model::register(&mut store, mcfg, InitStyle::Train).unwrap();
    load_checkpoint(&root.join(name).join("model.ckpt"), &mut store).unwrap();
    let samples = eval_samples(&model, &store, test, 4242, &Default::default()).unwrap();
    let all = evaluate_ap(&samples, mcfg.num_classes, &AP_THRESHOLDS);
    let occ = evaluate_ap_subset(&samples, mcfg.num_classes, &AP_THRESHOLDS, &|b| b.occluded);
    let detail: Vec<String> = all
        .per_class
        .iter()
        .flatten()
        .map(|c| format!("{:.1}", c.unwrap_or(f64::NAN) * 100.0))
        .collect();
    eprintln!("  {name} AP[thr x cls]: [{}]", detail.join(", "));
    (
        all.map.unwrap_or(f64::NAN) * 100.0,
        occ.map.unwrap_or(f64::NAN) * 100.0,
    )
}

#[test]
fn probe_ladder() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let t_all = Instant::now();

    // Datasets.
    let base = run_cfg(root, model_cfg(1, false, Aggregator::None), "x", None);
    cmd_gen(&base, None, None).unwrap();
    let mut test_gen = base.clone();
    test_gen.gen.count = 20;
    test_gen.gen.out_dir = root.join("test_data").display().to_string();
    cmd_gen(&test_gen, Some(777), Some(&root.join("test_data"))).unwrap();
    let test = load_dataset(&root.join("test_data")).unwrap();
    eprintln!("gen done {:.1}s", t_all.elapsed().as_secs_f64());

    // Stage-1 pretrains (single-frame), motion off/on.
    for (name, motion) in [("pre_plain", false), ("pre_motion", true)] {
        let mut cfg = run_cfg(root, model_cfg(1, motion, Aggregator::None), name, None);
        cfg.train.stage2_epochs = 0;
        let t = Instant::now();
        train(&cfg).unwrap();
        eprintln!("{name}: {:.1}s", t.elapsed().as_secs_f64());
    }
    let pre_plain = root.join("pre_plain/stage1.ckpt").display().to_string();
    let pre_motion = root.join("pre_motion/stage1.ckpt").display().to_string();

    // Ladder runs (stage 2 only, seeded from the pretrains).
    let runs: Vec<(&str, ModelConfig, String)> = vec![
        ("baseline", model_cfg(1, false, Aggregator::None), pre_plain.clone()),
        ("smvfe", model_cfg(1, true, Aggregator::None), pre_motion.clone()),
        ("stfa", model_cfg(3, true, Aggregator::Stfa { use_mgda: false }), pre_motion.clone()),
        ("full", model_cfg(3, true, Aggregator::Stfa { use_mgda: true }), pre_motion.clone()),
        ("concat", model_cfg(3, true, Aggregator::Concat), pre_motion.clone()),
    ];
    for (name, mcfg, init) in &runs {
        let cfg = run_cfg(root, mcfg.clone(), name, Some(init.clone()));
        let t = Instant::now();
        train(&cfg).unwrap();
        let (map, occ) = eval_map_of(root, name, mcfg, &test);
        eprintln!(
            "{name}: train {:.1}s, mAP {map:.2}, occluded {occ:.2}",
            t.elapsed().as_secs_f64()
        );
    }
    eprintln!("total {:.1}s", t_all.elapsed().as_secs_f64());
}
