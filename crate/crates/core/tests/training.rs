mod common;

use common::fixtures::{toy_config, toy_data};
use common::tiny_model;
use densedet::config::{ablation_row, ablation_rows, RunConfig, TrainConfig};
use densedet::eval::{mean_average_precision, read_records, write_records, DEFAULT_IOU};
use densedet::model::{Blocks, Detector};
use densedet::synth::generate_split;
use densedet::train::{evaluate, evaluation_records, load_run, lr_at, records_to_images, train, RunDir};

#[test]
fn full_scale_schedule_is_exact() {
    let tc = TrainConfig::full_scale();
    assert_eq!(lr_at(0, &tc), 1e-4);
    assert_eq!(lr_at(9, &tc), 1e-4);
    assert_eq!(lr_at(10, &tc), 1e-5);
    assert_eq!(lr_at(20, &tc), 1e-6);
    assert_eq!(lr_at(29, &tc), 1e-6);
}

#[test]
fn one_epoch_smoke_run_writes_artifacts() {
    let cfg = toy_config(Blocks::ALL, 1, 1);
    let data = toy_data(&cfg, 4);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir(dir.path().join("run"));
    let (_, m) = train(&cfg, &data, Some(&data), Some(&run)).unwrap();
    assert_eq!(m.epochs.len(), 1);
    let e = &m.epochs[0];
    for v in [e.loss, e.cls, e.reg, e.att] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert!((e.loss - (e.cls + e.reg + e.att)).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&m.map.unwrap()));
    assert!(run.checkpoint().exists() && run.config().exists());
    let lines: Vec<String> = std::fs::read_to_string(run.metrics()).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].contains(&cfg.identity_hash()));
    assert_eq!(RunConfig::load(&run.config()).unwrap(), cfg);
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = toy_config(Blocks::ALL, 2, 2);
    let data = toy_data(&cfg, 6);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| {
            let run = RunDir(d.path().to_path_buf());
            let (_, m) = train(&cfg, &data, Some(&data), Some(&run)).unwrap();
            (m, std::fs::read(run.checkpoint()).unwrap(), std::fs::read(run.metrics()).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let other = toy_config(Blocks::ALL, 3, 2);
    let (_, m) = train(&other, &data, None, None).unwrap();
    assert_ne!(m.epochs, runs[0].0.epochs);
}

#[test]
fn checkpoint_and_records_reproduce_map() {
    let cfg = toy_config(Blocks::ALL, 4, 3);
    let data = toy_data(&cfg, 8);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir(dir.path().to_path_buf());
    let (det, m) = train(&cfg, &data, Some(&data), Some(&run)).unwrap();

    let (_, restored) = load_run(&run, None).unwrap();
    assert_eq!(restored.store.values(), det.store.values());
    assert_eq!(restored.store.buffers(), det.store.buffers());
    let ev = evaluate(&restored, &data, &cfg.nms).unwrap();
    assert_eq!(ev.map, m.map.unwrap());

    let (dets, gts) = evaluation_records(&ev);
    write_records(&dir.path().join("dets.txt"), &dets).unwrap();
    write_records(&dir.path().join("gts.txt"), &gts).unwrap();
    let back = records_to_images(
        &read_records(&dir.path().join("dets.txt")).unwrap(),
        &read_records(&dir.path().join("gts.txt")).unwrap(),
    );
    assert_eq!(mean_average_precision(&back, DEFAULT_IOU), ev.map);
}

#[test]
fn every_block_flag_adds_parameters() {
    let count = |b: Blocks| Detector::new(tiny_model(b), 0).unwrap().store.num_scalars();
    let base = count(Blocks::NONE);
    let composite = count(Blocks { composite: true, ..Blocks::NONE });
    let refine = count(Blocks { composite: true, refine: true, ..Blocks::NONE });
    assert!(composite > base);
    assert_ne!(refine, composite);
    assert!(count(Blocks { dce: true, ..Blocks::NONE }) > base);
    assert!(count(Blocks { mama: true, ..Blocks::NONE }) > base);
    // The assistant stream mirrors the lead.
    let lead: usize = Detector::new(tiny_model(Blocks::NONE), 0)
        .unwrap()
        .store
        .names()
        .iter()
        .zip(Detector::new(tiny_model(Blocks::NONE), 0).unwrap().store.values())
        .filter(|(n, _)| n.starts_with("lead."))
        .map(|(_, t)| t.len())
        .sum();
    assert!(composite >= base + lead);
    for (name, blocks) in ablation_rows() {
        assert_eq!(ablation_row(name).unwrap(), blocks);
        Detector::new(tiny_model(blocks), 0).unwrap();
    }
}

#[test]
fn loss_descends_for_several_seeds() {
    for seed in 0..3 {
        let cfg = toy_config(Blocks::ALL, seed, 6);
        let data = toy_data(&cfg, 8);
        let (_, m) = train(&cfg, &data, None, None).unwrap();
        let (first, last) = (m.epochs[0].loss, m.epochs.last().unwrap().loss);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn untrained_model_scores_near_zero() {
    let cfg = RunConfig::default();
    let det = Detector::new(cfg.model.clone(), 0).unwrap();
    let data = generate_split(&cfg.data.synth, 1, 16).unwrap();
    let map = evaluate(&det, &data, &cfg.nms).unwrap().map;
    assert!(map < 0.1, "untrained mAP {map}");
}

#[test]
fn toy_training_fits_its_training_set() {
    let cfg = toy_config(Blocks::ALL, 5, 150);
    let data = toy_data(&cfg, 12);
    let (det, _) = train(&cfg, &data, None, None).unwrap();
    let map = evaluate(&det, &data, &cfg.nms).unwrap().map;
    println!("toy training-set mAP {map:.4}");
    assert!(map > 0.5, "training-set mAP {map}");
}

#[test]
fn bad_configs_are_rejected() {
    let mut cfg = toy_config(Blocks::ALL, 0, 1);
    cfg.data.overlap = 16;
    assert_eq!(train(&cfg, &toy_data(&toy_config(Blocks::ALL, 0, 1), 2), None, None).unwrap_err().kind(), "config");
    let cfg = toy_config(Blocks::ALL, 0, 1);
    assert_eq!(train(&cfg, &[], None, None).unwrap_err().kind(), "rejected_input");
}
