//! SGD, the step schedule, the training loop and evaluation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_anchors, HeadTargets};
use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, ImageResult, Record, DEFAULT_IOU};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::mama::training_mask_label;
use crate::model::Detector;
use crate::nn::{Fwd, Mode};
use crate::postprocess::SoftNmsConfig;
use crate::synth::{crop_tiles, hflip, SceneSample};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "model.acnk";
pub const CONFIG_FILE: &str = "run.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// `v ← m·v + g + wd·w; w ← w − lr·v`, applied tensor by tensor.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Rejected("sgd_step: parameter, gradient and velocity counts differ".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Rejected(format!("sgd_step: learning rate must be positive, got {lr}")));
    }
    for (i, ((w, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::Rejected(format!("sgd_step: shape mismatch at parameter {i}")));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i} is not finite")));
        }
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`
/// (no-op when `max_norm` is 0). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// `base_lr / factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr / cfg.lr_decay_factor.powi((epoch / cfg.decay_every_epochs) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub att: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
    /// Test-set mAP at IoU 0.5 when a test split was supplied.
    pub map: Option<f64>,
}

/// Training targets for one sample at the model's anchor geometry.
pub fn sample_targets(det: &Detector, s: &SceneSample) -> Result<(HeadTargets, Tensor)> {
    let (h, w) = (s.height(), s.width());
    let acfg = &det.cfg.anchors;
    let anchors = det.anchors(h, w)?;
    let set = assign_anchors(&anchors, &s.boxes, acfg.pos_iou, acfg.neg_iou)?;
    let stride = det.cfg.feature_stride();
    let targets = set.head_targets(acfg.per_cell(), h / stride, w / stride)?;
    let mask = training_mask_label(&s.boxes, (h, w), stride)?;
    Ok((targets, mask))
}

pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Forward and backward on one batch; running statistics are updated in
/// `det.store`, parameters are not.
pub fn train_step(det: &mut Detector, batch: &[SceneSample]) -> Result<StepResult> {
    let images = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let (targets, masks): (Vec<_>, Vec<_>) = batch.iter().map(|s| sample_targets(det, s)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let targets = HeadTargets::stack(&targets)?;
    let masks = Tensor::stack(&masks)?;
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &det.store, Mode::Train);
    let x = fx.input(images);
    let out = det.forward(&mut fx, x)?;
    let params = fx.param_vars().to_vec();
    let updates = fx.take_bn_updates();
    let (total, loss) = total_loss(&mut tape, &out.head, &targets, out.saliency, Some(&masks))?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {}", loss.total)));
    }
    tape.backward(total)?;
    let grads = params
        .iter()
        .map(|&p| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
        .collect();
    det.store.apply_bn_updates(&updates);
    Ok(StepResult { loss, grads })
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join(CHECKPOINT_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.0.join(CONFIG_FILE)
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join(METRICS_FILE)
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Replaces every sample by its overlapping tiles; samples no larger than
/// a tile pass through.
pub fn tile_set(samples: &[SceneSample], tile: usize, overlap: usize) -> Result<Vec<SceneSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        out.extend(crop_tiles(s, tile, overlap)?);
    }
    Ok(out)
}

/// Trains a fresh model on the tiles of `train_set`. Per-epoch metrics and a checkpoint are written
/// after every epoch when `out` is given, so a failure leaves the last good
/// state on disk. Parameters are rounded to f32 before the final evaluation
/// and save, making the stored checkpoint reproduce it exactly.
pub fn train(cfg: &RunConfig, train_set: &[SceneSample], test_set: Option<&[SceneSample]>, out: Option<&RunDir>) -> Result<(Detector, RunMetrics)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Rejected("training set is empty".into()));
    }
    let tc = &cfg.train;
    let train_set = tile_set(train_set, cfg.data.tile, cfg.data.overlap)?;
    let mut det = Detector::new(cfg.model.clone(), tc.seed)?;
    let mut velocity: Vec<Tensor> = det.store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5EED_DA7A);
    let mut metrics = RunMetrics { config_hash: cfg.identity_hash(), epochs: Vec::new(), map: None };
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir.0).map_err(|e| Error::io(&dir.0, e))?;
        cfg.save(&dir.config())?;
        let m = dir.metrics();
        if m.exists() {
            std::fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        let mut grad_norm = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| if rng.gen_bool(tc.flip_prob) { hflip(&train_set[i]) } else { train_set[i].clone() })
                .collect();
            let mut step = train_step(&mut det, &batch)?;
            grad_norm += clip_global_norm(&mut step.grads, tc.max_grad_norm);
            sgd_step(det.store.values_mut(), &step.grads, &mut velocity, lr, tc.momentum, tc.weight_decay)?;
            sums.total += step.loss.total;
            sums.cls += step.loss.cls;
            sums.reg += step.loss.reg;
            sums.att += step.loss.att;
            batches += 1;
        }
        let k = batches as f64;
        let row = EpochMetrics { epoch, lr, loss: sums.total / k, cls: sums.cls / k, reg: sums.reg / k, att: sums.att / k, grad_norm: grad_norm / k };
        if let Some(dir) = out {
            append_line(&dir.metrics(), &row)?;
            checkpoint::save(&dir.checkpoint(), &det.store)?;
        }
        metrics.epochs.push(row);
    }
    det.store.round_to_f32();
    if let Some(test) = test_set {
        metrics.map = Some(evaluate(&det, test, &cfg.nms)?.map);
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.checkpoint(), &det.store)?;
        append_line(&dir.metrics(), &serde_json::json!({ "config_hash": metrics.config_hash, "map": metrics.map }))?;
    }
    Ok((det, metrics))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub map: f64,
    pub images: Vec<ImageResult>,
}

/// Images evaluated per forward pass.
const EVAL_BATCH: usize = 8;

pub fn evaluate(det: &Detector, data: &[SceneSample], nms: &SoftNmsConfig) -> Result<Evaluation> {
    let mut images = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        for (dets, s) in det.detect(&batch, nms)?.into_iter().zip(chunk) {
            images.push(ImageResult { dets, gts: s.boxes.clone() });
        }
    }
    Ok(Evaluation { map: mean_average_precision(&images, DEFAULT_IOU), images })
}

/// Detections and ground truth of an evaluation as interchange records,
/// with image ids `img_XXXXX` matching the dataset file stems.
pub fn evaluation_records(ev: &Evaluation) -> (Vec<Record>, Vec<Record>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, r) in ev.images.iter().enumerate() {
        let id = format!("img_{i:05}");
        dets.extend(r.dets.iter().map(|d| Record { image_id: id.clone(), bbox: d.bbox, score: Some(d.score) }));
        gts.extend(r.gts.iter().map(|&b| Record { image_id: id.clone(), bbox: b, score: None }));
    }
    (dets, gts)
}

/// Rebuilds per-image results from interchange records.
pub fn records_to_images(dets: &[Record], gts: &[Record]) -> Vec<ImageResult> {
    let mut ids: Vec<&str> = dets.iter().chain(gts).map(|r| r.image_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|id| ImageResult {
            dets: dets
                .iter()
                .filter(|r| r.image_id == *id)
                .map(|r| crate::boxes::Detection { bbox: r.bbox, score: r.score.unwrap_or(0.0) })
                .collect(),
            gts: gts.iter().filter(|r| r.image_id == *id).map(|r| r.bbox).collect(),
        })
        .collect()
}

/// Rebuilds a trained model from a run directory.
pub fn load_run(dir: &RunDir, config: Option<&Path>) -> Result<(RunConfig, Detector)> {
    let cfg = RunConfig::load(config.map_or_else(|| dir.config(), Path::to_path_buf).as_path())?;
    let mut det = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    checkpoint::load_into(&dir.checkpoint(), &mut det.store)?;
    Ok((cfg, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: f64) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), v)
    }

    #[test]
    fn vanilla_and_momentum_steps() {
        let mut w = vec![t(1.0)];
        let mut v = vec![t(0.0)];
        sgd_step(&mut w, &[t(0.5)], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((w[0].item() - 0.95).abs() < 1e-15);

        let mut w = vec![t(1.0)];
        let mut v = vec![t(0.0)];
        for _ in 0..2 {
            sgd_step(&mut w, &[t(0.5)], &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((w[0].item() - (1.0 - 0.1 * 0.5 * 2.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut w = vec![t(0.3)];
        let mut v = vec![t(0.0)];
        sgd_step(&mut w, &[t(0.0)], &mut v, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(w[0].item(), 0.3);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = vec![t(0.3)];
        let mut v = vec![t(0.0)];
        let e = sgd_step(&mut w, &[t(f64::NAN)], &mut v, 0.5, 0.9, 0.0).unwrap_err();
        assert_eq!(e.kind(), "non_finite");
        assert_eq!(w[0].item(), 0.3);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::full_scale();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(lr_at(9, &c), 1e-4);
        assert_eq!(lr_at(10, &c), 1e-5);
        assert_eq!(lr_at(20, &c), 1e-6);
        let flat = TrainConfig { decay_every_epochs: 100, ..TrainConfig::full_scale() };
        assert!((0..30).all(|e| lr_at(e, &flat) == 1e-4));
    }
}
