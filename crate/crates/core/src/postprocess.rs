//! Soft-NMS and conversion of head outputs into scored boxes.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::autograd::sigmoid;
use crate::boxes::{decode_clipped, iou, BBox, Detection};
use crate::error::{reject, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    Linear,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    /// Overlap above which the linear method decays a score.
    pub iou_thr: f64,
    pub sigma: f64,
    pub score_thr: f64,
    /// Detections kept per image after suppression.
    pub max_dets: usize,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig { method: SoftNmsMethod::Gaussian, iou_thr: 0.3, sigma: 0.5, score_thr: 0.001, max_dets: 100 }
    }
}

/// Iteratively selects the highest-scoring remaining detection (lowest
/// input index on ties) and decays the others by their overlap with it.
/// A detection is dropped once its decayed score falls below `score_thr`.
/// The result is sorted by final score, descending.
pub fn soft_nms(dets: &[Detection], cfg: &SoftNmsConfig) -> Vec<Detection> {
    let mut rest: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out: Vec<(usize, Detection)> = Vec::with_capacity(dets.len());
    while !rest.is_empty() {
        let mut best = 0;
        for (k, (i, d)) in rest.iter().enumerate() {
            let (bi, bd) = rest[best];
            if d.score > bd.score || (d.score == bd.score && *i < bi) {
                best = k;
            }
        }
        let picked = rest.swap_remove(best);
        rest.sort_by_key(|(i, _)| *i);
        for (_, d) in rest.iter_mut() {
            let o = iou(&picked.1.bbox, &d.bbox);
            d.score *= match cfg.method {
                SoftNmsMethod::Linear if o > cfg.iou_thr => 1.0 - o,
                SoftNmsMethod::Linear => 1.0,
                SoftNmsMethod::Gaussian => (-o * o / cfg.sigma).exp(),
            };
        }
        rest.retain(|(_, d)| d.score >= cfg.score_thr);
        out.push(picked);
    }
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, d)| d).collect()
}

/// Scores every anchor of one image (`objectness`: `1×A×h×w` logits,
/// `deltas`: `1×4A×h×w`), decodes and clips the boxes, drops degenerate ones
/// and applies Soft-NMS.
pub fn detections_from_head(
    objectness: &Tensor,
    deltas: &Tensor,
    anchors: &[BBox],
    acfg: &AnchorConfig,
    image: (usize, usize),
    nms: &SoftNmsConfig,
) -> Result<Vec<Detection>> {
    let s = objectness.shape();
    let a_n = acfg.per_cell();
    if s.n != 1 || s.c != a_n || deltas.shape() != s.with_c(4 * a_n) || anchors.len() != s.numel() {
        reject!("head outputs {s} / {} do not match {} anchors", deltas.shape(), anchors.len());
    }
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let mut dets = Vec::with_capacity(anchors.len());
    for (idx, anchor) in anchors.iter().enumerate() {
        let (cell, a) = (idx / a_n, idx % a_n);
        let (i, j) = (cell / s.w, cell % s.w);
        let d = [0, 1, 2, 3].map(|k| deltas.at(0, 4 * a + k, i, j));
        let bbox = decode_clipped(anchor, &d, iw, ih)?;
        if bbox.width() >= 1.0 && bbox.height() >= 1.0 {
            dets.push(Detection { bbox, score: sigmoid(objectness.at(0, a, i, j)) });
        }
    }
    let mut kept = soft_nms(&dets, nms);
    kept.truncate(nms.max_dets);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), score }
    }

    #[test]
    fn single_and_empty() {
        let cfg = SoftNmsConfig::default();
        assert!(soft_nms(&[], &cfg).is_empty());
        let d = det(0.0, 0.0, 5.0, 5.0, 0.7);
        assert_eq!(soft_nms(&[d], &cfg), vec![d]);
    }

    #[test]
    fn gaussian_identical_boxes() {
        let out = soft_nms(&[det(0.0, 0.0, 4.0, 4.0, 0.9), det(0.0, 0.0, 4.0, 4.0, 0.8)], &SoftNmsConfig::default());
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((out[1].score - 0.1083).abs() < 1e-4);
    }

    #[test]
    fn linear_below_threshold_passes_through() {
        let cfg = SoftNmsConfig { method: SoftNmsMethod::Linear, ..Default::default() };
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(8.0, 0.0, 18.0, 10.0, 0.6);
        assert_eq!(soft_nms(&[b, a], &cfg), vec![a, b]);
    }

    #[test]
    fn linear_decay_and_drop() {
        let cfg = SoftNmsConfig { method: SoftNmsMethod::Linear, score_thr: 0.05, ..Default::default() };
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(0.0, 0.0, 10.0, 5.0, 0.5);
        let out = soft_nms(&[a, b], &cfg);
        assert!((out[1].score - 0.25).abs() < 1e-15);
        let c = det(0.0, 0.0, 10.0, 9.9, 0.5);
        assert_eq!(soft_nms(&[a, c], &cfg).len(), 1);
    }

    #[test]
    fn equal_scores_prefer_lower_index() {
        let a = det(0.0, 0.0, 4.0, 4.0, 0.5);
        let b = det(1.0, 0.0, 5.0, 4.0, 0.5);
        let out = soft_nms(&[a, b], &SoftNmsConfig::default());
        assert_eq!(out[0], a);
    }
}
