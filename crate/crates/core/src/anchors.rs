//! Anchor generation, IoU-based assignment and head-layout training targets.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode_box, iou, BBox};
use crate::error::{reject, Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub stride: usize,
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
    pub base_size: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl AnchorConfig {
    /// Stride 8, ratios {0.5, 1, 2}, scales 2⁻³…2⁰ of a 256-pixel base.
    pub fn full_scale() -> Self {
        AnchorConfig {
            stride: 8,
            ratios: vec![0.5, 1.0, 2.0],
            scales: vec![0.125, 0.25, 0.5, 1.0],
            base_size: 256.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }

    pub fn per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stride > 0
            && self.per_cell() > 0
            && self.ratios.iter().chain(&self.scales).all(|v| v.is_finite() && *v > 0.0)
            && self.base_size.is_finite()
            && self.base_size > 0.0
            && 0.0 <= self.neg_iou
            && self.neg_iou <= self.pos_iou
            && self.pos_iou <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid anchor configuration {self:?}")));
        }
        Ok(())
    }

    pub fn generate(&self, height: usize, width: usize) -> Result<Vec<BBox>> {
        generate_anchors((height, width), self.stride, &self.ratios, &self.scales, self.base_size)
    }
}

impl Default for AnchorConfig {
    /// Full-scale geometry with a 32-pixel base so the largest anchor matches
    /// the 64-pixel training tiles.
    fn default() -> Self {
        AnchorConfig { base_size: 32.0, ..AnchorConfig::full_scale() }
    }
}

/// Anchors in head order: index `(i·w + j)·A + a` with `a = r·|scales| + s`.
pub fn generate_anchors(image: (usize, usize), stride: usize, ratios: &[f64], scales: &[f64], base: f64) -> Result<Vec<BBox>> {
    let (h, w) = image;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        reject!("image {h}×{w} is not divisible by anchor stride {stride}");
    }
    let shapes: Vec<(f64, f64)> = ratios
        .iter()
        .flat_map(|&r| scales.iter().map(move |&s| (base * s * r.sqrt(), base * s / r.sqrt())))
        .collect();
    let (gh, gw) = (h / stride, w / stride);
    let mut out = Vec::with_capacity(gh * gw * shapes.len());
    for i in 0..gh {
        for j in 0..gw {
            let (cx, cy) = ((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64);
            out.extend(shapes.iter().map(|&(aw, ah)| BBox::from_center(cx, cy, aw, ah)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub labels: Vec<Label>,
    /// Index of the GT each positive anchor regresses to.
    pub matched: Vec<Option<usize>>,
    /// Encoded targets; zero for non-positives.
    pub reg_targets: Vec<[f64; 4]>,
    pub n_cls: usize,
    pub n_reg: usize,
}

/// Positive when IoU ≥ `pos_thr` with some GT (matched to the best, lowest
/// index on ties) or when the anchor attains a GT's maximum IoU (> 0; a later
/// GT overrides an earlier match); negative when its best IoU < `neg_thr`;
/// ignored otherwise.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<AnchorSet> {
    if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
        reject!("thresholds must satisfy 0 ≤ neg ({neg_thr}) ≤ pos ({pos_thr}) ≤ 1");
    }
    let n = anchors.len();
    let table: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    for (a, row) in table.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in row.iter().enumerate() {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let best_iou = best.map_or(0.0, |b| b.1);
        if best_iou >= pos_thr && !gts.is_empty() {
            labels[a] = Label::Positive;
            matched[a] = best.map(|b| b.0);
        } else if best_iou >= neg_thr {
            labels[a] = Label::Ignore;
        }
    }
    for g in 0..gts.len() {
        let top = table.iter().map(|row| row[g]).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for a in 0..n {
            if table[a][g] == top {
                labels[a] = Label::Positive;
                matched[a] = Some(g);
            }
        }
    }
    let mut reg_targets = vec![[0.0; 4]; n];
    for a in 0..n {
        if let Some(g) = matched[a] {
            reg_targets[a] = encode_box(&anchors[a], &gts[g])?;
        }
    }
    let n_reg = labels.iter().filter(|&&l| l == Label::Positive).count();
    let n_cls = labels.iter().filter(|&&l| l != Label::Ignore).count();
    Ok(AnchorSet { anchors: anchors.to_vec(), labels, matched, reg_targets, n_cls, n_reg })
}

/// Assignment laid out like the head's outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    /// `N×A×h×w`: 1 for positives.
    pub cls_target: Tensor,
    /// `N×A×h×w`: 1 for scored (non-ignored) anchors.
    pub cls_weight: Tensor,
    /// `N×4A×h×w`.
    pub reg_target: Tensor,
    /// `N×4A×h×w`: 1 on the four channels of positives.
    pub reg_weight: Tensor,
    pub n_cls: usize,
    pub n_reg: usize,
}

impl AnchorSet {
    pub fn head_targets(&self, per_cell: usize, h: usize, w: usize) -> Result<HeadTargets> {
        if self.anchors.len() != per_cell * h * w {
            reject!("{} anchors do not fit a {h}×{w} grid with {per_cell} per cell", self.anchors.len());
        }
        let a_n = per_cell;
        let mut cls_target = Tensor::zeros(Shape::new(1, a_n, h, w));
        let mut cls_weight = cls_target.clone();
        let mut reg_target = Tensor::zeros(Shape::new(1, 4 * a_n, h, w));
        let mut reg_weight = reg_target.clone();
        for (idx, label) in self.labels.iter().enumerate() {
            let (cell, a) = (idx / a_n, idx % a_n);
            let (i, j) = (cell / w, cell % w);
            if *label != Label::Ignore {
                cls_weight.set(0, a, i, j, 1.0);
            }
            if *label == Label::Positive {
                cls_target.set(0, a, i, j, 1.0);
                for (k, v) in self.reg_targets[idx].iter().enumerate() {
                    reg_target.set(0, 4 * a + k, i, j, *v);
                    reg_weight.set(0, 4 * a + k, i, j, 1.0);
                }
            }
        }
        Ok(HeadTargets { cls_target, cls_weight, reg_target, reg_weight, n_cls: self.n_cls, n_reg: self.n_reg })
    }
}

impl HeadTargets {
    /// Concatenates per-image targets along the batch axis; counts add up.
    pub fn stack(items: &[HeadTargets]) -> Result<HeadTargets> {
        let col = |f: fn(&HeadTargets) -> &Tensor| Tensor::stack(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
        Ok(HeadTargets {
            cls_target: col(|t| &t.cls_target)?,
            cls_weight: col(|t| &t.cls_weight)?,
            reg_target: col(|t| &t.reg_target)?,
            reg_weight: col(|t| &t.reg_weight)?,
            n_cls: items.iter().map(|t| t.n_cls).sum(),
            n_reg: items.iter().map(|t| t.n_reg).sum(),
        })
    }
}
