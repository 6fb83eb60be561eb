//! Average precision at a single IoU threshold, pooled over images, plus the
//! plain-text detection interchange format.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{iou, BBox, Detection};
use crate::error::{Error, Result};

pub const DEFAULT_IOU: f64 = 0.5;

/// One image's predictions and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub dets: Vec<Detection>,
    pub gts: Vec<BBox>,
}

/// Evaluation order: score descending, then box coordinates, then image,
/// then input index. Using the coordinates makes the result independent of
/// how equal-score detections were ordered on input.
fn det_order(a: (usize, usize, &Detection), b: (usize, usize, &Detection)) -> Ordering {
    b.2.score
        .total_cmp(&a.2.score)
        .then_with(|| {
            a.2.bbox
                .coords()
                .iter()
                .zip(b.2.bbox.coords())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.0.cmp(&b.0))
        .then(a.1.cmp(&b.1))
}

/// `(image, index)` of every detection in evaluation order.
fn ordered(images: &[ImageResult]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        images.iter().enumerate().flat_map(|(m, r)| (0..r.dets.len()).map(move |i| (m, i))).collect();
    order.sort_by(|&(ma, ia), &(mb, ib)| det_order((ma, ia, &images[ma].dets[ia]), (mb, ib, &images[mb].dets[ib])));
    order
}

/// Greedy matching in the given order: each detection takes the unmatched GT
/// of its image with the highest IoU ≥ `thr` (lowest index on ties).
fn greedy_tp(images: &[ImageResult], order: &[(usize, usize)], thr: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = images.iter().map(|r| vec![false; r.gts.len()]).collect();
    order
        .iter()
        .map(|&(m, i)| {
            let d = &images[m].dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in images[m].gts.iter().enumerate() {
                let o = iou(&d.bbox, gt);
                if !taken[m][g] && o >= thr && best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[m][g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// All-point interpolated area under `(recall, precision)` points given in
/// increasing-recall order.
fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * envelope;
        prev_recall = r;
    }
    ap
}

/// Single-class AP pooled over all images. Precision/recall points are taken
/// at each distinct score. With no GT anywhere, AP is 1 if there are also no
/// detections and 0 otherwise.
pub fn mean_average_precision(images: &[ImageResult], thr: f64) -> f64 {
    let n_gt: usize = images.iter().map(|r| r.gts.len()).sum();
    let n_det: usize = images.iter().map(|r| r.dets.len()).sum();
    if n_gt == 0 {
        return if n_det == 0 { 1.0 } else { 0.0 };
    }
    let order = ordered(images);
    let tp = greedy_tp(images, &order, thr);
    let mut points = Vec::new();
    let mut hits = 0usize;
    for k in 0..order.len() {
        hits += usize::from(tp[k]);
        let score = |k: usize| images[order[k].0].dets[order[k].1].score;
        if k + 1 == order.len() || score(k + 1) != score(k) {
            points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
        }
    }
    interpolated_area(&points)
}

pub fn average_precision(dets: &[Detection], gts: &[BBox], thr: f64) -> f64 {
    mean_average_precision(&[ImageResult { dets: dets.to_vec(), gts: gts.to_vec() }], thr)
}

/// Brute-force reference: for every distinct score threshold, rebuilds the
/// kept set from scratch, re-runs matching on it and counts TP directly;
/// then integrates the precision envelope over recall.
pub fn oracle_map(images: &[ImageResult], thr: f64) -> f64 {
    let n_gt: usize = images.iter().map(|r| r.gts.len()).sum();
    let all: Vec<f64> = images.iter().flat_map(|r| r.dets.iter().map(|d| d.score)).collect();
    if n_gt == 0 {
        return if all.is_empty() { 1.0 } else { 0.0 };
    }
    let mut thresholds = all.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = Vec::new();
    for &t in &thresholds {
        let kept: Vec<ImageResult> = images
            .iter()
            .map(|r| ImageResult { dets: r.dets.iter().filter(|d| d.score >= t).copied().collect(), gts: r.gts.clone() })
            .collect();
        let order = ordered(&kept);
        let tp = greedy_tp(&kept, &order, thr).into_iter().filter(|&b| b).count();
        curve.push((tp as f64 / n_gt as f64, tp as f64 / order.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &curve {
        let best = curve.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// One line per record: `image_id x1 y1 x2 y2 [score]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image_id: String,
    pub bbox: BBox,
    pub score: Option<f64>,
}

pub fn format_records(records: &[Record]) -> String {
    let mut s = String::new();
    for r in records {
        let b = r.bbox;
        let _ = write!(s, "{} {} {} {} {}", r.image_id, b.x1, b.y1, b.x2, b.y2);
        if let Some(sc) = r.score {
            let _ = write!(s, " {sc}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected `image_id x1 y1 x2 y2 [score]`", ln + 1));
        if !(5..=6).contains(&fields.len()) {
            return Err(bad());
        }
        let nums = fields[1..].iter().map(|f| f.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(bad());
        }
        out.push(Record {
            image_id: fields[0].to_string(),
            bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
            score: nums.get(4).copied(),
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, format_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    parse_records(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn degenerate_cases() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[det(g, 0.5)], &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[g], 0.5), 0.0);
        assert_eq!(average_precision(&[det(g, 1.0)], &[g], 0.5), 1.0);
    }

    #[test]
    fn hand_worked_curve() {
        // TP (0.9), FP (0.8), TP (0.7) against two GTs:
        // points (0.5, 1), (0.5, 0.5), (1, 2/3) → AP = 0.5·1 + 0.5·2/3.
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(20.0, 20.0, 30.0, 30.0);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let dets = [det(g1, 0.9), det(far, 0.8), det(g2, 0.7)];
        let ap = average_precision(&dets, &[g1, g2], 0.5);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let ap = average_precision(&[det(g, 0.9), det(g, 0.8)], &[g], 0.5);
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[det(BBox::new(50.0, 50.0, 60.0, 60.0), 0.9), det(g, 0.8)], &[g], 0.5);
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            Record { image_id: "img_0".into(), bbox: BBox::new(1.5, 2.0, 3.25, 4.0), score: Some(0.125) },
            Record { image_id: "img_1".into(), bbox: BBox::new(0.0, 0.0, 1.0, 1.0), score: None },
        ];
        assert_eq!(parse_records(&format_records(&recs)).unwrap(), recs);
        assert!(parse_records("a 1 2 3").is_err());
        assert!(parse_records("a 1 2 3 x").is_err());
    }
}
