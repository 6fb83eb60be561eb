//! Brute-force references shared by the module tests and the acceptance run.

use densedet::anchors::Label;
use densedet::boxes::{iou, BBox, Detection};
use densedet::eval::ImageResult;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Independent assignment straight from the IoU table.
pub fn brute_force_assignment(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> (Vec<Label>, Vec<Option<usize>>) {
    let table: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let col_max: Vec<f64> = (0..gts.len()).map(|g| table.iter().map(|r| r[g]).fold(0.0, f64::max)).collect();
    let mut labels = Vec::new();
    let mut matched = Vec::new();
    for row in &table {
        let forced = (0..gts.len()).rev().find(|&g| col_max[g] > 0.0 && row[g] == col_max[g]);
        let best = row.iter().copied().fold(0.0, f64::max);
        let argmax = row.iter().position(|&v| v == best);
        if let Some(g) = forced {
            labels.push(Label::Positive);
            matched.push(Some(g));
        } else if !gts.is_empty() && best >= pos {
            labels.push(Label::Positive);
            matched.push(argmax);
        } else if best < neg {
            labels.push(Label::Negative);
            matched.push(None);
        } else {
            labels.push(Label::Ignore);
            matched.push(None);
        }
    }
    (labels, matched)
}

/// Small integer box on a 10×10 grid.
pub fn unit_grid_box(r: &mut impl Rng) -> BBox {
    let x1 = r.gen_range(0..6) as f64;
    let y1 = r.gen_range(0..6) as f64;
    BBox::new(x1, y1, x1 + r.gen_range(1..5) as f64, y1 + r.gen_range(1..5) as f64)
}

pub fn grid_box(r: &mut ChaCha8Rng, span: i32) -> BBox {
    let x = r.gen_range(0..span) as f64;
    let y = r.gen_range(0..span) as f64;
    BBox::new(x, y, x + r.gen_range(2..8) as f64, y + r.gen_range(2..8) as f64)
}

/// Scores drawn from a small set so ties are common.
pub fn random_images(r: &mut ChaCha8Rng) -> Vec<ImageResult> {
    let n_images = r.gen_range(1..=3);
    let mut budget = r.gen_range(0..=10usize);
    (0..n_images)
        .map(|_| {
            let gts: Vec<BBox> = (0..r.gen_range(0..4)).map(|_| grid_box(r, 10)).collect();
            let k = r.gen_range(0..=budget);
            budget -= k;
            let dets = (0..k)
                .map(|_| {
                    let bbox = if !gts.is_empty() && r.gen_bool(0.5) {
                        let g = gts[r.gen_range(0..gts.len())];
                        g.translate(r.gen_range(-2..=2) as f64, r.gen_range(-2..=2) as f64)
                    } else {
                        grid_box(r, 10)
                    };
                    Detection { bbox, score: r.gen_range(1..=6) as f64 / 6.0 }
                })
                .collect();
            ImageResult { dets, gts }
        })
        .collect()
}

/// Independent reference: every score level is a cutoff, the kept set is
/// matched from scratch and the precision envelope is integrated over recall.
pub fn reference_ap(images: &[ImageResult], thr: f64) -> f64 {
    let n_gt: usize = images.iter().map(|r| r.gts.len()).sum();
    let mut flat: Vec<(usize, usize, Detection)> = Vec::new();
    for (m, r) in images.iter().enumerate() {
        for (i, d) in r.dets.iter().enumerate() {
            flat.push((m, i, *d));
        }
    }
    if n_gt == 0 {
        return if flat.is_empty() { 1.0 } else { 0.0 };
    }
    flat.sort_by(|a, b| {
        b.2.score
            .partial_cmp(&a.2.score)
            .unwrap()
            .then(a.2.bbox.coords().partial_cmp(&b.2.bbox.coords()).unwrap())
            .then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut levels: Vec<f64> = flat.iter().map(|f| f.2.score).collect();
    levels.dedup();
    let mut curve = Vec::new();
    for &t in &levels {
        let mut used: Vec<Vec<bool>> = images.iter().map(|r| vec![false; r.gts.len()]).collect();
        let (mut tp, mut kept) = (0usize, 0usize);
        for (m, _, d) in flat.iter().filter(|f| f.2.score >= t) {
            kept += 1;
            let best = (0..images[*m].gts.len())
                .filter(|&g| !used[*m][g] && iou(&d.bbox, &images[*m].gts[g]) >= thr)
                .fold(None, |acc: Option<usize>, g| match acc {
                    Some(b) if iou(&d.bbox, &images[*m].gts[b]) >= iou(&d.bbox, &images[*m].gts[g]) => Some(b),
                    _ => Some(g),
                });
            if let Some(g) = best {
                used[*m][g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / kept as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(rc, _) in &curve {
        let p = curve.iter().filter(|c| c.0 >= rc).map(|c| c.1).fold(0.0, f64::max);
        ap += (rc - prev) * p;
        prev = rc;
    }
    ap
}

/// Boxes whose pairwise IoU is either zero or at least 0.1.
pub fn separated_instance(r: &mut ChaCha8Rng) -> Vec<Detection> {
    let mut boxes: Vec<BBox> = Vec::new();
    let n = r.gen_range(2..=12);
    while boxes.len() < n {
        let b = grid_box(r, 14);
        if boxes.iter().all(|o| {
            let v = iou(&b, o);
            v == 0.0 || v >= 0.1
        }) {
            boxes.push(b);
        }
    }
    boxes.into_iter().map(|bbox| Detection { bbox, score: r.gen_range(0.01..1.0) }).collect()
}

pub fn hard_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= thr) {
            keep.push(d);
        }
    }
    keep
}
