//! Synthetic dense-small-blob scenes: skin-toned background, uneven
//! illumination with a color cast, clustered reddish blobs (labeled) and dark
//! round distractors (unlabeled). Also tile cropping, horizontal flip and the
//! on-disk dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{reject, Error, Result};
use crate::model::mama::rasterize_mask_label;
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Box geometry is snapped to this grid so flips and crops stay exact.
const QUANTUM: f64 = 256.0;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Standard deviation (px) of blob centers around their cluster center.
    pub cluster_spread: f64,
    /// Peak-to-peak strength of the multiplicative illumination ramp.
    pub illumination: f64,
    /// Per-channel multiplicative tint range `1 ± hue_shift`.
    pub hue_shift: f64,
    pub min_moles: usize,
    pub max_moles: usize,
    /// Largest IoU allowed between two labeled blobs.
    pub max_overlap: f64,
    pub mask_stride: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            min_objects: 3,
            max_objects: 12,
            min_radius: 2.0,
            max_radius: 10.0,
            cluster_spread: 7.0,
            illumination: 0.5,
            hue_shift: 0.12,
            min_moles: 0,
            max_moles: 3,
            max_overlap: 0.3,
            mask_stride: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size > 0
            && self.min_objects <= self.max_objects
            && self.min_moles <= self.max_moles
            && self.min_radius >= 1.0
            && self.min_radius <= self.max_radius
            && 2.0 * self.max_radius < self.image_size as f64
            && self.cluster_spread > 0.0
            && (0.0..2.0).contains(&self.illumination)
            && (0.0..1.0).contains(&self.hue_shift)
            && self.max_overlap > 0.0
            && self.mask_stride > 0
            && self.image_size % self.mask_stride == 0;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic data configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `1×3×H×W` in [0, 1].
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    /// `1×1×(H/stride)×(W/stride)` binary map.
    pub mask: Tensor,
    pub mask_stride: usize,
    pub seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

fn quantize(v: f64) -> f64 {
    (v * QUANTUM).round() / QUANTUM
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    opacity: f64,
    /// Width of the soft edge as a fraction of the radius.
    edge: f64,
}

impl Blob {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
    }

    /// Coverage in [0, 1]; zero outside the ellipse, so the box is tight.
    fn alpha(&self, x: f64, y: f64) -> f64 {
        let d = (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt();
        ((1.0 - d) / self.edge).clamp(0.0, 1.0) * self.opacity
    }
}

/// Renders one scene. Fully determined by `cfg` (including `cfg.seed`).
pub fn generate_scene(cfg: &SynthConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size as f64;
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let blobs = place_blobs(cfg, n, &mut rng)?;
    let moles: Vec<Blob> = (0..rng.gen_range(cfg.min_moles..=cfg.max_moles))
        .map(|_| {
            let r = rng.gen_range(1.5..3.5);
            let shade = rng.gen_range(0.7..1.1);
            Blob {
                cx: rng.gen_range(r..size - r),
                cy: rng.gen_range(r..size - r),
                rx: r,
                ry: r * rng.gen_range(0.9..1.1),
                color: [0.26 * shade, 0.16 * shade, 0.11 * shade],
                opacity: rng.gen_range(0.8..1.0),
                edge: 0.2,
            }
        })
        .collect();

    let skin = [rng.gen_range(0.78..0.92), rng.gen_range(0.58..0.72), rng.gen_range(0.47..0.60)];
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let tint = [0; 3].map(|_| 1.0 + rng.gen_range(-cfg.hue_shift..=cfg.hue_shift));
    let noise = Normal::new(0.0, 0.015).expect("valid deviation");

    let s = cfg.image_size;
    let mut image = Tensor::zeros(Shape::new(1, 3, s, s));
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = skin.map(|c| c + noise.sample(&mut rng));
            for b in blobs.iter().chain(&moles) {
                let a = b.alpha(px, py);
                if a > 0.0 {
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - a) + b.color[c] * a;
                    }
                }
            }
            let light = 1.0 + cfg.illumination * ((px / size - 0.5) * theta.cos() + (py / size - 0.5) * theta.sin());
            for c in 0..3 {
                image.set(0, c, y, x, (rgb[c] * light * tint[c]).clamp(0.0, 1.0));
            }
        }
    }
    let boxes: Vec<BBox> = blobs.iter().map(Blob::bbox).collect();
    let mask = rasterize_mask_label(&boxes, (s, s), cfg.mask_stride)?;
    Ok(SceneSample { image, boxes, mask, mask_stride: cfg.mask_stride, seed: cfg.seed })
}

/// Samples blob geometry around a few cluster centers, rejecting positions
/// that leave the image or overlap an earlier blob too much.
fn place_blobs(cfg: &SynthConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let size = cfg.image_size as f64;
    let margin = cfg.max_radius;
    let clusters: Vec<(f64, f64)> =
        (0..n.div_ceil(4).max(1)).map(|_| (rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin))).collect();
    let spread = Normal::new(0.0, cfg.cluster_spread).expect("positive spread");
    let (lo, hi) = (cfg.min_radius.ln(), cfg.max_radius.ln());
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    for i in 0..n {
        let (ccx, ccy) = clusters[i % clusters.len()];
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = if hi > lo { rng.gen_range(lo..=hi).exp() } else { cfg.min_radius };
            let aspect: f64 = rng.gen_range(0.75..1.33);
            let blob = Blob {
                cx: quantize(ccx + spread.sample(rng)),
                cy: quantize(ccy + spread.sample(rng)),
                rx: quantize((r * aspect.sqrt()).max(1.0)),
                ry: quantize((r / aspect.sqrt()).max(1.0)),
                color: [rng.gen_range(0.70..0.86), rng.gen_range(0.18..0.32), rng.gen_range(0.20..0.34)],
                opacity: rng.gen_range(0.65..0.95),
                edge: 0.4,
            };
            let b = blob.bbox();
            let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size && b.y2 <= size;
            if inside && blobs.iter().all(|o| iou(&o.bbox(), &b) <= cfg.max_overlap) {
                placed = Some(blob);
                break;
            }
        }
        match placed {
            Some(b) => blobs.push(b),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place blob {} of {n} after {PLACEMENT_ATTEMPTS} attempts",
                    i + 1
                )))
            }
        }
    }
    Ok(blobs)
}

/// Seed of sample `index` in split `stream`, derived from the base seed.
pub fn sample_seed(base: u64, stream: u64, index: usize) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes of one split, generated in parallel and returned in index order.
pub fn generate_split(cfg: &SynthConfig, stream: u64, count: usize) -> Result<Vec<SceneSample>> {
    par::map_range(count, |i| generate_scene(&SynthConfig { seed: sample_seed(cfg.seed, stream, i), ..cfg.clone() }))
        .into_iter()
        .collect()
}

/// Tile origins along one axis: multiples of `tile − overlap` while the tile
/// stays strictly inside, then one tile flush with the far border.
pub fn tile_offsets(size: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if size <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut out: Vec<usize> = (0..).map(|k| k * step).take_while(|&o| o + tile < size).collect();
    if out.last() != Some(&(size - tile)) {
        out.push(size - tile);
    }
    out
}

/// Fraction of a box's area that must survive clipping for it to be kept.
pub const MIN_KEPT_AREA: f64 = 0.25;

/// Overlapping `tile × tile` crops; images no larger than `tile` pass
/// through unchanged.
pub fn crop_tiles(s: &SceneSample, tile: usize, overlap: usize) -> Result<Vec<SceneSample>> {
    if tile == 0 || overlap >= tile {
        reject!("tile overlap {overlap} must be smaller than the tile size {tile}");
    }
    let (h, w) = (s.height(), s.width());
    if h <= tile && w <= tile {
        return Ok(vec![s.clone()]);
    }
    let mut out = Vec::new();
    for oy in tile_offsets(h, tile, overlap) {
        for ox in tile_offsets(w, tile, overlap) {
            let (th, tw) = (tile.min(h), tile.min(w));
            let image = Tensor::from_fn(Shape::new(1, 3, th, tw), |_, c, y, x| s.image.at(0, c, y + oy, x + ox));
            let (fx, fy) = (ox as f64, oy as f64);
            let boxes: Vec<BBox> = s
                .boxes
                .iter()
                .filter_map(|b| {
                    let c = b.translate(-fx, -fy).clip(tw as f64, th as f64);
                    (c.is_valid() && c.area() >= MIN_KEPT_AREA * b.area()).then_some(c)
                })
                .collect();
            let mask = rasterize_mask_label(&boxes, (th, tw), s.mask_stride)?;
            out.push(SceneSample { image, boxes, mask, mask_stride: s.mask_stride, seed: s.seed });
        }
    }
    Ok(out)
}

fn mirror(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x))
}

/// Mirror about the vertical axis.
pub fn hflip(s: &SceneSample) -> SceneSample {
    let w = s.width() as f64;
    SceneSample {
        image: mirror(&s.image),
        boxes: s.boxes.iter().map(|b| b.hflip(w)).collect(),
        mask: mirror(&s.mask),
        ..s.clone()
    }
}

const MANIFEST: &str = "manifest.txt";
const ANNOTATIONS: &str = "annotations.txt";

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        reject!("PPM output needs a 1×3×H×W image, got {s}");
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if header[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| f64::from(pixels[3 * (y * w + x) + c]) / 255.0))
}

/// Writes `img_XXXXX.ppm` files, the annotation list and the manifest.
pub fn save_split(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut ann = String::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("img_{i:05}.ppm");
        write_ppm(&dir.join(&file), &s.image)?;
        let _ = writeln!(manifest, "{file} {}", s.seed);
        for b in &s.boxes {
            let _ = writeln!(ann, "{file} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
        }
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST, &manifest)?;
    write(ANNOTATIONS, &ann)
}

/// Loads a split written by [`save_split`]; masks are re-rasterized.
pub fn load_split(dir: &Path, mask_stride: usize) -> Result<Vec<SceneSample>> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest = read(MANIFEST)?;
    let mut files: Vec<(String, u64)> = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let file = it.next().unwrap_or_default().to_string();
        let seed = it.next().map(str::parse).transpose().map_err(|_| Error::Format(format!("manifest line `{line}`")))?;
        files.push((file, seed.unwrap_or(0)));
    }
    let mut boxes: std::collections::HashMap<String, Vec<BBox>> = Default::default();
    for (ln, line) in read(ANNOTATIONS)?.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{ANNOTATIONS} line {}: expected `file x1 y1 x2 y2`", ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let v = f[1..].iter().map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        if !b.is_valid() {
            return Err(bad());
        }
        boxes.entry(f[0].to_string()).or_default().push(b);
    }
    if let Some(unknown) = boxes.keys().find(|k| !files.iter().any(|(f, _)| f == *k)) {
        return Err(Error::Format(format!("annotation for `{unknown}` which is not in the manifest")));
    }
    files
        .into_iter()
        .map(|(file, seed)| {
            let image = read_ppm(&dir.join(&file))?;
            let s = image.shape();
            let boxes = boxes.remove(&file).unwrap_or_default();
            let mask = rasterize_mask_label(&boxes, (s.h, s.w), mask_stride)?;
            Ok(SceneSample { image, boxes, mask, mask_stride, seed })
        })
        .collect()
}
