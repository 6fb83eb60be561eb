//! Named gradient checks covering every tape operator and every composed
//! block, shared by the test suite and the `grad-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::anchors::AnchorConfig;
use crate::autograd::{ConvSpec, Tape, Var};
use crate::boxes::BBox;
use crate::error::Result;
use crate::loss::total_loss;
use crate::model::backbone::{frm_fuse, frm_inject, BackboneConfig, CompositeBackbone, FeatureSet, Frm};
use crate::model::dce::Dce;
use crate::model::head::RpnHead;
use crate::model::mama::Mama;
use crate::model::{Blocks, Detector, ModelConfig};
use crate::nn::{Fwd, Init, Mode, ParamStore};
use crate::synth::SceneSample;
use crate::tensor::{Shape, Tensor};
use crate::train::sample_targets;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Composite,
}

impl Tier {
    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Primitive => 1e-4,
            Tier::Composite => 1e-3,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub tier: Tier,
    check: fn() -> Result<GradCheckReport>,
}

impl Case {
    pub fn run(&self) -> Result<GradCheckReport> {
        (self.check)()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

fn rand(shape: Shape, seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed)
}

/// Values with magnitude in `[lo, hi]` and random sign, keeping clear of
/// kinks at zero.
fn away_from_zero(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) { v } else { -v }
    })
}

/// Projects `v` on fixed random weights so that no output direction is
/// invisible to the scalar objective.
fn weighted(t: &mut Tape, v: Var) -> Result<Var> {
    let w = t.constant(rand(t.shape(v), 0xC0FFEE));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn full() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn unary(x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(|t, v| { let y = f(t, v[0])?; weighted(t, y) }, &[x], full())
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn vector(len: usize) -> Shape {
    s(1, 1, 1, len)
}

// ---- primitives ----

fn conv2d() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 2, 1))?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 7, 6), 1), rand(s(4, 3, 3, 3), 2), rand(vector(4), 3)], full())
}

fn conv2d_dilated() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.conv2d(v[0], v[1], None, ConvSpec::new(3, 1, 3))?; weighted(t, y) };
    grad_check(f, &[rand(s(1, 2, 8, 8), 4), rand(s(3, 2, 3, 3), 5)], full())
}

fn linear() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.linear(v[0], v[1], Some(v[2]))?; weighted(t, y) };
    grad_check(f, &[rand(s(3, 5, 1, 1), 6), rand(s(4, 5, 1, 1), 7), rand(vector(4), 8)], full())
}

fn relu() -> Result<GradCheckReport> {
    unary(away_from_zero(s(2, 3, 4, 4), 0.05, 1.0, 9), |t, x| Ok(t.relu(x)))
}

fn sigmoid() -> Result<GradCheckReport> {
    unary(uniform(s(2, 3, 4, 4), -4.0, 4.0, 10), |t, x| Ok(t.sigmoid(x)))
}

fn add() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.add(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 2, 3, 3), 11), rand(s(2, 2, 3, 3), 12)], full())
}

fn add_n() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.add_n(v)?; weighted(t, y) };
    grad_check(f, &[rand(s(1, 2, 3, 3), 13), rand(s(1, 2, 3, 3), 14), rand(s(1, 2, 3, 3), 15)], full())
}

fn mul() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 2, 3, 3), 16), rand(s(2, 2, 3, 3), 17)], full())
}

fn scale() -> Result<GradCheckReport> {
    unary(rand(s(1, 2, 3, 3), 18), |t, x| Ok(t.scale(x, -1.7)))
}

fn sum() -> Result<GradCheckReport> {
    grad_check(|t, v| { let y = t.sum(v[0]); Ok(t.scale(y, 0.3)) }, &[rand(s(2, 2, 3, 3), 19)], full())
}

fn mul_channel() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.mul_channel(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 4, 4), 20), rand(s(2, 3, 1, 1), 21)], full())
}

fn mul_spatial() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.mul_spatial(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 4, 4), 22), rand(s(2, 1, 4, 4), 23)], full())
}

fn add_channel() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.add_channel(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 4, 4), 24), rand(s(2, 3, 1, 1), 25)], full())
}

fn resize_up() -> Result<GradCheckReport> {
    unary(rand(s(1, 2, 4, 3), 26), |t, x| t.resize_bilinear(x, 8, 7))
}

fn resize_down() -> Result<GradCheckReport> {
    unary(rand(s(1, 2, 8, 8), 27), |t, x| t.resize_bilinear(x, 3, 5))
}

fn adaptive_avg_pool() -> Result<GradCheckReport> {
    unary(rand(s(1, 2, 7, 8), 28), |t, x| t.adaptive_avg_pool(x, 3, 4))
}

fn global_avg_pool() -> Result<GradCheckReport> {
    unary(rand(s(2, 3, 5, 5), 29), |t, x| Ok(t.global_avg_pool(x)))
}

fn softmax_spatial() -> Result<GradCheckReport> {
    unary(uniform(s(2, 1, 4, 5), -2.0, 2.0, 30), |t, x| t.softmax_spatial(x))
}

fn attention_pool() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.attention_pool(v[0], v[1])?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 4, 4), 31), rand(s(2, 1, 4, 4), 32)], full())
}

fn concat() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.concat(v)?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 1, 3, 3), 33), rand(s(2, 3, 3, 3), 34)], full())
}

fn split() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| {
        let parts = t.split(v[0], 3)?;
        let terms = parts.into_iter().enumerate().map(|(k, p)| {
            let p = t.scale(p, (k + 1) as f64);
            weighted(t, p)
        }).collect::<Result<Vec<_>>>()?;
        t.add_n(&terms)
    };
    grad_check(f, &[rand(s(2, 6, 3, 3), 35)], full())
}

fn narrow_channels() -> Result<GradCheckReport> {
    unary(rand(s(2, 5, 3, 3), 36), |t, x| Ok(t.narrow_channels(x, 1, 3)))
}

fn batchnorm_train() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?; weighted(t, y) };
    grad_check(f, &[rand(s(3, 2, 3, 3), 37), uniform(vector(2), 0.5, 1.5, 38), rand(vector(2), 39)], full())
}

fn batchnorm_infer() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.batchnorm_infer(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0], 1e-5)?;
        weighted(t, y)
    };
    grad_check(f, &[rand(s(2, 2, 3, 3), 40), uniform(vector(2), 0.5, 1.5, 41), rand(vector(2), 42)], full())
}

fn layer_norm() -> Result<GradCheckReport> {
    let f = |t: &mut Tape, v: &[Var]| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(t, y) };
    grad_check(f, &[rand(s(2, 3, 2, 3), 43), uniform(vector(3), 0.5, 1.5, 44), rand(vector(3), 45)], full())
}

fn bce_mean() -> Result<GradCheckReport> {
    let target = Tensor::from_fn(s(2, 1, 3, 3), |n, _, y, x| f64::from(u8::from((n + y + x) % 2 == 0)));
    grad_check(move |t, v| t.bce_mean(v[0], &target, 1e-7), &[uniform(s(2, 1, 3, 3), 0.05, 0.95, 46)], full())
}

fn bce_logits_sum() -> Result<GradCheckReport> {
    let target = Tensor::from_fn(s(1, 3, 2, 2), |_, c, y, x| f64::from(u8::from((c + y * x) % 2 == 0)));
    let weight = Tensor::from_fn(s(1, 3, 2, 2), |_, c, y, _| if c == 1 && y == 0 { 0.0 } else { 0.5 });
    grad_check(move |t, v| t.bce_logits_sum(v[0], &target, &weight), &[uniform(s(1, 3, 2, 2), -3.0, 3.0, 47)], full())
}

fn smooth_l1_sum() -> Result<GradCheckReport> {
    // Residuals on both branches, clear of the kink at |x| = 1.
    let mut r = rng(48);
    let pred = Tensor::from_fn(s(1, 8, 2, 2), |_, c, _, _| {
        let m = if c % 2 == 0 { r.gen_range(0.05..0.8) } else { r.gen_range(1.2..3.0) };
        if r.gen_bool(0.5) { m } else { -m }
    });
    let target = Tensor::zeros(pred.shape());
    let weight = Tensor::from_fn(pred.shape(), |_, c, _, _| f64::from(u8::from(c != 3)));
    grad_check(move |t, v| t.smooth_l1_sum(v[0], &target, &weight), &[pred], full())
}

// ---- composed blocks ----

/// Deep compositions accumulate more rounding noise than single ops, so
/// they use a wider stencil; kinks it straddles are detected and skipped.
fn composite_opts(coords: usize) -> GradCheckOptions {
    GradCheckOptions { step: 3e-5, ..GradCheckOptions::sampled(coords) }
}

/// Shifts every parameter off its initial value so gates and affines are
/// generic.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for t in store.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
}

/// Checks `f` with respect to the activations in `inputs` and every
/// parameter of `store`, sampling `coords` coordinates per tensor.
fn block_check<F>(store: &ParamStore, inputs: Vec<Tensor>, coords: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Fwd, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(store.values().iter().cloned());
    grad_check(
        |t, v| {
            let mut fx = Fwd::with_params(t, store, v[n_in..].to_vec(), Mode::Train)?;
            let y = f(&mut fx, &v[..n_in])?;
            weighted(fx.tape, y)
        },
        &all,
        composite_opts(coords),
    )
}

fn frm_pair() -> (ParamStore, Frm) {
    let mut store = ParamStore::new();
    let frm = Frm::new(&mut Init::new(&mut store, 50), "frm", 4, 6);
    jitter(&mut store, 51);
    (store, frm)
}

fn frm_fuse_case() -> Result<GradCheckReport> {
    let (store, frm) = frm_pair();
    let inputs = vec![rand(s(2, 6, 4, 4), 52), rand(s(2, 4, 8, 8), 53)];
    block_check(&store, inputs, 24, |fx, v| frm_fuse(fx, v[0], v[1], &frm))
}

fn frm_inject_case() -> Result<GradCheckReport> {
    let (store, frm) = frm_pair();
    let inputs = vec![rand(s(2, 4, 6, 6), 54), uniform(s(2, 4, 6, 6), 0.0, 2.0, 55)];
    block_check(&store, inputs, 24, |fx, v| frm_inject(fx, v[0], v[1], &frm))
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig::new(4, 1, &[(8, 1), (16, 2), (16, 1), (16, 2)])
}

fn composite_backbone() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let bb = CompositeBackbone::new(&mut Init::new(&mut store, 56), &tiny_backbone(), true, true)?;
    jitter(&mut store, 57);
    block_check(&store, vec![rand(s(1, 3, 16, 16), 58)], 6, |fx, v| {
        let (fs, _) = bb.forward(fx, v[0])?;
        let parts = fs.levels().map(|l| weighted(fx.tape, l));
        fx.tape.add_n(&parts.into_iter().collect::<Result<Vec<_>>>()?)
    })
}

fn dce_case() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let dce = Dce::new(&mut Init::new(&mut store, 59), [4, 8, 8], 4, true)?;
    jitter(&mut store, 60);
    let inputs = vec![rand(s(1, 4, 16, 16), 61), rand(s(1, 8, 8, 8), 62), rand(s(1, 8, 4, 4), 63)];
    block_check(&store, inputs, 12, |fx, v| dce.forward(fx, &FeatureSet { l2: v[0], l3: v[1], l4: v[2] }))
}

fn mama_block() -> (ParamStore, Mama) {
    let mut store = ParamStore::new();
    let m = Mama::new(&mut Init::new(&mut store, 64), 8).expect("8 channels split into 4 branches");
    jitter(&mut store, 65);
    (store, m)
}

fn inception_case() -> Result<GradCheckReport> {
    let (store, m) = mama_block();
    block_check(&store, vec![rand(s(1, 8, 7, 7), 66)], 12, |fx, v| m.inception_forward(fx, v[0]))
}

fn mask_attention_case() -> Result<GradCheckReport> {
    let (store, m) = mama_block();
    block_check(&store, vec![rand(s(1, 8, 7, 7), 67)], 12, |fx, v| {
        let (gated, sal) = m.mask_attention(fx, v[0])?;
        let a = weighted(fx.tape, gated)?;
        let b = weighted(fx.tape, sal)?;
        fx.tape.add(a, b)
    })
}

fn context_attention_case() -> Result<GradCheckReport> {
    let (store, m) = mama_block();
    block_check(&store, vec![rand(s(1, 8, 7, 7), 68)], 12, |fx, v| m.context_attention(fx, v[0]))
}

fn mama_case() -> Result<GradCheckReport> {
    let (store, m) = mama_block();
    block_check(&store, vec![rand(s(1, 8, 7, 7), 69)], 12, |fx, v| {
        let (i, sal) = m.forward(fx, v[0])?;
        let a = weighted(fx.tape, i)?;
        let b = weighted(fx.tape, sal)?;
        fx.tape.add(a, b)
    })
}

fn head_case() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let head = RpnHead::new(&mut Init::new(&mut store, 70), 8, 3);
    jitter(&mut store, 71);
    block_check(&store, vec![rand(s(1, 8, 5, 5), 72)], 12, |fx, v| {
        let out = head.forward(fx, v[0])?;
        let a = weighted(fx.tape, out.objectness)?;
        let b = weighted(fx.tape, out.deltas)?;
        fx.tape.add(a, b)
    })
}

/// Small detector for 16×16 inputs with every block enabled.
pub fn tiny_detector(blocks: Blocks, seed: u64) -> Result<Detector> {
    let cfg = ModelConfig {
        backbone: tiny_backbone(),
        anchors: AnchorConfig { stride: 2, ratios: vec![0.5, 1.0], scales: vec![1.0, 2.0], base_size: 3.0, pos_iou: 0.5, neg_iou: 0.3 },
        reduction: 16,
        blocks,
    };
    Detector::new(cfg, seed)
}

/// Full detector and multi-task loss on one `1×3×16×16` image; `seed`
/// picks the weights, their perturbation and the image.
pub fn total_loss_check(seed: u64) -> Result<GradCheckReport> {
    let mut det = tiny_detector(Blocks::ALL, seed)?;
    jitter(&mut det.store, seed + 1);
    let image = uniform(s(1, 3, 16, 16), 0.0, 1.0, seed + 2);
    let boxes = vec![BBox::new(2.0, 3.0, 6.0, 8.0), BBox::new(9.0, 9.0, 14.0, 13.0)];
    let mask = Tensor::zeros(s(1, 1, 2, 2));
    let sample = SceneSample { image: image.clone(), boxes, mask, mask_stride: 8, seed: 0 };
    let (targets, label) = sample_targets(&det, &sample)?;
    let label = Tensor::stack(&[label])?;
    let det = &det;
    let mut all = vec![image];
    all.extend(det.store.values().iter().cloned());
    grad_check(
        |t, v| {
            let mut fx = Fwd::with_params(t, &det.store, v[1..].to_vec(), Mode::Train)?;
            let out = det.forward(&mut fx, v[0])?;
            let (loss, _) = total_loss(fx.tape, &out.head, &targets, out.saliency, Some(&label))?;
            Ok(loss)
        },
        &all,
        composite_opts(4),
    )
}

fn total_loss_case() -> Result<GradCheckReport> {
    total_loss_check(1)
}

pub fn cases() -> Vec<Case> {
    use Tier::{Composite as C, Primitive as P};
    let c = |name, tier, check| Case { name, tier, check };
    vec![
        c("conv2d", P, conv2d),
        c("conv2d_dilated", P, conv2d_dilated),
        c("linear", P, linear),
        c("relu", P, relu),
        c("sigmoid", P, sigmoid),
        c("add", P, add),
        c("add_n", P, add_n),
        c("mul", P, mul),
        c("scale", P, scale),
        c("sum", P, sum),
        c("mul_channel", P, mul_channel),
        c("mul_spatial", P, mul_spatial),
        c("add_channel", P, add_channel),
        c("resize_bilinear_up", P, resize_up),
        c("resize_bilinear_down", P, resize_down),
        c("adaptive_avg_pool", P, adaptive_avg_pool),
        c("global_avg_pool", P, global_avg_pool),
        c("softmax_spatial", P, softmax_spatial),
        c("attention_pool", P, attention_pool),
        c("concat", P, concat),
        c("split", P, split),
        c("narrow_channels", P, narrow_channels),
        c("batchnorm_train", P, batchnorm_train),
        c("batchnorm_infer", P, batchnorm_infer),
        c("layer_norm", P, layer_norm),
        c("bce_mean", P, bce_mean),
        c("bce_logits_sum", P, bce_logits_sum),
        c("smooth_l1_sum", P, smooth_l1_sum),
        c("frm_fuse", C, frm_fuse_case),
        c("frm_inject", C, frm_inject_case),
        c("composite_backbone", C, composite_backbone),
        c("dce", C, dce_case),
        c("inception", C, inception_case),
        c("mask_attention", C, mask_attention_case),
        c("context_attention", C, context_attention_case),
        c("mama", C, mama_case),
        c("head", C, head_case),
        c("total_loss", C, total_loss_case),
    ]
}

pub fn find(name: &str) -> Option<Case> {
    cases().into_iter().find(|c| c.name == name)
}
