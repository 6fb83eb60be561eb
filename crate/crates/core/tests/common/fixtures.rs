//! Block fixtures that return `(got, want)` pairs; module tests and the
//! acceptance run assert on the same computations.

use densedet::autograd::{ConvSpec, Tape};
use densedet::config::{RunConfig, TrainConfig};
use densedet::model::backbone::{frm_inject, Frm};
use densedet::model::dce::{fuse_with_scores, Dce};
use densedet::model::mama::Mama;
use densedet::model::Blocks;
use densedet::nn::{Fwd, Init, Mode, ParamStore};
use densedet::synth::{generate_split, SceneSample, SynthConfig};
use densedet::{Shape, Tensor};

use super::{random, tiny_model};

/// Stand-alone FRM for a `c_prev`-channel previous level and `c_k`-channel current level.
pub fn frm_store(c_prev: usize, c_k: usize, seed: u64) -> (ParamStore, Frm) {
    let mut store = ParamStore::new();
    let frm = Frm::new(&mut Init::new(&mut store, seed), "frm", c_prev, c_k);
    (store, frm)
}

pub fn dce(channels: [usize; 3], r: usize, enabled: bool, seed: u64) -> (ParamStore, Dce) {
    let mut store = ParamStore::new();
    let d = Dce::new(&mut Init::new(&mut store, seed), channels, r, enabled).unwrap();
    (store, d)
}

pub fn mama(c: usize, seed: u64) -> (ParamStore, Mama) {
    let mut store = ParamStore::new();
    let m = Mama::new(&mut Init::new(&mut store, seed), c).unwrap();
    (store, m)
}

/// `frm_inject` with the gate held at 1 against `φ(BN(L))` built from primitives.
pub fn frm_open_gate() -> (Tensor, Tensor) {
    let (store, frm) = frm_store(3, 3, 7);
    let l_prev = random(Shape::new(2, 3, 5, 5), 8);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let l = fx.input(l_prev.clone());
    let ones = fx.input(Tensor::ones(l_prev.shape()));
    let g1 = frm_inject(&mut fx, l, ones, &frm).unwrap();

    let mut t = Tape::new();
    let x = t.constant(l_prev);
    let g = t.constant(store.get(frm.lead_bn.gamma).clone());
    let b = t.constant(store.get(frm.lead_bn.beta).clone());
    let (bn, _) = t.batchnorm_train(x, g, b, 1e-5).unwrap();
    let r = t.relu(bn);
    let w = t.constant(store.get(frm.refine.weight).clone());
    let bias = t.constant(store.get(frm.refine.bias.unwrap()).clone());
    let want = t.conv2d(r, w, Some(bias), ConvSpec::same(3, 3, 1)).unwrap();
    (tape.value(g1).clone(), t.value(want).clone())
}

/// Dilated concat fused with scores fixed to `alpha`, against the plain
/// sum of the three branch convolutions.
pub fn fuse_with_constant(alpha: f64) -> (Tensor, Tensor) {
    let (store, d) = dce([4, 4, 4], 3, true, 12);
    let input = random(Shape::new(2, 4, 8, 8), 13);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(input.clone());
    let cat = d.dilated_concat(&mut fx, x, 3).unwrap();
    let a = fx.input(Tensor::full(Shape::new(2, 12, 1, 1), alpha));
    let fused = fuse_with_scores(&mut fx, cat, a).unwrap();

    let lv = &d.levels.as_ref().unwrap()[1];
    let mut t = Tape::new();
    let x = t.constant(input);
    let branches: Vec<_> = lv
        .dilated
        .iter()
        .map(|c| {
            let w = t.constant(store.get(c.weight).clone());
            let b = t.constant(store.get(c.bias.unwrap()).clone());
            t.conv2d(x, w, Some(b), c.spec).unwrap()
        })
        .collect();
    let s01 = t.add(branches[0], branches[1]).unwrap();
    let sum = t.add(s01, branches[2]).unwrap();
    (tape.value(fused).clone(), t.value(sum).clone())
}

/// Context attention with its last transform zeroed, on a regular map and
/// on a single-position map; each pair is `(output, input)`.
pub fn context_zero_transform() -> Vec<(Tensor, Tensor)> {
    let (mut store, m) = mama(8, 8);
    store.get_mut(m.context.expand.weight).data_mut().fill(0.0);
    store.get_mut(m.context.expand.bias.unwrap()).data_mut().fill(0.0);
    let input = random(Shape::new(2, 8, 5, 3), 9);
    let single = random(Shape::new(1, 8, 1, 1), 10);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let (x, s) = (fx.input(input.clone()), fx.input(single.clone()));
    let y = m.context_attention(&mut fx, x).unwrap();
    let ys = m.context_attention(&mut fx, s).unwrap();
    vec![(tape.value(y).clone(), input), (tape.value(ys).clone(), single)]
}

/// Channel scores on a hand-built 6-channel map against a scalar loop over
/// pooling, the two projections, ReLU and sigmoid.
pub fn channel_attention_six() -> (Vec<f64>, Vec<f64>) {
    // 2 channels per level → 6 concatenated channels, r = 3 → 2 hidden units.
    let (mut store, d) = dce([2, 2, 2], 3, true, 1);
    let lv = &d.levels.as_ref().unwrap()[1];
    let w1 = [[0.3, -0.2, 0.1, 0.5, -0.4, 0.2], [-0.1, 0.25, 0.35, -0.3, 0.15, 0.05]];
    let w2 = [[0.4, -0.6], [0.2, 0.3], [-0.5, 0.1], [0.7, 0.2], [-0.3, -0.4], [0.05, 0.9]];
    *store.get_mut(lv.fc1.weight) = Tensor::from_fn(Shape::new(2, 6, 1, 1), |o, i, _, _| w1[o][i]);
    *store.get_mut(lv.fc2.weight) = Tensor::from_fn(Shape::new(6, 2, 1, 1), |o, i, _, _| w2[o][i]);
    let f = Tensor::from_fn(Shape::new(1, 6, 2, 2), |_, c, y, x| (c as f64 - 2.5) * 0.3 + (y * 2 + x) as f64 * 0.1);

    let mut gap = [0.0; 6];
    for (c, g) in gap.iter_mut().enumerate() {
        for y in 0..2 {
            for x in 0..2 {
                *g += f.at(0, c, y, x);
            }
        }
        *g /= 4.0;
    }
    let mut hidden = [0.0; 2];
    for (o, h) in hidden.iter_mut().enumerate() {
        for i in 0..6 {
            *h += w1[o][i] * gap[i];
        }
        *h = h.max(0.0);
    }
    let mut want = vec![0.0; 6];
    for (o, a) in want.iter_mut().enumerate() {
        let z: f64 = (0..2).map(|i| w2[o][i] * hidden[i]).sum();
        *a = 1.0 / (1.0 + (-z).exp());
    }

    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(f);
    let a = d.channel_attention(&mut fx, x, 3).unwrap();
    (tape.value(a).data().to_vec(), want)
}

/// 16×16 scenes with one to three small blobs and the tiny detector.
pub fn toy_config(blocks: Blocks, seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = tiny_model(blocks);
    cfg.data.synth = SynthConfig {
        image_size: 16,
        min_objects: 1,
        max_objects: 3,
        min_radius: 2.0,
        max_radius: 4.0,
        cluster_spread: 3.0,
        max_moles: 1,
        seed,
        ..SynthConfig::default()
    };
    cfg.data.tile = 16;
    cfg.data.overlap = 8;
    cfg.train = TrainConfig { epochs, seed, decay_every_epochs: epochs.div_ceil(3).max(1), ..TrainConfig::default() };
    cfg
}

pub fn toy_data(cfg: &RunConfig, n: usize) -> Vec<SceneSample> {
    generate_split(&cfg.data.synth, 0, n).unwrap()
}
