mod common;

use common::fixtures::{channel_attention_six, dce, fuse_with_constant};
use common::random;
use densedet::autograd::{conv2d_forward, ConvSpec, Tape};
use densedet::model::backbone::FeatureSet;
use densedet::model::dce::effective_reduction;
use densedet::nn::{Fwd, Mode};
use densedet::{Shape, Tensor};

fn identity_kernel(c: usize) -> Tensor {
    Tensor::from_fn(Shape::new(c, c, 3, 3), |o, i, y, x| f64::from(u8::from(o == i && y == 1 && x == 1)))
}

#[test]
fn reduction_clamps_and_must_divide() {
    assert_eq!(effective_reduction(64, 16).unwrap(), 16);
    assert_eq!(effective_reduction(2, 16).unwrap(), 6);
    assert!(effective_reduction(5, 10).is_err());
}

#[test]
fn level_three_resize_is_identity() {
    let (store, d) = dce([4, 4, 4], 3, true, 1);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(random(Shape::new(1, 4, 8, 8), 2));
    assert_eq!(d.resize_to_reference(&mut fx, x, 3, (8, 8)).unwrap(), x);
    assert!(d.resize_to_reference(&mut fx, x, 5, (8, 8)).is_err());
    assert!(d.resize_to_reference(&mut fx, x, 1, (8, 8)).is_err());
}

#[test]
fn constant_level_two_stays_constant() {
    let (mut store, d) = dce([3, 3, 3], 3, true, 1);
    *store.get_mut(d.resize2.weight) = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| f64::from(u8::from(o == i)));
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(Tensor::full(Shape::new(1, 3, 16, 16), 0.7));
    let y = d.resize_to_reference(&mut fx, x, 2, (8, 8)).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), Shape::new(1, 3, 8, 8));
    assert!(v.data().iter().all(|&e| (e - 0.7).abs() < 1e-15));
}

#[test]
fn level_four_is_bilinear_then_projection() {
    let (store, d) = dce([4, 6, 8], 2, true, 3);
    let l4 = random(Shape::new(2, 8, 4, 4), 4);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(l4.clone());
    let y = d.resize_to_reference(&mut fx, x, 4, (8, 8)).unwrap();

    let mut t = Tape::new();
    let x = t.constant(l4);
    let up = t.resize_bilinear(x, 8, 8).unwrap();
    let w = t.constant(store.get(d.resize4.weight).clone());
    let b = t.constant(store.get(d.resize4.bias.unwrap()).clone());
    let want = t.conv2d(up, w, Some(b), ConvSpec::pointwise()).unwrap();
    assert_eq!(tape.value(y), t.value(want));
}

#[test]
fn identity_branches_repeat_the_input() {
    let (mut store, d) = dce([4, 4, 4], 3, true, 1);
    let lv = &d.levels.as_ref().unwrap()[1];
    for conv in &lv.dilated {
        *store.get_mut(conv.weight) = identity_kernel(4);
        store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
    }
    let input = random(Shape::new(1, 4, 8, 8), 5);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(input.clone());
    let cat = d.dilated_concat(&mut fx, x, 3).unwrap();
    let v = tape.value(cat);
    assert_eq!(v.shape(), Shape::new(1, 12, 8, 8));
    for g in 0..3 {
        let part = Tensor::from_fn(input.shape(), |n, c, y, x| v.at(n, g * 4 + c, y, x));
        assert_eq!(part, input);
    }
}

#[test]
fn channel_counts_triple() {
    let (store, d) = dce([64, 64, 64], 16, true, 1);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(random(Shape::new(1, 64, 7, 7), 5));
    let cat = d.dilated_concat(&mut fx, x, 2).unwrap();
    assert_eq!(fx.tape.shape(cat), Shape::new(1, 192, 7, 7));
    let small = fx.input(random(Shape::new(1, 64, 6, 6), 5));
    assert_eq!(d.dilated_concat(&mut fx, small, 2).unwrap_err().kind(), "rejected_input");
}

#[test]
fn dilation_three_taps() {
    let mut img = Tensor::zeros(Shape::new(1, 1, 9, 9));
    img.set(0, 0, 4, 4, 1.0);
    let ones = Tensor::ones(Shape::new(1, 1, 3, 3));
    let y = conv2d_forward(&img, &ones, None, ConvSpec::same(3, 3, 3)).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            let tap = [1, 4, 7].contains(&i) && [1, 4, 7].contains(&j);
            assert_eq!(y.at(0, 0, i, j), f64::from(u8::from(tap)), "({i}, {j})");
        }
    }
}

#[test]
fn zero_se_weights_give_half() {
    let (mut store, d) = dce([4, 4, 4], 3, true, 1);
    let lv = &d.levels.as_ref().unwrap()[0];
    store.get_mut(lv.fc1.weight).data_mut().fill(0.0);
    store.get_mut(lv.fc2.weight).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(random(Shape::new(2, 12, 3, 3), 1));
    let a = d.channel_attention(&mut fx, x, 2).unwrap();
    assert_eq!(tape.shape(a), Shape::new(2, 12, 1, 1));
    assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn attention_ignores_spatial_order() {
    let (store, d) = dce([4, 4, 4], 3, true, 9);
    let x = random(Shape::new(1, 12, 4, 5), 3);
    let perm: Vec<usize> = (0..20).map(|p| (p * 7 + 3) % 20).collect();
    let xp = Tensor::from_fn(x.shape(), |n, c, y, xx| {
        let q = perm[y * 5 + xx];
        x.at(n, c, q / 5, q % 5)
    });
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let (a, b) = (fx.input(x), fx.input(xp));
    let aa = d.channel_attention(&mut fx, a, 4).unwrap();
    let ab = d.channel_attention(&mut fx, b, 4).unwrap();
    assert!(tape.value(aa).max_abs_diff(tape.value(ab)) < 1e-14);
    assert!(tape.value(aa).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn attention_matches_scalar_evaluation() {
    let (got, want) = channel_attention_six();
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
}

#[test]
fn open_scores_sum_the_branches() {
    let (got, want) = fuse_with_constant(1.0);
    assert_eq!(got, want);
}

#[test]
fn closed_scores_give_zero() {
    let (got, _) = fuse_with_constant(0.0);
    assert!(got.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dynamic_fuse_matches_recomposition() {
    let (store, d) = dce([4, 4, 4], 3, true, 14);
    let input = random(Shape::new(1, 4, 8, 8), 15);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let x = fx.input(input.clone());
    let y = d.dynamic_fuse(&mut fx, x, 4).unwrap();

    let lv = &d.levels.as_ref().unwrap()[2];
    let mut t = Tape::new();
    let x = t.constant(input);
    let parts: Vec<_> = lv
        .dilated
        .iter()
        .map(|c| {
            let w = t.constant(store.get(c.weight).clone());
            let b = t.constant(store.get(c.bias.unwrap()).clone());
            t.conv2d(x, w, Some(b), c.spec).unwrap()
        })
        .collect();
    let cat = t.concat(&parts).unwrap();
    let g = t.global_avg_pool(cat);
    let w1 = t.constant(store.get(lv.fc1.weight).clone());
    let w2 = t.constant(store.get(lv.fc2.weight).clone());
    let h = t.linear(g, w1, None).unwrap();
    let h = t.relu(h);
    let z = t.linear(h, w2, None).unwrap();
    let alpha = t.sigmoid(z);
    let weighted = t.mul_channel(cat, alpha).unwrap();
    let groups = t.split(weighted, 3).unwrap();
    let want = t.add_n(&groups).unwrap();
    assert_eq!(tape.value(y), t.value(want));
}

fn features(fx: &mut Fwd, c: [usize; 3], seed: u64) -> FeatureSet {
    FeatureSet {
        l2: fx.input(random(Shape::new(2, c[0], 16, 16), seed)),
        l3: fx.input(random(Shape::new(2, c[1], 8, 8), seed + 1)),
        l4: fx.input(random(Shape::new(2, c[2], 4, 4), seed + 2)),
    }
}

#[test]
fn forward_has_l3_geometry() {
    for enabled in [true, false] {
        let (store, d) = dce([4, 8, 12], 8, enabled, 2);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
        let fs = features(&mut fx, [4, 8, 12], 3);
        let y = d.forward(&mut fx, &fs).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 8, 8, 8));
    }
}

#[test]
fn disabled_block_sums_resized_levels() {
    let (store, d) = dce([4, 8, 12], 8, false, 2);
    assert!(d.levels.is_none());
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let fs = features(&mut fx, [4, 8, 12], 3);
    let y = d.forward(&mut fx, &fs).unwrap();
    let r2 = d.resize_to_reference(&mut fx, fs.l2, 2, (8, 8)).unwrap();
    let r4 = d.resize_to_reference(&mut fx, fs.l4, 4, (8, 8)).unwrap();
    let want = fx.tape.add_n(&[r2, fs.l3, r4]).unwrap();
    assert_eq!(tape.value(y), tape.value(want));
}

#[test]
fn zero_branches_give_zero_output() {
    let (mut store, d) = dce([4, 4, 4], 3, true, 2);
    for lv in d.levels.as_ref().unwrap() {
        for c in &lv.dilated {
            store.get_mut(c.weight).data_mut().fill(0.0);
            store.get_mut(c.bias.unwrap()).data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, Mode::Train);
    let fs = features(&mut fx, [4, 4, 4], 8);
    let y = d.forward(&mut fx, &fs).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}
