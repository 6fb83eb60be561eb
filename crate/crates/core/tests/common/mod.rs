#![allow(dead_code)]

pub mod fixtures;
pub mod oracles;

use densedet::anchors::AnchorConfig;
use densedet::model::backbone::BackboneConfig;
use densedet::model::{Blocks, ModelConfig};
use densedet::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Backbone for 16×16 inputs: L2 and L3 at 8×8, L4 at 4×4, 16 channels.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig::new(4, 1, &[(8, 1), (16, 2), (16, 1), (16, 2)])
}

pub fn tiny_model(blocks: Blocks) -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(),
        anchors: AnchorConfig {
            stride: 2,
            ratios: vec![1.0],
            scales: vec![1.0, 2.0],
            base_size: 3.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
        },
        reduction: 16,
        blocks,
    }
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} exceeds {tol}");
}
