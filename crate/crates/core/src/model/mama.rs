//! Mask-Aware Multi-Attention: inception trunk, supervised mask attention and
//! a global-context branch.

use crate::autograd::{ConvSpec, Tape, Var};
use crate::boxes::BBox;
use crate::error::{reject, Result};
use crate::nn::{Conv, Fwd, Init, LayerNorm};
use crate::tensor::{Shape, Tensor};

/// BCE probability clamp used by the attention loss.
pub const ATT_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct Inception {
    pub b1: Conv,
    pub b3: Conv,
    /// 1×3 then 3×1.
    pub b13: [Conv; 2],
    /// 3×1 then 1×3.
    pub b31: [Conv; 2],
    pub fuse: Conv,
}

#[derive(Clone, Debug)]
pub struct MaskAttention {
    pub conv3: Conv,
    /// Produces the saliency logits.
    pub conv1: Conv,
}

#[derive(Clone, Debug)]
pub struct ContextAttention {
    pub logits: Conv,
    pub reduce: Conv,
    pub norm: LayerNorm,
    pub expand: Conv,
}

#[derive(Clone, Debug)]
pub struct Mama {
    pub channels: usize,
    pub inception: Inception,
    pub mask: MaskAttention,
    pub context: ContextAttention,
}

fn check_channels(c: usize) -> Result<()> {
    if c == 0 || c % 4 != 0 {
        reject!("attention blocks need a channel count divisible by 4, got {c}");
    }
    Ok(())
}

impl Mama {
    pub fn new(b: &mut Init, c: usize) -> Result<Self> {
        check_channels(c)?;
        let q = c / 4;
        let pw = ConvSpec::pointwise();
        let row = ConvSpec::same(1, 3, 1);
        let col = ConvSpec::same(3, 1, 1);
        Ok(b.scoped("mama", |b| Mama {
            channels: c,
            inception: b.scoped("inception", |b| Inception {
                b1: b.conv("b1", q, c, (1, 1), pw, true),
                b3: b.conv("b3", q, c, (3, 3), ConvSpec::same(3, 3, 1), true),
                b13: [b.conv("b13a", q, c, (1, 3), row, true), b.conv("b13b", q, q, (3, 1), col, true)],
                b31: [b.conv("b31a", q, c, (3, 1), col, true), b.conv("b31b", q, q, (1, 3), row, true)],
                // Linear output: variance-preserving gain rather than the ReLU gain.
                fuse: b.conv_with_gain("fuse", c, c, (1, 1), pw, true, std::f64::consts::FRAC_1_SQRT_2),
            }),
            mask: b.scoped("mask", |b| MaskAttention {
                conv3: b.conv("conv3", q, c, (3, 3), ConvSpec::same(3, 3, 1), true),
                conv1: b.conv("conv1", 1, q, (1, 1), pw, true),
            }),
            context: b.scoped("context", |b| ContextAttention {
                logits: b.conv("logits", 1, c, (1, 1), pw, false),
                reduce: b.conv("reduce", q, c, (1, 1), pw, true),
                norm: b.layer_norm("norm", q),
                // Zero init makes the block start as the identity.
                expand: b.conv_zeros("expand", c, q, (1, 1), pw, true),
            }),
        }))
    }

    /// Four branches of `C/4` channels each (ReLU at each branch end),
    /// concatenated and fused back to `C` by a 1×1 conv.
    pub fn inception_forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        check_channels(fx.tape.shape(x).c)?;
        let p = &self.inception;
        let a = fx.conv(x, &p.b1)?;
        let b = fx.conv(x, &p.b3)?;
        let c = fx.conv(x, &p.b13[0])?;
        let c = fx.conv(c, &p.b13[1])?;
        let d = fx.conv(x, &p.b31[0])?;
        let d = fx.conv(d, &p.b31[1])?;
        let parts = [a, b, c, d].map(|v| fx.tape.relu(v));
        let cat = fx.tape.concat(&parts)?;
        fx.conv(cat, &p.fuse)
    }

    /// Saliency logits `conv1×1(ReLU(conv3×3(x)))`.
    pub fn saliency_logits(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let h = fx.conv(x, &self.mask.conv3)?;
        let h = fx.tape.relu(h);
        fx.conv(h, &self.mask.conv1)
    }

    /// Returns `(x ⊗ s, s)` with `s = σ(saliency logits)`.
    pub fn mask_attention(&self, fx: &mut Fwd, x: Var) -> Result<(Var, Var)> {
        let logits = self.saliency_logits(fx, x)?;
        let s = fx.tape.sigmoid(logits);
        let gated = fx.tape.mul_spatial(x, s)?;
        Ok((gated, s))
    }

    /// Global-context block: softmax-weighted pooling, bottleneck transform,
    /// broadcast add.
    pub fn context_attention(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let p = &self.context;
        let logits = fx.conv(x, &p.logits)?;
        let weights = fx.tape.softmax_spatial(logits)?;
        let pooled = fx.tape.attention_pool(x, weights)?;
        let t = fx.conv(pooled, &p.reduce)?;
        let t = fx.layer_norm(t, &p.norm)?;
        let t = fx.tape.relu(t);
        let t = fx.conv(t, &p.expand)?;
        fx.tape.add_channel(x, t)
    }

    /// `I = gated(t) + context(t)` with `t = inception(D)`; also returns the
    /// saliency map for the attention loss.
    pub fn forward(&self, fx: &mut Fwd, d: Var) -> Result<(Var, Var)> {
        let t = self.inception_forward(fx, d)?;
        let (gated, s) = self.mask_attention(fx, t)?;
        let ctx = self.context_attention(fx, t)?;
        Ok((fx.tape.add(gated, ctx)?, s))
    }
}

/// Mean pixel-wise BCE between saliency probabilities and a binary label.
pub fn attention_loss(tape: &mut Tape, saliency: Var, label: &Tensor) -> Result<Var> {
    tape.bce_mean(saliency, label, ATT_CLAMP)
}

/// Binary mask on the `image/stride` grid: a cell is 1 when its center pixel
/// `((j + ½)·stride, (i + ½)·stride)` lies inside any box (bounds inclusive).
pub fn rasterize_mask_label(boxes: &[BBox], image: (usize, usize), stride: usize) -> Result<Tensor> {
    let (h, w) = image;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        reject!("image {h}×{w} is not divisible by mask stride {stride}");
    }
    let s = stride as f64;
    Ok(Tensor::from_fn(Shape::new(1, 1, h / stride, w / stride), |_, _, i, j| {
        let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
        f64::from(u8::from(boxes.iter().any(|b| b.contains_point(cx, cy))))
    }))
}

/// Label used for training: [`rasterize_mask_label`] plus the cell holding
/// each box center, so boxes smaller than a cell are never labeled
/// background.
pub fn training_mask_label(boxes: &[BBox], image: (usize, usize), stride: usize) -> Result<Tensor> {
    let mut m = rasterize_mask_label(boxes, image, stride)?;
    let (gh, gw) = (image.0 / stride, image.1 / stride);
    for b in boxes {
        let (cx, cy) = b.center();
        let j = ((cx / stride as f64).floor().max(0.0) as usize).min(gw - 1);
        let i = ((cy / stride as f64).floor().max(0.0) as usize).min(gh - 1);
        m.set(0, 0, i, j, 1.0);
    }
    Ok(m)
}
