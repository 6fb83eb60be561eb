//! Dynamic Context Enhancement: resize levels to L3, dilated branches, SE
//! channel attention and split-sum fusion.

use crate::autograd::{ConvSpec, Var};
use crate::error::{reject, Error, Result};
use crate::model::backbone::FeatureSet;
use crate::nn::{Conv, Fwd, Init, Linear};

pub const DILATIONS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_REDUCTION: usize = 16;

/// Dilated branches and SE weights for one level.
#[derive(Clone, Debug)]
pub struct DceLevel {
    pub dilated: [Conv; 3],
    /// `W1`: (3C/r) × 3C.
    pub fc1: Linear,
    /// `W2`: 3C × (3C/r).
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Dce {
    pub channels: usize,
    pub reduction: usize,
    /// 1×1 projections applied after resizing L2 and L4.
    pub resize2: Conv,
    pub resize4: Conv,
    /// Levels 2, 3, 4 in order; `None` when the block is ablated and the
    /// resized levels are simply summed.
    pub levels: Option<[DceLevel; 3]>,
}

/// Effective reduction ratio: clamped to `3C` for tiny models, and required
/// to divide `3C`.
pub fn effective_reduction(channels: usize, r: usize) -> Result<usize> {
    let cat = 3 * channels;
    let r = r.min(cat).max(1);
    if cat % r != 0 {
        return Err(Error::Config(format!("reduction ratio {r} does not divide {cat} concatenated channels")));
    }
    Ok(r)
}

impl Dce {
    /// `channels` is `[C2, C3, C4]`; all branches operate at `C3`.
    pub fn new(b: &mut Init, channels: [usize; 3], reduction: usize, enabled: bool) -> Result<Self> {
        let c = channels[1];
        let r = effective_reduction(c, reduction)?;
        b.scoped("dce", |b| {
            let resize2 = b.conv("resize2", c, channels[0], (1, 1), ConvSpec::pointwise(), true);
            let resize4 = b.conv("resize4", c, channels[2], (1, 1), ConvSpec::pointwise(), true);
            let levels = enabled.then(|| {
                [2, 3, 4].map(|i| {
                    b.scoped(&format!("level{i}"), |b| DceLevel {
                        dilated: DILATIONS.map(|d| {
                            b.conv(&format!("dil{d}"), c, c, (3, 3), ConvSpec::same(3, 3, d), true)
                        }),
                        fc1: b.linear("fc1", 3 * c / r, 3 * c, false),
                        fc2: b.linear("fc2", 3 * c, 3 * c / r, false),
                    })
                })
            });
            Ok(Dce { channels: c, reduction: r, resize2, resize4, levels })
        })
    }

    fn level(&self, level: usize) -> Result<&DceLevel> {
        let Some(levels) = &self.levels else {
            reject!("dynamic fusion is disabled in this model");
        };
        match level {
            2..=4 => Ok(&levels[level - 2]),
            _ => reject!("unknown pyramid level {level}"),
        }
    }

    /// L2: adaptive average pool then 1×1 conv; L3: identity; L4: bilinear
    /// then 1×1 conv.
    pub fn resize_to_reference(&self, fx: &mut Fwd, x: Var, level: usize, reference: (usize, usize)) -> Result<Var> {
        let (h, w) = reference;
        match level {
            2 => {
                let p = fx.tape.adaptive_avg_pool(x, h, w)?;
                fx.conv(p, &self.resize2)
            }
            3 => Ok(x),
            4 => {
                let u = fx.tape.resize_bilinear(x, h, w)?;
                fx.conv(u, &self.resize4)
            }
            _ => reject!("unknown pyramid level {level}"),
        }
    }

    /// `[𝒞_{d=1}(x), 𝒞_{d=2}(x), 𝒞_{d=3}(x)]` along channels.
    pub fn dilated_concat(&self, fx: &mut Fwd, x: Var, level: usize) -> Result<Var> {
        let p = self.level(level)?;
        let s = fx.tape.shape(x);
        let min = 2 * DILATIONS[2] + 1;
        if s.h < min || s.w < min {
            reject!("dilated branches need at least {min}×{min} inputs, got {}×{}", s.h, s.w);
        }
        let parts = p.dilated.iter().map(|c| fx.conv(x, c)).collect::<Result<Vec<_>>>()?;
        fx.tape.concat(&parts)
    }

    /// `α = σ(W2·ReLU(W1·GAP(F_cat)))`, shaped `N×3C×1×1`.
    pub fn channel_attention(&self, fx: &mut Fwd, f_cat: Var, level: usize) -> Result<Var> {
        let p = self.level(level)?;
        let g = fx.tape.global_avg_pool(f_cat);
        let z = fx.linear(g, &p.fc1)?;
        let z = fx.tape.relu(z);
        let z = fx.linear(z, &p.fc2)?;
        Ok(fx.tape.sigmoid(z))
    }

    /// `D_i = ψ(F_cat ⊗ α)`.
    pub fn dynamic_fuse(&self, fx: &mut Fwd, x: Var, level: usize) -> Result<Var> {
        let f_cat = self.dilated_concat(fx, x, level)?;
        let alpha = self.channel_attention(fx, f_cat, level)?;
        fuse_with_scores(fx, f_cat, alpha)
    }

    /// `D = D_2 + D_3 + D_4` at L3's geometry, or the plain sum of resized
    /// levels when the block is disabled.
    pub fn forward(&self, fx: &mut Fwd, fs: &FeatureSet) -> Result<Var> {
        let s3 = fx.tape.shape(fs.l3);
        let mut parts = Vec::with_capacity(3);
        for (i, l) in [(2, fs.l2), (3, fs.l3), (4, fs.l4)] {
            let r = self.resize_to_reference(fx, l, i, (s3.h, s3.w))?;
            parts.push(match self.levels {
                Some(_) => self.dynamic_fuse(fx, r, i)?,
                None => r,
            });
        }
        fx.tape.add_n(&parts)
    }
}

/// ψ: scale channels by `alpha`, split into three equal groups, sum them.
pub fn fuse_with_scores(fx: &mut Fwd, f_cat: Var, alpha: Var) -> Result<Var> {
    let weighted = fx.tape.mul_channel(f_cat, alpha)?;
    let groups = fx.tape.split(weighted, 3)?;
    fx.tape.add_n(&groups)
}
