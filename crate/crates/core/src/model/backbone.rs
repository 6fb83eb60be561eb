//! Dual mini-backbone with composite connections and feature refinement.

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Var};
use crate::error::{reject, Error, Result};
use crate::nn::{BatchNorm, Conv, Fwd, Init};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
}

impl Default for BackboneConfig {
    /// Four stride-2 stages of widths 16/32/64/128 behind a stride-1 stem, so
    /// the three returned levels sit at strides 4, 8 and 16.
    fn default() -> Self {
        BackboneConfig::new(16, 1, &[(16, 2), (32, 2), (64, 2), (128, 2)])
    }
}

impl BackboneConfig {
    pub fn new(stem_channels: usize, stem_stride: usize, stages: &[(usize, usize)]) -> Self {
        BackboneConfig {
            stem_channels,
            stem_stride,
            stages: stages.iter().map(|&(channels, stride)| StageConfig { channels, stride }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.stages.len() < 3 {
            return cfg_err(format!("backbone needs at least 3 stages, got {}", self.stages.len()));
        }
        if self.stem_channels == 0 || self.stages.iter().any(|s| s.channels == 0) {
            return cfg_err("backbone channel counts must be positive".into());
        }
        if !matches!(self.stem_stride, 1 | 2) || self.stages.iter().any(|s| !matches!(s.stride, 1 | 2)) {
            return cfg_err("backbone strides must be 1 or 2".into());
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stride of stage `k` (1-based) relative to the input image.
    pub fn stage_stride(&self, k: usize) -> usize {
        self.stages[..k].iter().map(|s| s.stride).product::<usize>() * self.stem_stride
    }

    pub fn cumulative_stride(&self) -> usize {
        self.stage_stride(self.stages.len())
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.stem_channels
        } else {
            self.stages[k - 1].channels
        }
    }

    /// 1-based stage indices whose outputs become L2, L3, L4.
    pub fn level_stages(&self) -> [usize; 3] {
        let k = self.stages.len();
        [k - 2, k - 1, k]
    }

    pub fn level_strides(&self) -> [usize; 3] {
        self.level_stages().map(|k| self.stage_stride(k))
    }

    pub fn level_channels(&self) -> [usize; 3] {
        self.level_stages().map(|k| self.stage_channels(k))
    }

    /// Stages whose input receives a composite connection: the ones
    /// producing L3 and L4.
    pub fn injected_stages(&self) -> [usize; 2] {
        let k = self.stages.len();
        [k - 1, k]
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        let stride = self.cumulative_stride();
        if s.c != 3 {
            reject!("backbone expects 3-channel images, got {s}");
        }
        if s.h == 0 || s.w == 0 || s.h % stride != 0 || s.w % stride != 0 {
            reject!("image {}×{} is not divisible by the cumulative stride {stride}", s.h, s.w);
        }
        Ok(())
    }
}

/// conv3×3 (no bias) → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    fn new(b: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        b.scoped(name, |b| ConvBlock {
            conv: b.conv("conv", cout, cin, (3, 3), ConvSpec::new(stride, 1, 1), false),
            bn: b.batchnorm("bn", cout),
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        fx.conv_bn_relu(x, &self.conv, &self.bn)
    }
}

/// One backbone stream: a stem block followed by `K` stage blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: ConvBlock,
    pub stages: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new(b: &mut Init, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(b.scoped(name, |b| {
            let stem = ConvBlock::new(b, "stem", 3, cfg.stem_channels, cfg.stem_stride);
            let stages = (1..=cfg.num_stages())
                .map(|k| {
                    let s = cfg.stages[k - 1];
                    ConvBlock::new(b, &format!("stage{k}"), cfg.stage_channels(k - 1), s.channels, s.stride)
                })
                .collect();
            Backbone { cfg: cfg.clone(), stem, stages }
        }))
    }

    /// Output of stage `k` (1-based) given its input.
    pub fn stage(&self, fx: &mut Fwd, k: usize, x: Var) -> Result<Var> {
        self.stages[k - 1].forward(fx, x)
    }

    /// All stage outputs `[S_1, …, S_K]`.
    pub fn forward(&self, fx: &mut Fwd, image: Var) -> Result<Vec<Var>> {
        self.cfg.check_input(fx.tape.shape(image))?;
        let mut x = self.stem.forward(fx, image)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for k in 1..=self.stages.len() {
            x = self.stage(fx, k, x)?;
            outs.push(x);
        }
        Ok(outs)
    }
}

/// Feature Refinement Module parameters for one injected stage `k`.
#[derive(Clone, Debug)]
pub struct Frm {
    /// ϕ_k's 1×1 projection from A_k's channels to A_{k−1}'s.
    pub project: Conv,
    pub fuse_bn: BatchNorm,
    pub lead_bn: BatchNorm,
    /// φ_k's 3×3 conv applied after ReLU.
    pub refine: Conv,
}

impl Frm {
    pub fn new(b: &mut Init, name: &str, c_prev: usize, c_k: usize) -> Self {
        b.scoped(name, |b| Frm {
            project: b.conv("project", c_prev, c_k, (1, 1), ConvSpec::pointwise(), false),
            fuse_bn: b.batchnorm("fuse_bn", c_prev),
            lead_bn: b.batchnorm("lead_bn", c_prev),
            refine: b.conv("refine", c_prev, c_prev, (3, 3), ConvSpec::same(3, 3, 1), true),
        })
    }
}

/// `f_k = ReLU(BN(A_{k−1} ⊕ ϕ_k(A_k)))` with `ϕ_k` = bilinear resize to
/// A_{k−1}'s grid followed by the 1×1 projection.
pub fn frm_fuse(fx: &mut Fwd, a_k: Var, a_prev: Var, frm: &Frm) -> Result<Var> {
    let s = fx.tape.shape(a_prev);
    let up = fx.tape.resize_bilinear(a_k, s.h, s.w)?;
    let proj = fx.conv(up, &frm.project)?;
    let sum = fx.tape.add(a_prev, proj)?;
    let y = fx.batchnorm(sum, &frm.fuse_bn)?;
    Ok(fx.tape.relu(y))
}

/// `g_k = φ_k(BN(L_{k−1}) ⊗ f_k)` with `φ_k` = ReLU then 3×3 conv.
pub fn frm_inject(fx: &mut Fwd, l_prev: Var, f_k: Var, frm: &Frm) -> Result<Var> {
    let n = fx.batchnorm(l_prev, &frm.lead_bn)?;
    let gated = fx.tape.mul(n, f_k)?;
    let r = fx.tape.relu(gated);
    fx.conv(r, &frm.refine)
}

/// How the assistant stream feeds the lead at one injected stage.
#[derive(Clone, Debug)]
pub enum Link {
    Refine(Frm),
    /// Plain composite connection: bilinear upsample then 1×1 projection.
    Plain(Conv),
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureSet {
    pub l2: Var,
    pub l3: Var,
    pub l4: Var,
}

impl FeatureSet {
    pub fn levels(&self) -> [Var; 3] {
        [self.l2, self.l3, self.l4]
    }
}

/// Per-stage intermediates. Index `k − 1` holds stage `k`; `fused` and
/// `refined` are set only at injected stages and have the shape of stage
/// `k − 1`'s output.
#[derive(Clone, Debug, Default)]
pub struct DualFeatures {
    pub assistant: Vec<Var>,
    pub lead: Vec<Var>,
    pub fused: Vec<Option<Var>>,
    pub refined: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct CompositeBackbone {
    pub cfg: BackboneConfig,
    pub lead: Backbone,
    pub assistant: Option<Backbone>,
    /// `(stage k, link)` for every injected stage.
    pub links: Vec<(usize, Link)>,
}

impl CompositeBackbone {
    /// `composite` enables the assistant stream; `refine` selects FRM over the
    /// plain connection and requires `composite`.
    pub fn new(b: &mut Init, cfg: &BackboneConfig, composite: bool, refine: bool) -> Result<Self> {
        if refine && !composite {
            return Err(Error::Config("feature refinement requires the composite backbone".into()));
        }
        let lead = Backbone::new(b, "lead", cfg)?;
        let assistant = composite.then(|| Backbone::new(b, "assistant", cfg)).transpose()?;
        let mut links = Vec::new();
        if composite {
            for k in cfg.injected_stages() {
                let (c_prev, c_k) = (cfg.stage_channels(k - 1), cfg.stage_channels(k));
                let link = if refine {
                    Link::Refine(Frm::new(b, &format!("frm{k}"), c_prev, c_k))
                } else {
                    Link::Plain(b.conv(&format!("link{k}"), c_prev, c_k, (1, 1), ConvSpec::pointwise(), true))
                };
                links.push((k, link));
            }
        }
        Ok(CompositeBackbone { cfg: cfg.clone(), lead, assistant, links })
    }

    pub fn forward(&self, fx: &mut Fwd, image: Var) -> Result<(FeatureSet, DualFeatures)> {
        self.forward_with_gate(fx, image, None)
    }

    /// As [`forward`](Self::forward); `gate = Some(v)` replaces every fused
    /// map f_k with the constant `v` (used to probe the gate identity).
    pub fn forward_with_gate(&self, fx: &mut Fwd, image: Var, gate: Option<f64>) -> Result<(FeatureSet, DualFeatures)> {
        self.cfg.check_input(fx.tape.shape(image))?;
        let k_max = self.cfg.num_stages();
        let mut dual = DualFeatures { fused: vec![None; k_max], refined: vec![None; k_max], ..Default::default() };
        if let Some(a) = &self.assistant {
            dual.assistant = a.forward(fx, image)?;
        }
        let mut x = self.lead.stem.forward(fx, image)?;
        for k in 1..=k_max {
            if let Some((_, link)) = self.links.iter().find(|(s, _)| *s == k) {
                x = self.inject(fx, k, x, link, gate, &mut dual)?;
            }
            x = self.lead.stage(fx, k, x)?;
            dual.lead.push(x);
        }
        let [l2, l3, l4] = self.cfg.level_stages().map(|k| dual.lead[k - 1]);
        Ok((FeatureSet { l2, l3, l4 }, dual))
    }

    fn inject(&self, fx: &mut Fwd, k: usize, l_prev: Var, link: &Link, gate: Option<f64>, dual: &mut DualFeatures) -> Result<Var> {
        let a_k = dual.assistant[k - 1];
        let addend = match link {
            Link::Refine(frm) => {
                let a_prev = dual.assistant[k - 2];
                let f = match gate {
                    Some(v) => fx.input(Tensor::full(fx.tape.shape(a_prev), v)),
                    None => frm_fuse(fx, a_k, a_prev, frm)?,
                };
                let g = frm_inject(fx, l_prev, f, frm)?;
                dual.fused[k - 1] = Some(f);
                dual.refined[k - 1] = Some(g);
                g
            }
            Link::Plain(conv) => {
                let s = fx.tape.shape(l_prev);
                let up = fx.tape.resize_bilinear(a_k, s.h, s.w)?;
                fx.conv(up, conv)?
            }
        };
        fx.tape.add(l_prev, addend)
    }
}
