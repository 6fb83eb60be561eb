//! Full detector: composite backbone → DCE → MAMA → RPN head.

pub mod backbone;
pub mod dce;
pub mod head;
pub mod mama;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::autograd::{Tape, Var};
use crate::boxes::{BBox, Detection};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Init, Mode, ParamStore};
use crate::postprocess::{detections_from_head, SoftNmsConfig};
use crate::tensor::Tensor;

use backbone::{BackboneConfig, CompositeBackbone, FeatureSet};
use dce::Dce;
use head::{HeadOutput, RpnHead};
use mama::Mama;

/// Which detection blocks are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Blocks {
    /// Assistant backbone with composite connections.
    pub composite: bool,
    /// Feature refinement on the composite connections.
    pub refine: bool,
    pub dce: bool,
    pub mama: bool,
}

impl Blocks {
    pub const ALL: Blocks = Blocks { composite: true, refine: true, dce: true, mama: true };
    pub const NONE: Blocks = Blocks { composite: false, refine: false, dce: false, mama: false };
}

impl Default for Blocks {
    fn default() -> Self {
        Blocks::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub reduction: usize,
    pub blocks: Blocks,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            anchors: AnchorConfig::default(),
            reduction: dce::DEFAULT_REDUCTION,
            blocks: Blocks::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        let feat = self.backbone.level_strides()[1];
        if feat != self.anchors.stride {
            return Err(Error::Config(format!(
                "anchor stride {} must equal the L3 feature stride {feat}",
                self.anchors.stride
            )));
        }
        if self.blocks.refine && !self.blocks.composite {
            return Err(Error::Config("feature refinement requires the composite backbone".into()));
        }
        if self.blocks.mama && self.backbone.level_channels()[1] % 4 != 0 {
            return Err(Error::Config("attention blocks need L3 channels divisible by 4".into()));
        }
        Ok(())
    }

    /// Stride of the detection feature map relative to the image.
    pub fn feature_stride(&self) -> usize {
        self.backbone.level_strides()[1]
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: CompositeBackbone,
    pub dce: Dce,
    pub mama: Option<Mama>,
    pub head: RpnHead,
}

/// Everything a forward pass exposes: levels, fused map `D`, detection map
/// `I`, saliency (when MAMA is on) and the head outputs.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub features: FeatureSet,
    pub dce: Var,
    pub fused: Var,
    pub saliency: Option<Var>,
    pub head: HeadOutput,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Init::new(&mut store, seed);
        let bl = cfg.blocks;
        let backbone = CompositeBackbone::new(&mut b, &cfg.backbone, bl.composite, bl.refine)?;
        let channels = cfg.backbone.level_channels();
        let dce = Dce::new(&mut b, channels, cfg.reduction, bl.dce)?;
        let c = channels[1];
        let mama = bl.mama.then(|| Mama::new(&mut b, c)).transpose()?;
        let head = RpnHead::new(&mut b, c, cfg.anchors.per_cell());
        Ok(Detector { cfg, store, backbone, dce, mama, head })
    }

    pub fn forward(&self, fx: &mut Fwd, images: Var) -> Result<ModelOutput> {
        let (features, _) = self.backbone.forward(fx, images)?;
        let d = self.dce.forward(fx, &features)?;
        let (fused, saliency) = match &self.mama {
            Some(m) => {
                let (i, s) = m.forward(fx, d)?;
                (i, Some(s))
            }
            None => (d, None),
        };
        let head = self.head.forward(fx, fused)?;
        Ok(ModelOutput { features, dce: d, fused, saliency, head })
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<Vec<BBox>> {
        self.cfg.anchors.generate(height, width)
    }

    /// Inference on a batch `N×3×H×W`; one detection list per image.
    pub fn detect(&self, images: &Tensor, nms: &SoftNmsConfig) -> Result<Vec<Vec<Detection>>> {
        let s = images.shape();
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &self.store, Mode::Infer);
        let x = fx.input(images.clone());
        let out = self.forward(&mut fx, x)?;
        let anchors = self.anchors(s.h, s.w)?;
        let (obj, del) = (tape.value(out.head.objectness), tape.value(out.head.deltas));
        (0..s.n)
            .map(|n| detections_from_head(&obj.batch_item(n), &del.batch_item(n), &anchors, &self.cfg.anchors, (s.h, s.w), nms))
            .collect()
    }
}
