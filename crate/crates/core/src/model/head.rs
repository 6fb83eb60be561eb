//! RPN-style head: shared 3×3 trunk with sibling objectness and delta convs.

use crate::autograd::{ConvSpec, Var};
use crate::error::Result;
use crate::nn::{Conv, Fwd, Init};

/// Gain applied to the initial range of the two output convs so training
/// starts from near-neutral logits and deltas.
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct RpnHead {
    pub anchors_per_cell: usize,
    pub trunk: Conv,
    pub objectness: Conv,
    pub deltas: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N×A×h×w` logits.
    pub objectness: Var,
    /// `N×4A×h×w`; channel `4a + j` holds coordinate `j` of anchor shape `a`.
    pub deltas: Var,
}

impl RpnHead {
    pub fn new(b: &mut Init, channels: usize, anchors_per_cell: usize) -> Self {
        let a = anchors_per_cell;
        b.scoped("head", |b| RpnHead {
            anchors_per_cell: a,
            trunk: b.conv("trunk", channels, channels, (3, 3), ConvSpec::same(3, 3, 1), true),
            objectness: b.conv_with_gain("objectness", a, channels, (1, 1), ConvSpec::pointwise(), true, OUTPUT_GAIN),
            deltas: b.conv_with_gain("deltas", 4 * a, channels, (1, 1), ConvSpec::pointwise(), true, OUTPUT_GAIN),
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<HeadOutput> {
        let t = fx.conv(x, &self.trunk)?;
        let t = fx.tape.relu(t);
        Ok(HeadOutput { objectness: fx.conv(t, &self.objectness)?, deltas: fx.conv(t, &self.deltas)? })
    }
}
