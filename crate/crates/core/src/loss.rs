//! Multi-task detection loss: objectness log loss, smooth-L1 box regression
//! and the saliency-mask cross entropy, equally weighted.

use crate::anchors::HeadTargets;
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::head::HeadOutput;
use crate::model::mama::attention_loss;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub att: f64,
}

/// `Σ BCE / N_cls + Σ smooth-L1 / max(N_reg, 1) + mean mask BCE`.
/// The attention term is present only when both `saliency` and `mask` are.
pub fn total_loss(
    tape: &mut Tape,
    out: &HeadOutput,
    targets: &HeadTargets,
    saliency: Option<Var>,
    mask: Option<&Tensor>,
) -> Result<(Var, LossBreakdown)> {
    let cls_sum = tape.bce_logits_sum(out.objectness, &targets.cls_target, &targets.cls_weight)?;
    let cls = tape.scale(cls_sum, 1.0 / targets.n_cls.max(1) as f64);
    let reg_sum = tape.smooth_l1_sum(out.deltas, &targets.reg_target, &targets.reg_weight)?;
    let reg = tape.scale(reg_sum, 1.0 / targets.n_reg.max(1) as f64);
    let mut terms = vec![cls, reg];
    let att = match (saliency, mask) {
        (Some(s), Some(m)) => {
            let a = attention_loss(tape, s, m)?;
            terms.push(a);
            Some(a)
        }
        _ => None,
    };
    let total = tape.add_n(&terms)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        cls: tape.value(cls).item(),
        reg: tape.value(reg).item(),
        att: att.map_or(0.0, |a| tape.value(a).item()),
    };
    Ok((total, breakdown))
}
