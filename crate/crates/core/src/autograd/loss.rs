//! Scalar loss reductions. Targets and weights are fixed tensors, not graph
//! nodes.

use super::{pointwise::sigmoid, same_shape, BackwardArgs, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `0.5·x²` for `|x| < 1`, `|x| − 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Tape {
    /// Mean binary cross-entropy between probabilities `p` and binary targets,
    /// with `p` clamped to `[clamp, 1 − clamp]`.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor, clamp: f64) -> Result<Var> {
        same_shape("bce_mean", self.shape(p), target.shape())?;
        let m = target.len() as f64;
        let t = target.clone();
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(t.data())
            .map(|(&pv, &tv)| {
                let pc = pv.clamp(clamp, 1.0 - clamp);
                -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / m;
        let clamped: Vec<bool> = self.value(p).data().iter().map(|&pv| pv < clamp || pv > 1.0 - clamp).collect();
        self.record_kinks(clamped.into_iter());
        Ok(self.push(
            Tensor::scalar(loss),
            vec![p],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.item() / m;
                let d = a.inputs[0].data().iter().zip(t.data()).map(|(&pv, &tv)| {
                    if pv < clamp || pv > 1.0 - clamp {
                        0.0
                    } else {
                        -g * (tv / pv - (1.0 - tv) / (1.0 - pv))
                    }
                });
                vec![Some(Tensor::from_vec(a.inputs[0].shape(), d.collect()).unwrap())]
            }),
        ))
    }

    /// `Σ w·[−t·log σ(z) − (1 − t)·log(1 − σ(z))]` over logits `z`.
    pub fn bce_logits_sum(&mut self, logits: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        same_shape("bce_logits_sum", self.shape(logits), target.shape())?;
        same_shape("bce_logits_sum", target.shape(), weight.shape())?;
        let (t, w) = (target.clone(), weight.clone());
        let loss: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(t.data().iter().zip(w.data()))
            .filter(|(_, (_, &wv))| wv != 0.0)
            .map(|(&z, (&tv, &wv))| wv * (softplus(z) - tv * z))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.item();
                let d = a.inputs[0]
                    .data()
                    .iter()
                    .zip(t.data().iter().zip(w.data()))
                    .map(|(&z, (&tv, &wv))| g * wv * (sigmoid(z) - tv));
                vec![Some(Tensor::from_vec(a.inputs[0].shape(), d.collect()).unwrap())]
            }),
        ))
    }

    /// `Σ w·smooth_l1(pred − target)`.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        same_shape("smooth_l1_sum", self.shape(pred), target.shape())?;
        same_shape("smooth_l1_sum", target.shape(), weight.shape())?;
        let (t, w) = (target.clone(), weight.clone());
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(t.data().iter().zip(w.data()))
            .filter(|(_, (_, &wv))| wv != 0.0)
            .map(|(&p, (&tv, &wv))| wv * smooth_l1(p - tv))
            .sum();
        // The quadratic/linear switch is a kink of the second derivative.
        let quadratic: Vec<bool> = self.value(pred).data().iter().zip(t.data()).map(|(&p, &tv)| (p - tv).abs() < 1.0).collect();
        self.record_kinks(quadratic.into_iter());
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.item();
                let d = a.inputs[0]
                    .data()
                    .iter()
                    .zip(t.data().iter().zip(w.data()))
                    .map(|(&p, (&tv, &wv))| g * wv * smooth_l1_grad(p - tv));
                vec![Some(Tensor::from_vec(a.inputs[0].shape(), d.collect()).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn smooth_l1_is_c1_at_one() {
        let h = 1e-7;
        for x0 in [1.0, -1.0] {
            let left = (smooth_l1(x0) - smooth_l1(x0 - h)) / h;
            let right = (smooth_l1(x0 + h) - smooth_l1(x0)) / h;
            // one-sided quotients of a C¹ function agree up to O(h)
            assert!((left - right).abs() < 1e-6);
            assert!((smooth_l1(x0 - 1e-12) - smooth_l1(x0 + 1e-12)).abs() < 1e-11);
        }
        // analytic one-sided derivatives agree exactly
        assert!((smooth_l1_grad(1.0 - 1e-15) - smooth_l1_grad(1.0 + 1e-15)).abs() < 1e-9);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let label = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = t.bce_mean(p, &label, 1e-7).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logit_bce_matches_direct_formula() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-2.0, 0.3, 40.0]).unwrap());
        let tgt = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 0.0]).unwrap();
        let l = t.bce_logits_sum(z, &tgt, &w).unwrap();
        let direct = -(1.0 - sigmoid(-2.0)).ln() - 2.0 * sigmoid(0.3).ln();
        assert!((t.value(l).item() - direct).abs() < 1e-12);
    }
}
