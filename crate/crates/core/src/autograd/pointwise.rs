//! Elementwise operators and the two broadcast forms the detector needs.

use super::{same_shape, BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Which axes of an `N×C×H×W` tensor a broadcast operand spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// `N×C×1×1`, repeated over space.
    Channel,
    /// `N×1×H×W`, repeated over channels.
    Spatial,
}

impl Broadcast {
    fn check(self, x: Shape, s: Shape) -> Result<()> {
        let ok = match self {
            Broadcast::Channel => s == Shape::new(x.n, x.c, 1, 1),
            Broadcast::Spatial => s == Shape::new(x.n, 1, x.h, x.w),
        };
        if !ok {
            reject!("{self:?} broadcast: operand {s} does not fit {x}");
        }
        Ok(())
    }

    #[inline]
    fn index(self, x: Shape, i: usize) -> usize {
        match self {
            Broadcast::Channel => i / x.plane(),
            Broadcast::Spatial => (i / x.item()) * x.plane() + i % x.plane(),
        }
    }

    fn reduce(self, x: Shape, s: Shape, full: impl Fn(usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(s);
        let d = out.data_mut();
        for i in 0..x.numel() {
            d[self.index(x, i)] += full(i);
        }
        out
    }
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record_kinks(out.data().iter().map(|&v| v > 0.0));
        self.push(
            out,
            vec![x],
            Box::new(|a: &BackwardArgs<'_>| {
                vec![Some(zip_map(a.inputs[0], a.grad, |x, g| if x > 0.0 { g } else { 0.0 }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(
            out,
            vec![x],
            Box::new(|a: &BackwardArgs<'_>| vec![Some(zip_map(a.output, a.grad, |s, g| g * s * (1.0 - s)))]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|a: &BackwardArgs<'_>| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        ))
    }

    /// Sum of any number of same-shape tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = parts.split_first() else {
            reject!("add_n: empty operand list");
        };
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|a: &BackwardArgs<'_>| {
                vec![
                    a.needs[0].then(|| zip_map(a.grad, a.inputs[1], |g, y| g * y)),
                    a.needs[1].then(|| zip_map(a.grad, a.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, vec![x], Box::new(move |a: &BackwardArgs<'_>| vec![Some(a.grad.map(|g| g * k))]))
    }

    /// Sum of all elements, as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            vec![x],
            Box::new(|a: &BackwardArgs<'_>| vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]),
        )
    }

    fn broadcast_mul(&mut self, x: Var, s: Var, kind: Broadcast) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        kind.check(xs, ss)?;
        let sv = self.value(s).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sv[kind.index(xs, i)]).collect();
        let out = Tensor::from_vec(xs, data)?;
        Ok(self.push(
            out,
            vec![x, s],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (xv, sv, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
                let dx = a.needs[0].then(|| {
                    let d = g.iter().enumerate().map(|(i, &gi)| gi * sv[kind.index(xs, i)]).collect();
                    Tensor::from_vec(xs, d).unwrap()
                });
                let ds = a.needs[1].then(|| kind.reduce(xs, ss, |i| g[i] * xv[i]));
                vec![dx, ds]
            }),
        ))
    }

    /// `x ⊗ s` with `s` of shape `N×C×1×1` repeated over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.broadcast_mul(x, s, Broadcast::Channel)
    }

    /// `x ⊗ s` with `s` of shape `N×1×H×W` repeated over channels.
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        self.broadcast_mul(x, s, Broadcast::Spatial)
    }

    /// `x + s` with `s` of shape `N×C×1×1` repeated over space.
    pub fn add_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let kind = Broadcast::Channel;
        let (xs, ss) = (self.shape(x), self.shape(s));
        kind.check(xs, ss)?;
        let sv = self.value(s).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + sv[kind.index(xs, i)]).collect();
        let out = Tensor::from_vec(xs, data)?;
        Ok(self.push(
            out,
            vec![x, s],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                vec![Some(a.grad.clone()), a.needs[1].then(|| kind.reduce(xs, ss, |i| g[i]))]
            }),
        ))
    }
}
