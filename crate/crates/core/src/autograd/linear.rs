//! Fully connected layer over `N×in×1×1` feature vectors.

use super::{BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::gemm::gemm;
use crate::tensor::{Shape, Tensor};

impl Tape {
    /// `y = W·x + b` for each batch item; `x` is `N×in×1×1` (any spatial size
    /// with `C·H·W = in` is flattened), `weight` is `out × in` stored as
    /// `out×in×1×1`, `bias` has `out` entries.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        let (n, inp, out) = (xs.n, xs.item(), ws.n);
        if ws.item() != inp {
            reject!("linear: weight {ws} expects {} inputs, got {inp}", ws.item());
        }
        if let Some(b) = bias {
            if self.value(b).len() != out {
                reject!("linear: bias has {} entries for {out} outputs", self.value(b).len());
            }
        }
        let mut y = vec![0.0; n * out];
        // Y (n×out) = X (n×in) · Wᵀ
        gemm(n, inp, out, 1.0, self.value(x).data(), false, self.value(weight).data(), true, 0.0, &mut y);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let bshape = bias.map(|b| self.shape(b));
        Ok(self.push(
            Tensor::from_vec(Shape::new(n, out, 1, 1), y)?,
            parents,
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let dx = a.needs[0].then(|| {
                    let mut d = vec![0.0; n * inp];
                    gemm(n, out, inp, 1.0, g, false, a.inputs[1].data(), false, 0.0, &mut d);
                    Tensor::from_vec(xs, d).unwrap()
                });
                let dw = a.needs[1].then(|| {
                    let mut d = vec![0.0; out * inp];
                    gemm(out, n, inp, 1.0, g, true, a.inputs[0].data(), false, 0.0, &mut d);
                    Tensor::from_vec(ws, d).unwrap()
                });
                let mut grads = vec![dx, dw];
                if let Some(bs) = bshape {
                    let mut d = vec![0.0; out];
                    for row in g.chunks(out) {
                        d.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    grads.push(Some(Tensor::from_vec(bs, d).unwrap()));
                }
                grads
            }),
        ))
    }
}
