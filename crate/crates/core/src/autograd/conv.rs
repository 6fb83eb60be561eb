//! Dilated 2-D cross-correlation via im2col + GEMM.

use super::{BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::gemm::gemm;
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Stride, zero padding and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec { stride, pad_h: pad, pad_w: pad, dilation }
    }

    /// Stride 1 with "same" padding for an odd `kh × kw` kernel at this dilation.
    pub const fn same(kh: usize, kw: usize, dilation: usize) -> Self {
        ConvSpec { stride: 1, pad_h: dilation * (kh / 2), pad_w: dilation * (kw / 2), dilation }
    }

    pub const fn pointwise() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

/// `(size + 2·pad − dilation·(k − 1) − 1) / stride + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_size(size: usize, k: usize, pad: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || dilation == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits every (row, col, input offset) triple of the im2col matrix whose
    /// tap lands inside the input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let s = self.spec;
        let ncol = self.cols();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let base = row * ncol;
                    for oy in 0..self.ho {
                        let iy = (oy * s.stride + ki * s.dilation) as isize - s.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * s.stride + kj * s.dilation) as isize - s.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(base + oy * self.wo + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }
}

fn geometry(x: Shape, w: Shape, spec: ConvSpec) -> Result<Geometry> {
    if w.c != x.c {
        reject!("conv2d: input has {} channels, weight expects {}", x.c, w.c);
    }
    if spec.stride == 0 || spec.dilation == 0 {
        reject!("conv2d: stride and dilation must be positive");
    }
    let ho = conv_output_size(x.h, w.h, spec.pad_h, spec.stride, spec.dilation);
    let wo = conv_output_size(x.w, w.w, spec.pad_w, spec.stride, spec.dilation);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => {
            Ok(Geometry { cin: x.c, h: x.h, w: x.w, kh: w.h, kw: w.w, ho, wo, spec })
        }
        _ => reject!("conv2d: non-positive output size for input {x}, kernel {w}, {spec:?}"),
    }
}

/// Forward convolution without recording; `weight` is `Cout × Cin × kh × kw`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    let g = geometry(xs, ws, spec)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            reject!("conv2d: bias has {} entries for {} output channels", b.len(), ws.n);
        }
    }
    let cout = ws.n;
    let out_shape = Shape::new(xs.n, cout, g.ho, g.wo);
    let item = xs.item();
    let mut out = vec![0.0; out_shape.numel()];
    par::for_each_chunk(&mut out, out_shape.item(), |n, o| {
        let cols = g.im2col(&x.data()[n * item..(n + 1) * item]);
        gemm(cout, g.rows(), g.cols(), 1.0, weight.data(), false, &cols, false, 0.0, o);
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_mut(g.cols()).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

struct ConvGrads {
    dx: Option<Tensor>,
    dw: Option<Tensor>,
    db: Option<Tensor>,
}

fn conv2d_backward(x: &Tensor, weight: &Tensor, grad: &Tensor, spec: ConvSpec, needs: [bool; 3]) -> ConvGrads {
    let (xs, ws) = (x.shape(), weight.shape());
    let g = geometry(xs, ws, spec).expect("geometry validated in forward");
    let cout = ws.n;
    let (k, p) = (g.rows(), g.cols());
    let item = xs.item();
    let gitem = cout * p;
    let per_item = par::map_range(xs.n, |n| {
        let dy = &grad.data()[n * gitem..(n + 1) * gitem];
        let dw = needs[1].then(|| {
            let cols = g.im2col(&x.data()[n * item..(n + 1) * item]);
            let mut dw = vec![0.0; cout * k];
            gemm(cout, p, k, 1.0, dy, false, &cols, true, 0.0, &mut dw);
            dw
        });
        let dx = needs[0].then(|| {
            let mut dcols = vec![0.0; k * p];
            gemm(k, cout, p, 1.0, weight.data(), true, dy, false, 0.0, &mut dcols);
            let mut dx = vec![0.0; item];
            g.col2im(&dcols, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut dx_all = needs[0].then(|| Vec::with_capacity(xs.numel()));
    let mut dw_sum = needs[1].then(|| vec![0.0; ws.numel()]);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
            sum.iter_mut().zip(&dw).for_each(|(s, v)| *s += v);
        }
    }
    let db = needs[2].then(|| {
        let mut db = vec![0.0; cout];
        for n in 0..xs.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * gitem + co * p;
                *acc += grad.data()[start..start + p].iter().sum::<f64>();
            }
        }
        Tensor::from_vec(Shape::new(1, 1, 1, cout), db).unwrap()
    });
    ConvGrads {
        dx: dx_all.map(|d| Tensor::from_vec(xs, d).unwrap()),
        dw: dw_sum.map(|d| Tensor::from_vec(ws, d).unwrap()),
        db,
    }
}

impl Tape {
    /// Cross-correlation of `x` (`N×Cin×H×W`) with `weight` (`Cout×Cin×kh×kw`)
    /// plus an optional per-output-channel `bias` (`Cout` values, any shape).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), spec)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let bias_shape = bias.map(|b| self.shape(b));
        let backward = Box::new(move |a: &BackwardArgs<'_>| {
            let needs = [a.needs[0], a.needs[1], bias_shape.is_some() && a.needs[2]];
            let g = conv2d_backward(a.inputs[0], a.inputs[1], a.grad, spec, needs);
            let mut grads = vec![g.dx, g.dw];
            if let Some(bs) = bias_shape {
                grads.push(g.db.map(|d| d.reshape(bs).unwrap()));
            }
            grads
        });
        Ok(self.push(out, parents, backward))
    }
}
