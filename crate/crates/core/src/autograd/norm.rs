//! Batch normalization (per channel over N·H·W) and per-sample layer
//! normalization (over C·H·W), both with a per-channel affine.

use super::{BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the estimator folded into running stats.
    pub var: Vec<f64>,
}

fn check_affine(op: &str, x: Shape, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.len() != x.c || beta.len() != x.c {
        reject!("{op}: {} channels but gamma/beta have {}/{} entries", x.c, gamma.len(), beta.len());
    }
    Ok(())
}

/// Visits every element of channel `c` as a flat index.
fn channel_indices(s: Shape, c: usize) -> impl Iterator<Item = usize> {
    (0..s.n).flat_map(move |n| {
        let start = (n * s.c + c) * s.plane();
        start..start + s.plane()
    })
}

/// Affine gradients shared by both normalizations.
fn affine_grads(s: Shape, grad: &[f64], xhat: &[f64], gshape: Shape, bshape: Shape) -> (Tensor, Tensor) {
    let mut dg = vec![0.0; s.c];
    let mut db = vec![0.0; s.c];
    for c in 0..s.c {
        for i in channel_indices(s, c) {
            dg[c] += grad[i] * xhat[i];
            db[c] += grad[i];
        }
    }
    (Tensor::from_vec(gshape, dg).unwrap(), Tensor::from_vec(bshape, db).unwrap())
}

impl Tape {
    /// Training-mode batch norm: normalizes with the batch's own statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let s = xv.shape();
        check_affine("batchnorm", s, self.value(gamma), self.value(beta))?;
        let m = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        let mut xhat = vec![0.0; s.numel()];
        let mut inv_std = vec![0.0; s.c];
        for c in 0..s.c {
            let mu = channel_indices(s, c).map(|i| xv.data()[i]).sum::<f64>() / m;
            let v = channel_indices(s, c).map(|i| (xv.data()[i] - mu).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (v + eps).sqrt();
            for i in channel_indices(s, c) {
                xhat[i] = (xv.data()[i] - mu) * is;
            }
            mean[c] = mu;
            var[c] = if m > 1.0 { v * m / (m - 1.0) } else { v };
            inv_std[c] = is;
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(s);
        for c in 0..s.c {
            for i in channel_indices(s, c) {
                out.data_mut()[i] = g[c] * xhat[i] + b[c];
            }
        }
        let (gshape, bshape) = (self.shape(gamma), self.shape(beta));
        let y = self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let grad = a.grad.data();
                let g = a.inputs[1].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; s.numel()];
                    for c in 0..s.c {
                        let (mut sd, mut sdx) = (0.0, 0.0);
                        for i in channel_indices(s, c) {
                            sd += grad[i];
                            sdx += grad[i] * xhat[i];
                        }
                        let k = g[c] * inv_std[c];
                        for i in channel_indices(s, c) {
                            dx[i] = k * (grad[i] - sd / m - xhat[i] * sdx / m);
                        }
                    }
                    Tensor::from_vec(s, dx).unwrap()
                });
                let (dg, db) = affine_grads(s, grad, &xhat, gshape, bshape);
                vec![dx, Some(dg), Some(db)]
            }),
        );
        Ok((y, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        check_affine("batchnorm", s, self.value(gamma), self.value(beta))?;
        if mean.len() != s.c || var.len() != s.c {
            reject!("batchnorm: running stats have {}/{} entries for {} channels", mean.len(), var.len(), s.c);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; s.numel()];
        for c in 0..s.c {
            for i in channel_indices(s, c) {
                xhat[i] = (xv.data()[i] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(s);
        for c in 0..s.c {
            for i in channel_indices(s, c) {
                out.data_mut()[i] = g[c] * xhat[i] + b[c];
            }
        }
        let (gshape, bshape) = (self.shape(gamma), self.shape(beta));
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let grad = a.grad.data();
                let g = a.inputs[1].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; s.numel()];
                    for c in 0..s.c {
                        for i in channel_indices(s, c) {
                            dx[i] = grad[i] * g[c] * inv_std[c];
                        }
                    }
                    Tensor::from_vec(s, dx).unwrap()
                });
                let (dg, db) = affine_grads(s, grad, &xhat, gshape, bshape);
                vec![dx, Some(dg), Some(db)]
            }),
        ))
    }

    /// Normalizes each batch item over all of its C·H·W values, then applies a
    /// per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        check_affine("layer_norm", s, self.value(gamma), self.value(beta))?;
        let k = s.item();
        let mut xhat = vec![0.0; s.numel()];
        let mut inv_std = vec![0.0; s.n];
        for n in 0..s.n {
            let item = &xv.data()[n * k..(n + 1) * k];
            let mu = item.iter().sum::<f64>() / k as f64;
            let v = item.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k as f64;
            inv_std[n] = 1.0 / (v + eps).sqrt();
            for (j, &x) in item.iter().enumerate() {
                xhat[n * k + j] = (x - mu) * inv_std[n];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| {
            let c = (i / s.plane()) % s.c;
            g[c] * h + b[c]
        }).collect();
        let (gshape, bshape) = (self.shape(gamma), self.shape(beta));
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            vec![x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let grad = a.grad.data();
                let g = a.inputs[1].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; s.numel()];
                    for n in 0..s.n {
                        let r = n * k..(n + 1) * k;
                        let dh: Vec<f64> = r.clone().map(|i| grad[i] * g[(i / s.plane()) % s.c]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / k as f64;
                        let mean_dhx = dh.iter().zip(&xhat[r.clone()]).map(|(d, h)| d * h).sum::<f64>() / k as f64;
                        for (j, i) in r.enumerate() {
                            dx[i] = inv_std[n] * (dh[j] - mean_dh - xhat[i] * mean_dhx);
                        }
                    }
                    Tensor::from_vec(s, dx).unwrap()
                });
                let (dg, db) = affine_grads(s, grad, &xhat, gshape, bshape);
                vec![dx, Some(dg), Some(db)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecshape(c: usize) -> Shape {
        Shape::new(1, 1, 1, c)
    }

    #[test]
    fn infer_identity_statistics() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1.0));
        let g = t.constant(Tensor::ones(vecshape(1)));
        let b = t.constant(Tensor::zeros(vecshape(1)));
        let y = t.batchnorm_infer(x, g, b, &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(t.value(y).item(), 1.0);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(Shape::new(2, 3, 4, 4), -5.0, 5.0, &mut rng));
        let g = t.constant(Tensor::zeros(vecshape(3)));
        let b = t.constant(Tensor::from_vec(vecshape(3), vec![0.5, -1.0, 2.0]).unwrap());
        let (y, _) = t.batchnorm_train(x, g, b, 1e-5).unwrap();
        let y = t.value(y).clone();
        for c in 0..3 {
            assert!(channel_indices(y.shape(), c).all(|i| y.data()[i] == [0.5, -1.0, 2.0][c]));
        }
        let y2 = t.batchnorm_infer(x, g, b, &[0.3; 3], &[2.0; 3], 1e-5).unwrap();
        assert_eq!(t.value(y2), &y);
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let s = Shape::new(2, 4, 5, 5);
        let x = t.constant(Tensor::uniform(s, -3.0, 7.0, &mut rng));
        let g = t.constant(Tensor::ones(vecshape(4)));
        let b = t.constant(Tensor::zeros(vecshape(4)));
        let (y, stats) = t.batchnorm_train(x, g, b, 1e-12).unwrap();
        let y = t.value(y);
        for c in 0..4 {
            let vals: Vec<f64> = channel_indices(s, c).map(|i| y.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / 50.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "channel {c}: {mean} {var}");
            assert!(stats.var[c] > 0.0);
        }
    }

    #[test]
    fn infer_mode_is_linear_under_identity_stats() {
        let mut t = Tape::new();
        let xv = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, -2.0, 3.0, 0.25]).unwrap();
        let x = t.constant(xv.map(|v| 3.0 * v));
        let g = t.constant(Tensor::ones(vecshape(2)));
        let b = t.constant(Tensor::zeros(vecshape(2)));
        let y = t.batchnorm_infer(x, g, b, &[0.0; 2], &[1.0; 2], 0.0).unwrap();
        assert_eq!(t.value(y), &xv.map(|v| 3.0 * v));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(Shape::new(1, 3, 2, 2)));
        let g = t.constant(Tensor::ones(vecshape(2)));
        let b = t.constant(Tensor::zeros(vecshape(2)));
        assert!(t.batchnorm_train(x, g, b, 1e-5).is_err());
        assert!(t.batchnorm_infer(x, g, b, &[0.0; 3], &[1.0; 3], 1e-5).is_err());
        assert!(t.layer_norm(x, g, b, 1e-5).is_err());
    }
}
