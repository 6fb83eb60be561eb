//! Resampling, pooling and spatial softmax.

use super::{BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

/// Per-output-index source taps `(i0, i1, w1)` for half-pixel-center bilinear
/// sampling along one axis: value = (1 − w1)·x[i0] + w1·x[i1].
fn bilinear_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Half-open input window `[start, end)` covered by output cell `o`.
pub(crate) fn pool_window(inp: usize, out: usize, o: usize) -> (usize, usize) {
    let start = o * inp / out;
    let end = ((o + 1) * inp).div_ceil(out);
    (start, end)
}

impl Tape {
    /// Bilinear resampling with half-pixel centers: output pixel `o` samples
    /// input coordinate `(o + 0.5)·in/out − 0.5`, clamped to the border.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            reject!("resize_bilinear: output size must be positive, got {out_h}×{out_w}");
        }
        let s = self.shape(x);
        if s.h == out_h && s.w == out_w {
            // Half-pixel sampling at equal size reads every pixel at weight 1.
            return Ok(self.scale(x, 1.0));
        }
        let ty = bilinear_taps(s.h, out_h);
        let tx = bilinear_taps(s.w, out_w);
        let os = s.with_hw(out_h, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; os.numel()];
        for nc in 0..s.n * s.c {
            let src = &xv[nc * s.plane()..(nc + 1) * s.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - wx) + src[y0 * s.w + x1] * wx;
                    let bot = src[y1 * s.w + x0] * (1.0 - wx) + src[y1 * s.w + x1] * wx;
                    dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            vec![x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut dx = vec![0.0; s.numel()];
                for nc in 0..s.n * s.c {
                    let gsrc = &g[nc * os.plane()..(nc + 1) * os.plane()];
                    let d = &mut dx[nc * s.plane()..(nc + 1) * s.plane()];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gv = gsrc[oy * out_w + ox];
                            d[y0 * s.w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            d[y0 * s.w + x1] += gv * (1.0 - wy) * wx;
                            d[y1 * s.w + x0] += gv * wy * (1.0 - wx);
                            d[y1 * s.w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(s, dx).unwrap())]
            }),
        ))
    }

    /// Adaptive average pooling: output cell `o` averages the input window
    /// `[⌊o·in/out⌋, ⌈(o+1)·in/out⌉)` on each axis.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 || out_h > s.h || out_w > s.w {
            reject!("adaptive_avg_pool: cannot pool {s} to {out_h}×{out_w}");
        }
        let os = s.with_hw(out_h, out_w);
        let wy: Vec<_> = (0..out_h).map(|o| pool_window(s.h, out_h, o)).collect();
        let wx: Vec<_> = (0..out_w).map(|o| pool_window(s.w, out_w, o)).collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; os.numel()];
        for nc in 0..s.n * s.c {
            let src = &xv[nc * s.plane()..(nc + 1) * s.plane()];
            for (oy, &(y0, y1)) in wy.iter().enumerate() {
                for (ox, &(x0, x1)) in wx.iter().enumerate() {
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        acc += src[yy * s.w + x0..yy * s.w + x1].iter().sum::<f64>();
                    }
                    out[nc * os.plane() + oy * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            vec![x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut dx = vec![0.0; s.numel()];
                for nc in 0..s.n * s.c {
                    for (oy, &(y0, y1)) in wy.iter().enumerate() {
                        for (ox, &(x0, x1)) in wx.iter().enumerate() {
                            let gv = g[nc * os.plane() + oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[nc * s.plane() + yy * s.w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(s, dx).unwrap())]
            }),
        ))
    }

    /// Mean over each channel plane, producing `N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        self.adaptive_avg_pool(x, 1, 1).expect("1×1 pooling is always valid")
    }

    /// Softmax over all spatial positions of a single-channel map `N×1×H×W`.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c != 1 {
            reject!("softmax_spatial: expected one channel, got {s}");
        }
        let p = s.plane();
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            let row = &xv[n * p..(n + 1) * p];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (o, e) in out[n * p..(n + 1) * p].iter_mut().zip(exps) {
                *o = e / z;
            }
        }
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            vec![x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (y, g) = (a.output.data(), a.grad.data());
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    let r = n * p..(n + 1) * p;
                    let dot: f64 = r.clone().map(|i| y[i] * g[i]).sum();
                    for i in r {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(s, dx).unwrap())]
            }),
        ))
    }

    /// Weighted spatial pooling: `out[n, c] = Σ_p weights[n, 0, p] · x[n, c, p]`.
    pub fn attention_pool(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (s, ws) = (self.shape(x), self.shape(weights));
        if ws != Shape::new(s.n, 1, s.h, s.w) {
            reject!("attention_pool: weights {ws} do not fit features {s}");
        }
        let p = s.plane();
        let (xv, wv) = (self.value(x).data(), self.value(weights).data());
        let out: Vec<f64> = (0..s.n * s.c)
            .map(|nc| {
                let n = nc / s.c;
                (0..p).map(|i| xv[nc * p + i] * wv[n * p + i]).sum()
            })
            .collect();
        Ok(self.push(
            Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)?,
            vec![x, weights],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (xv, wv, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
                let dx = a.needs[0].then(|| {
                    let d = (0..s.numel()).map(|i| {
                        let nc = i / p;
                        g[nc] * wv[(nc / s.c) * p + i % p]
                    });
                    Tensor::from_vec(s, d.collect()).unwrap()
                });
                let dw = a.needs[1].then(|| {
                    let mut d = vec![0.0; ws.numel()];
                    for nc in 0..s.n * s.c {
                        let n = nc / s.c;
                        for i in 0..p {
                            d[n * p + i] += g[nc] * xv[nc * p + i];
                        }
                    }
                    Tensor::from_vec(ws, d).unwrap()
                });
                vec![dx, dw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar half-pixel interpolation along one axis, written from the
    /// convention itself rather than the tap table.
    fn interp_1d(v: &[f64], out: usize, o: usize) -> f64 {
        let src = (o as f64 + 0.5) * v.len() as f64 / out as f64 - 0.5;
        if src <= 0.0 {
            return v[0];
        }
        if src >= (v.len() - 1) as f64 {
            return v[v.len() - 1];
        }
        let lo = src.floor();
        v[lo as usize] + (src - lo) * (v[lo as usize + 1] - v[lo as usize])
    }

    #[test]
    fn bilinear_half_pixel_upsample() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap());
        let y = t.resize_bilinear(x, 1, 4).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
        let oracle: Vec<f64> = (0..4).map(|o| interp_1d(&[0.0, 1.0], 4, o)).collect();
        assert_eq!(t.value(y).data(), oracle.as_slice());
    }

    #[test]
    fn bilinear_matches_separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::uniform(Shape::new(1, 1, 3, 5), -1.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.resize_bilinear(x, 7, 2).unwrap();
        let y = t.value(y);
        for oy in 0..7 {
            for ox in 0..2 {
                let cols: Vec<f64> = (0..3).map(|r| interp_1d(&xv.data()[r * 5..r * 5 + 5], 2, ox)).collect();
                assert!((y.at(0, 0, oy, ox) - interp_1d(&cols, 7, oy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(Shape::new(1, 2, 5, 3), 0.7));
        for (h, w) in [(1, 1), (10, 6), (2, 9)] {
            let y = t.resize_bilinear(c, h, w).unwrap();
            assert!(t.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
        let down = t.resize_bilinear(c, 2, 2).unwrap();
        let up = t.resize_bilinear(down, 5, 3).unwrap();
        assert!(t.value(up).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let r = t.constant(Tensor::uniform(Shape::new(1, 1, 4, 4), -2.0, 3.0, &mut rng));
        let (lo, hi) = (t.value(r).min(), t.value(r).max());
        let y = t.resize_bilinear(r, 9, 7).unwrap();
        assert!(t.value(y).min() >= lo - 1e-12 && t.value(y).max() <= hi + 1e-12);
        assert!(t.resize_bilinear(r, 0, 3).is_err());
    }

    #[test]
    fn adaptive_pool_windows() {
        let mut t = Tape::new();
        let ones = t.constant(Tensor::ones(Shape::new(1, 1, 4, 4)));
        let p = t.adaptive_avg_pool(ones, 2, 2).unwrap();
        assert_eq!(t.value(p), &Tensor::ones(Shape::new(1, 1, 2, 2)));

        let g = t.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gp = t.global_avg_pool(g);
        assert_eq!(t.value(gp).item(), 2.5);

        // 5×5 ramp to 2×2: windows [0,3) and [2,5) on each axis.
        let ramp = Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, y, x| (y * 5 + x) as f64);
        let r = t.constant(ramp.clone());
        let rp = t.adaptive_avg_pool(r, 2, 2).unwrap();
        for (oy, (y0, y1)) in [(0, 3), (2, 5)].into_iter().enumerate() {
            for (ox, (x0, x1)) in [(0, 3), (2, 5)].into_iter().enumerate() {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += ramp.at(0, 0, y, x);
                    }
                }
                assert_eq!(t.value(rp).at(0, 0, oy, ox), acc / 9.0);
            }
        }
        assert!(t.adaptive_avg_pool(r, 6, 2).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(Shape::new(2, 1, 3, 4), -30.0, 30.0, &mut rng));
        let y = t.softmax_spatial(x).unwrap();
        for n in 0..2 {
            let s: f64 = t.value(y).data()[n * 12..(n + 1) * 12].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
