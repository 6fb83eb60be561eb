//! Channel concatenation and splitting.

use super::{BackwardArgs, Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

/// Copies channel range `[c0, c0 + s.c)` of each batch item of `src` (which
/// has `src_c` channels) into the compact `part`.
fn copy_channels(src: &[f64], src_c: usize, part: &mut [f64], s: Shape, c0: usize) {
    let p = s.plane();
    for n in 0..s.n {
        let big = (n * src_c + c0) * p..(n * src_c + c0 + s.c) * p;
        part[n * s.item()..(n + 1) * s.item()].copy_from_slice(&src[big]);
    }
}

impl Tape {
    /// Stacks tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            reject!("concat: empty operand list");
        };
        let s0 = self.shape(first);
        let mut shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                reject!("concat: {s} does not match {s0} outside the channel axis");
            }
            shapes.push(s);
        }
        let total_c: usize = shapes.iter().map(|s| s.c).sum();
        let os = s0.with_c(total_c);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..os.n {
            for (&p, s) in parts.iter().zip(&shapes) {
                out.extend_from_slice(&self.value(p).data()[n * s.item()..(n + 1) * s.item()]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            parts.to_vec(),
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut c0 = 0;
                shapes
                    .iter()
                    .zip(&a.needs)
                    .map(|(s, &need)| {
                        let out = need.then(|| {
                            let mut d = vec![0.0; s.numel()];
                            copy_channels(g, total_c, &mut d, *s, c0);
                            Tensor::from_vec(*s, d).unwrap()
                        });
                        c0 += s.c;
                        out
                    })
                    .collect()
            }),
        ))
    }

    /// Splits the channel axis into `groups` equal parts.
    pub fn split(&mut self, x: Var, groups: usize) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if groups == 0 || s.c % groups != 0 {
            reject!("split: {} channels not divisible into {groups} groups", s.c);
        }
        let ps = s.with_c(s.c / groups);
        Ok((0..groups).map(|k| self.narrow_channels(x, k * ps.c, ps.c)).collect())
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        assert!(start + len <= s.c, "narrow_channels out of range");
        let ps = s.with_c(len);
        let mut out = vec![0.0; ps.numel()];
        copy_channels(self.value(x).data(), s.c, &mut out, ps, start);
        self.push(
            Tensor::from_vec(ps, out).unwrap(),
            vec![x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut d = vec![0.0; s.numel()];
                let p = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p..(n * s.c + start + len) * p;
                    d[dst].copy_from_slice(&a.grad.data()[n * ps.item()..(n + 1) * ps.item()]);
                }
                vec![Some(Tensor::from_vec(s, d).unwrap())]
            }),
        )
    }
}
