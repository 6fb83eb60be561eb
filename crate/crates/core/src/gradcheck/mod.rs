//! Central finite-difference verification of analytic gradients.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
    /// Coordinates checked per input; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seed used to choose coordinates when `max_coords` is set.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-8, max_coords: None, seed: 0 }
    }
}

impl GradCheckOptions {
    pub fn sampled(max_coords: usize) -> Self {
        GradCheckOptions { max_coords: Some(max_coords), ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose stencil crossed a kink; finite differences are
    /// meaningless there, so they are counted but not scored.
    pub kinks_skipped: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let total = if tape.shape(out).numel() == 1 { out } else { tape.sum(out) };
    if !tape.value(total).all_finite() {
        return Err(Error::NonFinite(format!("grad_check: objective is {}", tape.value(total).item())));
    }
    Ok((tape, vars, total))
}

/// Compares the tape's gradient of `sum(f(inputs))` with central finite
/// differences, returning the worst relative error
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, total) = eval(&f, inputs, true)?;
    let pattern = tape.kink_pattern();
    tape.backward(total)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coords_checked: 0, kinks_skipped: 0 };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !analytic[k].all_finite() {
            return Err(Error::NonFinite(format!("grad_check: analytic gradient of input {k}")));
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + opts.step;
            let (fp, kp) = objective(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - opts.step;
            let (fm, km) = objective(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            if kp != pattern || km != pattern {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if report.coords_checked == 1 || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn objective<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, total) = eval(f, inputs, false)?;
    Ok((tape.value(total).item(), tape.kink_pattern()))
}
