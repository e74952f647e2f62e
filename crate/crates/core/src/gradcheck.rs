//! Central-difference verification of tape gradients.

use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Default step under 32-bit floats.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    /// `‖a − b‖ / max(1e-6, ‖a‖, ‖b‖)` over the whole tensor.
    pub tensor_error: f64,
    /// Worst `|a − b| / max(1e-6, |a|, |b|)` over single coordinates.
    pub coordinate_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Largest tensor-level relative error across parameters.
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.tensor_error).fold(0.0, f64::max)
    }

    pub fn max_coordinate_error(&self) -> f64 {
        self.params.iter().map(|p| p.coordinate_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-6f64.max(a.abs()).max(b.abs())
}

struct Evaluation<T: Real> {
    value: f64,
    tape: Tape<T>,
    vars: Vec<Var>,
    loss: Var,
}

fn evaluate<T: Real, F>(f: &F, params: &[Tensor4<T>]) -> Result<Evaluation<T>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    ensure!(tape.value(loss).len() == 1, "checked function must return a scalar");
    let value = tape.scalar(loss);
    Ok(Evaluation { value, tape, vars, loss })
}

/// Compares tape gradients of `f` at `params` against central differences
/// `(f(p + h) − f(p − h)) / 2h`, coordinate by coordinate.
pub fn grad_check<T: Real, F>(f: F, params: &[Tensor4<T>], h: T) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    ensure!(h > T::zero(), "finite-difference step must be positive");
    let Evaluation { tape, vars, loss, .. } = evaluate(&f, params)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor4<T>> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.f64()).collect(),
            None => vec![0.0; params[pi].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            let (up, down) = (orig + h, orig - h);
            work[pi].data_mut()[k] = up;
            let fp = evaluate(&f, &work)?.value;
            work[pi].data_mut()[k] = down;
            let fm = evaluate(&f, &work)?.value;
            work[pi].data_mut()[k] = orig;
            // Divide by the step actually realized after rounding `orig ± h`.
            numeric.push((fp - fm) / (up.f64() - down.f64()));
        }
        let (mut worst, mut worst_index) = (0.0, 0);
        for (k, (&a, &b)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(a, b);
            if e > worst {
                worst = e;
                worst_index = k;
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        out.push(ParamCheck {
            tensor_error: diff / 1e-6f64.max(na).max(nb),
            coordinate_error: worst,
            worst_index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { params: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor4::<f32>::from_vec(Dims::new(1, 1, 1, 4), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Tensor4::<f32>::from_vec(Dims::new(1, 1, 1, 4), vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let report = grad_check(
            |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(v[0], c)?;
                Ok(t.sum(p))
            },
            &[x],
            // dyadic step near 1e-3 keeps every perturbed value exact
            1.0 / 1024.0,
        )
        .unwrap();
        assert!(report.max_coordinate_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor4::<f32>::from_vec(Dims::new(1, 1, 2, 3), vec![-2.0, -0.7, 0.1, 0.4, 1.3, 2.2]).unwrap();
        let report = grad_check(
            |t, v| {
                let s = t.sigmoid(v[0]);
                Ok(t.sum(s))
            },
            &[x],
            DEFAULT_STEP as f32,
        )
        .unwrap();
        assert!(report.max_coordinate_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor4::<f64>::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], 0.0).is_err());
    }
}
