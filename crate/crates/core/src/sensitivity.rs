//! Gradients of `Λ(y; θ)` with respect to the free parameters.
//!
//! Forward mode integrates the sensitivities `F = ∂Λ/∂θ` alongside `Λ`:
//! `F' = f_θ + f_Λ F`, `F(0) = 0`. Adjoint mode first records `Λ` on
//! `[0, y]`, then integrates the costate backwards from `y`:
//! `κ' = -κ f_Λ`, `F₂' = -κ f_θ`, `(κ, F₂)(y) = (1, 0)`, and reads the
//! gradient off `F₂(0)`.

use std::cell::RefCell;

use crate::error::Result;
use crate::model::{ModelSpec, ParamVector, SubjectHazard};
use crate::odesolve::{self, Control, DenseSolution, OdeSystem, SolverOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    /// `Λ(y)`.
    pub lam_y: f64,
    /// `∂Λ(y)/∂θ` over the free coordinates.
    pub grad: Vec<f64>,
}

struct ForwardSystem<'a, 'b> {
    hazard: &'a SubjectHazard<'b>,
}

impl OdeSystem for ForwardSystem<'_, '_> {
    fn dim(&self) -> usize {
        1 + self.hazard.n_free()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let (head, tail) = dy.split_at_mut(1);
        let (f, slope) = self.hazard.eval_full(t, y[0], tail)?;
        head[0] = f;
        for (d, s) in tail.iter_mut().zip(&y[1..]) {
            *d = f * (*d + slope * s);
        }
        Ok(())
    }
}

struct AdjointSystem<'a, 'b> {
    hazard: &'a SubjectHazard<'b>,
    lam: &'a DenseSolution,
    y: f64,
    scratch: RefCell<Vec<f64>>,
}

impl OdeSystem for AdjointSystem<'_, '_> {
    fn dim(&self) -> usize {
        1 + self.hazard.n_free()
    }

    // Reversed time s = y - t.
    fn rhs(&self, s: f64, state: &[f64], dy: &mut [f64]) -> Result<()> {
        let t = (self.y - s).max(0.0);
        let lam = self.lam.eval(t, 0);
        let mut scratch = self.scratch.borrow_mut();
        let (f, slope) = self.hazard.eval_full(t, lam, &mut scratch)?;
        let kappa = state[0];
        dy[0] = kappa * f * slope;
        for (d, p) in dy[1..].iter_mut().zip(scratch.iter()) {
            *d = kappa * f * p;
        }
        Ok(())
    }
}

pub(crate) fn forward_subject(h: &SubjectHazard<'_>, y: f64, opts: &SolverOptions) -> Result<SensitivityResult> {
    let p = h.n_free();
    if y == 0.0 {
        return Ok(SensitivityResult { lam_y: 0.0, grad: vec![0.0; p] });
    }
    let sys = ForwardSystem { hazard: h };
    let (_, state) = odesolve::integrate(&sys, 0.0, &vec![0.0; 1 + p], y, opts, |_| Ok(Control::Continue))?;
    Ok(SensitivityResult { lam_y: state[0], grad: state[1..].to_vec() })
}

pub(crate) fn adjoint_subject(h: &SubjectHazard<'_>, y: f64, opts: &SolverOptions) -> Result<SensitivityResult> {
    let p = h.n_free();
    if y == 0.0 {
        return Ok(SensitivityResult { lam_y: 0.0, grad: vec![0.0; p] });
    }
    let dense = h.solve_dense(y, opts)?;
    let lam_y = dense.terminal()[0];
    let sys = AdjointSystem { hazard: h, lam: &dense, y, scratch: RefCell::new(vec![0.0; p]) };
    let mut init = vec![0.0; 1 + p];
    init[0] = 1.0;
    let (_, state) = odesolve::integrate(&sys, 0.0, &init, y, opts, |_| Ok(Control::Continue))?;
    Ok(SensitivityResult { lam_y, grad: state[1..].to_vec() })
}

fn check_time(y: f64) -> Result<()> {
    if y.is_finite() && y >= 0.0 {
        Ok(())
    } else {
        Err(crate::Error::InvalidInput(format!("evaluation time must be finite and nonnegative, got {y}")))
    }
}

/// `∂Λ(y)/∂θ` by forward sensitivity analysis.
pub fn forward_grad(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], y: f64, opts: &SolverOptions) -> Result<SensitivityResult> {
    check_time(y)?;
    forward_subject(&spec.subject(theta, x, z)?, y, opts)
}

/// `∂Λ(y)/∂θ` by adjoint sensitivity analysis.
pub fn adjoint_grad(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], y: f64, opts: &SolverOptions) -> Result<SensitivityResult> {
    check_time(y)?;
    adjoint_subject(&spec.subject(theta, x, z)?, y, opts)
}

/// Dispatches on the spec's gradient mode.
pub fn lambda_grad(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], y: f64, opts: &SolverOptions) -> Result<SensitivityResult> {
    if spec.use_forward() {
        forward_grad(theta, spec, x, z, y, opts)
    } else {
        adjoint_grad(theta, spec, x, z, y, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cumulative_hazard, rhs_partials, ModelClass};
    use crate::splines::{KnotPlacement, KnotVector};

    fn cubic(lo: f64, hi: f64) -> KnotVector {
        KnotVector::make((lo, hi), 6, 4, KnotPlacement::EqualTime).unwrap()
    }

    fn tight() -> SolverOptions {
        SolverOptions::with_tolerances(1e-11, 1e-13)
    }

    #[test]
    fn single_parameter_exponential() {
        // f = e^θ with θ the only free coordinate: an order-1, knot-free gamma.
        let k = KnotVector::make((0.0, 3.0), 0, 1, KnotPlacement::EqualTime).unwrap();
        let spec = ModelSpec::for_class(ModelClass::Cox, 0, 0, Some(k), None).unwrap();
        let theta = spec.zero_params();
        for r in [forward_grad(&theta, &spec, &[], &[], 2.0, &tight()).unwrap(), adjoint_grad(&theta, &spec, &[], &[], 2.0, &tight()).unwrap()] {
            assert!((r.lam_y - 2.0).abs() < 1e-10);
            assert!((r.grad[0] - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cox_beta_gradient_is_lambda_times_x() {
        let spec = ModelSpec::for_class(ModelClass::Cox, 2, 0, Some(cubic(0.0, 2.0)), None).unwrap();
        let flat: Vec<f64> = (0..spec.n_free()).map(|k| 0.2 * (k as f64).cos()).collect();
        let theta = spec.unpack(&flat).unwrap();
        let x = [0.7, -1.2];
        let r = forward_grad(&theta, &spec, &x, &[], 1.4, &tight()).unwrap();
        for i in 0..2 {
            assert!((r.grad[i] - r.lam_y * x[i]).abs() <= 1e-8 * r.lam_y.abs().max(1.0));
        }
    }

    #[test]
    fn cox_adjoint_matches_quadrature_of_partials() {
        let spec = ModelSpec::for_class(ModelClass::CoxTv, 1, 1, Some(cubic(0.0, 2.0)), None).unwrap();
        let flat: Vec<f64> = (0..spec.n_free()).map(|k| 0.15 * (1.3 * k as f64).sin()).collect();
        let theta = spec.unpack(&flat).unwrap();
        let (x, z, y) = ([0.4], [-0.6], 1.7);
        let r = adjoint_grad(&theta, &spec, &x, &z, y, &tight()).unwrap();
        // Composite Simpson on a fine grid; the integrand is a cubic spline times exp.
        let n = 20_000;
        let h = y / n as f64;
        let mut acc = vec![0.0; spec.n_free()];
        for i in 0..=n {
            let t = i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let (d, _) = rhs_partials(&theta, &spec, &x, &z, t, 0.0).unwrap();
            for (a, v) in acc.iter_mut().zip(d) {
                *a += w * v;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            let q = a * h / 3.0;
            assert!((r.grad[k] - q).abs() <= 1e-7 * q.abs().max(1e-3), "coord {k}: {} vs {q}", r.grad[k]);
        }
    }

    #[test]
    fn flex_forward_matches_adjoint_and_finite_differences() {
        let spec = ModelSpec::for_class(ModelClass::Flex, 2, 1, Some(cubic(0.0, 2.0)), Some(cubic(0.0, 3.0))).unwrap();
        let flat: Vec<f64> = (0..spec.n_free()).map(|k| 0.1 * (0.9 * k as f64 + 0.3).sin()).collect();
        let theta = spec.unpack(&flat).unwrap();
        let (x, z, y) = ([1.0, 0.5], [0.3], 1.6);
        let fine = SolverOptions::with_tolerances(1e-13, 1e-15);
        let fw = forward_grad(&theta, &spec, &x, &z, y, &fine).unwrap();
        let ad = adjoint_grad(&theta, &spec, &x, &z, y, &fine).unwrap();
        let h = 1e-3;
        for k in 0..flat.len() {
            let rel = (fw.grad[k] - ad.grad[k]).abs() / fw.grad[k].abs().max(1e-8);
            assert!(rel < 1e-6, "coord {k}: forward {} adjoint {}", fw.grad[k], ad.grad[k]);
            let lam = |d: f64| {
                let mut v = flat.clone();
                v[k] += d;
                cumulative_hazard(&spec.unpack(&v).unwrap(), &spec, &x, &z, y, &fine).unwrap()
            };
            let fd = (8.0 * (lam(h) - lam(-h)) - (lam(2.0 * h) - lam(-2.0 * h))) / (12.0 * h);
            assert!((fw.grad[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "coord {k}: {} vs fd {fd}", fw.grad[k]);
        }
    }

    #[test]
    fn zero_time_gives_zero_gradient() {
        let spec = ModelSpec::for_class(ModelClass::Cox, 1, 0, Some(cubic(0.0, 2.0)), None).unwrap();
        let theta = spec.zero_params();
        let r = lambda_grad(&theta, &spec, &[1.0], &[], 0.0, &tight()).unwrap();
        assert_eq!(r.lam_y, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
        assert!(lambda_grad(&theta, &spec, &[1.0], &[], -1.0, &tight()).is_err());
    }
}
