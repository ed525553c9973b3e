//! Information matrices, standard errors, pointwise bands and survival curves.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood;
use crate::model::{Dataset, ModelSpec, ParamVector, SplineTarget};
use crate::odesolve::SolverOptions;
use crate::sensitivity;

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Largest condition number accepted when inverting `n·I`.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoEstimator {
    /// Mean outer product of per-observation scores.
    Opg,
    /// Negative central-difference Hessian of the mean log-likelihood.
    NumericHessian,
}

impl fmt::Display for InfoEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfoEstimator::Opg => "opg",
            InfoEstimator::NumericHessian => "numeric_hessian",
        })
    }
}

impl FromStr for InfoEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opg" => Ok(InfoEstimator::Opg),
            "numeric_hessian" | "hessian" => Ok(InfoEstimator::NumericHessian),
            _ => Err(Error::invalid(format!("unknown information estimator '{s}'"))),
        }
    }
}

/// Per-observation information over the free coordinates.
pub fn information_matrix(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions, estimator: InfoEstimator) -> Result<DMatrix<f64>> {
    match estimator {
        InfoEstimator::Opg => opg(data, theta, spec, opts),
        InfoEstimator::NumericHessian => numeric_hessian(data, theta, spec, opts),
    }
}

fn opg(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<DMatrix<f64>> {
    let terms = likelihood::obs_terms(data, theta, spec, opts)?;
    let p = spec.n_free();
    let mut info = DMatrix::zeros(p, p);
    for t in &terms {
        let s = DVector::from_column_slice(&t.score);
        info.syger(1.0, &s, &s, 1.0);
    }
    info.fill_upper_triangle_with_lower_triangle();
    Ok(info / terms.len() as f64)
}

fn numeric_hessian(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<DMatrix<f64>> {
    let flat = spec.pack(theta)?;
    let p = flat.len();
    let mut hess = DMatrix::zeros(p, p);
    for k in 0..p {
        let h = 1e-5 * (1.0 + flat[k].abs());
        let mut up = flat.clone();
        let mut dn = flat.clone();
        up[k] += h;
        dn[k] -= h;
        let (_, gu) = likelihood::loglik_flat(data, &up, spec, opts)?;
        let (_, gd) = likelihood::loglik_flat(data, &dn, spec, opts)?;
        for j in 0..p {
            hess[(j, k)] = (gu[j] - gd[j]) / (2.0 * h);
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok(-sym)
}

/// `(n·I)⁻¹` with its condition number.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    pub condition: f64,
    /// Coordinates held at their estimates (see [`covariance_holding`]); their
    /// rows and columns of `matrix` are zero.
    pub held: Vec<usize>,
}

impl Covariance {
    /// NaN for held coordinates.
    pub fn std_errors(&self) -> Vec<f64> {
        self.matrix
            .diagonal()
            .iter()
            .enumerate()
            .map(|(k, v)| if self.held.contains(&k) { f64::NAN } else { v.max(0.0).sqrt() })
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.matrix.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Inverts `n·info` by Cholesky; never falls back to a pseudo-inverse.
pub fn covariance(info: &DMatrix<f64>, n: usize) -> Result<Covariance> {
    if !info.is_square() {
        return Err(Error::invalid("information matrix must be square"));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let scaled = info * n as f64;
    let eig = scaled.clone().symmetric_eigen();
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let chol = scaled.cholesky().ok_or(Error::Singular { condition })?;
    Ok(Covariance { matrix: chol.inverse(), condition, held: Vec::new() })
}

/// Like [`covariance`], but first holds fixed every coordinate whose own
/// information is below `max_k I_kk / MAX_CONDITION`, typically a spline
/// coefficient driven to ±∞ by a knot span without events. The rest is inverted
/// as usual, so the result is the covariance given the held values.
pub fn covariance_holding(info: &DMatrix<f64>, n: usize) -> Result<Covariance> {
    let top = info.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
    let held: Vec<usize> = (0..info.nrows()).filter(|&k| !(info[(k, k)] > top / MAX_CONDITION)).collect();
    if held.is_empty() {
        return covariance(info, n);
    }
    let kept: Vec<usize> = (0..info.nrows()).filter(|k| !held.contains(k)).collect();
    let sub = info.select_rows(&kept).select_columns(&kept);
    let inner = covariance(&sub, n)?;
    let mut matrix = DMatrix::zeros(info.nrows(), info.ncols());
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            matrix[(i, j)] = inner.matrix[(a, b)];
        }
    }
    Ok(Covariance { matrix, condition: inner.condition, held })
}

/// `sqrt([(n·info)⁻¹]_kk)`.
pub fn std_errors(info: &DMatrix<f64>, n: usize) -> Result<Vec<f64>> {
    Ok(covariance(info, n)?.std_errors())
}

/// `estimate ± 1.96·SE`.
pub fn confidence_intervals(estimates: &[f64], se: &[f64]) -> Vec<(f64, f64)> {
    estimates.iter().zip(se).map(|(e, s)| (e - Z95 * s, e + Z95 * s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub t: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Outside the spline's domain: the value is extrapolated.
    pub extrapolated: bool,
}

/// Delta-method band for one spline: `Var s(t) = B(t)' Cov_c B(t)`.
pub fn pointwise_band(spec: &ModelSpec, theta: &ParamVector, cov: &DMatrix<f64>, target: SplineTarget, grid: &[f64]) -> Result<Vec<BandPoint>> {
    let spline = spec.spline(theta, target).ok_or_else(|| Error::invalid(format!("model has no spline '{target}'")))?;
    let free = spec.target_free_indices(target);
    if cov.nrows() != spec.n_free() || cov.ncols() != spec.n_free() {
        return Err(Error::LengthMismatch { expected: spec.n_free(), got: cov.nrows() });
    }
    grid.iter()
        .map(|&t| {
            if !t.is_finite() {
                return Err(Error::invalid("grid points must be finite"));
            }
            let basis = match target {
                SplineTarget::G => spline.knots.local_basis_saturating(t),
                _ => spline.knots.local_basis(t),
            };
            let mut var = 0.0f64;
            for (i, bi) in basis.iter() {
                let Some(fi) = free[i] else { continue };
                for (j, bj) in basis.iter() {
                    if let Some(fj) = free[j] {
                        var += bi * bj * cov[(fi, fj)];
                    }
                }
            }
            let estimate = basis.dot(&spline.coeffs);
            let half = Z95 * var.max(0.0).sqrt();
            Ok(BandPoint { t, estimate, lower: estimate - half, upper: estimate + half, extrapolated: !spline.knots.contains(t) })
        })
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("grid points must be finite and nonnegative"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid must be nondecreasing"));
    }
    Ok(())
}

/// `Λ` on a sorted grid from one dense solve, forced nondecreasing.
pub fn cumulative_hazard_curve(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], grid: &[f64], opts: &SolverOptions) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let Some(&t_end) = grid.last() else { return Ok(Vec::new()) };
    let h = spec.subject(theta, x, z)?;
    let dense = h.solve_dense(t_end, opts)?;
    let mut run = 0.0f64;
    Ok(grid
        .iter()
        .map(|&t| {
            run = run.max(if t == 0.0 { 0.0 } else { dense.eval(t, 0) });
            run
        })
        .collect())
}

/// `S(t) = exp(−Λ(t))` on a sorted grid.
pub fn survival_curve(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], grid: &[f64], opts: &SolverOptions) -> Result<Vec<f64>> {
    Ok(cumulative_hazard_curve(theta, spec, x, z, grid, opts)?.into_iter().map(|l| (-l).exp()).collect())
}

/// Survival with a delta-method band built on the `Λ` scale.
pub fn survival_band(theta: &ParamVector, spec: &ModelSpec, cov: &DMatrix<f64>, x: &[f64], z: &[f64], grid: &[f64], opts: &SolverOptions) -> Result<Vec<BandPoint>> {
    let lam = cumulative_hazard_curve(theta, spec, x, z, grid, opts)?;
    grid.iter()
        .zip(lam)
        .map(|(&t, l)| {
            let grad = sensitivity::lambda_grad(theta, spec, x, z, t, opts)?.grad;
            let g = DVector::from_vec(grad);
            let se = (g.transpose() * cov * &g)[(0, 0)].max(0.0).sqrt();
            Ok(BandPoint {
                t,
                estimate: (-l).exp(),
                lower: (-(l + Z95 * se)).exp(),
                upper: (-(l - Z95 * se)).exp().min(1.0),
                extrapolated: false,
            })
        })
        .collect()
}
