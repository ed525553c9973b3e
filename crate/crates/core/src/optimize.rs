//! Sieve maximum likelihood by limited-memory BFGS ascent.
//!
//! Equality constraints never reach the optimizer: they are eliminated in the
//! spec's layout, so every iterate satisfies them exactly.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InfoEstimator;
use crate::likelihood::{self, pairwise_sum};
use crate::model::{Constraint, Coord, Dataset, GradientMode, ModelClass, ModelSpec, ParamVector, SplineTarget};
use crate::odesolve::SolverOptions;
use crate::splines::{KnotPlacement, KnotVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    CoxWarmStart,
    User(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Stop when `‖∇ℓ‖∞` of the mean log-likelihood falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step moves no coordinate by more than this.
    pub step_tol: f64,
    /// Converged once a quasi-Newton step, found without a diverging trial, improves
    /// the objective by no more than `f_tol · max(|f_k|, |f_{k+1}|, 1)`, twice in a row.
    pub f_tol: f64,
    pub max_iters: usize,
    pub init: Init,
    pub history_size: usize,
    pub solver: SolverOptions,
    /// Weight of the second-difference penalty on the `g` coefficients, on the
    /// mean log-likelihood scale. Zero gives the plain sieve MLE.
    pub g_roughness: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grad_tol: 1e-6,
            step_tol: 1e-10,
            f_tol: 2.2e-9,
            max_iters: 500,
            init: Init::CoxWarmStart,
            history_size: 10,
            solver: SolverOptions::default(),
            g_roughness: 1.0,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0 && self.f_tol >= 0.0) {
            return Err(Error::invalid("fit tolerances must be positive"));
        }
        if !(self.g_roughness >= 0.0 && self.g_roughness.is_finite()) {
            return Err(Error::invalid("g_roughness must be finite and nonnegative"));
        }
        if self.history_size == 0 {
            return Err(Error::invalid("history_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParamVector,
    /// Free coordinates of `theta_hat`.
    pub flat: Vec<f64>,
    /// Mean log-likelihood at `theta_hat`.
    pub loglik: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
    /// Penalized mean log-likelihood after each accepted iteration, starting from the initial point.
    pub trace: Vec<f64>,
    /// Set when the Cox warm start failed and the fit started from zeros.
    pub warm_start_failed: bool,
    /// Covariance of the free coordinates, once inference has run.
    pub covariance: Option<Vec<Vec<f64>>>,
}

/// How interior time knots are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// Equally spaced empirical quantiles of the event times.
    EventQuantiles,
    /// Equally spaced on `[0, max Y]`.
    EqualTime,
}

/// User-facing model configuration; the spec's knots depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model: ModelClass,
    /// Interior knots for `γ` and `η`.
    pub knots: usize,
    pub order: usize,
    /// Interior knots for `g`; defaults to `knots`.
    pub g_knots: Option<usize>,
    pub knot_rule: KnotRule,
    /// `None` selects the class defaults.
    pub constraints: Option<Vec<Constraint>>,
    pub gradient_mode: GradientMode,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub info_estimator: InfoEstimator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        ModelConfig {
            model: ModelClass::Cox,
            knots: 6,
            order: 4,
            g_knots: None,
            knot_rule: KnotRule::EventQuantiles,
            constraints: None,
            gradient_mode: GradientMode::Auto,
            rel_tol: solver.rel_tol,
            abs_tol: solver.abs_tol,
            info_estimator: InfoEstimator::Opg,
        }
    }
}

impl ModelConfig {
    pub fn new(model: ModelClass) -> Self {
        ModelConfig { model, ..ModelConfig::default() }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions { rel_tol: self.rel_tol, abs_tol: self.abs_tol, ..SolverOptions::default() }
    }

    pub fn constraint_set(&self) -> Vec<Constraint> {
        self.constraints.clone().unwrap_or_else(|| self.model.default_constraints())
    }

    /// Knots for `γ` and `η` on `[0, max Y]`.
    pub fn time_basis(&self, data: &Dataset) -> Result<KnotVector> {
        data.require_events()?;
        let hi = data.max_time();
        if hi <= 0.0 {
            return Err(Error::invalid("all follow-up times are zero"));
        }
        let events = data.event_times();
        let placement = match self.knot_rule {
            KnotRule::EventQuantiles => KnotPlacement::Quantile(&events),
            KnotRule::EqualTime => KnotPlacement::EqualTime,
        };
        KnotVector::make((0.0, hi), self.knots, self.order, placement)
    }

    /// Knots for `g` on `[0, lam_max]`.
    pub fn g_basis(&self, lam_max: f64) -> Result<KnotVector> {
        if !(lam_max.is_finite() && lam_max > 0.0) {
            return Err(Error::invalid(format!("g domain upper bound must be positive, got {lam_max}")));
        }
        KnotVector::make((0.0, lam_max), self.g_knots.unwrap_or(self.knots), self.order, KnotPlacement::EqualTime)
    }

    /// The spec for this config on `data`, given the `g` domain bound when the class needs one.
    pub fn build_spec(&self, data: &Dataset, lam_max: Option<f64>) -> Result<ModelSpec> {
        let time = if self.model.has_gamma() || self.model.has_eta() { Some(self.time_basis(data)?) } else { None };
        let g = if self.model.has_g() {
            let lam = lam_max.ok_or_else(|| Error::invalid(format!("model '{}' needs the g domain bound", self.model)))?;
            Some(self.g_basis(lam)?)
        } else {
            None
        };
        let spec = ModelSpec::for_class(self.model, data.d1(), data.d2(), time, g)?
            .with_constraints(self.constraint_set())?
            .with_gradient_mode(self.gradient_mode);
        spec.check_identifiable()?;
        Ok(spec)
    }
}

/// Cox-family fit used to start `g` models and to size the `g` domain.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub spec: ModelSpec,
    pub fit: FitResult,
    /// Largest fitted `Λ_i(Y_i)`.
    pub lam_max: f64,
}

/// The Cox reduction of `spec`: `g` dropped, constraints on `g` removed.
/// Classes without `γ` get the time basis `time`.
pub fn cox_reduction(spec: &ModelSpec, time: &KnotVector) -> Result<ModelSpec> {
    let gamma = Some(spec.gamma.clone().unwrap_or_else(|| time.clone()));
    let class = if spec.eta.iter().any(Option::is_some) { ModelClass::CoxTv } else { ModelClass::Cox };
    let constraints = spec
        .constraints
        .iter()
        .filter(|c| !matches!(c, Constraint::FixLeftValue { target: SplineTarget::G, .. }))
        .cloned()
        .collect();
    let reduced = ModelSpec::new(class, spec.d1, spec.d2, gamma, spec.eta.clone(), None, constraints, spec.gradient_mode)?;
    reduced.check_identifiable()?;
    Ok(reduced)
}

/// Fits the Cox reduction of `spec` from zeros.
pub fn cox_warm_start(data: &Dataset, spec: &ModelSpec, time: &KnotVector, opts: &FitOptions) -> Result<WarmStart> {
    let reduced = cox_reduction(spec, time)?;
    let inner = FitOptions { init: Init::Zeros, ..opts.clone() };
    let fit = fit(data, &reduced, &inner)?;
    let terms = likelihood::obs_terms(data, &fit.theta_hat, &reduced, &opts.solver)?;
    let lam_max = terms.iter().map(|t| t.lam_y).fold(0.0, f64::max);
    Ok(WarmStart { spec: reduced, fit, lam_max })
}

/// Starting point for `spec`: zeros for Cox-family specs or without a warm start;
/// otherwise `β`, `γ`, `η` from the Cox reduction and `g` flat.
pub fn initialize(data: &Dataset, spec: &ModelSpec, warm: Option<&WarmStart>) -> Result<Vec<f64>> {
    let warm = match warm {
        Some(w) if !spec.class.is_cox_family() => w,
        _ => return Ok(vec![0.0; spec.n_free()]),
    };
    let src = &warm.fit.theta_hat;
    let mut theta = spec.zero_params();
    theta.beta.clone_from(&src.beta);
    if spec.gamma.is_some() {
        theta.gamma.clone_from(&src.gamma);
    }
    for (l, e) in theta.eta.iter_mut().enumerate() {
        if !e.is_empty() && e.len() == src.eta[l].len() {
            e.clone_from(&src.eta[l]);
        }
    }
    if spec.gamma.is_none() && spec.free_index_of(Coord::G(0)).is_some() {
        // No baseline to carry over: put the exponential rate given β into a flat g.
        let c = exponential_level(data, &theta.beta)?;
        theta.g.iter_mut().for_each(|v| *v = c);
    }
    spec.pack(&theta)
}

/// `log(ΣΔ / Σ e^{x'β} Y)`.
fn exponential_level(data: &Dataset, beta: &[f64]) -> Result<f64> {
    data.require_events()?;
    let exposure: Vec<f64> = data
        .observations
        .iter()
        .map(|o| o.x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp() * o.y)
        .collect();
    let total = pairwise_sum(&exposure);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("cannot form an exponential starting level"));
    }
    Ok((data.n_events() as f64 / total).ln())
}

/// Fits `config` on `data`, building the `g` domain from a Cox fit when needed.
pub fn fit_config(data: &Dataset, config: &ModelConfig, opts: &FitOptions) -> Result<(ModelSpec, FitResult)> {
    data.validate()?;
    data.require_events()?;
    let opts = FitOptions { solver: config.solver(), ..opts.clone() };
    if !config.model.has_g() {
        let spec = config.build_spec(data, None)?;
        let result = fit(data, &spec, &opts)?;
        return Ok((spec, result));
    }
    let time = config.time_basis(data)?;
    // A g-free stand-in with the right covariate layout, used to shape the reduction.
    let probe = ModelSpec::new(
        config.model,
        data.d1(),
        data.d2(),
        config.model.has_gamma().then(|| time.clone()),
        (0..data.d2()).map(|_| config.model.has_eta().then(|| time.clone())).collect(),
        None,
        config
            .constraint_set()
            .into_iter()
            .filter(|c| !matches!(c, Constraint::FixLeftValue { target: SplineTarget::G, .. }))
            .collect(),
        config.gradient_mode,
    )?;
    let warm = cox_warm_start(data, &probe, &time, &opts)?;
    let spec = config.build_spec(data, Some(warm.lam_max))?;
    let start = match &opts.init {
        Init::User(v) => v.clone(),
        Init::Zeros => vec![0.0; spec.n_free()],
        Init::CoxWarmStart => initialize(data, &spec, Some(&warm))?,
    };
    let result = fit(data, &spec, &FitOptions { init: Init::User(start), ..opts })?;
    Ok((spec, result))
}

/// Maximizes the mean log-likelihood of `data` over the free coordinates of `spec`.
pub fn fit(data: &Dataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    data.validate()?;
    data.require_events()?;
    spec.check_identifiable()?;
    let p = spec.n_free();
    let mut warm_start_failed = false;
    let x0 = match &opts.init {
        Init::Zeros => vec![0.0; p],
        Init::User(v) => {
            if v.len() != p {
                return Err(Error::LengthMismatch { expected: p, got: v.len() });
            }
            v.clone()
        }
        Init::CoxWarmStart if spec.class.is_cox_family() => vec![0.0; p],
        Init::CoxWarmStart => {
            let time = match &spec.gamma {
                Some(k) => k.clone(),
                None => ModelConfig::new(ModelClass::Cox).time_basis(data)?,
            };
            match cox_warm_start(data, spec, &time, opts) {
                Ok(w) => initialize(data, spec, Some(&w))?,
                Err(e) => {
                    warn!("Cox warm start failed ({e}); starting from zeros");
                    warm_start_failed = true;
                    vec![0.0; p]
                }
            }
        }
    };
    let objective = |x: &[f64]| -> Result<Eval> {
        let theta = spec.unpack(x)?;
        let s = likelihood::loglik_summary(data, &theta, spec, &opts.solver)?;
        let mut eval = Eval { value: -s.value, grad: s.grad.into_iter().map(|d| -d).collect(), diag: s.opg_diag };
        eval.value += roughness(spec, &theta.g, opts.g_roughness, &mut eval.grad, &mut eval.diag);
        Ok(eval)
    };
    let mut result = lbfgs(objective, x0, opts)?;
    result.theta_hat = spec.unpack(&result.flat)?;
    let (mut g, mut d) = (vec![0.0; p], Vec::new());
    result.loglik += roughness(spec, &result.theta_hat.g, opts.g_roughness, &mut g, &mut d);
    result.warm_start_failed = warm_start_failed;
    Ok(result)
}

/// `w Σ (b_j − 2b_{j+1} + b_{j+2})²` over the `g` coefficients `b`; adds its gradient
/// (and Hessian diagonal, when `diag` is filled) on the free coordinates.
fn roughness(spec: &ModelSpec, b: &[f64], w: f64, grad: &mut [f64], diag: &mut [f64]) -> f64 {
    if w == 0.0 || b.len() < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..b.len() - 2 {
        let r = b[j] - 2.0 * b[j + 1] + b[j + 2];
        total += r * r;
        for (k, c) in [(j, 1.0), (j + 1, -2.0), (j + 2, 1.0)] {
            if let Some(i) = spec.free_index_of(Coord::G(k)) {
                grad[i] += 2.0 * w * c * r;
                if let Some(v) = diag.get_mut(i) {
                    *v += 2.0 * w * c * c;
                }
            }
        }
    }
    w * total
}

/// Hessian of the `g` roughness penalty on the free coordinates, `2w DᵀD`.
/// Added to the information matrix so that `g` coefficients the data barely
/// reach are pinned by the penalty as they were in the fit.
pub fn roughness_hessian(spec: &ModelSpec, w: f64) -> DMatrix<f64> {
    let p = spec.n_free();
    let mut h = DMatrix::zeros(p, p);
    let q = spec.g.as_ref().map_or(0, |k| k.n_basis());
    if w == 0.0 || q < 3 {
        return h;
    }
    for j in 0..q - 2 {
        let row: Vec<(usize, f64)> = [(j, 1.0), (j + 1, -2.0), (j + 2, 1.0)]
            .into_iter()
            .filter_map(|(k, c)| spec.free_index_of(Coord::G(k)).map(|i| (i, c)))
            .collect();
        for &(a, ca) in &row {
            for &(b, cb) in &row {
                h[(a, b)] += 2.0 * w * ca * cb;
            }
        }
    }
    h
}

const ARMIJO: f64 = 1e-4;
const MAX_SHRINKS: usize = 40;
/// Approximate Wolfe window (Hager–Zhang), used once value changes sink into solver noise.
const WOLFE_DELTA: f64 = 0.1;
const WOLFE_SIGMA: f64 = 0.9;
/// Relative size of value changes treated as solver noise.
const NOISE: f64 = 1e-8;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective value and gradient, with an optional diagonal curvature estimate.
struct Eval {
    value: f64,
    grad: Vec<f64>,
    /// Empty for none.
    diag: Vec<f64>,
}

/// Two-loop recursion: `-H g`, with `H₀` built from `diag` when given.
fn direction(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, diag: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if diag.len() == q.len() {
        let inv = inverse_diag(diag);
        let scale = match memory.back() {
            Some((s, y, _)) => dot(s, y) / y.iter().zip(&inv).map(|(v, w)| v * v * w).sum::<f64>(),
            None => 1.0,
        };
        for (qi, w) in q.iter_mut().zip(&inv) {
            *qi *= scale * w;
        }
    } else if let Some((s, y, _)) = memory.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// `1 / diag`, floored at `1e-10 · max diag`.
fn inverse_diag(diag: &[f64]) -> Vec<f64> {
    let floor = 1e-10 * diag.iter().fold(0.0f64, |m, v| m.max(*v));
    diag.iter().map(|v| 1.0 / v.max(floor).max(f64::MIN_POSITIVE)).collect()
}

/// Sufficient decrease, or the approximate Wolfe conditions when the decrease is within noise.
fn accept(f0: f64, d0: f64, alpha: f64, f1: f64, d1: f64) -> bool {
    if f1 <= f0 + ARMIJO * alpha * d0 {
        return true;
    }
    f1 <= f0 + NOISE * (1.0 + f0.abs()) && d1 >= WOLFE_SIGMA * d0 && d1 <= (2.0 * WOLFE_DELTA - 1.0) * d0
}

/// Minimizer of the cubic (or quadratic) through the last two trial points.
fn interpolate_step(f0: f64, d0: f64, a1: f64, f1: f64, prev: Option<(f64, f64)>) -> f64 {
    let quad = -d0 * a1 * a1 / (2.0 * (f1 - f0 - d0 * a1));
    let Some((a2, f2)) = prev else { return quad };
    let r1 = f1 - f0 - d0 * a1;
    let r2 = f2 - f0 - d0 * a2;
    let denom = a1 - a2;
    let a = (r1 / (a1 * a1) - r2 / (a2 * a2)) / denom;
    let b = (-a2 * r1 / (a1 * a1) + a1 * r2 / (a2 * a2)) / denom;
    if a.abs() < 1e-300 {
        return -d0 / (2.0 * b);
    }
    let disc = b * b - 3.0 * a * d0;
    if disc < 0.0 {
        return quad;
    }
    (-b + disc.sqrt()) / (3.0 * a)
}

/// Minimizes `objective` (value and gradient) from `x0`.
fn lbfgs<F>(objective: F, x0: Vec<f64>, opts: &FitOptions) -> Result<FitResult>
where
    F: Fn(&[f64]) -> Result<Eval>,
{
    let mut x = x0;
    let Eval { value: mut f, grad: mut g, mut diag } = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::invalid("log-likelihood is not finite at the starting point"));
    }
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history_size);
    let mut trace = vec![-f];
    let mut iters = 0;
    let mut small_steps = 0;
    let mut converged = inf_norm(&g) <= opts.grad_tol;
    while !converged && iters < opts.max_iters {
        let mut d = direction(&g, &memory, &diag);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.clear();
            d = direction(&g, &memory, &diag);
            slope = dot(&g, &d);
        }
        // A scaled gradient step has arbitrary length, and so does one cut short by a
        // diverging trial; neither reduction says anything about convergence.
        let quasi_newton = !memory.is_empty();
        let mut diverged = false;
        let mut alpha = if quasi_newton { 1.0 } else { (1.0 / inf_norm(&d)).min(1.0) };
        let mut prev: Option<(f64, f64)> = None;
        let mut shrinks = 0;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            match objective(&trial) {
                Ok(e) if e.value.is_finite() && accept(f, slope, alpha, e.value, dot(&e.grad, &d)) => break Some((trial, e)),
                Ok(Eval { value: ft, .. }) if ft.is_finite() => {
                    let next = interpolate_step(f, slope, alpha, ft, prev);
                    prev = Some((alpha, ft));
                    alpha = if next.is_finite() { next.clamp(0.1 * alpha, 0.5 * alpha) } else { 0.5 * alpha };
                }
                Ok(_) => {
                    prev = None;
                    diverged = true;
                    alpha *= 0.1;
                }
                Err(e) if e.is_divergence() => {
                    debug!("line search trial diverged: {e}");
                    prev = None;
                    diverged = true;
                    alpha *= 0.1;
                }
                Err(e) => return Err(e),
            }
            shrinks += 1;
            if shrinks > MAX_SHRINKS || alpha * inf_norm(&d) < opts.step_tol {
                break None;
            }
        };
        let Some((x_new, Eval { value: f_new, grad: g_new, diag: diag_new })) = accepted else {
            if memory.is_empty() {
                debug!("line search failed along steepest descent at iteration {iters}");
                break;
            }
            memory.clear();
            continue;
        };
        iters += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if memory.len() == opts.history_size {
                memory.pop_front();
            }
            memory.push_back((s.clone(), y, 1.0 / sy));
        }
        let reduction = f - f_new;
        debug!("iteration {iters}: f {f_new:.12e}, reduction {reduction:.3e}, |g| {:.3e}, |s| {:.3e}, memory {}", inf_norm(&g_new), inf_norm(&s), memory.len());
        x = x_new;
        g = g_new;
        diag = diag_new;
        // The first quasi-Newton steps after a restart can be tiny from a poor scaling
        // estimate, so a single small reduction is not enough.
        small_steps = if quasi_newton && !diverged && reduction <= opts.f_tol * f.abs().max(f_new.abs()).max(1.0) { small_steps + 1 } else { 0 };
        converged = inf_norm(&g) <= opts.grad_tol || small_steps >= 2;
        f = f_new;
        trace.push(-f);
        if !converged && inf_norm(&s) < opts.step_tol {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    Ok(FitResult {
        theta_hat: ParamVector { beta: Vec::new(), gamma: Vec::new(), eta: Vec::new(), g: Vec::new() },
        flat: x,
        loglik: -f,
        grad_norm,
        iters,
        converged,
        trace,
        warm_start_failed: false,
        covariance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;

    fn quadratic(x: &[f64]) -> Result<Eval> {
        // Ill-conditioned convex bowl centred at (1, -2, 3).
        let c = [1.0, -2.0, 3.0];
        let w = [1.0, 10.0, 100.0];
        let value = (0..3).map(|i| 0.5 * w[i] * (x[i] - c[i]).powi(2)).sum();
        Ok(Eval { value, grad: (0..3).map(|i| w[i] * (x[i] - c[i])).collect(), diag: Vec::new() })
    }

    #[test]
    fn lbfgs_minimizes_quadratic() {
        let r = lbfgs(quadratic, vec![0.0; 3], &FitOptions { grad_tol: 1e-10, f_tol: 0.0, ..FitOptions::default() }).unwrap();
        assert!(r.converged);
        for (a, b) in r.flat.iter().zip([1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn lbfgs_minimizes_rosenbrock() {
        let rosen = |x: &[f64]| -> Result<Eval> {
            let (a, b) = (x[0], x[1]);
            let value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let grad = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok(Eval { value, grad, diag: Vec::new() })
        };
        let r = lbfgs(rosen, vec![-1.2, 1.0], &FitOptions { grad_tol: 1e-8, f_tol: 0.0, ..FitOptions::default() }).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.flat[0] - 1.0).abs() < 1e-6 && (r.flat[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relative_reduction_stops_early() {
        let loose = FitOptions { grad_tol: 1e-12, f_tol: 1e-3, ..FitOptions::default() };
        let r = lbfgs(quadratic, vec![0.0; 3], &loose).unwrap();
        assert!(r.converged);
        let tight = lbfgs(quadratic, vec![0.0; 3], &FitOptions { f_tol: 0.0, ..loose }).unwrap();
        assert!(r.iters < tight.iters, "{} vs {}", r.iters, tight.iters);
    }

    #[test]
    fn roughness_gradient_and_hessian_match_differences() {
        let t = KnotVector::make((0.0, 2.0), 1, 4, KnotPlacement::EqualTime).unwrap();
        let gk = KnotVector::make((0.0, 3.0), 3, 4, KnotPlacement::EqualTime).unwrap();
        let spec = ModelSpec::for_class(ModelClass::Flex, 2, 0, Some(t), Some(gk)).unwrap();
        let p = spec.n_free();
        let flat: Vec<f64> = (0..p).map(|k| (1.3 * k as f64).sin()).collect();
        let w = 0.7;
        let pen = |x: &[f64]| {
            let (mut g, mut d) = (vec![0.0; p], vec![0.0; p]);
            let v = roughness(&spec, &spec.unpack(x).unwrap().g, w, &mut g, &mut d);
            (v, g, d)
        };
        let (_, grad, diag) = pen(&flat);
        let hess = roughness_hessian(&spec, w);
        let h = 1e-5;
        for k in 0..p {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (pen(&up).0 - pen(&dn).0) / (2.0 * h);
            assert!((grad[k] - fd).abs() < 1e-8, "coord {k}");
            assert!((diag[k] - hess[(k, k)]).abs() < 1e-12);
            for j in 0..p {
                let fdh = (pen(&up).1[j] - pen(&dn).1[j]) / (2.0 * h);
                assert!((hess[(j, k)] - fdh).abs() < 1e-8, "({j}, {k})");
            }
        }
        // Fixed g0 leaves its coordinate out; only g coordinates are touched.
        assert!(spec.free_index_of(Coord::G(0)).is_none());
        assert!(grad.iter().zip(0..p).all(|(v, k)| *v == 0.0 || matches!(spec.free_coords()[k], Coord::G(_))));
    }

    #[test]
    fn cubic_step_recovers_cubic_minimizer() {
        // φ(a) = 1 - 2a + a³ has φ'(0) = -2 and its minimizer at sqrt(2/3).
        let phi = |a: f64| 1.0 - 2.0 * a + a * a * a;
        let a = interpolate_step(1.0, -2.0, 1.0, phi(1.0), Some((2.0, phi(2.0))));
        assert!((a - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    fn exponential_data(events: usize, total_time: f64, n: usize) -> Dataset {
        let rows = (0..n)
            .map(|i| Observation { y: total_time / n as f64, delta: i < events, x: vec![], z: vec![] })
            .collect();
        Dataset::with_default_names(rows).unwrap()
    }

    fn exponential_spec(hi: f64) -> ModelSpec {
        let k = KnotVector::make((0.0, hi), 0, 1, KnotPlacement::EqualTime).unwrap();
        ModelSpec::for_class(ModelClass::Cox, 0, 0, Some(k), None).unwrap()
    }

    #[test]
    fn exponential_mle_is_closed_form() {
        let data = exponential_data(60, 120.0, 100);
        let r = fit(&data, &exponential_spec(2.0), &FitOptions { grad_tol: 1e-10, f_tol: 0.0, ..FitOptions::default() }).unwrap();
        assert!(r.converged);
        assert!((r.flat[0] - (60.0f64 / 120.0).ln()).abs() < 1e-6, "{}", r.flat[0]);
    }

    #[test]
    fn all_censored_data_is_rejected() {
        let data = exponential_data(0, 120.0, 10);
        assert!(matches!(fit(&data, &exponential_spec(2.0), &FitOptions::default()), Err(Error::NoEvents)));
    }

    #[test]
    fn user_init_with_wrong_length_is_rejected() {
        let data = exponential_data(5, 10.0, 10);
        let opts = FitOptions { init: Init::User(vec![0.0, 1.0]), ..FitOptions::default() };
        assert!(matches!(fit(&data, &exponential_spec(2.0), &opts), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn cox_reduction_drops_g_and_its_constraints() {
        let t = KnotVector::make((0.0, 2.0), 2, 4, KnotPlacement::EqualTime).unwrap();
        let gk = KnotVector::make((0.0, 3.0), 2, 4, KnotPlacement::EqualTime).unwrap();
        let flex = ModelSpec::for_class(ModelClass::Flex, 2, 1, Some(t.clone()), Some(gk.clone())).unwrap();
        let red = cox_reduction(&flex, &t).unwrap();
        assert_eq!(red.class, ModelClass::CoxTv);
        assert!(red.g.is_none());
        assert_eq!(red.constraints, vec![Constraint::FixBeta { index: 0, value: 1.0 }]);
        let aft = ModelSpec::for_class(ModelClass::Aft, 2, 0, None, Some(gk)).unwrap();
        let red = cox_reduction(&aft, &t).unwrap();
        assert_eq!(red.class, ModelClass::Cox);
        assert_eq!(red.gamma.as_ref(), Some(&t));
    }
}
