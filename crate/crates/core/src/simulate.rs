//! Censored data from known ODE hazards, and replicated fitting studies.
//!
//! The true hazard of a design is
//!
//! ```text
//! λ(t) = α(t) · q(Λ(t)) · exp(x'β + Σ_l z_l η_l(t))
//! ```
//!
//! so `γ = log α` and `g = log q` in model terms.

use std::f64::consts::PI;

use log::debug;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference;
use crate::model::{Constraint, Coord, Dataset, ModelClass, ModelSpec, Observation, SplineTarget};
use crate::odesolve::{self, IvpProblem, Passage, SolverOptions};
use crate::optimize::{self, FitOptions, KnotRule, ModelConfig};

/// Closed-form positive functions used for `α`, `q` and `η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFn {
    Constant { value: f64 },
    /// `scale · t^power`
    Power { scale: f64, power: f64 },
    /// `scale / (shift + t)`
    Reciprocal { scale: f64, shift: f64 },
    /// `log(1 + t) + offset`
    LogShift { offset: f64 },
    /// `offset + cos(freq·t + phase)`
    Cosine { offset: f64, freq: f64, phase: f64 },
    /// `amp · sin(freq·t)`
    Sine { amp: f64, freq: f64 },
}

impl TimeFn {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFn::Constant { value } => value,
            TimeFn::Power { scale, power } => scale * t.powf(power),
            TimeFn::Reciprocal { scale, shift } => scale / (shift + t),
            TimeFn::LogShift { offset } => t.ln_1p() + offset,
            TimeFn::Cosine { offset, freq, phase } => offset + (freq * t + phase).cos(),
            TimeFn::Sine { amp, freq } => amp * (freq * t).sin(),
        }
    }
}

/// Jointly normal block (mean zero) followed by independent Bernoulli columns.
/// The last `n_z` columns are the `z` covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub normal_cov: Vec<Vec<f64>>,
    pub bernoulli: Vec<f64>,
    pub n_z: usize,
}

impl CovariateLaw {
    /// Unit variances with correlation `rho^|i-j|`.
    pub fn ar1(dim: usize, rho: f64, n_z: usize) -> Self {
        let normal_cov = (0..dim).map(|i| (0..dim).map(|j| rho.powi((i as i32 - j as i32).abs())).collect()).collect();
        CovariateLaw { normal_cov, bernoulli: Vec::new(), n_z }
    }

    pub fn dim(&self) -> usize {
        self.normal_cov.len() + self.bernoulli.len()
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        let k = self.normal_cov.len();
        if self.normal_cov.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("normal covariance must be square"));
        }
        if k == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let m = DMatrix::from_fn(k, k, |i, j| self.normal_cov[i][j]);
        m.cholesky().map(|c| c.l()).ok_or_else(|| Error::invalid("normal covariance is not positive definite"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub id: String,
    /// Effects of the `x` covariates.
    pub beta: Vec<f64>,
    pub alpha: TimeFn,
    pub q: TimeFn,
    /// Time-varying effects of the `z` covariates.
    pub eta: Vec<TimeFn>,
    pub covariates: CovariateLaw,
    /// Censoring times are `U(0, censoring_upper)`.
    pub censoring_upper: f64,
    pub n: usize,
    pub seed: u64,
}

/// Built-in design identifiers.
pub const BUILTIN_DESIGNS: [&str; 5] = ["s1", "s2_1", "s2_2", "s2_3", "s2_4"];

/// Censoring bounds giving about 25% censoring, from a 10⁵-draw pilot
/// (`calibrate_censoring` with seed 20240601).
const S2_CENSORING: [f64; 4] = [4.7613, 2.8514, 3.5114, 1.9417];

impl StudyDesign {
    pub fn builtin(id: &str, n: usize, seed: u64) -> Result<Self> {
        let s2_cov = || CovariateLaw { normal_cov: vec![vec![0.5, 0.2], vec![0.2, 0.5]], bernoulli: vec![0.5], n_z: 0 };
        let s2 = |k: usize, alpha: TimeFn, q: TimeFn| StudyDesign {
            id: format!("s2_{k}"),
            beta: vec![1.0, 1.0, 1.0],
            alpha,
            q,
            eta: Vec::new(),
            covariates: s2_cov(),
            censoring_upper: S2_CENSORING[k - 1],
            n,
            seed,
        };
        let log_q = TimeFn::LogShift { offset: 2.0 };
        let design = match id {
            "s1" => StudyDesign {
                id: "s1".into(),
                beta: vec![1.0, -1.0, -1.0, 1.0],
                alpha: TimeFn::Constant { value: 0.5 },
                q: TimeFn::Constant { value: 1.0 },
                eta: vec![TimeFn::Sine { amp: 1.0, freq: 0.75 * PI }],
                covariates: CovariateLaw::ar1(5, 0.5, 1),
                censoring_upper: 3.0,
                n,
                seed,
            },
            "s2_1" => s2(1, TimeFn::Power { scale: 1.0, power: 3.0 }, TimeFn::Constant { value: 1.0 }),
            "s2_2" => s2(2, TimeFn::Constant { value: 1.0 }, TimeFn::Reciprocal { scale: 2.0, shift: 1.0 }),
            "s2_3" => s2(3, TimeFn::LogShift { offset: 0.0 }, log_q),
            "s2_4" => s2(4, TimeFn::Cosine { offset: 1.0, freq: PI, phase: 1.0 }, log_q),
            other => return Err(Error::invalid(format!("unknown setting '{other}' (expected one of {})", BUILTIN_DESIGNS.join(", ")))),
        };
        design.validate()?;
        Ok(design)
    }

    /// Fitting configuration used for `class` on this design.
    pub fn model_config(&self, class: ModelClass) -> ModelConfig {
        let mut cfg = ModelConfig::new(class);
        cfg.knots = 6;
        cfg.order = 4;
        if self.id == "s1" {
            cfg.knot_rule = KnotRule::EventQuantiles;
        } else {
            cfg.knot_rule = KnotRule::EqualTime;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.covariates.dim();
        if self.covariates.n_z > d {
            return Err(Error::invalid("more z covariates than columns"));
        }
        if self.beta.len() != self.d1() {
            return Err(Error::invalid(format!("design has {} x covariates but {} beta values", self.d1(), self.beta.len())));
        }
        if self.eta.len() != self.covariates.n_z {
            return Err(Error::invalid("need one eta function per z covariate"));
        }
        if self.covariates.bernoulli.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("Bernoulli probabilities must lie in [0, 1]"));
        }
        if !(self.censoring_upper > 0.0 && self.censoring_upper.is_finite()) {
            return Err(Error::invalid("censoring bound must be positive"));
        }
        self.covariates.cholesky()?;
        Ok(())
    }

    pub fn d1(&self) -> usize {
        self.covariates.dim() - self.covariates.n_z
    }

    /// Horizon beyond which event times are truncated.
    pub fn t_max(&self) -> f64 {
        10.0 * self.censoring_upper
    }

    /// `x'β`.
    pub fn linear(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    /// True hazard at `(t, Λ)`.
    pub fn rate(&self, x: &[f64], z: &[f64], t: f64, lam: f64) -> f64 {
        let tv: f64 = z.iter().zip(&self.eta).map(|(zl, e)| zl * e.eval(t)).sum();
        self.alpha.eval(t) * self.q.eval(lam) * (self.linear(x) + tv).exp()
    }

    /// True `Λ(t)`.
    pub fn cumulative_hazard(&self, x: &[f64], z: &[f64], t: f64, opts: &SolverOptions) -> Result<f64> {
        if let Some(v) = self.closed_form_lambda(x, z, t) {
            return Ok(v);
        }
        odesolve::solve_ivp(&IvpProblem::new(|s, l| self.rate(x, z, s, l), 0.0, 0.0, t), opts)
    }

    fn closed_form_lambda(&self, x: &[f64], z: &[f64], t: f64) -> Option<f64> {
        if !z.is_empty() {
            return None;
        }
        let ev = self.linear(x).exp();
        match (self.alpha, self.q) {
            (TimeFn::Power { scale, power }, TimeFn::Constant { value }) => Some(value * scale * ev * t.powf(power + 1.0) / (power + 1.0)),
            (TimeFn::Constant { value: c }, TimeFn::Constant { value }) => Some(c * value * ev * t),
            // shift·Λ + Λ²/2 = c·scale·e^v·t
            (TimeFn::Constant { value: c }, TimeFn::Reciprocal { scale, shift }) => {
                let r = c * scale * ev * t;
                Some(-shift + (shift * shift + 2.0 * r).sqrt())
            }
            _ => None,
        }
    }

    fn closed_form_time(&self, x: &[f64], z: &[f64], e: f64) -> Option<f64> {
        if !z.is_empty() {
            return None;
        }
        let ev = self.linear(x).exp();
        match (self.alpha, self.q) {
            (TimeFn::Power { scale, power }, TimeFn::Constant { value }) => Some(((power + 1.0) * e / (value * scale * ev)).powf(1.0 / (power + 1.0))),
            (TimeFn::Constant { value: c }, TimeFn::Constant { value }) => Some(e / (c * value * ev)),
            (TimeFn::Constant { value: c }, TimeFn::Reciprocal { scale, shift }) => Some((shift * e + 0.5 * e * e) / (c * scale * ev)),
            _ => None,
        }
    }
}

/// A sampled event time; `truncated` marks draws that never crossed before `t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventDraw {
    pub time: f64,
    pub truncated: bool,
}

fn sampler_opts() -> SolverOptions {
    SolverOptions::with_tolerances(1e-10, 1e-12)
}

/// Inverse-transform draw: `T` with `Λ(T) = −log u`.
pub fn draw_event_time(design: &StudyDesign, x: &[f64], z: &[f64], u: f64) -> Result<EventDraw> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("uniform draw must lie in (0, 1), got {u}")));
    }
    let e = -u.ln();
    if let Some(time) = design.closed_form_time(x, z, e) {
        let t_max = design.t_max();
        return Ok(if time > t_max { EventDraw { time: t_max, truncated: true } } else { EventDraw { time, truncated: false } });
    }
    let p = IvpProblem::new(|t, l| design.rate(x, z, t, l), 0.0, 0.0, design.t_max());
    Ok(match odesolve::first_passage_time(&p, e, &sampler_opts())? {
        Passage::Crossed(time) => EventDraw { time, truncated: false },
        Passage::NoCrossing => EventDraw { time: design.t_max(), truncated: true },
    })
}

/// Independent stream for one subject of one replicate.
pub fn subject_rng(seed: u64, replicate: u64, subject: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    key[16..24].copy_from_slice(&subject.to_le_bytes());
    key[24..].copy_from_slice(b"odesurv\0");
    ChaCha8Rng::from_seed(key)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Covariates, event time and censoring time of subject `i` in `replicate`.
fn draw_subject(design: &StudyDesign, chol: &DMatrix<f64>, replicate: u64, i: u64) -> Result<(Observation, bool)> {
    let mut rng = subject_rng(design.seed, replicate, i);
    let k = chol.nrows();
    let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let mut cols: Vec<f64> = (0..k).map(|r| (0..=r).map(|c| chol[(r, c)] * eps[c]).sum()).collect();
    for &p in &design.covariates.bernoulli {
        cols.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    }
    let z = cols.split_off(design.d1());
    let x = cols;
    let u = open_unit(&mut rng);
    let c = design.censoring_upper * rng.random::<f64>();
    let t = draw_event_time(design, &x, &z, u)?;
    let delta = t.time <= c;
    Ok((Observation { y: if delta { t.time } else { c }, delta, x, z }, t.truncated))
}

fn column_names(design: &StudyDesign) -> (Vec<String>, Vec<String>) {
    let d1 = design.d1();
    let x = (1..=d1).map(|i| format!("x{i}")).collect();
    let z = (1..=design.covariates.n_z).map(|i| format!("x{}", d1 + i)).collect();
    (x, z)
}

/// One replicate dataset. Identical for identical `(design, replicate)`.
pub fn gen_dataset(design: &StudyDesign, replicate: u64) -> Result<Dataset> {
    design.validate()?;
    let chol = design.covariates.cholesky()?;
    let rows: Vec<Result<(Observation, bool)>> = (0..design.n as u64).into_par_iter().map(|i| draw_subject(design, &chol, replicate, i)).collect();
    let mut obs = Vec::with_capacity(design.n);
    let mut truncated = 0;
    for r in rows {
        let (o, t) = r?;
        truncated += t as usize;
        obs.push(o);
    }
    if truncated > 0 {
        debug!("{truncated} event times truncated at t_max = {}", design.t_max());
    }
    let (xn, zn) = column_names(design);
    Dataset::new(obs, xn, zn)
}

/// Censoring bound `c` of `U(0, c)` giving `target` censoring, by bisection on a pilot sample.
pub fn calibrate_censoring(design: &StudyDesign, target: f64, pilot: usize, seed: u64) -> Result<f64> {
    let chol = design.covariates.cholesky()?;
    // Event times only; censoring is integrated analytically: P(C < T) = E[min(T, c)] / c.
    let wide = StudyDesign { censoring_upper: f64::MAX / 100.0, seed, ..design.clone() };
    let times: Vec<f64> = (0..pilot as u64)
        .into_par_iter()
        .map(|i| draw_subject(&wide, &chol, u64::MAX, i).map(|(o, _)| o.y))
        .collect::<Result<_>>()?;
    let rate = |c: f64| times.iter().map(|t| t.min(c)).sum::<f64>() / (c * times.len() as f64);
    let (mut lo, mut hi) = (1e-6, 1.0);
    while rate(hi) > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::invalid("censoring calibration did not bracket the target"));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Grid-averaged squared error.
pub fn compute_imse(estimate: impl Fn(f64) -> f64, truth: impl Fn(f64) -> f64, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("IMSE grid is empty"));
    }
    Ok(grid.iter().map(|&t| (estimate(t) - truth(t)).powi(2)).sum::<f64>() / grid.len() as f64)
}

/// `n` equispaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Uniform 100-point grid on `[0, 2]` used for IMSE.
pub fn imse_grid() -> Vec<f64> {
    linspace(0.0, 2.0, 100)
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0f64, |d, (i, &s)| {
        let f = cdf(s);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// Asymptotic 1% critical value of the KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_624 / (n as f64).sqrt()
}

/// Fitted estimates of one replicate under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    /// 0-based `β` index of each estimate.
    pub beta_index: Vec<usize>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Per spline target; `None` where the truth is not comparable.
    pub imse: Vec<(String, Option<f64>)>,
    pub iters: usize,
    pub censoring_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefMetrics {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Sample standard deviation of the estimates.
    pub se: f64,
    /// Mean estimated standard error.
    pub ese: f64,
    /// 95% interval coverage.
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImseMetrics {
    pub target: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub design: String,
    pub model: ModelClass,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub coefficients: Vec<CoefMetrics>,
    pub imse: Vec<ImseMetrics>,
    pub mean_censoring_rate: f64,
    pub mean_iters: f64,
}

/// Free `β` coordinates of `spec` as `(free index, β index)`.
fn free_betas(spec: &ModelSpec) -> Vec<(usize, usize)> {
    spec.free_coords()
        .iter()
        .enumerate()
        .filter_map(|(k, c)| match c {
            Coord::Beta(i) => Some((k, *i)),
            _ => None,
        })
        .collect()
}

fn fixed_g_left(spec: &ModelSpec) -> bool {
    spec.constraints.iter().any(|c| matches!(c, Constraint::FixLeftValue { target: SplineTarget::G, .. }))
}

/// Truth for a spline target, shifted as the spec's constraints demand; `None` when not comparable.
fn target_truth(design: &StudyDesign, spec: &ModelSpec, target: SplineTarget) -> Option<Box<dyn Fn(f64) -> f64>> {
    let shift = if spec.g.is_some() && fixed_g_left(spec) { design.q.eval(0.0).ln() } else { 0.0 };
    match target {
        SplineTarget::Eta(l) => {
            let e = *design.eta.get(l)?;
            Some(Box::new(move |t| e.eval(t)))
        }
        SplineTarget::Gamma => {
            let alpha = design.alpha;
            Some(Box::new(move |t| alpha.eval(t).ln() + shift))
        }
        SplineTarget::G => {
            let q = design.q;
            Some(Box::new(move |lam| q.eval(lam).ln() - shift))
        }
    }
}

fn target_grid(spec: &ModelSpec, target: SplineTarget) -> Vec<f64> {
    match (target, &spec.g) {
        (SplineTarget::G, Some(k)) => linspace(0.0, k.domain().1, 100),
        _ => imse_grid(),
    }
}

/// Fit, covariance and IMSE for one dataset.
pub fn fit_replicate(design: &StudyDesign, data: &Dataset, config: &ModelConfig, opts: &FitOptions) -> Result<ReplicateFit> {
    let (spec, fit) = optimize::fit_config(data, config, opts)?;
    if !fit.converged {
        return Err(Error::invalid(format!("fit did not converge (|grad| = {:.3e} after {} iterations)", fit.grad_norm, fit.iters)));
    }
    let info = inference::information_matrix(data, &fit.theta_hat, &spec, &config.solver(), config.info_estimator)?
        + optimize::roughness_hessian(&spec, opts.g_roughness);
    let cov = inference::covariance_holding(&info, data.len())?;
    let se_all = cov.std_errors();
    let betas = free_betas(&spec);
    if let Some((_, i)) = betas.iter().find(|(k, _)| cov.held.contains(k)) {
        return Err(Error::invalid(format!("no information on beta{}", i + 1)));
    }
    let mut imse = Vec::new();
    for target in spec.targets() {
        let est = spec.spline(&fit.theta_hat, target).expect("target exists");
        let value = target_truth(design, &spec, target).and_then(|truth| {
            let grid = target_grid(&spec, target);
            grid.iter().all(|&t| truth(t).is_finite()).then(|| compute_imse(|t| est.value(t).unwrap_or(f64::NAN), &truth, &grid).ok()).flatten()
        });
        imse.push((target.to_string(), value));
    }
    Ok(ReplicateFit {
        beta_index: betas.iter().map(|&(_, i)| i).collect(),
        estimates: betas.iter().map(|&(k, _)| fit.flat[k]).collect(),
        std_errors: betas.iter().map(|&(k, _)| se_all[k]).collect(),
        imse,
        iters: fit.iters,
        censoring_rate: data.censoring_rate(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Aggregates per-replicate outcomes in replicate order.
pub fn aggregate(design: &StudyDesign, model: ModelClass, outcomes: &[std::result::Result<ReplicateFit, String>]) -> Result<StudyMetrics> {
    let total = outcomes.len();
    let ok: Vec<&ReplicateFit> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let failures = total - ok.len();
    if failures * 5 > total || ok.is_empty() {
        return Err(Error::StudyAborted { failed: failures, total });
    }
    let first = ok[0];
    let coefficients = first
        .beta_index
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let truth = design.beta[i];
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[j]).collect();
            let ses: Vec<f64> = ok.iter().map(|r| r.std_errors[j]).collect();
            let covered = ok
                .iter()
                .filter(|r| (r.estimates[j] - truth).abs() <= inference::Z95 * r.std_errors[j])
                .count();
            let m = mean(&est);
            CoefMetrics {
                name: format!("beta{}", i + 1),
                truth,
                mean: m,
                bias: m - truth,
                se: sample_sd(&est),
                ese: mean(&ses),
                cp: covered as f64 / ok.len() as f64,
            }
        })
        .collect();
    let imse = first
        .imse
        .iter()
        .enumerate()
        .filter_map(|(k, (target, _))| {
            let vals: Option<Vec<f64>> = ok.iter().map(|r| r.imse.get(k).and_then(|v| v.1)).collect();
            vals.map(|v| ImseMetrics { target: target.clone(), mean: mean(&v), sd: sample_sd(&v) })
        })
        .collect();
    Ok(StudyMetrics {
        design: design.id.clone(),
        model,
        n: design.n,
        replicates: total,
        failures,
        coefficients,
        imse,
        mean_censoring_rate: mean(&ok.iter().map(|r| r.censoring_rate).collect::<Vec<_>>()),
        mean_iters: mean(&ok.iter().map(|r| r.iters as f64).collect::<Vec<_>>()),
    })
}

/// Generates `replicates` datasets and fits every config to each.
/// `workers` bounds the thread pool; results do not depend on it.
pub fn run_study(design: &StudyDesign, configs: &[ModelConfig], opts: &FitOptions, replicates: usize, workers: Option<usize>) -> Result<Vec<StudyMetrics>> {
    if replicates < 2 {
        return Err(Error::invalid("a study needs at least 2 replicates"));
    }
    design.validate()?;
    let body = || -> Result<Vec<StudyMetrics>> {
        let per_rep: Vec<Vec<std::result::Result<ReplicateFit, String>>> = (0..replicates as u64)
            .into_par_iter()
            .map(|r| match gen_dataset(design, r) {
                Ok(data) => configs
                    .iter()
                    .map(|cfg| {
                        fit_replicate(design, &data, cfg, opts).map_err(|e| {
                            debug!("replicate {r}, model {}: {e}", cfg.model);
                            e.to_string()
                        })
                    })
                    .collect(),
                Err(e) => configs.iter().map(|_| Err(e.to_string())).collect(),
            })
            .collect();
        configs
            .iter()
            .enumerate()
            .map(|(m, cfg)| {
                let outcomes: Vec<_> = per_rep.iter().map(|r| r[m].clone()).collect();
                aggregate(design, cfg.model, &outcomes)
            })
            .collect()
    };
    match workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}
