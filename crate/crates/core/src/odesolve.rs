//! Explicit Dormand–Prince 5(4) integration with PI step control,
//! continuous (dense) output and threshold-crossing detection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("maximum number of steps ({steps}) exceeded at t = {t:.6e}")]
    MaxSteps { t: f64, steps: usize },
    #[error("non-finite right-hand side at t = {t:.6e}")]
    NonFinite { t: f64 },
    #[error("right-hand side negative at t = {t:.6e} (value {value:.3e}); trajectory is not monotone")]
    NonMonotone { t: f64, value: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// `None` selects the starting step automatically.
    pub initial_step: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rel_tol: 1e-8, abs_tol: 1e-10, max_steps: 100_000, initial_step: None }
    }
}

impl SolverOptions {
    /// Tight tolerances used when checking against closed forms.
    pub fn oracle() -> Self {
        SolverOptions { rel_tol: 1e-10, abs_tol: 1e-12, ..Default::default() }
    }

    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        SolverOptions { rel_tol, abs_tol, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(OdeError::Invalid("tolerances must be positive".into()).into());
        }
        if self.max_steps == 0 {
            return Err(OdeError::Invalid("max_steps must be positive".into()).into());
        }
        Ok(())
    }
}

/// A first-order system `y' = f(t, y)` of fixed dimension.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Leading components that take part in step-size control.
    fn error_dim(&self) -> usize {
        self.dim()
    }
}

/// Scalar initial value problem with a closure right-hand side.
pub struct IvpProblem<F: Fn(f64, f64) -> f64> {
    pub rhs: F,
    pub t0: f64,
    pub y0: f64,
    pub t_end: f64,
}

impl<F: Fn(f64, f64) -> f64> IvpProblem<F> {
    pub fn new(rhs: F, t0: f64, y0: f64, t_end: f64) -> Self {
        IvpProblem { rhs, t0, y0, t_end }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.y0.is_finite() && self.t_end.is_finite()) {
            return Err(OdeError::Invalid("non-finite t0, y0 or t_end".into()).into());
        }
        if self.t_end < self.t0 {
            return Err(OdeError::Invalid(format!("t_end {} precedes t0 {}", self.t_end, self.t0)).into());
        }
        Ok(())
    }
}

struct ScalarSystem<'a, F: Fn(f64, f64) -> f64> {
    rhs: &'a F,
    require_positive: bool,
}

impl<F: Fn(f64, f64) -> f64> OdeSystem for ScalarSystem<'_, F> {
    fn dim(&self) -> usize {
        1
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let v = (self.rhs)(t, y[0]);
        if self.require_positive && !(v >= 0.0) {
            return Err(OdeError::NonMonotone { t, value: v }.into());
        }
        dy[0] = v;
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output weights.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// Controller constants.
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;

/// One accepted step, with the coefficients of its continuous extension.
pub struct StepView<'a> {
    pub t_old: f64,
    pub h: f64,
    pub y_new: &'a [f64],
    /// Five interpolation vectors of length `dim`, stacked.
    pub cont: &'a [f64],
}

impl StepView<'_> {
    pub fn interpolate(&self, t: f64, component: usize) -> f64 {
        let dim = self.y_new.len();
        interpolate(&self.cont, dim, component, (t - self.t_old) / self.h)
    }
}

fn interpolate(cont: &[f64], dim: usize, i: usize, theta: f64) -> f64 {
    let theta1 = 1.0 - theta;
    cont[i] + theta * (cont[dim + i] + theta1 * (cont[2 * dim + i] + theta * (cont[3 * dim + i] + theta1 * cont[4 * dim + i])))
}

pub enum Control {
    Continue,
    Stop,
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], opts: &SolverOptions) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = opts.abs_tol + opts.rel_tol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn check_finite(t: f64, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { t }.into())
    }
}

fn initial_step<S: OdeSystem>(sys: &S, t0: f64, y0: &[f64], f0: &[f64], span: f64, opts: &SolverOptions) -> Result<f64> {
    let n = y0.len();
    let m = sys.error_dim().clamp(1, n);
    let sk: Vec<f64> = y0[..m].iter().map(|y| opts.abs_tol + opts.rel_tol * y.abs()).collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
    let dny: f64 = y0.iter().zip(&sk).map(|(y, s)| (y / s).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h * f).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(t0 + h, &y1, &mut f1)?;
    check_finite(t0 + h, &f1)?;
    let der2 = f1.iter().zip(f0).zip(&sk).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>().sqrt() / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    Ok((100.0 * h).min(h1).min(span))
}

/// Integrates `sys` from `t0` to `t_end`, calling `observe` after every
/// accepted step. Returns the state at the last accepted time and that time.
pub fn integrate<S, O>(sys: &S, t0: f64, y0: &[f64], t_end: f64, opts: &SolverOptions, mut observe: O) -> Result<(f64, Vec<f64>)>
where
    S: OdeSystem,
    O: FnMut(&StepView<'_>) -> Result<Control>,
{
    opts.validate()?;
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: y0.len() });
    }
    if t_end < t0 {
        return Err(OdeError::Invalid(format!("t_end {t_end} precedes t0 {t0}")).into());
    }
    let mut y = y0.to_vec();
    if t_end == t0 {
        return Ok((t0, y));
    }
    let span = t_end - t0;

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut cont = vec![0.0; 5 * n];

    let mut t = t0;
    sys.rhs(t, &y, &mut k1)?;
    check_finite(t, &k1)?;
    let mut h = match opts.initial_step {
        Some(h0) if h0 > 0.0 => h0.min(span),
        _ => initial_step(sys, t, &y, &k1, span, opts)?,
    };
    let mut fac_old = 1e-4_f64;
    let mut last_rejected = false;
    let mut stage_failure: Option<Error> = None;
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err(OdeError::MaxSteps { t, steps }.into());
        }
        let last = t + 1.01 * h >= t_end;
        if last {
            h = t_end - t;
        }
        if h <= 10.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(stage_failure.unwrap_or(OdeError::StepUnderflow { t, h }.into()));
        }
        steps += 1;

        let t_new = if last { t_end } else { t + h };
        let attempt = (|| -> Result<bool> {
            for i in 0..n {
                stage[i] = y[i] + h * A21 * k1[i];
            }
            sys.rhs(t + C2 * h, &stage, &mut k2)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.rhs(t + C3 * h, &stage, &mut k3)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.rhs(t + C4 * h, &stage, &mut k4)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.rhs(t + C5 * h, &stage, &mut k5)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.rhs(t_new, &stage, &mut k6)?;
            for i in 0..n {
                y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            sys.rhs(t_new, &y_new, &mut k7)?;
            for i in 0..n {
                err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            Ok([&k2, &k3, &k4, &k5, &k6, &k7, &y_new].iter().all(|v| v.iter().all(|x| x.is_finite())))
        })();
        // A trial stage can leave the region where the rate is representable;
        // that is a rejected step, not a failed solve.
        match attempt {
            Ok(true) => stage_failure = None,
            Ok(false) => {
                stage_failure = Some(OdeError::NonFinite { t }.into());
                h *= 0.1;
                last_rejected = true;
                continue;
            }
            Err(e) if matches!(e.root(), Error::Overflow { .. } | Error::Ode(OdeError::NonFinite { .. })) => {
                stage_failure = Some(e);
                h *= 0.1;
                last_rejected = true;
                continue;
            }
            Err(e) => return Err(e),
        }
        let m = sys.error_dim().clamp(1, n);
        let e = error_norm(&err[..m], &y[..m], &y_new[..m], opts);

        let fac11 = e.powf(0.2 - PI_BETA * 0.75);
        if e <= 1.0 {
            let mut fac = fac11 / fac_old.powf(PI_BETA);
            fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = e.max(1e-4);

            for i in 0..n {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                cont[i] = y[i];
                cont[n + i] = ydiff;
                cont[2 * n + i] = bspl;
                cont[3 * n + i] = ydiff - h * k7[i] - bspl;
                cont[4 * n + i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let view = StepView { t_old: t, h, y_new: &y_new, cont: &cont };
            let control = observe(&view)?;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            if last || matches!(control, Control::Stop) {
                return Ok((t, y));
            }
            h = h_new;
            last_rejected = false;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
}

/// Terminal value `y(t_end)`.
pub fn solve_ivp<F: Fn(f64, f64) -> f64>(p: &IvpProblem<F>, opts: &SolverOptions) -> Result<f64> {
    p.validate()?;
    let sys = ScalarSystem { rhs: &p.rhs, require_positive: false };
    let (_, y) = integrate(&sys, p.t0, &[p.y0], p.t_end, opts, |_| Ok(Control::Continue))?;
    Ok(y[0])
}

/// Piecewise continuous extension of an integrated trajectory.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    dim: usize,
    t0: f64,
    y0: Vec<f64>,
    /// Right end of every accepted step.
    breakpoints: Vec<f64>,
    steps: Vec<(f64, f64)>,
    cont: Vec<f64>,
    terminal: Vec<f64>,
}

impl DenseSolution {
    pub fn record<S: OdeSystem>(sys: &S, t0: f64, y0: &[f64], t_end: f64, opts: &SolverOptions) -> Result<Self> {
        let dim = sys.dim();
        let mut steps = Vec::new();
        let mut breakpoints = Vec::new();
        let mut cont = Vec::new();
        let (t_last, terminal) = integrate(sys, t0, y0, t_end, opts, |s| {
            steps.push((s.t_old, s.h));
            breakpoints.push(s.t_old + s.h);
            cont.extend_from_slice(s.cont);
            Ok(Control::Continue)
        })?;
        if let Some(b) = breakpoints.last_mut() {
            *b = t_last;
        }
        Ok(DenseSolution { dim, t0, y0: y0.to_vec(), breakpoints, steps, cont, terminal })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.breakpoints.last().copied().unwrap_or(self.t0)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Value of `component` at `t`, clamped to the integrated interval.
    pub fn eval(&self, t: f64, component: usize) -> f64 {
        if self.steps.is_empty() || t <= self.t0 {
            return self.y0[component];
        }
        if t >= self.t_end() {
            return self.terminal[component];
        }
        let k = self.breakpoints.partition_point(|&b| b < t).min(self.steps.len() - 1);
        let (t_old, h) = self.steps[k];
        let block = &self.cont[k * 5 * self.dim..(k + 1) * 5 * self.dim];
        interpolate(block, self.dim, component, (t - t_old) / h)
    }
}

/// Dense solution of a scalar problem.
pub fn solve_dense<F: Fn(f64, f64) -> f64>(p: &IvpProblem<F>, opts: &SolverOptions) -> Result<DenseSolution> {
    p.validate()?;
    let sys = ScalarSystem { rhs: &p.rhs, require_positive: false };
    DenseSolution::record(&sys, p.t0, &[p.y0], p.t_end, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Passage {
    Crossed(f64),
    NoCrossing,
}

/// First time the monotone trajectory of `p` reaches `threshold`, searching up to `p.t_end`.
pub fn first_passage_time<F: Fn(f64, f64) -> f64>(p: &IvpProblem<F>, threshold: f64, opts: &SolverOptions) -> Result<Passage> {
    p.validate()?;
    if !(threshold > p.y0) {
        return Err(OdeError::Invalid(format!("threshold {threshold} must exceed the initial value {}", p.y0)).into());
    }
    let sys = ScalarSystem { rhs: &p.rhs, require_positive: true };
    let mut hit = None;
    integrate(&sys, p.t0, &[p.y0], p.t_end, opts, |s| {
        if s.y_new[0] >= threshold {
            let (mut lo, mut hi) = (s.t_old, s.t_old + s.h);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if s.interpolate(mid, 0) < threshold {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hit = Some(0.5 * (lo + hi));
            Ok(Control::Stop)
        } else {
            Ok(Control::Continue)
        }
    })?;
    Ok(hit.map_or(Passage::NoCrossing, Passage::Crossed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle() -> SolverOptions {
        SolverOptions::oracle()
    }

    #[test]
    fn constant_rhs() {
        let p = IvpProblem::new(|_, _| 1.0, 0.0, 0.0, 2.0);
        assert!((solve_ivp(&p, &oracle()).unwrap() - 2.0).abs() < 1e-10);
        let d = solve_dense(&p, &oracle()).unwrap();
        assert!((d.eval(0.7, 0) - 0.7).abs() < 1e-10);
    }

    #[test]
    fn exponential_growth() {
        let p = IvpProblem::new(|_, y| y, 0.0, 1.0, 1.0);
        assert!((solve_ivp(&p, &oracle()).unwrap() - std::f64::consts::E).abs() < 1e-8);
        let d = solve_dense(&p, &oracle()).unwrap();
        assert!((d.eval(0.5, 0) - 0.5f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn cubic_hazard_closed_form() {
        let p = IvpProblem::new(|t: f64, _| t.powi(3), 0.0, 0.0, 2.0);
        assert!((solve_ivp(&p, &oracle()).unwrap() - 4.0).abs() < 1e-8);
        let d = solve_dense(&p, &oracle()).unwrap();
        assert!((d.eval(1.3, 0) - 1.3f64.powi(4) / 4.0).abs() < 1e-7);
    }

    #[test]
    fn zero_length_interval() {
        let p = IvpProblem::new(|_, _| 1.0, 1.0, 3.0, 1.0);
        assert_eq!(solve_ivp(&p, &oracle()).unwrap(), 3.0);
        assert_eq!(solve_dense(&p, &oracle()).unwrap().eval(1.0, 0), 3.0);
    }

    #[test]
    fn errors_are_distinct() {
        let blow = IvpProblem::new(|_, y: f64| y * y, 0.0, 1.0, 2.0);
        let e = solve_ivp(&blow, &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Ode(OdeError::StepUnderflow { .. }) | Error::Ode(OdeError::NonFinite { .. })), "{e}");

        let nan = IvpProblem::new(|t: f64, _| if t > 0.5 { f64::NAN } else { 1.0 }, 0.0, 0.0, 1.0);
        assert!(matches!(solve_ivp(&nan, &oracle()).unwrap_err(), Error::Ode(OdeError::NonFinite { .. })));

        let mut few = oracle();
        few.max_steps = 3;
        let slow = IvpProblem::new(|t: f64, _| (50.0 * t).sin(), 0.0, 0.0, 10.0);
        assert!(matches!(solve_ivp(&slow, &few).unwrap_err(), Error::Ode(OdeError::MaxSteps { .. })));

        let backwards = IvpProblem::new(|_, _| 1.0, 1.0, 0.0, 0.0);
        assert!(solve_ivp(&backwards, &oracle()).is_err());
    }

    #[test]
    fn first_passage_constant_rate() {
        let p = IvpProblem::new(|_, _| 1.0, 0.0, 0.0, 10.0);
        match first_passage_time(&p, 1.5, &oracle()).unwrap() {
            Passage::Crossed(t) => assert!((t - 1.5).abs() < 1e-10),
            Passage::NoCrossing => panic!("expected crossing"),
        }
    }

    #[test]
    fn first_passage_decreasing_q() {
        // Lambda + Lambda^2 / 2 = 2 t, so E = 1 is reached at 0.75.
        let p = IvpProblem::new(|_, y: f64| 2.0 / (1.0 + y), 0.0, 0.0, 10.0);
        match first_passage_time(&p, 1.0, &oracle()).unwrap() {
            Passage::Crossed(t) => assert!((t - 0.75).abs() < 1e-8, "{t}"),
            Passage::NoCrossing => panic!("expected crossing"),
        }
    }

    #[test]
    fn first_passage_no_crossing_and_non_monotone() {
        let p = IvpProblem::new(|_, _| 1.0, 0.0, 0.0, 2.0);
        assert_eq!(first_passage_time(&p, 3.0, &oracle()).unwrap(), Passage::NoCrossing);
        let bad = IvpProblem::new(|t: f64, _| 1.0 - t, 0.0, 0.0, 5.0);
        assert!(matches!(first_passage_time(&bad, 2.0, &oracle()).unwrap_err(), Error::Ode(OdeError::NonMonotone { .. })));
    }

    #[test]
    fn tighter_tolerance_does_not_increase_error() {
        let exact = std::f64::consts::E;
        let mut prev = f64::INFINITY;
        for k in 4..=11 {
            let tol = 10f64.powi(-k);
            let p = IvpProblem::new(|_, y| y, 0.0, 1.0, 1.0);
            let err = (solve_ivp(&p, &SolverOptions::with_tolerances(tol, tol * 1e-2)).unwrap() - exact).abs();
            assert!(err <= prev * 1.5 + 1e-15, "tol {tol}: {err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn fifth_order_convergence_with_fixed_steps() {
        // Error per fixed step count: halving h should cut the error by ~2^5.
        let err_for = |steps: usize| {
            let h = 1.0 / steps as f64;
            let opts = SolverOptions { rel_tol: 1.0, abs_tol: 1.0, max_steps: 10 * steps, initial_step: Some(h) };
            let sys = ScalarSystem { rhs: &|_: f64, y: f64| y, require_positive: false };
            // Huge tolerances keep every step accepted; the controller still grows h,
            // so clamp it through repeated unit intervals.
            let mut y = 1.0;
            for k in 0..steps {
                let t0 = k as f64 * h;
                let (_, v) = integrate(&sys, t0, &[y], t0 + h, &opts, |_| Ok(Control::Continue)).unwrap();
                y = v[0];
            }
            (y - std::f64::consts::E).abs()
        };
        let ratio = err_for(8) / err_for(16);
        assert!(ratio > 20.0 && ratio < 45.0, "ratio {ratio}");
    }

    #[test]
    fn dense_output_is_monotone_for_positive_rhs() {
        let p = IvpProblem::new(|t: f64, y: f64| (1.0 + t.sin().powi(2)) / (1.0 + y), 0.0, 0.0, 5.0);
        let d = solve_dense(&p, &SolverOptions::default()).unwrap();
        let mut prev = -1.0;
        for i in 0..=1000 {
            let v = d.eval(5.0 * i as f64 / 1000.0, 0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn deterministic() {
        let p = IvpProblem::new(|t: f64, y: f64| (t * y).cos() + 1.5, 0.0, 0.2, 3.0);
        let a = solve_ivp(&p, &SolverOptions::default()).unwrap();
        let b = solve_ivp(&p, &SolverOptions::default()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
