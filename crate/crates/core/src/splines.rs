//! Clamped polynomial B-spline bases.
//!
//! A [`KnotVector`] of order `p` on `[a, b]` repeats each boundary `p` times,
//! so the first basis function equals one at `a` and every spline's value at
//! the left endpoint is its first coefficient. Outside `[a, b]` the basis is
//! extended linearly from the nearest boundary (value plus boundary slope),
//! which keeps splines and their first derivatives continuous everywhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported order (degree + 1).
pub const MAX_ORDER: usize = 8;

/// How interior knots are placed inside the domain.
#[derive(Debug, Clone, Copy)]
pub enum KnotPlacement<'a> {
    /// Equally spaced on the domain.
    EqualTime,
    /// At equally spaced empirical quantiles of the given values.
    Quantile(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnotRepr", into = "KnotRepr")]
pub struct KnotVector {
    order: usize,
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
    full: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KnotRepr {
    order: usize,
    domain: [f64; 2],
    interior: Vec<f64>,
}

impl TryFrom<KnotRepr> for KnotVector {
    type Error = Error;

    fn try_from(r: KnotRepr) -> Result<Self> {
        KnotVector::new(r.domain[0], r.domain[1], r.interior, r.order)
    }
}

impl From<KnotVector> for KnotRepr {
    fn from(k: KnotVector) -> Self {
        KnotRepr { order: k.order, domain: [k.lo, k.hi], interior: k.interior }
    }
}

/// Nonzero basis values at one point: entries `first .. first + order`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub len: usize,
    pub values: [f64; MAX_ORDER],
}

impl LocalBasis {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values[..self.len].iter().enumerate().map(move |(k, &v)| (self.first + k, v))
    }

    pub fn dot(&self, coeffs: &[f64]) -> f64 {
        self.values[..self.len]
            .iter()
            .zip(&coeffs[self.first..self.first + self.len])
            .map(|(b, c)| b * c)
            .sum()
    }
}

impl KnotVector {
    /// Builds a clamped knot vector from explicit interior knots.
    pub fn new(lo: f64, hi: f64, interior: Vec<f64>, order: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Spline(format!("non-finite domain [{lo}, {hi}]")));
        }
        if !(hi > lo) {
            return Err(Error::Spline(format!("empty domain [{lo}, {hi}]")));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(Error::Spline(format!("order must be in 1..={MAX_ORDER}, got {order}")));
        }
        if interior.iter().any(|k| !k.is_finite()) {
            return Err(Error::Spline("non-finite interior knot".into()));
        }
        if interior.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Spline("interior knots must be strictly increasing".into()));
        }
        if interior.iter().any(|&k| k <= lo || k >= hi) {
            return Err(Error::Spline("interior knots must lie strictly inside the domain".into()));
        }
        let mut full = Vec::with_capacity(interior.len() + 2 * order);
        full.extend(std::iter::repeat_n(lo, order));
        full.extend_from_slice(&interior);
        full.extend(std::iter::repeat_n(hi, order));
        Ok(KnotVector { order, lo, hi, interior, full })
    }

    /// Builds a clamped knot vector with `n_interior` knots placed by `placement`.
    ///
    /// Quantile placement collapses tied quantiles; it fails only when knots
    /// were requested and none survive.
    pub fn make(domain: (f64, f64), n_interior: usize, order: usize, placement: KnotPlacement<'_>) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Spline(format!("non-finite domain [{lo}, {hi}]")));
        }
        if !(hi > lo) {
            return Err(Error::Spline(format!("empty domain [{lo}, {hi}]")));
        }
        let interior = match placement {
            KnotPlacement::EqualTime => {
                let step = (hi - lo) / (n_interior + 1) as f64;
                (1..=n_interior).map(|k| lo + step * k as f64).collect()
            }
            KnotPlacement::Quantile(values) => {
                if n_interior == 0 {
                    Vec::new()
                } else {
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Spline("non-finite value in quantile placement".into()));
                    }
                    let mut sorted = values.to_vec();
                    sorted.sort_by(f64::total_cmp);
                    let mut knots: Vec<f64> = (1..=n_interior)
                        .map(|k| empirical_quantile(&sorted, k as f64 / (n_interior + 1) as f64))
                        .filter(|&k| k > lo && k < hi)
                        .collect();
                    knots.dedup();
                    if knots.is_empty() {
                        return Err(Error::Spline("quantile placement left no distinct interior knots".into()));
                    }
                    knots
                }
            }
        };
        KnotVector::new(lo, hi, interior, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn full_knots(&self) -> &[f64] {
        &self.full
    }

    /// Number of basis functions, `#interior + order`.
    pub fn n_basis(&self) -> usize {
        self.interior.len() + self.order
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    // Index `i` with full[i] <= t < full[i + 1], clamped to the last
    // nonempty span at the right endpoint.
    fn span(&self, t: f64) -> usize {
        let p = self.order - 1;
        let last = self.n_basis() - 1;
        if t >= self.hi {
            return last;
        }
        if t <= self.lo {
            return p;
        }
        // First index whose knot exceeds t, minus one.
        let idx = self.full[..=last + 1].partition_point(|&k| k <= t);
        (idx - 1).clamp(p, last)
    }

    // Cox-de Boor triangle for the `degree + 1` nonzero functions on `span`.
    fn basis_on_span(&self, span: usize, t: f64, degree: usize, out: &mut [f64; MAX_ORDER]) {
        let u = &self.full;
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    fn local_inside(&self, t: f64) -> LocalBasis {
        let p = self.order - 1;
        let span = self.span(t);
        let mut values = [0.0; MAX_ORDER];
        // Clamped endpoints are exact indicators.
        if t == self.lo {
            values[0] = 1.0;
        } else if t == self.hi {
            values[p] = 1.0;
        } else {
            self.basis_on_span(span, t, p, &mut values);
        }
        LocalBasis { first: span - p, len: self.order, values }
    }

    fn local_deriv_inside(&self, t: f64) -> LocalBasis {
        let p = self.order - 1;
        let span = self.span(t);
        let mut values = [0.0; MAX_ORDER];
        if p == 0 {
            return LocalBasis { first: span, len: 1, values };
        }
        // Lower-degree functions N_{span-p+1 .. span, p-1}.
        let mut lower = [0.0; MAX_ORDER];
        self.basis_on_span(span, t, p - 1, &mut lower);
        let u = &self.full;
        let pf = p as f64;
        // N'_{i,p} = p/(u[i+p]-u[i]) N_{i,p-1} - p/(u[i+p+1]-u[i+1]) N_{i+1,p-1}
        for k in 0..=p {
            let i = span - p + k;
            let a = if k >= 1 {
                let d = u[i + p] - u[i];
                if d > 0.0 { pf / d * lower[k - 1] } else { 0.0 }
            } else {
                0.0
            };
            let b = if k < p {
                let d = u[i + p + 1] - u[i + 1];
                if d > 0.0 { pf / d * lower[k] } else { 0.0 }
            } else {
                0.0
            };
            values[k] = a - b;
        }
        LocalBasis { first: span - p, len: self.order, values }
    }

    /// Nonzero basis values at `t`, linearly extended outside the domain.
    pub fn local_basis(&self, t: f64) -> LocalBasis {
        if t < self.lo || t > self.hi {
            let edge = if t < self.lo { self.lo } else { self.hi };
            let mut v = self.local_inside(edge);
            let d = self.local_deriv_inside(edge);
            let dt = t - edge;
            for k in 0..v.len {
                v.values[k] += d.values[k] * dt;
            }
            v
        } else {
            self.local_inside(t)
        }
    }

    /// Nonzero basis derivatives at `t`; constant at the boundary slope outside the domain.
    pub fn local_basis_deriv(&self, t: f64) -> LocalBasis {
        self.local_deriv_inside(t.clamp(self.lo, self.hi))
    }

    /// Width over which the right tail of [`local_basis_saturating`](Self::local_basis_saturating) levels off:
    /// the last knot span.
    pub fn saturation_scale(&self) -> f64 {
        self.hi - self.interior.last().copied().unwrap_or(self.lo)
    }

    // Second derivatives of the last three functions at `hi`, from differencing
    // the coefficients twice; at a clamped end only the last coefficient survives.
    fn deriv2_at_hi(&self) -> LocalBasis {
        let q = self.n_basis();
        let p = self.order - 1;
        let mut values = [0.0; MAX_ORDER];
        let first = q - self.order;
        if p < 2 {
            return LocalBasis { first, len: self.order, values };
        }
        let u = &self.full;
        let pf = p as f64;
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let a = ratio(pf, u[q - 1 + p] - u[q - 1]);
        let b = ratio(pf, u[q - 2 + p] - u[q - 2]);
        let c = ratio(pf - 1.0, u[q + p - 2] - u[q - 1]);
        values[self.order - 3] = c * b;
        values[self.order - 2] = -c * (a + b);
        values[self.order - 1] = c * a;
        LocalBasis { first, len: self.order, values }
    }

    /// Linear extension on the left. On the right, with `u = (t − hi)/τ` and `τ` the
    /// [`saturation_scale`](Self::saturation_scale),
    /// `B(hi) + B'(hi) τ tanh(u) + B''(hi) τ² tanh²(u)/2`: twice differentiable at `hi`
    /// and bounded above it.
    pub fn local_basis_saturating(&self, t: f64) -> LocalBasis {
        if t <= self.hi {
            return self.local_basis(t);
        }
        let tau = self.saturation_scale();
        let th = ((t - self.hi) / tau).tanh();
        let mut v = self.local_inside(self.hi);
        let d1 = self.local_deriv_inside(self.hi);
        let d2 = self.deriv2_at_hi();
        for k in 0..v.len {
            v.values[k] += d1.values[k] * tau * th + d2.values[k] * tau * tau * th * th / 2.0;
        }
        v
    }

    /// Derivative of [`local_basis_saturating`](Self::local_basis_saturating).
    pub fn local_basis_deriv_saturating(&self, t: f64) -> LocalBasis {
        if t <= self.hi {
            return self.local_basis_deriv(t);
        }
        let tau = self.saturation_scale();
        let th = ((t - self.hi) / tau).tanh();
        let sech2 = 1.0 - th * th;
        let mut d = self.local_deriv_inside(self.hi);
        let d2 = self.deriv2_at_hi();
        for k in 0..d.len {
            d.values[k] = (d.values[k] + d2.values[k] * tau * th) * sech2;
        }
        d
    }

    /// All `q` basis values at `t`.
    pub fn eval_basis(&self, t: f64) -> Result<Vec<f64>> {
        check_finite(t)?;
        Ok(self.scatter(self.local_basis(t)))
    }

    /// All `q` basis derivatives at `t`.
    pub fn eval_basis_deriv(&self, t: f64) -> Result<Vec<f64>> {
        check_finite(t)?;
        Ok(self.scatter(self.local_basis_deriv(t)))
    }

    fn scatter(&self, local: LocalBasis) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        for (j, v) in local.iter() {
            out[j] = v;
        }
        out
    }
}

fn check_finite(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Spline(format!("non-finite evaluation point {t}")))
    }
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// A spline `s(t) = sum_j c_j B_j(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFunction {
    pub knots: KnotVector,
    pub coeffs: Vec<f64>,
}

impl SplineFunction {
    pub fn new(knots: KnotVector, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != knots.n_basis() {
            return Err(Error::LengthMismatch { expected: knots.n_basis(), got: coeffs.len() });
        }
        Ok(SplineFunction { knots, coeffs })
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.knots.local_basis(t).dot(&self.coeffs))
    }

    pub fn deriv(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.knots.local_basis_deriv(t).dot(&self.coeffs))
    }

    /// Least-squares projection of sampled `(t, y)` pairs onto the basis.
    pub fn least_squares(knots: KnotVector, ts: &[f64], ys: &[f64]) -> Result<Self> {
        if ts.len() != ys.len() {
            return Err(Error::LengthMismatch { expected: ts.len(), got: ys.len() });
        }
        let q = knots.n_basis();
        if ts.len() < q {
            return Err(Error::Spline(format!("need at least {q} samples for projection, got {}", ts.len())));
        }
        let mut design = DMatrix::zeros(ts.len(), q);
        for (row, &t) in ts.iter().enumerate() {
            check_finite(t)?;
            for (j, v) in knots.local_basis(t).iter() {
                design[(row, j)] = v;
            }
        }
        let rhs = DVector::from_column_slice(ys);
        let coeffs = design
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Spline(format!("projection failed: {e}")))?;
        SplineFunction::new(knots, coeffs.iter().copied().collect())
    }

    /// Projection of a closed-form function sampled on a dense grid over the domain.
    pub fn project<F: Fn(f64) -> f64>(knots: KnotVector, f: F, n_grid: usize) -> Result<Self> {
        let (lo, hi) = knots.domain();
        let ts: Vec<f64> = (0..n_grid).map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        SplineFunction::least_squares(knots, &ts, &ys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic01(n_interior: usize) -> KnotVector {
        KnotVector::make((0.0, 1.0), n_interior, 4, KnotPlacement::EqualTime).unwrap()
    }

    #[test]
    fn single_constant_basis() {
        let k = KnotVector::make((0.0, 1.0), 0, 1, KnotPlacement::EqualTime).unwrap();
        assert_eq!(k.full_knots(), &[0.0, 1.0]);
        assert_eq!(k.n_basis(), 1);
        assert_eq!(k.eval_basis(0.3).unwrap(), vec![1.0]);
    }

    #[test]
    fn cubic_with_six_interior_has_ten_bases() {
        let k = KnotVector::make((0.0, 2.0), 6, 4, KnotPlacement::EqualTime).unwrap();
        assert_eq!(k.n_basis(), 10);
        let full = k.full_knots();
        assert_eq!(&full[..4], &[0.0; 4]);
        assert_eq!(&full[full.len() - 4..], &[2.0; 4]);
    }

    #[test]
    fn equal_placement_midpoint() {
        let k = KnotVector::make((0.0, 1.0), 1, 2, KnotPlacement::EqualTime).unwrap();
        assert_eq!(k.interior(), &[0.5]);
    }

    #[test]
    fn quantile_placement_uses_empirical_quantiles() {
        let values: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let k = KnotVector::make((0.0, 1.0), 1, 4, KnotPlacement::Quantile(&values)).unwrap();
        assert!((k.interior()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quantile_duplicates_collapse() {
        let values = vec![0.5; 20];
        let k = KnotVector::make((0.0, 1.0), 3, 4, KnotPlacement::Quantile(&values)).unwrap();
        assert_eq!(k.interior(), &[0.5]);
        let edge = vec![1.0; 20];
        assert!(KnotVector::make((0.0, 1.0), 3, 4, KnotPlacement::Quantile(&edge)).is_err());
    }

    #[test]
    fn rejects_bad_domains_and_points() {
        assert!(KnotVector::make((1.0, 1.0), 0, 4, KnotPlacement::EqualTime).is_err());
        assert!(KnotVector::make((0.0, f64::NAN), 0, 4, KnotPlacement::EqualTime).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![0.5, 0.5], 4).is_err());
        let k = cubic01(2);
        assert!(k.eval_basis(f64::NAN).is_err());
        assert!(k.eval_basis_deriv(f64::INFINITY).is_err());
    }

    #[test]
    fn left_endpoint_clamping() {
        let b = cubic01(3).eval_basis(0.0).unwrap();
        assert_eq!(b[0], 1.0);
        assert!(b[1..].iter().all(|&v| v == 0.0));
        let b = cubic01(3).eval_basis(1.0).unwrap();
        assert_eq!(*b.last().unwrap(), 1.0);
    }

    #[test]
    fn piecewise_constant_indicator() {
        let k = KnotVector::new(0.0, 1.0, vec![0.5], 1).unwrap();
        assert_eq!(k.eval_basis(0.25).unwrap(), vec![1.0, 0.0]);
        assert_eq!(k.eval_basis(0.75).unwrap(), vec![0.0, 1.0]);
        assert_eq!(k.eval_basis_deriv(0.25).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn partition_of_unity_at_037() {
        let s: f64 = cubic01(4).eval_basis(0.37).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let ds: f64 = cubic01(4).eval_basis_deriv(0.37).unwrap().iter().sum();
        assert!(ds.abs() < 1e-10);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let k = cubic01(4);
        let h = 1e-6;
        let d = k.eval_basis_deriv(0.37).unwrap();
        let up = k.eval_basis(0.37 + h).unwrap();
        let dn = k.eval_basis(0.37 - h).unwrap();
        for j in 0..d.len() {
            let fd = (up[j] - dn[j]) / (2.0 * h);
            assert!((d[j] - fd).abs() <= 1e-5 * d[j].abs().max(1e-3), "basis {j}: {} vs {fd}", d[j]);
        }
    }

    #[test]
    fn constant_and_zero_coefficients() {
        let k = cubic01(5);
        let s = SplineFunction::new(k.clone(), vec![2.5; k.n_basis()]).unwrap();
        let z = SplineFunction::new(k.clone(), vec![0.0; k.n_basis()]).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert!((s.value(t).unwrap() - 2.5).abs() < 1e-13);
            assert_eq!(z.value(t).unwrap(), 0.0);
        }
        assert!(SplineFunction::new(k, vec![1.0]).is_err());
    }

    #[test]
    fn linear_extrapolation_outside_domain() {
        let k = cubic01(3);
        let coeffs: Vec<f64> = (0..k.n_basis()).map(|j| (j as f64).powi(2) * 0.3 - j as f64).collect();
        let s = SplineFunction::new(k, coeffs).unwrap();
        let (v1, d1) = (s.value(1.0).unwrap(), s.deriv(1.0).unwrap());
        assert!((s.value(1.5).unwrap() - (v1 + 0.5 * d1)).abs() < 1e-12);
        assert!((s.deriv(1.5).unwrap() - d1).abs() < 1e-12);
        let (v0, d0) = (s.value(0.0).unwrap(), s.deriv(0.0).unwrap());
        assert!((s.value(-0.25).unwrap() - (v0 - 0.25 * d0)).abs() < 1e-12);
    }

    #[test]
    fn saturating_tail_is_c2_and_bounded() {
        let k = cubic01(3);
        let coeffs: Vec<f64> = (0..k.n_basis()).map(|j| (j as f64).powi(2) * 0.3 - j as f64 + (j as f64 * 1.7).sin()).collect();
        let val = |t: f64| k.local_basis_saturating(t).dot(&coeffs);
        let der = |t: f64| k.local_basis_deriv_saturating(t).dot(&coeffs);
        let d1 = der(1.0);
        let h = 1e-5;
        // One-sided second differences of the derivative agree across hi.
        let left = (d1 - der(1.0 - h)) / h;
        let right = (der(1.0 + h) - d1) / h;
        assert!(left.abs() > 1.0);
        assert!((left - right).abs() < 1e-3 * left.abs(), "{left} vs {right}");
        let d2 = k.deriv2_at_hi().dot(&coeffs);
        assert!((d2 - left).abs() < 1e-3 * left.abs(), "{d2} vs {left}");
        assert!((val(1.0 + h) - val(1.0) - h * d1 - h * h / 2.0 * d2).abs() < 1e-12);
        let tau = k.saturation_scale();
        assert!((tau - 0.25).abs() < 1e-15);
        assert!((val(1e6) - (val(1.0) + d1 * tau + d2 * tau * tau / 2.0)).abs() < 1e-12);
        for t in [1.1, 1.4, 2.0] {
            let fd = (val(t + 1e-6) - val(t - 1e-6)) / 2e-6;
            assert!((der(t) - fd).abs() < 1e-7, "t {t}");
        }
        assert!((val(-0.25) - (val(0.0) - 0.25 * der(0.0))).abs() < 1e-12);
    }

    #[test]
    fn projection_of_sine_is_accurate() {
        let k = KnotVector::make((0.0, 2.0), 6, 4, KnotPlacement::EqualTime).unwrap();
        let truth = |t: f64| (0.75 * std::f64::consts::PI * t).sin();
        let s = SplineFunction::project(k, truth, 2001).unwrap();
        let max_err = (0..200)
            .map(|i| 2.0 * i as f64 / 199.0)
            .map(|t| (s.value(t).unwrap() - truth(t)).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-3, "max error {max_err}");
    }

    #[test]
    fn serde_round_trip_rebuilds_full_knots() {
        let k = cubic01(3);
        let json = serde_json::to_string(&k).unwrap();
        let back: KnotVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);
    }
}
