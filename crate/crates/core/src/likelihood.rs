//! Sieve log-likelihood
//!
//! ```text
//! ℓ_i = Δ_i ψ_i(Y_i, Λ_i(Y_i)) − Λ_i(Y_i)
//! ```
//!
//! and its exact gradient. Observations are mapped in parallel; the
//! reduction is a fixed-order pairwise sum, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, Observation, ParamVector};
use crate::odesolve::SolverOptions;
use crate::sensitivity;

/// Value and gradient of one observation's log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsTerm {
    pub value: f64,
    pub score: Vec<f64>,
    pub lam_y: f64,
}

/// Log-likelihood contribution and score of one observation, sharing a single solve.
pub fn obs_term(obs: &Observation, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<ObsTerm> {
    let h = spec.subject(theta, &obs.x, &obs.z)?;
    let sens = if spec.use_forward() {
        sensitivity::forward_subject(&h, obs.y, opts)?
    } else {
        sensitivity::adjoint_subject(&h, obs.y, opts)?
    };
    let mut score: Vec<f64> = sens.grad.iter().map(|g| -g).collect();
    let mut value = -sens.lam_y;
    if obs.delta {
        let mut direct = vec![0.0; spec.n_free()];
        let b = h.bases(obs.y, sens.lam_y);
        h.psi_partials_with(&b, &mut direct);
        let slope = b.g_slope();
        value += h.psi_with(&b);
        for ((s, d), g) in score.iter_mut().zip(&direct).zip(&sens.grad) {
            *s += d + slope * g;
        }
    }
    Ok(ObsTerm { value, score, lam_y: sens.lam_y })
}

/// `ℓ_i` alone, from a scalar solve.
pub fn loglik_obs(obs: &Observation, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<f64> {
    let h = spec.subject(theta, &obs.x, &obs.z)?;
    let lam = h.cumulative_hazard(obs.y, opts)?;
    Ok(if obs.delta { h.psi(obs.y, lam) - lam } else { -lam })
}

pub fn score_obs(obs: &Observation, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<Vec<f64>> {
    Ok(obs_term(obs, theta, spec, opts)?.score)
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Subject { index, source: Box::new(e) }))
        .collect()
}

/// Per-observation terms in dataset order.
pub fn obs_terms(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<Vec<ObsTerm>> {
    let results: Vec<Result<ObsTerm>> = data.observations.par_iter().map(|o| obs_term(o, theta, spec, opts)).collect();
    first_error(results)
}

/// Mean log-likelihood and its gradient over the free coordinates.
pub fn loglik(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<(f64, Vec<f64>)> {
    let s = loglik_summary(data, theta, spec, opts)?;
    Ok((s.value, s.grad))
}

/// Mean value, mean score and mean squared score of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Diagonal of the score outer product, `(1/n) Σ s_ik²`.
    pub opg_diag: Vec<f64>,
}

pub fn loglik_summary(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<Summary> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let terms = obs_terms(data, theta, spec, opts)?;
    let n = terms.len() as f64;
    let p = spec.n_free();
    let values: Vec<f64> = terms.iter().map(|t| t.value).collect();
    let scores: Vec<&[f64]> = terms.iter().map(|t| t.score.as_slice()).collect();
    let squares: Vec<Vec<f64>> = terms.iter().map(|t| t.score.iter().map(|v| v * v).collect()).collect();
    let squares: Vec<&[f64]> = squares.iter().map(Vec::as_slice).collect();
    Ok(Summary {
        value: pairwise_sum(&values) / n,
        grad: pairwise_sum_vectors(&scores, p).into_iter().map(|g| g / n).collect(),
        opg_diag: pairwise_sum_vectors(&squares, p).into_iter().map(|g| g / n).collect(),
    })
}

/// Mean log-likelihood without gradient.
pub fn loglik_value(data: &Dataset, theta: &ParamVector, spec: &ModelSpec, opts: &SolverOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let results: Vec<Result<f64>> = data.observations.par_iter().map(|o| loglik_obs(o, theta, spec, opts)).collect();
    let values = first_error(results)?;
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// `loglik` over the flat free-parameter vector.
pub fn loglik_flat(data: &Dataset, flat: &[f64], spec: &ModelSpec, opts: &SolverOptions) -> Result<(f64, Vec<f64>)> {
    loglik(data, &spec.unpack(flat)?, spec, opts)
}

const PAIRWISE_BLOCK: usize = 8;

/// Fixed-order pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Componentwise pairwise sum of equal-length vectors.
pub fn pairwise_sum_vectors(xs: &[&[f64]], dim: usize) -> Vec<f64> {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut acc = vec![0.0; dim];
        for v in xs {
            for (a, b) in acc.iter_mut().zip(v.iter()) {
                *a += b;
            }
        }
        acc
    } else {
        let mid = xs.len() / 2;
        let mut left = pairwise_sum_vectors(&xs[..mid], dim);
        let right = pairwise_sum_vectors(&xs[mid..], dim);
        for (a, b) in left.iter_mut().zip(right) {
            *a += b;
        }
        left
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GradientMode, ModelClass};
    use crate::splines::{KnotPlacement, KnotVector};

    fn exponential_spec(d1: usize) -> ModelSpec {
        let k = KnotVector::make((0.0, 5.0), 0, 1, KnotPlacement::EqualTime).unwrap();
        ModelSpec::for_class(ModelClass::Cox, d1, 0, Some(k), None).unwrap()
    }

    fn obs(y: f64, delta: bool, x: Vec<f64>) -> Observation {
        Observation { y, delta, x, z: vec![] }
    }

    #[test]
    fn censored_term_is_minus_lambda() {
        let spec = exponential_spec(1);
        let theta = spec.zero_params();
        let o = obs(1.5, false, vec![0.0]);
        let opts = SolverOptions::oracle();
        assert!((loglik_obs(&o, &theta, &spec, &opts).unwrap() + 1.5).abs() < 1e-10);
        let t = obs_term(&o, &theta, &spec, &opts).unwrap();
        let sens = sensitivity::forward_grad(&theta, &spec, &o.x, &o.z, o.y, &opts).unwrap();
        for (s, g) in t.score.iter().zip(&sens.grad) {
            assert_eq!(*s, -g);
        }
    }

    #[test]
    fn exponential_event_term() {
        let spec = exponential_spec(1);
        let theta = spec.zero_params();
        let o = obs(1.0, true, vec![1.0]);
        let opts = SolverOptions::oracle();
        let t = obs_term(&o, &theta, &spec, &opts).unwrap();
        assert!((t.value + 1.0).abs() < 1e-10);
        // d/dβ: x (1 - Λ) = 0
        assert!(t.score[0].abs() < 1e-10);
        assert!((loglik_obs(&o, &theta, &spec, &opts).unwrap() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn event_at_time_zero() {
        let spec = exponential_spec(1);
        let mut theta = spec.zero_params();
        theta.beta[0] = 0.3;
        theta.gamma[0] = -0.2;
        let o = obs(0.0, true, vec![2.0]);
        let v = loglik_obs(&o, &theta, &spec, &SolverOptions::default()).unwrap();
        assert_eq!(v, 0.6 - 0.2);
    }

    #[test]
    fn single_observation_dataset_matches_obs_term() {
        let spec = exponential_spec(1);
        let theta = spec.unpack(&[0.2, -0.4]).unwrap();
        let o = obs(0.8, true, vec![0.5]);
        let data = Dataset::with_default_names(vec![o.clone()]).unwrap();
        let opts = SolverOptions::default();
        let (v, g) = loglik(&data, &theta, &spec, &opts).unwrap();
        let t = obs_term(&o, &theta, &spec, &opts).unwrap();
        assert_eq!(v, t.value);
        assert_eq!(g, t.score);
    }

    #[test]
    fn duplicated_rows_leave_mean_unchanged() {
        let spec = exponential_spec(1);
        let theta = spec.unpack(&[0.2, -0.4]).unwrap();
        let rows: Vec<Observation> = (0..7).map(|i| obs(0.3 + 0.2 * i as f64, i % 3 != 0, vec![0.1 * i as f64 - 0.2])).collect();
        let doubled: Vec<Observation> = rows.iter().flat_map(|o| [o.clone(), o.clone()]).collect();
        let opts = SolverOptions::default();
        let (v1, g1) = loglik(&Dataset::with_default_names(rows).unwrap(), &theta, &spec, &opts).unwrap();
        let (v2, g2) = loglik(&Dataset::with_default_names(doubled).unwrap(), &theta, &spec, &opts).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flex_score_matches_finite_difference() {
        let k = KnotVector::make((0.0, 2.0), 3, 4, KnotPlacement::EqualTime).unwrap();
        let gk = KnotVector::make((0.0, 3.0), 3, 4, KnotPlacement::EqualTime).unwrap();
        let spec = ModelSpec::for_class(ModelClass::Flex, 2, 0, Some(k), Some(gk)).unwrap();
        let flat: Vec<f64> = (0..spec.n_free()).map(|k| 0.1 * (0.7 * k as f64).cos()).collect();
        let o = obs(1.3, true, vec![0.4, -0.9]);
        let opts = SolverOptions::with_tolerances(1e-13, 1e-15);
        for mode in [GradientMode::Forward, GradientMode::Adjoint] {
            let spec = spec.clone().with_gradient_mode(mode);
            let s = score_obs(&o, &spec.unpack(&flat).unwrap(), &spec, &opts).unwrap();
            let h = 1e-3;
            for k in 0..flat.len() {
                let l = |dx: f64| {
                    let mut v = flat.clone();
                    v[k] += dx;
                    loglik_obs(&o, &spec.unpack(&v).unwrap(), &spec, &opts).unwrap()
                };
                let d = (8.0 * (l(h) - l(-h)) - (l(2.0 * h) - l(-2.0 * h))) / (12.0 * h);
                assert!((s[k] - d).abs() <= 1e-5 * d.abs().max(1e-3), "{mode:?} coord {k}: {} vs {d}", s[k]);
            }
        }
    }

    #[test]
    fn subject_index_attached_to_failures() {
        let spec = exponential_spec(1);
        let mut theta = spec.zero_params();
        theta.beta[0] = 1.0;
        let rows = vec![obs(1.0, true, vec![0.0]), obs(1.0, true, vec![800.0])];
        let err = loglik(&Dataset::with_default_names(rows).unwrap(), &theta, &spec, &SolverOptions::default()).unwrap_err();
        match err {
            Error::Subject { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs: Vec<f64> = (0..1000).map(|i| 0.1 + i as f64 * 1e-3).collect();
        let exact = 0.1 * 1000.0 + 1e-3 * 999.0 * 1000.0 / 2.0;
        assert!((pairwise_sum(&xs) - exact).abs() < 1e-10);
        let vs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x, -x]).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let s = pairwise_sum_vectors(&refs, 2);
        assert_eq!(s[0], pairwise_sum(&xs));
        assert_eq!(s[1], -pairwise_sum(&xs));
    }
}
