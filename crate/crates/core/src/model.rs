//! The hazard right-hand side
//!
//! ```text
//! Λ'(t) = exp( x'β + γ(t) + Σ_l z_l η_l(t) + g(Λ(t)) ),   Λ(0) = 0
//! ```
//!
//! with `γ`, `η_l` and `g` clamped B-splines, plus the bookkeeping that maps
//! structured parameters onto the flat vector of free coordinates seen by
//! the optimizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odesolve::{self, OdeSystem, SolverOptions};
use crate::splines::{KnotVector, LocalBasis, SplineFunction};

/// Largest exponent passed to `exp`.
pub const EXPONENT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Follow-up time `min(T, C)`.
    pub y: f64,
    /// Event indicator.
    pub delta: bool,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>, x_names: Vec<String>, z_names: Vec<String>) -> Result<Self> {
        let ds = Dataset { observations, x_names, z_names };
        ds.validate()?;
        Ok(ds)
    }

    /// Names `x1..xd1`, `z1..zd2`.
    pub fn with_default_names(observations: Vec<Observation>) -> Result<Self> {
        let (d1, d2) = observations.first().map_or((0, 0), |o| (o.x.len(), o.z.len()));
        let x_names = (1..=d1).map(|i| format!("x{i}")).collect();
        let z_names = (1..=d2).map(|i| format!("z{i}")).collect();
        Dataset::new(observations, x_names, z_names)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let (d1, d2) = (self.x_names.len(), self.z_names.len());
        for (i, o) in self.observations.iter().enumerate() {
            if !(o.y.is_finite() && o.y >= 0.0) {
                return Err(Error::invalid(format!("row {i}: time must be finite and nonnegative, got {}", o.y)));
            }
            if o.x.len() != d1 || o.z.len() != d2 {
                return Err(Error::invalid(format!(
                    "row {i}: expected {d1} x and {d2} z covariates, got {} and {}",
                    o.x.len(),
                    o.z.len()
                )));
            }
            if o.x.iter().chain(&o.z).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i}: non-finite covariate")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn d1(&self) -> usize {
        self.x_names.len()
    }

    pub fn d2(&self) -> usize {
        self.z_names.len()
    }

    pub fn n_events(&self) -> usize {
        self.observations.iter().filter(|o| o.delta).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_events() as f64 / self.len() as f64
    }

    pub fn max_time(&self) -> f64 {
        self.observations.iter().map(|o| o.y).fold(0.0, f64::max)
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.observations.iter().filter(|o| o.delta).map(|o| o.y).collect()
    }

    pub fn require_events(&self) -> Result<()> {
        if self.n_events() == 0 {
            Err(Error::NoEvents)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    /// Proportional hazards, `g ≡ 0`, no time-varying effects.
    Cox,
    /// Proportional hazards with time-varying effects for `z`.
    CoxTv,
    /// Accelerated failure time, `γ ≡ 0`.
    Aft,
    /// Linear transformation model: `γ` and `g` unknown, no `z`.
    Ltm,
    /// The general class with `γ`, `η` and `g` all unknown.
    Flex,
}

impl ModelClass {
    pub fn has_gamma(self) -> bool {
        !matches!(self, ModelClass::Aft)
    }

    pub fn has_eta(self) -> bool {
        matches!(self, ModelClass::CoxTv | ModelClass::Flex)
    }

    pub fn has_g(self) -> bool {
        matches!(self, ModelClass::Aft | ModelClass::Ltm | ModelClass::Flex)
    }

    pub fn is_cox_family(self) -> bool {
        !self.has_g()
    }

    /// Identifiability constraints used unless the caller overrides them.
    pub fn default_constraints(self) -> Vec<Constraint> {
        match self {
            ModelClass::Cox | ModelClass::CoxTv | ModelClass::Aft => Vec::new(),
            ModelClass::Ltm | ModelClass::Flex => vec![
                Constraint::FixBeta { index: 0, value: 1.0 },
                Constraint::FixLeftValue { target: SplineTarget::G, value: 0.0 },
            ],
        }
    }
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelClass::Cox => "cox",
            ModelClass::CoxTv => "cox_tv",
            ModelClass::Aft => "aft",
            ModelClass::Ltm => "ltm",
            ModelClass::Flex => "flex",
        })
    }
}

impl FromStr for ModelClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cox" => Ok(ModelClass::Cox),
            "cox_tv" | "cox-tv" | "coxtv" => Ok(ModelClass::CoxTv),
            "aft" => Ok(ModelClass::Aft),
            "ltm" => Ok(ModelClass::Ltm),
            "flex" => Ok(ModelClass::Flex),
            other => Err(Error::invalid(format!("unknown model class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Forward,
    Adjoint,
    #[default]
    Auto,
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(GradientMode::Forward),
            "adjoint" => Ok(GradientMode::Adjoint),
            "auto" => Ok(GradientMode::Auto),
            other => Err(Error::invalid(format!("unknown gradient mode '{other}'"))),
        }
    }
}

/// One of the spline-valued unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineTarget {
    Gamma,
    /// Time-varying coefficient of `z_l` (0-based).
    Eta(usize),
    G,
}

impl fmt::Display for SplineTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplineTarget::Gamma => f.write_str("gamma"),
            SplineTarget::Eta(l) => write!(f, "eta{}", l + 1),
            SplineTarget::G => f.write_str("g"),
        }
    }
}

impl FromStr for SplineTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "gamma" => Ok(SplineTarget::Gamma),
            "g" => Ok(SplineTarget::G),
            _ => match s.strip_prefix("eta").and_then(|d| d.parse::<usize>().ok()) {
                Some(l) if l >= 1 => Ok(SplineTarget::Eta(l - 1)),
                _ => Err(Error::invalid(format!("unknown spline target '{s}'"))),
            },
        }
    }
}

/// Linear equality constraints, eliminated from the free parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// `β[index] = value` (0-based index).
    FixBeta { index: usize, value: f64 },
    /// Spline value at the left end of its domain, i.e. its first coefficient.
    FixLeftValue { target: SplineTarget, value: f64 },
}

impl Constraint {
    /// Parses `beta1=1,g0=0,gamma0=0,eta2_0=0` (1-based β and η indices).
    pub fn parse_list(s: &str) -> Result<Vec<Constraint>> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
    }
}

impl FromStr for Constraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s.split_once('=').ok_or_else(|| Error::invalid(format!("constraint '{s}' lacks '='")))?;
        let value: f64 = rhs.trim().parse().map_err(|_| Error::invalid(format!("bad constraint value in '{s}'")))?;
        let lhs = lhs.trim().to_ascii_lowercase();
        if let Some(i) = lhs.strip_prefix("beta") {
            let idx: usize = i.parse().map_err(|_| Error::invalid(format!("bad beta index in '{s}'")))?;
            if idx == 0 {
                return Err(Error::invalid("beta indices are 1-based"));
            }
            return Ok(Constraint::FixBeta { index: idx - 1, value });
        }
        let target = match lhs.as_str() {
            "g0" => SplineTarget::G,
            "gamma0" => SplineTarget::Gamma,
            other => match other.strip_prefix("eta").and_then(|r| r.strip_suffix("_0")) {
                Some(l) => format!("eta{l}").parse()?,
                None => return Err(Error::invalid(format!("unknown constraint '{s}'"))),
            },
        };
        Ok(Constraint::FixLeftValue { target, value })
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::FixBeta { index, value } => write!(f, "beta{}={value}", index + 1),
            Constraint::FixLeftValue { target: SplineTarget::Eta(l), value } => write!(f, "eta{}_0={value}", l + 1),
            Constraint::FixLeftValue { target, value } => write!(f, "{target}0={value}"),
        }
    }
}

/// A single structured coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Beta(usize),
    Gamma(usize),
    Eta(usize, usize),
    G(usize),
}

#[derive(Debug, Clone, Default)]
struct Layout {
    coords: Vec<Coord>,
    /// Full index -> free index.
    free_index: Vec<Option<usize>>,
    free_coords: Vec<Coord>,
    free_to_full: Vec<usize>,
    fixed_values: Vec<f64>,
    gamma_offset: usize,
    eta_offsets: Vec<Option<usize>>,
    g_offset: usize,
    /// Distinct time bases; gamma and eta components point into this list.
    time_bases: Vec<KnotVector>,
    gamma_group: Option<usize>,
    eta_groups: Vec<Option<usize>>,
}

/// Which components are active, their bases and the constraint set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct ModelSpec {
    pub class: ModelClass,
    pub d1: usize,
    pub d2: usize,
    /// `None` means `γ ≡ 0`.
    pub gamma: Option<KnotVector>,
    /// Per `z` covariate; `None` drops that covariate.
    pub eta: Vec<Option<KnotVector>>,
    /// `None` means `g ≡ 0`; otherwise the domain starts at 0 and `g` levels off
    /// above it (see [`KnotVector::local_basis_saturating`]).
    pub g: Option<KnotVector>,
    pub constraints: Vec<Constraint>,
    pub gradient_mode: GradientMode,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    class: ModelClass,
    d1: usize,
    d2: usize,
    gamma: Option<KnotVector>,
    eta: Vec<Option<KnotVector>>,
    g: Option<KnotVector>,
    constraints: Vec<Constraint>,
    gradient_mode: GradientMode,
}

impl TryFrom<SpecRepr> for ModelSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        ModelSpec::new(r.class, r.d1, r.d2, r.gamma, r.eta, r.g, r.constraints, r.gradient_mode)
    }
}

impl From<ModelSpec> for SpecRepr {
    fn from(s: ModelSpec) -> Self {
        SpecRepr {
            class: s.class,
            d1: s.d1,
            d2: s.d2,
            gamma: s.gamma,
            eta: s.eta,
            g: s.g,
            constraints: s.constraints,
            gradient_mode: s.gradient_mode,
        }
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        class: ModelClass,
        d1: usize,
        d2: usize,
        gamma: Option<KnotVector>,
        eta: Vec<Option<KnotVector>>,
        g: Option<KnotVector>,
        constraints: Vec<Constraint>,
        gradient_mode: GradientMode,
    ) -> Result<Self> {
        if eta.len() != d2 {
            return Err(Error::invalid(format!("expected {d2} eta forms, got {}", eta.len())));
        }
        if let Some(k) = &g {
            if k.domain().0 != 0.0 {
                return Err(Error::invalid("g basis domain must start at 0"));
            }
        }
        let mut spec = ModelSpec { class, d1, d2, gamma, eta, g, constraints, gradient_mode, layout: Layout::default() };
        spec.layout = spec.build_layout()?;
        Ok(spec)
    }

    /// A spec for `class` with the given bases and the class's default constraints.
    pub fn for_class(class: ModelClass, d1: usize, d2: usize, time_basis: Option<KnotVector>, g_basis: Option<KnotVector>) -> Result<Self> {
        let gamma = if class.has_gamma() { time_basis.clone() } else { None };
        if class.has_gamma() && gamma.is_none() {
            return Err(Error::invalid(format!("model '{class}' needs a time basis")));
        }
        let eta = (0..d2).map(|_| if class.has_eta() { time_basis.clone() } else { None }).collect::<Vec<_>>();
        if class.has_eta() && d2 > 0 && eta[0].is_none() {
            return Err(Error::invalid(format!("model '{class}' needs a time basis")));
        }
        let g = if class.has_g() {
            Some(g_basis.ok_or_else(|| Error::invalid(format!("model '{class}' needs a g basis")))?)
        } else {
            None
        };
        ModelSpec::new(class, d1, d2, gamma, eta, g, class.default_constraints(), GradientMode::Auto)
    }

    pub fn with_constraints(mut self, constraints: Vec<Constraint>) -> Result<Self> {
        self.constraints = constraints;
        self.layout = self.build_layout()?;
        Ok(self)
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    fn build_layout(&self) -> Result<Layout> {
        let mut coords = Vec::new();
        coords.extend((0..self.d1).map(Coord::Beta));
        let mut time_bases: Vec<KnotVector> = Vec::new();
        let mut group_of = |k: &KnotVector| match time_bases.iter().position(|b| b == k) {
            Some(i) => i,
            None => {
                time_bases.push(k.clone());
                time_bases.len() - 1
            }
        };
        let gamma_offset = coords.len();
        let gamma_group = self.gamma.as_ref().map(|k| {
            coords.extend((0..k.n_basis()).map(Coord::Gamma));
            group_of(k)
        });
        let mut eta_offsets = Vec::with_capacity(self.d2);
        let mut eta_groups = Vec::with_capacity(self.d2);
        for (l, form) in self.eta.iter().enumerate() {
            match form {
                Some(k) => {
                    eta_offsets.push(Some(coords.len()));
                    coords.extend((0..k.n_basis()).map(|j| Coord::Eta(l, j)));
                    eta_groups.push(Some(group_of(k)));
                }
                None => {
                    eta_offsets.push(None);
                    eta_groups.push(None);
                }
            }
        }
        let g_offset = coords.len();
        if let Some(k) = &self.g {
            coords.extend((0..k.n_basis()).map(Coord::G));
        }

        let mut fixed: Vec<Option<f64>> = vec![None; coords.len()];
        for c in &self.constraints {
            let idx = match *c {
                Constraint::FixBeta { index, .. } => {
                    if index >= self.d1 {
                        return Err(Error::invalid(format!("constraint {c}: model has {} beta coordinates", self.d1)));
                    }
                    index
                }
                Constraint::FixLeftValue { target: SplineTarget::Gamma, .. } => {
                    if self.gamma.is_none() {
                        return Err(Error::invalid(format!("constraint {c}: gamma is fixed at zero")));
                    }
                    gamma_offset
                }
                Constraint::FixLeftValue { target: SplineTarget::Eta(l), .. } => {
                    match eta_offsets.get(l).copied().flatten() {
                        Some(o) => o,
                        None => return Err(Error::invalid(format!("constraint {c}: eta{} is not estimated", l + 1))),
                    }
                }
                Constraint::FixLeftValue { target: SplineTarget::G, .. } => {
                    if self.g.is_none() {
                        return Err(Error::invalid(format!("constraint {c}: g is fixed at zero")));
                    }
                    g_offset
                }
            };
            let value = match *c {
                Constraint::FixBeta { value, .. } | Constraint::FixLeftValue { value, .. } => value,
            };
            if !value.is_finite() {
                return Err(Error::invalid(format!("constraint {c}: non-finite value")));
            }
            if fixed[idx].is_some() {
                return Err(Error::invalid(format!("constraint {c} duplicates another constraint")));
            }
            fixed[idx] = Some(value);
        }
        let mut free_index = vec![None; coords.len()];
        let mut free_coords = Vec::new();
        let mut free_to_full = Vec::new();
        for (i, f) in fixed.iter().enumerate() {
            if f.is_none() {
                free_index[i] = Some(free_to_full.len());
                free_to_full.push(i);
                free_coords.push(coords[i]);
            }
        }
        let fixed_values = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
        Ok(Layout {
            coords,
            free_index,
            free_coords,
            free_to_full,
            fixed_values,
            gamma_offset,
            eta_offsets,
            g_offset,
            time_bases,
            gamma_group,
            eta_groups,
        })
    }

    /// Errors when the constraint set leaves a known non-identifiability.
    pub fn check_identifiable(&self) -> Result<()> {
        let has_time = self.gamma.is_some();
        if self.g.is_some() && has_time {
            let left_fixed = self
                .constraints
                .iter()
                .any(|c| matches!(c, Constraint::FixLeftValue { target: SplineTarget::G | SplineTarget::Gamma, .. }));
            if !left_fixed {
                return Err(Error::invalid("gamma and g are only identified up to a shift; fix g0 or gamma0"));
            }
            let beta_fixed = self.constraints.iter().any(|c| matches!(c, Constraint::FixBeta { value, .. } if *value != 0.0));
            if self.d1 > 0 && !beta_fixed && self.eta.iter().all(Option::is_none) {
                return Err(Error::invalid("transformation models are identified only up to scale; fix a nonzero beta coordinate"));
            }
        }
        Ok(())
    }

    pub fn n_full(&self) -> usize {
        self.layout.coords.len()
    }

    pub fn n_free(&self) -> usize {
        self.layout.free_to_full.len()
    }

    pub fn free_coords(&self) -> &[Coord] {
        &self.layout.free_coords
    }

    /// Free index of a structured coordinate, if it is not constrained.
    pub fn free_index_of(&self, coord: Coord) -> Option<usize> {
        self.layout.coords.iter().position(|&c| c == coord).and_then(|i| self.layout.free_index[i])
    }

    pub fn n_gamma(&self) -> usize {
        self.gamma.as_ref().map_or(0, KnotVector::n_basis)
    }

    pub fn n_g(&self) -> usize {
        self.g.as_ref().map_or(0, KnotVector::n_basis)
    }

    pub fn basis_of(&self, target: SplineTarget) -> Option<&KnotVector> {
        match target {
            SplineTarget::Gamma => self.gamma.as_ref(),
            SplineTarget::Eta(l) => self.eta.get(l).and_then(Option::as_ref),
            SplineTarget::G => self.g.as_ref(),
        }
    }

    /// Active spline targets in layout order.
    pub fn targets(&self) -> Vec<SplineTarget> {
        let mut t = Vec::new();
        if self.gamma.is_some() {
            t.push(SplineTarget::Gamma);
        }
        t.extend(self.eta.iter().enumerate().filter(|(_, e)| e.is_some()).map(|(l, _)| SplineTarget::Eta(l)));
        if self.g.is_some() {
            t.push(SplineTarget::G);
        }
        t
    }

    /// Free indices of a target's coefficients (`None` where constrained).
    pub fn target_free_indices(&self, target: SplineTarget) -> Vec<Option<usize>> {
        let (offset, q) = match target {
            SplineTarget::Gamma => (self.layout.gamma_offset, self.n_gamma()),
            SplineTarget::Eta(l) => match (self.layout.eta_offsets.get(l).copied().flatten(), self.basis_of(target)) {
                (Some(o), Some(k)) => (o, k.n_basis()),
                _ => return Vec::new(),
            },
            SplineTarget::G => (self.layout.g_offset, self.n_g()),
        };
        (offset..offset + q).map(|i| self.layout.free_index[i]).collect()
    }

    /// Forward sensitivities unless there are many parameters and `g` couples the state.
    pub fn use_forward(&self) -> bool {
        match self.gradient_mode {
            GradientMode::Forward => true,
            GradientMode::Adjoint => false,
            GradientMode::Auto => self.g.is_none() || self.n_free() <= 25,
        }
    }

    pub fn zero_params(&self) -> ParamVector {
        self.unpack(&vec![0.0; self.n_free()]).expect("length matches")
    }

    /// Free coordinates of `theta` in layout order.
    pub fn pack(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        let full = self.to_full(theta)?;
        Ok(self.layout.free_to_full.iter().map(|&i| full[i]).collect())
    }

    /// Rebuilds structured parameters, re-inserting constrained values.
    pub fn unpack(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.n_free() {
            return Err(Error::LengthMismatch { expected: self.n_free(), got: flat.len() });
        }
        let mut full = self.layout.fixed_values.clone();
        for (k, &i) in self.layout.free_to_full.iter().enumerate() {
            full[i] = flat[k];
        }
        Ok(self.from_full(&full))
    }

    fn to_full(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        let check = |what: &str, got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what}: expected {expected} coefficients, got {got}")))
            }
        };
        check("beta", theta.beta.len(), self.d1)?;
        check("gamma", theta.gamma.len(), self.n_gamma())?;
        check("eta", theta.eta.len(), self.d2)?;
        for (l, e) in theta.eta.iter().enumerate() {
            check("eta", e.len(), self.eta[l].as_ref().map_or(0, KnotVector::n_basis))?;
        }
        check("g", theta.g.len(), self.n_g())?;
        let mut full = Vec::with_capacity(self.n_full());
        full.extend_from_slice(&theta.beta);
        full.extend_from_slice(&theta.gamma);
        for e in &theta.eta {
            full.extend_from_slice(e);
        }
        full.extend_from_slice(&theta.g);
        Ok(full)
    }

    fn from_full(&self, full: &[f64]) -> ParamVector {
        let mut off = 0;
        let mut take = |n: usize| {
            let v = full[off..off + n].to_vec();
            off += n;
            v
        };
        let beta = take(self.d1);
        let gamma = take(self.n_gamma());
        let eta = self.eta.iter().map(|k| take(k.as_ref().map_or(0, KnotVector::n_basis))).collect();
        let g = take(self.n_g());
        ParamVector { beta, gamma, eta, g }
    }

    pub fn spline(&self, theta: &ParamVector, target: SplineTarget) -> Option<SplineFunction> {
        let knots = self.basis_of(target)?.clone();
        let coeffs = match target {
            SplineTarget::Gamma => theta.gamma.clone(),
            SplineTarget::Eta(l) => theta.eta[l].clone(),
            SplineTarget::G => theta.g.clone(),
        };
        SplineFunction::new(knots, coeffs).ok()
    }

    /// Per-subject view of the hazard at parameters `theta`.
    pub fn subject<'a>(&'a self, theta: &'a ParamVector, x: &'a [f64], z: &'a [f64]) -> Result<SubjectHazard<'a>> {
        if x.len() != self.d1 || z.len() != self.d2 {
            return Err(Error::invalid(format!(
                "covariates: expected {} x and {} z, got {} and {}",
                self.d1,
                self.d2,
                x.len(),
                z.len()
            )));
        }
        let lin: f64 = x.iter().zip(&theta.beta).map(|(a, b)| a * b).sum();
        let layout = &self.layout;
        let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut add = |group: usize, weight: f64, coeffs: &[f64]| {
            let pos = match groups.iter().position(|(g, _)| *g == group) {
                Some(p) => p,
                None => {
                    groups.push((group, vec![0.0; coeffs.len()]));
                    groups.len() - 1
                }
            };
            for (acc, c) in groups[pos].1.iter_mut().zip(coeffs) {
                *acc += weight * c;
            }
        };
        if let Some(gr) = layout.gamma_group {
            add(gr, 1.0, &theta.gamma);
        }
        for (l, gr) in layout.eta_groups.iter().enumerate() {
            if let Some(gr) = gr {
                add(*gr, z[l], &theta.eta[l]);
            }
        }
        Ok(SubjectHazard { spec: self, theta, x, z, lin, groups })
    }
}

/// Structured parameters. Inactive components are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

/// Basis values shared by one evaluation of `ψ` and its partials.
pub struct Bases {
    time: Vec<LocalBasis>,
    g: Option<LocalBasis>,
    g_slope: f64,
}

impl Bases {
    pub fn g_slope(&self) -> f64 {
        self.g_slope
    }
}

fn local_value(b: &LocalBasis, j: usize) -> f64 {
    if j >= b.first && j < b.first + b.len {
        b.values[j - b.first]
    } else {
        0.0
    }
}

/// The hazard for one subject: `x'β` and the combined time-coefficient
/// vectors are precomputed so evaluating `ψ` costs `O(order)`.
pub struct SubjectHazard<'a> {
    spec: &'a ModelSpec,
    theta: &'a ParamVector,
    x: &'a [f64],
    z: &'a [f64],
    lin: f64,
    groups: Vec<(usize, Vec<f64>)>,
}

impl SubjectHazard<'_> {
    pub fn n_free(&self) -> usize {
        self.spec.n_free()
    }

    pub fn bases(&self, t: f64, lam: f64) -> Bases {
        let time = self.groups.iter().map(|(g, _)| self.spec.layout.time_bases[*g].local_basis(t)).collect();
        let (g, g_slope) = match &self.spec.g {
            Some(k) => (Some(k.local_basis_saturating(lam)), k.local_basis_deriv_saturating(lam).dot(&self.theta.g)),
            None => (None, 0.0),
        };
        Bases { time, g, g_slope }
    }

    /// Exponent `ψ(t, Λ)` from precomputed bases.
    pub fn psi_with(&self, b: &Bases) -> f64 {
        let mut psi = self.lin;
        for (basis, (_, coeffs)) in b.time.iter().zip(&self.groups) {
            psi += basis.dot(coeffs);
        }
        if let Some(gb) = &b.g {
            psi += gb.dot(&self.theta.g);
        }
        psi
    }

    pub fn psi(&self, t: f64, lam: f64) -> f64 {
        self.psi_with(&self.bases(t, lam))
    }

    /// `g'(Λ)`, zero when `g` is absent.
    pub fn g_slope(&self, lam: f64) -> f64 {
        match &self.spec.g {
            Some(k) => k.local_basis_deriv_saturating(lam).dot(&self.theta.g),
            None => 0.0,
        }
    }

    pub fn rate(&self, t: f64, lam: f64) -> Result<f64> {
        guarded_exp(self.psi(t, lam))
    }

    /// Partials of `ψ` with respect to the free coordinates.
    pub fn psi_partials_with(&self, b: &Bases, out: &mut [f64]) {
        let layout = &self.spec.layout;
        let group_pos = |gr: Option<usize>| gr.and_then(|g| self.groups.iter().position(|(h, _)| *h == g));
        let gamma_pos = group_pos(layout.gamma_group);
        for (k, coord) in layout.free_coords.iter().enumerate() {
            out[k] = match *coord {
                Coord::Beta(i) => self.x[i],
                Coord::Gamma(j) => gamma_pos.map_or(0.0, |p| local_value(&b.time[p], j)),
                Coord::Eta(l, j) => group_pos(layout.eta_groups[l]).map_or(0.0, |p| self.z[l] * local_value(&b.time[p], j)),
                Coord::G(j) => b.g.as_ref().map_or(0.0, |gb| local_value(gb, j)),
            };
        }
    }

    pub fn psi_partials(&self, t: f64, lam: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free()];
        self.psi_partials_with(&self.bases(t, lam), &mut out);
        out
    }

    /// `(f, ∂ψ/∂θ, ∂ψ/∂Λ)` in one pass.
    pub fn eval_full(&self, t: f64, lam: f64, dpsi: &mut [f64]) -> Result<(f64, f64)> {
        let b = self.bases(t, lam);
        let f = guarded_exp(self.psi_with(&b))?;
        self.psi_partials_with(&b, dpsi);
        Ok((f, b.g_slope))
    }

    /// Λ on `[0, t_end]` as a dense solution.
    pub fn solve_dense(&self, t_end: f64, opts: &SolverOptions) -> Result<odesolve::DenseSolution> {
        odesolve::DenseSolution::record(&ScalarHazard(self), 0.0, &[0.0], t_end, opts)
    }

    pub fn cumulative_hazard(&self, t: f64, opts: &SolverOptions) -> Result<f64> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::invalid(format!("time must be finite and nonnegative, got {t}")));
        }
        let (_, y) = odesolve::integrate(&ScalarHazard(self), 0.0, &[0.0], t, opts, |_| Ok(odesolve::Control::Continue))?;
        Ok(y[0])
    }
}

struct ScalarHazard<'a, 'b>(&'a SubjectHazard<'b>);

impl OdeSystem for ScalarHazard<'_, '_> {
    fn dim(&self) -> usize {
        1
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy[0] = self.0.rate(t, y[0])?;
        Ok(())
    }
}

/// `exp(ψ)`, refusing `ψ > EXPONENT_LIMIT`. Very negative `ψ` just underflows towards 0.
pub fn guarded_exp(psi: f64) -> Result<f64> {
    if psi > EXPONENT_LIMIT || !psi.is_finite() {
        Err(Error::Overflow { psi })
    } else {
        Ok(psi.exp())
    }
}

/// `f(t, Λ) = exp(ψ)` for one subject.
pub fn hazard_rhs(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], t: f64, lam: f64) -> Result<f64> {
    spec.subject(theta, x, z)?.rate(t, lam)
}

/// `(∂f/∂θ_free, ∂f/∂Λ)`.
pub fn rhs_partials(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], t: f64, lam: f64) -> Result<(Vec<f64>, f64)> {
    let s = spec.subject(theta, x, z)?;
    let mut d = vec![0.0; spec.n_free()];
    let (f, slope) = s.eval_full(t, lam, &mut d)?;
    d.iter_mut().for_each(|v| *v *= f);
    Ok((d, f * slope))
}

/// `Λ(t)` with `Λ(0) = 0`.
pub fn cumulative_hazard(theta: &ParamVector, spec: &ModelSpec, x: &[f64], z: &[f64], t: f64, opts: &SolverOptions) -> Result<f64> {
    spec.subject(theta, x, z)?.cumulative_hazard(t, opts)
}
