use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use nalgebra::DMatrix;
use odesurv::inference::{self, BandPoint, InfoEstimator};
use odesurv::model::{Constraint, Coord, Dataset, GradientMode, ModelClass, ModelSpec, ParamVector, SplineTarget};
use odesurv::optimize::{self, FitOptions, KnotRule, ModelConfig};
use odesurv::simulate::{self, StudyDesign, StudyMetrics};
use serde::{Deserialize, Serialize};

use crate::io::{self, num, VERSION};

/// Failure classes, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum CliError {
    /// Malformed input, no events, unknown setting, bad grid.
    Input(anyhow::Error),
    /// The fit ran but did not converge; the artifact was written.
    NotConverged(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(e) | CliError::Other(e) => write!(f, "{e:#}"),
            CliError::NotConverged(m) => f.write_str(m),
        }
    }
}

impl From<odesurv::Error> for CliError {
    fn from(e: odesurv::Error) -> Self {
        use odesurv::Error as E;
        match e.root() {
            E::InvalidInput(_) | E::NoEvents | E::LengthMismatch { .. } | E::Spline(_) => CliError::Input(e.into()),
            _ => CliError::Other(e.into()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait InputContext<T> {
    fn input(self) -> CliResult<T>;
}

impl<T> InputContext<T> for anyhow::Result<T> {
    fn input(self) -> CliResult<T> {
        self.map_err(|e| match e.downcast::<odesurv::Error>() {
            Ok(core) => core.into(),
            Err(e) => CliError::Input(e),
        })
    }
}

trait OtherContext<T> {
    fn other(self) -> CliResult<T>;
}

impl<T> OtherContext<T> for anyhow::Result<T> {
    fn other(self) -> CliResult<T> {
        self.map_err(CliError::Other)
    }
}

// ---------------------------------------------------------------- simulate

pub struct SimulateArgs {
    pub setting: String,
    pub n: usize,
    pub seed: u64,
    pub replicate: u64,
    pub out: PathBuf,
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let design = StudyDesign::builtin(&a.setting, a.n, a.seed)?;
    let data = simulate::gen_dataset(&design, a.replicate)?;
    let comment = format!("setting={} n={} seed={} replicate={}", a.setting, a.n, a.seed, a.replicate);
    io::write_dataset(&a.out, &data, &[comment]).other()?;
    info!("wrote {} rows ({} events) to {}", data.len(), data.n_events(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- fit

/// Model flags; every field overrides the config file when set.
#[derive(Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub model: Option<ModelClass>,
    pub knots: Option<usize>,
    pub order: Option<usize>,
    pub g_knots: Option<usize>,
    pub knot_rule: Option<KnotRule>,
    pub constraints: Option<String>,
    pub gradient_mode: Option<GradientMode>,
    pub info_estimator: Option<InfoEstimator>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display())).input()?;
                serde_json::from_str::<ModelConfig>(&text)
                    .with_context(|| format!("bad model config {}", p.display()))
                    .input()?
            }
            None => ModelConfig::default(),
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(k) = self.knots {
            cfg.knots = k;
        }
        if let Some(o) = self.order {
            cfg.order = o;
        }
        if self.g_knots.is_some() {
            cfg.g_knots = self.g_knots;
        }
        if let Some(r) = self.knot_rule {
            cfg.knot_rule = r;
        }
        if let Some(c) = &self.constraints {
            cfg.constraints = Some(Constraint::parse_list(c)?);
        }
        if let Some(g) = self.gradient_mode {
            cfg.gradient_mode = g;
        }
        if let Some(i) = self.info_estimator {
            cfg.info_estimator = i;
        }
        if let Some(t) = self.rel_tol {
            cfg.rel_tol = t;
        }
        if let Some(t) = self.abs_tol {
            cfg.abs_tol = t;
        }
        if cfg.model == ModelClass::Cox && self.model.is_none() && self.config.is_none() {
            warn!("no --model given; fitting cox");
        }
        Ok(cfg)
    }
}

pub struct FitArgs {
    pub data: PathBuf,
    pub config: ConfigArgs,
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
    pub g_roughness: Option<f64>,
    pub curves: Option<PathBuf>,
    pub grid: Option<String>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    /// Column name for `β` entries.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariate: Option<String>,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knots {
    pub gamma: Option<Vec<f64>>,
    pub eta: Vec<Option<Vec<f64>>>,
    pub g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub version: String,
    pub model: ModelClass,
    pub config: ModelConfig,
    pub options: FitOptions,
    pub n: usize,
    pub n_events: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Mean log-likelihood.
    pub loglik: f64,
    pub grad_norm: f64,
    pub info_estimator: InfoEstimator,
    pub condition: Option<f64>,
    pub constraints: Vec<String>,
    pub knots: Knots,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub coefficients: Vec<Coefficient>,
    pub theta: ParamVector,
    /// Free coordinates, in the order of `coefficients`.
    pub flat: Vec<f64>,
    /// Covariance of `flat`; absent when the information could not be inverted.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub spec: ModelSpec,
    pub warnings: Vec<String>,
}

impl FitArtifact {
    fn covariance_matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.covariance.as_ref()?;
        let k = rows.len();
        Some(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }
}

fn coord_name(c: Coord) -> String {
    match c {
        Coord::Beta(i) => format!("beta{}", i + 1),
        Coord::Gamma(j) => format!("gamma[{j}]"),
        Coord::Eta(l, j) => format!("eta{}[{j}]", l + 1),
        Coord::G(j) => format!("g[{j}]"),
    }
}

fn knot_list(spec: &ModelSpec) -> Knots {
    Knots {
        gamma: spec.gamma.as_ref().map(|k| k.full_knots().to_vec()),
        eta: spec.eta.iter().map(|e| e.as_ref().map(|k| k.full_knots().to_vec())).collect(),
        g: spec.g.as_ref().map(|k| k.full_knots().to_vec()),
    }
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let data = io::read_dataset(&a.data).input()?;
    let config = a.config.resolve()?;
    let grid = a.grid.as_deref().map(io::parse_grid).transpose().input()?;
    let mut opts = FitOptions::default();
    if let Some(m) = a.max_iters {
        opts.max_iters = m;
    }
    if let Some(g) = a.grad_tol {
        opts.grad_tol = g;
    }
    if let Some(w) = a.g_roughness {
        opts.g_roughness = w;
    }
    data.require_events()?;
    info!("fitting {} to {} subjects ({} events)", config.model, data.len(), data.n_events());

    let (spec, fit) = optimize::fit_config(&data, &config, &opts)?;
    let mut warnings = Vec::new();
    if fit.warm_start_failed {
        warnings.push("Cox warm start failed; started from zeros".to_string());
    }
    let info = inference::information_matrix(&data, &fit.theta_hat, &spec, &config.solver(), config.info_estimator)
        .map(|m| m + optimize::roughness_hessian(&spec, opts.g_roughness));
    let cov = match info.and_then(|m| inference::covariance_holding(&m, data.len())) {
        Ok(c) => {
            if !c.held.is_empty() {
                let names: Vec<String> = c.held.iter().map(|&k| coord_name(spec.free_coords()[k])).collect();
                warnings.push(format!("no information on {}; held fixed for the covariance", names.join(", ")));
            }
            Some(c)
        }
        Err(e) => {
            warnings.push(format!("no standard errors: {e}"));
            None
        }
    };
    let se = cov.as_ref().map(|c| c.std_errors());
    let coefficients = spec
        .free_coords()
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let s = se.as_ref().map(|s| s[k]).filter(|s| !s.is_nan());
            let est = fit.flat[k];
            Coefficient {
                name: coord_name(c),
                covariate: match c {
                    Coord::Beta(i) => data.x_names.get(i).cloned(),
                    _ => None,
                },
                estimate: est,
                se: s,
                ci_lower: s.map(|s| inference::confidence_intervals(&[est], &[s])[0].0),
                ci_upper: s.map(|s| inference::confidence_intervals(&[est], &[s])[0].1),
            }
        })
        .collect();
    if !fit.converged {
        warnings.push(format!("did not converge: |grad| = {:.3e} after {} iterations", fit.grad_norm, fit.iters));
    }
    let artifact = FitArtifact {
        version: VERSION.to_string(),
        model: config.model,
        config: config.clone(),
        options: opts.clone(),
        n: data.len(),
        n_events: data.n_events(),
        converged: fit.converged,
        iterations: fit.iters,
        loglik: fit.loglik,
        grad_norm: fit.grad_norm,
        info_estimator: config.info_estimator,
        condition: cov.as_ref().map(|c| c.condition),
        constraints: spec.constraints.iter().map(Constraint::to_string).collect(),
        knots: knot_list(&spec),
        x_names: data.x_names.clone(),
        z_names: data.z_names.clone(),
        coefficients,
        theta: fit.theta_hat.clone(),
        flat: fit.flat.clone(),
        covariance: cov.as_ref().map(|c| c.to_rows()),
        spec,
        warnings,
    };
    io::write_json(&a.out, &artifact).other()?;
    for w in &artifact.warnings {
        warn!("{w}");
    }
    if let Some(dir) = &a.curves {
        let grid = grid.unwrap_or_else(|| default_grid(&data));
        write_curves(dir, &artifact, &data, &grid)?;
    }
    if !artifact.converged {
        return Err(CliError::NotConverged(format!(
            "fit did not converge after {} iterations (|grad| = {:.3e}); wrote {}",
            artifact.iterations,
            artifact.grad_norm,
            a.out.display()
        )));
    }
    Ok(())
}

fn default_grid(data: &Dataset) -> Vec<f64> {
    simulate::linspace(0.0, data.max_time(), 101)
}

fn band_rows(points: &[BandPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| vec![num(p.t), num(p.estimate), num(p.lower), num(p.upper), u8::from(p.extrapolated).to_string()])
        .collect()
}

fn write_curves(dir: &Path, art: &FitArtifact, data: &Dataset, grid: &[f64]) -> CliResult<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).other()?;
    let header = ["t", "estimate", "lower", "upper", "extrapolated"];
    let Some(cov) = art.covariance_matrix() else {
        warn!("no covariance; curve bands skipped");
        return Ok(());
    };
    for target in art.spec.targets() {
        let pts = match target {
            SplineTarget::G => {
                let hi = art.spec.g.as_ref().map_or(1.0, |k| k.domain().1);
                inference::pointwise_band(&art.spec, &art.theta, &cov, target, &simulate::linspace(0.0, hi, 101))?
            }
            _ => inference::pointwise_band(&art.spec, &art.theta, &cov, target, grid)?,
        };
        io::write_table(&dir.join(format!("{target}.csv")), &header, &band_rows(&pts)).other()?;
    }
    let mean = |col: &dyn Fn(&odesurv::model::Observation) -> &Vec<f64>, k: usize| {
        data.observations.iter().map(|o| col(o)[k]).sum::<f64>() / data.len() as f64
    };
    let x: Vec<f64> = (0..data.d1()).map(|k| mean(&|o| &o.x, k)).collect();
    let z: Vec<f64> = (0..data.d2()).map(|k| mean(&|o| &o.z, k)).collect();
    let pts = inference::survival_band(&art.theta, &art.spec, &cov, &x, &z, grid, &art.config.solver())?;
    io::write_table(&dir.join("survival.csv"), &header, &band_rows(&pts)).other()?;
    Ok(())
}

// ---------------------------------------------------------------- replicate

pub struct ReplicateArgs {
    pub setting: String,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub models: Vec<ModelClass>,
    pub fix_beta1: bool,
    pub workers: Option<usize>,
    pub out: PathBuf,
    pub summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct StudySummary<'a> {
    version: &'static str,
    setting: &'a str,
    n: usize,
    seed: u64,
    replicates: usize,
    fix_beta1: bool,
    models: &'a [StudyMetrics],
}

pub fn replicate(a: &ReplicateArgs) -> CliResult<()> {
    let design = StudyDesign::builtin(&a.setting, a.n, a.seed)?;
    if a.models.is_empty() {
        return Err(CliError::Input(anyhow!("--models needs at least one model class")));
    }
    let configs: Vec<ModelConfig> = a
        .models
        .iter()
        .map(|&m| {
            let mut cfg = design.model_config(m);
            if a.fix_beta1 && !m.has_g() {
                cfg.constraints = Some(vec![Constraint::FixBeta { index: 0, value: 1.0 }]);
            }
            cfg
        })
        .collect();
    info!("{}: {} replicates of N = {} for {} model(s)", a.setting, a.reps, a.n, configs.len());
    let metrics = simulate::run_study(&design, &configs, &FitOptions::default(), a.reps, a.workers)?;
    let header = ["setting", "model", "n", "replicates", "failures", "quantity", "truth", "mean", "bias", "se", "ese", "cp"];
    let mut rows = Vec::new();
    for m in &metrics {
        let lead = |q: &str| vec![m.design.clone(), m.model.to_string(), m.n.to_string(), m.replicates.to_string(), m.failures.to_string(), q.to_string()];
        for c in &m.coefficients {
            let mut r = lead(&c.name);
            r.extend([c.truth, c.mean, c.bias, c.se, c.ese, c.cp].map(num));
            rows.push(r);
        }
        for i in &m.imse {
            let mut r = lead(&format!("imse:{}", i.target));
            r.extend([String::new(), num(i.mean), String::new(), num(i.sd), String::new(), String::new()]);
            rows.push(r);
        }
    }
    io::write_table(&a.out, &header, &rows).other()?;
    if let Some(p) = &a.summary {
        let s = StudySummary {
            version: VERSION,
            setting: &a.setting,
            n: a.n,
            seed: a.seed,
            replicates: a.reps,
            fix_beta1: a.fix_beta1,
            models: &metrics,
        };
        io::write_json(p, &s).other()?;
    }
    Ok(())
}

// ---------------------------------------------------------------- predict

pub struct PredictArgs {
    pub fit: PathBuf,
    pub covariates: PathBuf,
    pub grid: String,
    pub out: PathBuf,
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let grid = io::parse_grid(&a.grid).input()?;
    let text = std::fs::read_to_string(&a.fit).with_context(|| format!("cannot read {}", a.fit.display())).input()?;
    let art: FitArtifact = serde_json::from_str(&text).with_context(|| format!("bad fit artifact {}", a.fit.display())).input()?;
    let profiles = io::read_profiles(&a.covariates, &art.x_names, &art.z_names).input()?;
    let cov = art.covariance_matrix();
    if cov.is_none() {
        warn!("fit has no covariance; bands left empty");
    }
    let solver = art.config.solver();
    let mut rows = Vec::with_capacity(profiles.len() * grid.len());
    for p in &profiles {
        let lam = inference::cumulative_hazard_curve(&art.theta, &art.spec, &p.x, &p.z, &grid, &solver)?;
        let band = cov
            .as_ref()
            .map(|c| inference::survival_band(&art.theta, &art.spec, c, &p.x, &p.z, &grid, &solver))
            .transpose()?;
        for (k, (&t, &l)) in grid.iter().zip(&lam).enumerate() {
            let (lo, hi) = band.as_ref().map_or((String::new(), String::new()), |b| (num(b[k].lower), num(b[k].upper)));
            rows.push(vec![p.id.clone(), num(t), num(l), num((-l).exp()), lo, hi]);
        }
    }
    io::write_table(&a.out, &["id", "t", "cumhaz", "survival", "lower", "upper"], &rows).other()?;
    Ok(())
}
