//! Experiment configuration, Monte Carlo orchestration and result files.
//!
//! A run is described by a TOML file (see [`ExperimentConfig`]); CLI flags
//! override the `[run]` table. Trial `i` of master seed `s` draws its noise
//! from ChaCha8 stream `2i` of seed `s` and its search randomness from stream
//! `2i + 1`, so results do not depend on thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimator::{
    closed_loop_moments, distance, estimate_from_gram, regularization_weight, LassoOptions, NormConvention,
};
use crate::identifiability::{
    base_episode_length, certify_scoped, eps_warning, initial_episode_length, profile_assumption, sample_complexity,
    AssumptionProfile, CertificateScope, EpisodeSchedule, IdentifiabilityCertificate,
};
use crate::model::{generate_sparse_system, matrix_from_rows, rollout, CostMatrices, FeedbackGain, InteractionMatrix};
use crate::noise::{aux_rng, GaussianNoise};
use crate::ofu::{check_good_events, run_adaptive_control, AdaptiveConfig, EventReport, Mode, OfuOptions, RunStatus};
use crate::riccati::{solve_riccati, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Guardrail defaults that need `override_guardrails = true` to exceed.
pub const MAX_P: usize = 10;
pub const MAX_K: usize = 3;
pub const MAX_HORIZON: u64 = 1_000_000;

/// Serializes a matrix as nested rows.
pub fn serialize_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    crate::model::matrix_to_rows(m).serialize(s)
}

/// Top-level configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub run: RunSpec,
}

/// Either explicit `a`, `b` or a generated system.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub p: Option<usize>,
    pub r: Option<usize>,
    pub k: Option<usize>,
    pub spectral_target: Option<f64>,
    /// Seed for generation, independent of the run seed.
    #[serde(default)]
    pub system_seed: u64,
}

/// `Q` and `R`; identities when omitted.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
}

/// Initial gain source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum GainSpec {
    Matrix(Vec<Vec<f64>>),
    /// `"optimal"` for `L(Θ⁰)` or `"zero"`.
    Named(String),
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::Named("optimal".into())
    }
}

/// `ℓ(Θ⁰, ε)` as a number or `"auto"`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EllSpec {
    Value(f64),
    Auto(String),
}

impl Default for EllSpec {
    fn default() -> Self {
        EllSpec::Auto("auto".into())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScopeSpec {
    #[default]
    AllSubsets,
    RowSupports,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum JStarSource {
    #[default]
    Riccati,
    Simulated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSpec {
    pub eps: f64,
    pub delta: f64,
    pub ell: EllSpec,
    pub initial_gain: GainSpec,
    pub certificate: ScopeSpec,
    /// Sparsity level for all-subset certificates; defaults to the largest row support.
    pub k: Option<usize>,
    /// Episode lengths; the closed-form values are used when omitted.
    pub n0: Option<u64>,
    pub n1: Option<u64>,
    /// Neighborhood samples used when `ell = "auto"` and by `profile`.
    pub profile_samples: usize,
    pub ofu: OfuOptions,
    /// Sample size of the estimation experiment; the closed-form value when omitted.
    pub estimation_n: Option<u64>,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        AlgorithmSpec {
            eps: 0.5,
            delta: 0.1,
            ell: EllSpec::default(),
            initial_gain: GainSpec::default(),
            certificate: ScopeSpec::default(),
            k: None,
            n0: None,
            n1: None,
            profile_samples: 200,
            ofu: OfuOptions::default(),
            estimation_n: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub horizon: u64,
    pub trials: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Horizons at which `R(T)` is sampled for the log-log fit.
    pub horizons: Vec<u64>,
    pub out_dir: PathBuf,
    pub j_star: JStarSource,
    pub j_star_steps: usize,
    pub allow_uncertified: bool,
    pub override_guardrails: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            horizon: 1 << 12,
            trials: 10,
            seed: 0,
            mode: Mode::Adaptive,
            horizons: Vec::new(),
            out_dir: PathBuf::from("out"),
            j_star: JStarSource::Riccati,
            j_star_steps: 1_000_000,
            allow_uncertified: false,
            override_guardrails: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Domain checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let a = &self.algorithm;
        if !(a.delta > 0.0 && a.delta < 1.0) {
            return Err(Error::Config("algorithm.delta must lie in (0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("algorithm.eps must be positive".into()));
        }
        if let EllSpec::Auto(s) = &a.ell {
            if s != "auto" {
                return Err(Error::Config(format!("algorithm.ell must be a number or \"auto\", got '{s}'")));
            }
        }
        if let EllSpec::Value(v) = a.ell {
            if !(v >= 1.0) {
                return Err(Error::Config("algorithm.ell must be at least 1".into()));
            }
        }
        if let GainSpec::Named(s) = &a.initial_gain {
            if s != "optimal" && s != "zero" {
                return Err(Error::Config(format!("unknown initial_gain '{s}'")));
            }
        }
        let r = &self.run;
        if r.horizon == 0 {
            return Err(Error::Config("run.horizon must be at least 1".into()));
        }
        if r.trials == 0 {
            return Err(Error::Config("run.trials must be at least 1".into()));
        }
        if !r.override_guardrails && r.horizon > MAX_HORIZON {
            return Err(Error::Config(format!(
                "horizon {} exceeds {MAX_HORIZON}; set run.override_guardrails",
                r.horizon
            )));
        }
        Ok(())
    }
}

/// A configuration with every derived quantity filled in.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub theta0: InteractionMatrix,
    pub cost: CostMatrices,
    pub initial_gain: FeedbackGain,
    pub certificate: IdentifiabilityCertificate,
    pub ell: f64,
    /// Sparsity level used in the sample-size formulas.
    pub k: usize,
    pub n0: u64,
    pub n1: u64,
    pub j_star: f64,
    pub warnings: Vec<String>,
}

fn build_system(spec: &SystemSpec) -> Result<InteractionMatrix> {
    match (&spec.a, &spec.b) {
        (Some(a), Some(b)) => InteractionMatrix::new(matrix_from_rows(a)?, matrix_from_rows(b)?)
            .map_err(|e| Error::Config(e.to_string())),
        (None, None) => {
            let (Some(p), Some(r), Some(k)) = (spec.p, spec.r, spec.k) else {
                return Err(Error::Config("system needs either a and b, or p, r and k".into()));
            };
            let target = spec.spectral_target.unwrap_or(0.7);
            let mut rng = aux_rng(spec.system_seed, u64::MAX);
            generate_sparse_system(p, r, k, target, &mut rng)
        }
        _ => Err(Error::Config("system.a and system.b must be given together".into())),
    }
}

fn build_cost(spec: &CostSpec, p: usize, r: usize) -> Result<CostMatrices> {
    let q = match &spec.q {
        Some(rows) => matrix_from_rows(rows)?,
        None => DMatrix::identity(p, p),
    };
    let rm = match &spec.r {
        Some(rows) => matrix_from_rows(rows)?,
        None => DMatrix::identity(r, r),
    };
    if q.nrows() != p || rm.nrows() != r {
        return Err(Error::Config("cost matrices do not match the system".into()));
    }
    CostMatrices::new(q, rm).map_err(|e| Error::Config(e.to_string()))
}

/// Resolves the system, gain, certificate, `ℓ`, episode lengths and `J_*`.
///
/// An invalid certificate is an error unless `run.allow_uncertified` is set.
pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedExperiment> {
    config.validate()?;
    let theta0 = build_system(&config.system)?;
    let (p, r) = (theta0.p(), theta0.r());
    let cost = build_cost(&config.cost, p, r)?;
    let alg = &config.algorithm;
    let mut warnings = Vec::new();

    let k = alg.k.unwrap_or_else(|| theta0.max_row_support().max(1));
    if !config.run.override_guardrails && (p > MAX_P || k > MAX_K) {
        return Err(Error::Config(format!(
            "p = {p}, k = {k} exceed the guardrails p <= {MAX_P}, k <= {MAX_K}; set run.override_guardrails"
        )));
    }
    let truth = solve_riccati(&theta0, &cost, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let initial_gain = match &alg.initial_gain {
        GainSpec::Matrix(rows) => {
            let g = FeedbackGain::from_rows(rows)?;
            if g.r() != r || g.p() != p {
                return Err(Error::Config(format!("initial_gain must be {r}x{p}")));
            }
            g
        }
        GainSpec::Named(name) if name == "zero" => FeedbackGain::zeros(r, p),
        GainSpec::Named(_) => truth.gain.clone(),
    };
    let scope = match alg.certificate {
        ScopeSpec::AllSubsets => CertificateScope::AllSubsets { k },
        ScopeSpec::RowSupports => CertificateScope::RowSupports,
    };
    let certificate = certify_scoped(&theta0, &initial_gain, &scope)?;
    if !certificate.is_valid() {
        let msg = format!(
            "initial gain is not certified: rho = {}, c_min = {}, alpha = {}",
            certificate.rho, certificate.c_min, certificate.alpha
        );
        if !config.run.allow_uncertified {
            return Err(Error::Config(msg));
        }
        warnings.push(msg);
    }

    let ell = match alg.ell {
        EllSpec::Value(v) => v,
        EllSpec::Auto(_) => {
            let mut rng = aux_rng(config.run.seed, u64::MAX - 1);
            profile_assumption(&theta0, &cost, alg.eps, alg.profile_samples, &scope, &mut rng)?.ell_theta_eps
        }
    };
    // Sample sizes use the configured sparsity level when it exceeds the certified one.
    let cert_k = alg.k.map_or(certificate.k, |k| k.max(certificate.k));
    let q = theta0.q();
    // Without a certificate the closed forms are undefined; zero lengths make
    // any later run fail on its own while certify and profile still work.
    let lenient = !certificate.is_valid();
    let mut length_warning = None;
    let mut closed_form = |f: &dyn Fn() -> Result<u64>| match f() {
        Ok(n) => Ok(n),
        Err(e) if lenient => {
            length_warning = Some(format!("episode lengths undefined: {e}"));
            Ok(0)
        }
        Err(e) => Err(Error::Config(format!("episode length: {e}"))),
    };
    let n0 = match alg.n0 {
        Some(n) => n,
        None => closed_form(&|| {
            initial_episode_length(
                cert_k,
                initial_gain.ell(),
                certificate.alpha,
                certificate.rho,
                certificate.c_min,
                alg.eps,
                alg.delta,
                q,
            )
        })?,
    };
    let n1 = match alg.n1 {
        Some(n) => n,
        None => closed_form(&|| {
            base_episode_length(cert_k, ell, certificate.rho, certificate.c_min, alg.eps, alg.delta, q)
        })?,
    };
    warnings.extend(length_warning);
    if let Some(w) = eps_warning(alg.eps, theta0.theta_min(), ell, certificate.rho) {
        warnings.push(w);
    }
    let j_star = match config.run.j_star {
        JStarSource::Riccati => truth.average_cost(),
        JStarSource::Simulated => {
            let mut noise = GaussianNoise::with_stream(config.run.seed, u64::MAX - 2);
            let traj = rollout(&theta0, &truth.gain, &cost, config.run.j_star_steps.max(1), &mut noise, &vec![0.0; p])?;
            traj.costs().iter().sum::<f64>() / traj.len() as f64
        }
    };
    Ok(ResolvedExperiment {
        config: config.clone(),
        theta0,
        cost,
        initial_gain,
        certificate,
        ell,
        k: cert_k,
        n0,
        n1,
        j_star,
        warnings,
    })
}

impl ResolvedExperiment {
    /// Per-run configuration for the episodic algorithm.
    pub fn adaptive_config(&self) -> AdaptiveConfig {
        let alg = &self.config.algorithm;
        AdaptiveConfig {
            theta0: self.theta0.clone(),
            cost: self.cost.clone(),
            initial_gain: self.initial_gain.clone(),
            eps: alg.eps,
            delta: alg.delta,
            ell: self.ell,
            alpha: self.certificate.alpha,
            rho: self.certificate.rho,
            n0: self.n0,
            n1: self.n1,
            horizon: self.config.run.horizon,
            mode: self.config.run.mode,
            ofu: alg.ofu,
        }
    }
}

/// One trial of a regret sweep.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub status: RunStatus,
    pub costs: Vec<f64>,
    pub regret: Vec<f64>,
    pub events: EventReport,
    pub episodes: Vec<EpisodeSummary>,
}

/// Estimation diagnostics of one episode.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
    pub n: usize,
    pub lambda: Option<f64>,
    pub radius: Option<f64>,
    pub estimate_error: Option<f64>,
    pub j_tilde: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub stream: u64,
    pub error: String,
}

/// Aggregate of a regret sweep.
#[derive(Debug, Clone)]
pub struct RegretReport {
    pub j_star: f64,
    pub trials: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    pub schedule: Option<EpisodeSchedule>,
}

/// Mean and spread of `R(T)` at one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct HorizonStat {
    pub horizon: u64,
    pub trials: usize,
    pub mean_regret: f64,
    pub stderr_regret: f64,
    pub mean_regret_per_step: f64,
    pub stderr_regret_per_step: f64,
}

impl RegretReport {
    /// Fraction of completed trials where `E₁` held.
    pub fn e1_frequency(&self) -> f64 {
        frequency(self.trials.iter().map(|t| t.events.e1))
    }

    pub fn e2_frequency(&self) -> f64 {
        frequency(self.trials.iter().map(|t| t.events.e2))
    }

    pub fn state_bound_frequency(&self) -> f64 {
        frequency(self.trials.iter().map(|t| t.events.state_bound))
    }

    /// `R(T)` statistics over trials that reached `T`.
    pub fn horizon_stat(&self, horizon: u64) -> Option<HorizonStat> {
        let idx = usize::try_from(horizon).ok()?.checked_sub(1)?;
        let vals: Vec<f64> = self.trials.iter().filter_map(|t| t.regret.get(idx).copied()).collect();
        if vals.is_empty() {
            return None;
        }
        let (mean, se) = mean_stderr(&vals);
        let h = horizon as f64;
        Some(HorizonStat {
            horizon,
            trials: vals.len(),
            mean_regret: mean,
            stderr_regret: se,
            mean_regret_per_step: mean / h,
            stderr_regret_per_step: se / h,
        })
    }

    /// Least-squares slope of `log mean R(T)` against `log T`; `None` unless
    /// every mean is positive and at least two horizons are given.
    pub fn fitted_exponent(&self, horizons: &[u64]) -> Option<f64> {
        let pts: Vec<(f64, f64)> = horizons
            .iter()
            .map(|&h| self.horizon_stat(h).map(|s| ((h as f64).ln(), s.mean_regret)))
            .collect::<Option<Vec<_>>>()?;
        if pts.len() < 2 || pts.iter().any(|(_, m)| !(*m > 0.0)) {
            return None;
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        Some(ols_slope(&xs, &ys))
    }
}

fn frequency(it: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for b in it {
        n += 1;
        k += usize::from(b);
    }
    if n == 0 {
        f64::NAN
    } else {
        k as f64 / n as f64
    }
}

/// Sample mean and standard error.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ordinary least-squares slope.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Runs `config.run.trials` seeded runs of the episodic algorithm.
///
/// Failed trials are recorded; the sweep errors only when every trial fails.
pub fn run_experiment(resolved: &ResolvedExperiment) -> Result<RegretReport> {
    let cfg = resolved.adaptive_config();
    let seed = resolved.config.run.seed;
    let trials = resolved.config.run.trials;
    let outcomes: Vec<(usize, Result<TrialResult>)> = (0..trials)
        .into_par_iter()
        .map(|i| (i, run_trial(resolved, &cfg, seed, i)))
        .collect();
    let mut report = RegretReport {
        j_star: resolved.j_star,
        trials: Vec::new(),
        failures: Vec::new(),
        schedule: None,
    };
    let mut first_error = None;
    for (i, outcome) in outcomes {
        match outcome {
            Ok(t) => report.trials.push(t),
            Err(e) => {
                report.failures.push(TrialFailure {
                    trial: i,
                    seed,
                    stream: i as u64,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if report.trials.is_empty() {
        return Err(first_error.unwrap_or_else(|| Error::Config("no trials ran".into())));
    }
    report.schedule = Some(crate::identifiability::episode_lengths(
        resolved.n0,
        resolved.n1,
        resolved.theta0.q(),
        resolved.config.algorithm.delta,
        resolved.config.run.horizon,
    )?);
    Ok(report)
}

fn run_trial(resolved: &ResolvedExperiment, cfg: &AdaptiveConfig, seed: u64, trial: usize) -> Result<TrialResult> {
    let rec = run_adaptive_control(cfg, seed, trial as u64)?;
    let events = check_good_events(
        &rec,
        &resolved.theta0,
        cfg.delta,
        resolved.certificate.rho,
        cfg.horizon,
    );
    let costs = rec.trajectory.costs().to_vec();
    let regret = crate::ofu::cumulative_regret(&costs, resolved.j_star);
    let episodes = rec
        .episodes
        .iter()
        .map(|e| EpisodeSummary {
            episode: e.index,
            start: e.start,
            end: e.end,
            n: e.index.checked_sub(1).map_or(0, |j| rec.episodes[j].end - rec.episodes[j].start),
            lambda: e.lambda,
            radius: e.radius,
            estimate_error: e.estimate_error,
            j_tilde: e.j_tilde,
        })
        .collect();
    Ok(TrialResult {
        trial,
        status: rec.status,
        costs,
        regret,
        events,
        episodes,
    })
}

/// Result of the fixed-gain estimation experiment.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub n: u64,
    pub lambda: f64,
    pub eps: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_frequency: f64,
    pub distances: Vec<f64>,
    /// Fraction of (trial, row) pairs where every sample condition held, per convention.
    pub prop1_row_sum_frequency: f64,
    pub prop1_entrywise_frequency: f64,
}

/// Estimates `Θ⁰` from `n` closed-loop steps under the initial gain in each
/// trial and reports how often `d(Θ̂, Θ⁰) ≤ ε`.
pub fn estimation_experiment(resolved: &ResolvedExperiment, n: Option<u64>) -> Result<EstimationReport> {
    let alg = &resolved.config.algorithm;
    let cert = &resolved.certificate;
    let q = resolved.theta0.q();
    let n = match n.or(alg.estimation_n) {
        Some(n) => n,
        None => sample_complexity(resolved.k, resolved.ell, cert.alpha, cert.rho, cert.c_min, alg.eps, alg.delta, q)?,
    };
    let n_usize = usize::try_from(n).map_err(|_| Error::invalid("n too large"))?;
    let lambda = regularization_weight(resolved.ell, q, alg.delta, n_usize, cert.alpha, cert.rho)?;
    let seed = resolved.config.run.seed;
    let p = resolved.theta0.p();
    let gain = &resolved.initial_gain;
    let supports: Vec<Vec<usize>> = (0..p).map(|u| resolved.theta0.row_support(u)).collect();
    let outcomes: Vec<Result<(f64, usize, usize)>> = (0..resolved.config.run.trials)
        .into_par_iter()
        .map(|i| {
            let mut noise = GaussianNoise::with_stream(seed, 2 * i as u64);
            let mom = closed_loop_moments(&resolved.theta0, gain, n_usize, &mut noise, &vec![0.0; p])?;
            let gram = mom.gram(gain);
            let hat = estimate_from_gram(&gram, p, lambda, None, LassoOptions::default())?;
            let d = distance(&hat, &resolved.theta0)?;
            let (mut rs, mut ew) = (0, 0);
            for (u, s) in supports.iter().enumerate() {
                if s.is_empty() || s.len() > resolved.k {
                    continue;
                }
                let gh = mom.gradient_hessian(gain, u);
                let rep = crate::estimator::check_prop1_conditions(
                    &gh, &cert.h_mat, s, cert.alpha, cert.c_min, alg.eps, lambda, resolved.k,
                )?;
                rs += usize::from(rep.sample_conditions_hold(NormConvention::RowSum));
                ew += usize::from(rep.sample_conditions_hold(NormConvention::EntrywiseScaled));
            }
            Ok((d, rs, ew))
        })
        .collect();
    let mut distances = Vec::with_capacity(outcomes.len());
    let (mut rs, mut ew) = (0usize, 0usize);
    for o in outcomes {
        let (d, a, b) = o?;
        distances.push(d);
        rs += a;
        ew += b;
    }
    let trials = distances.len();
    let successes = distances.iter().filter(|d| **d <= alg.eps).count();
    let rows = (trials * supports.iter().filter(|s| !s.is_empty() && s.len() <= resolved.k).count()).max(1) as f64;
    Ok(EstimationReport {
        n,
        lambda,
        eps: alg.eps,
        trials,
        successes,
        success_frequency: successes as f64 / trials as f64,
        distances,
        prop1_row_sum_frequency: rs as f64 / rows,
        prop1_entrywise_frequency: ew as f64 / rows,
    })
}

/// Empirical tail frequencies of the gradient and Hessian deviations.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub eps: f64,
    pub episodes: usize,
    /// Fraction of episodes with `|Ĝ_S|∞ > ε`, per row with nonempty support.
    pub gradient_tail: Vec<f64>,
    pub gradient_bound: Vec<f64>,
    /// Fraction of episodes with `|Ĥ_ij − H_ij| > ε`, row-major over `q × q`.
    pub hessian_tail: Vec<f64>,
    pub hessian_bound: f64,
}

/// Runs `episodes` independent closed-loop episodes of length `n` under `gain`,
/// each started at `x = 0` on its own noise stream, and counts tail events
/// against the population `h_pop`.
pub fn concentration_experiment(
    theta0: &InteractionMatrix,
    gain: &FeedbackGain,
    h_pop: &DMatrix<f64>,
    rho: f64,
    n: usize,
    eps: f64,
    episodes: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    let p = theta0.p();
    let q = theta0.q();
    let ell = gain.ell();
    let supports: Vec<Vec<usize>> = (0..p).map(|u| theta0.row_support(u)).filter(|s| !s.is_empty()).collect();
    let rows: Vec<usize> = (0..p).filter(|&u| !theta0.row_support(u).is_empty()).collect();
    let counts: Vec<Result<(Vec<usize>, Vec<usize>)>> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut noise = GaussianNoise::with_stream(seed, e as u64);
            let mom = closed_loop_moments(theta0, gain, n, &mut noise, &vec![0.0; p])?;
            let mut g = vec![0usize; rows.len()];
            for (k, (&u, s)) in rows.iter().zip(&supports).enumerate() {
                let gh = mom.gradient_hessian(gain, u);
                let worst = s.iter().map(|&j| gh.g_hat[j].abs()).fold(0.0, f64::max);
                g[k] = usize::from(worst > eps);
            }
            let h_hat = mom.gram(gain).h;
            let h: Vec<usize> = (0..q * q)
                .map(|ij| usize::from((h_hat[(ij / q, ij % q)] - h_pop[(ij / q, ij % q)]).abs() > eps))
                .collect();
            Ok((g, h))
        })
        .collect();
    let mut g_tot = vec![0usize; rows.len()];
    let mut h_tot = vec![0usize; q * q];
    for c in counts {
        let (g, h) = c?;
        g_tot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        h_tot.iter_mut().zip(h).for_each(|(a, b)| *a += b);
    }
    let m = episodes as f64;
    Ok(ConcentrationReport {
        n,
        eps,
        episodes,
        gradient_tail: g_tot.iter().map(|&c| c as f64 / m).collect(),
        gradient_bound: supports
            .iter()
            .map(|s| crate::estimator::gradient_tail_bound(s.len(), n, rho, eps, ell))
            .collect::<Result<_>>()?,
        hessian_tail: h_tot.iter().map(|&c| c as f64 / m).collect(),
        hessian_bound: crate::estimator::hessian_tail_bound(n, rho, eps, ell)?,
    })
}

/// Neighborhood profile for the `profile` subcommand.
pub fn profile_experiment(resolved: &ResolvedExperiment) -> Result<AssumptionProfile> {
    let alg = &resolved.config.algorithm;
    let scope = resolved.certificate.scope.clone();
    let mut rng = aux_rng(resolved.config.run.seed, u64::MAX - 1);
    profile_assumption(&resolved.theta0, &resolved.cost, alg.eps, alg.profile_samples, &scope, &mut rng)
}

/// Output locations inside one directory.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub summary: PathBuf,
    pub regret_curves: PathBuf,
    pub estimation: PathBuf,
    pub plot_mean: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        OutputPaths {
            summary: dir.join("summary.json"),
            regret_curves: dir.join("regret_curves.csv"),
            estimation: dir.join("estimation.csv"),
            plot_mean: dir.join("plot_mean.csv"),
        }
    }
}

/// Header of `regret_curves.csv`.
pub const REGRET_HEADER: [&str; 4] = ["trial", "t", "cost", "regret"];
/// Header of `estimation.csv`.
pub const ESTIMATION_HEADER: [&str; 7] = ["trial", "episode", "n", "lambda", "radius", "distance", "within"];
/// Header of `plot_mean.csv`.
pub const PLOT_HEADER: [&str; 6] = ["t", "mean", "stderr", "q10", "q50", "q90"];

/// Fixed 17-significant-digit float formatting; exact on round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Writes the three CSV files of a regret sweep.
pub fn write_regret_tables(report: &RegretReport, paths: &OutputPaths) -> Result<()> {
    write_rows(
        &paths.regret_curves,
        &REGRET_HEADER,
        report.trials.iter().flat_map(|tr| {
            tr.costs.iter().zip(&tr.regret).enumerate().map(move |(t, (c, r))| {
                vec![tr.trial.to_string(), t.to_string(), fmt_f64(*c), fmt_f64(*r)]
            })
        }),
    )?;
    write_rows(
        &paths.estimation,
        &ESTIMATION_HEADER,
        report.trials.iter().flat_map(|tr| {
            tr.episodes.iter().filter(|e| e.estimate_error.is_some()).map(move |e| {
                let within = match (e.estimate_error, e.radius) {
                    (Some(d), Some(r)) => (d <= r + crate::ofu::MEMBERSHIP_SLACK).to_string(),
                    _ => String::new(),
                };
                vec![
                    tr.trial.to_string(),
                    e.episode.to_string(),
                    e.n.to_string(),
                    fmt_opt(e.lambda),
                    fmt_opt(e.radius),
                    fmt_opt(e.estimate_error),
                    within,
                ]
            })
        }),
    )?;
    let len = report.trials.iter().map(|t| t.regret.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    let mut col = Vec::with_capacity(report.trials.len());
    for t in 0..len {
        col.clear();
        col.extend(report.trials.iter().filter_map(|tr| tr.regret.get(t).copied()));
        let (mean, se) = mean_stderr(&col);
        col.sort_by(f64::total_cmp);
        rows.push(vec![
            t.to_string(),
            fmt_f64(mean),
            if se.is_nan() { String::new() } else { fmt_f64(se) },
            fmt_f64(quantile(&col, 0.1)),
            fmt_f64(quantile(&col, 0.5)),
            fmt_f64(quantile(&col, 0.9)),
        ]);
    }
    write_rows(&paths.plot_mean, &PLOT_HEADER, rows)
}

/// Writes the estimation experiment's CSV files; `plot_mean.csv` is header-only.
pub fn write_estimation_tables(report: &EstimationReport, paths: &OutputPaths) -> Result<()> {
    write_rows(&paths.regret_curves, &REGRET_HEADER, std::iter::empty())?;
    write_rows(
        &paths.estimation,
        &ESTIMATION_HEADER,
        report.distances.iter().enumerate().map(|(i, d)| {
            vec![
                i.to_string(),
                "0".to_string(),
                report.n.to_string(),
                fmt_f64(report.lambda),
                fmt_f64(report.eps),
                fmt_f64(*d),
                (*d <= report.eps).to_string(),
            ]
        }),
    )?;
    write_rows(&paths.plot_mean, &PLOT_HEADER, std::iter::empty())
}

/// Parsed `regret_curves.csv`: per trial, `(costs, regret)`.
pub fn read_regret_curves(path: &Path) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("{}: malformed row", path.display())))
        };
        let trial: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}: malformed trial", path.display())))?;
        if out.last().is_none_or(|(t, _, _)| *t != trial) {
            out.push((trial, Vec::new(), Vec::new()));
        }
        let last = out.last_mut().expect("pushed above");
        last.1.push(parse(2)?);
        last.2.push(parse(3)?);
    }
    Ok(out)
}

/// Writes `summary.json` with a single `generated_at` timestamp field.
pub fn write_summary(path: &Path, body: serde_json::Value) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert(
        "generated_at".into(),
        serde_json::Value::String(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
    );
    if let serde_json::Value::Object(map) = body {
        doc.extend(map);
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Common summary fields of a resolved experiment.
pub fn resolved_summary(resolved: &ResolvedExperiment) -> serde_json::Value {
    let (a, b) = resolved.theta0.to_rows();
    serde_json::json!({
        "master_seed": resolved.config.run.seed,
        "config": json(&resolved.config),
        "theta0": { "a": a, "b": b },
        "initial_gain": resolved.initial_gain.to_rows(),
        "certificate": json(&resolved.certificate),
        "ell": resolved.ell,
        "k": resolved.k,
        "n0": resolved.n0,
        "n1": resolved.n1,
        "j_star": resolved.j_star,
        "warnings": resolved.warnings,
    })
}

/// Summary body of a regret sweep.
pub fn regret_summary(resolved: &ResolvedExperiment, report: &RegretReport) -> serde_json::Value {
    let mut horizons = resolved.config.run.horizons.clone();
    if horizons.is_empty() {
        horizons.push(resolved.config.run.horizon);
    }
    let stats: Vec<HorizonStat> = horizons.iter().filter_map(|&h| report.horizon_stat(h)).collect();
    let diverged = report
        .trials
        .iter()
        .filter(|t| matches!(t.status, RunStatus::Diverged { .. }))
        .count();
    let mut v = resolved_summary(resolved);
    let extra = serde_json::json!({
        "mode": json(&resolved.config.run.mode),
        "schedule": json(&report.schedule),
        "trials_completed": report.trials.len(),
        "trials_diverged": diverged,
        "trial_failures": report.failures.len(),
        "failures": json(&report.failures),
        "e1_frequency": report.e1_frequency(),
        "e2_frequency": report.e2_frequency(),
        "state_bound_frequency": report.state_bound_frequency(),
        "horizon_stats": json(&stats),
        "fitted_exponent": report.fitted_exponent(&horizons),
    });
    merge(&mut v, extra);
    v
}

pub(crate) fn merge(v: &mut serde_json::Value, extra: serde_json::Value) {
    if let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (v, extra) {
        a.extend(b);
    }
}

/// Summary body of an estimation experiment.
pub fn estimation_summary(resolved: &ResolvedExperiment, report: &EstimationReport) -> serde_json::Value {
    let mut v = resolved_summary(resolved);
    let mut sorted = report.distances.clone();
    sorted.sort_by(f64::total_cmp);
    merge(
        &mut v,
        serde_json::json!({
            "estimation": {
                "n": report.n,
                "lambda": report.lambda,
                "eps": report.eps,
                "trials": report.trials,
                "successes": report.successes,
                "success_frequency": report.success_frequency,
                "distance_median": if sorted.is_empty() { f64::NAN } else { quantile(&sorted, 0.5) },
                "distance_max": sorted.last().copied().unwrap_or(f64::NAN),
                "prop1_row_sum_frequency": report.prop1_row_sum_frequency,
                "prop1_entrywise_frequency": report.prop1_entrywise_frequency,
            }
        }),
    );
    v
}

/// Runs a sweep and writes every output file into `dir`.
pub fn run_and_emit(resolved: &ResolvedExperiment, dir: &Path) -> Result<RegretReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = run_experiment(resolved)?;
    let paths = OutputPaths::in_dir(dir);
    write_regret_tables(&report, &paths)?;
    write_summary(&paths.summary, regret_summary(resolved, &report))?;
    Ok(report)
}
