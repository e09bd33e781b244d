//! Learning the prior hyperparameters theta: the expectation-propagation
//! surrogate, empirical Bayes over a sampled model set, and the two-stage
//! procedure that chains them.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, ModelPrior, PriorSpec, ThetaVector};
use crate::error::{CilError, Result};
use crate::marginal::log_sum_exp;
use crate::optim::{bfgs_maximize, BfgsConfig, BfgsResult};
use crate::prior::{bounded_probability, bounded_probability_slope, FeatureDesign, FeatureMatrix};
use crate::rng;
use crate::search::{inclusion_probabilities, GibbsSampler, PosteriorSampleSet, SamplerConfig};

/// Clamp applied to control inclusion probabilities in the EP objective.
pub const Q_CLAMP: f64 = 1e-12;

/// EP surrogate `sum_j log(q_j pi_j + (1 - q_j)(1 - pi_j))` as a function of
/// the theta parameters.
#[derive(Debug, Clone)]
pub struct EpProblem {
    design: FeatureDesign,
    q: Vec<f64>,
    rho: f64,
}

impl EpProblem {
    pub fn new(q: &[f64], features: &FeatureMatrix, rho: f64, group_map: &[usize]) -> Result<Self> {
        if q.len() != features.j() {
            return Err(CilError::DimensionMismatch(format!(
                "{} inclusion probabilities for {} controls",
                q.len(),
                features.j()
            )));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CilError::InvalidParameter("inclusion probabilities must lie in [0, 1]".into()));
        }
        if !(rho > 0.0 && rho < 0.5) {
            return Err(CilError::InvalidParameter(format!("rho must lie in (0, 1/2), got {rho}")));
        }
        Ok(Self {
            design: FeatureDesign::new(features, group_map)?,
            q: q.iter().map(|v| v.clamp(Q_CLAMP, 1.0 - Q_CLAMP)).collect(),
            rho,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        self.design
            .linear_predictors(params)
            .iter()
            .zip(&self.q)
            .map(|(&eta, &q)| {
                let p = bounded_probability(eta, self.rho);
                (q * p + (1.0 - q) * (1.0 - p)).ln()
            })
            .sum()
    }

    pub fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim()];
        for (j, (&eta, &q)) in self.design.linear_predictors(params).iter().zip(&self.q).enumerate() {
            let p = bounded_probability(eta, self.rho);
            let h = q * p + (1.0 - q) * (1.0 - p);
            value += h.ln();
            let w = (2.0 * q - 1.0) * bounded_probability_slope(eta, self.rho) / h;
            for (g, f) in grad.iter_mut().zip(self.design.row(j)) {
                *g += w * f;
            }
        }
        (value, grad)
    }
}

fn check_theta(theta: &ThetaVector, features: &FeatureMatrix) -> Result<()> {
    if theta.n_treatments() != features.t() {
        return Err(CilError::DimensionMismatch(format!(
            "theta covers {} treatments, features {}",
            theta.n_treatments(),
            features.t()
        )));
    }
    Ok(())
}

/// EP objective at `theta`. `q` is clamped to `[1e-12, 1 - 1e-12]`.
pub fn ep_objective(theta: &ThetaVector, q: &[f64], features: &FeatureMatrix, rho: f64) -> Result<f64> {
    check_theta(theta, features)?;
    Ok(EpProblem::new(q, features, rho, theta.group_map())?.value(&theta.params()))
}

/// Gradient of [`ep_objective`] with respect to `[theta0, theta_1..theta_G]`.
pub fn ep_gradient(theta: &ThetaVector, q: &[f64], features: &FeatureMatrix, rho: f64) -> Result<Vec<f64>> {
    check_theta(theta, features)?;
    Ok(EpProblem::new(q, features, rho, theta.group_map())?.value_and_gradient(&theta.params()).1)
}

/// Integer grid searched before quasi-Newton refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// Largest absolute coordinate.
    pub bound: i64,
    /// The stride doubles until the grid has at most this many points.
    pub max_evaluations: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { bound: 10, max_evaluations: 100_000 }
    }
}

impl GridConfig {
    /// Per-coordinate grid values, symmetric around 0, and the stride used.
    pub fn axis(&self, dim: usize) -> (Vec<f64>, i64) {
        let mut stride = 1i64;
        loop {
            let half = self.bound / stride;
            let len = (2 * half + 1) as f64;
            if len.powi(dim as i32) <= self.max_evaluations as f64 || half == 0 {
                let axis = (-half..=half).map(|k| (k * stride) as f64).collect();
                return (axis, stride);
            }
            stride *= 2;
        }
    }
}

/// Grid optimum: among points within `1e-12` relative of the best value
/// the one with smallest Euclidean norm wins, then the earliest.
fn grid_search(problem: &EpProblem, grid: &GridConfig) -> (Vec<f64>, f64, usize) {
    let dim = problem.dim();
    let (axis, _) = grid.axis(dim);
    let len = axis.len();
    let total = len.pow(dim as u32);
    let point = |mut idx: usize| -> Vec<f64> {
        let mut p = vec![0.0; dim];
        for k in (0..dim).rev() {
            p[k] = axis[idx % len];
            idx /= len;
        }
        p
    };
    let values: Vec<f64> = (0..total).into_par_iter().map(|i| problem.value(&point(i))).collect();
    let best_value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best_value.abs().max(1e-300);
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if *v >= best_value - tol {
            let norm: f64 = point(i).iter().map(|c| c * c).sum();
            if best.is_none_or(|(_, n)| norm < n) {
                best = Some((i, norm));
            }
        }
    }
    let idx = best.map_or(0, |(i, _)| i);
    (point(idx), values[idx], total)
}

/// Outcome of the EP fit.
#[derive(Debug, Clone)]
pub struct EpFit {
    pub theta: ThetaVector,
    pub value: f64,
    pub grid_optimum: Vec<f64>,
    pub grid_value: f64,
    pub grid_evaluations: usize,
    pub bfgs: Option<BfgsResult>,
}

/// Grid search followed by BFGS from the grid optimum. A failed
/// refinement falls back to the grid optimum.
pub fn fit_theta_ep(
    q: &[f64],
    features: &FeatureMatrix,
    rho: f64,
    group_map: &[usize],
    grid: &GridConfig,
    bfgs: &BfgsConfig,
) -> Result<EpFit> {
    let problem = EpProblem::new(q, features, rho, group_map)?;
    let (grid_optimum, grid_value, grid_evaluations) = grid_search(&problem, grid);
    let refined = bfgs_maximize(|x| Ok(problem.value_and_gradient(x)), &grid_optimum, bfgs);
    let (params, value, bfgs) = match refined {
        Ok(r) if r.value >= grid_value => (r.x.clone(), r.value, Some(r)),
        Ok(r) => (grid_optimum.clone(), grid_value, Some(r)),
        Err(e) => {
            log::warn!("EP refinement failed, keeping grid optimum: {e}");
            (grid_optimum.clone(), grid_value, None)
        }
    };
    let theta = ThetaVector::new(params[0], params[1..].to_vec(), group_map.to_vec())?;
    Ok(EpFit { theta, value, grid_optimum, grid_value, grid_evaluations, bfgs })
}

/// Restricted empirical-Bayes objective
/// `log sum_{models in M} exp(log_ml + log p(model | theta))`.
#[derive(Debug, Clone)]
pub struct EbProblem {
    design: FeatureDesign,
    rho: f64,
    /// Control inclusion indicators per model with finite log_ml.
    gammas: Vec<Vec<bool>>,
    /// `log_ml` plus the theta-free treatment prior.
    base: Vec<f64>,
}

impl EbProblem {
    pub fn new(samples: &PosteriorSampleSet, features: &FeatureMatrix, spec: &PriorSpec, group_map: &[usize]) -> Result<Self> {
        if spec.model_prior != ModelPrior::Cil {
            return Err(CilError::InvalidParameter("empirical Bayes requires the learned-probability prior".into()));
        }
        if samples.j() != features.j() && !samples.is_empty() {
            return Err(CilError::DimensionMismatch(format!(
                "sample set has {} controls, features {}",
                samples.j(),
                features.j()
            )));
        }
        let (ln_in, ln_out) = (spec.treat_incl.ln(), (1.0 - spec.treat_incl).ln());
        let mut gammas = Vec::new();
        let mut base = Vec::new();
        for (m, r) in &samples.models {
            if !r.log_ml.is_finite() {
                continue;
            }
            let treat: f64 = (0..m.t()).map(|t| if m.delta(t) { ln_in } else { ln_out }).sum();
            base.push(r.log_ml + treat);
            gammas.push((0..m.j()).map(|j| m.gamma(j)).collect());
        }
        if gammas.is_empty() {
            return Err(CilError::EmptyModelSet);
        }
        Ok(Self {
            design: FeatureDesign::new(features, group_map)?,
            rho: spec.rho_for(features.j()),
            gammas,
            base,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }
    pub fn n_models(&self) -> usize {
        self.gammas.len()
    }

    fn log_joint(&self, params: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let eta = self.design.linear_predictors(params);
        let pi: Vec<f64> = eta.iter().map(|&e| bounded_probability(e, self.rho)).collect();
        let (ln_in, ln_out): (Vec<f64>, Vec<f64>) = pi.iter().map(|p| (p.ln(), (1.0 - p).ln())).unzip();
        let joint = self
            .gammas
            .iter()
            .zip(&self.base)
            .map(|(g, b)| b + g.iter().enumerate().map(|(j, &inc)| if inc { ln_in[j] } else { ln_out[j] }).sum::<f64>())
            .collect();
        (joint, eta, pi)
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(params).0)
    }

    /// Value, gradient, and the restricted-posterior inclusion
    /// probabilities of the controls.
    pub fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (joint, eta, pi) = self.log_joint(params);
        let norm = log_sum_exp(&joint);
        let mut incl = vec![0.0; pi.len()];
        for (g, lj) in self.gammas.iter().zip(&joint) {
            let w = (lj - norm).exp();
            for (acc, &inc) in incl.iter_mut().zip(g) {
                if inc {
                    *acc += w;
                }
            }
        }
        let mut grad = vec![0.0; self.dim()];
        for j in 0..pi.len() {
            let weight =
                bounded_probability_slope(eta[j], self.rho) * (incl[j] - pi[j]) / (pi[j] * (1.0 - pi[j]));
            for (gk, f) in grad.iter_mut().zip(self.design.row(j)) {
                *gk += weight * f;
            }
        }
        (norm, grad, incl)
    }
}

/// Restricted empirical-Bayes objective at `theta`.
pub fn eb_objective(theta: &ThetaVector, samples: &PosteriorSampleSet, features: &FeatureMatrix, spec: &PriorSpec) -> Result<f64> {
    check_theta(theta, features)?;
    Ok(EbProblem::new(samples, features, spec, theta.group_map())?.value(&theta.params()))
}

/// Gradient of [`eb_objective`]:
/// `sum_j f_j (d pi_j / d eta_j) (P_j - pi_j) / (pi_j (1 - pi_j))`, with
/// `P_j` the restricted-posterior inclusion probability.
pub fn eb_gradient(theta: &ThetaVector, samples: &PosteriorSampleSet, features: &FeatureMatrix, spec: &PriorSpec) -> Result<Vec<f64>> {
    check_theta(theta, features)?;
    Ok(EbProblem::new(samples, features, spec, theta.group_map())?.evaluate(&theta.params()).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnMode {
    EpOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub mode: LearnMode,
    pub sampler: SamplerConfig,
    pub grid: GridConfig,
    pub bfgs: BfgsConfig,
    /// Treatment-to-group map; `None` gives each treatment its own theta.
    pub group_map: Option<Vec<usize>>,
    /// Resample at the EB optimum and refit once on the enlarged set.
    pub refresh: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            mode: LearnMode::Full,
            sampler: SamplerConfig::default(),
            grid: GridConfig::default(),
            bfgs: BfgsConfig::default(),
            group_map: None,
            refresh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub ep_grad_norm: f64,
    pub ep_converged: bool,
    pub eb_grad_norm: Option<f64>,
    pub eb_converged: Option<bool>,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ThetaFitResult {
    pub theta_ep: ThetaVector,
    pub theta_eb: Option<ThetaVector>,
    pub ep_value: f64,
    pub eb_value: Option<f64>,
    pub ep_trace: Vec<(usize, f64)>,
    pub eb_trace: Vec<(usize, f64)>,
    pub grid_optimum: Vec<f64>,
    pub grid_value: f64,
    pub grid_evaluations: usize,
    /// Inclusion probabilities `(s, q)` from the sampler at theta = 0.
    pub initial_inclusion: (Vec<f64>, Vec<f64>),
    /// Models sampled at theta = 0.
    pub initial_samples: PosteriorSampleSet,
    /// Models sampled at the EP estimate.
    pub ep_samples: Option<PosteriorSampleSet>,
    /// Union of all sampled models used by the EB stage.
    pub model_set: Option<PosteriorSampleSet>,
    pub model_set_size: usize,
    pub diagnostics: FitDiagnostics,
}

impl ThetaFitResult {
    /// The EB estimate when available, otherwise the EP estimate.
    pub fn theta(&self) -> &ThetaVector {
        self.theta_eb.as_ref().unwrap_or(&self.theta_ep)
    }

    /// Plain-text report with the optimization traces as CSV blocks.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let fmt_theta = |t: &ThetaVector| {
            std::iter::once(t.theta0())
                .chain(t.theta().iter().copied())
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(out, "[theta]");
        let _ = writeln!(out, "theta_ep = {}", fmt_theta(&self.theta_ep));
        if let Some(t) = &self.theta_eb {
            let _ = writeln!(out, "theta_eb = {}", fmt_theta(t));
        }
        let _ = writeln!(out, "groups = {}", self.theta_ep.group_map().iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(out, "\n[diagnostics]");
        let _ = writeln!(out, "ep_value = {}", self.ep_value);
        let _ = writeln!(out, "ep_grad_norm = {}", self.diagnostics.ep_grad_norm);
        let _ = writeln!(out, "ep_converged = {}", self.diagnostics.ep_converged);
        if let Some(v) = self.eb_value {
            let _ = writeln!(out, "eb_value = {v}");
        }
        if let Some(v) = self.diagnostics.eb_grad_norm {
            let _ = writeln!(out, "eb_grad_norm = {v}");
        }
        if let Some(v) = self.diagnostics.eb_converged {
            let _ = writeln!(out, "eb_converged = {v}");
        }
        let _ = writeln!(out, "grid_evaluations = {}", self.grid_evaluations);
        let _ = writeln!(out, "grid_value = {}", self.grid_value);
        let _ = writeln!(out, "model_set_size = {}", self.model_set_size);
        for m in &self.diagnostics.messages {
            let _ = writeln!(out, "note = {m}");
        }
        for (name, trace) in [("ep_trace", &self.ep_trace), ("eb_trace", &self.eb_trace)] {
            if trace.is_empty() {
                continue;
            }
            let _ = writeln!(out, "\n[{name}]\niteration,objective");
            for (i, v) in trace {
                let _ = writeln!(out, "{i},{v}");
            }
        }
        out
    }
}

fn eb_fit(
    samples: &PosteriorSampleSet,
    features: &FeatureMatrix,
    spec: &PriorSpec,
    group_map: &[usize],
    start: &ThetaVector,
    bfgs: &BfgsConfig,
) -> Result<(ThetaVector, BfgsResult)> {
    let problem = EbProblem::new(samples, features, spec, group_map)?;
    let res = bfgs_maximize(
        |x| {
            let (v, g, _) = problem.evaluate(x);
            Ok((v, g))
        },
        &start.params(),
        bfgs,
    )?;
    Ok((start.with_params(&res.x)?, res))
}

/// Two-stage learning of theta: sample at theta = 0, fit the EP surrogate,
/// sample again at the EP estimate, then maximize the EB objective over the
/// union of sampled models starting from the EP estimate.
pub fn fit_theta(data: &Dataset, spec: &PriorSpec, features: &FeatureMatrix, config: &LearnConfig) -> Result<ThetaFitResult> {
    let mut sampler = GibbsSampler::new(data, spec)?;
    fit_theta_with_sampler(&mut sampler, data, spec, features, config)
}

/// [`fit_theta`] reusing `sampler` and its marginal-likelihood cache.
pub fn fit_theta_with_sampler(
    sampler: &mut GibbsSampler,
    data: &Dataset,
    spec: &PriorSpec,
    features: &FeatureMatrix,
    config: &LearnConfig,
) -> Result<ThetaFitResult> {
    if sampler.evaluator().spec() != spec {
        return Err(CilError::InvalidParameter("sampler was built for a different prior specification".into()));
    }
    if spec.model_prior != ModelPrior::Cil {
        return Err(CilError::InvalidParameter("learning theta requires the learned-probability prior".into()));
    }
    if features.j() != data.j() || features.t() != data.t() {
        return Err(CilError::DimensionMismatch(format!(
            "features are {}x{}, data has J={}, T={}",
            features.j(),
            features.t(),
            data.j(),
            data.t()
        )));
    }
    let group_map = config.group_map.clone().unwrap_or_else(|| (0..data.t()).collect());
    let zero = ThetaVector::zeros_grouped(group_map.clone())?;
    let rho = spec.rho_for(data.j());
    let stage_config = |stage: u64| SamplerConfig {
        seed: rng::derive_seed(config.sampler.seed, "learn-stage", stage),
        ..config.sampler.clone()
    };
    let mut messages = Vec::new();

    let initial_samples = sampler.run(&zero, features, &stage_config(0))?;
    let initial_inclusion = inclusion_probabilities(&initial_samples)?;
    let ep = fit_theta_ep(&initial_inclusion.1, features, rho, &group_map, &config.grid, &config.bfgs)?;
    let (ep_trace, ep_grad_norm, ep_converged) = match &ep.bfgs {
        Some(b) => {
            if b.line_search_failed {
                messages.push("EP line search failed".into());
            }
            (b.trace.clone(), b.grad_norm(), b.converged)
        }
        None => {
            messages.push("EP refinement failed; grid optimum returned".into());
            (vec![(0, ep.grid_value)], f64::NAN, false)
        }
    };
    let mut result = ThetaFitResult {
        theta_ep: ep.theta.clone(),
        theta_eb: None,
        ep_value: ep.value,
        eb_value: None,
        ep_trace,
        eb_trace: Vec::new(),
        grid_optimum: ep.grid_optimum.clone(),
        grid_value: ep.grid_value,
        grid_evaluations: ep.grid_evaluations,
        initial_inclusion,
        initial_samples: initial_samples.clone(),
        ep_samples: None,
        model_set: None,
        model_set_size: initial_samples.len(),
        diagnostics: FitDiagnostics { ep_grad_norm, ep_converged, eb_grad_norm: None, eb_converged: None, messages },
    };
    if config.mode == LearnMode::EpOnly {
        return Ok(result);
    }

    let ep_samples = sampler.run(&ep.theta, features, &stage_config(1))?;
    let mut union = initial_samples.merge(&ep_samples)?;
    result.ep_samples = Some(ep_samples);
    let (mut theta_eb, mut bfgs) = eb_fit(&union, features, spec, &group_map, &ep.theta, &config.bfgs)?;
    if config.refresh {
        let more = sampler.run(&theta_eb, features, &stage_config(2))?;
        union = union.merge(&more)?;
        let refit = eb_fit(&union, features, spec, &group_map, &theta_eb, &config.bfgs)?;
        theta_eb = refit.0;
        bfgs = refit.1;
    }
    if bfgs.line_search_failed {
        result.diagnostics.messages.push("EB line search failed".into());
    }
    result.diagnostics.eb_grad_norm = Some(bfgs.grad_norm());
    result.diagnostics.eb_converged = Some(bfgs.converged);
    result.eb_value = Some(bfgs.value);
    result.eb_trace = bfgs.trace;
    result.theta_eb = Some(theta_eb);
    result.model_set_size = union.len();
    result.model_set = Some(union);
    Ok(result)
}

/// Controls whose prior inclusion probability under `theta` exceeds 1/2.
pub fn favored_controls(theta: &ThetaVector, features: &FeatureMatrix, rho: f64) -> Result<Vec<usize>> {
    let design = FeatureDesign::new(features, theta.group_map())?;
    Ok(design
        .linear_predictors(&theta.params())
        .iter()
        .enumerate()
        .filter(|(_, &e)| bounded_probability(e, rho) > 0.5)
        .map(|(j, _)| j)
        .collect())
}
