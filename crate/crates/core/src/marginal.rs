//! Gaussian-outcome marginal likelihoods under the pMOM coefficient prior,
//! and exhaustive enumeration of the model posterior for small problems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::data::{Dataset, ModelIndicator, PhiMode, PriorSpec, ThetaVector, INTERCEPT_PRIOR_SCALE};
use crate::error::{CilError, Result};
use crate::prior::{FeatureMatrix, PriorTable};

/// Relative diagonal tolerance of the rank check.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Default cap on `T + J` for exhaustive enumeration.
pub const ENUMERATION_LIMIT: usize = 20;

/// Identifies a regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coefficient {
    Intercept,
    Treatment(usize),
    Control(usize),
}

/// Posterior of the residual variance within one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiPosterior {
    InverseGamma { shape: f64, rate: f64 },
    Known(f64),
}

impl PhiPosterior {
    /// `E[1/phi | y]`.
    pub fn mean_precision(&self) -> f64 {
        match *self {
            PhiPosterior::InverseGamma { shape, rate } => shape / rate,
            PhiPosterior::Known(phi) => 1.0 / phi,
        }
    }
}

/// Marginal likelihood of one model together with its conditional
/// posterior: coefficients are `N(posterior_mean, phi * posterior_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalResult {
    pub log_ml: f64,
    pub gaussian_log_ml: f64,
    pub correction_log: f64,
    pub coefficients: Vec<Coefficient>,
    pub posterior_mean: DVector<f64>,
    pub posterior_scale: DMatrix<f64>,
    pub phi_posterior: PhiPosterior,
    /// Set when `n <= p + 1`; the posterior is then proper only through
    /// the prior.
    pub weakly_identified: bool,
}

impl MarginalResult {
    pub fn position(&self, coef: Coefficient) -> Option<usize> {
        self.coefficients.iter().position(|c| *c == coef)
    }
}

/// Sufficient statistics of `W = [1, D, X]` and `y`, from which every
/// model's marginal likelihood follows in `O(p^3)`.
#[derive(Debug, Clone)]
pub struct MarginalEvaluator {
    gram: DMatrix<f64>,
    wty: DVector<f64>,
    yty: f64,
    n: usize,
    t: usize,
    j: usize,
    spec: PriorSpec,
}

impl MarginalEvaluator {
    pub fn new(data: &Dataset, spec: &PriorSpec) -> Result<Self> {
        spec.validate(data.j())?;
        let (n, t, j) = (data.n(), data.t(), data.j());
        let mut w = DMatrix::zeros(n, 1 + t + j);
        w.column_mut(0).fill(1.0);
        w.columns_mut(1, t).copy_from(data.d());
        w.columns_mut(1 + t, j).copy_from(data.x());
        let gram = w.tr_mul(&w);
        let wty = w.tr_mul(data.y());
        Ok(Self { gram, wty, yty: data.y().norm_squared(), n, t, j, spec: spec.clone() })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn j(&self) -> usize {
        self.j
    }
    pub fn n(&self) -> usize {
        self.n
    }

    fn columns(&self, model: &ModelIndicator) -> (Vec<usize>, Vec<Coefficient>) {
        let mut idx = Vec::with_capacity(model.size() + 1);
        let mut labels = Vec::with_capacity(model.size() + 1);
        if self.spec.include_intercept {
            idx.push(0);
            labels.push(Coefficient::Intercept);
        }
        for t in model.included_treatments() {
            idx.push(1 + t);
            labels.push(Coefficient::Treatment(t));
        }
        for j in model.included_controls() {
            idx.push(1 + self.t + j);
            labels.push(Coefficient::Control(j));
        }
        (idx, labels)
    }

    pub fn evaluate(&self, model: &ModelIndicator) -> Result<MarginalResult> {
        if model.t() != self.t || model.j() != self.j {
            return Err(CilError::DimensionMismatch(format!(
                "model has T={}, J={}; data has T={}, J={}",
                model.t(),
                model.j(),
                self.t,
                self.j
            )));
        }
        let (idx, labels) = self.columns(model);
        let p = idx.len();
        let gram_sub = self.gram.select_rows(&idx).select_columns(&idx);
        let rank = pivoted_cholesky_rank(&gram_sub, RANK_TOLERANCE);
        if rank < p {
            return Err(CilError::RankDeficient(format!(
                "model {model:?} has {p} columns but rank {rank}"
            )));
        }
        let tau = self.spec.tau;
        let prior_var: Vec<f64> = labels
            .iter()
            .map(|c| if *c == Coefficient::Intercept { INTERCEPT_PRIOR_SCALE * tau } else { tau })
            .collect();
        let mut a = gram_sub;
        for (k, v) in prior_var.iter().enumerate() {
            a[(k, k)] += 1.0 / v;
        }
        let b = DVector::from_iterator(p, idx.iter().map(|&i| self.wty[i]));
        let chol = a
            .cholesky()
            .ok_or_else(|| CilError::Numerical("posterior precision is not positive definite".into()))?;
        let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mean = chol.solve(&b);
        let scale = chol.inverse();
        let half_logdet_prior_prec = -0.5 * prior_var.iter().map(|v| v.ln()).sum::<f64>();
        let quad = (self.yty - mean.dot(&b)).max(0.0);
        let nf = self.n as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();

        let (gaussian_log_ml, phi_posterior) = match self.spec.phi {
            PhiMode::InverseGamma => {
                let (a0, b0) = (self.spec.a_phi, self.spec.b_phi);
                let shape = a0 + nf / 2.0;
                let rate = b0 + quad / 2.0;
                let lml = -0.5 * nf * ln2pi + half_logdet_prior_prec - 0.5 * logdet_a + a0 * b0.ln()
                    - shape * rate.ln()
                    + ln_gamma(shape)
                    - ln_gamma(a0);
                (lml, PhiPosterior::InverseGamma { shape, rate })
            }
            PhiMode::Known(phi) => {
                let lml = -0.5 * nf * (ln2pi + phi.ln()) + half_logdet_prior_prec - 0.5 * logdet_a
                    - quad / (2.0 * phi);
                (lml, PhiPosterior::Known(phi))
            }
        };
        let precision = phi_posterior.mean_precision();
        let correction_log: f64 = labels
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != Coefficient::Intercept)
            .map(|(k, _)| ((mean[k] * mean[k] * precision + scale[(k, k)]) / tau).ln())
            .sum();
        Ok(MarginalResult {
            log_ml: gaussian_log_ml + correction_log,
            gaussian_log_ml,
            correction_log,
            coefficients: labels,
            posterior_mean: mean,
            posterior_scale: scale,
            phi_posterior,
            weakly_identified: self.n <= p + 1,
        })
    }

    /// Log marginal likelihood, `-inf` for rank-deficient models.
    pub fn log_ml(&self, model: &ModelIndicator) -> f64 {
        match self.evaluate(model) {
            Ok(r) => r.log_ml,
            Err(e) => {
                log::debug!("model {model:?} excluded: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}

/// Numerical rank of a symmetric positive semidefinite matrix by
/// diagonally pivoted Cholesky: elimination stops once the largest
/// remaining pivot falls below `rel_tol` times the largest diagonal entry.
pub fn pivoted_cholesky_rank(matrix: &DMatrix<f64>, rel_tol: f64) -> usize {
    let p = matrix.nrows();
    if p == 0 {
        return 0;
    }
    let mut m = matrix.clone();
    let scale = m.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let threshold = rel_tol * scale;
    let mut order: Vec<usize> = (0..p).collect();
    for k in 0..p {
        let (piv_pos, piv_val) = (k..p)
            .map(|i| (i, m[(order[i], order[i])]))
            .fold((k, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val <= threshold {
            return k;
        }
        order.swap(k, piv_pos);
        let pk = order[k];
        let root = piv_val.sqrt();
        for i in k..p {
            let oi = order[i];
            m[(oi, pk)] /= root;
        }
        for i in k + 1..p {
            let oi = order[i];
            let lik = m[(oi, pk)];
            for jj in k + 1..=i {
                let oj = order[jj];
                let v = m[(oi, oj)] - lik * m[(oj, pk)];
                m[(oi, oj)] = v;
                m[(oj, oi)] = v;
            }
        }
    }
    p
}

/// [`MarginalEvaluator::evaluate`] for a single model.
pub fn gaussian_marginal_loglik(data: &Dataset, model: &ModelIndicator, spec: &PriorSpec) -> Result<MarginalResult> {
    MarginalEvaluator::new(data, spec)?.evaluate(model)
}

/// Log marginal likelihoods of every model, in index order
/// (`ModelIndicator::from_index`).
#[derive(Debug, Clone)]
pub struct ModelEnumeration {
    pub models: Vec<ModelIndicator>,
    pub log_ml: Vec<f64>,
}

impl ModelEnumeration {
    pub fn new(evaluator: &MarginalEvaluator, limit: usize) -> Result<Self> {
        let (t, j) = (evaluator.t(), evaluator.j());
        if t + j > limit || t + j >= 63 {
            return Err(CilError::TooManyModels { size: t + j, limit });
        }
        let count = 1u64 << (t + j);
        let models: Vec<ModelIndicator> = (0..count).map(|i| ModelIndicator::from_index(t, j, i)).collect();
        let log_ml = models.par_iter().map(|m| evaluator.log_ml(m)).collect();
        Ok(Self { models, log_ml })
    }

    /// Normalized posterior under the prior in `table`.
    pub fn posterior(&self, table: &PriorTable) -> Result<ExactPosterior> {
        let mut log_prior = Vec::with_capacity(self.models.len());
        for m in &self.models {
            log_prior.push(table.log_prior(m)?);
        }
        let log_joint: Vec<f64> = self.log_ml.iter().zip(&log_prior).map(|(a, b)| a + b).collect();
        let log_evidence = log_sum_exp(&log_joint);
        if !log_evidence.is_finite() {
            return Err(CilError::EmptyModelSet);
        }
        let probabilities = log_joint.iter().map(|v| (v - log_evidence).exp()).collect();
        Ok(ExactPosterior {
            models: self.models.clone(),
            log_ml: self.log_ml.clone(),
            log_prior,
            probabilities,
            log_evidence,
        })
    }
}

/// Exact model posterior over all `2^(T+J)` models.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub models: Vec<ModelIndicator>,
    pub log_ml: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// `log p(y | theta)`.
    pub log_evidence: f64,
}

impl ExactPosterior {
    /// Posterior inclusion probabilities `(s, q)` of treatments and controls.
    pub fn inclusion_probabilities(&self) -> (Vec<f64>, Vec<f64>) {
        let (t, j) = self.models.first().map_or((0, 0), |m| (m.t(), m.j()));
        let mut s = vec![0.0; t];
        let mut q = vec![0.0; j];
        for (m, p) in self.models.iter().zip(&self.probabilities) {
            for k in m.included_treatments() {
                s[k] += p;
            }
            for k in m.included_controls() {
                q[k] += p;
            }
        }
        (s, q)
    }

    pub fn probability(&self, model: &ModelIndicator) -> Option<f64> {
        self.models.iter().position(|m| m == model).map(|i| self.probabilities[i])
    }
}

/// Exact posterior `p(model | y, theta)` by exhaustive enumeration.
pub fn enumerate_posterior(
    data: &Dataset,
    theta: &ThetaVector,
    features: &FeatureMatrix,
    spec: &PriorSpec,
    limit: usize,
) -> Result<ExactPosterior> {
    let evaluator = MarginalEvaluator::new(data, spec)?;
    let table = PriorTable::new(theta, features, spec)?;
    ModelEnumeration::new(&evaluator, limit)?.posterior(&table)
}

/// `log sum exp(values)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
