//! Model priors: the CIL inclusion probabilities, the log prior mass of a
//! model under each prior family, and the pMOM coefficient density.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use statrs::function::beta::ln_beta;

use crate::data::{ModelIndicator, ModelPrior, PriorSpec, ThetaVector};
use crate::error::{CilError, Result};
use crate::features::Family;

/// How a [`FeatureMatrix`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMethod {
    LassoBic,
    MinNormRidge,
}

/// Treatment-control association features `f[j, t] >= 0`, one row per
/// control and one column per treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    method: FeatureMethod,
    families: Vec<Family>,
    /// Selected penalty per treatment (LASSO only).
    lambdas: Vec<Option<f64>>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, method: FeatureMethod, families: Vec<Family>) -> Result<Self> {
        let lambdas = vec![None; values.ncols()];
        Self::with_lambdas(values, method, families, lambdas)
    }

    pub fn with_lambdas(
        values: DMatrix<f64>,
        method: FeatureMethod,
        families: Vec<Family>,
        lambdas: Vec<Option<f64>>,
    ) -> Result<Self> {
        if families.len() != values.ncols() || lambdas.len() != values.ncols() {
            return Err(CilError::DimensionMismatch(format!(
                "{} feature columns but {} families and {} penalties",
                values.ncols(),
                families.len(),
                lambdas.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            let rows = values.nrows().max(1);
            return Err(CilError::InvalidParameter(format!(
                "feature at ({}, {}) must be finite and nonnegative",
                bad % rows,
                bad / rows
            )));
        }
        Ok(Self { values, method, families, lambdas })
    }

    /// Features built directly from a matrix (gaussian family labels).
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let t = values.ncols();
        Self::new(values, FeatureMethod::LassoBic, vec![Family::Gaussian; t])
    }

    /// All-zero features for `j` controls and `t` treatments.
    pub fn zeros(j: usize, t: usize) -> Self {
        Self {
            values: DMatrix::zeros(j, t),
            method: FeatureMethod::LassoBic,
            families: vec![Family::Gaussian; t],
            lambdas: vec![None; t],
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
    pub fn method(&self) -> FeatureMethod {
        self.method
    }
    pub fn families(&self) -> &[Family] {
        &self.families
    }
    pub fn lambdas(&self) -> &[Option<f64>] {
        &self.lambdas
    }
    pub fn j(&self) -> usize {
        self.values.nrows()
    }
    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    /// Divides every column by its maximum (all-zero columns unchanged).
    pub fn max_normalized(&self) -> Self {
        let mut out = self.clone();
        for mut col in out.values.column_iter_mut() {
            let m = col.max();
            if m > 0.0 {
                col /= m;
            }
        }
        out
    }
}

/// Per-control regressors of the CIL linear predictor: a leading 1 followed
/// by the group-aggregated features, shape `J x (G+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDesign {
    /// Stored transposed, `(G+1) x J`, so each control's row is contiguous.
    by_control: DMatrix<f64>,
}

impl FeatureDesign {
    pub fn new(features: &FeatureMatrix, group_map: &[usize]) -> Result<Self> {
        if group_map.len() != features.t() {
            return Err(CilError::DimensionMismatch(format!(
                "group map covers {} treatments, features have {}",
                group_map.len(),
                features.t()
            )));
        }
        let g = group_map.iter().max().map_or(0, |m| m + 1);
        let mut by_control = DMatrix::zeros(g + 1, features.j());
        by_control.row_mut(0).fill(1.0);
        for (t, &grp) in group_map.iter().enumerate() {
            let src = features.values().column(t);
            for j in 0..features.j() {
                by_control[(grp + 1, j)] += src[j];
            }
        }
        Ok(Self { by_control })
    }

    pub fn j(&self) -> usize {
        self.by_control.ncols()
    }
    /// Number of theta parameters, `G + 1`.
    pub fn dim(&self) -> usize {
        self.by_control.nrows()
    }
    pub fn row(&self, j: usize) -> &[f64] {
        let dim = self.dim();
        &self.by_control.as_slice()[j * dim..(j + 1) * dim]
    }

    /// Linear predictors `theta0 + sum_g theta_g * aggregated f[j, g]`.
    pub fn linear_predictors(&self, params: &[f64]) -> Vec<f64> {
        debug_assert_eq!(params.len(), self.dim());
        (0..self.j())
            .map(|j| self.row(j).iter().zip(params).map(|(f, p)| f * p).sum())
            .collect()
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `pi = rho + (1 - 2 rho) * sigmoid(eta)`, kept inside `[rho, 1 - rho]`.
/// Written around 1/2 so `eta = 0` yields exactly 1/2.
pub fn bounded_probability(eta: f64, rho: f64) -> f64 {
    (0.5 + 0.5 * (1.0 - 2.0 * rho) * (0.5 * eta).tanh()).clamp(rho, 1.0 - rho)
}

/// `d pi / d eta = (1 - 2 rho) sigmoid(eta) (1 - sigmoid(eta))`.
pub fn bounded_probability_slope(eta: f64, rho: f64) -> f64 {
    let s = sigmoid(eta);
    (1.0 - 2.0 * rho) * s * (1.0 - s)
}

fn predictor(theta: &ThetaVector, f_row: &[f64]) -> Result<f64> {
    if f_row.len() != theta.n_treatments() {
        return Err(CilError::DimensionMismatch(format!(
            "feature row has {} entries for {} treatments",
            f_row.len(),
            theta.n_treatments()
        )));
    }
    if f_row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CilError::InvalidParameter("features must be finite and nonnegative".into()));
    }
    let eta = theta.theta0()
        + f_row
            .iter()
            .zip(theta.group_map())
            .map(|(f, &g)| theta.theta()[g] * f)
            .sum::<f64>();
    if eta.is_nan() {
        return Err(CilError::InvalidParameter("linear predictor is not a number".into()));
    }
    Ok(eta)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 0.5 {
        Ok(())
    } else {
        Err(CilError::InvalidParameter(format!("rho must lie in (0, 1/2), got {rho}")))
    }
}

/// Prior inclusion probability of a control with feature row `f_row`
/// (one entry per treatment).
pub fn inclusion_probability(theta: &ThetaVector, f_row: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(bounded_probability(predictor(theta, f_row)?, rho))
}

/// Gradient of [`inclusion_probability`] with respect to
/// `[theta0, theta_1..theta_G]`.
pub fn inclusion_probability_gradient(theta: &ThetaVector, f_row: &[f64], rho: f64) -> Result<Vec<f64>> {
    check_rho(rho)?;
    let slope = bounded_probability_slope(predictor(theta, f_row)?, rho);
    let mut grad = vec![0.0; theta.n_groups() + 1];
    grad[0] = slope;
    for (f, &g) in f_row.iter().zip(theta.group_map()) {
        grad[g + 1] += slope * f;
    }
    Ok(grad)
}

/// Log of the pMOM density `(c^2 / (tau phi)) N(c; 0, tau phi)`.
pub fn pmom_log_density(coef: f64, tau: f64, phi: f64) -> f64 {
    if coef == 0.0 {
        return f64::NEG_INFINITY;
    }
    let v = tau * phi;
    2.0 * coef.abs().ln() - v.ln() - 0.5 * (2.0 * PI * v).ln() - coef * coef / (2.0 * v)
}

/// Per-coordinate log prior terms for a fixed theta, shared by the sampler
/// and the marginal-likelihood objectives.
#[derive(Debug, Clone)]
pub struct PriorTable {
    t: usize,
    j: usize,
    /// Log prior of inclusion / exclusion per coordinate (Bernoulli families).
    log_in: Vec<f64>,
    log_out: Vec<f64>,
    /// Log mass of a specific control subset of each size (Beta-Binomial).
    bb_log_mass: Option<Vec<f64>>,
}

impl PriorTable {
    pub fn new(theta: &ThetaVector, features: &FeatureMatrix, spec: &PriorSpec) -> Result<Self> {
        let t = theta.n_treatments();
        let j = features.j();
        if features.t() != t {
            return Err(CilError::DimensionMismatch(format!(
                "features have {} treatment columns, theta covers {t}",
                features.t()
            )));
        }
        let mut log_in = Vec::with_capacity(t + j);
        let mut log_out = Vec::with_capacity(t + j);
        for _ in 0..t {
            log_in.push(spec.treat_incl.ln());
            log_out.push((1.0 - spec.treat_incl).ln());
        }
        let mut bb_log_mass = None;
        match spec.model_prior {
            ModelPrior::Cil => {
                let rho = spec.rho_for(j);
                check_rho(rho)?;
                let design = FeatureDesign::new(features, theta.group_map())?;
                for eta in design.linear_predictors(&theta.params()) {
                    let p = bounded_probability(eta, rho);
                    log_in.push(p.ln());
                    log_out.push((1.0 - p).ln());
                }
            }
            ModelPrior::Uniform => {
                log_in.iter_mut().chain(log_out.iter_mut()).for_each(|v| *v = -std::f64::consts::LN_2);
                for _ in 0..j {
                    log_in.push(-std::f64::consts::LN_2);
                    log_out.push(-std::f64::consts::LN_2);
                }
            }
            ModelPrior::BetaBinomial { a, b } => {
                let jf = j as f64;
                let base = ln_beta(a, b);
                bb_log_mass = Some(
                    (0..=j)
                        .map(|k| ln_beta(a + k as f64, b + jf - k as f64) - base)
                        .collect(),
                );
            }
        }
        Ok(Self { t, j, log_in, log_out, bb_log_mass })
    }

    fn check(&self, model: &ModelIndicator) -> Result<()> {
        if model.t() != self.t || model.j() != self.j {
            return Err(CilError::DimensionMismatch(format!(
                "model has T={}, J={}; prior built for T={}, J={}",
                model.t(),
                model.j(),
                self.t,
                self.j
            )));
        }
        Ok(())
    }

    pub fn log_prior(&self, model: &ModelIndicator) -> Result<f64> {
        self.check(model)?;
        Ok(self.log_prior_unchecked(model))
    }

    pub(crate) fn log_prior_unchecked(&self, model: &ModelIndicator) -> f64 {
        let bern_len = self.log_in.len();
        let mut lp: f64 = (0..bern_len)
            .map(|c| if model.get(c) { self.log_in[c] } else { self.log_out[c] })
            .sum();
        if let Some(mass) = &self.bb_log_mass {
            lp += mass[model.n_controls()];
        }
        lp
    }

    /// Log prior odds of coordinate `c` being included, given the rest of
    /// `model`.
    pub fn conditional_log_odds(&self, model: &ModelIndicator, c: usize) -> f64 {
        match &self.bb_log_mass {
            Some(mass) if c >= self.t => {
                let others = model.n_controls() - usize::from(model.get(c));
                mass[others + 1] - mass[others]
            }
            _ => self.log_in[c] - self.log_out[c],
        }
    }
}

/// Log prior probability of `model` under the family in `spec`.
pub fn model_log_prior(
    model: &ModelIndicator,
    theta: &ThetaVector,
    features: &FeatureMatrix,
    spec: &PriorSpec,
) -> Result<f64> {
    PriorTable::new(theta, features, spec)?.log_prior(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_theta_gives_one_half() {
        let th = ThetaVector::zeros(3);
        for rho in [1e-6, 0.01, 0.2, 0.49] {
            assert_eq!(inclusion_probability(&th, &[0.3, 5.0, 0.0], rho).unwrap(), 0.5);
        }
    }

    #[test]
    fn saturates_at_upper_bound() {
        let rho = 0.01;
        let th = ThetaVector::ungrouped(0.0, vec![1e6]).unwrap();
        let p = inclusion_probability(&th, &[0.5], rho).unwrap();
        assert!((p - (1.0 - rho)).abs() < 1e-15);
    }

    #[test]
    fn scalar_value_at_theta0_minus_one() {
        // rho + (1 - 2 rho) sigma(-1) with rho = 1/9802, evaluated with 50-digit arithmetic.
        let expected = 0.268_988_566_560_492_98;
        let th = ThetaVector::ungrouped(-1.0, vec![0.0]).unwrap();
        let p = inclusion_probability(&th, &[0.0], 1.0 / 9802.0).unwrap();
        assert!((p - expected).abs() < 1e-15, "{p}");
    }

    #[test]
    fn grouped_theta_multiplies_member_features() {
        let th = ThetaVector::new(0.5, vec![2.0], vec![0, 0]).unwrap();
        let same = ThetaVector::ungrouped(0.5, vec![2.0]).unwrap();
        let a = inclusion_probability(&th, &[0.25, 0.5], 0.1).unwrap();
        let b = inclusion_probability(&same, &[0.75], 0.1).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let th = ThetaVector::zeros(1);
        assert!(inclusion_probability(&th, &[f64::NAN], 0.1).is_err());
        assert!(inclusion_probability(&th, &[-1.0], 0.1).is_err());
        assert!(inclusion_probability(&th, &[1.0], 0.5).is_err());
        assert!(inclusion_probability(&th, &[1.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn cil_prior_at_zero_theta() {
        let f = FeatureMatrix::from_values(DMatrix::from_element(4, 2, 0.7)).unwrap();
        let spec = PriorSpec::default();
        let th = ThetaVector::zeros(2);
        let m = ModelIndicator::parse_bits("10", "0110").unwrap();
        let lp = model_log_prior(&m, &th, &f, &spec).unwrap();
        assert!((lp - 6.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_prior_value() {
        let spec = PriorSpec::default().with_model_prior(ModelPrior::Uniform);
        let f = FeatureMatrix::zeros(3, 1);
        let m = ModelIndicator::parse_bits("1", "010").unwrap();
        let lp = model_log_prior(&m, &ThetaVector::zeros(1), &f, &spec).unwrap();
        assert!((lp + 4.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn beta_binomial_mass_matches_enumeration() {
        // Brute force: BB(1,1) puts mass 1/(J+1) on each size, spread evenly.
        let spec = PriorSpec::default().with_model_prior(ModelPrior::BetaBinomial { a: 1.0, b: 1.0 });
        let f = FeatureMatrix::zeros(3, 1);
        let th = ThetaVector::zeros(1);
        let binom = [1.0, 3.0, 3.0, 1.0];
        let mut total = 0.0;
        for g in 0..8u64 {
            let gamma: Vec<bool> = (0..3).map(|j| (g >> j) & 1 == 1).collect();
            let k = gamma.iter().filter(|b| **b).count();
            let m = ModelIndicator::from_bits(&[true], &gamma);
            let lp = model_log_prior(&m, &th, &f, &spec).unwrap();
            let gamma_mass = (lp - 0.5f64.ln()).exp();
            assert!((gamma_mass - 1.0 / (4.0 * binom[k])).abs() < 1e-14);
            total += gamma_mass;
        }
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn conditional_odds_match_full_prior_difference() {
        let f = FeatureMatrix::from_values(DMatrix::from_fn(5, 2, |j, t| (j + 2 * t) as f64 * 0.3)).unwrap();
        let th = ThetaVector::ungrouped(-0.7, vec![1.2, -0.4]).unwrap();
        for prior in [
            ModelPrior::Cil,
            ModelPrior::Uniform,
            ModelPrior::BetaBinomial { a: 2.0, b: 3.0 },
        ] {
            let spec = PriorSpec::default().with_model_prior(prior);
            let table = PriorTable::new(&th, &f, &spec).unwrap();
            let m = ModelIndicator::parse_bits("01", "10110").unwrap();
            for c in 0..m.len() {
                let mut on = m.clone();
                on.set(c, true);
                let mut off = m.clone();
                off.set(c, false);
                let diff = table.log_prior(&on).unwrap() - table.log_prior(&off).unwrap();
                assert!((diff - table.conditional_log_odds(&m, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pmom_zero_and_symmetry() {
        assert_eq!(pmom_log_density(0.0, 0.348, 1.0), f64::NEG_INFINITY);
        assert_eq!(pmom_log_density(0.7, 0.348, 1.0), pmom_log_density(-0.7, 0.348, 1.0));
    }
}
