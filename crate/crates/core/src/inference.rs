//! Treatment-effect inference from sampled models: BMA point estimates and
//! credible intervals, the exponentiated treatment-deviation measure, and
//! the conditional treatment mean it needs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data::{Dataset, PriorSpec, ThetaVector};
use crate::error::{CilError, Result};
use crate::features::Family;
use crate::marginal::{Coefficient, MarginalEvaluator, PhiPosterior};
use crate::prior::sigmoid;
use crate::rng;
use crate::search::{inclusion_probabilities, PosteriorSampleSet};

pub const DEFAULT_DRAWS: usize = 5000;
pub const MIN_DRAWS: usize = 100;
pub const DEFAULT_LEVELS: [f64; 3] = [0.5, 0.9, 0.95];

/// How within-model posterior draws are produced.
pub const DRAW_METHOD: &str = "gaussian within-model draws with pMOM importance reweighting";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

/// BMA summary of the treatment effects. Draws are importance-weighted;
/// `weights` sums to one.
#[derive(Debug, Clone)]
pub struct TreatmentInference {
    pub treatment_names: Vec<String>,
    pub alpha_hat: Vec<f64>,
    /// Monte Carlo standard error of each `alpha_hat`.
    pub mc_se: Vec<f64>,
    pub intervals: Vec<Vec<Interval>>,
    pub inclusion: Vec<f64>,
    /// `n_draws x T`.
    pub draws: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub effective_sample_size: f64,
    pub theta: ThetaVector,
    pub spec: PriorSpec,
    pub seed: u64,
}

impl TreatmentInference {
    pub fn interval(&self, t: usize, level: f64) -> Option<Interval> {
        self.intervals[t].iter().find(|i| (i.level - level).abs() < 1e-12).copied()
    }

    /// One row per treatment: estimate, standard error, inclusion
    /// probability and interval bounds at every level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("treatment,estimate,mc_se,inclusion");
        if let Some(first) = self.intervals.first() {
            for i in first {
                let _ = write!(out, ",lower_{0},upper_{0}", level_label(i.level));
            }
        }
        out.push('\n');
        for t in 0..self.alpha_hat.len() {
            let _ = write!(out, "{},{},{},{}", self.treatment_names[t], self.alpha_hat[t], self.mc_se[t], self.inclusion[t]);
            for i in &self.intervals[t] {
                let _ = write!(out, ",{},{}", i.lower, i.upper);
            }
            out.push('\n');
        }
        out
    }

    /// Raw draws with their importance weights.
    pub fn draws_csv(&self) -> String {
        let mut out = String::from("weight");
        for name in &self.treatment_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (r, w) in self.weights.iter().enumerate() {
            let _ = write!(out, "{w}");
            for v in self.draws.row(r).iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn level_label(level: f64) -> String {
    format!("{}", (level * 100.0).round() as i64)
}

/// Quantile of a weighted sample: the smallest value whose cumulative
/// weight reaches `p`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let target = p * total;
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if acc >= target - 1e-15 * total {
            return values[i];
        }
    }
    order.last().map_or(f64::NAN, |&i| values[i])
}

/// BMA treatment estimates from `samples`: models are drawn in proportion
/// to their visit counts, then `phi` and the coefficients from the model's
/// Gaussian conditional posterior, reweighted towards the pMOM posterior by
/// `prod coef^2 / (tau phi)` normalized within each model's batch.
pub fn bma_estimate(
    samples: &PosteriorSampleSet,
    data: &Dataset,
    spec: &PriorSpec,
    n_draws: usize,
    seed: u64,
) -> Result<TreatmentInference> {
    bma_estimate_with_levels(samples, data, spec, n_draws, seed, &DEFAULT_LEVELS)
}

pub fn bma_estimate_with_levels(
    samples: &PosteriorSampleSet,
    data: &Dataset,
    spec: &PriorSpec,
    n_draws: usize,
    seed: u64,
    levels: &[f64],
) -> Result<TreatmentInference> {
    if samples.is_empty() || samples.total_count() == 0 {
        return Err(CilError::EmptyModelSet);
    }
    if n_draws < MIN_DRAWS {
        return Err(CilError::InvalidParameter(format!("at least {MIN_DRAWS} draws are required, got {n_draws}")));
    }
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(CilError::InvalidParameter("interval levels must lie in (0, 1)".into()));
    }
    let t = data.t();
    if samples.t() != t || samples.j() != data.j() {
        return Err(CilError::DimensionMismatch("sample set does not match the dataset".into()));
    }
    let evaluator = MarginalEvaluator::new(data, spec)?;
    let models: Vec<_> = samples.models.iter().filter(|(_, r)| r.log_ml.is_finite()).collect();
    let counts: Vec<f64> = models.iter().map(|(_, r)| r.count as f64).collect();
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(CilError::EmptyModelSet);
    }

    let mut rng = rng::stream(seed, "bma", 0);
    // Allocate draws to models by sampling from the visit frequencies.
    let cumulative: Vec<f64> = counts
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c / total;
            Some(*acc)
        })
        .collect();
    let mut per_model = vec![0usize; models.len()];
    for _ in 0..n_draws {
        let u: f64 = rng.random();
        let k = cumulative.partition_point(|c| *c <= u).min(models.len() - 1);
        per_model[k] += 1;
    }

    let mut draws = DMatrix::zeros(n_draws, t);
    let mut weights = DVector::zeros(n_draws);
    let mut row = 0;
    for (k, &(model, _)) in models.iter().enumerate() {
        let batch = per_model[k];
        if batch == 0 {
            continue;
        }
        let fit = evaluator.evaluate(model)?;
        let p = fit.coefficients.len();
        let chol = fit
            .posterior_scale
            .clone()
            .cholesky()
            .ok_or_else(|| CilError::Numerical("posterior scale is not positive definite".into()))?;
        let l = chol.l();
        let penalized: Vec<usize> =
            (0..p).filter(|&i| fit.coefficients[i] != Coefficient::Intercept).collect();
        let treatment_pos: Vec<(usize, usize)> = fit
            .coefficients
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                Coefficient::Treatment(tt) => Some((i, *tt)),
                _ => None,
            })
            .collect();
        let phi_draw = |rng: &mut rng::StreamRng| -> Result<f64> {
            match fit.phi_posterior {
                PhiPosterior::Known(phi) => Ok(phi),
                PhiPosterior::InverseGamma { shape, rate } => {
                    let g = Gamma::new(shape, 1.0).map_err(|e| CilError::Numerical(e.to_string()))?;
                    Ok(rate / g.sample(rng))
                }
            }
        };
        let mut log_w = Vec::with_capacity(batch);
        for b in 0..batch {
            let phi = phi_draw(&mut rng)?;
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let coef = &fit.posterior_mean + (&l * z) * phi.sqrt();
            for &(i, tt) in &treatment_pos {
                draws[(row + b, tt)] = coef[i];
            }
            let lw: f64 = penalized
                .iter()
                .map(|&i| (coef[i] * coef[i] / (spec.tau * phi)).ln())
                .sum();
            log_w.push(lw);
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = raw.iter().sum();
        let share = batch as f64 / n_draws as f64;
        for (b, w) in raw.iter().enumerate() {
            weights[row + b] = share * w / sum;
        }
        row += batch;
    }

    let mut alpha_hat = vec![0.0; t];
    let mut mc_se = vec![0.0; t];
    let mut intervals = Vec::with_capacity(t);
    let w: Vec<f64> = weights.iter().copied().collect();
    for tt in 0..t {
        let col: Vec<f64> = draws.column(tt).iter().copied().collect();
        let mean: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum();
        alpha_hat[tt] = mean;
        mc_se[tt] = col.iter().zip(&w).map(|(a, b)| b * b * (a - mean).powi(2)).sum::<f64>().sqrt();
        intervals.push(
            levels
                .iter()
                .map(|&level| Interval {
                    level,
                    lower: weighted_quantile(&col, &w, (1.0 - level) / 2.0),
                    upper: weighted_quantile(&col, &w, (1.0 + level) / 2.0),
                })
                .collect(),
        );
    }
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let (inclusion, _) = inclusion_probabilities(samples)?;
    Ok(TreatmentInference {
        treatment_names: data.treatment_names().to_vec(),
        alpha_hat,
        mc_se,
        intervals,
        inclusion,
        draws,
        weights,
        effective_sample_size: ess,
        theta: samples.theta_used.clone(),
        spec: spec.clone(),
        seed,
    })
}

/// Weighted distribution summary of `exp(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSummary {
    pub median: f64,
    pub interval_50: (f64, f64),
    pub interval_90: (f64, f64),
    pub mean: f64,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Per-draw `exp(|(d_new - E(d | x))' alpha|)`.
pub fn treatment_deviation(inference: &TreatmentInference, d_new: &[f64], e_d_given_x: &[f64]) -> Result<DeviationSummary> {
    let t = inference.draws.ncols();
    if d_new.len() != t || e_d_given_x.len() != t {
        return Err(CilError::DimensionMismatch(format!(
            "expected {t} treatment values, got {} and {}",
            d_new.len(),
            e_d_given_x.len()
        )));
    }
    let diff: Vec<f64> = d_new.iter().zip(e_d_given_x).map(|(a, b)| a - b).collect();
    let values: Vec<f64> = inference
        .draws
        .row_iter()
        .map(|r| r.iter().zip(&diff).map(|(a, d)| a * d).sum::<f64>().abs().exp())
        .collect();
    let weights: Vec<f64> = inference.weights.iter().copied().collect();
    let q = |p| weighted_quantile(&values, &weights, p);
    let total: f64 = weights.iter().sum();
    Ok(DeviationSummary {
        median: q(0.5),
        interval_50: (q(0.25), q(0.75)),
        interval_90: (q(0.05), q(0.95)),
        mean: values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / total,
        values,
        weights,
    })
}

pub const CONDITIONAL_MEAN_RIDGE: f64 = 1e-6;

/// Fitted regression of one treatment on the controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMeanModel {
    pub family: Family,
    pub intercept: f64,
    pub coef: DVector<f64>,
    /// Fitted probabilities are pinned at 0 or 1 for more than 99% of rows.
    pub separation: bool,
}

impl ConditionalMeanModel {
    pub fn predict(&self, x_row: &[f64]) -> f64 {
        let eta = self.intercept + x_row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum::<f64>();
        match self.family {
            Family::Gaussian => eta,
            Family::Binomial => sigmoid(eta),
        }
    }

    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut eta = x * &self.coef;
        eta.add_scalar_mut(self.intercept);
        if self.family == Family::Binomial {
            eta.apply(|v| *v = sigmoid(*v));
        }
        eta
    }
}

/// Ridge-stabilized (penalty 1e-6 on all coefficients) logistic or linear
/// regression of treatment `t` on the controls. The family defaults to
/// binomial for 0/1 treatments.
pub fn estimate_conditional_treatment_mean(data: &Dataset, t: usize, family: Option<Family>) -> Result<ConditionalMeanModel> {
    if t >= data.t() {
        return Err(CilError::DimensionMismatch(format!("treatment {t} out of range")));
    }
    let family = family.unwrap_or(if data.is_binary_treatment(t) { Family::Binomial } else { Family::Gaussian });
    let d = data.d().column(t).into_owned();
    if family == Family::Binomial {
        if let Some((row, &value)) = d.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(CilError::NonBinaryResponse { row, value });
        }
    }
    let n = data.n();
    let p = data.j() + 1;
    let mut w = DMatrix::zeros(n, p);
    w.column_mut(0).fill(1.0);
    w.columns_mut(1, data.j()).copy_from(data.x());
    let ridge = DMatrix::<f64>::identity(p, p) * CONDITIONAL_MEAN_RIDGE;

    let beta = match family {
        Family::Gaussian => {
            let a = w.tr_mul(&w) + &ridge;
            a.cholesky()
                .ok_or_else(|| CilError::Numerical("normal equations are singular".into()))?
                .solve(&w.tr_mul(&d))
        }
        Family::Binomial => {
            let objective = |b: &DVector<f64>| -> f64 {
                let eta = &w * b;
                let nll: f64 = eta
                    .iter()
                    .zip(d.iter())
                    .map(|(e, y)| {
                        let l = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                        l - y * e
                    })
                    .sum();
                nll + 0.5 * CONDITIONAL_MEAN_RIDGE * b.norm_squared()
            };
            let mut b = DVector::zeros(p);
            let mut current = objective(&b);
            for _ in 0..200 {
                let eta = &w * &b;
                let mut grad = &ridge * &b;
                let mut hess = ridge.clone();
                let mut wd = w.clone();
                for i in 0..n {
                    let pr = sigmoid(eta[i]);
                    grad += w.row(i).transpose() * (pr - d[i]);
                    let s = (pr * (1.0 - pr)).sqrt();
                    wd.row_mut(i).scale_mut(s);
                }
                hess += wd.tr_mul(&wd);
                let step = hess
                    .cholesky()
                    .ok_or_else(|| CilError::Numerical("logistic Hessian is singular".into()))?
                    .solve(&grad);
                let mut scale = 1.0;
                let mut next;
                loop {
                    next = &b - &step * scale;
                    let v = objective(&next);
                    if v <= current || scale < 1e-10 {
                        current = v.min(current);
                        break;
                    }
                    scale *= 0.5;
                }
                let change = (&next - &b).amax();
                b = next;
                if change < 1e-10 {
                    break;
                }
            }
            b
        }
    };
    let mut model = ConditionalMeanModel {
        family,
        intercept: beta[0],
        coef: beta.rows(1, data.j()).into_owned(),
        separation: false,
    };
    if family == Family::Binomial {
        let fitted = model.predict_matrix(data.x());
        let pinned = fitted.iter().filter(|p| **p < 1e-5 || **p > 1.0 - 1e-5).count();
        if pinned as f64 > 0.99 * n as f64 {
            log::warn!("treatment {t}: fitted probabilities pinned at 0/1, likely separation");
            model.separation = true;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_dataset, ModelIndicator, RawDataset};
    use crate::search::ModelRecord;
    use std::collections::BTreeMap;

    fn inference_with_draws(draws: DMatrix<f64>) -> TreatmentInference {
        let n = draws.nrows();
        let t = draws.ncols();
        TreatmentInference {
            treatment_names: (0..t).map(|i| format!("d{i}")).collect(),
            alpha_hat: vec![0.0; t],
            mc_se: vec![0.0; t],
            intervals: vec![vec![]; t],
            inclusion: vec![0.0; t],
            draws,
            weights: DVector::from_element(n, 1.0 / n as f64),
            effective_sample_size: n as f64,
            theta: ThetaVector::zeros(t),
            spec: PriorSpec::default(),
            seed: 0,
        }
    }

    #[test]
    fn deviation_identities() {
        let inf = inference_with_draws(DMatrix::from_fn(50, 2, |i, j| (i as f64 - 20.0) * 0.1 + j as f64));
        let s = treatment_deviation(&inf, &[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!(s.values.iter().all(|v| *v == 1.0));
        let zero = inference_with_draws(DMatrix::zeros(20, 2));
        let s = treatment_deviation(&zero, &[1.0, 0.0], &[0.2, 0.9]).unwrap();
        assert!(s.values.iter().all(|v| *v == 1.0));
        assert!(treatment_deviation(&zero, &[1.0], &[0.2, 0.9]).is_err());
    }

    #[test]
    fn weighted_quantile_basics() {
        let v = [3.0, 1.0, 2.0, 4.0];
        let w = [0.25; 4];
        assert_eq!(weighted_quantile(&v, &w, 0.5), 2.0);
        assert_eq!(weighted_quantile(&v, &w, 1.0), 4.0);
        assert_eq!(weighted_quantile(&v, &w, 0.0), 1.0);
    }

    #[test]
    fn null_treatment_model_gives_zero() {
        let y = DVector::from_fn(30, |i, _| (i as f64 * 0.37).sin());
        let d = DMatrix::from_fn(30, 1, |i, _| (i % 2) as f64);
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * (j + 2)) as f64 * 0.91).cos());
        let data = validate_dataset(RawDataset::new(y, d, x), true).unwrap();
        let mut models = BTreeMap::new();
        models.insert(
            ModelIndicator::from_bits(&[false], &[true, false]),
            ModelRecord { count: 10, log_ml: -20.0 },
        );
        let samples = PosteriorSampleSet {
            models,
            theta_used: ThetaVector::zeros(1),
            total_iterations: 10,
            burn_in: 0,
            rng_seed: 1,
        };
        let inf = bma_estimate(&samples, &data, &PriorSpec::default(), 500, 9).unwrap();
        assert_eq!(inf.alpha_hat, vec![0.0]);
        for i in &inf.intervals[0] {
            assert_eq!((i.lower, i.upper), (0.0, 0.0));
        }
        assert!((inf.weights.sum() - 1.0).abs() < 1e-12);
        assert!(bma_estimate(&samples, &data, &PriorSpec::default(), 50, 9).is_err());
    }
}
