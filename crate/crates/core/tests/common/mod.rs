#![allow(dead_code)]

use std::collections::BTreeMap;

use cil_core::marginal::{MarginalEvaluator, ModelEnumeration, ENUMERATION_LIMIT};
use cil_core::search::{ModelRecord, PosteriorSampleSet};
use cil_core::{validate_dataset, Dataset, FeatureMatrix, PriorSpec, RawDataset, ThetaVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// T=1, J=8 instance small enough for exact enumeration: the treatment
/// depends on controls 0..3, the outcome on the treatment and controls 0, 1
/// and 4.
pub fn oracle_instance(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let n = 60;
    let x = normal_matrix(n, 8, &mut r);
    let d = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)] + x[(i, 1)] + x[(i, 2)] + r.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| {
        0.5 * d[(i, 0)] + x[(i, 0)] + 0.7 * x[(i, 1)] + 0.6 * x[(i, 4)] + r.sample::<f64, _>(StandardNormal)
    });
    validate_dataset(RawDataset::new(y, d, x), true).unwrap()
}

pub fn random_features(j: usize, t: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::from_values(DMatrix::from_fn(j, t, |_, _| rng.random_range(0.0..1.0))).unwrap()
}

/// Every model of the dataset, each visited once.
pub fn all_models(data: &Dataset, spec: &PriorSpec) -> PosteriorSampleSet {
    let evaluator = MarginalEvaluator::new(data, spec).unwrap();
    let en = ModelEnumeration::new(&evaluator, ENUMERATION_LIMIT).unwrap();
    let models: BTreeMap<_, _> = en
        .models
        .iter()
        .zip(&en.log_ml)
        .map(|(m, l)| (m.clone(), ModelRecord { count: 1, log_ml: *l }))
        .collect();
    let total = models.len();
    PosteriorSampleSet {
        models,
        theta_used: ThetaVector::zeros(data.t()),
        total_iterations: total,
        burn_in: 0,
        rng_seed: 0,
    }
}

/// Largest absolute difference scaled by the largest reference entry.
pub fn rel_err(a: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Composite Simpson weights for `m` (odd) equally spaced points.
pub fn simpson_weights(m: usize, h: f64) -> Vec<f64> {
    assert!(m % 2 == 1 && m >= 3);
    (0..m)
        .map(|i| {
            let c = if i == 0 || i == m - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
}

pub fn ig_log_density(phi: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * phi.ln() - b / phi
}

pub struct SingleCoefficient {
    pub log_z_gaussian: f64,
    pub correction: f64,
    pub pmom_mean: f64,
}

/// 2-D quadrature over (beta, log phi) for `y = beta d + e` with no intercept.
pub fn quadrature(y: &DVector<f64>, d: &DVector<f64>, spec: &PriorSpec) -> SingleCoefficient {
    let n = y.len() as f64;
    let (dtd, dty, yty) = (d.dot(d), d.dot(y), y.dot(y));
    let tau = spec.tau;
    let precision = dtd + 1.0 / tau;
    let center = dty / precision;
    let s2 = (yty - dty * dty / dtd) / n;
    let m = 2001;
    let us = linspace(s2.ln() - 5.0, s2.ln() + 5.0, m);
    let wu = simpson_weights(m, 10.0 / (m - 1) as f64);
    let half = 14.0 / precision.sqrt();
    let ws = linspace(-half, half, m);
    let ww = simpson_weights(m, 2.0 * half / (m - 1) as f64);

    let mut log_terms = Vec::with_capacity(m * m);
    let mut betas = Vec::with_capacity(m * m);
    let mut phis = Vec::with_capacity(m * m);
    for (u, cu) in us.iter().zip(&wu) {
        let phi = u.exp();
        for (w, cw) in ws.iter().zip(&ww) {
            let beta = center + phi.sqrt() * w;
            let rss = yty - 2.0 * beta * dty + beta * beta * dtd;
            let log_lik = -0.5 * n * (LN_2PI + phi.ln()) - rss / (2.0 * phi);
            let log_prior = -0.5 * (LN_2PI + (tau * phi).ln()) - beta * beta / (2.0 * tau * phi);
            let jac = phi.ln() + 0.5 * phi.ln();
            log_terms.push(log_lik + log_prior + ig_log_density(phi, spec.a_phi, spec.b_phi) + jac + (cu * cw).ln());
            betas.push(beta);
            phis.push(phi);
        }
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut z_moment, mut z_beta) = (0.0, 0.0, 0.0);
    for ((lt, b), p) in log_terms.iter().zip(&betas).zip(&phis) {
        let v = (lt - max).exp();
        let ratio = b * b / (tau * p);
        z += v;
        z_moment += v * ratio;
        z_beta += v * ratio * b;
    }
    SingleCoefficient { log_z_gaussian: max + z.ln(), correction: z_moment / z, pmom_mean: z_beta / z_moment }
}

