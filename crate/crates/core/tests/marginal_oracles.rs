mod common;

use cil_core::marginal::MarginalEvaluator;
use cil_core::prior::{model_log_prior, pmom_log_density};
use cil_core::{validate_dataset, FeatureMatrix, ModelIndicator, ModelPrior, PriorSpec, RawDataset, ThetaVector};
use common::{ig_log_density, linspace, quadrature, rng, simpson_weights, LN_2PI};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

#[test]
fn pmom_density_integrates_to_one() {
    let m = 400_001;
    let grid = linspace(-20.0, 20.0, m);
    let w = simpson_weights(m, 40.0 / (m - 1) as f64);
    let total: f64 = grid.iter().zip(&w).map(|(c, w)| w * pmom_log_density(*c, 0.348, 1.0).exp()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn null_model_is_multivariate_t() {
    let y = DVector::from_column_slice(&[1.0, -1.0]);
    let d = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let data = validate_dataset(RawDataset::new(y.clone(), d, DMatrix::zeros(2, 0)), false).unwrap();
    let spec = PriorSpec::default();
    let (a, b) = (spec.a_phi, spec.b_phi);
    let log_ml = MarginalEvaluator::new(&data, &spec).unwrap().evaluate(&ModelIndicator::empty(1, 0)).unwrap().log_ml;

    // y | phi ~ N(0, phi S) with S = I + k tau 11'.
    let k = 1e6 * spec.tau;
    let s = DMatrix::from_fn(2, 2, |i, j| f64::from(u8::from(i == j)) + k);
    let chol = s.clone().cholesky().unwrap();
    let quad = y.dot(&chol.solve(&y));
    let logdet = s.determinant().ln();
    let closed = ln_gamma(a + 1.0) - ln_gamma(a) + a * b.ln() - LN_2PI - 0.5 * logdet - (a + 1.0) * (b + quad / 2.0).ln();
    assert!((log_ml - closed).abs() < 1e-9, "{log_ml} vs {closed}");

    // Importance sampling over (intercept, phi) with a proposal wider than
    // the posterior.
    let mut r = rng(11);
    let proposal_phi = Gamma::new(0.8, 1.0).unwrap();
    let samples = 200_000;
    let mut weights = Vec::with_capacity(samples);
    for _ in 0..samples {
        let phi: f64 = 1.0 / proposal_phi.sample(&mut r);
        let z: f64 = r.sample(StandardNormal);
        let c = z * phi.sqrt();
        let log_lik = -LN_2PI - phi.ln() - ((1.0 - c).powi(2) + (-1.0 - c).powi(2)) / (2.0 * phi);
        let log_prior_c = -0.5 * (LN_2PI + (k * phi).ln()) - c * c / (2.0 * k * phi);
        let log_q = ig_log_density(phi, 0.8, 1.0) - 0.5 * (LN_2PI + phi.ln()) - c * c / (2.0 * phi);
        weights.push((log_lik + log_prior_c + ig_log_density(phi, a, b) - log_q).exp());
    }
    let mean = weights.iter().sum::<f64>() / samples as f64;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let se = (var / samples as f64).sqrt();
    assert!((log_ml.exp() - mean).abs() < 3.0 * se, "{} vs {mean} +- {se}", log_ml.exp());
}

#[test]
fn single_coefficient_correction_matches_quadrature() {
    let mut r = rng(3);
    let n = 15;
    let d = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| 0.8 * d[i] + r.sample::<f64, _>(StandardNormal));
    let data = validate_dataset(
        RawDataset::new(y.clone(), DMatrix::from_column_slice(n, 1, d.as_slice()), DMatrix::zeros(n, 0)),
        false,
    )
    .unwrap();
    let spec = PriorSpec { include_intercept: false, ..PriorSpec::default() };
    let res = MarginalEvaluator::new(&data, &spec).unwrap().evaluate(&ModelIndicator::full(1, 0)).unwrap();
    let q = quadrature(&y, &d, &spec);
    assert!((res.gaussian_log_ml - q.log_z_gaussian).abs() < 1e-6, "{} vs {}", res.gaussian_log_ml, q.log_z_gaussian);
    let correction = res.correction_log.exp();
    assert!((correction - q.correction).abs() / q.correction < 1e-4, "{correction} vs {}", q.correction);
}

#[test]
fn bma_mean_matches_pmom_posterior_mean() {
    let mut r = rng(8);
    let n = 200;
    let raw_d = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    let d = &raw_d - DVector::from_element(n, raw_d.mean());
    let raw_y = DVector::from_fn(n, |i, _| d[i] + r.sample::<f64, _>(StandardNormal));
    let y = &raw_y - DVector::from_element(n, raw_y.mean());
    let data = validate_dataset(
        RawDataset::new(y.clone(), DMatrix::from_column_slice(n, 1, d.as_slice()), DMatrix::zeros(n, 0)),
        false,
    )
    .unwrap();
    let spec = PriorSpec { include_intercept: false, ..PriorSpec::default() }
        .with_model_prior(ModelPrior::BetaBinomial { a: 1.0, b: 1.0 });
    let features = FeatureMatrix::zeros(0, 1);
    let config = cil_core::SamplerConfig { iterations: 2000, burn_in: 100, seed: 4, chains: 1 };
    let samples = cil_core::sample_models(&data, &ThetaVector::zeros(1), &features, &spec, &config).unwrap();
    let inf = cil_core::bma_estimate(&samples, &data, &spec, 20_000, 5).unwrap();
    let q = quadrature(&y, &d, &spec);
    assert!(
        (inf.alpha_hat[0] - q.pmom_mean).abs() < 3.0 * inf.mc_se[0],
        "{} vs {} (se {})",
        inf.alpha_hat[0],
        q.pmom_mean,
        inf.mc_se[0]
    );
}

#[test]
fn pure_noise_control_lowers_log_ml() {
    let mut decreases = 0;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let n = 100;
        let x = common::normal_matrix(n, 2, &mut r);
        let d = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)] + r.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| d[(i, 0)] + x[(i, 0)] + r.sample::<f64, _>(StandardNormal));
        let data = validate_dataset(RawDataset::new(y, d, x), true).unwrap();
        let ev = MarginalEvaluator::new(&data, &PriorSpec::default()).unwrap();
        let without = ev.log_ml(&ModelIndicator::from_bits(&[true], &[true, false]));
        let with = ev.log_ml(&ModelIndicator::full(1, 2));
        decreases += usize::from(with < without);
    }
    assert!(decreases >= 19, "{decreases}/20");
}

#[test]
fn beta_binomial_mass_depends_on_size_only() {
    let spec = PriorSpec::default().with_model_prior(ModelPrior::BetaBinomial { a: 1.0, b: 1.0 });
    let features = FeatureMatrix::zeros(3, 1);
    let theta = ThetaVector::zeros(1);
    let binom = [1.0, 3.0, 3.0, 1.0];
    let mut total = 0.0;
    for index in 0..16 {
        let model = ModelIndicator::from_index(1, 3, index);
        let mass = model_log_prior(&model, &theta, &features, &spec).unwrap().exp();
        let expected = spec.treat_incl * 1.0 / (4.0 * binom[model.n_controls()]);
        assert!((mass - expected).abs() < 1e-15, "{model:?}: {mass} vs {expected}");
        total += mass;
    }
    assert!((total - 1.0).abs() < 1e-14);
}
