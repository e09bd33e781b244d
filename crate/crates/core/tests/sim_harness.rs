use cil_core::sim::{
    augment_artificial_controls, generate_binary_treatment, generate_multi_treatment, generate_single_treatment,
    replicate_seed, run_experiment, summarize, Method, SimConfig, SimDesign,
};
use cil_core::{extract_features, FeatureMethod};
use nalgebra::{DMatrix, DVector};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn residualize(v: &DVector<f64>, on: &DMatrix<f64>) -> DVector<f64> {
    let w = DMatrix::from_fn(on.nrows(), on.ncols() + 1, |i, j| if j == 0 { 1.0 } else { on[(i, j - 1)] });
    let beta = (w.transpose() * &w).cholesky().unwrap().solve(&(w.transpose() * v));
    v - w * beta
}

#[test]
fn treatment_parent_correlation() {
    let design = SimDesign::single(100_000, 12, 6, 0, 1.0);
    let (data, truth) = generate_single_treatment(&design, 1).unwrap();
    let d = data.d().column(0);
    let parent = truth.treatment_parents[0][0];
    let r = corr(d.as_slice(), data.x().column(parent).as_slice());
    assert!((r - 1.0 / 7f64.sqrt()).abs() < 0.01, "{r}");
}

#[test]
fn multi_treatment_parents_have_unit_coefficients() {
    let design = SimDesign::multi(100_000, 95, 5);
    let (data, truth) = generate_multi_treatment(&design, 2).unwrap();
    for t in [1, 4] {
        let parents = &truth.treatment_parents[t];
        let on = data.x().select_columns(parents);
        let w = DMatrix::from_fn(on.nrows(), on.ncols() + 1, |i, j| if j == 0 { 1.0 } else { on[(i, j - 1)] });
        let d = data.d().column(t).into_owned();
        let beta = (w.transpose() * &w).cholesky().unwrap().solve(&(w.transpose() * d));
        for k in 1..beta.len() {
            assert!((beta[k] - 1.0).abs() < 0.02, "treatment {t}, parent {}: {}", parents[k - 1], beta[k]);
        }
    }
}

#[test]
fn artificial_controls_track_treatment_only() {
    let design = SimDesign::augmented(100_000, 12, 3, 1, 0.1, 0);
    let (data, _) = generate_binary_treatment(&design, 3).unwrap();
    let p1 = data.d().column(0).mean();
    assert!((p1 - 0.5).abs() < 0.01);
    let aug = augment_artificial_controls(&data, &[2], 4).unwrap();
    let z = aug.x().column(12);
    let r = corr(z.as_slice(), data.d().column(0).as_slice());
    assert!((r - 0.832).abs() < 0.01, "{r}");

    let small = SimDesign::augmented(10_000, 12, 3, 1, 0.1, 0);
    let (data, _) = generate_binary_treatment(&small, 5).unwrap();
    let aug = augment_artificial_controls(&data, &[1], 6).unwrap();
    let ry = residualize(data.y(), data.d());
    let rz = residualize(&aug.x().column(12).into_owned(), data.d());
    let partial = corr(ry.as_slice(), rz.as_slice());
    assert!(partial.abs() < 3.0 / (10_000f64).sqrt(), "{partial}");
}

#[test]
fn confounders_carry_the_largest_features() {
    let mut hits = 0;
    for seed in 0..10 {
        let design = SimDesign::single(100, 49, 6, 3, 1.0);
        let (data, truth) = generate_single_treatment(&design, 50 + seed).unwrap();
        let f = extract_features(&data, FeatureMethod::LassoBic, None).unwrap();
        let parents = &truth.treatment_parents[0];
        let confounders: Vec<usize> = parents.iter().copied().filter(|&j| truth.gamma[j]).collect();
        assert_eq!(confounders.len(), 3);
        let weakest = confounders.iter().map(|&j| f.values()[(j, 0)]).fold(f64::INFINITY, f64::min);
        let strongest_other = (0..data.j())
            .filter(|j| !parents.contains(j))
            .map(|j| f.values()[(j, 0)])
            .fold(0.0, f64::max);
        hits += usize::from(weakest > strongest_other);
    }
    assert!(hits >= 8, "{hits}/10");
}

fn small_cells() -> Vec<SimDesign> {
    vec![
        SimDesign::single(60, 12, 3, 1, 1.0).with_replicates(3),
        SimDesign::single(60, 12, 3, 3, 0.0).with_seed_key(1).with_replicates(2),
    ]
}

#[test]
fn reruns_and_worker_counts_give_identical_reports() {
    let methods = [Method::CilEb, Method::CilEp, Method::Bma, Method::Dml, Method::Lasso];
    let config = SimConfig {
        sampler: cil_core::SamplerConfig { iterations: 300, burn_in: 30, seed: 0, chains: 1 },
        n_draws: 200,
        ..SimConfig::default()
    };
    let a = run_experiment(&small_cells(), &methods, &config, 42, Some(1)).unwrap();
    let b = run_experiment(&small_cells(), &methods, &config, 42, Some(1)).unwrap();
    let c = run_experiment(&small_cells(), &methods, &config, 42, Some(3)).unwrap();
    assert_eq!(a.long_csv(false), b.long_csv(false));
    assert_eq!(a.long_csv(false), c.long_csv(false));
    assert_eq!(a.summary_csv(), c.summary_csv());
    let other = run_experiment(&small_cells(), &methods, &config, 43, Some(1)).unwrap();
    assert_ne!(a.long_csv(false), other.long_csv(false));
}

#[test]
fn replicate_data_depends_only_on_master_seed_cell_and_index() {
    let cell = SimDesign::single(40, 12, 3, 1, 1.0).with_seed_key(9);
    let relabeled = SimDesign { alpha_true: vec![1.0], ..cell.clone() };
    assert_eq!(replicate_seed(5, &cell, 2), replicate_seed(5, &relabeled, 2));
    assert_ne!(replicate_seed(5, &cell, 2), replicate_seed(5, &cell, 3));
    assert_ne!(replicate_seed(5, &cell, 2), replicate_seed(6, &cell, 2));
}

#[test]
fn summaries_are_reproduced_from_records() {
    let cells = small_cells();
    let methods = [Method::Oracle, Method::Dml, Method::Lasso];
    let report = run_experiment(&cells, &methods, &SimConfig::default(), 3, Some(2)).unwrap();
    assert_eq!(summarize(&cells, &report.methods, &report.records), report.summaries);
    for s in &report.summaries {
        let errs: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.cell == s.cell && r.method == s.method)
            .filter_map(|r| r.sq_error)
            .collect();
        let rmse = (errs.iter().sum::<f64>() / errs.len() as f64).sqrt();
        assert_eq!(rmse, s.rmse);
        if s.method == Method::Oracle {
            assert_eq!(s.rmse_ratio, 1.0);
        }
    }
    let plot = report.plot_data();
    assert_eq!(plot.lines().count(), 1 + cells.len() * methods.len());
}
