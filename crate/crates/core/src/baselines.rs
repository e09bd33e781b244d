//! Reference estimators: oracle least squares, LASSO on the outcome with a
//! cross-validated penalty, and double-selection DML.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::Dataset;
use crate::error::{CilError, Result};
use crate::features::{lambda_grid, lambda_max, lasso_path, lasso_path_bic, Family, LassoOptions, PATH_LEN, PATH_RATIO};
use crate::marginal::{pivoted_cholesky_rank, RANK_TOLERANCE};
use crate::rng;

/// Least-squares fit with classical and HC1 standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub hc1_se: DVector<f64>,
    pub sigma2: f64,
    pub df: usize,
}

/// OLS of `y` on the columns of `w` (which should contain any intercept).
pub fn ols(w: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = w.shape();
    if p >= n {
        return Err(CilError::RankDeficient(format!("{p} regressors for {n} observations")));
    }
    let gram = w.tr_mul(w);
    if pivoted_cholesky_rank(&gram, RANK_TOLERANCE) < p {
        return Err(CilError::RankDeficient("regressors are collinear".into()));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| CilError::RankDeficient("normal equations are not positive definite".into()))?;
    let coef = chol.solve(&w.tr_mul(y));
    let resid = y - w * &coef;
    let df = n - p;
    let sigma2 = resid.norm_squared() / df as f64;
    let inv = chol.inverse();
    let se = inv.diagonal().map(|v| (v * sigma2).sqrt());
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let row = w.row(i);
        meat += row.transpose() * row * (resid[i] * resid[i]);
    }
    let hc1 = &inv * meat * &inv * (n as f64 / df as f64);
    let hc1_se = hc1.diagonal().map(f64::sqrt);
    Ok(OlsFit { coef, se, hc1_se, sigma2, df })
}

fn design(data: &Dataset, controls: &[usize]) -> DMatrix<f64> {
    let (n, t) = (data.n(), data.t());
    let mut w = DMatrix::zeros(n, 1 + t + controls.len());
    w.column_mut(0).fill(1.0);
    w.columns_mut(1, t).copy_from(data.d());
    for (k, &j) in controls.iter().enumerate() {
        w.column_mut(1 + t + k).copy_from(&data.x().column(j));
    }
    w
}

/// Treatment estimates with standard errors and 95% intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentEstimate {
    pub alpha_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub p_values: Vec<f64>,
}

fn summarize(fit: &OlsFit, t: usize, robust: bool) -> Result<TreatmentEstimate> {
    let se: Vec<f64> = (1..=t).map(|k| if robust { fit.hc1_se[k] } else { fit.se[k] }).collect();
    let alpha_hat: Vec<f64> = (1..=t).map(|k| fit.coef[k]).collect();
    let (crit, p_values): (f64, Vec<f64>) = if robust {
        let normal = Normal::standard();
        let crit = normal.inverse_cdf(0.975);
        let p = alpha_hat.iter().zip(&se).map(|(a, s)| 2.0 * normal.cdf(-(a / s).abs())).collect();
        (crit, p)
    } else {
        let dist = StudentsT::new(0.0, 1.0, fit.df as f64).map_err(|e| CilError::Numerical(e.to_string()))?;
        let crit = dist.inverse_cdf(0.975);
        let p = alpha_hat.iter().zip(&se).map(|(a, s)| 2.0 * dist.cdf(-(a / s).abs())).collect();
        (crit, p)
    };
    Ok(TreatmentEstimate {
        ci_lower: alpha_hat.iter().zip(&se).map(|(a, s)| a - crit * s).collect(),
        ci_upper: alpha_hat.iter().zip(&se).map(|(a, s)| a + crit * s).collect(),
        alpha_hat,
        se,
        p_values,
    })
}

/// OLS of `y` on all treatments, the truly active controls and an
/// intercept, with classical t-based intervals.
pub fn oracle_ols(data: &Dataset, true_gamma: &[bool]) -> Result<TreatmentEstimate> {
    if true_gamma.len() != data.j() {
        return Err(CilError::DimensionMismatch(format!(
            "{} indicators for {} controls",
            true_gamma.len(),
            data.j()
        )));
    }
    let controls: Vec<usize> = (0..data.j()).filter(|&j| true_gamma[j]).collect();
    let fit = ols(&design(data, &controls), data.y())?;
    summarize(&fit, data.t(), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeLassoFit {
    pub alpha_hat: Vec<f64>,
    /// Control coefficients on the original scale.
    pub beta_hat: Vec<f64>,
    pub lambda_star: f64,
    pub cv_error: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl OutcomeLassoFit {
    pub fn model_size(&self) -> usize {
        self.alpha_hat.iter().chain(&self.beta_hat).filter(|v| **v != 0.0).count()
    }
}

/// LASSO of `y` on `[D X]` (treatments penalized like controls) with the
/// penalty chosen by `folds`-fold cross-validation. Columns are
/// standardized internally and coefficients returned on the original scale.
pub fn outcome_lasso(data: &Dataset, folds: usize, seed: u64) -> Result<OutcomeLassoFit> {
    let n = data.n();
    if folds < 2 || n < 2 * folds {
        return Err(CilError::InvalidParameter(format!("{folds} folds need at least {} rows, have {n}", 2 * folds)));
    }
    let (t, j) = (data.t(), data.j());
    let mut z = DMatrix::zeros(n, t + j);
    z.columns_mut(0, t).copy_from(data.d());
    z.columns_mut(t, j).copy_from(data.x());
    let mut scales = vec![1.0; t + j];
    for (k, mut col) in z.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (n as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            col /= sd;
            scales[k] = sd;
        }
    }
    let y = data.y();
    let lmax = lambda_max(&z, y);
    let lambdas = if lmax > 0.0 { lambda_grid(lmax, PATH_LEN, PATH_RATIO) } else { vec![0.0] };
    let opts = LassoOptions::default();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "cv-folds", 0));
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut sse = vec![0.0; lambdas.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let z_train = z.select_rows(&train);
        let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let path = lasso_path(&z_train, &y_train, Family::Gaussian, &lambdas, &opts)?;
        for (k, acc) in sse.iter_mut().enumerate() {
            let fit = &path.fits[k.min(path.fits.len() - 1)];
            for &i in &test {
                let pred = fit.intercept + z.row(i).transpose().dot(&fit.coef);
                *acc += (y[i] - pred).powi(2);
            }
        }
    }
    let cv_error: Vec<f64> = sse.iter().map(|s| s / n as f64).collect();
    let mut best = 0;
    for k in 1..cv_error.len() {
        if cv_error[k] < cv_error[best] {
            best = k;
        }
    }
    let path = lasso_path(&z, y, Family::Gaussian, &lambdas[..=best], &opts)?;
    let fit = path.fits.last().ok_or(CilError::EmptyModelSet)?;
    let coef: Vec<f64> = fit.coef.iter().zip(&scales).map(|(c, s)| c / s).collect();
    Ok(OutcomeLassoFit {
        alpha_hat: coef[..t].to_vec(),
        beta_hat: coef[t..].to_vec(),
        lambda_star: lambdas[best],
        cv_error,
        lambdas,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlFit {
    pub estimate: TreatmentEstimate,
    /// Union of controls selected by the outcome and treatment regressions.
    pub selected_controls: Vec<usize>,
    /// Controls selected by each first-stage regression: outcome first,
    /// then one entry per treatment.
    pub stage_one: Vec<Vec<usize>>,
}

/// Double selection: BIC-tuned LASSO of `y` on `X` and of each treatment on
/// `X`, then OLS of `y` on all treatments, the union of selected controls
/// and an intercept, with HC1 standard errors and normal intervals.
pub fn dml_double_selection(data: &Dataset) -> Result<DmlFit> {
    let x = data.x();
    let mut stage_one = Vec::with_capacity(1 + data.t());
    let selected = |coef: &DVector<f64>| -> Vec<usize> { (0..coef.len()).filter(|&k| coef[k] != 0.0).collect() };
    if data.j() > 0 {
        stage_one.push(selected(lasso_path_bic(x, data.y(), Family::Gaussian)?.coef()));
        for t in 0..data.t() {
            let family = if data.is_binary_treatment(t) { Family::Binomial } else { Family::Gaussian };
            let d = data.d().column(t).into_owned();
            stage_one.push(selected(lasso_path_bic(x, &d, family)?.coef()));
        }
    } else {
        stage_one = vec![Vec::new(); 1 + data.t()];
    }
    let mut union: Vec<usize> = stage_one.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    let cols = 1 + data.t() + union.len();
    if cols >= data.n() {
        return Err(CilError::RankDeficient(format!(
            "{} selected controls leave no residual degrees of freedom with n={}; tighten the selection",
            union.len(),
            data.n()
        )));
    }
    let fit = ols(&design(data, &union), data.y())?;
    Ok(DmlFit { estimate: summarize(&fit, data.t(), true)?, selected_controls: union, stage_one })
}
