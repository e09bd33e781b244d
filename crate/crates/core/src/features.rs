//! Treatment-control association features: LASSO regressions with a
//! BIC-selected penalty (gaussian or binomial) and minimum-norm ridge
//! regression through the pseudoinverse.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{CilError, Result};
use crate::prior::{FeatureMatrix, FeatureMethod};

/// Likelihood family of a regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Binomial,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        }
    }
}

/// Convergence controls for coordinate descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoOptions {
    /// Stop when no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// IRLS iterations for the binomial family.
    pub max_outer: usize,
    /// Record the penalized objective after every sweep (outer iteration
    /// for the binomial family).
    pub record_trace: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
            max_outer: 50,
            record_trace: false,
        }
    }
}

/// Penalized fit with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn nonzeros(&self) -> usize {
        self.coef.iter().filter(|v| **v != 0.0).count()
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut eta = x * &self.coef;
        eta.add_scalar_mut(self.intercept);
        eta
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn ln1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_response(d: &DVector<f64>, family: Family) -> Result<()> {
    if family == Family::Binomial {
        if let Some((row, &value)) = d.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(CilError::NonBinaryResponse { row, value });
        }
    }
    Ok(())
}

fn check_inputs(x: &DMatrix<f64>, d: &DVector<f64>, family: Family, lambda: f64) -> Result<()> {
    if x.nrows() != d.len() {
        return Err(CilError::DimensionMismatch(format!(
            "design has {} rows, response {}",
            x.nrows(),
            d.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CilError::InvalidParameter(format!("lambda must be nonnegative, got {lambda}")));
    }
    check_response(d, family)
}

fn warn_if_unstandardized(x: &DMatrix<f64>) {
    let n = x.nrows() as f64;
    let off = x.column_iter().position(|c| {
        let mean = c.sum() / n;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        mean.abs() > 1e-6 || (var.sqrt() - 1.0).abs() > 1e-6
    });
    if let Some(col) = off {
        log::warn!("lasso design column {col} is not standardized; penalties act on raw scales");
    }
}

/// Smallest penalty at which every coefficient is zero:
/// `max_j |x_j' (d - mean(d))| / n`, for either family.
pub fn lambda_max(x: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let n = d.len() as f64;
    let centered = d.add_scalar(-d.mean());
    x.column_iter()
        .map(|c| (c.dot(&centered) / n).abs())
        .fold(0.0, f64::max)
}

/// Penalized objective: `(1/2n) RSS + lambda |v|_1` (gaussian) or
/// `-(1/n) loglik + lambda |v|_1` (binomial).
pub fn lasso_objective(x: &DMatrix<f64>, d: &DVector<f64>, family: Family, fit: &LassoFit) -> f64 {
    let n = d.len() as f64;
    let eta = fit.linear_predictor(x);
    let loss = match family {
        Family::Gaussian => (d - &eta).norm_squared() / (2.0 * n),
        Family::Binomial => -binomial_loglik(d, &eta) / n,
    };
    loss + fit.lambda * fit.coef.lp_norm(1)
}

fn binomial_loglik(d: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    d.iter().zip(eta.iter()).map(|(y, e)| y * e - ln1p_exp(*e)).sum()
}

/// Weighted least-squares coordinate descent:
/// minimizes `(1/2n) sum w_i (z_i - b0 - x_i v)^2 + lambda |v|_1`.
struct WeightedCd<'a> {
    x: &'a DMatrix<f64>,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
}

impl WeightedCd<'_> {
    /// Runs sweeps from `(b0, v)`; `trace` receives the objective per sweep.
    /// Returns (sweeps used, converged).
    fn run(
        &self,
        z: &DVector<f64>,
        w: Option<&DVector<f64>>,
        b0: &mut f64,
        v: &mut DVector<f64>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> (usize, bool) {
        let x = self.x;
        let n = z.len() as f64;
        let p = x.ncols();
        let ones = DVector::from_element(z.len(), 1.0);
        let w = w.unwrap_or(&ones);
        let mut xw = x.clone();
        for mut col in xw.column_iter_mut() {
            col.component_mul_assign(w);
        }
        let w_sum = w.sum();
        // Covariance updates: with g = X'W r / n and s = 1'W r, a change of
        // v_j moves g by a column of X'WX and s by a single entry of X'W1.
        let gram = xw.tr_mul(x) / n;
        let col_w = xw.row_sum().transpose() / n;
        let col_sq: Vec<f64> = (0..p).map(|j| gram[(j, j)]).collect();
        let mut r = z - x * &*v;
        r.add_scalar_mut(-*b0);
        let mut g = xw.tr_mul(&r) / n;
        let mut s = r.dot(w);

        // Sweeps alternate between all coordinates and the current nonzero
        // ones; convergence is only declared after a full sweep.
        let mut full = true;
        let mut active: Vec<usize> = Vec::new();
        for sweep in 1..=self.max_sweeps {
            let mut max_change: f64 = 0.0;
            let shift = s / w_sum;
            if shift != 0.0 {
                *b0 += shift;
                g.axpy(-shift, &col_w, 1.0);
                s = 0.0;
                max_change = shift.abs();
            }
            let coords: Vec<usize> = if full { (0..p).collect() } else { active.clone() };
            for j in coords {
                if col_sq[j] <= 0.0 {
                    continue;
                }
                let old = v[j];
                let new = soft_threshold(g[j] + old * col_sq[j], self.lambda) / col_sq[j];
                if new != old {
                    let delta = new - old;
                    g.axpy(-delta, &gram.column(j), 1.0);
                    s -= delta * col_w[j] * n;
                    v[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                let mut r = z - x * &*v;
                r.add_scalar_mut(-*b0);
                let loss = r.iter().zip(w.iter()).map(|(a, b)| b * a * a).sum::<f64>() / (2.0 * n);
                t.push(loss + self.lambda * v.lp_norm(1));
            }
            if max_change < self.tol {
                if full {
                    return (sweep, true);
                }
                full = true;
            } else if full {
                active = (0..p).filter(|&j| v[j] != 0.0).collect();
                full = active.is_empty();
            }
        }
        (self.max_sweeps, false)
    }
}

/// Fits a LASSO regression of `d` on `x` at penalty `lambda` by cyclic
/// coordinate descent; the binomial family wraps it in an IRLS loop.
/// Non-convergence is reported through [`LassoFit::converged`].
pub fn lasso_fit(x: &DMatrix<f64>, d: &DVector<f64>, family: Family, lambda: f64) -> Result<LassoFit> {
    warn_if_unstandardized(x);
    lasso_fit_with(x, d, family, lambda, None, &LassoOptions::default())
}

/// [`lasso_fit`] with explicit options and an optional warm start.
pub fn lasso_fit_with(
    x: &DMatrix<f64>,
    d: &DVector<f64>,
    family: Family,
    lambda: f64,
    warm: Option<&LassoFit>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    check_inputs(x, d, family, lambda)?;
    let p = x.ncols();
    let (mut b0, mut v) = match warm {
        Some(f) if f.coef.len() == p => (f.intercept, f.coef.clone()),
        _ => {
            let mean = d.mean();
            let b0 = match family {
                Family::Gaussian => mean,
                Family::Binomial => logit(mean.clamp(1e-10, 1.0 - 1e-10)),
            };
            (b0, DVector::zeros(p))
        }
    };
    let cd = WeightedCd { x, lambda, tol: opts.tol, max_sweeps: opts.max_sweeps };
    let mut trace = Vec::new();

    match family {
        Family::Gaussian => {
            let (sweeps, converged) =
                cd.run(d, None, &mut b0, &mut v, opts.record_trace.then_some(&mut trace));
            Ok(LassoFit { intercept: b0, coef: v, lambda, converged, sweeps, objective_trace: trace })
        }
        Family::Binomial => {
            let mut fit = LassoFit { intercept: b0, coef: v, lambda, converged: false, sweeps: 0, objective_trace: trace };
            let mut obj = lasso_objective(x, d, family, &fit);
            if opts.record_trace {
                fit.objective_trace.push(obj);
            }
            for _ in 0..opts.max_outer {
                let eta = fit.linear_predictor(x);
                let mut w = DVector::zeros(d.len());
                let mut z = DVector::zeros(d.len());
                for i in 0..d.len() {
                    let pr = sigmoid(eta[i]);
                    let wi = (pr * (1.0 - pr)).max(1e-5);
                    w[i] = wi;
                    z[i] = eta[i] + (d[i] - pr) / wi;
                }
                let (mut nb0, mut nv) = (fit.intercept, fit.coef.clone());
                let (sweeps, _) = cd.run(&z, Some(&w), &mut nb0, &mut nv, None);
                fit.sweeps += sweeps;

                // Step halving keeps the penalized likelihood monotone.
                let mut step = 1.0;
                let mut candidate;
                loop {
                    candidate = LassoFit {
                        intercept: fit.intercept + step * (nb0 - fit.intercept),
                        coef: &fit.coef + (&nv - &fit.coef) * step,
                        ..fit.clone()
                    };
                    let new_obj = lasso_objective(x, d, family, &candidate);
                    if new_obj <= obj + 1e-12 * obj.abs().max(1.0) || step < 1e-6 {
                        obj = new_obj.min(obj);
                        break;
                    }
                    step *= 0.5;
                }
                let change = (candidate.intercept - fit.intercept)
                    .abs()
                    .max((&candidate.coef - &fit.coef).amax());
                fit.intercept = candidate.intercept;
                fit.coef = candidate.coef;
                if opts.record_trace {
                    fit.objective_trace.push(lasso_objective(x, d, family, &fit));
                }
                if change < opts.tol {
                    fit.converged = true;
                    break;
                }
            }
            Ok(fit)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::prior::sigmoid(x)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `len` penalties log-spaced from `lambda_max` down to `lambda_max * ratio`.
pub fn lambda_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    (0..len)
        .map(|k| lambda_max * ratio.powf(k as f64 / (len - 1) as f64))
        .collect()
}

/// Warm-started fits along a decreasing penalty sequence.
#[derive(Debug, Clone)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<LassoFit>,
    pub bic: Vec<f64>,
}

/// Bayesian information criterion `-2 loglik + k log n`, where `k` counts
/// nonzero coefficients, the intercept, and the variance (gaussian).
pub fn lasso_bic(x: &DMatrix<f64>, d: &DVector<f64>, family: Family, fit: &LassoFit) -> f64 {
    let n = d.len() as f64;
    let eta = fit.linear_predictor(x);
    let nz = fit.nonzeros() as f64;
    match family {
        Family::Gaussian => {
            let rss = (d - &eta).norm_squared().max(f64::MIN_POSITIVE);
            let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0);
            -2.0 * loglik + (nz + 2.0) * n.ln()
        }
        Family::Binomial => -2.0 * binomial_loglik(d, &eta) + (nz + 1.0) * n.ln(),
    }
}

fn null_deviance_ratio(x: &DMatrix<f64>, d: &DVector<f64>, family: Family, fit: &LassoFit) -> f64 {
    let eta = fit.linear_predictor(x);
    match family {
        Family::Gaussian => {
            let tss = d.add_scalar(-d.mean()).norm_squared();
            if tss == 0.0 {
                return 1.0;
            }
            1.0 - (d - &eta).norm_squared() / tss
        }
        Family::Binomial => {
            let m = d.mean().clamp(1e-12, 1.0 - 1e-12);
            let null = d.iter().map(|y| y * m.ln() + (1.0 - y) * (1.0 - m).ln()).sum::<f64>();
            if null == 0.0 {
                return 1.0;
            }
            1.0 - binomial_loglik(d, &eta) / null
        }
    }
}

/// Fits the path over `lambdas` (which should decrease). The path stops
/// early once the model saturates: `n - 2` active coefficients or 99.9% of
/// the null deviance explained.
pub fn lasso_path(
    x: &DMatrix<f64>,
    d: &DVector<f64>,
    family: Family,
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<LassoPath> {
    let n = d.len();
    let mut path = LassoPath { lambdas: Vec::new(), fits: Vec::new(), bic: Vec::new() };
    let mut warm: Option<LassoFit> = None;
    for &lambda in lambdas {
        let fit = lasso_fit_with(x, d, family, lambda, warm.as_ref(), opts)?;
        if !fit.converged {
            log::warn!("lasso did not converge at lambda={lambda:.3e} after {} sweeps", fit.sweeps);
        }
        let saturated = fit.nonzeros() + 2 >= n || null_deviance_ratio(x, d, family, &fit) >= 0.999;
        path.bic.push(lasso_bic(x, d, family, &fit));
        path.lambdas.push(lambda);
        path.fits.push(fit.clone());
        warm = Some(fit);
        if saturated {
            break;
        }
    }
    Ok(path)
}

/// Default path length and smallest-to-largest penalty ratio.
pub const PATH_LEN: usize = 100;
pub const PATH_RATIO: f64 = 1e-4;

/// Fit selected from the penalty path by BIC.
#[derive(Debug, Clone)]
pub struct BicSelection {
    pub fit: LassoFit,
    pub lambda_star: f64,
    pub bic: f64,
    /// Position of the selected fit on the path.
    pub index: usize,
    pub path: LassoPath,
}

impl BicSelection {
    pub fn coef(&self) -> &DVector<f64> {
        &self.fit.coef
    }
}

/// Fits a 100-point path from `lambda_max` to `lambda_max * 1e-4` with warm
/// starts and returns the BIC-minimizing fit (ties go to the larger penalty).
pub fn lasso_path_bic(x: &DMatrix<f64>, d: &DVector<f64>, family: Family) -> Result<BicSelection> {
    check_inputs(x, d, family, 0.0)?;
    warn_if_unstandardized(x);
    let lmax = lambda_max(x, d);
    let path = if lmax > 0.0 {
        lasso_path(x, d, family, &lambda_grid(lmax, PATH_LEN, PATH_RATIO), &LassoOptions::default())?
    } else {
        // Response orthogonal to every column: the intercept-only fit is exact.
        let opts = LassoOptions { max_sweeps: 0, max_outer: 0, ..LassoOptions::default() };
        let mut fit = lasso_fit_with(x, d, family, 0.0, None, &opts)?;
        fit.converged = true;
        let bic = lasso_bic(x, d, family, &fit);
        LassoPath { lambdas: vec![0.0], fits: vec![fit], bic: vec![bic] }
    };
    let mut best = 0;
    for k in 1..path.bic.len() {
        if path.bic[k] < path.bic[best] {
            best = k;
        }
    }
    Ok(BicSelection {
        fit: path.fits[best].clone(),
        lambda_star: path.lambdas[best],
        bic: path.bic[best],
        index: best,
        path,
    })
}

/// Minimum-norm least squares `X^+ d` through the singular value
/// decomposition, dropping singular values below `max(n, J) eps sigma_max`.
pub fn ridge_min_norm(x: &DMatrix<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != d.len() {
        return Err(CilError::DimensionMismatch(format!(
            "design has {} rows, response {}",
            x.nrows(),
            d.len()
        )));
    }
    let p = x.ncols();
    if p == 0 || x.nrows() == 0 {
        return Ok(DVector::zeros(p));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let cutoff = x.nrows().max(p) as f64 * f64::EPSILON * smax;
    let mut w = DVector::zeros(p);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let coef = u.column(i).dot(d) / s;
            w.axpy(coef, &v_t.row(i).transpose(), 1.0);
        }
    }
    Ok(w)
}

/// Builds `f[j, t] = |w[j, t]|` from a regression of each treatment on the
/// controls. `families` defaults to binomial for 0/1 treatments and
/// gaussian otherwise.
pub fn extract_features(data: &Dataset, method: FeatureMethod, families: Option<&[Family]>) -> Result<FeatureMatrix> {
    let t = data.t();
    let families: Vec<Family> = match families {
        Some(f) if f.len() != t => {
            return Err(CilError::DimensionMismatch(format!("{} families for {t} treatments", f.len())))
        }
        Some(f) => f.to_vec(),
        None => (0..t)
            .map(|k| if data.is_binary_treatment(k) { Family::Binomial } else { Family::Gaussian })
            .collect(),
    };
    match method {
        FeatureMethod::LassoBic => {
            let fits: Vec<Result<BicSelection>> = (0..t)
                .into_par_iter()
                .map(|k| lasso_path_bic(data.x(), &data.d().column(k).into_owned(), families[k]))
                .collect();
            let mut values = DMatrix::zeros(data.j(), t);
            let mut lambdas = Vec::with_capacity(t);
            for (k, fit) in fits.into_iter().enumerate() {
                let sel = fit?;
                values.column_mut(k).copy_from(&sel.coef().abs());
                lambdas.push(Some(sel.lambda_star));
            }
            FeatureMatrix::with_lambdas(values, method, families, lambdas)
        }
        FeatureMethod::MinNormRidge => {
            if let Some(k) = (0..t).find(|&k| data.is_binary_treatment(k) || families[k] == Family::Binomial) {
                return Err(CilError::RidgeOnBinary(data.treatment_names()[k].clone()));
            }
            let mut xc = data.x().clone();
            for mut col in xc.column_iter_mut() {
                let m = col.mean();
                col.add_scalar_mut(-m);
            }
            let mut values = DMatrix::zeros(data.j(), t);
            for k in 0..t {
                let dk = data.d().column(k).into_owned();
                let dc = dk.add_scalar(-dk.mean());
                values.column_mut(k).copy_from(&ridge_min_norm(&xc, &dc)?.abs());
            }
            FeatureMatrix::new(values, method, vec![Family::Gaussian; t])
        }
    }
}
