//! Quasi-Newton maximization with a dense inverse-Hessian BFGS update and
//! backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{CilError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsConfig {
    pub max_iter: usize,
    /// Stop once the largest absolute gradient entry falls below this.
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-6, armijo_c1: 1e-4, shrink: 0.5, max_backtracks: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<(usize, f64)>,
}

impl BfgsResult {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Maximizes an objective given a closure returning its value and gradient.
pub fn bfgs_maximize<F>(mut value_and_grad: F, x0: &[f64], config: &BfgsConfig) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    // Work with the minimization of -f throughout.
    let mut eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = value_and_grad(x.as_slice())?;
        Ok((-v, DVector::from_iterator(dim, g.into_iter().map(|gi| -gi))))
    };
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, mut gx) = eval(&x)?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(CilError::Numerical("objective is not finite at the starting point".into()));
    }
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut trace = vec![(0, -fx)];
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;
    let mut first = true;

    while iterations < config.max_iter {
        if gx.amax() < config.grad_tol {
            converged = true;
            break;
        }
        let mut p = -(&h * &gx);
        let mut slope = gx.dot(&p);
        if slope >= 0.0 || !slope.is_finite() {
            h.fill_with_identity();
            p = -gx.clone();
            slope = gx.dot(&p);
        }
        let mut step = if first { (1.0 / gx.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial = &x + &p * step;
            let (ft, gt) = eval(&trial)?;
            if ft.is_finite() && gt.iter().all(|g| g.is_finite()) && ft <= fx + config.armijo_c1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= config.shrink;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            line_search_failed = true;
            break;
        };
        iterations += 1;
        let s = &x_new - &x;
        let y = &g_new - &gx;
        let ys = y.dot(&s);
        if ys > 1e-12 * s.norm() * y.norm() && ys > 0.0 {
            if first {
                h.fill_with_identity();
                h *= ys / y.norm_squared();
            }
            let rho = 1.0 / ys;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        trace.push((iterations, -fx));
    }
    if !converged && gx.amax() < config.grad_tol {
        converged = true;
    }
    Ok(BfgsResult {
        x: x.iter().copied().collect(),
        value: -fx,
        gradient: gx.iter().map(|g| -g).collect(),
        iterations,
        converged,
        line_search_failed,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let a = [1.0, 2.0];
        let res = bfgs_maximize(
            |x| {
                let v = -((x[0] - a[0]).powi(2) + (x[1] - a[1]).powi(2));
                Ok((v, vec![-2.0 * (x[0] - a[0]), -2.0 * (x[1] - a[1])]))
            },
            &[0.0, 0.0],
            &BfgsConfig::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-8 && (res.x[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock() {
        let res = bfgs_maximize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
                let ga = 2.0 * (1.0 - a) + 400.0 * a * (b - a * a);
                let gb = -200.0 * (b - a * a);
                Ok((v, vec![ga, gb]))
            },
            &[-1.2, 1.0],
            &BfgsConfig::default(),
        )
        .unwrap();
        assert!(res.iterations <= 200);
        assert!((res.x[0] - 1.0).abs() < 1e-5 && (res.x[1] - 1.0).abs() < 1e-5, "{:?}", res.x);
        for w in res.trace.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn non_finite_start_errors() {
        let r = bfgs_maximize(|_| Ok((f64::NAN, vec![0.0])), &[0.0], &BfgsConfig::default());
        assert!(r.is_err());
    }
}
