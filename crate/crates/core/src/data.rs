//! Shared data model: datasets, model indicators, prior settings and the
//! CIL hyperparameter vector.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{CilError, Result};

const STD_MEAN_TOL: f64 = 1e-10;
const STD_SD_TOL: f64 = 1e-8;

/// Unvalidated input blocks. `standardized` records whether the controls
/// were already centered and scaled by an earlier validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub y: DVector<f64>,
    pub d: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub treatment_names: Option<Vec<String>>,
    pub control_names: Option<Vec<String>>,
    pub standardized: bool,
}

impl RawDataset {
    pub fn new(y: DVector<f64>, d: DMatrix<f64>, x: DMatrix<f64>) -> Self {
        Self {
            y,
            d,
            x,
            treatment_names: None,
            control_names: None,
            standardized: false,
        }
    }
}

/// Outcome, treatments and controls sharing `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DMatrix<f64>,
    x: DMatrix<f64>,
    treatment_names: Vec<String>,
    control_names: Vec<String>,
    standardized: bool,
}

impl Dataset {
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn n(&self) -> usize {
        self.y.len()
    }
    /// Number of treatments.
    pub fn t(&self) -> usize {
        self.d.ncols()
    }
    /// Number of controls.
    pub fn j(&self) -> usize {
        self.x.ncols()
    }
    pub fn treatment_names(&self) -> &[String] {
        &self.treatment_names
    }
    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }
    pub fn standardized(&self) -> bool {
        self.standardized
    }

    /// Whether treatment `t` only takes the values 0 and 1.
    pub fn is_binary_treatment(&self, t: usize) -> bool {
        self.d.column(t).iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn into_raw(self) -> RawDataset {
        RawDataset {
            y: self.y,
            d: self.d,
            x: self.x,
            treatment_names: Some(self.treatment_names),
            control_names: Some(self.control_names),
            standardized: self.standardized,
        }
    }

    /// Returns a copy with columns appended to the control block. New columns
    /// are standardized when the existing controls are.
    pub fn with_extra_controls(&self, extra: &DMatrix<f64>, names: Vec<String>) -> Result<Dataset> {
        if extra.nrows() != self.n() || extra.ncols() != names.len() {
            return Err(CilError::DimensionMismatch(format!(
                "extra controls are {}x{} with {} names, dataset has n={}",
                extra.nrows(),
                extra.ncols(),
                names.len(),
                self.n()
            )));
        }
        let mut extra = extra.clone();
        if self.standardized {
            standardize_columns(&mut extra)?;
        }
        let j = self.j();
        let mut x = DMatrix::zeros(self.n(), j + extra.ncols());
        x.columns_mut(0, j).copy_from(&self.x);
        x.columns_mut(j, extra.ncols()).copy_from(&extra);
        let mut control_names = self.control_names.clone();
        control_names.extend(names);
        validate_dataset(
            RawDataset {
                y: self.y.clone(),
                d: self.d.clone(),
                x,
                treatment_names: Some(self.treatment_names.clone()),
                control_names: Some(control_names),
                standardized: self.standardized,
            },
            false,
        )
    }
}

fn check_finite(block: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(CilError::NonFinite { block, row: r, col: c });
            }
        }
    }
    Ok(())
}

fn column_mean_sd(col: nalgebra::DVectorView<'_, f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centers and scales every column to sample mean 0 and sample sd 1.
pub(crate) fn standardize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    let mut constant = Vec::new();
    for c in 0..x.ncols() {
        let (mean, sd) = column_mean_sd(x.column(c));
        if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
            constant.push(c);
            continue;
        }
        x.column_mut(c).iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    if constant.is_empty() {
        Ok(())
    } else {
        Err(CilError::ConstantColumns(constant))
    }
}

/// Validates raw arrays into a [`Dataset`], optionally standardizing the
/// controls. Treatments are never rescaled.
pub fn validate_dataset(raw: RawDataset, standardize: bool) -> Result<Dataset> {
    let RawDataset {
        y,
        d,
        mut x,
        treatment_names,
        control_names,
        standardized,
    } = raw;
    let n = y.len();
    if n < 2 {
        return Err(CilError::DimensionMismatch(format!("need at least 2 rows, got {n}")));
    }
    if d.nrows() != n || x.nrows() != n {
        return Err(CilError::DimensionMismatch(format!(
            "outcome has {n} rows, treatments {} and controls {}",
            d.nrows(),
            x.nrows()
        )));
    }
    if d.ncols() == 0 {
        return Err(CilError::DimensionMismatch("at least one treatment is required".into()));
    }
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(CilError::NonFinite { block: "outcome", row: i, col: 0 });
        }
    }
    check_finite("treatments", &d)?;
    check_finite("controls", &x)?;

    let treatment_names = match treatment_names {
        Some(names) if names.len() != d.ncols() => {
            return Err(CilError::DimensionMismatch(format!(
                "{} treatment names for {} treatments",
                names.len(),
                d.ncols()
            )))
        }
        Some(names) => names,
        None => (1..=d.ncols()).map(|t| format!("d{t}")).collect(),
    };
    let control_names = match control_names {
        Some(names) if names.len() != x.ncols() => {
            return Err(CilError::DimensionMismatch(format!(
                "{} control names for {} controls",
                names.len(),
                x.ncols()
            )))
        }
        Some(names) => names,
        None => (1..=x.ncols()).map(|j| format!("x{j}")).collect(),
    };

    if standardized {
        let mut bad = Vec::new();
        for c in 0..x.ncols() {
            let (mean, sd) = column_mean_sd(x.column(c));
            if mean.abs() > STD_MEAN_TOL || (sd - 1.0).abs() > STD_SD_TOL {
                bad.push(c);
            }
        }
        if !bad.is_empty() {
            return Err(CilError::InvalidParameter(format!(
                "controls flagged as standardized but columns {bad:?} are not"
            )));
        }
    } else if standardize {
        standardize_columns(&mut x)?;
    }

    Ok(Dataset {
        y,
        d,
        x,
        treatment_names,
        control_names,
        standardized: standardized || standardize,
    })
}

/// Inclusion bits for treatments (`delta`) followed by controls (`gamma`).
///
/// Bits are packed most-significant first so the derived ordering is the
/// lexicographic order of the concatenated bit string.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelIndicator {
    words: Vec<u64>,
    t: u32,
    j: u32,
}

impl ModelIndicator {
    pub fn empty(t: usize, j: usize) -> Self {
        Self {
            words: vec![0; (t + j).div_ceil(64)],
            t: t as u32,
            j: j as u32,
        }
    }

    pub fn full(t: usize, j: usize) -> Self {
        let mut m = Self::empty(t, j);
        for c in 0..t + j {
            m.set(c, true);
        }
        m
    }

    pub fn from_bits(delta: &[bool], gamma: &[bool]) -> Self {
        let mut m = Self::empty(delta.len(), gamma.len());
        for (c, &b) in delta.iter().chain(gamma).enumerate() {
            m.set(c, b);
        }
        m
    }

    /// Model whose coordinate `c` equals bit `c` of `index`.
    pub fn from_index(t: usize, j: usize, index: u64) -> Self {
        let mut m = Self::empty(t, j);
        for c in 0..t + j {
            m.set(c, c < 64 && (index >> c) & 1 == 1);
        }
        m
    }

    pub fn t(&self) -> usize {
        self.t as usize
    }
    pub fn j(&self) -> usize {
        self.j as usize
    }
    /// Total number of coordinates, `T + J`.
    pub fn len(&self) -> usize {
        (self.t + self.j) as usize
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, c: usize) -> bool {
        debug_assert!(c < self.len());
        (self.words[c / 64] >> (63 - c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, c: usize, value: bool) {
        debug_assert!(c < self.len());
        let mask = 1u64 << (63 - c % 64);
        if value {
            self.words[c / 64] |= mask;
        } else {
            self.words[c / 64] &= !mask;
        }
    }

    pub fn flipped(&self, c: usize) -> Self {
        let mut m = self.clone();
        m.set(c, !self.get(c));
        m
    }

    pub fn delta(&self, t: usize) -> bool {
        self.get(t)
    }
    pub fn gamma(&self, j: usize) -> bool {
        self.get(self.t() + j)
    }
    pub fn set_delta(&mut self, t: usize, value: bool) {
        self.set(t, value)
    }
    pub fn set_gamma(&mut self, j: usize, value: bool) {
        let t = self.t();
        self.set(t + j, value)
    }

    pub fn included_treatments(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.t()).filter(|&t| self.delta(t))
    }
    pub fn included_controls(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.j()).filter(|&j| self.gamma(j))
    }

    pub fn n_treatments(&self) -> usize {
        self.included_treatments().count()
    }
    pub fn n_controls(&self) -> usize {
        self.included_controls().count()
    }
    pub fn size(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn delta_bits(&self) -> String {
        (0..self.t()).map(|t| if self.delta(t) { '1' } else { '0' }).collect()
    }
    pub fn gamma_bits(&self) -> String {
        (0..self.j()).map(|j| if self.gamma(j) { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(delta: &str, gamma: &str) -> Result<Self> {
        let parse = |s: &str| -> Result<Vec<bool>> {
            if s == "-" {
                return Ok(Vec::new());
            }
            s.chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(CilError::InvalidParameter(format!("invalid inclusion bit '{other}'"))),
                })
                .collect()
        };
        Ok(Self::from_bits(&parse(delta)?, &parse(gamma)?))
    }
}

impl fmt::Debug for ModelIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model({}|{})", self.delta_bits(), self.gamma_bits())
    }
}

/// Prior family over the inclusion indicators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelPrior {
    /// Controls included independently with the learned probabilities.
    Cil,
    /// Exchangeable Beta-Binomial prior over the controls.
    BetaBinomial { a: f64, b: f64 },
    /// Every model equally likely.
    Uniform,
}

/// Treatment of the residual variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiMode {
    /// Unknown, with the inverse-gamma prior of the [`PriorSpec`].
    InverseGamma,
    /// Fixed at the given value.
    Known(f64),
}

/// Variance multiplier for the (nearly flat) intercept prior.
pub const INTERCEPT_PRIOR_SCALE: f64 = 1e6;

/// Fixed hyperparameters of the outcome model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// pMOM dispersion.
    pub tau: f64,
    /// Bound on the CIL inclusion probabilities; `None` means `1/(J^2+1)`.
    pub rho: Option<f64>,
    pub a_phi: f64,
    pub b_phi: f64,
    /// Prior inclusion probability of each treatment.
    pub treat_incl: f64,
    pub model_prior: ModelPrior,
    pub include_intercept: bool,
    pub phi: PhiMode,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            tau: 0.348,
            rho: None,
            a_phi: 0.01,
            b_phi: 0.01,
            treat_incl: 0.5,
            model_prior: ModelPrior::Cil,
            include_intercept: true,
            phi: PhiMode::InverseGamma,
        }
    }
}

impl PriorSpec {
    pub fn with_model_prior(mut self, prior: ModelPrior) -> Self {
        self.model_prior = prior;
        self
    }

    /// `rho` for a problem with `j` controls. The default `1/(J^2+1)` reaches
    /// 1/2 at `J <= 1`, where it is capped at 1/4.
    pub fn rho_for(&self, j: usize) -> f64 {
        self.rho.unwrap_or_else(|| {
            let r = 1.0 / ((j * j) as f64 + 1.0);
            r.min(0.25)
        })
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        let bad = |msg: String| Err(CilError::InvalidParameter(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let rho = self.rho_for(j);
        if !(rho > 0.0 && rho < 0.5) {
            return bad(format!("rho must lie in (0, 1/2), got {rho}"));
        }
        if !(self.a_phi > 0.0 && self.b_phi > 0.0) {
            return bad(format!("a_phi and b_phi must be positive, got {} and {}", self.a_phi, self.b_phi));
        }
        if !(self.treat_incl > 0.0 && self.treat_incl < 1.0) {
            return bad(format!("treat_incl must lie in (0, 1), got {}", self.treat_incl));
        }
        if let ModelPrior::BetaBinomial { a, b } = self.model_prior {
            if !(a > 0.0 && b > 0.0) {
                return bad(format!("Beta-Binomial parameters must be positive, got ({a}, {b})"));
            }
        }
        if let PhiMode::Known(phi) = self.phi {
            if !(phi > 0.0 && phi.is_finite()) {
                return bad(format!("known phi must be positive, got {phi}"));
            }
        }
        Ok(())
    }
}

/// CIL hyperparameters `(theta0, theta_1..theta_G)` and the map from
/// treatments to groups sharing a coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    theta0: f64,
    theta: Vec<f64>,
    group_map: Vec<usize>,
}

impl ThetaVector {
    pub fn new(theta0: f64, theta: Vec<f64>, group_map: Vec<usize>) -> Result<Self> {
        if group_map.is_empty() {
            return Err(CilError::InvalidParameter("group map must cover at least one treatment".into()));
        }
        let g = theta.len();
        let mut seen = vec![false; g];
        for (t, &grp) in group_map.iter().enumerate() {
            if grp >= g {
                return Err(CilError::InvalidParameter(format!(
                    "treatment {t} maps to group {grp} but only {g} groups exist"
                )));
            }
            seen[grp] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(CilError::InvalidParameter(format!("group {empty} has no treatments")));
        }
        if !theta0.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(CilError::InvalidParameter("theta entries must be finite".into()));
        }
        Ok(Self { theta0, theta, group_map })
    }

    /// Ungrouped theta (one coefficient per treatment).
    pub fn ungrouped(theta0: f64, theta: Vec<f64>) -> Result<Self> {
        let map = (0..theta.len()).collect();
        Self::new(theta0, theta, map)
    }

    pub fn zeros(t: usize) -> Self {
        Self {
            theta0: 0.0,
            theta: vec![0.0; t],
            group_map: (0..t).collect(),
        }
    }

    pub fn zeros_grouped(group_map: Vec<usize>) -> Result<Self> {
        let g = group_map.iter().max().map_or(0, |m| m + 1);
        Self::new(0.0, vec![0.0; g], group_map)
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn group_map(&self) -> &[usize] {
        &self.group_map
    }
    pub fn n_groups(&self) -> usize {
        self.theta.len()
    }
    pub fn n_treatments(&self) -> usize {
        self.group_map.len()
    }

    /// Flat parameter vector `[theta0, theta_1, .., theta_G]`.
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.theta0).chain(self.theta.iter().copied()).collect()
    }

    /// Same grouping, new parameter values.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.theta.len() + 1 {
            return Err(CilError::DimensionMismatch(format!(
                "expected {} theta parameters, got {}",
                self.theta.len() + 1,
                params.len()
            )));
        }
        Self::new(params[0], params[1..].to_vec(), self.group_map.clone())
    }

    pub fn is_zero(&self) -> bool {
        self.theta0 == 0.0 && self.theta.iter().all(|&v| v == 0.0)
    }
}
