//! Synthetic designs, artificial-control augmentation and a replicate
//! harness comparing estimators by RMSE relative to oracle least squares.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::baselines::{dml_double_selection, oracle_ols, outcome_lasso};
use crate::data::{validate_dataset, Dataset, ModelPrior, PriorSpec, RawDataset, ThetaVector};
use crate::error::{CilError, Result};
use crate::features::extract_features;
use crate::inference::{bma_estimate_with_levels, TreatmentInference};
use crate::learn::{fit_theta_with_sampler, GridConfig, LearnConfig, LearnMode};
use crate::optim::BfgsConfig;
use crate::prior::{FeatureMatrix, FeatureMethod};
use crate::rng;
use crate::search::{inclusion_probabilities, GibbsSampler, PosteriorSampleSet, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignKind {
    /// Gaussian treatment driven by `num_active_controls` controls, of which
    /// `confounding_overlap` also drive the outcome.
    SingleTreatment,
    /// Up to five Gaussian treatments sharing parents among the controls.
    MultiTreatment,
    /// Binary treatment, optionally augmented with artificial controls that
    /// track the treatment but not the outcome.
    Augmented,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::SingleTreatment => "single",
            DesignKind::MultiTreatment => "multi",
            DesignKind::Augmented => "augmented",
        }
    }
}

/// One cell of an experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub kind: DesignKind,
    pub n: usize,
    pub j: usize,
    pub t: usize,
    pub num_active_controls: usize,
    pub confounding_overlap: usize,
    pub alpha_true: Vec<f64>,
    /// Artificial controls appended per treatment (augmented designs).
    pub augment_count: usize,
    /// Cells with the same key draw identical base datasets.
    pub seed_key: u64,
    pub replicates: usize,
}

impl SimDesign {
    pub fn single(n: usize, j: usize, active: usize, overlap: usize, alpha: f64) -> Self {
        Self {
            kind: DesignKind::SingleTreatment,
            n,
            j,
            t: 1,
            num_active_controls: active,
            confounding_overlap: overlap,
            alpha_true: vec![alpha],
            augment_count: 0,
            seed_key: 0,
            replicates: 50,
        }
    }

    pub fn multi(n: usize, j: usize, t: usize) -> Self {
        Self {
            kind: DesignKind::MultiTreatment,
            n,
            j,
            t,
            num_active_controls: 20,
            confounding_overlap: 0,
            alpha_true: vec![1.0; t],
            augment_count: 0,
            seed_key: 0,
            replicates: 25,
        }
    }

    pub fn augmented(n: usize, j: usize, active: usize, overlap: usize, alpha: f64, augment_count: usize) -> Self {
        Self {
            kind: DesignKind::Augmented,
            n,
            j,
            t: 1,
            num_active_controls: active,
            confounding_overlap: overlap,
            alpha_true: vec![alpha],
            augment_count,
            seed_key: 0,
            replicates: 10,
        }
    }

    pub fn with_seed_key(mut self, key: u64) -> Self {
        self.seed_key = key;
        self
    }
    pub fn with_replicates(mut self, r: usize) -> Self {
        self.replicates = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CilError::InvalidParameter(m));
        if self.alpha_true.len() != self.t {
            return bad(format!("alpha has {} entries for T={}", self.alpha_true.len(), self.t));
        }
        if self.confounding_overlap > self.num_active_controls {
            return bad(format!(
                "overlap {} exceeds the {} active controls",
                self.confounding_overlap, self.num_active_controls
            ));
        }
        match self.kind {
            DesignKind::SingleTreatment | DesignKind::Augmented => {
                let needed = 2 * self.num_active_controls - self.confounding_overlap;
                if needed > self.j {
                    return bad(format!("the design needs {needed} controls, J={}", self.j));
                }
                if self.t != 1 {
                    return bad("single-treatment designs have T=1".into());
                }
            }
            DesignKind::MultiTreatment => {
                if self.t == 0 {
                    return bad("at least one treatment is required".into());
                }
                if !(2..=5).contains(&self.t) {
                    log::warn!("multi-treatment design with T={} outside 2..5", self.t);
                }
                let needed = (20 + 4 * self.t).max(4 * self.t);
                if needed > self.j {
                    return bad(format!("the design needs {needed} controls, J={}", self.j));
                }
            }
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        Ok(())
    }
}

/// Data-generating truth of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub alpha: Vec<f64>,
    /// Controls with nonzero outcome coefficient.
    pub gamma: Vec<bool>,
    /// Parents of each treatment among the controls.
    pub treatment_parents: Vec<Vec<usize>>,
}

fn normal_matrix(n: usize, p: usize, rng: &mut rng::StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

fn finish(
    x: DMatrix<f64>,
    d: DMatrix<f64>,
    gamma: &[bool],
    alpha: &[f64],
    parents: Vec<Vec<usize>>,
    rng: &mut rng::StreamRng,
) -> Result<(Dataset, Truth)> {
    let n = x.nrows();
    let mut y = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    for (t, a) in alpha.iter().enumerate() {
        y.axpy(*a, &d.column(t), 1.0);
    }
    for (j, active) in gamma.iter().enumerate() {
        if *active {
            y += x.column(j);
        }
    }
    let data = validate_dataset(RawDataset::new(y, d, x), true)?;
    Ok((data, Truth { alpha: alpha.to_vec(), gamma: gamma.to_vec(), treatment_parents: parents }))
}

/// Outcome parents are controls `0..k`; treatment parents are the first
/// `overlap` of those plus `k - overlap` further controls.
fn single_parents(design: &SimDesign) -> (Vec<bool>, Vec<usize>) {
    let k = design.num_active_controls;
    let mut gamma = vec![false; design.j];
    gamma[..k].iter_mut().for_each(|g| *g = true);
    let parents: Vec<usize> = (0..design.confounding_overlap).chain(k..2 * k - design.confounding_overlap).collect();
    (gamma, parents)
}

/// Single Gaussian treatment `d = X w + e` with unit coefficients, and
/// `y = alpha d + X beta + e`.
pub fn generate_single_treatment(design: &SimDesign, seed: u64) -> Result<(Dataset, Truth)> {
    design.validate()?;
    if design.kind != DesignKind::SingleTreatment {
        return Err(CilError::InvalidParameter("expected a single-treatment design".into()));
    }
    let mut rng = rng::stream(seed, "sim-data", 0);
    let x = normal_matrix(design.n, design.j, &mut rng);
    let (gamma, parents) = single_parents(design);
    let mut d = DMatrix::from_fn(design.n, 1, |_, _| StandardNormal.sample(&mut rng));
    for &j in &parents {
        d.column_mut(0).axpy(1.0, &x.column(j), 1.0);
    }
    finish(x, d, &gamma, &design.alpha_true, vec![parents], &mut rng)
}

/// Outcome parents are controls `0..20`; treatment `t` depends on block
/// `4t..4t+4` and on `20..20+4(t+1)`.
pub fn generate_multi_treatment(design: &SimDesign, seed: u64) -> Result<(Dataset, Truth)> {
    design.validate()?;
    if design.kind != DesignKind::MultiTreatment {
        return Err(CilError::InvalidParameter("expected a multi-treatment design".into()));
    }
    let mut rng = rng::stream(seed, "sim-data", 0);
    let x = normal_matrix(design.n, design.j, &mut rng);
    let mut gamma = vec![false; design.j];
    gamma[..20].iter_mut().for_each(|g| *g = true);
    let mut d = normal_matrix(design.n, design.t, &mut rng);
    let mut parents = Vec::with_capacity(design.t);
    for t in 0..design.t {
        let p: Vec<usize> = (4 * t..4 * t + 4).chain(20..20 + 4 * (t + 1)).collect();
        for &j in &p {
            d.column_mut(t).axpy(1.0, &x.column(j), 1.0);
        }
        parents.push(p);
    }
    finish(x, d, &gamma, &design.alpha_true, parents, &mut rng)
}

/// Binary treatment `d = 1[X w + e > 0]` on the single-treatment parent
/// pattern; artificial controls are appended separately.
pub fn generate_binary_treatment(design: &SimDesign, seed: u64) -> Result<(Dataset, Truth)> {
    design.validate()?;
    let mut rng = rng::stream(seed, "sim-data", 0);
    let x = normal_matrix(design.n, design.j, &mut rng);
    let (gamma, parents) = single_parents(design);
    let mut latent = DVector::from_fn(design.n, |_, _| StandardNormal.sample(&mut rng));
    for &j in &parents {
        latent += x.column(j);
    }
    let d = DMatrix::from_fn(design.n, 1, |i, _| f64::from(latent[i] > 0.0));
    finish(x, d, &gamma, &design.alpha_true, vec![parents], &mut rng)
}

/// Appends `counts[t]` controls per treatment with entries drawn from
/// `N(1.5, 1)` where `d_t = 1` and `N(-1.5, 1)` where `d_t = 0`.
pub fn augment_artificial_controls(data: &Dataset, counts: &[usize], seed: u64) -> Result<Dataset> {
    if counts.len() != data.t() {
        return Err(CilError::DimensionMismatch(format!("{} counts for {} treatments", counts.len(), data.t())));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(data.clone());
    }
    let mut rng = rng::stream(seed, "augment", 0);
    let mut extra = DMatrix::zeros(data.n(), total);
    let mut names = Vec::with_capacity(total);
    let mut col = 0;
    for (t, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        if !data.is_binary_treatment(t) {
            return Err(CilError::InvalidParameter(format!(
                "treatment {} is not binary",
                data.treatment_names()[t]
            )));
        }
        for k in 0..count {
            for i in 0..data.n() {
                let shift = if data.d()[(i, t)] == 1.0 { 1.5 } else { -1.5 };
                let z: f64 = StandardNormal.sample(&mut rng);
                extra[(i, col)] = shift + z;
            }
            names.push(format!("z_{}_{}", data.treatment_names()[t], k + 1));
            col += 1;
        }
    }
    data.with_extra_controls(&extra, names)
}

/// Generates replicate data for any design kind; augmented designs append
/// `augment_count` artificial controls.
pub fn generate(design: &SimDesign, seed: u64) -> Result<(Dataset, Truth)> {
    match design.kind {
        DesignKind::SingleTreatment => generate_single_treatment(design, seed),
        DesignKind::MultiTreatment => generate_multi_treatment(design, seed),
        DesignKind::Augmented => {
            let (data, mut truth) = generate_binary_treatment(design, seed)?;
            let augmented = augment_artificial_controls(&data, &[design.augment_count], rng::derive_seed(seed, "augment", 0))?;
            truth.gamma.resize(augmented.j(), false);
            Ok((augmented, truth))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Oracle,
    CilEp,
    CilEb,
    Bma,
    Dml,
    Lasso,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Oracle, Method::CilEp, Method::CilEb, Method::Bma, Method::Dml, Method::Lasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::CilEp => "cil-ep",
            Method::CilEb => "cil-eb",
            Method::Bma => "bma",
            Method::Dml => "dml",
            Method::Lasso => "lasso",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Estimation settings shared by every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub spec: PriorSpec,
    pub sampler: SamplerConfig,
    pub grid: GridConfig,
    pub bfgs: BfgsConfig,
    pub n_draws: usize,
    pub folds: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            spec: PriorSpec::default(),
            sampler: SamplerConfig { iterations: 2000, burn_in: 200, seed: 0, chains: 1 },
            grid: GridConfig::default(),
            bfgs: BfgsConfig::default(),
            n_draws: 1000,
            folds: 10,
        }
    }
}

/// Result of one method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub alpha_hat: Vec<f64>,
    /// Treatments plus controls in the selected model.
    pub model_size: f64,
    pub selected: Vec<bool>,
    /// Width of the 95% interval per treatment, where the method gives one.
    pub interval_width: Option<Vec<f64>>,
    pub theta: Option<ThetaVector>,
}

fn bayes_outcome(inf: &TreatmentInference, samples: &PosteriorSampleSet) -> Result<MethodOutcome> {
    let (s, q) = inclusion_probabilities(samples)?;
    let size = s.iter().chain(&q).filter(|p| **p > 0.5).count() as f64;
    let widths = (0..inf.alpha_hat.len())
        .map(|t| inf.interval(t, 0.95).map_or(f64::NAN, |i| i.upper - i.lower))
        .collect();
    Ok(MethodOutcome {
        alpha_hat: inf.alpha_hat.clone(),
        model_size: size,
        selected: s.iter().map(|p| *p > 0.5).collect(),
        interval_width: Some(widths),
        theta: Some(samples.theta_used.clone()),
    })
}

/// Runs `methods` on one dataset. Per-method failures are returned as
/// error strings; the elapsed seconds include any work shared between the
/// two CIL variants.
pub fn run_methods(
    data: &Dataset,
    truth: &Truth,
    methods: &[Method],
    config: &SimConfig,
    seed: u64,
) -> Vec<(Method, std::result::Result<MethodOutcome, String>, f64)> {
    let mut out = Vec::with_capacity(methods.len());
    let sampler_cfg = |tag: &str| SamplerConfig { seed: rng::derive_seed(seed, tag, 0), ..config.sampler.clone() };
    let levels = [0.95];

    let wants_ep = methods.contains(&Method::CilEp);
    let wants_eb = methods.contains(&Method::CilEb);
    let mut cil: Option<(std::result::Result<(Option<MethodOutcome>, Option<MethodOutcome>), String>, f64)> = None;
    if wants_ep || wants_eb {
        let start = Instant::now();
        let run = || -> Result<(Option<MethodOutcome>, Option<MethodOutcome>)> {
            let spec = PriorSpec { model_prior: ModelPrior::Cil, ..config.spec.clone() };
            let features = extract_features(data, FeatureMethod::LassoBic, None)?;
            let mut sampler = GibbsSampler::new(data, &spec)?;
            let learn = LearnConfig {
                mode: if wants_eb { LearnMode::Full } else { LearnMode::EpOnly },
                sampler: sampler_cfg("cil-learn"),
                grid: config.grid.clone(),
                bfgs: config.bfgs.clone(),
                group_map: None,
                refresh: false,
            };
            let fit = fit_theta_with_sampler(&mut sampler, data, &spec, &features, &learn)?;
            let ep = if wants_ep {
                let samples = match &fit.ep_samples {
                    Some(s) => s.clone(),
                    None => sampler.run(&fit.theta_ep, &features, &sampler_cfg("cil-ep-final"))?,
                };
                let inf = bma_estimate_with_levels(&samples, data, &spec, config.n_draws, rng::derive_seed(seed, "bma-ep", 0), &levels)?;
                Some(bayes_outcome(&inf, &samples)?)
            } else {
                None
            };
            let eb = match (&fit.theta_eb, wants_eb) {
                (Some(theta), true) => {
                    let samples = sampler.run(theta, &features, &sampler_cfg("cil-eb-final"))?;
                    let inf = bma_estimate_with_levels(&samples, data, &spec, config.n_draws, rng::derive_seed(seed, "bma-eb", 0), &levels)?;
                    Some(bayes_outcome(&inf, &samples)?)
                }
                _ => None,
            };
            Ok((ep, eb))
        };
        cil = Some((run().map_err(|e| e.to_string()), start.elapsed().as_secs_f64()));
    }

    for &method in methods {
        let start = Instant::now();
        let result: std::result::Result<MethodOutcome, String> = match method {
            Method::Oracle => oracle_ols(data, &truth.gamma).map_err(|e| e.to_string()).map(|est| MethodOutcome {
                selected: est.p_values.iter().map(|p| *p < 0.05).collect(),
                model_size: (data.t() + truth.gamma.iter().filter(|g| **g).count()) as f64,
                interval_width: Some(est.ci_lower.iter().zip(&est.ci_upper).map(|(l, u)| u - l).collect()),
                alpha_hat: est.alpha_hat,
                theta: None,
            }),
            Method::CilEp | Method::CilEb => {
                let (res, _) = cil.as_ref().expect("CIL stage runs when requested");
                match res {
                    Ok((ep, eb)) => {
                        let pick = if method == Method::CilEp { ep } else { eb };
                        pick.clone().ok_or_else(|| "estimate unavailable".to_string())
                    }
                    Err(e) => Err(e.clone()),
                }
            }
            Method::Bma => (|| -> Result<MethodOutcome> {
                let spec = config.spec.clone().with_model_prior(ModelPrior::BetaBinomial { a: 1.0, b: 1.0 });
                let features = FeatureMatrix::zeros(data.j(), data.t());
                let samples = GibbsSampler::new(data, &spec)?.run(&ThetaVector::zeros(data.t()), &features, &sampler_cfg("bma"))?;
                let inf = bma_estimate_with_levels(&samples, data, &spec, config.n_draws, rng::derive_seed(seed, "bma-plain", 0), &levels)?;
                bayes_outcome(&inf, &samples)
            })()
            .map_err(|e| e.to_string()),
            Method::Dml => dml_double_selection(data).map_err(|e| e.to_string()).map(|fit| MethodOutcome {
                selected: fit.estimate.p_values.iter().map(|p| *p < 0.05).collect(),
                model_size: (data.t() + fit.selected_controls.len()) as f64,
                interval_width: Some(fit.estimate.ci_lower.iter().zip(&fit.estimate.ci_upper).map(|(l, u)| u - l).collect()),
                alpha_hat: fit.estimate.alpha_hat,
                theta: None,
            }),
            Method::Lasso => outcome_lasso(data, config.folds, rng::derive_seed(seed, "lasso-cv", 0))
                .map_err(|e| e.to_string())
                .map(|fit| MethodOutcome {
                    selected: fit.alpha_hat.iter().map(|a| *a != 0.0).collect(),
                    model_size: fit.model_size() as f64,
                    interval_width: None,
                    alpha_hat: fit.alpha_hat,
                    theta: None,
                }),
        };
        let mut secs = start.elapsed().as_secs_f64();
        if matches!(method, Method::CilEp | Method::CilEb) {
            secs += cil.as_ref().map_or(0.0, |c| c.1);
        }
        out.push((method, result, secs));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub cell: usize,
    pub replicate: usize,
    pub method: Method,
    pub outcome: std::result::Result<MethodOutcome, String>,
    /// `||alpha_hat - alpha||^2 / T`, absent on failure.
    pub sq_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: usize,
    pub method: Method,
    pub rmse: f64,
    pub rmse_ratio: f64,
    pub model_size_ratio: f64,
    /// Per-treatment frequency of selecting the treatment.
    pub selection_freq: Vec<f64>,
    pub mean_interval_width: Option<f64>,
    pub failures: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<SimDesign>,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub records: Vec<ReplicateRecord>,
    pub summaries: Vec<CellSummary>,
    pub wall_clock_seconds: f64,
}

/// Seed of replicate `r` of a cell: depends only on the master seed, the
/// cell's seed key and `r`.
pub fn replicate_seed(master: u64, design: &SimDesign, replicate: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(master, "sim-cell", design.seed_key), "replicate", replicate as u64)
}

/// Runs every method on every replicate of every cell. Replicates run on a
/// pool of `workers` threads (all cores when `None`); results do not depend
/// on the worker count.
pub fn run_experiment(
    cells: &[SimDesign],
    methods: &[Method],
    config: &SimConfig,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<ExperimentReport> {
    if methods.is_empty() {
        return Err(CilError::InvalidParameter("at least one method is required".into()));
    }
    for c in cells {
        c.validate()?;
    }
    let mut methods: Vec<Method> = methods.to_vec();
    if !methods.contains(&Method::Oracle) {
        methods.insert(0, Method::Oracle);
    }
    methods.sort();
    methods.dedup();
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, d)| (0..d.replicates).map(move |r| (c, r)))
        .collect();
    let start = Instant::now();
    let run_job = |&(c, r): &(usize, usize)| -> Vec<ReplicateRecord> {
        let design = &cells[c];
        let seed = replicate_seed(master_seed, design, r);
        match generate(design, seed) {
            Ok((data, truth)) => run_methods(&data, &truth, &methods, config, seed)
                .into_iter()
                .map(|(method, outcome, seconds)| {
                    let sq_error = outcome.as_ref().ok().map(|o| {
                        o.alpha_hat.iter().zip(&truth.alpha).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.alpha.len() as f64
                    });
                    ReplicateRecord { cell: c, replicate: r, method, outcome, sq_error, seconds }
                })
                .collect(),
            Err(e) => methods
                .iter()
                .map(|&method| ReplicateRecord {
                    cell: c,
                    replicate: r,
                    method,
                    outcome: Err(format!("data generation failed: {e}")),
                    sq_error: None,
                    seconds: 0.0,
                })
                .collect(),
        }
    };
    let nested: Vec<Vec<ReplicateRecord>> = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CilError::InvalidParameter(e.to_string()))?
            .install(|| jobs.par_iter().map(run_job).collect()),
        None => jobs.par_iter().map(run_job).collect(),
    };
    let records: Vec<ReplicateRecord> = nested.into_iter().flatten().collect();
    let summaries = summarize(cells, &methods, &records);
    Ok(ExperimentReport {
        cells: cells.to_vec(),
        methods,
        master_seed,
        records,
        summaries,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Aggregates per-replicate records into per-cell, per-method summaries.
pub fn summarize(cells: &[SimDesign], methods: &[Method], records: &[ReplicateRecord]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for (c, design) in cells.iter().enumerate() {
        let rmse_of = |m: Method| -> (f64, Vec<&ReplicateRecord>) {
            let rs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.cell == c && r.method == m).collect();
            let errs: Vec<f64> = rs.iter().filter_map(|r| r.sq_error).collect();
            let rmse = if errs.is_empty() { f64::NAN } else { (errs.iter().sum::<f64>() / errs.len() as f64).sqrt() };
            (rmse, rs)
        };
        let (oracle_rmse, oracle_records) = rmse_of(Method::Oracle);
        let oracle_size = mean(oracle_records.iter().filter_map(|r| r.outcome.as_ref().ok().map(|o| o.model_size)));
        for &m in methods {
            let (rmse, rs) = rmse_of(m);
            let ok: Vec<&MethodOutcome> = rs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let failures = rs.len() - ok.len();
            let selection_freq = (0..design.t)
                .map(|t| mean(ok.iter().map(|o| f64::from(u8::from(o.selected[t])))))
                .collect();
            let widths: Vec<f64> = ok
                .iter()
                .filter_map(|o| o.interval_width.as_ref())
                .flat_map(|w| w.iter().copied())
                .collect();
            out.push(CellSummary {
                cell: c,
                method: m,
                rmse,
                rmse_ratio: if m == Method::Oracle { 1.0 } else { rmse / oracle_rmse },
                model_size_ratio: mean(ok.iter().map(|o| o.model_size)) / oracle_size,
                selection_freq,
                mean_interval_width: if widths.is_empty() { None } else { Some(mean(widths.into_iter())) },
                failures,
                flagged: !rs.is_empty() && failures as f64 > 0.05 * rs.len() as f64,
            });
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

impl ExperimentReport {
    pub fn summary(&self, cell: usize, method: Method) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.cell == cell && s.method == method)
    }

    /// Long format: `cell,method,replicate,metric,value`. Timings are
    /// included only on request so that reruns are byte-identical.
    pub fn long_csv(&self, include_timing: bool) -> String {
        let mut out = String::from("cell,method,replicate,metric,value\n");
        for r in &self.records {
            let mut row = |metric: &str, value: String| {
                let _ = writeln!(out, "{},{},{},{},{}", r.cell, r.method.name(), r.replicate, metric, value);
            };
            match &r.outcome {
                Ok(o) => {
                    for (t, a) in o.alpha_hat.iter().enumerate() {
                        row(&format!("alpha_hat_{}", t + 1), a.to_string());
                    }
                    row("sq_error", r.sq_error.unwrap_or(f64::NAN).to_string());
                    row("model_size", o.model_size.to_string());
                    for (t, s) in o.selected.iter().enumerate() {
                        row(&format!("selected_{}", t + 1), u8::from(*s).to_string());
                    }
                    if let Some(w) = &o.interval_width {
                        for (t, v) in w.iter().enumerate() {
                            row(&format!("interval_width_{}", t + 1), v.to_string());
                        }
                    }
                }
                Err(e) => row("error", format!("\"{}\"", e.replace('"', "'"))),
            }
            if include_timing {
                row("seconds", r.seconds.to_string());
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "cell,kind,n,j,t,active,overlap,alpha,augment,method,rmse,rmse_ratio,model_size_ratio,selection_freq,mean_interval_width,failures,flagged\n",
        );
        for s in &self.summaries {
            let d = &self.cells[s.cell];
            let alpha = d.alpha_true.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
            let sel = s.selection_freq.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.cell,
                d.kind.name(),
                d.n,
                d.j,
                d.t,
                d.num_active_controls,
                d.confounding_overlap,
                alpha,
                d.augment_count,
                s.method.name(),
                s.rmse,
                s.rmse_ratio,
                s.model_size_ratio,
                sel,
                s.mean_interval_width.map_or(String::new(), |w| w.to_string()),
                s.failures,
                s.flagged
            );
        }
        out
    }

    /// `x,series,method,rmse_ratio` rows for external plotting. The x value
    /// is the overlap for single-treatment cells, T for multi-treatment
    /// cells and the artificial-control count for augmented cells; the
    /// series separates cells that share an x value.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("x,series,method,rmse_ratio\n");
        for s in &self.summaries {
            let d = &self.cells[s.cell];
            let (x, series) = match d.kind {
                DesignKind::SingleTreatment => (
                    d.confounding_overlap,
                    format!("n={} j={} active={} alpha={}", d.n, d.j, d.num_active_controls, d.alpha_true[0]),
                ),
                DesignKind::MultiTreatment => (d.t, format!("n={} j={}", d.n, d.j)),
                DesignKind::Augmented => (d.augment_count, format!("n={} j={}", d.n, d.j)),
            };
            let _ = writeln!(out, "{},{},{},{}", x, series, s.method.name(), s.rmse_ratio);
        }
        out
    }
}

/// Named experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// `n=100, J=49`, six active controls, overlap 0..6.
    Fig1,
    /// Overlap 0..6 at `(n, J+T)` of (50, 25), (100, 100), (100, 200).
    GrowingDim,
    /// `n=100, J+T=100` with 6, 12 and 18 active controls.
    Sparsity,
    /// `n=100, J=95`, `T` from 2 to 5.
    MultiTreat,
    /// `n=2000`, 20 controls, binary treatment, 0 and 50 artificial controls.
    Augmented,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Scenario> {
        match s {
            "fig1" => Some(Scenario::Fig1),
            "growing-dim" => Some(Scenario::GrowingDim),
            "sparsity" => Some(Scenario::Sparsity),
            "multitreat" => Some(Scenario::MultiTreat),
            "augmented" => Some(Scenario::Augmented),
            _ => None,
        }
    }

    /// Cells of the scenario with `replicates` each; `alpha` applies to the
    /// single-treatment scenarios.
    pub fn cells(self, alpha: f64, replicates: usize) -> Vec<SimDesign> {
        let overlap_grid = |n: usize, j: usize, k: usize, key_base: u64| -> Vec<SimDesign> {
            let step = (k / 6).max(1);
            (0..=k)
                .step_by(step)
                .enumerate()
                .map(|(i, o)| SimDesign::single(n, j, k, o, alpha).with_seed_key(key_base + i as u64).with_replicates(replicates))
                .collect()
        };
        match self {
            Scenario::Fig1 => overlap_grid(100, 49, 6, 0),
            Scenario::GrowingDim => [(50, 24), (100, 99), (100, 199)]
                .iter()
                .enumerate()
                .flat_map(|(i, &(n, j))| overlap_grid(n, j, 6, 100 * i as u64))
                .collect(),
            Scenario::Sparsity => [6, 12, 18]
                .iter()
                .enumerate()
                .flat_map(|(i, &k)| overlap_grid(100, 99, k, 100 * i as u64))
                .collect(),
            Scenario::MultiTreat => (2..=5)
                .map(|t| SimDesign::multi(100, 95, t).with_seed_key(t as u64).with_replicates(replicates))
                .collect(),
            Scenario::Augmented => [0, 50]
                .iter()
                .map(|&count| SimDesign::augmented(2000, 20, 6, 3, 0.1, count).with_replicates(replicates))
                .collect(),
        }
    }
}
