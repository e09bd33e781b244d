//! Systematic-scan Gibbs sampling over treatment and control inclusion
//! indicators, with a cache of log marginal likelihoods.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, ModelIndicator, PriorSpec, ThetaVector};
use crate::error::{CilError, Result};
use crate::marginal::{log_sum_exp, MarginalEvaluator};
use crate::prior::{sigmoid, FeatureMatrix, PriorTable};
use crate::rng;

/// Gibbs run lengths, counted in full sweeps over all coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Total sweeps including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Independent chains, merged at the end.
    pub chains: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { iterations: 10_000, burn_in: 1_000, seed: 0, chains: 1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(CilError::InvalidParameter(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.chains == 0 {
            return Err(CilError::InvalidParameter("at least one chain is required".into()));
        }
        Ok(())
    }
}

/// Visit count and cached log marginal likelihood of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelRecord {
    pub count: u64,
    pub log_ml: f64,
}

/// Models visited by the sampler (the set `M`), with visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    pub models: BTreeMap<ModelIndicator, ModelRecord>,
    pub theta_used: ThetaVector,
    pub total_iterations: usize,
    pub burn_in: usize,
    pub rng_seed: u64,
}

/// Log marginal likelihoods keyed by model, shared between runs on the same
/// data and prior hyperparameters.
pub type LogMlCache = HashMap<ModelIndicator, f64>;

impl PosteriorSampleSet {
    pub fn len(&self) -> usize {
        self.models.len()
    }
    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
    pub fn t(&self) -> usize {
        self.models.keys().next().map_or(0, |m| m.t())
    }
    pub fn j(&self) -> usize {
        self.models.keys().next().map_or(0, |m| m.j())
    }
    pub fn total_count(&self) -> u64 {
        self.models.values().map(|r| r.count).sum()
    }

    /// Adds counts and unions the model sets. Order-independent.
    pub fn merge(&self, other: &PosteriorSampleSet) -> Result<PosteriorSampleSet> {
        if !self.is_empty() && !other.is_empty() && (self.t() != other.t() || self.j() != other.j()) {
            return Err(CilError::DimensionMismatch("sample sets cover different problems".into()));
        }
        let mut models = self.models.clone();
        for (m, r) in &other.models {
            models
                .entry(m.clone())
                .and_modify(|e| e.count += r.count)
                .or_insert(*r);
        }
        let theta_used = if self.theta_used == other.theta_used {
            self.theta_used.clone()
        } else {
            log::debug!("merging sample sets drawn under different theta; keeping the first");
            self.theta_used.clone()
        };
        Ok(PosteriorSampleSet {
            models,
            theta_used,
            total_iterations: self.total_iterations + other.total_iterations,
            burn_in: self.burn_in + other.burn_in,
            rng_seed: self.rng_seed.min(other.rng_seed),
        })
    }

    /// Writes `<delta-bits> <gamma-bits> <count> <log_ml>` per model after a
    /// commented header.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# theta0 {}", self.theta_used.theta0());
        let _ = writeln!(out, "# theta {}", join(self.theta_used.theta()));
        let _ = writeln!(out, "# groups {}", join(self.theta_used.group_map()));
        let _ = writeln!(out, "# iterations {} burn_in {} seed {}", self.total_iterations, self.burn_in, self.rng_seed);
        for (m, r) in &self.models {
            let _ = writeln!(out, "{} {} {} {}", m.delta_bits(), m.gamma_bits(), r.count, r.log_ml);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<PosteriorSampleSet> {
        let bad = |msg: String| CilError::InvalidParameter(format!("sample file: {msg}"));
        let mut theta0 = 0.0;
        let mut theta: Vec<f64> = Vec::new();
        let mut groups: Vec<usize> = Vec::new();
        let (mut iterations, mut burn_in, mut seed) = (0usize, 0usize, 0u64);
        let mut models = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match parts.next() {
                    Some("theta0") => theta0 = parse(parts.next(), lineno)?,
                    Some("theta") => theta = parts.map(|p| parse(Some(p), lineno)).collect::<Result<_>>()?,
                    Some("groups") => groups = parts.map(|p| parse(Some(p), lineno)).collect::<Result<_>>()?,
                    Some("iterations") => {
                        let f: Vec<&str> = parts.collect();
                        if f.len() != 5 {
                            return Err(bad(format!("malformed run line {}", lineno + 1)));
                        }
                        iterations = parse(Some(f[0]), lineno)?;
                        burn_in = parse(Some(f[2]), lineno)?;
                        seed = parse(Some(f[4]), lineno)?;
                    }
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("line {} has {} fields, expected 4", lineno + 1, f.len())));
            }
            let model = ModelIndicator::parse_bits(f[0], f[1])?;
            let count = parse(Some(f[2]), lineno)?;
            let log_ml = parse(Some(f[3]), lineno)?;
            models.insert(model, ModelRecord { count, log_ml });
        }
        let theta_used = ThetaVector::new(theta0, theta, groups)?;
        Ok(PosteriorSampleSet { models, theta_used, total_iterations: iterations, burn_in, rng_seed: seed })
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse<T: std::str::FromStr>(field: Option<&str>, lineno: usize) -> Result<T> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CilError::InvalidParameter(format!("sample file: bad value on line {}", lineno + 1)))
}

fn cached_log_ml(evaluator: &MarginalEvaluator, cache: &mut LogMlCache, model: &ModelIndicator) -> f64 {
    if let Some(v) = cache.get(model) {
        return *v;
    }
    let v = evaluator.log_ml(model);
    cache.insert(model.clone(), v);
    v
}

/// Runs one chain from the empty model, filling `cache` as it goes.
fn run_chain(
    evaluator: &MarginalEvaluator,
    table: &PriorTable,
    iterations: usize,
    burn_in: usize,
    rng: &mut rng::StreamRng,
    cache: &mut LogMlCache,
) -> Result<BTreeMap<ModelIndicator, ModelRecord>> {
    let (t, j) = (evaluator.t(), evaluator.j());
    let mut state = ModelIndicator::empty(t, j);
    let mut current = cached_log_ml(evaluator, cache, &state);
    if !current.is_finite() {
        return Err(CilError::Numerical("the empty model has no finite marginal likelihood".into()));
    }
    let mut visits: BTreeMap<ModelIndicator, ModelRecord> = BTreeMap::new();
    for sweep in 0..iterations {
        for c in 0..t + j {
            let was_in = state.get(c);
            state.set(c, !was_in);
            let other = cached_log_ml(evaluator, cache, &state);
            state.set(c, was_in);
            let (lml_in, lml_out) = if was_in { (current, other) } else { (other, current) };
            let log_odds = lml_in - lml_out + table.conditional_log_odds(&state, c);
            let p_in = sigmoid(log_odds);
            let u: f64 = rng.random();
            let now_in = u < p_in;
            if now_in != was_in {
                state.set(c, now_in);
                current = other;
            }
        }
        if sweep >= burn_in {
            visits
                .entry(state.clone())
                .and_modify(|r| r.count += 1)
                .or_insert(ModelRecord { count: 1, log_ml: current });
        }
    }
    Ok(visits)
}

/// Gibbs sampler bound to one dataset and prior specification; keeps the
/// log marginal likelihood cache across runs.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    evaluator: MarginalEvaluator,
    cache: LogMlCache,
}

impl GibbsSampler {
    pub fn new(data: &Dataset, spec: &PriorSpec) -> Result<Self> {
        Ok(Self { evaluator: MarginalEvaluator::new(data, spec)?, cache: LogMlCache::new() })
    }

    pub fn evaluator(&self) -> &MarginalEvaluator {
        &self.evaluator
    }
    pub fn cache(&self) -> &LogMlCache {
        &self.cache
    }
    pub fn cache_mut(&mut self) -> &mut LogMlCache {
        &mut self.cache
    }

    /// Samples models at `theta`. Chains run in parallel from streams
    /// `(seed, "gibbs", chain)`; the result does not depend on thread count.
    pub fn run(
        &mut self,
        theta: &ThetaVector,
        features: &FeatureMatrix,
        config: &SamplerConfig,
    ) -> Result<PosteriorSampleSet> {
        config.validate()?;
        let table = PriorTable::new(theta, features, self.evaluator.spec())?;
        let evaluator = &self.evaluator;
        let base_cache = &self.cache;
        let outcomes: Vec<Result<(BTreeMap<ModelIndicator, ModelRecord>, LogMlCache)>> = (0..config.chains)
            .into_par_iter()
            .map(|chain| {
                let mut rng = rng::stream(config.seed, "gibbs", chain as u64);
                let mut cache = base_cache.clone();
                let visits = run_chain(evaluator, &table, config.iterations, config.burn_in, &mut rng, &mut cache)?;
                Ok((visits, cache))
            })
            .collect();
        let mut merged: Option<PosteriorSampleSet> = None;
        for outcome in outcomes {
            let (visits, cache) = outcome?;
            self.cache.extend(cache);
            let set = PosteriorSampleSet {
                models: visits,
                theta_used: theta.clone(),
                total_iterations: config.iterations,
                burn_in: config.burn_in,
                rng_seed: config.seed,
            };
            merged = Some(match merged {
                None => set,
                Some(m) => m.merge(&set)?,
            });
        }
        merged.ok_or(CilError::EmptyModelSet)
    }
}

/// Runs the Gibbs sampler at `theta`.
pub fn sample_models(
    data: &Dataset,
    theta: &ThetaVector,
    features: &FeatureMatrix,
    spec: &PriorSpec,
    config: &SamplerConfig,
) -> Result<PosteriorSampleSet> {
    GibbsSampler::new(data, spec)?.run(theta, features, config)
}

/// Visit-frequency inclusion probabilities `(s, q)`.
pub fn inclusion_probabilities(samples: &PosteriorSampleSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let total = samples.total_count();
    if samples.is_empty() || total == 0 {
        return Err(CilError::EmptyModelSet);
    }
    let weights: Vec<f64> = samples.models.values().map(|r| r.count as f64 / total as f64).collect();
    Ok(weighted_inclusion(samples.models.keys(), &weights, samples.t(), samples.j()))
}

fn weighted_inclusion<'a>(
    models: impl Iterator<Item = &'a ModelIndicator>,
    weights: &[f64],
    t: usize,
    j: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; t];
    let mut q = vec![0.0; j];
    for (m, w) in models.zip(weights) {
        for k in m.included_treatments() {
            s[k] += w;
        }
        for k in m.included_controls() {
            q[k] += w;
        }
    }
    (s, q)
}

/// Posterior weights of the models in `samples` under `table`, restricted
/// to the sampled set and normalized. Returns the weights (in map order)
/// and the log normalizer.
pub fn restricted_posterior(samples: &PosteriorSampleSet, table: &PriorTable) -> Result<(Vec<f64>, f64)> {
    if samples.is_empty() {
        return Err(CilError::EmptyModelSet);
    }
    let mut log_joint = Vec::with_capacity(samples.len());
    for (m, r) in &samples.models {
        log_joint.push(r.log_ml + table.log_prior(m)?);
    }
    let norm = log_sum_exp(&log_joint);
    if !norm.is_finite() {
        return Err(CilError::EmptyModelSet);
    }
    Ok((log_joint.iter().map(|v| (v - norm).exp()).collect(), norm))
}

/// Inclusion probabilities under `theta_new`, reweighting the sampled
/// models by their exact restricted posterior.
pub fn reweight_inclusion(
    samples: &PosteriorSampleSet,
    theta_new: &ThetaVector,
    features: &FeatureMatrix,
    spec: &PriorSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let table = PriorTable::new(theta_new, features, spec)?;
    let (weights, _) = restricted_posterior(samples, &table)?;
    Ok(weighted_inclusion(samples.models.keys(), &weights, samples.t(), samples.j()))
}
