//! Run configuration read from a TOML file. Every section is optional and
//! every key has a default.

use cil_core::learn::GridConfig;
use cil_core::optim::BfgsConfig;
use cil_core::{ColumnRoles, LearnConfig, LearnMode, ModelPrior, PhiMode, PriorSpec, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub columns: Columns,
    pub features: Features,
    pub prior: Prior,
    pub mcmc: Mcmc,
    pub theta: Theta,
    pub inference: Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Columns {
    pub outcome: String,
    pub treatments: Vec<String>,
    /// Empty selects every remaining column.
    pub controls: Vec<String>,
}

impl Default for Columns {
    fn default() -> Self {
        Self { outcome: "y".into(), treatments: Vec::new(), controls: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    /// `lasso` or `ridge`.
    pub method: String,
    pub standardize: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self { method: "lasso".into(), standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prior {
    /// `cil`, `betabinomial` or `uniform`.
    pub model_prior: String,
    pub tau: f64,
    /// Omitted means `1/(J^2+1)`.
    pub rho: Option<f64>,
    pub a_phi: f64,
    pub b_phi: f64,
    pub treat_incl: f64,
    pub betabinomial_a: f64,
    pub betabinomial_b: f64,
    pub include_intercept: bool,
    /// Omitted means unknown with the inverse-gamma prior.
    pub known_phi: Option<f64>,
}

impl Default for Prior {
    fn default() -> Self {
        let spec = PriorSpec::default();
        Self {
            model_prior: "cil".into(),
            tau: spec.tau,
            rho: spec.rho,
            a_phi: spec.a_phi,
            b_phi: spec.b_phi,
            treat_incl: spec.treat_incl,
            betabinomial_a: 1.0,
            betabinomial_b: 1.0,
            include_intercept: spec.include_intercept,
            known_phi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mcmc {
    pub sweeps: usize,
    pub burn_in: usize,
    pub chains: usize,
}

impl Default for Mcmc {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self { sweeps: s.iterations, burn_in: s.burn_in, chains: s.chains }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theta {
    /// `eb` or `ep`.
    pub mode: String,
    pub grid_bound: i64,
    pub grid_max_evaluations: usize,
    pub bfgs_max_iter: usize,
    pub bfgs_grad_tol: f64,
    /// Treatment-to-group map; empty gives each treatment its own theta.
    pub groups: Vec<usize>,
    pub refresh: bool,
}

impl Default for Theta {
    fn default() -> Self {
        let g = GridConfig::default();
        let b = BfgsConfig::default();
        Self {
            mode: "eb".into(),
            grid_bound: g.bound,
            grid_max_evaluations: g.max_evaluations,
            bfgs_max_iter: b.max_iter,
            bfgs_grad_tol: b.grad_tol,
            groups: Vec::new(),
            refresh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inference {
    pub draws: usize,
    pub levels: Vec<f64>,
    pub write_draws: bool,
}

impl Default for Inference {
    fn default() -> Self {
        Self {
            draws: cil_core::inference::DEFAULT_DRAWS,
            levels: cil_core::inference::DEFAULT_LEVELS.to_vec(),
            write_draws: false,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles::new(self.columns.outcome.clone(), self.columns.treatments.clone(), self.columns.controls.clone())
    }

    pub fn prior_spec(&self) -> Result<PriorSpec, String> {
        let p = &self.prior;
        let model_prior = match p.model_prior.as_str() {
            "cil" => ModelPrior::Cil,
            "betabinomial" => ModelPrior::BetaBinomial { a: p.betabinomial_a, b: p.betabinomial_b },
            "uniform" => ModelPrior::Uniform,
            other => return Err(format!("unknown model prior '{other}' (expected cil, betabinomial or uniform)")),
        };
        Ok(PriorSpec {
            tau: p.tau,
            rho: p.rho,
            a_phi: p.a_phi,
            b_phi: p.b_phi,
            treat_incl: p.treat_incl,
            model_prior,
            include_intercept: p.include_intercept,
            phi: p.known_phi.map_or(PhiMode::InverseGamma, PhiMode::Known),
        })
    }

    pub fn feature_method(&self) -> Result<cil_core::FeatureMethod, String> {
        match self.features.method.as_str() {
            "lasso" => Ok(cil_core::FeatureMethod::LassoBic),
            "ridge" => Ok(cil_core::FeatureMethod::MinNormRidge),
            other => Err(format!("unknown feature method '{other}' (expected lasso or ridge)")),
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { iterations: self.mcmc.sweeps, burn_in: self.mcmc.burn_in, seed, chains: self.mcmc.chains }
    }

    pub fn learn_config(&self, seed: u64) -> Result<LearnConfig, String> {
        let mode = match self.theta.mode.as_str() {
            "eb" => LearnMode::Full,
            "ep" => LearnMode::EpOnly,
            other => return Err(format!("unknown theta mode '{other}' (expected ep or eb)")),
        };
        Ok(LearnConfig {
            mode,
            sampler: self.sampler(seed),
            grid: GridConfig { bound: self.theta.grid_bound, max_evaluations: self.theta.grid_max_evaluations },
            bfgs: BfgsConfig { max_iter: self.theta.bfgs_max_iter, grad_tol: self.theta.bfgs_grad_tol, ..BfgsConfig::default() },
            group_map: (!self.theta.groups.is_empty()).then(|| self.theta.groups.clone()),
            refresh: self.theta.refresh,
        })
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
