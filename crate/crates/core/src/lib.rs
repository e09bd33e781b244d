//! Bayesian model averaging for treatment effects with learned prior
//! inclusion probabilities for the controls.

pub mod baselines;
pub mod data;
pub mod error;
pub mod features;
pub mod inference;
pub mod io;
pub mod learn;
pub mod marginal;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod search;
pub mod sim;

pub use baselines::{dml_double_selection, oracle_ols, outcome_lasso, DmlFit, OutcomeLassoFit, TreatmentEstimate};
pub use data::{
    validate_dataset, Dataset, ModelIndicator, ModelPrior, PhiMode, PriorSpec, RawDataset, ThetaVector,
};
pub use error::{CilError, Result};
pub use features::{extract_features, lasso_fit, lasso_path_bic, ridge_min_norm, Family, LassoFit};
pub use inference::{bma_estimate, treatment_deviation, DeviationSummary, Interval, TreatmentInference};
pub use io::{read_dataset_csv, write_dataset_csv, ColumnRoles};
pub use learn::{ep_gradient, ep_objective, eb_gradient, eb_objective, fit_theta, LearnConfig, LearnMode, ThetaFitResult};
pub use marginal::{enumerate_posterior, ExactPosterior, MarginalEvaluator, MarginalResult};
pub use prior::{inclusion_probability, FeatureDesign, FeatureMatrix, FeatureMethod, PriorTable};
pub use search::{inclusion_probabilities, sample_models, GibbsSampler, PosteriorSampleSet, SamplerConfig};
pub use sim::{run_experiment, ExperimentReport, Method, Scenario, SimConfig, SimDesign};
