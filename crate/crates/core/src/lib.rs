//! Epistemic uncertainty quantification for over-parameterized regression
//! networks: procedural-noise-correcting (PNC) predictors, NTK kernel
//! evaluation, closed-form shifted kernel ridge regression, and low-budget
//! confidence-interval constructors (batching, cheap bootstrap,
//! infinitesimal jackknife), plus an experiment harness.

pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod krr;
pub mod network;
pub mod ntk;
pub mod pnc;
pub mod rng;

pub use data::{
    generate_synthetic, ground_truth, load_csv, Dataset, Family, SyntheticSpec,
};
pub use error::{Error, Result};
pub use harness::{
    run_coverage, run_mse, CoverageReport, DataSource, ExperimentConfig, Method, MseReport,
};
pub use inference::{
    batching_ci, cheap_bootstrap_ci, clopper_pearson, ij_ci, normal_quantile, t_quantile,
    CiMethod, ConfidenceInterval, Df, IjEstimate, PncFitSpec,
};
pub use krr::{ensemble_closed_form, solve, KrrSolution, Shift};
pub use network::{init_he, NetConfig, TrainConfig, WideNet};
pub use ntk::{gram, GramMatrix, NtkKernel};
pub use pnc::{deep_ensemble, fit_pnc, DeepEnsemble, MeanInitSpec, PncPredictor};
pub use rng::RngStream;
