//! Second-order perturbation expansions of posterior moments in Bayesian
//! inverse problems, with reference-point refinement and sampling references.
//!
//! A prior of the form `x = x₀ + α Σⱼ xⱼ zⱼ` is pushed through a
//! [`ForwardModel`]; the expansions in [`expansion`] need only one set of
//! model derivatives at `x₀` and reuse it across all amplitudes `α`.

pub mod darcy;
pub mod error;
pub mod estimators;
pub mod expansion;
pub mod linalg;
pub mod lv;
pub mod mesh;
pub mod model;
pub mod prior;
pub mod refine;
pub mod toy;

pub use error::{Error, Result};
pub use estimators::{estimate_posterior, estimate_posterior_detailed, tensor_grid_oracle, SampleBudget, SampleKind};
pub use expansion::{
    expand_posterior, expand_posterior_correlation, expand_posterior_covariance, expand_posterior_mean,
    MomentOrder, MomentSource, PosteriorMoments,
};
pub use linalg::SpdMatrix;
pub use model::{evaluate_at, generate_data, likelihood_terms, ForwardModel, MeasurementSetup, ModelEvaluations};
pub use prior::{AffineExpansion, CoefficientLaw, KleBasis};
pub use refine::{run_refinement, refine_step, tikhonov_gradient, RefineOptions, RefineState};
