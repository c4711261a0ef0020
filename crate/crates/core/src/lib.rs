//! Batch multi-objective reinforcement learning for ICU lab ordering:
//! cohort simulation and ingest, Gaussian-process forecasting, the hourly
//! MDP, extremely randomized trees, MO-FQI with Pareto pruning and
//! off-policy evaluation.

pub mod cohort;
pub mod forecast;
pub mod fqi;
pub mod mdp;
pub mod ope;
pub mod pipeline;
pub mod scalar;
pub mod seeding;
pub mod trees;

pub use scalar::Scalar;

/// Scalar type used by the end-to-end pipeline.
pub type Real = f64;

/// Q-function over (state, joint action).
pub type QEnsemble = fqi::QFunction<Real>;
pub type LabPolicies = fqi::PolicySet<Real>;
pub type StateVec = mdp::StateVector<Real>;
pub type TransitionRecord = mdp::Transition<Real>;
pub type TraitObservations = forecast::TraitSeries<Real>;
