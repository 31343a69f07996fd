//! Unsupervised parameter estimation from censored episodes.
//!
//! The estimator is a Monte Carlo EM loop: one forward-filtering pass per
//! episode under an initial parameter guess, a set of latent trajectories
//! drawn once by backward sampling, then repeated E-steps (importance
//! reweighting of the fixed trajectory set) and block-wise M-steps until the
//! parameters settle. Model-order selection wraps the loop with a BIC score.

mod estep;
mod mcem;
mod mstep;
mod sampler;

pub use estep::{
    importance_weights, log_complete_density, log_prior_density, mc_e_step, EpisodeSamples,
    ImportanceWeights, SampledTrajectories,
};
pub use mcem::{
    bic_select, canonicalize, est_loglik, ffbs_mcem, init_params, parameter_count,
    BicCandidate, EmIterate, McemConfig,
};
pub use mstep::{m_step, MStepReport};
pub use sampler::{
    backward_sampling, bar_sampler, initiality_probability, tr_sampler, BackwardDraws,
};
