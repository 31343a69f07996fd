//! Monte Carlo E-step: complete-data log densities, importance reweighting
//! of a fixed trajectory set, and the EM objective built from them.

use crate::emission::{segment_log_density, Segment};
use crate::error::{Error, Result};
use crate::generate::{partition_by_occupancy, Episode, LatentTrajectory};
use crate::model::{sojourn_ln_pdf, transition_fn};
use crate::params::ParameterSet;

/// Latent trajectories drawn once per episode, reused across EM iterates.
pub struct SampledTrajectories {
    /// One entry per dataset episode, in dataset order.
    pub episodes: Vec<EpisodeSamples>,
}

/// The trajectory draws for a single episode.
pub struct EpisodeSamples {
    pub trajectories: Vec<LatentTrajectory>,
    /// Log prior density of each trajectory under the parameters it was
    /// sampled with; the denominator of every later importance ratio.
    pub base_log_prior: Vec<f64>,
}

impl SampledTrajectories {
    /// Trajectories per episode.
    pub fn per_episode(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.trajectories.len())
    }
}

/// Importance weights of every sampled trajectory under a parameter iterate.
pub struct ImportanceWeights {
    /// `weights[d][g]` is the prior-density ratio for trajectory `g` of
    /// episode `d`.
    pub weights: Vec<Vec<f64>>,
    /// Effective sample size per episode.
    pub ess: Vec<f64>,
    pub min_ess: f64,
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log density of a latent trajectory under the generative prior alone:
/// initial state, every sojourn (absorbing dwell included), and every
/// transition. Observation terms are deliberately absent.
pub fn log_prior_density(params: &ParameterSet, traj: &LatentTrajectory) -> f64 {
    let k = traj.states.len();
    let mut lp = ln_or_neg_inf(params.initial[traj.states[0]]);
    for n in 0..k {
        lp += sojourn_ln_pdf(params, traj.states[n], traj.sojourns[n]);
        if n + 1 < k {
            let g = transition_fn(params, traj.states[n], traj.states[n + 1], traj.sojourns[n]);
            lp += ln_or_neg_inf(g);
        }
    }
    lp
}

/// Complete-data log density: the trajectory prior plus the GP density of
/// the observations each occupancy covers. Occupancies with no observations
/// contribute nothing.
pub fn log_complete_density(
    params: &ParameterSet,
    episode: &Episode,
    traj: &LatentTrajectory,
) -> f64 {
    let mut lp = log_prior_density(params, traj);
    for (n, group) in partition_by_occupancy(traj, &episode.times).iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let seg = Segment {
            times: group.iter().map(|&m| episode.times[m]).collect(),
            values: episode
                .values
                .iter()
                .map(|stream| group.iter().map(|&m| stream[m]).collect())
                .collect(),
        };
        lp += segment_log_density(&params.emission[traj.states[n]], &seg);
    }
    lp
}

/// Prior-density ratio of every sampled trajectory under `params` relative
/// to the parameters the trajectories were drawn with. At the first iterate
/// the two coincide and every weight is exactly one.
pub fn importance_weights(
    samples: &SampledTrajectories,
    params: &ParameterSet,
) -> ImportanceWeights {
    let mut weights = Vec::with_capacity(samples.episodes.len());
    let mut ess = Vec::with_capacity(samples.episodes.len());
    for ep in &samples.episodes {
        let w: Vec<f64> = ep
            .trajectories
            .iter()
            .zip(&ep.base_log_prior)
            .map(|(traj, &base)| (log_prior_density(params, traj) - base).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        let sq: f64 = w.iter().map(|x| x * x).sum();
        ess.push(if sq > 0.0 { sum * sum / sq } else { 0.0 });
        weights.push(w);
    }
    let min_ess = ess.iter().cloned().fold(f64::INFINITY, f64::min);
    ImportanceWeights { weights, ess, min_ess }
}

/// The Monte Carlo EM objective: importance-weighted sum of complete-data
/// log densities, divided by the per-episode sample count.
pub fn mc_e_step(
    samples: &SampledTrajectories,
    dataset: &[Episode],
    params: &ParameterSet,
    weights: &ImportanceWeights,
) -> Result<f64> {
    let g_count = samples.per_episode();
    if g_count == 0 {
        return Err(Error::InvalidInput("no sampled trajectories to average".into()));
    }
    let mut q = 0.0;
    for (d, (ep, episode)) in samples.episodes.iter().zip(dataset).enumerate() {
        for (g, traj) in ep.trajectories.iter().enumerate() {
            let w = weights.weights[d][g];
            if w == 0.0 {
                continue;
            }
            let ld = log_complete_density(params, episode, traj);
            if !ld.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "episode {d} trajectory {g}: complete log-density is {ld}"
                )));
            }
            q += w * ld;
        }
    }
    Ok(q / g_count as f64)
}
