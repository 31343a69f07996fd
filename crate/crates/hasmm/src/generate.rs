//! Synthetic episode generation: latent trajectory simulation, Poisson
//! observation times, and GP segment sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::emission::sample_segment;
use crate::error::{Error, Result};
use crate::model::transition_row;
use crate::params::ParameterSet;

/// Hard cap on transitions per episode; absorption is almost surely finite,
/// so hitting this indicates a pathological parameter set.
pub const MAX_TRANSITIONS: usize = 10_000;

/// A realized latent path: visited states and their sojourn durations.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    /// Visited states; all but the last are transient, the last is absorbing.
    pub states: Vec<usize>,
    /// Sojourn duration of each visited state (hours), same length as `states`.
    pub sojourns: Vec<f64>,
}

impl LatentTrajectory {
    /// Entry times of each visited state: `0, s_1, s_1+s_2, ...`.
    pub fn entry_times(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.states.len());
        for &s in &self.sojourns {
            out.push(t);
            t += s;
        }
        out
    }

    /// Total elapsed time, which is also the episode's censoring time.
    pub fn total_time(&self) -> f64 {
        self.sojourns.iter().sum()
    }

    /// Checks the structural invariants against a parameter set.
    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        let k = self.states.len();
        if k == 0 || self.sojourns.len() != k {
            return Err(Error::InvalidInput("trajectory must pair states with sojourns".into()));
        }
        let last = self.states[k - 1];
        if !params.is_absorbing(last) {
            return Err(Error::InvalidInput(format!("trajectory must end absorbing, got {last}")));
        }
        for (n, &x) in self.states[..k - 1].iter().enumerate() {
            if !params.is_transient(x) {
                return Err(Error::InvalidInput(format!("non-terminal state {x} at position {n} is absorbing")));
            }
            if self.states[n + 1] == x {
                return Err(Error::InvalidInput(format!("self-transition at position {n}")));
            }
        }
        if self.sojourns.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("sojourns must be strictly positive".into()));
        }
        Ok(())
    }
}

/// One observation record: irregular multivariate samples, the censoring
/// time, the absorbing label, and (for synthetic data) the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    /// Strictly increasing observation times in `[0, censor_time]`.
    pub times: Vec<f64>,
    /// `values[q][m]` is stream `q` at `times[m]`, `None` when missing.
    pub values: Vec<Vec<Option<f64>>>,
    /// Censoring time `T_c` (hours).
    pub censor_time: f64,
    /// Absorbing label: 0 (safe) or `N-1` (catastrophic), 0-indexed.
    pub label: usize,
    /// Ground-truth trajectory, present for synthetic episodes.
    pub truth: Option<LatentTrajectory>,
}

impl Episode {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn n_streams(&self) -> usize {
        self.values.len()
    }

    /// Structural validation (ordering, bounds, truth consistency).
    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!("episode {}: times not strictly increasing", self.id)));
        }
        if self.times.last().is_some_and(|&t| t > self.censor_time) {
            return Err(Error::InvalidInput(format!("episode {}: observation after censoring", self.id)));
        }
        if !params.is_absorbing(self.label) {
            return Err(Error::InvalidInput(format!("episode {}: label {} is not absorbing", self.id, self.label)));
        }
        if self.values.len() != params.n_streams()
            || self.values.iter().any(|row| row.len() != self.times.len())
        {
            return Err(Error::InvalidInput(format!("episode {}: values shape mismatch", self.id)));
        }
        if let Some(truth) = &self.truth {
            truth.validate(params)?;
            if (truth.total_time() - self.censor_time).abs() > 1e-9 * self.censor_time.max(1.0) {
                return Err(Error::InvalidInput(format!("episode {}: truth duration != censor time", self.id)));
            }
            if *truth.states.last().unwrap() != self.label {
                return Err(Error::InvalidInput(format!("episode {}: truth label mismatch", self.id)));
            }
        }
        Ok(())
    }
}

/// Deterministic per-unit RNG stream: one master seed, split by a counter.
/// Used for per-episode generation and per-trajectory sampling so parallel
/// runs reproduce bit for bit.
pub fn substream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Draws an index from an unnormalized nonnegative weight vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "categorical weights must have positive mass");
    let mut u = rng.gen::<f64>() * total;
    for (idx, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return idx;
        }
    }
    weights.len() - 1
}

/// Homogeneous Poisson arrival times on `[0, horizon]`, sorted.
pub fn sample_sampling_times<R: Rng + ?Sized>(zeta: f64, horizon: f64, rng: &mut R) -> Vec<f64> {
    assert!(zeta > 0.0, "sampling intensity must be positive");
    assert!(horizon >= 0.0, "horizon must be nonnegative");
    if horizon == 0.0 {
        return Vec::new();
    }
    let count = rand_distr::Poisson::new(zeta * horizon).expect("positive intensity").sample(rng) as usize;
    let mut times: Vec<f64> = (0..count).map(|_| rng.gen::<f64>() * horizon).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times
}

/// Samples the latent trajectory alone: initial state from `p°`, Gamma
/// sojourns, duration-dependent next states, stopping at absorption.
pub fn sample_trajectory<R: Rng + ?Sized>(params: &ParameterSet, rng: &mut R) -> Result<LatentTrajectory> {
    let mut states = vec![sample_categorical(&params.initial, rng)];
    let mut sojourns = Vec::new();
    loop {
        let cur = *states.last().unwrap();
        let lambda = &params.sojourn[cur];
        let s: f64 = rand_distr::Gamma::new(lambda.shape, 1.0 / lambda.rate)
            .expect("validated shape/rate")
            .sample(rng);
        let s = s.max(f64::MIN_POSITIVE); // Gamma samplers can underflow to 0
        sojourns.push(s);
        if params.is_absorbing(cur) {
            break;
        }
        if states.len() >= MAX_TRANSITIONS {
            return Err(Error::BudgetExceeded(format!(
                "episode exceeded {MAX_TRANSITIONS} transitions without absorbing"
            )));
        }
        let next = sample_categorical(&transition_row(params, cur, s), rng);
        states.push(next);
    }
    Ok(LatentTrajectory { states, sojourns })
}

/// Groups observation-time indices by the trajectory occupancy they fall in:
/// occupancy `n` owns times in `[entry_n, entry_{n+1})`, and the final
/// (absorbing) occupancy also owns the censoring instant itself.
pub fn partition_by_occupancy(traj: &LatentTrajectory, times: &[f64]) -> Vec<Vec<usize>> {
    let entries = traj.entry_times();
    let k = traj.states.len();
    let mut groups = vec![Vec::new(); k];
    for (m, &t) in times.iter().enumerate() {
        // Last occupancy whose entry time is <= t.
        let mut n = k - 1;
        for (cand, &e) in entries.iter().enumerate() {
            if e <= t {
                n = cand;
            } else {
                break;
            }
        }
        groups[n].push(m);
    }
    groups
}

/// Extra knobs for episode generation beyond the parameter set.
#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    /// Per-entry probability of dropping a sampled value (ragged streams).
    pub missing_prob: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { missing_prob: 0.0 }
    }
}

/// Samples one complete episode: trajectory, Poisson observation times over
/// `[0, T_c]`, and per-occupancy GP segments. Ground truth is attached.
pub fn generate_episode<R: Rng + ?Sized>(params: &ParameterSet, rng: &mut R) -> Result<Episode> {
    generate_episode_with(params, &GenerateOptions::default(), "ep", rng)
}

/// [`generate_episode`] with explicit options and id.
pub fn generate_episode_with<R: Rng + ?Sized>(
    params: &ParameterSet,
    opts: &GenerateOptions,
    id: &str,
    rng: &mut R,
) -> Result<Episode> {
    let traj = sample_trajectory(params, rng)?;
    let censor_time = traj.total_time();
    let times = sample_sampling_times(params.zeta, censor_time, rng);
    let q = params.n_streams();
    let mut values: Vec<Vec<Option<f64>>> = vec![vec![None; times.len()]; q];
    for (n, group) in partition_by_occupancy(&traj, &times).into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let seg_times: Vec<f64> = group.iter().map(|&m| times[m]).collect();
        let seg = sample_segment(&params.emission[traj.states[n]], &seg_times, rng);
        for (pos, &m) in group.iter().enumerate() {
            for (qi, stream) in values.iter_mut().enumerate() {
                stream[m] = seg.values[qi][pos];
            }
        }
    }
    if opts.missing_prob > 0.0 {
        for stream in &mut values {
            for v in stream.iter_mut() {
                if rng.gen::<f64>() < opts.missing_prob {
                    *v = None;
                }
            }
        }
    }
    let label = *traj.states.last().unwrap();
    Ok(Episode { id: id.to_string(), times, values, censor_time, label, truth: Some(traj) })
}

/// Generates `count` independent episodes from per-episode RNG substreams of
/// `master_seed`; deterministic regardless of thread count.
pub fn generate_dataset(params: &ParameterSet, count: usize, master_seed: u64) -> Result<Vec<Episode>> {
    generate_dataset_with(params, &GenerateOptions::default(), count, master_seed)
}

/// [`generate_dataset`] with explicit options.
pub fn generate_dataset_with(
    params: &ParameterSet,
    opts: &GenerateOptions,
    count: usize,
    master_seed: u64,
) -> Result<Vec<Episode>> {
    (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut rng = substream_rng(master_seed, idx as u64);
            generate_episode_with(params, opts, &format!("ep{idx:06}"), &mut rng)
        })
        .collect()
}
