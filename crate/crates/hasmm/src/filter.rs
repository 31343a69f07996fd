//! Real-time forward filtering over irregularly sampled episodes.
//!
//! The filter carries joint messages over (current state, lag): the lag `w`
//! counts how many of the most recent observations fall inside the current
//! sojourn. Each step combines three ingredients: the emission density of the
//! covered observation segment, the sojourn-window mass for the current
//! state, and interval transition probabilities queried from a precomputed
//! [`TransitionTable`] at the anchor observation where that sojourn began.
//! Lags reaching further back than the state's 90% sojourn quantile are
//! folded into the largest admitted lag, so the per-state lag range stays
//! bounded and the total window mass telescopes to one.
//!
//! Everything runs in log space with per-step normalization; the cumulative
//! normalizers are retained so the unnormalized joints (and the episode
//! evidence) stay available to downstream consumers.

use crate::emission::{segment_log_density, Segment};
use crate::error::{Error, Result};
use crate::generate::Episode;
use crate::logspace::log_sum_exp;
use crate::model::{sojourn_cdf, sojourn_quantile};
use crate::params::ParameterSet;
use crate::volterra::TransitionTable;

/// Lags are truncated once they reach back past this much sojourn mass.
const LAG_TRUNCATION_MASS: f64 = 0.9;

/// Posterior summary emitted after each observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    /// Observation time (hours).
    pub t: f64,
    /// `P(X(t) = j | y_1..y_m)`, summing to one.
    pub posterior: Vec<f64>,
    /// Argmax of the posterior; ties resolve to the smaller index.
    pub map_state: usize,
    /// Probability of eventual catastrophic absorption given the posterior.
    pub risk: f64,
}

/// Forward messages for one episode prefix.
#[derive(Debug, Clone)]
pub struct ForwardMessages {
    /// `log_alpha[m][j][w-1]` is the per-step-normalized log joint mass of
    /// being in state `j` at observation `m` with the current sojourn
    /// covering the last `w` observations. The last lag of each `(m, j)` row
    /// absorbs all older entry times, so exp-sums over `(j, w)` are one.
    pub log_alpha: Vec<Vec<Vec<f64>>>,
    /// Cumulative log normalizers; entry `m` is the log evidence of the
    /// first `m + 1` observations.
    pub log_norm: Vec<f64>,
    /// Per-state lag truncation horizon (90% sojourn quantile).
    pub t_max: Vec<f64>,
    times: Vec<f64>,
}

impl ForwardMessages {
    fn new(params: &ParameterSet) -> ForwardMessages {
        let t_max = (0..params.n())
            .map(|j| sojourn_quantile(params, j, LAG_TRUNCATION_MASS))
            .collect();
        ForwardMessages { log_alpha: Vec::new(), log_norm: Vec::new(), t_max, times: Vec::new() }
    }

    /// Number of observations absorbed so far.
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    /// Observation times absorbed so far.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Log evidence of the whole prefix; zero when no observation was seen.
    pub fn evidence(&self) -> f64 {
        self.log_norm.last().copied().unwrap_or(0.0)
    }
}

/// Marginal state posterior after observation `m` (1-based).
pub fn state_posterior(msgs: &ForwardMessages, m: usize) -> Vec<f64> {
    assert!(m >= 1 && m <= msgs.n_steps(), "step {m} out of range");
    let step = &msgs.log_alpha[m - 1];
    let mut post: Vec<f64> = step
        .iter()
        .map(|lags| lags.iter().map(|&la| la.exp()).sum())
        .collect();
    let total: f64 = post.iter().sum();
    for p in &mut post {
        *p /= total;
    }
    post
}

/// Probability of eventual catastrophic absorption given the state posterior
/// after observation `m` (1-based). Requires a table whose horizon plateaued.
pub fn risk_score(msgs: &ForwardMessages, table: &TransitionTable, m: usize) -> Result<f64> {
    let post = state_posterior(msgs, m);
    let mut risk = 0.0;
    for (j, &p) in post.iter().enumerate() {
        let (_, catastrophic) = table.absorption_row(j)?;
        risk += p * catastrophic;
    }
    Ok(risk.clamp(0.0, 1.0))
}

fn argmax(post: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in post.iter().enumerate() {
        if p > post[best] {
            best = j;
        }
    }
    best
}

/// Incremental forward filter. Observations arrive one at a time through
/// [`Filter::push`], which returns the updated posterior snapshot; batch
/// processing goes through the same code path, so streamed and batch results
/// are bit-identical.
pub struct Filter<'a> {
    params: &'a ParameterSet,
    table: &'a TransitionTable,
    msgs: ForwardMessages,
    /// Accumulated observations, stream-major: `values[q][m]`.
    values: Vec<Vec<Option<f64>>>,
}

impl<'a> Filter<'a> {
    /// Checks that the table was built for exactly these parameters.
    pub fn new(params: &'a ParameterSet, table: &'a TransitionTable) -> Result<Filter<'a>> {
        params.validate()?;
        table.verify_fingerprint(params)?;
        Ok(Filter {
            params,
            table,
            msgs: ForwardMessages::new(params),
            values: vec![Vec::new(); params.n_streams()],
        })
    }

    pub fn messages(&self) -> &ForwardMessages {
        &self.msgs
    }

    /// Largest admitted lag for state `j` at the step ending at `times[m0]`.
    fn max_lag(&self, m0: usize, j: usize) -> usize {
        let times = &self.msgs.times;
        let horizon = self.msgs.t_max[j];
        let mut w = 1;
        while w < m0 + 1 && times[m0] - times[m0 - w] <= horizon {
            w += 1;
        }
        w
    }

    /// Emission log density of states' GP over the last `w` observations.
    fn segment_log_density(&self, m0: usize, w: usize, j: usize) -> f64 {
        let lo = m0 + 1 - w;
        let seg = Segment {
            times: self.msgs.times[lo..=m0].to_vec(),
            values: self.values.iter().map(|stream| stream[lo..=m0].to_vec()).collect(),
        };
        segment_log_density(&self.params.emission[j], &seg)
    }

    /// Log of the summed transition mass flowing into `(j, w)`: transition
    /// probabilities from every predecessor message at the anchor
    /// observation, or from the initial distribution when the lag spans the
    /// whole prefix (the sojourn then started at time zero).
    fn log_inflow(&self, m0: usize, w: usize, j: usize) -> f64 {
        let times = &self.msgs.times;
        let t = times[m0];
        if w == m0 + 1 {
            let terms: Vec<f64> = (0..self.params.n())
                .filter(|&i| self.params.initial[i] > 0.0)
                .map(|i| {
                    self.params.initial[i].ln() + self.table.query(i, j, t, 0.0, 0.0).value.ln()
                })
                .collect();
            return log_sum_exp(&terms);
        }
        let u = m0 - w;
        let tau = t - times[u];
        let mut terms = Vec::new();
        for i in 0..self.params.n() {
            let lags = &self.msgs.log_alpha[u][i];
            for (idx, &la) in lags.iter().enumerate() {
                if la == f64::NEG_INFINITY {
                    continue;
                }
                let wp = idx + 1;
                let s_lo = times[u] - times[u + 1 - wp];
                // The last stored lag folded every older entry time, so its
                // elapsed-sojourn window is open above.
                let s_hi =
                    if wp == lags.len() { f64::INFINITY } else { times[u] - times[u - wp] };
                let q = self.table.query(i, j, tau, s_lo, s_hi).value;
                if q > 0.0 {
                    terms.push(la + self.msgs.log_norm[u] + q.ln());
                }
            }
        }
        log_sum_exp(&terms)
    }

    /// Absorb one observation; `obs[q]` is stream `q` at time `t`.
    fn step(&mut self, t: f64, obs: &[Option<f64>]) -> Result<()> {
        if obs.len() != self.params.n_streams() {
            return Err(Error::InvalidInput(format!(
                "expected {} observation streams, got {}",
                self.params.n_streams(),
                obs.len()
            )));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(Error::InvalidInput(format!("observation time {t} is not usable")));
        }
        if let Some(&last) = self.msgs.times.last() {
            if t <= last {
                return Err(Error::InvalidInput(format!(
                    "observation times must be strictly increasing ({t} after {last})"
                )));
            }
        }
        if obs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation value".into()));
        }
        for (stream, &v) in self.values.iter_mut().zip(obs) {
            stream.push(v);
        }
        self.msgs.times.push(t);

        let n = self.params.n();
        let m0 = self.msgs.times.len() - 1;
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            let wmax = self.max_lag(m0, j);
            let mut row = Vec::with_capacity(wmax);
            for w in 1..=wmax {
                // Window mass: the current sojourn covers exactly the last w
                // observations; the largest lag keeps the whole upper tail so
                // the masses over w sum to one.
                let inner = t - self.msgs.times[m0 + 1 - w];
                let mass = if w == wmax {
                    1.0 - sojourn_cdf(self.params, j, inner)
                } else {
                    sojourn_cdf(self.params, j, t - self.msgs.times[m0 - w])
                        - sojourn_cdf(self.params, j, inner)
                };
                if mass <= 0.0 {
                    row.push(f64::NEG_INFINITY);
                    continue;
                }
                let inflow = self.log_inflow(m0, w, j);
                if inflow == f64::NEG_INFINITY {
                    row.push(f64::NEG_INFINITY);
                    continue;
                }
                row.push(self.segment_log_density(m0, w, j) + mass.ln() + inflow);
            }
            raw.push(row);
        }

        let flat: Vec<f64> = raw.iter().flatten().copied().collect();
        let norm = log_sum_exp(&flat);
        if norm == f64::NEG_INFINITY || norm.is_nan() {
            self.msgs.times.pop();
            for stream in &mut self.values {
                stream.pop();
            }
            return Err(Error::FilterDegenerate {
                step: m0 + 1,
                reason: "no state and lag combination carries mass".into(),
            });
        }
        for row in &mut raw {
            for la in row {
                *la -= norm;
            }
        }
        self.msgs.log_alpha.push(raw);
        self.msgs.log_norm.push(norm);
        Ok(())
    }

    /// Absorb one observation and return the updated posterior snapshot.
    pub fn push(&mut self, t: f64, obs: &[Option<f64>]) -> Result<PosteriorSnapshot> {
        self.step(t, obs)?;
        let m = self.msgs.n_steps();
        let posterior = state_posterior(&self.msgs, m);
        let risk = risk_score(&self.msgs, self.table, m)?;
        Ok(PosteriorSnapshot { t, map_state: argmax(&posterior), posterior, risk })
    }

    /// Consume the filter, keeping the accumulated messages.
    pub fn into_messages(self) -> ForwardMessages {
        self.msgs
    }
}

/// Forward messages for a whole episode.
pub fn forward_messages(
    params: &ParameterSet,
    table: &TransitionTable,
    episode: &Episode,
) -> Result<ForwardMessages> {
    let mut filter = Filter::new(params, table)?;
    for m in 0..episode.n_obs() {
        let obs: Vec<Option<f64>> = episode.values.iter().map(|stream| stream[m]).collect();
        filter.step(episode.times[m], &obs)?;
    }
    Ok(filter.into_messages())
}

/// Filter a whole episode, returning one posterior snapshot per observation.
pub fn stream_filter(
    params: &ParameterSet,
    table: &TransitionTable,
    episode: &Episode,
) -> Result<Vec<PosteriorSnapshot>> {
    let mut filter = Filter::new(params, table)?;
    let mut out = Vec::with_capacity(episode.n_obs());
    for m in 0..episode.n_obs() {
        let obs: Vec<Option<f64>> = episode.values.iter().map(|stream| stream[m]).collect();
        out.push(filter.push(episode.times[m], &obs)?);
    }
    Ok(out)
}
