//! Latent trajectory samplers: truncated sojourn draws, the bivariate
//! accept-reject step, and the backward pass that assembles a full
//! trajectory conditioned on an episode's censoring time and label.

use rand::distributions::{Bernoulli, Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Gamma as GammaDist;

use crate::emission::{segment_log_density, Segment};
use crate::error::{Error, Result};
use crate::filter::ForwardMessages;
use crate::generate::{Episode, LatentTrajectory};
use crate::logspace::{log_add, log_sum_exp};
use crate::model::{
    sojourn_cdf, sojourn_ln_pdf, sojourn_pdf, sojourn_quantile, transition_fn, transition_row,
    DEFAULT_QUAD_STEP,
};
use crate::params::ParameterSet;

/// Below this truncation mass, rejection is abandoned for inverse-CDF draws.
const TR_REJECTION_FLOOR: f64 = 0.01;
/// Consecutive rejections after which the bivariate sampler gives up.
const BAR_MAX_REJECTIONS: usize = 100_000;
/// Segment cap for one backward pass.
const BACKWARD_MAX_SEGMENTS: usize = 10_000;

/// Draws a sojourn for `state` conditioned on being shorter than `s_bar`.
///
/// Plain rejection when the truncation keeps at least 1% of the mass,
/// inverse-CDF sampling otherwise; `s_bar = infinity` is an unconditioned
/// draw.
pub fn tr_sampler<R: Rng + ?Sized>(
    params: &ParameterSet,
    state: usize,
    s_bar: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(s_bar > 0.0) {
        return Err(Error::InvalidInput(format!(
            "truncation bound {s_bar} must be strictly positive"
        )));
    }
    let lambda = &params.sojourn[state];
    let dist = GammaDist::new(lambda.shape, 1.0 / lambda.rate)
        .map_err(|e| Error::InvalidParameter(format!("state {state} sojourn: {e}")))?;
    if s_bar == f64::INFINITY {
        return Ok(dist.sample(rng).max(f64::MIN_POSITIVE));
    }
    let accept_mass = sojourn_cdf(params, state, s_bar);
    if accept_mass >= TR_REJECTION_FLOOR {
        for _ in 0..100_000 {
            let s: f64 = dist.sample(rng).max(f64::MIN_POSITIVE);
            if s < s_bar {
                return Ok(s);
            }
        }
        // Statistically unreachable given the mass floor; fall through to
        // the exact inverse-CDF path rather than erroring.
    }
    let u: f64 = rng.gen_range(0.0..accept_mass.max(f64::MIN_POSITIVE));
    let s = sojourn_quantile(params, state, u);
    Ok(s.clamp(f64::MIN_POSITIVE, s_bar * (1.0 - 1e-12)))
}

/// Draws a (state, sojourn) pair conditioned on the sojourn ending in a
/// transition into `next_state` before `s_bar` has elapsed.
///
/// Proposes the state from `weights` (zero entries are excluded), the
/// sojourn from the truncated sojourn law, and accepts when a draw from the
/// duration-dependent transition row lands on `next_state`.
pub fn bar_sampler<R: Rng + ?Sized>(
    weights: &[f64],
    params: &ParameterSet,
    next_state: usize,
    s_bar: f64,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if next_state >= params.n() {
        return Err(Error::InvalidInput(format!("next state {next_state} out of range")));
    }
    if weights.len() != params.n() || weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("state weights must be nonnegative and finite".into()));
    }
    let proposal = WeightedIndex::new(weights).map_err(|_| {
        Error::InvalidInput("state weights carry no mass to propose from".into())
    })?;
    for _ in 0..BAR_MAX_REJECTIONS {
        let u = proposal.sample(rng);
        let w = tr_sampler(params, u, s_bar, rng)?;
        let row = transition_row(params, u, w);
        let jump = WeightedIndex::new(&row)
            .map_err(|_| Error::InvalidInput(format!("state {u} has a degenerate transition row")))?;
        if jump.sample(rng) == next_state {
            return Ok((u, w));
        }
    }
    Err(Error::SamplerStalled(format!(
        "no acceptance into state {next_state} within {BAR_MAX_REJECTIONS} proposals \
         (budget {s_bar} hours)"
    )))
}

/// Prior densities of entering each state at the quadrature midpoints of
/// `(0, s_bar)`, from the renewal recursion over transient predecessors
/// seeded by the initial distribution. Entry `[u][x]` is the density of a
/// transition into `u` at `(x + 1/2) * DEFAULT_QUAD_STEP`; identically zero
/// when nothing can precede `u`.
fn entry_densities(params: &ParameterSet, s_bar: f64) -> Vec<Vec<f64>> {
    let n = params.n();
    let step = DEFAULT_QUAD_STEP;
    let cells = (s_bar / step).floor() as usize;
    let transient: Vec<usize> = params.transient_states().collect();

    // Jump kernels v_v(s) * g_{v.}(s) tabulated at the midpoints and at the
    // midpoint-to-midpoint lags so the inner convolution is multiply-add.
    let mid_kernel: Vec<Vec<Vec<f64>>> = transient
        .iter()
        .map(|&v| {
            (0..cells)
                .map(|x| {
                    let s = (x as f64 + 0.5) * step;
                    let pdf = sojourn_pdf(params, v, s);
                    transition_row(params, v, s).iter().map(|g| pdf * g).collect()
                })
                .collect()
        })
        .collect();
    let lag_kernel: Vec<Vec<Vec<f64>>> = transient
        .iter()
        .map(|&v| {
            (0..=cells)
                .map(|k| {
                    if k == 0 {
                        return vec![0.0; n];
                    }
                    let s = k as f64 * step;
                    let pdf = sojourn_pdf(params, v, s);
                    transition_row(params, v, s).iter().map(|g| pdf * g).collect()
                })
                .collect()
        })
        .collect();

    let mut entries = vec![vec![0.0; cells]; n];
    for x in 0..cells {
        for u in 0..n {
            let mut density = 0.0;
            for (vi, &v) in transient.iter().enumerate() {
                density += params.initial[v] * mid_kernel[vi][x][u];
                let mut inner = 0.0;
                for y in 0..x {
                    inner += entries[v][y] * lag_kernel[vi][x - y][u];
                }
                density += inner * step;
            }
            entries[u][x] = density;
        }
    }
    entries
}

/// Unnormalized log occupancy weights at the last observation strictly
/// before `s_bar`: exponentiated forward messages marginalized over lags,
/// carried as joint densities. With no usable observation the weight falls
/// back to the prior mass of entering the state before `s_bar`, which is
/// zero exactly when no predecessor is possible.
fn log_occupancy_weights(
    params: &ParameterSet,
    msgs: &ForwardMessages,
    s_bar: f64,
) -> Vec<f64> {
    let n = params.n();
    let anchor = msgs.times().iter().rposition(|&t| t < s_bar);
    match anchor {
        Some(m0) => (0..n)
            .map(|u| {
                let lags = &msgs.log_alpha[m0][u];
                log_sum_exp(lags) + msgs.log_norm[m0]
            })
            .collect(),
        None => {
            let entries = entry_densities(params, s_bar);
            (0..n)
                .map(|u| {
                    let mass: f64 = entries[u].iter().sum::<f64>() * DEFAULT_QUAD_STEP;
                    if mass > 0.0 {
                        mass.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        }
    }
}

/// Log GP density of the observations strictly before `s_bar` under `state`
/// (the hypothetical first sojourn's segment).
fn log_head_segment(
    params: &ParameterSet,
    msgs: &ForwardMessages,
    episode: &Episode,
    state: usize,
    s_bar: f64,
) -> f64 {
    let cut = msgs.times().iter().take_while(|&&t| t < s_bar).count();
    if cut == 0 {
        return 0.0;
    }
    let seg = Segment {
        times: episode.times[..cut].to_vec(),
        values: episode.values.iter().map(|stream| stream[..cut].to_vec()).collect(),
    };
    segment_log_density(&params.emission[state], &seg)
}

/// Probability that the state entered `s_bar` hours before censoring is the
/// episode's first state.
///
/// `next` is the state the candidate transitions into; `None` marks the
/// absorbing occupancy itself (asking whether the label spans the whole
/// episode). The initial branch weighs each candidate by its initial mass,
/// an exact sojourn of `s_bar`, the transition into `next`, and the GP
/// density of the observations it would cover. The continuation branch is
/// anchored on the forward message at the last observation before `s_bar`
/// and integrates the transition kernel over admissible sojourns; with no
/// observation to anchor on it instead integrates the prior entry density
/// against the residual sojourn, which is exact for that regime. Candidates
/// with no possible transient predecessor contribute nothing to
/// continuation.
pub fn initiality_probability(
    params: &ParameterSet,
    msgs: &ForwardMessages,
    episode: &Episode,
    next: Option<usize>,
    s_bar: f64,
) -> Result<f64> {
    if !(s_bar > 0.0) {
        return Err(Error::InvalidInput(format!(
            "remaining budget {s_bar} must be strictly positive"
        )));
    }
    let candidates: Vec<usize> = match next {
        Some(j) => params.transient_states().filter(|&u| u != j).collect(),
        None => vec![episode.label],
    };
    if candidates.is_empty() {
        // No transient state can precede `next`, so the chain started there.
        return Ok(1.0);
    }

    let mut init_terms = Vec::new();
    for &u in &candidates {
        if params.initial[u] <= 0.0 {
            continue;
        }
        let mut lw = params.initial[u].ln() + sojourn_ln_pdf(params, u, s_bar);
        if let Some(j) = next {
            let g = transition_fn(params, u, j, s_bar);
            if g <= 0.0 {
                continue;
            }
            lw += g.ln();
        }
        lw += log_head_segment(params, msgs, episode, u, s_bar);
        init_terms.push(lw);
    }
    let log_init = log_sum_exp(&init_terms);

    let n_transient = params.transient_states().count();
    let cells = (s_bar / DEFAULT_QUAD_STEP).floor() as usize;
    let anchored = msgs.times().iter().any(|&t| t < s_bar);
    let mut cont_terms = Vec::new();
    if anchored {
        let occupancy = log_occupancy_weights(params, msgs, s_bar);
        for &u in &candidates {
            // Continuation needs someone before `u`: a transient state
            // other than `u` itself.
            let has_predecessor = n_transient > if params.is_transient(u) { 1 } else { 0 };
            if !has_predecessor || occupancy[u] == f64::NEG_INFINITY {
                continue;
            }
            let mut integral = 0.0;
            for x in 0..cells {
                let left = x as f64 * DEFAULT_QUAD_STEP;
                let right = left + DEFAULT_QUAD_STEP;
                let mass = sojourn_cdf(params, u, right) - sojourn_cdf(params, u, left);
                if mass <= 0.0 {
                    continue;
                }
                let g = match next {
                    Some(j) => transition_fn(params, u, j, 0.5 * (left + right)),
                    None => 1.0,
                };
                integral += g * mass;
            }
            if integral > 0.0 {
                cont_terms.push(occupancy[u] + integral.ln());
            }
        }
    } else {
        // No observation before s_bar: pair each prior entry time with the
        // residual sojourn that ends exactly at s_bar.
        let entries = entry_densities(params, s_bar);
        for &u in &candidates {
            let mut density = 0.0;
            for x in 0..cells {
                let mid = (x as f64 + 0.5) * DEFAULT_QUAD_STEP;
                let residual = s_bar - mid;
                let g = match next {
                    Some(j) => transition_fn(params, u, j, residual),
                    None => 1.0,
                };
                density += entries[u][x] * sojourn_pdf(params, u, residual) * g;
            }
            density *= DEFAULT_QUAD_STEP;
            if density > 0.0 {
                cont_terms.push(density.ln());
            }
        }
    }
    let log_cont = log_sum_exp(&cont_terms);

    if log_init == f64::NEG_INFINITY && log_cont == f64::NEG_INFINITY {
        return Err(Error::SamplerStalled(format!(
            "episode {}: no starting nor continuing state carries mass {s_bar:.3} hours \
             before censoring",
            episode.id
        )));
    }
    Ok(1.0 / (1.0 + (log_cont - log_init).exp()))
}

/// Draws the episode's first state given that its sojourn lasted exactly
/// `s_bar` and ended in a transition into `next`.
fn sample_first_state<R: Rng + ?Sized>(
    params: &ParameterSet,
    msgs: &ForwardMessages,
    episode: &Episode,
    next: usize,
    s_bar: f64,
    rng: &mut R,
) -> Result<usize> {
    let candidates: Vec<usize> = params.transient_states().filter(|&u| u != next).collect();
    let log_w: Vec<f64> = candidates
        .iter()
        .map(|&u| {
            if params.initial[u] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let g = transition_fn(params, u, next, s_bar);
            if g <= 0.0 {
                return f64::NEG_INFINITY;
            }
            params.initial[u].ln()
                + sojourn_ln_pdf(params, u, s_bar)
                + g.ln()
                + log_head_segment(params, msgs, episode, u, s_bar)
        })
        .collect();
    let weights = crate::logspace::normalized_exp(&log_w).ok_or_else(|| {
        Error::SamplerStalled(format!(
            "episode {}: no admissible first state before {next}",
            episode.id
        ))
    })?;
    let dist = WeightedIndex::new(&weights)
        .map_err(|_| Error::SamplerStalled("degenerate first-state weights".into()))?;
    Ok(candidates[dist.sample(rng)])
}

/// Memoized per-state GP log densities of observation index windows.
struct SegDens<'a> {
    params: &'a ParameterSet,
    episode: &'a Episode,
    memo: std::collections::HashMap<(usize, usize, usize), f64>,
}

impl<'a> SegDens<'a> {
    fn new(params: &'a ParameterSet, episode: &'a Episode) -> Self {
        SegDens { params, episode, memo: std::collections::HashMap::new() }
    }

    /// Log GP density under `state` of the observations in `[from_t, to_t)`.
    fn log_window(&mut self, state: usize, from_t: f64, to_t: f64) -> f64 {
        let i0 = self.episode.times.partition_point(|&t| t < from_t);
        let i1 = self.episode.times.partition_point(|&t| t < to_t);
        if i0 >= i1 {
            return 0.0;
        }
        let (params, episode) = (self.params, self.episode);
        *self.memo.entry((state, i0, i1)).or_insert_with(|| {
            let seg = Segment {
                times: episode.times[i0..i1].to_vec(),
                values: episode.values.iter().map(|s| s[i0..i1].to_vec()).collect(),
            };
            segment_log_density(&params.emission[state], &seg)
        })
    }
}

/// Per-episode backward sampler. The absorbing label's entry-time
/// distribution needs an observation-weighted renewal pass over the whole
/// episode, so it is tabulated once here and shared by every draw.
///
/// The label's entry cell weights combine, on midpoint cells of width
/// [`DEFAULT_QUAD_STEP`]: the prior density of some transient path entering
/// the label at the cell, the GP density of the observations each traversed
/// segment would cover, the label dwell density pinned by the censoring
/// time, and the GP density of the trailing observations under the label.
/// A plain truncated dwell draw would place the entry at the prior's
/// location and misattribute mid-episode observations across the boundary.
pub struct BackwardDraws<'a> {
    params: &'a ParameterSet,
    msgs: &'a ForwardMessages,
    episode: &'a Episode,
    /// Log mass per entry cell for the label's entry time (cell width
    /// included); empty when the censoring window is below one cell.
    entry_log_w: Vec<f64>,
    /// Log mass of the label occupying the whole episode.
    log_span: f64,
}

impl<'a> BackwardDraws<'a> {
    pub fn new(
        params: &'a ParameterSet,
        msgs: &'a ForwardMessages,
        episode: &'a Episode,
    ) -> Result<Self> {
        let label = episode.label;
        if !params.is_absorbing(label) {
            return Err(Error::InvalidInput(format!("episode label {label} is not absorbing")));
        }
        let t_c = episode.censor_time;
        if !(t_c > 0.0) || !t_c.is_finite() {
            return Err(Error::InvalidInput(format!("censoring time {t_c} is not usable")));
        }
        let cells = (t_c / DEFAULT_QUAD_STEP).floor() as usize;
        let (entry_log_w, log_span) = if cells == 0 {
            (Vec::new(), f64::NEG_INFINITY)
        } else {
            absorbing_entry_weights(params, episode, cells)
        };
        Ok(BackwardDraws { params, msgs, episode, entry_log_w, log_span })
    }

    /// Samples one latent trajectory consistent with the episode's censoring
    /// time and absorbing label, working backward from the endpoint.
    /// Sojourns sum exactly to the censoring time.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentTrajectory> {
        let label = self.episode.label;
        let t_c = self.episode.censor_time;
        if self.entry_log_w.is_empty() {
            // Censoring window below one quadrature cell: the prior dwell is
            // exact to within the resolution anyone downstream can resolve.
            let p_first =
                initiality_probability(self.params, self.msgs, self.episode, None, t_c)?;
            if p_first >= 1.0 || bernoulli(p_first, rng)? {
                return Ok(LatentTrajectory { states: vec![label], sojourns: vec![t_c] });
            }
            let dwell = tr_sampler(self.params, label, t_c, rng)?;
            return self.extend(label, t_c - dwell, vec![dwell], rng);
        }

        let log_total = log_sum_exp(&self.entry_log_w);
        if log_total == f64::NEG_INFINITY && self.log_span == f64::NEG_INFINITY {
            return Err(Error::SamplerStalled(format!(
                "episode {}: no entry point into the absorbing label carries mass",
                self.episode.id
            )));
        }
        let p_span = if self.log_span == f64::NEG_INFINITY {
            0.0
        } else {
            1.0 / (1.0 + (log_total - self.log_span).exp())
        };
        if p_span >= 1.0 || (p_span > 0.0 && bernoulli(p_span, rng)?) {
            return Ok(LatentTrajectory { states: vec![label], sojourns: vec![t_c] });
        }
        let weights = crate::logspace::normalized_exp(&self.entry_log_w)
            .expect("entry mass was checked above");
        let dist = WeightedIndex::new(&weights).map_err(|e| {
            Error::SamplerStalled(format!(
                "episode {}: absorbing entry weights unusable: {e}",
                self.episode.id
            ))
        })?;
        let cell = dist.sample(rng);
        let jitter: f64 = rng.gen::<f64>();
        let entry = ((cell as f64 + jitter) * DEFAULT_QUAD_STEP)
            .clamp(f64::MIN_POSITIVE, t_c - f64::MIN_POSITIVE);
        self.extend(label, entry, vec![t_c - entry], rng)
    }

    /// Extends a partially built backward trajectory (`sojourns` covers
    /// `[s_bar, t_c]`, most recent segment first) down to time zero.
    fn extend<R: Rng + ?Sized>(
        &self,
        label: usize,
        mut s_bar: f64,
        mut sojourns: Vec<f64>,
        rng: &mut R,
    ) -> Result<LatentTrajectory> {
        let mut states = vec![label];
        let mut next = label;
        loop {
            if states.len() >= BACKWARD_MAX_SEGMENTS {
                return Err(Error::BudgetExceeded(format!(
                    "episode {}: backward sampling exceeded {BACKWARD_MAX_SEGMENTS} segments",
                    self.episode.id
                )));
            }
            let p_first =
                initiality_probability(self.params, self.msgs, self.episode, Some(next), s_bar)?;
            if p_first >= 1.0 || bernoulli(p_first, rng)? {
                let first =
                    sample_first_state(self.params, self.msgs, self.episode, next, s_bar, rng)?;
                states.push(first);
                sojourns.push(s_bar);
                break;
            }
            // Shift by the maximum before leaving log space; the anchored
            // weights carry the whole observation evidence and underflow raw
            // exponentiation on long episodes.
            let log_w = log_occupancy_weights(self.params, self.msgs, s_bar);
            let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = log_w
                .iter()
                .map(|&lw| if top == f64::NEG_INFINITY { 0.0 } else { (lw - top).exp() })
                .collect();
            for u in 0..self.params.n() {
                if !self.params.is_transient(u) || u == next {
                    weights[u] = 0.0;
                }
            }
            let (u, w) = bar_sampler(&weights, self.params, next, s_bar, rng)?;
            states.push(u);
            sojourns.push(w);
            s_bar -= w;
            next = u;
        }
        states.reverse();
        sojourns.reverse();
        Ok(LatentTrajectory { states, sojourns })
    }
}

/// Log weights of the label's entry time on midpoint cells, plus the log
/// weight of the label spanning the whole episode. Built from a renewal
/// recursion over transient entry densities in which every traversed
/// segment also pays the GP density of the observations it covers.
fn absorbing_entry_weights(
    params: &ParameterSet,
    episode: &Episode,
    cells: usize,
) -> (Vec<f64>, f64) {
    let n = params.n();
    let dt = DEFAULT_QUAD_STEP;
    let t_c = episode.censor_time;
    let label = episode.label;
    let mut seg = SegDens::new(params, episode);

    // Kernels out of each transient state: sojourn density times transition
    // probability, at cell midpoints (for first segments starting at zero)
    // and at whole-cell lags (between midpoints).
    let mut log_mid_k = vec![vec![f64::NEG_INFINITY; cells]; n * n];
    let mut log_lag_k = vec![vec![f64::NEG_INFINITY; cells]; n * n];
    for v in params.transient_states() {
        for u in 0..n {
            if u == v {
                continue;
            }
            let mid = &mut log_mid_k[v * n + u];
            for (x, slot) in mid.iter_mut().enumerate() {
                let s = (x as f64 + 0.5) * dt;
                let k = sojourn_pdf(params, v, s) * transition_fn(params, v, u, s);
                if k > 0.0 {
                    *slot = k.ln();
                }
            }
            let lag = &mut log_lag_k[v * n + u];
            for (d, slot) in lag.iter_mut().enumerate().skip(1) {
                let s = d as f64 * dt;
                let k = sojourn_pdf(params, v, s) * transition_fn(params, v, u, s);
                if k > 0.0 {
                    *slot = k.ln();
                }
            }
        }
    }

    // log_e[u][x]: log density of entering transient `u` at the midpoint of
    // cell `x` jointly with the GP density of all observations before it.
    let ln_dt = dt.ln();
    let mut log_e = vec![vec![f64::NEG_INFINITY; cells]; n];
    for x in 0..cells {
        let mid_x = (x as f64 + 0.5) * dt;
        for u in params.transient_states() {
            let mut acc = f64::NEG_INFINITY;
            for v in params.transient_states() {
                if v == u {
                    continue;
                }
                let row_mid = &log_mid_k[v * n + u];
                let row_lag = &log_lag_k[v * n + u];
                if params.initial[v] > 0.0 && row_mid[x] > f64::NEG_INFINITY {
                    acc = log_add(
                        acc,
                        params.initial[v].ln() + row_mid[x] + seg.log_window(v, 0.0, mid_x),
                    );
                }
                for y in 0..x {
                    let le = log_e[v][y];
                    let lk = row_lag[x - y];
                    if le == f64::NEG_INFINITY || lk == f64::NEG_INFINITY {
                        continue;
                    }
                    let mid_y = (y as f64 + 0.5) * dt;
                    acc = log_add(acc, le + ln_dt + lk + seg.log_window(v, mid_y, mid_x));
                }
            }
            log_e[u][x] = acc;
        }
    }

    // Apply the same step once more with the label as the target, then pin
    // the dwell to the censoring time and pay for the trailing observations.
    let mut entry_log_w = vec![f64::NEG_INFINITY; cells];
    for x in 0..cells {
        let mid_x = (x as f64 + 0.5) * dt;
        let mut acc = f64::NEG_INFINITY;
        for v in params.transient_states() {
            let row_mid = &log_mid_k[v * n + label];
            let row_lag = &log_lag_k[v * n + label];
            if params.initial[v] > 0.0 && row_mid[x] > f64::NEG_INFINITY {
                acc = log_add(
                    acc,
                    params.initial[v].ln() + row_mid[x] + seg.log_window(v, 0.0, mid_x),
                );
            }
            for y in 0..x {
                let le = log_e[v][y];
                let lk = row_lag[x - y];
                if le == f64::NEG_INFINITY || lk == f64::NEG_INFINITY {
                    continue;
                }
                let mid_y = (y as f64 + 0.5) * dt;
                acc = log_add(acc, le + ln_dt + lk + seg.log_window(v, mid_y, mid_x));
            }
        }
        if acc == f64::NEG_INFINITY {
            continue;
        }
        let dwell = sojourn_pdf(params, label, t_c - mid_x);
        if dwell <= 0.0 {
            continue;
        }
        entry_log_w[x] =
            acc + ln_dt + dwell.ln() + seg.log_window(label, mid_x, f64::INFINITY);
    }

    let log_span = if params.initial[label] > 0.0 {
        let dwell = sojourn_pdf(params, label, t_c);
        if dwell > 0.0 {
            params.initial[label].ln() + dwell.ln() + seg.log_window(label, 0.0, f64::INFINITY)
        } else {
            f64::NEG_INFINITY
        }
    } else {
        f64::NEG_INFINITY
    };
    (entry_log_w, log_span)
}

/// One-shot convenience wrapper over [`BackwardDraws`].
pub fn backward_sampling<R: Rng + ?Sized>(
    params: &ParameterSet,
    msgs: &ForwardMessages,
    episode: &Episode,
    rng: &mut R,
) -> Result<LatentTrajectory> {
    BackwardDraws::new(params, msgs, episode)?.draw(rng)
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    Bernoulli::new(p.clamp(0.0, 1.0))
        .map(|d| d.sample(rng))
        .map_err(|e| Error::InvalidInput(format!("initiality probability {p}: {e}")))
}
