//! Evaluation harness: detection metrics over scored episodes and the
//! independent oracles (matrix exponential, exhaustive enumeration,
//! Kolmogorov-Smirnov) used to validate the solvers and samplers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::generate::{Episode, LatentTrajectory};
use crate::model::{sojourn_cdf, sojourn_ln_pdf, transition_row};
use crate::params::ParameterSet;

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

/// A risk trace for one episode, paired with its outcome label.
#[derive(Debug, Clone)]
pub struct ScoredEpisode {
    pub id: String,
    /// 0-based absorbing label (0 safe, N-1 catastrophic).
    pub label: usize,
    pub censor_time: f64,
    /// `(time, risk)` snapshots sorted by time.
    pub trace: Vec<(f64, f64)>,
}

impl ScoredEpisode {
    /// An episode counts as positive when it ends in the catastrophic state.
    pub fn is_positive(&self) -> bool {
        self.label != 0
    }
}

/// Threshold-crossing outcome for one episode.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub id: String,
    pub label: usize,
    pub crossed: bool,
    /// First time the risk reached the threshold, strictly before censoring.
    pub crossing_time: Option<f64>,
    pub censor_time: f64,
}

impl DetectionOutcome {
    pub fn is_positive(&self) -> bool {
        self.label != 0
    }
}

/// First time the risk trace reaches `threshold` strictly before censoring.
pub fn detect(scored: &ScoredEpisode, threshold: f64) -> DetectionOutcome {
    debug_assert!(scored.trace.windows(2).all(|w| w[0].0 <= w[1].0), "trace must be sorted");
    let crossing_time = scored
        .trace
        .iter()
        .find(|&&(t, risk)| risk >= threshold && t < scored.censor_time)
        .map(|&(t, _)| t);
    DetectionOutcome {
        id: scored.id.clone(),
        label: scored.label,
        crossed: crossing_time.is_some(),
        crossing_time,
        censor_time: scored.censor_time,
    }
}

/// One operating point of the TPR-vs-PPV curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub ppv: f64,
}

/// TPR-vs-PPV curve with trapezoidal AUC over the TPR axis.
#[derive(Debug, Clone)]
pub struct RocCurve {
    /// Operating points with strictly decreasing thresholds.
    pub points: Vec<RocPoint>,
    /// Integral of PPV over the TPR axis (leftmost point's PPV extends to
    /// TPR = 0, so a constant detector scores exactly the prevalence).
    pub auc: f64,
    /// Thresholds omitted because a rate denominator was zero.
    pub skipped: Vec<f64>,
}

/// Builds the TPR-vs-PPV curve from per-threshold detection outcomes.
///
/// TPR = true positives / positives; PPV = true positives / flagged.
/// Thresholds with zero flagged episodes are omitted (and reported in
/// `skipped`); the input needs at least one positive episode.
pub fn roc_curve(sweep: &[(f64, Vec<DetectionOutcome>)]) -> Result<RocCurve> {
    let mut sweep: Vec<&(f64, Vec<DetectionOutcome>)> = sweep.iter().collect();
    sweep.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    sweep.dedup_by(|a, b| a.0 == b.0);

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (threshold, outcomes) in sweep {
        let positives = outcomes.iter().filter(|o| o.is_positive()).count();
        if positives == 0 {
            return Err(Error::InvalidInput("ROC needs at least one positive episode".into()));
        }
        let flagged = outcomes.iter().filter(|o| o.crossed).count();
        if flagged == 0 {
            skipped.push(*threshold);
            continue;
        }
        let tp = outcomes.iter().filter(|o| o.crossed && o.is_positive()).count();
        points.push(RocPoint {
            threshold: *threshold,
            tpr: tp as f64 / positives as f64,
            ppv: tp as f64 / flagged as f64,
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("ROC sweep produced no operating points".into()));
    }
    let auc = auc_over_tpr(&points);
    Ok(RocCurve { points, auc, skipped })
}

/// Trapezoid of PPV over the TPR axis; the lowest-TPR point's PPV is carried
/// down to TPR = 0.
fn auc_over_tpr(points: &[RocPoint]) -> f64 {
    let mut ordered: Vec<&RocPoint> = points.iter().collect();
    ordered.sort_by(|a, b| a.tpr.partial_cmp(&b.tpr).unwrap());
    let mut auc = ordered[0].tpr * ordered[0].ppv;
    for pair in ordered.windows(2) {
        auc += (pair[1].tpr - pair[0].tpr) * 0.5 * (pair[0].ppv + pair[1].ppv);
    }
    auc
}

/// Mean early-warning lead `E[crossing - T_c]` over catastrophic episodes
/// that crossed; negative values mean warning before the event. `None` when
/// no episode qualifies.
pub fn timeliness(outcomes: &[DetectionOutcome]) -> Option<f64> {
    let leads: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.is_positive() && o.crossed)
        .map(|o| o.crossing_time.unwrap() - o.censor_time)
        .collect();
    if leads.is_empty() {
        None
    } else {
        Some(leads.iter().sum::<f64>() / leads.len() as f64)
    }
}

/// Detection outcomes for every episode at every threshold.
pub fn sweep_detections(
    scored: &[ScoredEpisode],
    thresholds: &[f64],
) -> Vec<(f64, Vec<DetectionOutcome>)> {
    thresholds
        .iter()
        .map(|&thr| (thr, scored.iter().map(|s| detect(s, thr)).collect()))
        .collect()
}

/// Timeliness at the operating point whose TPR is closest to `target_tpr`
/// (ties resolved toward the higher threshold).
pub fn timeliness_at_tpr(
    sweep: &[(f64, Vec<DetectionOutcome>)],
    curve: &RocCurve,
    target_tpr: f64,
) -> Option<f64> {
    let best = curve.points.iter().min_by(|a, b| {
        let da = (a.tpr - target_tpr).abs();
        let db = (b.tpr - target_tpr).abs();
        da.partial_cmp(&db)
            .unwrap()
            .then(b.threshold.partial_cmp(&a.threshold).unwrap())
    })?;
    let outcomes = &sweep.iter().find(|(thr, _)| *thr == best.threshold)?.1;
    timeliness(outcomes)
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov helper
// ---------------------------------------------------------------------------

/// Two-sided KS statistic of sorted samples against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sorted_samples: &[f64], cdf: F) -> f64 {
    let n = sorted_samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted_samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

// ---------------------------------------------------------------------------
// CTMC oracle: matrix exponential of the generator
// ---------------------------------------------------------------------------

/// Generator matrix of the CTMC limit (`shape = 1`, `beta = 0`):
/// `L_ij = rate_i * g_ij(0)` off-diagonal for transient `i`,
/// `L_ii = -rate_i`, and zero rows for the absorbing states.
pub fn ctmc_generator(params: &ParameterSet) -> DMatrix<f64> {
    let n = params.n();
    let mut l = DMatrix::zeros(n, n);
    for i in params.transient_states() {
        let rate = params.sojourn[i].rate;
        let g = transition_row(params, i, 0.0);
        for j in 0..n {
            if j != i {
                l[(i, j)] = rate * g[j];
            }
        }
        l[(i, i)] = -rate;
    }
    l
}

/// Matrix exponential by scaling-and-squaring with a truncated Taylor
/// series; `terms` controls the series length (used by the self-consistency
/// doubling check).
pub fn expm_taylor(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=terms {
        term = (&term * &scaled) / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Transition-probability matrices `exp(L tau)` of the CTMC limit on a
/// grid of horizons. Requires all shapes 1 and all beta 0.
pub fn oracle_ctmc(params: &ParameterSet, taus: &[f64]) -> Vec<DMatrix<f64>> {
    assert!(
        params.sojourn.iter().all(|s| s.shape == 1.0),
        "CTMC oracle needs exponential sojourns (all shapes = 1)"
    );
    assert!(
        params.beta.iter().flatten().all(|&b| b == 0.0),
        "CTMC oracle needs duration-free transitions (all beta = 0)"
    );
    let l = ctmc_generator(params);
    taus.iter().map(|&tau| expm_taylor(&(&l * tau), 40)).collect()
}

// ---------------------------------------------------------------------------
// Enumeration oracles
// ---------------------------------------------------------------------------

/// Budget knobs for the exhaustive enumerators.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationLimits {
    /// Maximum number of visited states per trajectory.
    pub max_states: usize,
    /// Maximum number of partial trajectories explored.
    pub budget: usize,
}

impl Default for EnumerationLimits {
    fn default() -> Self {
        EnumerationLimits { max_states: 6, budget: 10_000_000 }
    }
}

/// Exact posterior `P(X(t_M) = j | y_{1:M})` over latent trajectories
/// discretized to `grid_step`, by exhaustive enumeration.
///
/// Trajectories are state sequences with entry times on the grid; each
/// non-terminal sojourn is weighted by its CDF cell mass and the transition
/// function at the cell midpoint, the ongoing occupancy by its survival
/// probability, and every occupancy by its GP segment density. No censoring
/// information enters; this mirrors what the forward filter conditions on.
pub fn oracle_enumerate(
    params: &ParameterSet,
    episode: &Episode,
    grid_step: f64,
) -> Result<Vec<f64>> {
    oracle_enumerate_with(params, episode, grid_step, &EnumerationLimits::default())
}

/// [`oracle_enumerate`] with explicit limits.
pub fn oracle_enumerate_with(
    params: &ParameterSet,
    episode: &Episode,
    grid_step: f64,
    limits: &EnumerationLimits,
) -> Result<Vec<f64>> {
    if episode.times.is_empty() {
        return Err(Error::InvalidInput("enumeration oracle needs at least one observation".into()));
    }
    if episode.n_obs() > 6 {
        return Err(Error::InvalidInput("enumeration oracle is limited to short prefixes (<= 6 observations)".into()));
    }
    let t_end = *episode.times.last().unwrap();
    let n = params.n();
    let cells = (t_end / grid_step).ceil() as usize;
    let mut mass = vec![0.0f64; n];
    let mut visited = 0usize;

    struct Ctx<'a> {
        params: &'a ParameterSet,
        episode: &'a Episode,
        grid_step: f64,
        t_end: f64,
        cells: usize,
        limits: &'a EnumerationLimits,
    }

    /// Log GP density of the episode's observations belonging to
    /// `[from, to)` under `state` (`to = infinity` marks the ongoing
    /// occupancy, which owns everything up to the last observation). A
    /// transition recorded at a grid point stands for a jump just before
    /// it, so an observation on the boundary belongs to the entered state.
    fn segment_density(ctx: &Ctx, state: usize, from: f64, to: f64) -> f64 {
        let mut times = Vec::new();
        let mut cols = Vec::new();
        for (m, &t) in ctx.episode.times.iter().enumerate() {
            if t >= from && t < to {
                times.push(t);
                cols.push(m);
            }
        }
        if times.is_empty() {
            return 0.0;
        }
        let values = ctx
            .episode
            .values
            .iter()
            .map(|stream| cols.iter().map(|&m| stream[m]).collect())
            .collect();
        crate::emission::segment_log_density(
            &ctx.params.emission[state],
            &crate::emission::Segment { times, values },
        )
    }

    fn recurse(
        ctx: &Ctx,
        state: usize,
        entry_cell: usize,
        depth: usize,
        log_w: f64,
        mass: &mut [f64],
        visited: &mut usize,
    ) -> Result<()> {
        *visited += 1;
        if *visited > ctx.limits.budget {
            return Err(Error::BudgetExceeded(format!(
                "enumeration exceeded {} partial trajectories",
                ctx.limits.budget
            )));
        }
        let entry = entry_cell as f64 * ctx.grid_step;
        // Contribution as the ongoing occupancy at t_end.
        let survive = if ctx.params.is_absorbing(state) {
            0.0
        } else {
            (1.0 - sojourn_cdf(ctx.params, state, ctx.t_end - entry)).ln()
        };
        let leaf = log_w + survive + segment_density(ctx, state, entry, f64::INFINITY);
        mass[state] += leaf.exp();

        if ctx.params.is_absorbing(state) || depth + 1 >= ctx.limits.max_states {
            return Ok(());
        }
        for next_cell in (entry_cell + 1)..=ctx.cells {
            let s = (next_cell - entry_cell) as f64 * ctx.grid_step;
            let cell_mass = sojourn_cdf(ctx.params, state, s)
                - sojourn_cdf(ctx.params, state, s - ctx.grid_step);
            if cell_mass <= 0.0 {
                continue;
            }
            let emit = segment_density(ctx, state, entry, next_cell as f64 * ctx.grid_step);
            let g = transition_row(ctx.params, state, s - 0.5 * ctx.grid_step);
            for next in 0..ctx.params.n() {
                if next == state || g[next] == 0.0 {
                    continue;
                }
                recurse(
                    ctx,
                    next,
                    next_cell,
                    depth + 1,
                    log_w + (cell_mass * g[next]).ln() + emit,
                    mass,
                    visited,
                )?;
            }
        }
        Ok(())
    }

    let ctx = Ctx { params, episode, grid_step, t_end, cells, limits };
    for x1 in 0..n {
        if params.initial[x1] > 0.0 {
            recurse(&ctx, x1, 0, 0, params.initial[x1].ln(), &mut mass, &mut visited)?;
        }
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::FilterDegenerate { step: episode.n_obs(), reason: "enumeration mass is zero".into() });
    }
    Ok(mass.iter().map(|&m| m / total).collect())
}

/// Exhaustively enumerates complete censored trajectories (entry times on a
/// grid, terminal state = label, total duration = censor time) with their
/// unnormalized log-weights. Supports the learning-suite oracles.
///
/// Weight of a trajectory with transition times `e_2 < ... < e_K`:
/// `p°(x_1) * prod_{n<K} [cellmass(s_n) g(s_n - dt/2)] * v_label(s_K) *
/// prod segment densities`.
pub fn enumerate_censored_trajectories(
    params: &ParameterSet,
    episode: &Episode,
    grid_step: f64,
    limits: &EnumerationLimits,
) -> Result<Vec<(LatentTrajectory, f64)>> {
    let t_c = episode.censor_time;
    let cells = (t_c / grid_step).round().max(1.0) as usize;
    let n = params.n();
    let label = episode.label;
    let mut out: Vec<(LatentTrajectory, f64)> = Vec::new();
    let mut visited = 0usize;

    // Same boundary convention as the posterior oracle: segments are
    // `[from, to)`, and the absorbing tail owns every remaining observation.
    let seg_density = |state: usize, from: f64, to: f64| -> f64 {
        let mut times = Vec::new();
        let mut cols = Vec::new();
        for (m, &t) in episode.times.iter().enumerate() {
            if t >= from && t < to {
                times.push(t);
                cols.push(m);
            }
        }
        if times.is_empty() {
            return 0.0;
        }
        let values = episode
            .values
            .iter()
            .map(|stream| cols.iter().map(|&m| stream[m]).collect())
            .collect();
        crate::emission::segment_log_density(
            &params.emission[state],
            &crate::emission::Segment { times, values },
        )
    };

    // states/entries hold the transient prefix; the label occupies the tail.
    fn recurse(
        params: &ParameterSet,
        label: usize,
        grid_step: f64,
        cells: usize,
        t_c: f64,
        limits: &EnumerationLimits,
        seg_density: &dyn Fn(usize, f64, f64) -> f64,
        prefix_states: &mut Vec<usize>,
        prefix_entries: &mut Vec<usize>,
        log_w: f64,
        out: &mut Vec<(LatentTrajectory, f64)>,
        visited: &mut usize,
    ) -> Result<()> {
        *visited += 1;
        if *visited > limits.budget {
            return Err(Error::BudgetExceeded(format!(
                "censored enumeration exceeded {} partial trajectories",
                limits.budget
            )));
        }
        let depth = prefix_states.len();
        let entry_cell = *prefix_entries.last().unwrap();
        let entry = entry_cell as f64 * grid_step;
        let cur = *prefix_states.last().unwrap();

        if cur == label {
            // Complete: the absorbing sojourn runs to exactly T_c.
            let s_last = t_c - entry;
            if s_last > 0.0 {
                let lw = log_w
                    + sojourn_ln_pdf(params, label, s_last)
                    + seg_density(label, entry, f64::INFINITY);
                let states = prefix_states.clone();
                let mut sojourns: Vec<f64> = prefix_entries
                    .windows(2)
                    .map(|w| (w[1] - w[0]) as f64 * grid_step)
                    .collect();
                sojourns.push(s_last);
                debug_assert_eq!(sojourns.len(), states.len());
                out.push((LatentTrajectory { states, sojourns }, lw));
            }
            return Ok(());
        }
        if depth >= limits.max_states {
            return Ok(());
        }
        for next_cell in (entry_cell + 1)..cells + 1 {
            let s = (next_cell - entry_cell) as f64 * grid_step;
            let cell_mass =
                sojourn_cdf(params, cur, s) - sojourn_cdf(params, cur, s - grid_step);
            if cell_mass <= 0.0 {
                continue;
            }
            let to = next_cell as f64 * grid_step;
            if to >= t_c {
                break; // the absorbing tail needs strictly positive duration
            }
            let emit = seg_density(cur, entry, to);
            let g = transition_row(params, cur, s - 0.5 * grid_step);
            for next in 0..params.n() {
                let valid_next = next != cur && (params.is_transient(next) || next == label);
                if !valid_next || g[next] == 0.0 {
                    continue;
                }
                prefix_states.push(next);
                prefix_entries.push(next_cell);
                recurse(
                    params, label, grid_step, cells, t_c, limits, seg_density,
                    prefix_states, prefix_entries,
                    log_w + (cell_mass * g[next]).ln() + emit,
                    out, visited,
                )?;
                prefix_states.pop();
                prefix_entries.pop();
            }
        }
        Ok(())
    }

    for x1 in 0..n {
        let valid_first = params.initial[x1] > 0.0 && (params.is_transient(x1) || x1 == label);
        if !valid_first {
            continue;
        }
        let mut states = vec![x1];
        let mut entries = vec![0usize];
        recurse(
            params, label, grid_step, cells, t_c, limits, &seg_density,
            &mut states, &mut entries, params.initial[x1].ln(), &mut out, &mut visited,
        )?;
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no discretized trajectory is consistent with episode {}",
            episode.id
        )));
    }
    Ok(out)
}
