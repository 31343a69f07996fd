//! Block maximization of the Monte Carlo EM objective: closed-form weighted
//! estimators where they exist, iterative ascent for the transition logits
//! and the GP amplitude and length scale. Every block keeps the previous
//! parameters unless its own objective component strictly improves, so the
//! overall objective never decreases.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::emission::{segment_log_density, Segment};
use crate::error::{Error, Result};
use crate::generate::{partition_by_occupancy, Episode};
use crate::params::{GammaSojourn, GpHyper, ParameterSet};

use super::estep::{ImportanceWeights, SampledTrajectories};

/// Floor applied to initial-state frequencies so later importance ratios
/// stay finite.
const INITIAL_FLOOR: f64 = 1e-9;
/// Gamma shape search window.
const SHAPE_BOUNDS: (f64, f64) = (1e-3, 1e4);
/// Observation budget for the GP hyperparameter line searches; the full
/// segment set is still used for the acceptance check.
const GP_SEARCH_OBS_CAP: usize = 400;

/// What the maximization step did, block by block.
#[derive(Debug, Clone)]
pub struct MStepReport {
    /// Objective (same normalization as the E-step) under the incoming
    /// parameters.
    pub q_before: f64,
    /// Objective under the returned parameters.
    pub q_after: f64,
    pub initial_accepted: bool,
    pub sojourn_accepted: bool,
    pub transition_accepted: bool,
    pub emission_accepted: bool,
}

/// Weighted sufficient statistics pooled over every sampled trajectory.
struct Stats {
    init_mass: Vec<f64>,
    soj_w: Vec<f64>,
    soj_ws: Vec<f64>,
    soj_wlns: Vec<f64>,
    /// Per transient row: (duration, destination, weight) of each jump.
    jumps: Vec<Vec<(f64, usize, f64)>>,
    /// Per state: (weight, observation segment) for occupancies that cover
    /// at least one observation.
    segments: Vec<Vec<(f64, Segment)>>,
}

fn collect_stats(
    samples: &SampledTrajectories,
    dataset: &[Episode],
    weights: &ImportanceWeights,
    n: usize,
) -> Stats {
    let mut st = Stats {
        init_mass: vec![0.0; n],
        soj_w: vec![0.0; n],
        soj_ws: vec![0.0; n],
        soj_wlns: vec![0.0; n],
        jumps: vec![Vec::new(); n],
        segments: vec![Vec::new(); n],
    };
    for (d, (ep, episode)) in samples.episodes.iter().zip(dataset).enumerate() {
        for (g, traj) in ep.trajectories.iter().enumerate() {
            let w = weights.weights[d][g];
            if w <= 0.0 {
                continue;
            }
            let k = traj.states.len();
            st.init_mass[traj.states[0]] += w;
            let groups = partition_by_occupancy(traj, &episode.times);
            for nn in 0..k {
                let state = traj.states[nn];
                let s = traj.sojourns[nn];
                st.soj_w[state] += w;
                st.soj_ws[state] += w * s;
                st.soj_wlns[state] += w * s.ln();
                if nn + 1 < k {
                    st.jumps[state].push((s, traj.states[nn + 1], w));
                }
                if !groups[nn].is_empty() {
                    let seg = Segment {
                        times: groups[nn].iter().map(|&m| episode.times[m]).collect(),
                        values: episode
                            .values
                            .iter()
                            .map(|stream| groups[nn].iter().map(|&m| stream[m]).collect())
                            .collect(),
                    };
                    st.segments[state].push((w, seg));
                }
            }
        }
    }
    st
}

fn q_initial(stats: &Stats, initial: &[f64]) -> f64 {
    stats
        .init_mass
        .iter()
        .zip(initial)
        .map(|(&m, &p)| {
            if m == 0.0 {
                0.0
            } else if p > 0.0 {
                m * p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .sum()
}

fn q_sojourn_state(stats: &Stats, state: usize, lambda: &GammaSojourn) -> f64 {
    let (k, r) = (lambda.shape, lambda.rate);
    stats.soj_w[state] * (k * r.ln() - ln_gamma(k)) + (k - 1.0) * stats.soj_wlns[state]
        - r * stats.soj_ws[state]
}

/// Log softmax transition probability for a candidate logit row.
fn row_log_prob(eta: &[f64], beta: &[f64], targets: &[usize], s: f64, dest: usize) -> f64 {
    let logits: Vec<f64> = targets.iter().map(|&j| eta[j] + beta[j] * s).collect();
    let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = logits.iter().map(|&l| (l - hi).exp()).sum();
    let own = eta[dest] + beta[dest] * s;
    own - hi - norm.ln()
}

fn q_transition_row(
    jumps: &[(f64, usize, f64)],
    eta: &[f64],
    beta: &[f64],
    targets: &[usize],
) -> f64 {
    jumps.iter().map(|&(s, dest, w)| w * row_log_prob(eta, beta, targets, s, dest)).sum()
}

fn q_emission_state(segments: &[(f64, Segment)], hyper: &GpHyper) -> f64 {
    segments.iter().map(|(w, seg)| w * segment_log_density(hyper, seg)).sum()
}

/// Solves ln k - digamma(k) = c for the Gamma shape.
fn gamma_shape_mle(c: f64) -> f64 {
    if !(c > 0.0) {
        return SHAPE_BOUNDS.1;
    }
    let mut k = ((3.0 - c) + ((c - 3.0) * (c - 3.0) + 24.0 * c).sqrt()) / (12.0 * c);
    if !k.is_finite() || k <= 0.0 {
        k = 1.0;
    }
    for _ in 0..60 {
        let f = k.ln() - digamma(k) - c;
        let fp = 1.0 / k - trigamma(k);
        if fp == 0.0 {
            break;
        }
        let next = (k - f / fp).clamp(k / 10.0, k * 10.0);
        if !next.is_finite() || next <= 0.0 {
            break;
        }
        let done = (next - k).abs() <= 1e-12 * k;
        k = next;
        if done {
            break;
        }
    }
    k.clamp(SHAPE_BOUNDS.0, SHAPE_BOUNDS.1)
}

/// Trigamma via the ascending recurrence into the asymptotic series.
fn trigamma(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut z = x;
    while z < 10.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    acc + inv * (1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0)))
}

/// Projected gradient ascent on one transition row's logits. The objective
/// is concave; beta stays nonnegative; the gauge pins the eta mean to zero
/// and the beta minimum to zero without changing the probabilities.
fn fit_transition_row(
    jumps: &[(f64, usize, f64)],
    n: usize,
    row: usize,
    eta_prev: &[f64],
    beta_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let targets: Vec<usize> = (0..n).filter(|&j| j != row).collect();
    let total_w: f64 = jumps.iter().map(|&(_, _, w)| w).sum();
    if total_w <= 0.0 {
        return (eta_prev.to_vec(), beta_prev.to_vec());
    }
    let gauge = |eta: &mut [f64], beta: &mut [f64]| {
        let mean = targets.iter().map(|&j| eta[j]).sum::<f64>() / targets.len() as f64;
        let min = targets.iter().map(|&j| beta[j]).fold(f64::INFINITY, f64::min);
        for &j in &targets {
            eta[j] -= mean;
            beta[j] -= min;
        }
    };
    let mut eta = eta_prev.to_vec();
    let mut beta = beta_prev.to_vec();
    gauge(&mut eta, &mut beta);
    let mut obj = q_transition_row(jumps, &eta, &beta, &targets);
    let mut step = 1.0 / total_w;
    for _ in 0..500 {
        let mut g_eta = vec![0.0; n];
        let mut g_beta = vec![0.0; n];
        for &(s, dest, w) in jumps {
            let logits: Vec<f64> = targets.iter().map(|&j| eta[j] + beta[j] * s).collect();
            let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = logits.iter().map(|&l| (l - hi).exp()).sum();
            for (ti, &j) in targets.iter().enumerate() {
                let p = (logits[ti] - hi).exp() / norm;
                let resid = if j == dest { 1.0 - p } else { -p };
                g_eta[j] += w * resid;
                g_beta[j] += w * s * resid;
            }
        }
        let mut improved = false;
        while step >= 1e-14 {
            let mut cand_eta = eta.clone();
            let mut cand_beta = beta.clone();
            for &j in &targets {
                cand_eta[j] = (eta[j] + step * g_eta[j]).clamp(-30.0, 30.0);
                cand_beta[j] = (beta[j] + step * g_beta[j]).clamp(0.0, 50.0);
            }
            gauge(&mut cand_eta, &mut cand_beta);
            let cand_obj = q_transition_row(jumps, &cand_eta, &cand_beta, &targets);
            if cand_obj > obj {
                let gain = cand_obj - obj;
                eta = cand_eta;
                beta = cand_beta;
                obj = cand_obj;
                step *= 1.3;
                improved = gain > 1e-12 * (1.0 + obj.abs());
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (eta, beta)
}

/// Weighted stream means, lag-zero residual covariance (trace-normalized,
/// eigenvalue-floored), then sequential golden-section search over the
/// amplitude and length scale.
fn fit_emission_state(segments: &[(f64, Segment)], prev: &GpHyper) -> GpHyper {
    let q_streams = prev.mean.len();
    let mut mean = prev.mean.clone();
    let mut w_per_stream = vec![0.0; q_streams];
    let mut wy_per_stream = vec![0.0; q_streams];
    for (w, seg) in segments {
        for (q, stream) in seg.values.iter().enumerate() {
            for v in stream.iter().flatten() {
                w_per_stream[q] += w;
                wy_per_stream[q] += w * v;
            }
        }
    }
    for q in 0..q_streams {
        if w_per_stream[q] > 0.0 {
            mean[q] = wy_per_stream[q] / w_per_stream[q];
        }
    }

    // Lag-zero residual second moments, per stream pair, normalized by the
    // weight actually observed for that pair.
    let mut cross = vec![vec![0.0; q_streams]; q_streams];
    let mut cross_w = vec![vec![0.0; q_streams]; q_streams];
    for (w, seg) in segments {
        for m in 0..seg.times.len() {
            for qa in 0..q_streams {
                let Some(ya) = seg.values[qa][m] else { continue };
                for qb in 0..q_streams {
                    let Some(yb) = seg.values[qb][m] else { continue };
                    cross[qa][qb] += w * (ya - mean[qa]) * (yb - mean[qb]);
                    cross_w[qa][qb] += w;
                }
            }
        }
    }
    let diag_ok = (0..q_streams).all(|q| cross_w[q][q] > 0.0 && cross[q][q] > 0.0);
    let task_cov = if diag_ok {
        let raw = nalgebra::DMatrix::from_fn(q_streams, q_streams, |r, c| {
            if cross_w[r][c] > 0.0 {
                cross[r][c] / cross_w[r][c]
            } else {
                0.0
            }
        });
        let sym = (&raw + raw.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        let floor = 1e-6 * eig.eigenvalues.iter().cloned().fold(1e-12, f64::max);
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        let rebuilt =
            &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let trace = rebuilt.trace();
        let scaled = rebuilt * (q_streams as f64 / trace);
        (0..q_streams)
            .map(|r| {
                (0..q_streams)
                    .map(|c| 0.5 * (scaled[(r, c)] + scaled[(c, r)]))
                    .collect()
            })
            .collect()
    } else {
        prev.task_cov.clone()
    };

    // Bound the line-search cost; acceptance still checks the full set.
    let mut search: Vec<&(f64, Segment)> = Vec::new();
    let mut obs_budget = 0usize;
    for pair in segments {
        search.push(pair);
        obs_budget += pair.1.times.len();
        if obs_budget >= GP_SEARCH_OBS_CAP {
            break;
        }
    }
    let pooled_var = if diag_ok {
        (0..q_streams).map(|q| cross[q][q] / cross_w[q][q]).sum::<f64>() / q_streams as f64
    } else {
        prev.sigma * prev.sigma
    };
    let sigma_hat = pooled_var.sqrt().max(1e-6);
    let score = |sigma: f64, length_scale: f64| {
        let hyper = GpHyper {
            mean: mean.clone(),
            sigma,
            length_scale,
            task_cov: task_cov.clone(),
            jitter: prev.jitter,
        };
        search.iter().map(|(w, seg)| w * segment_log_density(&hyper, seg)).sum::<f64>()
    };
    let mut gap_lo = f64::INFINITY;
    let mut span_hi = 0.0f64;
    for (_, seg) in segments {
        for pair in seg.times.windows(2) {
            gap_lo = gap_lo.min(pair[1] - pair[0]);
        }
        if let (Some(first), Some(last)) = (seg.times.first(), seg.times.last()) {
            span_hi = span_hi.max(last - first);
        }
    }
    let l_bracket = if span_hi > 0.0 && gap_lo.is_finite() {
        Some(((0.25 * gap_lo).max(1e-4).ln(), (2.0 * span_hi).ln()))
    } else {
        None
    };
    // Length scale first with the moment amplitude (which does not depend
    // on the correlation structure), then the amplitude, then a length
    // refresh; searching the amplitude under a stale length scale lets
    // spurious correlation inflate it.
    let mut length_scale = prev.length_scale;
    let mut sigma = sigma_hat;
    if let Some((lo, hi)) = l_bracket {
        length_scale = golden_max(lo, hi, 25, |l| score(sigma, l));
    }
    sigma = golden_max((sigma_hat / 4.0).ln(), (sigma_hat * 4.0).ln(), 25, |s| {
        score(s, length_scale)
    });
    if let Some((lo, hi)) = l_bracket {
        length_scale = golden_max(lo, hi, 25, |l| score(sigma, l));
    }
    GpHyper { mean, sigma, length_scale, task_cov, jitter: prev.jitter }
}

/// Golden-section maximization in the log domain.
fn golden_max(lo_ln: f64, hi_ln: f64, iters: usize, f: impl Fn(f64) -> f64) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo_ln, hi_ln);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c.exp());
    let mut fd = f(d.exp());
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d.exp());
        }
    }
    (0.5 * (a + b)).exp()
}

/// One maximization sweep. Each block's candidate is kept only when its own
/// objective component strictly improves, so the returned parameters never
/// score below `prev` on the same trajectory set and weights.
pub fn m_step(
    samples: &SampledTrajectories,
    dataset: &[Episode],
    weights: &ImportanceWeights,
    prev: &ParameterSet,
) -> Result<(ParameterSet, MStepReport)> {
    if samples.episodes.len() != dataset.len() || weights.weights.len() != dataset.len() {
        return Err(Error::InvalidInput(format!(
            "m-step shape mismatch: {} sample sets, {} episodes, {} weight rows",
            samples.episodes.len(),
            dataset.len(),
            weights.weights.len()
        )));
    }
    let g_count = samples.per_episode().max(1) as f64;
    let n = prev.n();
    let stats = collect_stats(samples, dataset, weights, n);
    let mut next = prev.clone();
    let mut q_before = 0.0;
    let mut q_after = 0.0;

    // Initial distribution: floored weighted frequencies.
    let total_init: f64 = stats.init_mass.iter().sum();
    let mut initial_accepted = false;
    {
        let before = q_initial(&stats, &prev.initial);
        q_before += before;
        let mut after = before;
        if total_init > 0.0 {
            let mut cand: Vec<f64> =
                stats.init_mass.iter().map(|&m| (m / total_init).max(INITIAL_FLOOR)).collect();
            let norm: f64 = cand.iter().sum();
            for p in &mut cand {
                *p /= norm;
            }
            let cand_q = q_initial(&stats, &cand);
            if cand_q > before {
                next.initial = cand;
                after = cand_q;
                initial_accepted = true;
            }
        }
        q_after += after;
    }

    // Sojourn Gamma laws, one state at a time.
    let mut sojourn_accepted = false;
    for state in 0..n {
        let before = q_sojourn_state(&stats, state, &prev.sojourn[state]);
        q_before += before;
        let mut after = before;
        if stats.soj_w[state] > 0.0 {
            let mean = stats.soj_ws[state] / stats.soj_w[state];
            let mean_ln = stats.soj_wlns[state] / stats.soj_w[state];
            let c = mean.ln() - mean_ln;
            let shape = gamma_shape_mle(c);
            let cand = GammaSojourn { shape, rate: (shape / mean).max(1e-9) };
            let cand_q = q_sojourn_state(&stats, state, &cand);
            if cand_q > before {
                next.sojourn[state] = cand;
                after = cand_q;
                sojourn_accepted = true;
            }
        }
        q_after += after;
    }

    // Transition logits, one transient row at a time.
    let mut transition_accepted = false;
    for row in prev.transient_states().collect::<Vec<_>>() {
        let targets: Vec<usize> = (0..n).filter(|&j| j != row).collect();
        let before = q_transition_row(&stats.jumps[row], &prev.eta[row], &prev.beta[row], &targets);
        q_before += before;
        let mut after = before;
        if !stats.jumps[row].is_empty() {
            let (eta, beta) =
                fit_transition_row(&stats.jumps[row], n, row, &prev.eta[row], &prev.beta[row]);
            let cand_q = q_transition_row(&stats.jumps[row], &eta, &beta, &targets);
            if cand_q > before {
                next.eta[row] = eta;
                next.beta[row] = beta;
                after = cand_q;
                transition_accepted = true;
            }
        }
        q_after += after;
    }

    // Emission hyperparameters, one state at a time.
    let mut emission_accepted = false;
    for state in 0..n {
        let before = q_emission_state(&stats.segments[state], &prev.emission[state]);
        q_before += before;
        let mut after = before;
        if !stats.segments[state].is_empty() {
            let cand = fit_emission_state(&stats.segments[state], &prev.emission[state]);
            let cand_q = q_emission_state(&stats.segments[state], &cand);
            if cand_q > before {
                next.emission[state] = cand;
                after = cand_q;
                emission_accepted = true;
            }
        }
        q_after += after;
    }

    next.validate()?;
    Ok((
        next,
        MStepReport {
            q_before: q_before / g_count,
            q_after: q_after / g_count,
            initial_accepted,
            sojourn_accepted,
            transition_accepted,
            emission_accepted,
        },
    ))
}
