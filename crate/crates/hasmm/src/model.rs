//! Sojourn distributions, duration-dependent transition functions, and
//! semi-Markov kernels.
//!
//! The chain sits in state `i` for a Gamma sojourn `S ~ Gamma(shape_i, rate_i)`,
//! then jumps to `j` with probability `g_ij(s)` (a multinomial-logistic
//! function of the realized sojourn `s`, excluding the self-transition).
//! Absorbing states never leave. The kernels computed here:
//!
//! - `g_ij(s)`: next-state probabilities given sojourn `s` ([`transition_fn`]);
//! - `gbar_ij(s) = E[g_ij(S) | S <= s]`: sojourn-averaged transition
//!   probabilities ([`mean_transition_fn`]);
//! - `Q_ij(s) = gbar_ij(s) * V_i(s)`: the semi-Markov kernel, the joint
//!   probability of jumping to `j` with a sojourn at most `s`
//!   ([`semi_markov_kernel`]);
//! - `Qbar_ij(tau, s_lo, s_hi)`: kernel increments over a horizon `tau`,
//!   weighted by where in `[s_lo, s_hi]` the current sojourn already sits
//!   ([`truncated_kernel`]) -- the driving kernel of the interval
//!   transition-probability solver.
//!
//! Quadratures weight left-endpoint integrand values by exact Gamma-CDF cell
//! masses `V((x+1)h) - V(xh)`. This matches a left-Riemann discretization
//! term for term, keeps rows of `gbar` summing to one exactly, and stays
//! finite for shapes below one where the density blows up at the origin.

use statrs::distribution::{Continuous, ContinuousCDF, Gamma};

use crate::params::ParameterSet;

/// Default quadrature step (hours) for sojourn-averaged kernels.
pub const DEFAULT_QUAD_STEP: f64 = 0.1;

/// When the sojourn CDF is this close to 1, the conditional-residual factor
/// `1/(1 - V(s))` is treated as having no remaining mass.
const TAIL_EPS: f64 = 1e-12;

fn gamma(params: &ParameterSet, state: usize) -> Gamma {
    let lambda = &params.sojourn[state];
    Gamma::new(lambda.shape, lambda.rate).expect("validated shape/rate")
}

/// Gamma sojourn density `v_i(s)` for `state`.
///
/// Panics if `s` is negative or the state index is out of range.
pub fn sojourn_pdf(params: &ParameterSet, state: usize, s: f64) -> f64 {
    assert!(state < params.n(), "state index {state} out of range");
    assert!(s >= 0.0, "sojourn duration must be nonnegative, got {s}");
    let shape = params.sojourn[state].shape;
    if s == 0.0 {
        // statrs is not consistent at the origin across shapes; pin the limit.
        return if shape < 1.0 {
            f64::INFINITY
        } else if shape == 1.0 {
            params.sojourn[state].rate
        } else {
            0.0
        };
    }
    gamma(params, state).pdf(s)
}

/// Log sojourn density; `-inf` where the density vanishes.
pub fn sojourn_ln_pdf(params: &ParameterSet, state: usize, s: f64) -> f64 {
    assert!(state < params.n(), "state index {state} out of range");
    assert!(s >= 0.0, "sojourn duration must be nonnegative, got {s}");
    if s == 0.0 {
        return sojourn_pdf(params, state, s).ln();
    }
    gamma(params, state).ln_pdf(s)
}

/// Gamma sojourn CDF `V_i(s)` for `state`.
pub fn sojourn_cdf(params: &ParameterSet, state: usize, s: f64) -> f64 {
    assert!(state < params.n(), "state index {state} out of range");
    assert!(s >= 0.0, "sojourn duration must be nonnegative, got {s}");
    if s == 0.0 {
        return 0.0;
    }
    if s == f64::INFINITY {
        return 1.0;
    }
    gamma(params, state).cdf(s)
}

/// Mean sojourn duration of `state` (shape over rate).
pub fn sojourn_mean(params: &ParameterSet, state: usize) -> f64 {
    assert!(state < params.n(), "state index {state} out of range");
    let lambda = &params.sojourn[state];
    lambda.shape / lambda.rate
}

/// Quantile of the sojourn distribution (inverse CDF).
pub fn sojourn_quantile(params: &ParameterSet, state: usize, p: f64) -> f64 {
    assert!((0.0..1.0).contains(&p), "quantile level must be in [0,1)");
    if p == 0.0 {
        return 0.0;
    }
    gamma(params, state).inverse_cdf(p)
}

/// Next-state probability row `g_i.(s)` for state `i` after sojourn `s`.
///
/// Transient rows are a softmax of `eta_ij + beta_ij * s` over `j != i`
/// (the self-transition is excluded and gets probability zero); absorbing
/// rows are a point mass on `i`.
pub fn transition_row(params: &ParameterSet, i: usize, s: f64) -> Vec<f64> {
    assert!(i < params.n(), "state index {i} out of range");
    assert!(s >= 0.0, "sojourn duration must be nonnegative, got {s}");
    let n = params.n();
    let mut row = vec![0.0; n];
    if params.is_absorbing(i) {
        row[i] = 1.0;
        return row;
    }
    // Stabilized softmax over the off-diagonal logits.
    let mut hi = f64::NEG_INFINITY;
    for j in 0..n {
        if j != i {
            let z = params.eta[i][j] + params.beta[i][j] * s;
            if z > hi {
                hi = z;
            }
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        if j != i {
            let e = (params.eta[i][j] + params.beta[i][j] * s - hi).exp();
            row[j] = e;
            total += e;
        }
    }
    for v in &mut row {
        *v /= total;
    }
    row
}

/// Single entry `g_ij(s)` of [`transition_row`].
pub fn transition_fn(params: &ParameterSet, i: usize, j: usize, s: f64) -> f64 {
    assert!(j < params.n(), "state index {j} out of range");
    transition_row(params, i, s)[j]
}

/// Sojourn-averaged transition row `gbar_i.(s) = E[g_i.(S) | S <= s]`,
/// computed by midpoint quadrature against exact CDF cell masses with the
/// given step. The row sums to one exactly; `s = 0` (or an `s` carrying no
/// CDF mass) returns the limit `g_i.(0)`.
pub fn mean_transition_row_with_step(
    params: &ParameterSet,
    i: usize,
    s: f64,
    step: f64,
) -> Vec<f64> {
    assert!(params.is_transient(i), "mean transition row needs a transient state, got {i}");
    assert!(s >= 0.0, "duration must be nonnegative, got {s}");
    assert!(step > 0.0, "quadrature step must be positive");
    let total_mass = sojourn_cdf(params, i, s);
    if s == 0.0 || total_mass <= 0.0 {
        return transition_row(params, i, 0.0);
    }
    let n = params.n();
    let mut acc = vec![0.0; n];
    let mut x = 0usize;
    let mut v_left = 0.0;
    loop {
        let left = x as f64 * step;
        if left >= s {
            break;
        }
        let right = (left + step).min(s);
        let v_right = sojourn_cdf(params, i, right);
        let mass = v_right - v_left;
        if mass > 0.0 {
            let g = transition_row(params, i, 0.5 * (left + right));
            for j in 0..n {
                acc[j] += g[j] * mass;
            }
        }
        v_left = v_right;
        x += 1;
    }
    // Normalizing by the accumulated mass (== V(s) by telescoping) keeps the
    // row summing to 1 exactly.
    let norm: f64 = acc.iter().sum();
    if norm <= 0.0 {
        return transition_row(params, i, 0.0);
    }
    for v in &mut acc {
        *v /= norm;
    }
    acc
}

/// Single entry `gbar_ij(s)` at the default quadrature step.
pub fn mean_transition_fn(params: &ParameterSet, i: usize, j: usize, s: f64) -> f64 {
    assert!(j < params.n(), "state index {j} out of range");
    mean_transition_row_with_step(params, i, s, DEFAULT_QUAD_STEP)[j]
}

/// Semi-Markov kernel `Q_ij(s) = gbar_ij(s) * V_i(s)`: the joint probability
/// that state `i`'s sojourn is at most `s` and the jump goes to `j`.
pub fn semi_markov_kernel(params: &ParameterSet, i: usize, j: usize, s: f64) -> f64 {
    if params.is_absorbing(i) {
        return 0.0;
    }
    if s == 0.0 {
        return 0.0;
    }
    mean_transition_fn(params, i, j, s) * sojourn_cdf(params, i, s)
}

/// Truncated kernel `Qbar_ij(tau, s_lo, s_hi)`: the mass of a transition to
/// `j` within the next `tau` hours, integrated over current elapsed sojourns
/// `s` in `[s_lo, s_hi]`,
///
/// ```text
/// Qbar_ij(tau, s_lo, s_hi) = Int_{s_lo}^{s_hi} (Q_ij(s+tau) - Q_ij(s)) / (1 - V_i(s)) dV_i(s).
/// ```
///
/// The integrand is the conditional kernel increment given survival to `s`;
/// elapsed times are weighted by the sojourn measure. The result is an
/// unnormalized mass: zero when `tau = 0` or the window is empty, at most
/// the window's own CDF mass otherwise. (The interval-transition solver uses
/// the window-normalized version of this quantity; see `volterra`.)
///
/// Panics when `s_lo > s_hi` or `tau < 0`.
pub fn truncated_kernel(
    params: &ParameterSet,
    i: usize,
    j: usize,
    tau: f64,
    s_lo: f64,
    s_hi: f64,
) -> f64 {
    truncated_kernel_with_step(params, i, j, tau, s_lo, s_hi, DEFAULT_QUAD_STEP)
}

/// [`truncated_kernel`] with an explicit quadrature step (for refinement tests).
pub fn truncated_kernel_with_step(
    params: &ParameterSet,
    i: usize,
    j: usize,
    tau: f64,
    s_lo: f64,
    s_hi: f64,
    step: f64,
) -> f64 {
    assert!(i < params.n() && j < params.n(), "state index out of range");
    assert!(tau >= 0.0, "horizon must be nonnegative, got {tau}");
    assert!(s_lo >= 0.0 && s_lo <= s_hi, "need 0 <= s_lo <= s_hi, got [{s_lo}, {s_hi}]");
    assert!(step > 0.0, "quadrature step must be positive");
    if params.is_absorbing(i) || tau == 0.0 || s_lo == s_hi {
        return 0.0;
    }

    // Snap everything to the fine grid and build the cumulative kernel
    // Q_ij(x * step) once; each prefix value is the cell-mass quadrature of
    // g_ij against the sojourn measure, so Q_ij(s + tau) - Q_ij(s) is a
    // single subtraction per cell.
    let y_lo = (s_lo / step).round() as usize;
    let y_hi = ((s_hi / step).round() as usize).max(y_lo + 1);
    let a = (tau / step).round().max(1.0) as usize;
    let x_max = y_hi + a;

    let mut v = vec![0.0; x_max + 1];
    for (x, vx) in v.iter_mut().enumerate() {
        *vx = sojourn_cdf(params, i, x as f64 * step);
    }
    let mut q_prefix = vec![0.0; x_max + 1];
    for x in 0..x_max {
        let gj = transition_fn(params, i, j, (x as f64 + 0.5) * step);
        q_prefix[x + 1] = q_prefix[x] + gj * (v[x + 1] - v[x]);
    }

    let mut total = 0.0;
    for y in y_lo..y_hi {
        if v[y] > 1.0 - TAIL_EPS {
            continue; // no surviving mass this deep in the tail
        }
        let mass = v[y + 1] - v[y];
        total += mass * (q_prefix[y + a] - q_prefix[y]) / (1.0 - v[y]);
    }
    total.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GammaSojourn, GpHyper, ParameterSet};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn params_with(sojourn: Vec<GammaSojourn>, eta: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> ParameterSet {
        let n = sojourn.len();
        let p = ParameterSet {
            n_states: n,
            sojourn,
            initial: {
                let mut v = vec![0.0; n];
                v[1] = 1.0;
                v
            },
            eta,
            beta,
            emission: (0..n)
                .map(|i| GpHyper {
                    mean: vec![i as f64],
                    sigma: 1.0,
                    length_scale: 1.0,
                    task_cov: vec![vec![1.0]],
                    jitter: None,
                })
                .collect(),
            zeta: 1.0,
        };
        p.validate().unwrap();
        p
    }

    fn three_state() -> ParameterSet {
        params_with(
            vec![
                GammaSojourn { shape: 2.0, rate: 0.4 },
                GammaSojourn { shape: 2.0, rate: 0.25 },
                GammaSojourn { shape: 1.5, rate: 0.5 },
            ],
            vec![vec![0.0; 3], vec![0.4, 0.0, -0.2], vec![0.0; 3]],
            vec![vec![0.0; 3], vec![0.0, 0.0, 0.08], vec![0.0; 3]],
        )
    }

    #[test]
    fn pdf_boundary_values() {
        let p = params_with(
            vec![
                GammaSojourn { shape: 1.0, rate: 0.5 },
                GammaSojourn { shape: 2.0, rate: 1.0 },
                GammaSojourn { shape: 1.0, rate: 1.0 },
            ],
            vec![vec![0.0; 3]; 3],
            vec![vec![0.0; 3]; 3],
        );
        // Exponential density at zero equals the rate; shape > 1 vanishes.
        assert_relative_eq!(sojourn_pdf(&p, 0, 0.0), 0.5);
        assert_relative_eq!(sojourn_pdf(&p, 1, 0.0), 0.0);
    }

    #[test]
    fn pdf_integrates_to_one() {
        // Trapezoid quadrature oracle over [0, 200] for shape 2.5, rate 0.3.
        let p = params_with(
            vec![
                GammaSojourn { shape: 2.5, rate: 0.3 },
                GammaSojourn { shape: 2.5, rate: 0.3 },
                GammaSojourn { shape: 2.5, rate: 0.3 },
            ],
            vec![vec![0.0; 3]; 3],
            vec![vec![0.0; 3]; 3],
        );
        let h = 1e-3;
        let steps = (200.0 / h) as usize;
        let mut integral = 0.0;
        let mut prev = sojourn_pdf(&p, 1, 0.0);
        for k in 1..=steps {
            let cur = sojourn_pdf(&p, 1, k as f64 * h);
            integral += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        assert!((integral - 1.0).abs() < 1e-6, "integral = {integral}");
        assert!(sojourn_pdf(&p, 1, 4.0) > 0.0);
    }

    #[test]
    fn cdf_matches_closed_form_and_quadrature() {
        let p = params_with(
            vec![
                GammaSojourn { shape: 1.0, rate: 0.5 },
                GammaSojourn { shape: 3.0, rate: 1.0 },
                GammaSojourn { shape: 1.0, rate: 1.0 },
            ],
            vec![vec![0.0; 3]; 3],
            vec![vec![0.0; 3]; 3],
        );
        assert_eq!(sojourn_cdf(&p, 1, 0.0), 0.0);
        assert_relative_eq!(sojourn_cdf(&p, 0, 2.0), 1.0 - (-1.0f64).exp(), epsilon = 1e-12);

        // Cumulative trapezoid of the density up to 5 for shape 3, rate 1.
        let h = 1e-4;
        let steps = (5.0 / h) as usize;
        let mut integral = 0.0;
        let mut prev = sojourn_pdf(&p, 1, 0.0);
        for k in 1..=steps {
            let cur = sojourn_pdf(&p, 1, k as f64 * h);
            integral += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        assert!((integral - sojourn_cdf(&p, 1, 5.0)).abs() < 1e-6);
    }

    #[test]
    fn cdf_monotone_and_saturating() {
        let p = three_state();
        let mean = p.sojourn[1].mean();
        let mut last = 0.0;
        for k in 0..=100 {
            let v = sojourn_cdf(&p, 1, k as f64 * mean / 10.0);
            assert!(v >= last);
            last = v;
        }
        assert!(1.0 - sojourn_cdf(&p, 1, 50.0 * mean) < 1e-6);
    }

    #[test]
    #[should_panic(expected = "nonnegative")]
    fn pdf_rejects_negative_duration() {
        sojourn_pdf(&three_state(), 1, -1.0);
    }

    #[test]
    fn transition_rows_normalize() {
        let p = three_state();
        for &s in &[0.0, 0.5, 3.0, 25.0] {
            let row = transition_row(&p, 1, s);
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_eq!(row[1], 0.0);
        }
        // Absorbing rows are point masses regardless of s.
        for &i in &[0usize, 2] {
            let row = transition_row(&p, i, 7.0);
            assert_eq!(row[i], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn transition_constant_when_beta_zero() {
        let mut p = three_state();
        p.beta = vec![vec![0.0; 3]; 3];
        let r0 = transition_row(&p, 1, 0.0);
        let r9 = transition_row(&p, 1, 9.0);
        for j in 0..3 {
            assert_relative_eq!(r0[j], r9[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn symmetric_logits_give_uniform_row() {
        // N=4, transient state 1, equal eta, zero beta.
        let p = params_with(
            vec![GammaSojourn { shape: 2.0, rate: 0.5 }; 4],
            vec![vec![0.7; 4]; 4],
            vec![vec![0.0; 4]; 4],
        );
        let row = transition_row(&p, 1, 3.0);
        for j in [0usize, 2, 3] {
            assert_relative_eq!(row[j], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_transition_reduces_to_g_when_constant() {
        let mut p = three_state();
        p.beta = vec![vec![0.0; 3]; 3];
        let g0 = transition_row(&p, 1, 0.0);
        for &s in &[0.0, 1e-9, 4.0, 40.0] {
            let gbar = mean_transition_row_with_step(&p, 1, s, 0.1);
            for j in 0..3 {
                assert_relative_eq!(gbar[j], g0[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mean_transition_rows_sum_to_one() {
        let p = three_state();
        for &s in &[0.3, 2.0, 9.0, 60.0] {
            let row = mean_transition_row_with_step(&p, 1, s, 0.1);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8, "s = {s}");
        }
    }

    #[test]
    fn mean_transition_matches_monte_carlo() {
        // gbar_ij(s_cap) against the average of g_ij over truncated-Gamma draws.
        let p = three_state();
        let s_cap = 6.0;
        let lambda = &p.sojourn[1];
        let dist = rand_distr::Gamma::new(lambda.shape, 1.0 / lambda.rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut kept = 0usize;
        while kept < n {
            let s: f64 = dist.sample(&mut rng);
            if s <= s_cap {
                let g = transition_row(&p, 1, s);
                for j in 0..3 {
                    sum[j] += g[j];
                    sumsq[j] += g[j] * g[j];
                }
                kept += 1;
            }
        }
        for j in [0usize, 2] {
            let mc = sum[j] / n as f64;
            let var = sumsq[j] / n as f64 - mc * mc;
            let se = (var / n as f64).sqrt();
            let quad = mean_transition_fn(&p, 1, j, s_cap);
            assert!(
                (quad - mc).abs() <= 3.0 * se + 1e-4,
                "j={j}: quadrature {quad} vs Monte Carlo {mc} (se {se:.2e})"
            );
        }
    }

    #[test]
    fn kernel_at_zero_and_row_sums() {
        let p = three_state();
        assert_eq!(semi_markov_kernel(&p, 1, 2, 0.0), 0.0);
        for &s in &[1.0, 5.0, 20.0] {
            let total: f64 = (0..3)
                .filter(|&j| j != 1)
                .map(|j| semi_markov_kernel(&p, 1, j, s))
                .sum();
            assert_relative_eq!(total, sojourn_cdf(&p, 1, s), epsilon = 1e-8);
        }
    }

    #[test]
    fn kernel_saturates_at_unconditional_mean() {
        // s -> infinity: Q_ij(s) -> E[g_ij(S)] over the untruncated sojourn.
        let p = three_state();
        let lambda = &p.sojourn[1];
        let dist = rand_distr::Gamma::new(lambda.shape, 1.0 / lambda.rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000usize;
        let mut sum = [0.0f64; 3];
        for _ in 0..n {
            let s: f64 = dist.sample(&mut rng);
            let g = transition_row(&p, 1, s);
            for j in 0..3 {
                sum[j] += g[j];
            }
        }
        let far = 40.0 * lambda.mean();
        for j in [0usize, 2] {
            let mc = sum[j] / n as f64;
            let q = semi_markov_kernel(&p, 1, j, far);
            assert!((q - mc).abs() < 2e-3, "j={j}: {q} vs {mc}");
        }
    }

    #[test]
    fn kernel_monotone_when_beta_zero() {
        let mut p = three_state();
        p.beta = vec![vec![0.0; 3]; 3];
        let mut last = 0.0;
        for k in 1..=60 {
            let q = semi_markov_kernel(&p, 1, 2, k as f64 * 0.5);
            assert!(q >= last - 1e-12);
            last = q;
        }
    }

    #[test]
    fn truncated_kernel_trivial_cases() {
        let p = three_state();
        assert_eq!(truncated_kernel(&p, 1, 2, 0.0, 0.0, 10.0), 0.0);
        assert_eq!(truncated_kernel(&p, 1, 2, 5.0, 3.0, 3.0), 0.0);
        assert_eq!(truncated_kernel(&p, 0, 0, 5.0, 0.0, 10.0), 0.0);
    }

    #[test]
    fn truncated_kernel_grid_refinement() {
        let p = three_state();
        for j in [0usize, 2] {
            let coarse = truncated_kernel_with_step(&p, 1, j, 5.0, 0.0, 10.0, 0.1);
            let fine = truncated_kernel_with_step(&p, 1, j, 5.0, 0.0, 10.0, 0.001);
            assert!(
                (coarse - fine).abs() < 1e-3,
                "j={j}: coarse {coarse} vs fine {fine}"
            );
            assert!((0.0..=1.0).contains(&coarse));
        }
    }

    #[test]
    fn truncated_kernel_stays_in_unit_interval() {
        let p = three_state();
        for &tau in &[0.5, 2.0, 10.0, 80.0] {
            for &(lo, hi) in &[(0.0, 1.0), (0.0, 30.0), (5.0, 6.0), (20.0, 90.0)] {
                let v = truncated_kernel(&p, 1, 2, tau, lo, hi);
                assert!((0.0..=1.0).contains(&v), "tau={tau} window=[{lo},{hi}] -> {v}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn transition_rows_always_normalize(
            e1 in -3.0f64..3.0, e2 in -3.0f64..3.0,
            b1 in 0.0f64..0.5, b2 in 0.0f64..0.5,
            s in 0.0f64..50.0,
        ) {
            let p = params_with(
                vec![GammaSojourn { shape: 2.0, rate: 0.5 }; 3],
                vec![vec![0.0; 3], vec![e1, 0.0, e2], vec![0.0; 3]],
                vec![vec![0.0; 3], vec![b1, 0.0, b2], vec![0.0; 3]],
            );
            let row = transition_row(&p, 1, s);
            proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert_eq!(row[1], 0.0);
        }
    }
}
