//! Small log-domain helpers shared by the filter and the learners.

/// log(exp(a) + exp(b)) without leaving the log domain.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log Σ exp(x) over a slice; NEG_INFINITY for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY || hi.is_nan() {
        return hi;
    }
    let sum: f64 = xs.iter().map(|&x| (x - hi).exp()).sum();
    hi + sum.ln()
}

/// Exponentiate a log-weight vector and normalize it to sum to one.
/// Returns `None` when the total mass is zero.
pub fn normalized_exp(xs: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(xs);
    if lse == f64::NEG_INFINITY {
        return None;
    }
    Some(xs.iter().map(|&x| (x - lse).exp()).collect())
}
