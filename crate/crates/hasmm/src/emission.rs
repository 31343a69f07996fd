//! Multi-task Gaussian-process segment emissions.
//!
//! While the latent chain occupies state `i`, the `Q` observation streams
//! follow a GP with constant per-stream means, a shared squared-exponential
//! temporal kernel, and a free-form inter-stream covariance:
//! `cov[(l,t),(v,t')] = task_cov[l][v] * sigma^2 * exp(-(t-t')^2/(2 l^2))`.
//! Vectors are laid out stream-major: index `q * M + m` is stream `q` at the
//! `m`-th timestamp, so the full covariance is the Kronecker product of the
//! task covariance with the temporal kernel matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::params::GpHyper;

/// Observations of one state occupancy: `Q` streams at shared timestamps,
/// with per-entry missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Strictly increasing timestamps (hours).
    pub times: Vec<f64>,
    /// `values[q][m]` is stream `q` at `times[m]`; `None` marks a missing sample.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Segment {
    pub fn empty(n_streams: usize) -> Self {
        Segment { times: Vec::new(), values: vec![Vec::new(); n_streams] }
    }

    /// Number of timestamps.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Indices `(stream, time)` of the observed (non-missing) entries,
    /// in stream-major order.
    fn observed_indices(&self) -> Vec<(usize, usize)> {
        let mut idx = Vec::new();
        for (q, row) in self.values.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                if v.is_some() {
                    idx.push((q, m));
                }
            }
        }
        idx
    }
}

/// Squared-exponential temporal kernel value.
fn temporal_kernel(hyper: &GpHyper, t: f64, u: f64) -> f64 {
    let d = t - u;
    hyper.sigma * hyper.sigma * (-d * d / (2.0 * hyper.length_scale * hyper.length_scale)).exp()
}

/// Dense covariance over all `Q * |times|` entries (stream-major), including
/// the diagonal jitter.
///
/// Panics on an empty time list.
pub fn build_covariance(hyper: &GpHyper, times: &[f64]) -> DMatrix<f64> {
    assert!(!times.is_empty(), "covariance needs at least one timestamp");
    let m = times.len();
    let q = hyper.n_streams();
    let kt = DMatrix::from_fn(m, m, |a, b| temporal_kernel(hyper, times[a], times[b]));
    let task = DMatrix::from_fn(q, q, |l, v| hyper.task_cov[l][v]);
    let mut cov = task.kronecker(&kt);
    for d in 0..q * m {
        cov[(d, d)] += hyper.jitter();
    }
    cov
}

/// Covariance restricted to the observed entries of a segment.
fn observed_covariance(hyper: &GpHyper, seg: &Segment, idx: &[(usize, usize)]) -> DMatrix<f64> {
    let jit = hyper.jitter();
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
        let (ql, ma) = idx[a];
        let (qv, mb) = idx[b];
        let mut v = hyper.task_cov[ql][qv] * temporal_kernel(hyper, seg.times[ma], seg.times[mb]);
        if a == b {
            v += jit;
        }
        v
    })
}

/// Multivariate-normal log-density of the observed entries of `seg` under
/// the state's GP; missing entries are marginalized by dropping their rows
/// and columns. An empty segment carries no evidence and scores 0.
///
/// The fast path is a Cholesky factorization; if the covariance is too
/// ill-conditioned to factorize, the density is evaluated on the retained
/// eigen-subspace (eigenvalues above `1e-10 * max`), mirroring a
/// pseudo-inverse.
pub fn segment_log_density(hyper: &GpHyper, seg: &Segment) -> f64 {
    let idx = seg.observed_indices();
    if idx.is_empty() {
        return 0.0;
    }
    let cov = observed_covariance(hyper, seg, &idx);
    let resid = DVector::from_iterator(
        idx.len(),
        idx.iter().map(|&(q, m)| seg.values[q][m].unwrap() - hyper.mean[q]),
    );
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    if let Some(chol) = cov.clone().cholesky() {
        let half_logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
        let alpha = chol.solve(&resid);
        return -0.5 * resid.dot(&alpha) - half_logdet - 0.5 * idx.len() as f64 * ln_2pi;
    }
    // Pseudo-inverse fallback: evaluate on the well-conditioned subspace.
    log::debug!("segment covariance not positive definite; using eigen fallback");
    let eig = cov.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let cutoff = 1e-10 * max_eig;
    let mut logdet = 0.0;
    let mut quad = 0.0;
    let mut kept = 0usize;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let proj = eig.eigenvectors.column(k).dot(&resid);
            logdet += lam.ln();
            quad += proj * proj / lam;
            kept += 1;
        }
    }
    -0.5 * quad - 0.5 * logdet - 0.5 * kept as f64 * ln_2pi
}

/// Draws one full (no missingness) segment at the given times.
///
/// Cholesky sampling with an eigendecomposition fallback that clamps
/// negative eigenvalues to zero when the covariance is numerically
/// indefinite.
pub fn sample_segment<R: Rng + ?Sized>(hyper: &GpHyper, times: &[f64], rng: &mut R) -> Segment {
    let q = hyper.n_streams();
    if times.is_empty() {
        return Segment::empty(q);
    }
    let m = times.len();
    let dim = q * m;
    let cov = build_covariance(hyper, times);
    let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let draw = match cov.clone().cholesky() {
        Some(chol) => chol.l() * z,
        None => {
            log::debug!("segment covariance not positive definite; sampling via eigen clamp");
            let eig = cov.symmetric_eigen();
            let mut scaled = eig.eigenvectors.clone();
            for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                let s = lam.max(0.0).sqrt();
                scaled.column_mut(k).scale_mut(s);
            }
            scaled * z
        }
    };
    let values = (0..q)
        .map(|qi| (0..m).map(|mi| Some(hyper.mean[qi] + draw[qi * m + mi])).collect())
        .collect();
    Segment { times: times.to_vec(), values }
}
