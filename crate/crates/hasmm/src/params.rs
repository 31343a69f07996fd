//! Parameter set for the hidden absorbing semi-Markov model.
//!
//! States are indexed `0..N` internally. Index `0` is the safe absorbing
//! state, index `N-1` the catastrophic absorbing state, and everything in
//! between is transient. Durations are hours throughout; Gamma sojourns use
//! the shape-rate convention (density proportional to
//! `s^(shape-1) * exp(-rate*s)`), so `shape = 1` reduces to the exponential
//! chain used by the CTMC cross-checks.
//!
//! The JSON wire format mirrors the struct fields: top-level keys
//! `n_states`, `sojourn`, `initial`, `eta`, `beta`, `emission`, `zeta`.
//! Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Classification of a state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateClass {
    SafeAbsorbing,
    Transient,
    CatastrophicAbsorbing,
}

/// Gamma sojourn parameters for one state (shape-rate convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSojourn {
    pub shape: f64,
    /// Rate in 1/hours; the mean sojourn is `shape / rate`.
    pub rate: f64,
}

impl GammaSojourn {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Per-state hyper-parameters of the multi-task Gaussian-process emission.
///
/// The covariance between stream `l` at time `t` and stream `v` at time `t'`
/// is `task_cov[l][v] * sigma^2 * exp(-(t-t')^2 / (2 length_scale^2))`, with
/// `jitter` added on the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyper {
    /// Constant mean per stream (length Q).
    pub mean: Vec<f64>,
    /// Temporal kernel amplitude, strictly positive.
    pub sigma: f64,
    /// Temporal kernel length scale in hours, strictly positive.
    pub length_scale: f64,
    /// Q x Q symmetric PSD inter-stream covariance.
    pub task_cov: Vec<Vec<f64>>,
    /// Diagonal regularizer; `None` means the default `1e-6 * sigma^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

impl GpHyper {
    /// Effective diagonal jitter (defaults to `1e-6 * sigma^2`).
    pub fn jitter(&self) -> f64 {
        self.jitter.unwrap_or(1e-6 * self.sigma * self.sigma)
    }

    pub fn n_streams(&self) -> usize {
        self.mean.len()
    }
}

/// The full parameter bundle: state count, sojourns, initial distribution,
/// transition logits, emissions, and the observation sampling intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSet {
    pub n_states: usize,
    /// Per-state Gamma sojourn parameters (length N).
    pub sojourn: Vec<GammaSojourn>,
    /// Initial state distribution, length N, entries >= 0 summing to 1.
    pub initial: Vec<f64>,
    /// Transition logit intercepts, N x N; diagonal entries of transient
    /// rows are stored but unused (the self-transition is excluded).
    pub eta: Vec<Vec<f64>>,
    /// Transition logit duration slopes, N x N, entries >= 0.
    pub beta: Vec<Vec<f64>>,
    /// Per-state GP emission hyper-parameters (length N).
    pub emission: Vec<GpHyper>,
    /// Poisson observation intensity in observations per hour.
    pub zeta: f64,
}

impl ParameterSet {
    /// Number of states.
    pub fn n(&self) -> usize {
        self.n_states
    }

    /// Number of observation streams Q.
    pub fn n_streams(&self) -> usize {
        self.emission.first().map_or(0, |e| e.n_streams())
    }

    pub fn state_class(&self, i: usize) -> StateClass {
        if i == 0 {
            StateClass::SafeAbsorbing
        } else if i == self.n_states - 1 {
            StateClass::CatastrophicAbsorbing
        } else {
            StateClass::Transient
        }
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        i == 0 || i == self.n_states - 1
    }

    pub fn is_transient(&self, i: usize) -> bool {
        !self.is_absorbing(i)
    }

    /// Indices of the transient states `1..N-1`.
    pub fn transient_states(&self) -> std::ops::Range<usize> {
        1..self.n_states - 1
    }

    /// Index of the catastrophic absorbing state.
    pub fn catastrophic(&self) -> usize {
        self.n_states - 1
    }

    /// Checks every documented invariant, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        if n < 3 {
            return fail(format!("n_states = {n}, need at least 3 (two absorbing + one transient)"));
        }
        if self.sojourn.len() != n {
            return fail(format!("sojourn has {} entries, expected {n}", self.sojourn.len()));
        }
        for (i, s) in self.sojourn.iter().enumerate() {
            if !(s.shape > 0.0 && s.shape.is_finite() && s.rate > 0.0 && s.rate.is_finite()) {
                return fail(format!("state {i}: Gamma shape/rate must be strictly positive and finite"));
            }
        }
        if self.initial.len() != n {
            return fail(format!("initial has {} entries, expected {n}", self.initial.len()));
        }
        if self.initial.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return fail("initial distribution has a negative or non-finite entry".into());
        }
        let total: f64 = self.initial.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return fail(format!("initial distribution sums to {total}, expected 1 within 1e-12"));
        }
        for (name, m) in [("eta", &self.eta), ("beta", &self.beta)] {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return fail(format!("{name} must be {n}x{n}"));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return fail(format!("{name} has a non-finite entry"));
            }
        }
        if self.beta.iter().flatten().any(|&b| b < 0.0) {
            return fail("beta has a negative entry".into());
        }
        if self.emission.len() != n {
            return fail(format!("emission has {} entries, expected {n}", self.emission.len()));
        }
        let q = self.n_streams();
        if q == 0 {
            return fail("emission must have at least one stream".into());
        }
        for (i, e) in self.emission.iter().enumerate() {
            if e.mean.len() != q {
                return fail(format!("state {i}: mean has {} streams, expected {q}", e.mean.len()));
            }
            if e.mean.iter().any(|v| !v.is_finite()) {
                return fail(format!("state {i}: non-finite mean"));
            }
            if !(e.sigma > 0.0 && e.sigma.is_finite()) || !(e.length_scale > 0.0 && e.length_scale.is_finite()) {
                return fail(format!("state {i}: sigma and length_scale must be strictly positive"));
            }
            if e.jitter() < 0.0 {
                return fail(format!("state {i}: jitter must be nonnegative"));
            }
            if e.task_cov.len() != q || e.task_cov.iter().any(|row| row.len() != q) {
                return fail(format!("state {i}: task_cov must be {q}x{q}"));
            }
            for l in 0..q {
                for v in 0..q {
                    let a = e.task_cov[l][v];
                    if !a.is_finite() {
                        return fail(format!("state {i}: non-finite task_cov entry"));
                    }
                    if (a - e.task_cov[v][l]).abs() > 1e-10 {
                        return fail(format!("state {i}: task_cov asymmetric at ({l},{v})"));
                    }
                }
            }
            let cov = nalgebra::DMatrix::from_fn(q, q, |l, v| e.task_cov[l][v]);
            let min_eig = cov
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-8 {
                return fail(format!("state {i}: task_cov has eigenvalue {min_eig:.3e} < -1e-8"));
            }
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return fail("zeta must be strictly positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization; identifies the exact
    /// parameter values a transition table was built from.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("parameter set serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }

    /// Hex form of [`fingerprint`](Self::fingerprint) for messages and headers.
    pub fn fingerprint_hex(&self) -> String {
        hex_string(&self.fingerprint())
    }

    /// Parses and validates a parameter set from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let params: ParameterSet =
            serde_json::from_str(text).map_err(|e| Error::MalformedFile(format!("parameter JSON: {e}")))?;
        params.validate()?;
        Ok(params)
    }

    /// Reads a parameter set from a JSON file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Writes the parameter set as pretty-printed JSON.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}

/// Lowercase hex encoding of a byte slice.
pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 3-state, 2-stream instance reused across module tests.
    pub fn toy_params() -> ParameterSet {
        ParameterSet {
            n_states: 3,
            sojourn: vec![
                GammaSojourn { shape: 2.0, rate: 0.4 },
                GammaSojourn { shape: 2.0, rate: 0.25 },
                GammaSojourn { shape: 1.5, rate: 0.5 },
            ],
            initial: vec![0.0, 1.0, 0.0],
            eta: vec![vec![0.0; 3], vec![0.3, 0.0, -0.4], vec![0.0; 3]],
            beta: vec![vec![0.0; 3], vec![0.0, 0.0, 0.05], vec![0.0; 3]],
            emission: (0..3)
                .map(|i| GpHyper {
                    mean: vec![i as f64, 10.0 - i as f64],
                    sigma: 1.0,
                    length_scale: 2.0,
                    task_cov: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
                    jitter: None,
                })
                .collect(),
            zeta: 0.5,
        }
    }

    #[test]
    fn validates_and_round_trips() {
        let p = toy_params();
        p.validate().unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back = ParameterSet::from_json(&json).unwrap();
        assert_eq!(p, back);
        assert_eq!(p.fingerprint(), back.fingerprint());
    }

    #[test]
    fn rejects_unknown_keys() {
        let p = toy_params();
        let mut v: serde_json::Value = serde_json::to_value(&p).unwrap();
        v.as_object_mut().unwrap().insert("surprise".into(), 1.into());
        let err = ParameterSet::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::MalformedFile(_)));
    }

    #[test]
    fn rejects_bad_values() {
        let mut p = toy_params();
        p.initial[1] = 0.5;
        assert!(p.validate().is_err(), "initial must sum to 1");

        let mut p = toy_params();
        p.beta[1][2] = -0.1;
        assert!(p.validate().is_err(), "beta must be nonnegative");

        let mut p = toy_params();
        p.sojourn[0].rate = 0.0;
        assert!(p.validate().is_err(), "rates strictly positive");

        let mut p = toy_params();
        p.emission[1].task_cov = vec![vec![1.0, 0.9], vec![0.2, 1.0]];
        assert!(p.validate().is_err(), "task_cov must be symmetric");

        let mut p = toy_params();
        p.emission[1].task_cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(p.validate().is_err(), "task_cov must be PSD");
    }

    #[test]
    fn state_classes_follow_indices() {
        let p = toy_params();
        assert_eq!(p.state_class(0), StateClass::SafeAbsorbing);
        assert_eq!(p.state_class(1), StateClass::Transient);
        assert_eq!(p.state_class(2), StateClass::CatastrophicAbsorbing);
        assert_eq!(p.transient_states().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let p = toy_params();
        let mut q = p.clone();
        q.zeta += 1e-9;
        assert_ne!(p.fingerprint(), q.fingerprint());
    }
}
