//! Interval transition probabilities on a regular grid, solved from the
//! renewal integral equation by FFT-accelerated successive approximation.
//!
//! The table holds `p(i, j, tau, s_lo, s_hi)`: the probability of occupying
//! state `j` a horizon `tau` after an observation anchor, given state `i` at
//! the anchor with elapsed sojourn known to lie in `(s_lo, s_hi)`. The
//! `(0, 0)` window (fresh entry) satisfies a Volterra equation of the second
//! kind and is solved iteratively; every other window is a single operator
//! application on top of that solution.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::model::{sojourn_cdf, sojourn_quantile, transition_row};
use crate::params::{hex_string, ParameterSet};

/// Fine quadrature cells per tau step.
const FINE_PER_STEP: usize = 10;
/// Windows where the sojourn CDF is this close to 1 are numerically
/// unresolvable; their kernel contribution is dropped.
const TAIL_EPS: f64 = 1e-12;
/// Horizon-plateau tolerance: the table's last two tau decades must agree to
/// this before absorption probabilities are trusted.
pub const PLATEAU_TOL: f64 = 1e-3;

const MAGIC: &[u8; 8] = b"HSMMTBL1";
const FORMAT_VERSION: u32 = 1;

/// Regular evaluation grid. Horizons are `a * dt` for `a in 0..=a_steps`;
/// elapsed-sojourn windows are `(b * ds_lo, c * ds_hi)` for `b in
/// 0..=b_steps`, `c in 0..=c_steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub dt: f64,
    pub ds_lo: f64,
    pub ds_hi: f64,
    pub a_steps: usize,
    pub b_steps: usize,
    pub c_steps: usize,
}

impl Grid {
    pub fn tau_max(&self) -> f64 {
        self.a_steps as f64 * self.dt
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.ds_lo > 0.0) || !(self.ds_hi > 0.0) {
            return Err(Error::InvalidParameter("grid steps must be positive".into()));
        }
        if self.a_steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one tau step".into()));
        }
        let entries = (self.b_steps + 1)
            .checked_mul(self.c_steps + 1)
            .and_then(|v| v.checked_mul(self.a_steps + 1));
        match entries {
            Some(e) if e <= 1 << 31 => Ok(()),
            _ => Err(Error::InvalidParameter("grid is too large to tabulate".into())),
        }
    }
}

/// Solver diagnostics stored with the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Fixed-point iterations spent on the fresh-entry window.
    pub iterations: u32,
    /// Sup-norm change of the final fixed-point iteration.
    pub residual: f64,
    /// Largest per-entry change over the last ten tau steps.
    pub plateau: f64,
    /// Whether `plateau <= PLATEAU_TOL`, i.e. the horizon captures
    /// absorption.
    pub plateau_ok: bool,
}

/// Options for [`build_table_with`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Sup-norm convergence threshold for the fixed point.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { epsilon: 1e-8, max_iterations: 500 }
    }
}

/// A table lookup: the stored value plus whether any coordinate had to be
/// clamped to the grid edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Queried {
    pub value: f64,
    pub saturated: bool,
}

/// Tabulated interval transition probabilities for one parameter set.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub grid: Grid,
    pub n: usize,
    pub diagnostics: Diagnostics,
    fingerprint: [u8; 32],
    /// Layout: `(((b*(c_steps+1)+c)*n + i)*n + j)*(a_steps+1) + a`.
    data: Vec<f64>,
}

impl TransitionTable {
    #[inline]
    fn idx(&self, b: usize, c: usize, i: usize, j: usize, a: usize) -> usize {
        (((b * (self.grid.c_steps + 1) + c) * self.n + i) * self.n + j)
            * (self.grid.a_steps + 1)
            + a
    }

    /// Raw grid access by index.
    pub fn at(&self, b: usize, c: usize, i: usize, j: usize, a: usize) -> f64 {
        self.data[self.idx(b, c, i, j, a)]
    }

    /// Nearest-grid-point lookup; ties round toward the smaller index, and
    /// out-of-range coordinates clamp to the edge with `saturated` set.
    pub fn query(&self, i: usize, j: usize, tau: f64, s_lo: f64, s_hi: f64) -> Queried {
        assert!(i < self.n && j < self.n, "state out of range");
        let (b, sb) = snap(s_lo, self.grid.ds_lo, self.grid.b_steps);
        let (c, sc) = snap(s_hi, self.grid.ds_hi, self.grid.c_steps);
        // Interpolate along the horizon: the probabilities are continuous in
        // tau, and snapping a small positive horizon down to the identity
        // row would report impossible transitions as exact zeros.
        if tau.is_nan() {
            return Queried { value: self.at(b, c, i, j, 0), saturated: true };
        }
        let x = (tau / self.grid.dt).max(0.0);
        let sa = x > self.grid.a_steps as f64;
        let a0 = (x.floor() as usize).min(self.grid.a_steps);
        let a1 = (a0 + 1).min(self.grid.a_steps);
        let frac = (x - a0 as f64).clamp(0.0, 1.0);
        let value =
            (1.0 - frac) * self.at(b, c, i, j, a0) + frac * self.at(b, c, i, j, a1);
        Queried { value, saturated: sa || sb || sc }
    }

    /// Long-run probabilities of ending safe respectively catastrophic from
    /// a fresh entry into `i`, read at the far end of the horizon. Errors
    /// when the horizon never plateaued.
    pub fn absorption_row(&self, i: usize) -> Result<(f64, f64)> {
        if !self.diagnostics.plateau_ok {
            return Err(Error::NonConvergence {
                iterations: self.diagnostics.iterations as usize,
                residual: self.diagnostics.plateau,
            });
        }
        let a = self.grid.a_steps;
        Ok((self.at(0, 0, i, 0, a), self.at(0, 0, i, self.n - 1, a)))
    }

    pub fn verify_fingerprint(&self, params: &ParameterSet) -> Result<()> {
        let expected = params.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: hex_string(&expected),
                found: hex_string(&self.fingerprint),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.n, self.grid.a_steps, self.grid.b_steps, self.grid.c_steps] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [self.grid.dt, self.grid.ds_lo, self.grid.ds_hi] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.fingerprint)?;
        w.write_all(&self.diagnostics.iterations.to_le_bytes())?;
        w.write_all(&self.diagnostics.residual.to_le_bytes())?;
        w.write_all(&self.diagnostics.plateau.to_le_bytes())?;
        w.write_all(&[self.diagnostics.plateau_ok as u8])?;
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        let mut chunk = Vec::with_capacity(8 << 13);
        for block in self.data.chunks(1 << 13) {
            chunk.clear();
            for &v in block {
                chunk.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&chunk)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn snap(x: f64, step: f64, max: usize) -> (usize, bool) {
    if x.is_nan() {
        return (0, true);
    }
    let r = (x / step - 0.5).ceil().max(0.0);
    if r > max as f64 {
        (max, true)
    } else {
        (r as usize, false)
    }
}

fn read_exact_or_malformed(r: &mut impl std::io::Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::MalformedFile("transition table file is truncated".into()))
}

fn read_u32(r: &mut impl std::io::Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_malformed(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl std::io::Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or_malformed(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Loads a table without checking which parameters produced it; pair with
/// [`TransitionTable::verify_fingerprint`] or use [`load_table_for`].
pub fn load_table(path: &Path) -> Result<TransitionTable> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_malformed(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::MalformedFile("not a transition table file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedFile(format!("unsupported table format version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let a_steps = read_u32(&mut r)? as usize;
    let b_steps = read_u32(&mut r)? as usize;
    let c_steps = read_u32(&mut r)? as usize;
    let dt = read_f64(&mut r)?;
    let ds_lo = read_f64(&mut r)?;
    let ds_hi = read_f64(&mut r)?;
    let grid = Grid { dt, ds_lo, ds_hi, a_steps, b_steps, c_steps };
    grid.validate().map_err(|e| Error::MalformedFile(format!("bad table grid: {e}")))?;
    if n < 2 {
        return Err(Error::MalformedFile("table needs at least two states".into()));
    }
    let mut fingerprint = [0u8; 32];
    read_exact_or_malformed(&mut r, &mut fingerprint)?;
    let iterations = read_u32(&mut r)?;
    let residual = read_f64(&mut r)?;
    let plateau = read_f64(&mut r)?;
    let mut flag = [0u8; 1];
    read_exact_or_malformed(&mut r, &mut flag)?;
    let data_len = {
        let mut b = [0u8; 8];
        read_exact_or_malformed(&mut r, &mut b)?;
        u64::from_le_bytes(b) as usize
    };
    let expected = (b_steps + 1) * (c_steps + 1) * n * n * (a_steps + 1);
    if data_len != expected {
        return Err(Error::MalformedFile(format!(
            "table data length {data_len} does not match dimensions (expected {expected})"
        )));
    }
    let mut bytes = vec![0u8; data_len * 8];
    read_exact_or_malformed(&mut r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TransitionTable {
        grid,
        n,
        diagnostics: Diagnostics { iterations, residual, plateau, plateau_ok: flag[0] != 0 },
        fingerprint,
        data,
    })
}

/// Loads a table and verifies it was built from `params`.
pub fn load_table_for(path: &Path, params: &ParameterSet) -> Result<TransitionTable> {
    let table = load_table(path)?;
    table.verify_fingerprint(params)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Fine-grid sojourn quantities
// ---------------------------------------------------------------------------

/// Per-transient-state prefix arrays on the fine quadrature grid of step
/// `h = dt / FINE_PER_STEP`: the sojourn CDF, the guarded conditional cell
/// weights `dV(y) / (1 - V(y))`, and prefix sums of the semi-Markov kernel
/// `Q_ij(x h) = int_0^{x h} g_ij(u) dV(u)`.
struct Fine {
    n: usize,
    transient: Vec<usize>,
    /// `vq[ti][x] = V_i(x h)`.
    vq: Vec<Vec<f64>>,
    /// `w[ti][y]`: conditional mass of fine cell `y`, zero in the far tail.
    w: Vec<Vec<f64>>,
    /// `qpref[ti][j][x] = Q_ij(x h)`.
    qpref: Vec<Vec<Vec<f64>>>,
}

impl Fine {
    fn build(params: &ParameterSet, grid: &Grid) -> Fine {
        let n = params.n();
        let transient: Vec<usize> = params.transient_states().collect();
        let h = grid.dt / FINE_PER_STEP as f64;
        let y_max = ((grid.b_steps as f64 * grid.ds_lo) / h)
            .round()
            .max(((grid.c_steps as f64 * grid.ds_hi) / h).round()) as usize;
        let x_len = y_max + FINE_PER_STEP * grid.a_steps + 2;
        let mut vq = Vec::with_capacity(transient.len());
        let mut w = Vec::with_capacity(transient.len());
        let mut qpref = Vec::with_capacity(transient.len());
        for &i in &transient {
            let vq_i: Vec<f64> =
                (0..x_len).map(|x| sojourn_cdf(params, i, x as f64 * h)).collect();
            let w_i: Vec<f64> = (0..x_len - 1)
                .map(|y| {
                    let surv = 1.0 - vq_i[y];
                    if surv <= TAIL_EPS { 0.0 } else { (vq_i[y + 1] - vq_i[y]) / surv }
                })
                .collect();
            let mut qp = vec![vec![0.0; x_len]; n];
            for x in 0..x_len - 1 {
                let g = transition_row(params, i, (x as f64 + 0.5) * h);
                let cell = vq_i[x + 1] - vq_i[x];
                for (j, qp_j) in qp.iter_mut().enumerate() {
                    qp_j[x + 1] = qp_j[x] + g[j] * cell;
                }
            }
            vq.push(vq_i);
            w.push(w_i);
            qpref.push(qp);
        }
        Fine { n, transient, vq, w, qpref }
    }

    /// Elapsed-window kernel on the tau grid, for the window snapped to fine
    /// cells `[y_lo, y_hi)`. Degenerate windows point-evaluate at `y_lo`;
    /// the `(0, 0)` window therefore reduces to the plain semi-Markov
    /// kernel. Layout: `(ti*n + j)*a_len + a`.
    fn kernel_window(&self, y_lo: usize, y_hi: usize, a_len: usize) -> Vec<f64> {
        let n = self.n;
        let mut kern = vec![0.0; self.transient.len() * n * a_len];
        for ti in 0..self.transient.len() {
            let vq = &self.vq[ti];
            let mass = if y_hi > y_lo { vq[y_hi] - vq[y_lo] } else { 0.0 };
            let degenerate = y_hi <= y_lo || mass < 1e-300;
            for j in 0..n {
                let qp = &self.qpref[ti][j];
                let row = &mut kern[(ti * n + j) * a_len..][..a_len];
                if degenerate {
                    point_eval_kernel(qp, vq, y_lo, row);
                } else {
                    for y in y_lo..y_hi {
                        let wy = self.w[ti][y];
                        if wy == 0.0 {
                            continue;
                        }
                        let base = qp[y];
                        for (a, r) in row.iter_mut().enumerate() {
                            *r += wy * (qp[y + FINE_PER_STEP * a] - base);
                        }
                    }
                    for r in row.iter_mut() {
                        *r = (*r / mass).clamp(0.0, 1.0);
                    }
                }
            }
        }
        kern
    }
}

/// Kernel conditioned on elapsed sojourn exactly `y_lo` fine cells.
fn point_eval_kernel(qp: &[f64], vq: &[f64], y_lo: usize, row: &mut [f64]) {
    let surv = 1.0 - vq[y_lo];
    if surv <= TAIL_EPS {
        row.fill(0.0);
        return;
    }
    let base = qp[y_lo];
    for (a, r) in row.iter_mut().enumerate() {
        *r = ((qp[y_lo + FINE_PER_STEP * a] - base) / surv).clamp(0.0, 1.0);
    }
}

// ---------------------------------------------------------------------------
// The renewal operator
// ---------------------------------------------------------------------------

/// FFT plans plus dimensions shared by every slice computation.
struct SliceOp {
    n: usize,
    transient: Vec<usize>,
    a_len: usize,
    fft_len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl SliceOp {
    fn new(params: &ParameterSet, a_len: usize) -> SliceOp {
        let fft_len = (2 * a_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        SliceOp {
            n: params.n(),
            transient: params.transient_states().collect(),
            a_len,
            fft_len,
            fwd: planner.plan_fft_forward(fft_len),
            inv: planner.plan_fft_inverse(fft_len),
        }
    }

    fn fft_series(&self, series: &[f64]) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (b, &v) in buf.iter_mut().zip(series) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// FFTs of every `(state, state)` series of a slice.
    fn fft_rows(&self, p: &[f64]) -> Vec<Vec<Complex<f64>>> {
        (0..self.n * self.n)
            .map(|kj| self.fft_series(&p[kj * self.a_len..][..self.a_len]))
            .collect()
    }

    /// FFTs of the forward differences of the kernel rows. The last
    /// difference is pinned to zero; the matching convolution term is
    /// subtracted exactly in [`SliceOp::apply`], so its value never enters.
    fn kernel_ffts(&self, kern: &[f64]) -> Vec<Vec<Complex<f64>>> {
        (0..self.transient.len() * self.n)
            .map(|tk| {
                let row = &kern[tk * self.a_len..][..self.a_len];
                let mut m = vec![0.0; self.a_len];
                for a in 0..self.a_len - 1 {
                    m[a] = row[a + 1] - row[a];
                }
                self.fft_series(&m)
            })
            .collect()
    }

    /// One application of the renewal operator to the row-stochastic slice
    /// whose FFTs are `p_hat`, under the window kernel `kern` (with
    /// difference FFTs `m_hat`):
    ///
    /// `out_ij(a) = d_ij (1 - sum_j kern_ij(a)) + sum_k (dkern_ik * p_kj)(a)`
    ///
    /// with the convolution paired trapezoidally so that row sums telescope
    /// to one. `postprocess` clamps to `[0, 1]` and renormalizes rows; the
    /// raw form is used to measure fixed-point residuals.
    fn apply(
        &self,
        kern: &[f64],
        m_hat: &[Vec<Complex<f64>>],
        p_hat: &[Vec<Complex<f64>>],
        postprocess: bool,
        out: &mut [f64],
    ) {
        let n = self.n;
        let a_len = self.a_len;
        out.fill(0.0);
        for i in 0..n {
            if !self.transient.contains(&i) {
                for a in 0..a_len {
                    out[(i * n + i) * a_len + a] = 1.0;
                }
            }
        }
        let scale = 1.0 / self.fft_len as f64;
        let mut acc = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (ti, &i) in self.transient.iter().enumerate() {
            let mut ksum = vec![0.0; a_len];
            for j in 0..n {
                let row = &kern[(ti * n + j) * a_len..][..a_len];
                for (s, &v) in ksum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for j in 0..n {
                acc.fill(Complex::new(0.0, 0.0));
                for k in 0..n {
                    let mh = &m_hat[ti * n + k];
                    let ph = &p_hat[k * n + j];
                    for (a, (m, p)) in acc.iter_mut().zip(mh.iter().zip(ph)) {
                        *a += m * p;
                    }
                }
                self.inv.process(&mut acc);
                let krow = &kern[(ti * n + j) * a_len..][..a_len];
                let orow = &mut out[(i * n + j) * a_len..][..a_len];
                orow[0] = if i == j { 1.0 } else { 0.0 };
                for a in 1..a_len {
                    let m_ij = if a + 1 < a_len { krow[a + 1] - krow[a] } else { 0.0 };
                    let conv = (acc[a].re + acc[a - 1].re) * scale;
                    let base = if i == j { 1.0 - ksum[a] } else { 0.0 };
                    orow[a] = base + 0.5 * (conv - m_ij);
                }
            }
            if postprocess {
                for a in 1..a_len {
                    let mut sum = 0.0;
                    for j in 0..n {
                        let v = &mut out[(i * n + j) * a_len + a];
                        *v = v.clamp(0.0, 1.0);
                        sum += *v;
                    }
                    debug_assert!((sum - 1.0).abs() < 1e-6, "row sum drifted to {sum}");
                    if sum > 0.0 {
                        for j in 0..n {
                            out[(i * n + j) * a_len + a] /= sum;
                        }
                    } else {
                        out[(i * n + i) * a_len + a] = 1.0;
                    }
                }
            }
        }
    }
}

fn identity_slice(n: usize, a_len: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n * a_len];
    for i in 0..n {
        for a in 0..a_len {
            p[(i * n + i) * a_len + a] = 1.0;
        }
    }
    p
}

/// Successive approximation for the fresh-entry window. Each iteration adds
/// one renewal layer, so the residual decays geometrically with the
/// per-jump absorption probability.
fn solve_base_slice(
    op: &SliceOp,
    kern0: &[f64],
    opts: &BuildOptions,
) -> Result<(Vec<f64>, u32, f64)> {
    let mut p = identity_slice(op.n, op.a_len);
    if op.transient.is_empty() {
        return Ok((p, 0, 0.0));
    }
    let m_hat = op.kernel_ffts(kern0);
    let mut q = vec![0.0; p.len()];
    let mut delta = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let p_hat = op.fft_rows(&p);
        op.apply(kern0, &m_hat, &p_hat, true, &mut q);
        delta = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut p, &mut q);
        if delta <= opts.epsilon {
            return Ok((p, it as u32, delta));
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iterations, residual: delta })
}

fn plateau_of(p: &[f64], n: usize, transient: &[usize], a_steps: usize) -> f64 {
    let a_len = a_steps + 1;
    let off = a_steps.min(FINE_PER_STEP);
    let mut worst = 0.0f64;
    for &i in transient {
        for j in 0..n {
            let row = &p[(i * n + j) * a_len..][..a_len];
            worst = worst.max((row[a_steps] - row[a_steps - off]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

/// Builds the full interval-transition table with default solver options.
pub fn build_table(params: &ParameterSet, grid: &Grid) -> Result<TransitionTable> {
    build_table_with(params, grid, &BuildOptions::default())
}

pub fn build_table_with(
    params: &ParameterSet,
    grid: &Grid,
    opts: &BuildOptions,
) -> Result<TransitionTable> {
    params.validate()?;
    grid.validate()?;
    if !(opts.epsilon > 0.0) || opts.max_iterations == 0 {
        return Err(Error::InvalidParameter("bad solver options".into()));
    }
    let n = params.n();
    let a_len = grid.a_steps + 1;
    let nt = n - 2;
    let h = grid.dt / FINE_PER_STEP as f64;

    let fine = Fine::build(params, grid);
    let op = SliceOp::new(params, a_len);
    let kern0 = fine.kernel_window(0, 0, a_len);
    let (p0, iterations, residual) = solve_base_slice(&op, &kern0, opts)?;
    let plateau = plateau_of(&p0, n, &fine.transient, grid.a_steps);
    let p_hat = op.fft_rows(&p0);

    let slice_len = n * n * a_len;
    let per_b = (grid.c_steps + 1) * slice_len;
    let mut data = vec![0.0f64; (grid.b_steps + 1) * per_b];
    data.par_chunks_mut(per_b).enumerate().for_each(|(b, chunk)| {
        let y_lo = ((b as f64 * grid.ds_lo) / h).round() as usize;
        let mut u = vec![0.0f64; nt * n * a_len];
        let mut kern = vec![0.0f64; nt * n * a_len];
        let mut y_cur = y_lo;
        for c in 0..=grid.c_steps {
            let out = &mut chunk[c * slice_len..][..slice_len];
            if b == 0 && c == 0 {
                out.copy_from_slice(&p0);
                continue;
            }
            let y_hi = ((c as f64 * grid.ds_hi) / h).round() as usize;
            if y_hi > y_cur {
                for y in y_cur..y_hi {
                    for ti in 0..nt {
                        let wy = fine.w[ti][y];
                        if wy == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let qp = &fine.qpref[ti][j];
                            let base = qp[y];
                            let urow = &mut u[(ti * n + j) * a_len..][..a_len];
                            for (a, uv) in urow.iter_mut().enumerate() {
                                *uv += wy * (qp[y + FINE_PER_STEP * a] - base);
                            }
                        }
                    }
                }
                y_cur = y_hi;
            }
            for ti in 0..nt {
                let vq = &fine.vq[ti];
                let mass = if y_hi > y_lo { vq[y_hi] - vq[y_lo] } else { 0.0 };
                let degenerate = y_hi <= y_lo || mass < 1e-300;
                for j in 0..n {
                    let row = &mut kern[(ti * n + j) * a_len..][..a_len];
                    if degenerate {
                        point_eval_kernel(&fine.qpref[ti][j], vq, y_lo, row);
                    } else {
                        let urow = &u[(ti * n + j) * a_len..][..a_len];
                        for (r, &uv) in row.iter_mut().zip(urow) {
                            *r = (uv / mass).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            let m_hat = op.kernel_ffts(&kern);
            op.apply(&kern, &m_hat, &p_hat, true, out);
        }
    });

    Ok(TransitionTable {
        grid: *grid,
        n,
        diagnostics: Diagnostics {
            iterations,
            residual,
            plateau,
            plateau_ok: plateau <= PLATEAU_TOL,
        },
        fingerprint: params.fingerprint(),
        data,
    })
}

/// Picks a grid automatically: elapsed-window bounds cover the 0.99 sojourn
/// quantile, and the horizon doubles from 128 steps until the fresh-entry
/// solution plateaus (capped at 4096 steps; the cap is reported through the
/// built table's `plateau_ok`).
pub fn auto_grid(params: &ParameterSet, dt: f64) -> Result<Grid> {
    auto_grid_with(params, dt, &BuildOptions::default())
}

pub fn auto_grid_with(params: &ParameterSet, dt: f64, opts: &BuildOptions) -> Result<Grid> {
    params.validate()?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("grid step must be positive".into()));
    }
    let q99 = params
        .transient_states()
        .map(|i| sojourn_quantile(params, i, 0.99))
        .fold(0.0f64, f64::max);
    let window_steps = ((q99 / dt).ceil() as usize).max(1);
    let mut a_steps = 128;
    loop {
        let grid = Grid {
            dt,
            ds_lo: dt,
            ds_hi: dt,
            a_steps,
            b_steps: window_steps,
            c_steps: window_steps,
        };
        // Plateau depends only on the fresh-entry window, so probe with
        // b = c = 0 to keep the doubling search cheap.
        let probe = Grid { b_steps: 0, c_steps: 0, ..grid };
        let fine = Fine::build(params, &probe);
        let op = SliceOp::new(params, a_steps + 1);
        let kern0 = fine.kernel_window(0, 0, a_steps + 1);
        let (p0, _, _) = solve_base_slice(&op, &kern0, opts)?;
        if plateau_of(&p0, params.n(), &fine.transient, a_steps) <= PLATEAU_TOL
            || a_steps >= 4096
        {
            return Ok(grid);
        }
        a_steps *= 2;
    }
}

/// Sup-norm defect of the stored fresh-entry slice under one raw operator
/// application. Small values certify the table solves its integral
/// equation; the other windows are direct images of this slice, so their
/// defect is zero by construction.
pub fn fixed_point_residual(table: &TransitionTable, params: &ParameterSet) -> Result<f64> {
    table.verify_fingerprint(params)?;
    let a_len = table.grid.a_steps + 1;
    let probe = Grid { b_steps: 0, c_steps: 0, ..table.grid };
    let fine = Fine::build(params, &probe);
    let op = SliceOp::new(params, a_len);
    let kern0 = fine.kernel_window(0, 0, a_len);
    let m_hat = op.kernel_ffts(&kern0);
    let p: Vec<f64> = table.data[..table.n * table.n * a_len].to_vec();
    let p_hat = op.fft_rows(&p);
    let mut q = vec![0.0; p.len()];
    op.apply(&kern0, &m_hat, &p_hat, false, &mut q);
    Ok(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}
