//! The proposal mixture `rho_hat_A(y) = (1/K) sum_j q(y | X_j)`, its
//! closed-form counterpart `rho_A` where one exists, and control-variate
//! adjustments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{AcceptMode, ChainTrace};
use crate::error::{Error, Result};
use crate::proposals::{GaussianKernel, ProposalFamily, ProposalKind};
use crate::targets::{DiagGaussian, GaussianMixture, TargetDensity, TargetKind};

pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// `L[i][j] = log q(Y_i | X_{cols[j]})` with per-row log-sum-exp reductions.
#[derive(Debug, Clone)]
pub struct ProposalLogMatrix {
    rows: usize,
    columns: Vec<usize>,
    /// Row-major `rows x columns.len()`; `None` in streaming mode.
    values: Option<Vec<f64>>,
    row_lse: Vec<f64>,
    /// Proposal log-density evaluations spent building the matrix.
    pub q_evaluations: u64,
}

impl ProposalLogMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn is_stored(&self) -> bool {
        self.values.is_some()
    }

    /// Entry `(i, j)`; `None` when built in streaming mode.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.values.as_ref().map(|v| v[i * self.columns.len() + j])
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        let c = self.columns.len();
        self.values.as_ref().map(|v| &v[i * c..(i + 1) * c])
    }

    pub fn row_log_sum_exp(&self) -> &[f64] {
        &self.row_lse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixOptions {
    pub block_rows: usize,
    /// Keep the full table; otherwise only row reductions are retained.
    pub store: bool,
    /// Spread row blocks over the rayon pool. Timed callers turn this off:
    /// the thread CPU clock only sees work done on the calling thread.
    pub parallel: bool,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            block_rows: DEFAULT_BLOCK_ROWS,
            store: true,
            parallel: true,
        }
    }
}

/// Two-pass log-sum-exp of one row; `buf` already holds the row.
#[inline]
fn row_reduce(buf: &[f64]) -> f64 {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + buf.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Evaluates `log q(y_i | x_j)` for the given row points against the columns
/// `cols` of `trace`, in row blocks processed in parallel.
pub fn build_log_matrix_for(
    rows: &[f64],
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    column_subset: Option<&[usize]>,
    options: MatrixOptions,
) -> Result<ProposalLogMatrix> {
    let d = trace.dim;
    if trace.is_empty() {
        return Err(Error::input("cannot build a mixture from an empty trace"));
    }
    if proposal.dim() != d || !rows.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: proposal.dim(),
        });
    }
    let columns: Vec<usize> = match column_subset {
        Some(s) if s.is_empty() => return Err(Error::input("column subset is empty")),
        Some(s) => {
            if let Some(bad) = s.iter().find(|&&j| j >= trace.len()) {
                return Err(Error::input(format!(
                    "column index {bad} out of range for a trace of length {}",
                    trace.len()
                )));
            }
            s.to_vec()
        }
        None => (0..trace.len()).collect(),
    };
    let n_rows = rows.len() / d;
    let kernel = proposal.kernel();
    let wy = kernel.whiten_rows(rows, d);
    let mut wc = vec![0.0; columns.len() * d];
    for (dst, &j) in wc.chunks_exact_mut(d).zip(&columns) {
        kernel.whiten(trace.center(j), dst);
    }
    let nc = columns.len();
    let block = options.block_rows.max(1);

    let process = |yblock: &[f64]| {
        let nr = yblock.len() / d;
        let mut lse = Vec::with_capacity(nr);
        let mut vals = if options.store {
            Vec::with_capacity(nr * nc)
        } else {
            Vec::new()
        };
        let mut buf = vec![0.0; nc];
        for y in yblock.chunks_exact(d) {
            for (b, c) in buf.iter_mut().zip(wc.chunks_exact(d)) {
                *b = kernel.log_pdf_whitened(y, c);
            }
            lse.push(row_reduce(&buf));
            if options.store {
                vals.extend_from_slice(&buf);
            }
        }
        (lse, vals)
    };
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = if options.parallel {
        wy.par_chunks(block * d).map(process).collect()
    } else {
        wy.chunks(block * d).map(process).collect()
    };

    let mut row_lse = Vec::with_capacity(n_rows);
    let mut values = options.store.then(|| Vec::with_capacity(n_rows * nc));
    for (lse, vals) in blocks {
        row_lse.extend(lse);
        if let Some(v) = values.as_mut() {
            v.extend(vals);
        }
    }
    Ok(ProposalLogMatrix {
        rows: n_rows,
        columns,
        values,
        row_lse,
        q_evaluations: (n_rows * nc) as u64,
    })
}

/// The matrix over the trace's own proposals `Y_i`.
pub fn build_log_matrix(
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    column_subset: Option<&[usize]>,
) -> Result<ProposalLogMatrix> {
    build_log_matrix_for(
        &trace.proposals,
        trace,
        proposal,
        column_subset,
        MatrixOptions::default(),
    )
}

/// `log rho_hat_A(Y_i)` for every row.
pub fn mixture_log_pdf(matrix: &ProposalLogMatrix) -> Vec<f64> {
    let ln_cols = (matrix.columns.len() as f64).ln();
    matrix.row_lse.iter().map(|v| v - ln_cols).collect()
}

/// Start index and length of every run of equal consecutive states.
pub fn state_runs(trace: &ChainTrace) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for k in 0..trace.len() {
        if k == 0 || trace.accepted[k - 1] {
            runs.push((k, 1));
        } else if let Some(last) = runs.last_mut() {
            last.1 += 1;
        }
    }
    runs
}

/// `log rho_hat_A` at each row of `points`, with one column per run of equal
/// states weighted by the run length. Equal to [`mixture_log_pdf`] over all
/// `K` columns up to rounding, at a cost of `rows x runs` proposal
/// evaluations. Returns the values and that evaluation count. Runs on the
/// calling thread so that its cost can be timed.
pub fn compressed_mixture_log_pdf(
    points: &[f64],
    trace: &ChainTrace,
    proposal: &ProposalFamily,
) -> Result<(Vec<f64>, u64)> {
    let d = trace.dim;
    if trace.is_empty() {
        return Err(Error::input("cannot build a mixture from an empty trace"));
    }
    if proposal.dim() != d || !points.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: proposal.dim(),
        });
    }
    let runs = state_runs(trace);
    let kernel = proposal.kernel();
    let wy = kernel.whiten_rows(points, d);
    let mut wc = vec![0.0; runs.len() * d];
    for (dst, &(start, _)) in wc.chunks_exact_mut(d).zip(&runs) {
        kernel.whiten(trace.center(start), dst);
    }
    let log_len: Vec<f64> = runs.iter().map(|&(_, n)| (n as f64).ln()).collect();
    let ln_k = (trace.len() as f64).ln();
    let mut buf = vec![0.0; runs.len()];
    let mut values = Vec::with_capacity(wy.len() / d);
    for y in wy.chunks_exact(d) {
        for ((b, c), l) in buf.iter_mut().zip(wc.chunks_exact(d)).zip(&log_len) {
            *b = kernel.log_pdf_whitened(y, c) + l;
        }
        values.push(row_reduce(&buf) - ln_k);
    }
    let evals = (values.len() * runs.len()) as u64;
    Ok((values, evals))
}

/// Closed-form marginal proposal density.
#[derive(Debug, Clone)]
pub enum ExactRhoA {
    Gaussian(DiagGaussian),
    Mixture(GaussianMixture),
}

impl ExactRhoA {
    pub fn log_pdf(&self, y: &[f64]) -> f64 {
        match self {
            ExactRhoA::Gaussian(g) => g.log_pdf(y),
            ExactRhoA::Mixture(m) => m.log_pdf(y),
        }
    }
}

fn convolve(g: &DiagGaussian, theta: f64) -> Result<DiagGaussian> {
    DiagGaussian::new(
        g.mean().to_vec(),
        g.sd()
            .iter()
            .map(|s| (s * s + theta * theta).sqrt())
            .collect(),
    )
}

/// Stationary law of the Langevin recursion
/// `x' = x + theta (mu - x) / s^2 + sqrt(2 theta) z` per coordinate.
fn langevin_stationary(g: &DiagGaussian, theta: f64) -> Result<DiagGaussian> {
    let mut sd = Vec::with_capacity(g.dim());
    for &s in g.sd() {
        let a = 1.0 - theta / (s * s);
        if a.abs() >= 1.0 {
            return Err(Error::UnsupportedOracle(format!(
                "Langevin step {theta} has no stationary law for sd {s}"
            )));
        }
        sd.push((2.0 * theta / (1.0 - a * a)).sqrt());
    }
    DiagGaussian::new(g.mean().to_vec(), sd)
}

/// Builds the closed-form `rho_A` for the supported combinations: an
/// independent proposal (`rho_A = q`), an isotropic random walk under
/// Metropolis-Hastings on a Gaussian or mixture target (componentwise
/// convolution), and an always-accepted Langevin proposal on a Gaussian
/// target (stationary law of the linear recursion).
pub fn exact_rho_a(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    mode: AcceptMode,
) -> Result<ExactRhoA> {
    let unsupported = || {
        Err(Error::UnsupportedOracle(format!(
            "no closed-form marginal proposal density for {:?} with {:?} on a {} target",
            proposal.kind(),
            mode,
            target.kind_name()
        )))
    };
    if let Some(q) = proposal.independent_density() {
        return Ok(ExactRhoA::Gaussian(q.clone()));
    }
    let theta = proposal.theta().expect("dependent proposals carry theta");
    match (proposal.kind(), mode, target.kind()) {
        (ProposalKind::RandomWalk, AcceptMode::MetropolisHastings, kind)
            if proposal.is_isotropic_random_walk() =>
        {
            match kind {
                TargetKind::Gaussian(g) => Ok(ExactRhoA::Gaussian(convolve(g, theta)?)),
                TargetKind::Mixture(m) => {
                    let comps = m
                        .components()
                        .iter()
                        .map(|c| convolve(c, theta))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ExactRhoA::Mixture(GaussianMixture::new(
                        m.weights().collect(),
                        comps,
                    )?))
                }
                _ => unsupported(),
            }
        }
        (ProposalKind::Langevin, AcceptMode::AlwaysAccept, TargetKind::Gaussian(g)) => {
            Ok(ExactRhoA::Gaussian(langevin_stationary(g, theta)?))
        }
        _ => unsupported(),
    }
}

/// `log rho_A(y)` from [`exact_rho_a`].
pub fn exact_rho_a_log_pdf(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    mode: AcceptMode,
    y: &[f64],
) -> Result<f64> {
    crate::error::check_point(y, target.dim())?;
    Ok(exact_rho_a(target, proposal, mode)?.log_pdf(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvMode {
    /// Control variate on `q(y|X)`.
    Linear,
    /// Control variate on `log q(y|X)`.
    Log,
}

/// Denominators below this give `c = 0`.
pub const CV_DEGENERATE: f64 = 1e-300;

fn full_chain_row(matrix: &ProposalLogMatrix, i: usize) -> Result<&[f64]> {
    let full = matrix.columns.iter().enumerate().all(|(j, &c)| j == c);
    if !full {
        return Err(Error::input(
            "control variates need every chain state as a column, in chain order",
        ));
    }
    matrix
        .row(i)
        .ok_or_else(|| Error::input("control variates need a stored matrix"))
}

/// Per-row `c*` from successive column pairs. In linear mode the row is
/// rescaled by its maximum first; `c*` is invariant to that scale.
fn row_coefficient(row: &[f64], mode: CvMode) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let value = |v: f64| match mode {
        CvMode::Linear => (v - max).exp(),
        CvMode::Log => v,
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for w in row.windows(2) {
        let (a, b) = (value(w[0]), value(w[1]));
        num += a * a - a * b;
        den += (a - b) * (a - b);
    }
    if den < CV_DEGENERATE {
        0.0
    } else {
        num / den
    }
}

/// Per-row optimal coefficients `c*(Y_i)`.
pub fn cv_coefficients(matrix: &ProposalLogMatrix, mode: CvMode) -> Result<Vec<f64>> {
    (0..matrix.rows)
        .map(|i| Ok(row_coefficient(full_chain_row(matrix, i)?, mode)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvAdjusted {
    pub log_pdf: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Rows whose linear-mode adjusted density was not positive and which
    /// therefore keep the unadjusted value.
    pub fallback_rows: Vec<usize>,
}

/// Control-variate adjusted mixture log-density per row.
///
/// Linear mode: `(1/K) [sum_k q_k - c sum_{k<K} (q_k - q_{k+1})]`.
/// Log mode: each `l_k`, `k < K`, becomes `l_k - c (l_k - l_{k+1})` before
/// the log-sum-exp. `c = 0` reproduces [`mixture_log_pdf`] exactly.
pub fn cv_adjusted_mixture(
    matrix: &ProposalLogMatrix,
    mode: CvMode,
    c_override: Option<f64>,
) -> Result<CvAdjusted> {
    let base = mixture_log_pdf(matrix);
    let k = matrix.columns.len();
    let mut log_pdf = Vec::with_capacity(matrix.rows);
    let mut coefficients = Vec::with_capacity(matrix.rows);
    let mut fallback_rows = Vec::new();
    let mut buf = vec![0.0; k];
    for i in 0..matrix.rows {
        let row = full_chain_row(matrix, i)?;
        let c = c_override.unwrap_or_else(|| row_coefficient(row, mode));
        coefficients.push(c);
        if c == 0.0 || k < 2 {
            log_pdf.push(base[i]);
            continue;
        }
        match mode {
            CvMode::Linear => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                // The pair differences telescope to q_1 - q_K.
                let shift = (row[0] - max).exp() - (row[k - 1] - max).exp();
                let adjusted = sum - c * shift;
                if adjusted > 0.0 {
                    log_pdf.push(max + adjusted.ln() - (k as f64).ln());
                } else {
                    fallback_rows.push(i);
                    log_pdf.push(base[i]);
                }
            }
            CvMode::Log => {
                for j in 0..k {
                    buf[j] = if j + 1 < k {
                        row[j] - c * (row[j] - row[j + 1])
                    } else {
                        row[j]
                    };
                }
                log_pdf.push(row_reduce(&buf) - (k as f64).ln());
            }
        }
    }
    Ok(CvAdjusted {
        log_pdf,
        coefficients,
        fallback_rows,
    })
}

/// Causal mixture maintained while the chain advances.
///
/// After `k` pushes, row `i < k` holds `sum_{j<k} q(row_i | X_j)` relative to
/// a per-row reference `exp(r_i)`. Consecutive equal states form a run that
/// shares one column evaluation, so a rejected step costs no proposal
/// evaluations.
#[derive(Debug, Clone)]
pub struct RunningMixture {
    kernel: GaussianKernel,
    dim: usize,
    /// Whitened centres of completed runs and their lengths.
    run_centres: Vec<f64>,
    run_lengths: Vec<f64>,
    /// Whitened centre and length of the open run.
    open_centre: Vec<f64>,
    open_len: f64,
    rows: Vec<f64>,
    reference: Vec<f64>,
    closed: Vec<f64>,
    open: Vec<f64>,
    rescaled: Vec<usize>,
    pub q_evaluations: u64,
}

/// Rescale a row once a term exceeds its reference by this much (log scale).
const RESCALE_AT: f64 = 600.0;

impl RunningMixture {
    pub fn new(proposal: &ProposalFamily) -> Self {
        RunningMixture {
            kernel: proposal.kernel(),
            dim: proposal.dim(),
            run_centres: Vec::new(),
            run_lengths: Vec::new(),
            open_centre: Vec::new(),
            open_len: 0.0,
            rows: Vec::new(),
            reference: Vec::new(),
            closed: Vec::new(),
            open: Vec::new(),
            rescaled: Vec::new(),
            q_evaluations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    #[inline]
    fn add_term(&mut self, i: usize, log_term: f64, into_open: bool) {
        if log_term > self.reference[i] + RESCALE_AT {
            let f = (self.reference[i] - log_term).exp();
            self.closed[i] *= f;
            self.open[i] *= f;
            self.reference[i] = log_term;
            self.rescaled.push(i);
        }
        let v = (log_term - self.reference[i]).exp();
        if into_open {
            self.open[i] = v;
        } else {
            self.closed[i] += v;
        }
    }

    /// Adds column `centre` (the mean of `q(.|X_k)`) and then row `point`.
    /// `new_state` is false exactly when `X_k` repeats `X_{k-1}`.
    pub fn push(&mut self, centre: &[f64], new_state: bool, point: &[f64]) {
        let d = self.dim;
        if new_state || self.open_len == 0.0 {
            if self.open_len > 0.0 {
                for i in 0..self.len() {
                    self.closed[i] += self.open_len * self.open[i];
                }
                self.run_centres.extend_from_slice(&self.open_centre);
                self.run_lengths.push(self.open_len);
            }
            let mut c = vec![0.0; d];
            self.kernel.whiten(centre, &mut c);
            self.open_centre = c;
            self.open_len = 1.0;
            for i in 0..self.len() {
                let l = self
                    .kernel
                    .log_pdf_whitened(&self.rows[i * d..(i + 1) * d], &self.open_centre);
                self.add_term(i, l, true);
            }
            self.q_evaluations += self.len() as u64;
        } else {
            self.open_len += 1.0;
        }

        let mut w = vec![0.0; d];
        self.kernel.whiten(point, &mut w);
        let own = self.kernel.log_pdf_whitened(&w, &self.open_centre);
        self.rows.extend_from_slice(&w);
        self.reference.push(own);
        self.closed.push(0.0);
        self.open.push(1.0);
        let i = self.len() - 1;
        for r in 0..self.run_lengths.len() {
            let l = self
                .kernel
                .log_pdf_whitened(&w, &self.run_centres[r * d..(r + 1) * d])
                + self.run_lengths[r].ln();
            self.add_term(i, l, false);
        }
        self.q_evaluations += 1 + self.run_lengths.len() as u64;
    }

    /// Rows whose reference changed since the last call.
    pub fn take_rescaled(&mut self) -> Vec<usize> {
        std::mem::take(&mut self.rescaled)
    }

    /// Per-row reference `r_i`.
    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    /// `sum_j q(row_i | X_j) / exp(r_i)` over all pushed columns.
    #[inline]
    pub fn scaled_sum(&self, i: usize) -> f64 {
        self.closed[i] + self.open_len * self.open[i]
    }

    /// `log rho_hat_A(row_i)` over the columns pushed so far.
    pub fn log_pdf(&self, i: usize) -> f64 {
        self.reference[i] + self.scaled_sum(i).ln() - (self.len() as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{run_chain, ChainConfig};
    use crate::numeric::log_sum_exp;
    use std::sync::Arc;

    fn gauss(d: usize) -> TargetDensity {
        TargetDensity::isotropic_gaussian(d, 5.0, 0.7).unwrap()
    }

    fn mh_trace(t: &TargetDensity, q: &ProposalFamily, k: usize, seed: u64) -> ChainTrace {
        let x0 = vec![5.0; t.dim()];
        run_chain(
            t,
            q,
            &ChainConfig::new(k, seed, x0, AcceptMode::MetropolisHastings),
        )
        .unwrap()
    }

    fn naive(trace: &ChainTrace, q: &ProposalFamily) -> Vec<f64> {
        (0..trace.len())
            .map(|i| {
                let row: Vec<f64> = (0..trace.len())
                    .map(|j| q.log_pdf(trace.proposal(i), trace.state(j)).unwrap())
                    .collect();
                log_sum_exp(&row) - (trace.len() as f64).ln()
            })
            .collect()
    }

    #[test]
    fn single_column() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.5).unwrap();
        let tr = mh_trace(&t, &q, 1, 3);
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let direct = q.log_pdf(tr.proposal(0), tr.state(0)).unwrap();
        assert!((m[0] - direct).abs() < 1e-14);
    }

    #[test]
    fn duplicate_columns_collapse() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.5).unwrap();
        let tr = mh_trace(&t, &q, 2, 3);
        let m = build_log_matrix(&tr, &q, Some(&[0, 0])).unwrap();
        let single = build_log_matrix(&tr, &q, Some(&[0])).unwrap();
        for (a, b) in mixture_log_pdf(&m).iter().zip(mixture_log_pdf(&single)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(m.q_evaluations, 4);
    }

    #[test]
    fn matches_naive_double_loop() {
        let t = gauss(3);
        let lt = Arc::new(t.clone());
        for (n, q) in [
            ProposalFamily::random_walk(3, 0.8).unwrap(),
            ProposalFamily::langevin(lt, 0.2).unwrap(),
            ProposalFamily::independent(DiagGaussian::isotropic(3, 5.0, 1.0).unwrap()),
        ]
        .iter()
        .enumerate()
        {
            let tr = mh_trace(&t, q, 64, n as u64);
            let fast = mixture_log_pdf(&build_log_matrix(&tr, q, None).unwrap());
            for (a, b) in fast.iter().zip(naive(&tr, q)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn streaming_and_block_size_do_not_change_values() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 300, 1);
        let full = build_log_matrix(&tr, &q, None).unwrap();
        let opts = MatrixOptions {
            block_rows: 7,
            store: false,
            parallel: true,
        };
        let streamed = build_log_matrix_for(&tr.proposals, &tr, &q, None, opts).unwrap();
        assert!(!streamed.is_stored());
        assert_eq!(full.row_log_sum_exp(), streamed.row_log_sum_exp());
        let serial = MatrixOptions {
            parallel: false,
            ..opts
        };
        let serial = build_log_matrix_for(&tr.proposals, &tr, &q, None, serial).unwrap();
        assert_eq!(full.row_log_sum_exp(), serial.row_log_sum_exp());
        assert_eq!(full.q_evaluations, 300 * 300);
    }

    #[test]
    fn column_permutation_invariance() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 50, 2);
        let fwd: Vec<usize> = (0..50).collect();
        let rev: Vec<usize> = (0..50).rev().collect();
        let a = mixture_log_pdf(&build_log_matrix(&tr, &q, Some(&fwd)).unwrap());
        let b = mixture_log_pdf(&build_log_matrix(&tr, &q, Some(&rev)).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_subsets() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 5, 2);
        assert!(build_log_matrix(&tr, &q, Some(&[])).is_err());
        assert!(build_log_matrix(&tr, &q, Some(&[5])).is_err());
    }

    #[test]
    fn mixture_approaches_the_convolution() {
        // Exact iid draws of X from N(m, s^2); the mixture error at fixed
        // probes should shrink roughly like K^{-1/2}.
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let (m, s, theta) = (5.0, 0.7, 0.5);
        let q = ProposalFamily::random_walk(1, theta).unwrap();
        let exact = DiagGaussian::new(vec![m], vec![(s * s + theta * theta).sqrt()]).unwrap();
        let probes: Vec<f64> = (0..100).map(|i| m - 2.0 + 4.0 * i as f64 / 99.0).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(m, s).unwrap();
        let mut errs = Vec::new();
        for k in [100usize, 10_000] {
            let mut total = 0.0;
            for _rep in 0..5 {
                let xs: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
                for &y in &probes {
                    let row: Vec<f64> =
                        xs.iter().map(|&x| q.log_pdf(&[y], &[x]).unwrap()).collect();
                    let est = log_sum_exp(&row) - (k as f64).ln();
                    total += (est - exact.log_pdf(&[y])).abs();
                }
            }
            errs.push(total / 500.0);
        }
        let ratio = errs[0] / errs[1];
        assert!((5.0..20.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn exact_rho_a_oracles() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.6).unwrap();
        let y = [4.0, 5.5, 6.0];
        let got = exact_rho_a_log_pdf(&t, &q, AcceptMode::MetropolisHastings, &y).unwrap();
        let sd = (0.49f64 + 0.36).sqrt();
        let expect: f64 = y
            .iter()
            .map(|v| crate::numeric::std_normal_log_pdf((v - 5.0) / sd) - sd.ln())
            .sum();
        assert!((got - expect).abs() < 1e-12);

        let indep = DiagGaussian::isotropic(3, 4.0, 2.0).unwrap();
        let qi = ProposalFamily::independent(indep.clone());
        let got = exact_rho_a_log_pdf(&t, &qi, AcceptMode::MetropolisHastings, &y).unwrap();
        assert_eq!(got, qi.log_pdf(&y, &[0.0; 3]).unwrap());

        let t1 = Arc::new(gauss(1));
        let ula = ProposalFamily::langevin(t1.clone(), 0.1).unwrap();
        match exact_rho_a(&t1, &ula, AcceptMode::AlwaysAccept).unwrap() {
            ExactRhoA::Gaussian(g) => {
                let var = g.sd()[0] * g.sd()[0];
                let a: f64 = 1.0 - 0.1 / 0.49;
                assert!((var - 0.2 / (1.0 - a * a)).abs() < 1e-12);
                assert!((var - 0.5457).abs() < 1e-4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            exact_rho_a(&t1, &ula, AcceptMode::MetropolisHastings),
            Err(Error::UnsupportedOracle(_))
        ));
    }

    #[test]
    fn convolution_mixture_for_mog() {
        let mog = TargetDensity::mixture(
            GaussianMixture::new(
                vec![0.5, 0.5],
                vec![
                    DiagGaussian::isotropic(1, 3.0, 0.7).unwrap(),
                    DiagGaussian::isotropic(1, 7.0, 1.5).unwrap(),
                ],
            )
            .unwrap(),
        );
        let q = ProposalFamily::random_walk(1, 0.9).unwrap();
        let rho_a = exact_rho_a(&mog, &q, AcceptMode::MetropolisHastings).unwrap();
        // Trapezoid check that the closed form is the density of X + theta Z.
        let n = 20_000;
        let (a, b) = (-10.0, 20.0);
        let h = (b - a) / n as f64;
        let mut mass = 0.0;
        let mut mean = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = rho_a.log_pdf(&[x]).exp();
            mass += w * p * h;
            mean += w * p * x * h;
        }
        assert!((mass - 1.0).abs() < 1e-8);
        assert!((mean - 5.0).abs() < 1e-8);
    }

    #[test]
    fn control_variate_identities() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 200, 8);
        let m = build_log_matrix(&tr, &q, None).unwrap();
        let base = mixture_log_pdf(&m);
        for mode in [CvMode::Linear, CvMode::Log] {
            let forced = cv_adjusted_mixture(&m, mode, Some(0.0)).unwrap();
            assert_eq!(forced.log_pdf, base);
            let adj = cv_adjusted_mixture(&m, mode, None).unwrap();
            assert!(adj.log_pdf.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn frozen_chain_has_zero_coefficient() {
        // A tiny independent proposal centred far away: every column equal.
        let t = gauss(1);
        let q = ProposalFamily::random_walk(1, 0.5).unwrap();
        let mut tr = mh_trace(&t, &q, 20, 1);
        let x = tr.state(0).to_vec();
        for k in 0..tr.len() {
            tr.states[k] = x[0];
            tr.centers[k] = x[0];
        }
        let m = build_log_matrix(&tr, &q, None).unwrap();
        for mode in [CvMode::Linear, CvMode::Log] {
            let adj = cv_adjusted_mixture(&m, mode, None).unwrap();
            assert!(adj.coefficients.iter().all(|c| *c == 0.0));
            assert_eq!(adj.log_pdf, mixture_log_pdf(&m));
        }
    }

    #[test]
    fn coefficient_matches_direct_formula() {
        let t = gauss(1);
        let q = ProposalFamily::random_walk(1, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 100, 4);
        let m = build_log_matrix(&tr, &q, None).unwrap();
        let c = cv_coefficients(&m, CvMode::Linear).unwrap();
        let cl = cv_coefficients(&m, CvMode::Log).unwrap();
        for i in [0usize, 17, 99] {
            let qs: Vec<f64> = (0..100)
                .map(|j| q.log_pdf(tr.proposal(i), tr.state(j)).unwrap())
                .collect();
            let lin: Vec<f64> = qs.iter().map(|v| v.exp()).collect();
            let coef = |v: &[f64]| {
                let (mut n, mut d) = (0.0, 0.0);
                for k in 0..v.len() - 1 {
                    n += v[k] * v[k] - v[k] * v[k + 1];
                    d += (v[k] - v[k + 1]).powi(2);
                }
                n / d
            };
            assert!((c[i] - coef(&lin)).abs() < 1e-9 * coef(&lin).abs().max(1.0));
            assert!((cl[i] - coef(&qs)).abs() < 1e-9 * coef(&qs).abs().max(1.0));
        }
    }

    #[test]
    fn successor_difference_has_zero_mean() {
        let t = gauss(1);
        let q = ProposalFamily::random_walk(1, 1.7).unwrap();
        let tr = mh_trace(&t, &q, 50_000, 21);
        let y = [5.3];
        let diffs: Vec<f64> = (0..tr.len() - 1)
            .map(|k| {
                q.log_pdf(&y, tr.state(k)).unwrap().exp()
                    - q.log_pdf(&y, tr.state(k + 1)).unwrap().exp()
            })
            .collect();
        // Telescoping sum: the mean is (q_1 - q_K) / (K - 1), far below any
        // reasonable standard error.
        let mean = crate::numeric::mean(&diffs);
        let se = (crate::numeric::variance(&diffs) / diffs.len() as f64).sqrt();
        assert!(mean.abs() < 5.0 * se);
    }

    #[test]
    fn control_variates_need_a_full_stored_matrix() {
        let t = gauss(1);
        let q = ProposalFamily::random_walk(1, 0.8).unwrap();
        let tr = mh_trace(&t, &q, 10, 4);
        let sub = build_log_matrix(&tr, &q, Some(&[0, 2])).unwrap();
        assert!(cv_coefficients(&sub, CvMode::Log).is_err());
    }

    #[test]
    fn compressed_mixture_matches_full() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.9).unwrap();
        let tr = mh_trace(&t, &q, 500, 13);
        let full = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let (comp, evals) = compressed_mixture_log_pdf(&tr.proposals, &tr, &q).unwrap();
        for (a, b) in full.iter().zip(&comp) {
            assert!((a - b).abs() < 1e-12);
        }
        let runs = state_runs(&tr);
        assert_eq!(runs.iter().map(|r| r.1).sum::<usize>(), 500);
        assert_eq!(evals, 500 * runs.len() as u64);
        assert!(runs.len() < 500);
    }

    #[test]
    fn running_mixture_matches_batch_prefixes() {
        let t = gauss(3);
        let lt = Arc::new(t.clone());
        for q in [
            ProposalFamily::random_walk(3, 0.8).unwrap(),
            ProposalFamily::langevin(lt, 0.2).unwrap(),
        ] {
            let tr = mh_trace(&t, &q, 120, 6);
            let mut run = RunningMixture::new(&q);
            for k in 0..tr.len() {
                let new_state = k == 0 || tr.accepted[k - 1];
                run.push(tr.center(k), new_state, tr.proposal(k));
                if k % 23 == 0 || k + 1 == tr.len() {
                    let cols: Vec<usize> = (0..=k).collect();
                    let batch = build_log_matrix_for(
                        &tr.proposals[..(k + 1) * 3],
                        &tr,
                        &q,
                        Some(&cols),
                        MatrixOptions::default(),
                    )
                    .unwrap();
                    let expect = mixture_log_pdf(&batch);
                    for i in 0..=k {
                        assert!((run.log_pdf(i) - expect[i]).abs() < 1e-12);
                    }
                }
            }
            // Rejected steps reuse the open run's column.
            let accepted = tr.accepted[..tr.len() - 1].iter().filter(|a| **a).count();
            assert!(run.q_evaluations < (tr.len() * tr.len()) as u64);
            assert!(accepted < tr.len());
        }
    }
}
