//! Posterior over the hyperparameters of a Gaussian-process regression model
//! with a squared-exponential ARD kernel.
//!
//! Parameters are unconstrained: `u_m` maps to the ARD variance
//! `softplus(u_m)`, `v` to the likelihood scale `exp(v)`, and `mu` is the GP
//! mean. Each coordinate has an independent standard normal prior.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, softplus_inv, std_normal_log_pdf, LN_2PI};

/// Mean and standard deviation used to standardize one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
    /// Set when the column was constant; it is then centred and divided by 1.
    pub zero_sd: bool,
}

impl ColumnStats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        ColumnStats {
            mean,
            sd,
            zero_sd: sd == 0.0,
        }
    }

    fn divisor(&self) -> f64 {
        if self.zero_sd {
            1.0
        } else {
            self.sd
        }
    }
}

/// Which columns of a delimited file to use. Column numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub predictors: Vec<usize>,
    pub response: usize,
    #[serde(default)]
    pub max_rows: Option<usize>,
    #[serde(default = "default_true")]
    pub standardize_response: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    /// Row-major `n x p`, standardized.
    predictors: Vec<f64>,
    responses: Vec<f64>,
    num_predictors: usize,
    pub column_names: Vec<String>,
    pub predictor_stats: Vec<ColumnStats>,
    pub response_stats: Option<ColumnStats>,
}

impl RegressionDataset {
    /// Builds a dataset from raw rows, standardizing every predictor column.
    pub fn from_raw(
        predictors: Vec<Vec<f64>>,
        responses: Vec<f64>,
        column_names: Vec<String>,
        standardize_response: bool,
    ) -> Result<Self> {
        let n = responses.len();
        if predictors.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: predictors.len(),
            });
        }
        let p = predictors.first().map_or(0, |r| r.len());
        if p == 0 && n > 0 {
            return Err(Error::input("dataset needs at least one predictor"));
        }
        if predictors.iter().any(|r| r.len() != p) {
            return Err(Error::input("ragged predictor rows"));
        }
        if predictors
            .iter()
            .flatten()
            .chain(&responses)
            .any(|v| !v.is_finite())
        {
            return Err(Error::input("dataset contains non-finite values"));
        }
        let mut stats = Vec::with_capacity(p);
        let mut flat = vec![0.0; n * p];
        for m in 0..p {
            let s = ColumnStats::of(predictors.iter().map(|r| r[m]));
            for (i, row) in predictors.iter().enumerate() {
                flat[i * p + m] = (row[m] - s.mean) / s.divisor();
            }
            stats.push(s);
        }
        let (responses, response_stats) = if standardize_response && n > 0 {
            let s = ColumnStats::of(responses.iter().copied());
            (
                responses
                    .iter()
                    .map(|y| (y - s.mean) / s.divisor())
                    .collect(),
                Some(s),
            )
        } else {
            (responses, None)
        };
        Ok(RegressionDataset {
            predictors: flat,
            responses,
            num_predictors: p,
            column_names,
            predictor_stats: stats,
            response_stats,
        })
    }

    /// A dataset with no rows; the posterior then reduces to the prior.
    pub fn empty(num_predictors: usize) -> Self {
        RegressionDataset {
            predictors: Vec::new(),
            responses: Vec::new(),
            num_predictors,
            column_names: Vec::new(),
            predictor_stats: Vec::new(),
            response_stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn num_predictors(&self) -> usize {
        self.num_predictors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.predictors[i * self.num_predictors..(i + 1) * self.num_predictors]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Same data with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        let p = self.num_predictors;
        for (dst, &src) in perm.iter().enumerate() {
            out.predictors[dst * p..(dst + 1) * p].copy_from_slice(self.row(src));
            out.responses[dst] = self.responses[src];
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Delimiter {
    Tab,
    Comma,
    Whitespace,
}

impl Delimiter {
    fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    fn split(self, line: &str) -> Vec<&str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        }
    }
}

/// Reads a tab-, comma- or whitespace-delimited numeric file.
///
/// A first line made only of non-numeric tokens is taken as a header. When
/// `max_rows` is set only the leading rows are kept.
pub fn load_dataset(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<RegressionDataset> {
    if spec.predictors.is_empty() {
        return Err(Error::input("no predictor columns selected"));
    }
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let Some(&(_, first)) = lines.peek() else {
        return Err(Error::input("dataset file is empty"));
    };
    let delim = Delimiter::detect(first);
    let first_tokens = delim.split(first);
    let width = first_tokens.len();
    let mut names: Vec<String> = (1..=width).map(|c| format!("column{c}")).collect();
    if first_tokens.iter().all(|t| t.parse::<f64>().is_err()) {
        names = first_tokens.iter().map(|t| t.to_string()).collect();
        lines.next();
    }
    for &c in spec
        .predictors
        .iter()
        .chain(std::iter::once(&spec.response))
    {
        if c == 0 || c > width {
            return Err(Error::input(format!("column {c} out of range 1..={width}")));
        }
    }

    let limit = spec.max_rows.unwrap_or(usize::MAX);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line_idx, line) in lines.take(limit) {
        let tokens = delim.split(line);
        if tokens.len() != width {
            return Err(Error::Parse {
                line: line_idx + 1,
                column: tokens.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", tokens.len()),
            });
        }
        let mut values = Vec::with_capacity(width);
        for (col, tok) in tokens.iter().enumerate() {
            let v = tok.parse::<f64>().map_err(|_| Error::Parse {
                line: line_idx + 1,
                column: col + 1,
                message: format!("`{tok}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_idx + 1,
                    column: col + 1,
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        xs.push(spec.predictors.iter().map(|&c| values[c - 1]).collect());
        ys.push(values[spec.response - 1]);
    }
    if ys.is_empty() {
        return Err(Error::input("dataset has no data rows"));
    }
    let column_names = spec
        .predictors
        .iter()
        .chain(std::iter::once(&spec.response))
        .map(|&c| names[c - 1].clone())
        .collect();
    RegressionDataset::from_raw(xs, ys, column_names, spec.standardize_response)
}

/// Unconstrained GP hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    /// `log(exp(sigma2) - 1)` per predictor.
    pub log_ard: Vec<f64>,
    /// `log(lambda)`.
    pub log_likelihood_scale: f64,
    pub mean: f64,
}

impl GpHyperparameters {
    pub fn from_constrained(ard_variances: &[f64], likelihood_scale: f64, mean: f64) -> Self {
        GpHyperparameters {
            log_ard: ard_variances.iter().map(|&s| softplus_inv(s)).collect(),
            log_likelihood_scale: likelihood_scale.ln(),
            mean,
        }
    }

    /// Layout: `[u_1..u_p, v, mu]`.
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() < 3 {
            return Err(Error::input("GP parameter vector needs at least 3 entries"));
        }
        let p = theta.len() - 2;
        Ok(GpHyperparameters {
            log_ard: theta[..p].to_vec(),
            log_likelihood_scale: theta[p],
            mean: theta[p + 1],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_ard.clone();
        v.push(self.log_likelihood_scale);
        v.push(self.mean);
        v
    }

    pub fn ard_variances(&self) -> Vec<f64> {
        self.log_ard.iter().map(|&u| softplus(u)).collect()
    }

    pub fn likelihood_scale(&self) -> f64 {
        self.log_likelihood_scale.exp()
    }

    pub fn log_prior(&self) -> f64 {
        self.to_vec().into_iter().map(std_normal_log_pdf).sum()
    }
}

/// Jitter multipliers (of the mean diagonal) tried after a failed factorization.
pub const JITTER_LEVELS: [f64; 3] = [1e-8, 1e-6, 1e-4];

struct Factorized {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ard_kernel: DMatrix<f64>,
}

/// Log posterior of GP hyperparameters given a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    data: RegressionDataset,
    /// Squared coordinate differences for each pair `i < j`, `p` per pair.
    pair_sq: Vec<f64>,
}

impl GpPosterior {
    pub fn new(data: RegressionDataset) -> Self {
        let n = data.len();
        let p = data.num_predictors();
        let mut pair_sq = Vec::with_capacity(n * n.saturating_sub(1) / 2 * p);
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (data.row(i), data.row(j));
                pair_sq.extend(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)));
            }
        }
        GpPosterior { data, pair_sq }
    }

    pub fn data(&self) -> &RegressionDataset {
        &self.data
    }

    /// `p + 2`.
    pub fn num_params(&self) -> usize {
        self.data.num_predictors() + 2
    }

    fn check(&self, params: &GpHyperparameters) -> Result<()> {
        if params.log_ard.len() != self.data.num_predictors() {
            return Err(Error::DimensionMismatch {
                expected: self.data.num_predictors(),
                got: params.log_ard.len(),
            });
        }
        if let Some(i) = params.to_vec().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    fn ard_kernel(&self, ard: &[f64]) -> DMatrix<f64> {
        let n = self.data.len();
        let p = ard.len();
        let half_inv: Vec<f64> = ard.iter().map(|s| 0.5 / s).collect();
        let mut k = DMatrix::<f64>::identity(n, n);
        let mut idx = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = &self.pair_sq[idx * p..(idx + 1) * p];
                let e: f64 = d.iter().zip(&half_inv).map(|(a, b)| a * b).sum();
                let v = (-e).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
                idx += 1;
            }
        }
        k
    }

    fn factorize(&self, params: &GpHyperparameters) -> Result<Factorized> {
        let n = self.data.len();
        let lambda = params.likelihood_scale();
        let ard_kernel = self.ard_kernel(&params.ard_variances());
        let mean_diag = 1.0 + lambda;
        let mut tried = Vec::new();
        for jitter in std::iter::once(0.0).chain(JITTER_LEVELS.iter().map(|l| l * mean_diag)) {
            let mut cov = ard_kernel.clone();
            for i in 0..n {
                cov[(i, i)] += lambda + jitter;
            }
            tried.push(jitter);
            if let Some(chol) = cov.cholesky() {
                return Ok(Factorized { chol, ard_kernel });
            }
        }
        Err(Error::Factorization { levels: tried })
    }

    /// Log prior plus log marginal likelihood.
    pub fn log_posterior(&self, params: &GpHyperparameters) -> Result<f64> {
        self.check(params)?;
        let prior = params.log_prior();
        let n = self.data.len();
        if n == 0 {
            return Ok(prior);
        }
        let f = self.factorize(params)?;
        let resid =
            DVector::from_iterator(n, self.data.responses().iter().map(|y| y - params.mean));
        let alpha = f.chol.solve(&resid);
        let half_log_det: f64 = f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let loglik = -0.5 * resid.dot(&alpha) - half_log_det - 0.5 * n as f64 * LN_2PI;
        Ok(prior + loglik)
    }

    /// Analytic gradient with respect to the unconstrained parameters. The
    /// jitter chosen by the factorization is treated as a constant.
    pub fn grad_log_posterior(&self, params: &GpHyperparameters) -> Result<Vec<f64>> {
        self.check(params)?;
        let theta = params.to_vec();
        let mut grad: Vec<f64> = theta.iter().map(|t| -t).collect();
        let n = self.data.len();
        if n == 0 {
            return Ok(grad);
        }
        let p = self.data.num_predictors();
        let f = self.factorize(params)?;
        let resid =
            DVector::from_iterator(n, self.data.responses().iter().map(|y| y - params.mean));
        let alpha = f.chol.solve(&resid);
        let k_inv = f.chol.inverse();
        // d loglik / d theta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta)
        let ard = params.ard_variances();
        let mut acc = vec![0.0; p];
        let mut idx = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let w = alpha[i] * alpha[j] - k_inv[(i, j)];
                let kij = f.ard_kernel[(i, j)];
                let d = &self.pair_sq[idx * p..(idx + 1) * p];
                for m in 0..p {
                    // both (i,j) and (j,i): factor 2 cancels the 1/2 of the trace
                    acc[m] += w * kij * 0.5 * d[m];
                }
                idx += 1;
            }
        }
        for m in 0..p {
            let dsigma2_du = sigmoid(params.log_ard[m]);
            grad[m] += acc[m] / (ard[m] * ard[m]) * dsigma2_du;
        }
        let lambda = params.likelihood_scale();
        let trace_inv: f64 = (0..n).map(|i| k_inv[(i, i)]).sum();
        grad[p] += 0.5 * lambda * (alpha.dot(&alpha) - trace_inv);
        grad[p + 1] += alpha.sum();
        Ok(grad)
    }

    pub fn log_posterior_slice(&self, theta: &[f64]) -> Result<f64> {
        self.log_posterior(&GpHyperparameters::from_slice(theta)?)
    }

    pub fn grad_log_posterior_slice(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.grad_log_posterior(&GpHyperparameters::from_slice(theta)?)
    }
}

/// Frequencies (Hz) at which the wind-tunnel style rows are generated.
const FREQUENCIES: [f64; 16] = [
    200.0, 315.0, 400.0, 500.0, 630.0, 800.0, 1000.0, 1250.0, 1600.0, 2000.0, 2500.0, 3150.0,
    4000.0, 5000.0, 6300.0, 8000.0,
];
const ANGLES: [f64; 9] = [0.0, 1.5, 3.0, 4.0, 5.3, 7.3, 9.9, 12.3, 15.4];
const CHORDS: [f64; 6] = [0.0254, 0.0508, 0.1016, 0.1524, 0.2286, 0.3048];
const VELOCITIES: [f64; 4] = [31.7, 39.6, 55.5, 71.3];

/// Generates `n` rows in the six-column airfoil self-noise layout
/// (frequency, angle, chord, velocity, displacement thickness, sound
/// pressure level), tab separated. Used when the measured data is not at hand.
pub fn synthetic_airfoil(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n {
        let freq = FREQUENCIES[rng.random_range(0..FREQUENCIES.len())];
        let angle = ANGLES[rng.random_range(0..ANGLES.len())];
        let chord = CHORDS[rng.random_range(0..CHORDS.len())];
        let vel = VELOCITIES[rng.random_range(0..VELOCITIES.len())];
        let noise: f64 = rng.sample(StandardNormal);
        let thick = 4e-4 * (1.0 + 0.25 * angle) * (chord / 0.0254).sqrt() * (0.15 * noise).exp();
        let strouhal = freq * thick / vel;
        let eps: f64 = rng.sample(StandardNormal);
        let spl = 126.0 + 10.0 * (vel / 71.3).log10()
            - 20.0 * chord
            - 8.0 * (strouhal.ln() + 4.0).powi(2) / 10.0
            + 0.2 * angle
            + 1.5 * eps;
        out.push_str(&format!(
            "{freq}\t{angle}\t{chord}\t{vel}\t{thick:.9}\t{spl:.3}\n"
        ));
    }
    out
}
