//! Integral estimators over a chain trace.
//!
//! Every estimator returns one [`EstimateSeries`] per requested test function,
//! with the estimate after each step `k = 1..K` and the cumulative time
//! (chain time plus the estimator's own time) at which it became available.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::chain::ChainTrace;
use crate::clock::{ClockMode, Event, Meter, StepTimer};
use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::mixture::{
    build_log_matrix_for, exact_rho_a, mixture_log_pdf, MatrixOptions, RunningMixture,
};
use crate::numeric::log_sum_exp;
use crate::proposals::{ProposalFamily, Stream};
use crate::targets::{CountingTarget, TargetDensity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "mcis")]
    Mcis,
    #[serde(rename = "exact-mcis")]
    ExactMcis,
    #[serde(rename = "s-mcis")]
    Smcis,
    #[serde(rename = "lais")]
    Lais,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Vanilla,
        EstimatorKind::Mcis,
        EstimatorKind::ExactMcis,
        EstimatorKind::Smcis,
        EstimatorKind::Lais,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Vanilla => "vanilla",
            EstimatorKind::Mcis => "mcis",
            EstimatorKind::ExactMcis => "exact-mcis",
            EstimatorKind::Smcis => "s-mcis",
            EstimatorKind::Lais => "lais",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::input(format!("unknown estimator '{s}'")))
    }
}

/// Final per-sample terms of a weighted estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Terms {
    pub log_weights: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    pub estimator: EstimatorKind,
    pub test_function: TestFunction,
    /// `estimates[k - 1]` is the estimate after step `k`.
    pub estimates: Vec<f64>,
    pub cpu_ns: Vec<u64>,
    /// Final `log Z_hat`, for importance-weighted estimators.
    pub log_evidence: Option<f64>,
    /// Target evaluations behind the series, including the chain's own.
    pub target_evaluations: u64,
    /// Proposal evaluations spent by the estimator itself.
    pub proposal_evaluations: u64,
    pub terms: Terms,
}

impl EstimateSeries {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn final_estimate(&self) -> f64 {
        *self.estimates.last().expect("series is never empty")
    }
}

/// `sum_k w_k f_k / sum_k w_k` with weights shifted by their maximum. The
/// result is clamped to the hull of `f_values`, which it can only leave
/// through rounding.
pub fn self_normalized_estimate(log_weights: &[f64], f_values: &[f64]) -> Result<f64> {
    if log_weights.len() != f_values.len() {
        return Err(Error::DimensionMismatch {
            expected: log_weights.len(),
            got: f_values.len(),
        });
    }
    if log_weights.is_empty() {
        return Err(Error::Estimator("no samples".into()));
    }
    if log_weights
        .iter()
        .any(|w| w.is_nan() || *w == f64::INFINITY)
    {
        return Err(Error::Estimator(
            "log weights must not be NaN or +inf".into(),
        ));
    }
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Estimator("all weights are zero".into()));
    }
    let (mut sw, mut swf) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&lw, &f) in log_weights.iter().zip(f_values) {
        let w = (lw - max).exp();
        sw += w;
        swf += w * f;
        lo = lo.min(f);
        hi = hi.max(f);
    }
    Ok((swf / sw).clamp(lo, hi))
}

/// `log((1/K) sum_k w_k)`.
pub fn evidence_estimate(log_weights: &[f64]) -> f64 {
    log_sum_exp(log_weights) - (log_weights.len() as f64).ln()
}

/// Prefix sums of max-shifted weights; the shift is raised whenever a new
/// weight exceeds it.
struct RunningRatio {
    shift: f64,
    sw: f64,
    swf: Vec<f64>,
}

impl RunningRatio {
    fn new(n: usize) -> Self {
        RunningRatio {
            shift: f64::NEG_INFINITY,
            sw: 0.0,
            swf: vec![0.0; n],
        }
    }

    fn push(&mut self, lw: f64, values: &[f64]) {
        if lw > self.shift {
            let f = (self.shift - lw).exp();
            self.sw *= f;
            for s in &mut self.swf {
                *s *= f;
            }
            self.shift = lw;
        }
        let w = (lw - self.shift).exp();
        self.sw += w;
        for (s, v) in self.swf.iter_mut().zip(values) {
            *s += w * v;
        }
    }

    fn estimate(&self, j: usize) -> f64 {
        self.swf[j] / self.sw
    }
}

struct Builder {
    kind: EstimatorKind,
    fs: Vec<TestFunction>,
    estimates: Vec<Vec<f64>>,
    meter: Meter,
    timer: StepTimer,
}

impl Builder {
    fn new(kind: EstimatorKind, fs: &[TestFunction], k: usize, clock: ClockMode) -> Result<Self> {
        if fs.is_empty() {
            return Err(Error::input("no test functions requested"));
        }
        Ok(Builder {
            kind,
            fs: fs.to_vec(),
            estimates: vec![Vec::with_capacity(k); fs.len()],
            meter: Meter::start(clock),
            timer: StepTimer::new(k, 64),
        })
    }

    fn eval(&mut self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.fs) {
            *o = f.eval(x);
        }
        self.meter.charge(Event::TestFunction, self.fs.len() as u64);
    }

    fn record(&mut self) {
        self.timer.record(&self.meter);
    }

    fn finish(
        self,
        trace: &ChainTrace,
        log_evidence: Option<f64>,
        target_evaluations: u64,
        proposal_evaluations: u64,
        terms: Terms,
        values: Vec<Vec<f64>>,
    ) -> Vec<EstimateSeries> {
        let own = self.timer.finish(&self.meter);
        let cpu: Vec<u64> = trace.cpu_ns.iter().zip(&own).map(|(a, b)| a + b).collect();
        self.fs
            .iter()
            .zip(self.estimates)
            .zip(values)
            .map(|((&f, estimates), vals)| EstimateSeries {
                estimator: self.kind,
                test_function: f,
                estimates,
                cpu_ns: cpu.clone(),
                log_evidence,
                target_evaluations,
                proposal_evaluations,
                terms: Terms {
                    log_weights: terms.log_weights.clone(),
                    values: vals,
                },
            })
            .collect()
    }
}

fn transpose(rows: &[f64], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| rows.iter().skip(j).step_by(n).copied().collect())
        .collect()
}

/// Prefix-sum series over fixed log-weights evaluated at `points`.
/// Prefix-sum estimates from per-step log weights. `log_weight(i)` runs
/// under the estimator's meter and is charged `q_per_step` proposal
/// evaluations on the virtual clock.
#[allow(clippy::too_many_arguments)]
fn weighted_series(
    kind: EstimatorKind,
    trace: &ChainTrace,
    points: &[f64],
    mut log_weight: impl FnMut(usize) -> f64,
    q_per_step: u64,
    fs: &[TestFunction],
    clock: ClockMode,
    target_evaluations: u64,
    proposal_evaluations: u64,
) -> Result<Vec<EstimateSeries>> {
    let k = trace.len();
    let d = trace.dim;
    if points.len() != k * d {
        return Err(Error::input(format!(
            "{} points for a trace of length {k}",
            points.len() / d.max(1)
        )));
    }
    let mut b = Builder::new(kind, fs, k, clock)?;
    let mut vals = vec![0.0; fs.len()];
    let mut all_vals = Vec::with_capacity(k * fs.len());
    let mut log_weights = Vec::with_capacity(k);
    let mut ratio = RunningRatio::new(fs.len());
    for i in 0..k {
        let lw = log_weight(i);
        b.meter.charge(Event::Proposal, q_per_step);
        log_weights.push(lw);
        b.eval(&points[i * d..(i + 1) * d], &mut vals);
        ratio.push(lw, &vals);
        b.meter.charge(Event::Step, 1);
        for j in 0..fs.len() {
            b.estimates[j].push(ratio.estimate(j));
        }
        all_vals.extend_from_slice(&vals);
        b.record();
    }
    let evidence = evidence_estimate(&log_weights);
    let values = transpose(&all_vals, fs.len());
    Ok(b.finish(
        trace,
        Some(evidence),
        target_evaluations,
        proposal_evaluations,
        Terms {
            log_weights,
            values: Vec::new(),
        },
        values,
    ))
}

/// Running mean of `f(X_k)`. `f` is evaluated once per distinct state.
pub fn vanilla(
    trace: &ChainTrace,
    fs: &[TestFunction],
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    let k = trace.len();
    let mut b = Builder::new(EstimatorKind::Vanilla, fs, k, clock)?;
    let mut sums = vec![0.0; fs.len()];
    let mut vals = vec![0.0; fs.len()];
    let mut all_vals = Vec::with_capacity(k * fs.len());
    for i in 0..k {
        // A rejected step repeats the state, so its f values are reused.
        if i == 0 || trace.accepted[i - 1] {
            b.eval(trace.state(i), &mut vals);
        }
        b.meter.charge(Event::Step, 1);
        for j in 0..fs.len() {
            sums[j] += vals[j];
            b.estimates[j].push(sums[j] / (i + 1) as f64);
        }
        all_vals.extend_from_slice(&vals);
        b.record();
    }
    let values = transpose(&all_vals, fs.len());
    Ok(b.finish(
        trace,
        None,
        trace.target_evaluations,
        0,
        Terms {
            log_weights: vec![0.0; k],
            values: Vec::new(),
        },
        values,
    ))
}

/// Importance weights `rho(Y_k) / rho_hat_A(Y_k)` against the supplied
/// mixture values, accumulated as prefix sums. Reuses the cached
/// `log rho(Y_k)`, so no target evaluations are spent.
pub fn mcis_estimate(
    trace: &ChainTrace,
    mixture_log_pdf: &[f64],
    fs: &[TestFunction],
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    if mixture_log_pdf.len() != trace.len() {
        return Err(Error::input(format!(
            "{} mixture values for a trace of length {}",
            mixture_log_pdf.len(),
            trace.len()
        )));
    }
    weighted_series(
        EstimatorKind::Mcis,
        trace,
        &trace.proposals,
        |i| trace.log_rho_y[i] - mixture_log_pdf[i],
        0,
        fs,
        clock,
        trace.target_evaluations,
        0,
    )
}

/// Estimate after step `k` uses only `X_1..X_k` and `Y_1..Y_k`: the mixture
/// over the first `k` states evaluated at the first `k` proposals. Work per
/// step is linear in `k`.
fn causal_series(
    kind: EstimatorKind,
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    points: &[f64],
    log_rho: &[f64],
    fs: &[TestFunction],
    clock: ClockMode,
    target_evaluations: u64,
) -> Result<Vec<EstimateSeries>> {
    let k = trace.len();
    let d = trace.dim;
    let nf = fs.len();
    let mut b = Builder::new(kind, fs, k, clock)?;
    let mut mix = RunningMixture::new(proposal);
    let mut fvals = Vec::with_capacity(k * nf);
    let mut vals = vec![0.0; nf];
    // Row weight numerators exp(log_rho_i - r_i - shift).
    let mut numer: Vec<f64> = Vec::with_capacity(k);
    let mut shift = f64::NEG_INFINITY;
    let mut swf = vec![0.0; nf];
    let mut sw = 0.0;
    for step in 0..k {
        let new_state = step == 0 || trace.accepted[step - 1];
        let before = mix.q_evaluations;
        mix.push(
            trace.center(step),
            new_state,
            &points[step * d..(step + 1) * d],
        );
        b.meter.charge(Event::Proposal, mix.q_evaluations - before);
        let existing = numer.len();
        for i in mix.take_rescaled().into_iter().filter(|&i| i < existing) {
            numer[i] = (log_rho[i] - mix.reference()[i] - shift).exp();
        }
        b.eval(&points[step * d..(step + 1) * d], &mut vals);
        fvals.extend_from_slice(&vals);
        let a = log_rho[step] - mix.reference()[step];
        if a > shift {
            let f = (shift - a).exp();
            for n in &mut numer {
                *n *= f;
            }
            shift = a;
        }
        numer.push((a - shift).exp());

        sw = 0.0;
        swf.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..=step {
            let t = numer[i] / mix.scaled_sum(i);
            sw += t;
            let row = &fvals[i * nf..(i + 1) * nf];
            for (s, v) in swf.iter_mut().zip(row) {
                *s += t * v;
            }
        }
        b.meter.charge(Event::Step, step as u64 + 1);
        for j in 0..nf {
            b.estimates[j].push(swf[j] / sw);
        }
        b.record();
    }
    // w_i = K exp(shift) numer_i / S_i, so mean(w) = exp(shift) * sw.
    let log_evidence = shift + sw.ln();
    let log_weights = (0..k).map(|i| log_rho[i] - mix.log_pdf(i)).collect();
    let values = transpose(&fvals, nf);
    Ok(b.finish(
        trace,
        Some(log_evidence),
        target_evaluations,
        mix.q_evaluations,
        Terms {
            log_weights,
            values: Vec::new(),
        },
        values,
    ))
}

/// Causal running MCIS: the estimate after step `k` is exactly the MCIS
/// estimate of a chain stopped at `k`.
///
/// A state-independent proposal makes every mixture component the same
/// density, so the mixture is `q` itself and costs one evaluation per step.
pub fn mcis_running(
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    fs: &[TestFunction],
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    if proposal.is_state_independent() {
        return weighted_series(
            EstimatorKind::Mcis,
            trace,
            &trace.proposals,
            |i| {
                trace.log_rho_y[i]
                    - proposal.log_pdf_from_center(trace.proposal(i), trace.center(i))
            },
            1,
            fs,
            clock,
            trace.target_evaluations,
            trace.len() as u64,
        );
    }
    causal_series(
        EstimatorKind::Mcis,
        trace,
        proposal,
        &trace.proposals,
        &trace.log_rho_y,
        fs,
        clock,
        trace.target_evaluations,
    )
}

/// Weights against the closed-form marginal proposal density.
pub fn exact_mcis(
    trace: &ChainTrace,
    target: &TargetDensity,
    proposal: &ProposalFamily,
    fs: &[TestFunction],
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    let rho_a = exact_rho_a(target, proposal, trace.snapshot.config.accept_mode)?;
    weighted_series(
        EstimatorKind::ExactMcis,
        trace,
        &trace.proposals,
        |i| trace.log_rho_y[i] - rho_a.log_pdf(trace.proposal(i)),
        1,
        fs,
        clock,
        trace.target_evaluations,
        trace.len() as u64,
    )
}

/// Single-component weights `rho(Y_k) / q(Y_k | X_k)`.
pub fn smcis(
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    fs: &[TestFunction],
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    weighted_series(
        EstimatorKind::Smcis,
        trace,
        &trace.proposals,
        |i| trace.log_rho_y[i] - proposal.log_pdf_from_center(trace.proposal(i), trace.center(i)),
        1,
        fs,
        clock,
        trace.target_evaluations,
        trace.len() as u64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureForm {
    /// Mixture over all `K` states, weights accumulated as prefix sums.
    Final,
    /// Mixture over the states seen so far.
    Causal,
}

/// Fresh draws `Z_k ~ q(.|X_k)` from a stream seeded with `fresh_seed`,
/// weighted by `rho(Z_k) / rho_hat_A(Z_k)`. Spends exactly `K` new target
/// evaluations.
pub fn lais(
    trace: &ChainTrace,
    target: &TargetDensity,
    proposal: &ProposalFamily,
    fs: &[TestFunction],
    fresh_seed: u64,
    form: MixtureForm,
    clock: ClockMode,
) -> Result<Vec<EstimateSeries>> {
    let k = trace.len();
    let counter = CountingTarget::new(target);
    let mut rng = Stream::seed_from_u64(fresh_seed);
    let mut meter = Meter::start(clock);
    let mut timer = StepTimer::new(k, 64);
    let mut z = Vec::with_capacity(k * trace.dim);
    let mut log_rho = Vec::with_capacity(k);
    for i in 0..k {
        let zi = proposal.propose_from_center(trace.center(i), &mut rng);
        log_rho.push(counter.log_density(&zi)?);
        meter.charge(Event::Draw, 1);
        meter.charge(Event::Target, 1);
        z.extend_from_slice(&zi);
        timer.record(&meter);
    }
    let draw_ns = timer.finish(&meter);
    let total = trace.target_evaluations + counter.count();
    let mut series = match form {
        MixtureForm::Causal => causal_series(
            EstimatorKind::Lais,
            trace,
            proposal,
            &z,
            &log_rho,
            fs,
            clock,
            total,
        )?,
        MixtureForm::Final => {
            let opts = MatrixOptions {
                store: false,
                parallel: false,
                ..MatrixOptions::default()
            };
            // No estimate exists before the whole table is built, so its
            // cost is charged to every step.
            let mut build = Meter::start(clock);
            let m = build_log_matrix_for(&z, trace, proposal, None, opts)?;
            build.charge(Event::Proposal, m.q_evaluations);
            let build_ns = build.elapsed_ns();
            let mix = mixture_log_pdf(&m);
            let mut s = weighted_series(
                EstimatorKind::Lais,
                trace,
                &z,
                |i| log_rho[i] - mix[i],
                0,
                fs,
                clock,
                total,
                m.q_evaluations,
            )?;
            for series in &mut s {
                series.cpu_ns.iter_mut().for_each(|c| *c += build_ns);
            }
            s
        }
    };
    for s in &mut series {
        for (c, extra) in s.cpu_ns.iter_mut().zip(&draw_ns) {
            *c += extra;
        }
    }
    Ok(series)
}

/// Batch-means estimate of the asymptotic variance `gamma` of the
/// self-normalized estimator, so that `Var(estimate) ~ gamma / K`.
///
/// The series' terms are cut into `num_batches` batches of `m = K / B`
/// samples (a leading remainder is dropped). With batch means `N_b` of
/// `w f` and `D_b` of `w`, `R` the overall ratio and `D` the mean of `D_b`,
/// `gamma = m / (B - 1) * sum_b ((N_b - R D_b) / D)^2`.
pub fn clt_batch_variance(series: &EstimateSeries, num_batches: usize) -> Result<f64> {
    batch_variance(&series.terms.log_weights, &series.terms.values, num_batches)
}

pub fn batch_variance(log_weights: &[f64], values: &[f64], num_batches: usize) -> Result<f64> {
    if num_batches < 10 {
        return Err(Error::input("batch means need at least 10 batches"));
    }
    if log_weights.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: log_weights.len(),
            got: values.len(),
        });
    }
    let m = log_weights.len() / num_batches;
    if m == 0 {
        return Err(Error::input("fewer samples than batches"));
    }
    let skip = log_weights.len() - m * num_batches;
    let lw = &log_weights[skip..];
    let f = &values[skip..];
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
    let ratio = self_normalized_estimate(lw, f)?;
    let d_bar = w.iter().sum::<f64>() / w.len() as f64;
    // N_b - R D_b is accumulated from centred values so a constant f gives 0.
    let ss: f64 = w
        .chunks_exact(m)
        .zip(f.chunks_exact(m))
        .map(|(wb, fb)| {
            let centred: f64 = wb.iter().zip(fb).map(|(w, f)| w * (f - ratio)).sum();
            (centred / m as f64 / d_bar).powi(2)
        })
        .sum();
    Ok(m as f64 * ss / (num_batches - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{run_chain, AcceptMode, ChainConfig};
    use crate::mixture::build_log_matrix;
    use crate::targets::DiagGaussian;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    const ALL_F: [TestFunction; 4] = TestFunction::ALL;
    const CLOCK: ClockMode = ClockMode::ThreadCpu;

    fn gauss(d: usize) -> TargetDensity {
        TargetDensity::isotropic_gaussian(d, 5.0, 0.7).unwrap()
    }

    fn trace(t: &TargetDensity, q: &ProposalFamily, k: usize, seed: u64) -> ChainTrace {
        run_chain(
            t,
            q,
            &ChainConfig::new(k, seed, vec![5.0; t.dim()], AcceptMode::MetropolisHastings),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn estimate_is_convex_combination(
            pairs in prop::collection::vec((-50.0f64..50.0, -1e3f64..1e3), 1..60)
        ) {
            let (lw, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let e = self_normalized_estimate(&lw, &f).unwrap();
            let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= e && e <= hi);
        }

        #[test]
        fn constant_function_is_exact(
            lw in prop::collection::vec(-300.0f64..300.0, 1..60),
            c in -1e6f64..1e6,
        ) {
            let f = vec![c; lw.len()];
            prop_assert_eq!(self_normalized_estimate(&lw, &f).unwrap(), c);
        }

        #[test]
        fn shift_invariance_is_bitwise_for_dyadic_weights(
            raw in prop::collection::vec((-4096i32..4096, -1e3f64..1e3), 1..60),
            shift in -64i32..64,
        ) {
            let lw: Vec<f64> = raw.iter().map(|(w, _)| *w as f64 / 256.0).collect();
            let f: Vec<f64> = raw.iter().map(|(_, f)| *f).collect();
            let moved: Vec<f64> = lw.iter().map(|w| w + shift as f64).collect();
            prop_assert_eq!(
                self_normalized_estimate(&lw, &f).unwrap().to_bits(),
                self_normalized_estimate(&moved, &f).unwrap().to_bits()
            );
        }

        #[test]
        fn shift_invariance_is_tight_for_any_weights(
            pairs in prop::collection::vec((-30.0f64..30.0, -10.0f64..10.0), 1..60),
            shift in -1e3f64..1e3,
        ) {
            let (lw, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let moved: Vec<f64> = lw.iter().map(|w| w + shift).collect();
            let a = self_normalized_estimate(&lw, &f).unwrap();
            let b = self_normalized_estimate(&moved, &f).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn running_ratio_matches_batch(
            pairs in prop::collection::vec((-40.0f64..40.0, -10.0f64..10.0), 1..80)
        ) {
            let mut r = RunningRatio::new(1);
            for (i, (lw, f)) in pairs.iter().enumerate() {
                r.push(*lw, &[*f]);
                let (w, v): (Vec<f64>, Vec<f64>) = pairs[..=i].iter().copied().unzip();
                let batch = self_normalized_estimate(&w, &v).unwrap();
                prop_assert!((r.estimate(0) - batch).abs() <= 1e-9 * (1.0 + batch.abs()));
            }
        }
    }

    #[test]
    fn equal_weights_give_the_plain_mean() {
        let f = [1.0, 2.0, 6.0];
        assert!((self_normalized_estimate(&[-3.0; 3], &f).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_weights_are_errors() {
        assert!(self_normalized_estimate(&[f64::NEG_INFINITY; 2], &[1.0, 2.0]).is_err());
        assert!(self_normalized_estimate(&[], &[]).is_err());
        assert!(self_normalized_estimate(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_step_estimates_are_the_function_value() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.5).unwrap();
        let tr = trace(&t, &q, 1, 2);
        let y = tr.proposal(0).to_vec();
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        for s in [
            mcis_estimate(&tr, &m, &ALL_F, CLOCK).unwrap(),
            mcis_running(&tr, &q, &ALL_F, CLOCK).unwrap(),
            smcis(&tr, &q, &ALL_F, CLOCK).unwrap(),
            exact_mcis(&tr, &t, &q, &ALL_F, CLOCK).unwrap(),
        ] {
            for ser in s {
                assert_eq!(ser.final_estimate(), ser.test_function.eval(&y));
            }
        }
    }

    #[test]
    fn frozen_chain_vanilla_is_first_value() {
        let t = gauss(2);
        // Step so large that nothing is ever accepted in 50 steps.
        let q = ProposalFamily::random_walk(2, 1e6).unwrap();
        let tr = trace(&t, &q, 50, 1);
        assert!(tr.accepted.iter().all(|a| !a));
        for s in vanilla(&tr, &ALL_F, CLOCK).unwrap() {
            assert!(s
                .estimates
                .iter()
                .all(|e| (*e - s.test_function.eval(tr.state(0))).abs() < 1e-12));
        }
    }

    #[test]
    fn causal_mcis_ends_at_the_batch_estimate() {
        let t = gauss(3);
        let lt = Arc::new(t.clone());
        for q in [
            ProposalFamily::random_walk(3, 0.6).unwrap(),
            ProposalFamily::langevin(lt, 0.2).unwrap(),
        ] {
            let tr = trace(&t, &q, 400, 5);
            let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
            let batch = mcis_estimate(&tr, &m, &ALL_F, CLOCK).unwrap();
            let causal = mcis_running(&tr, &q, &ALL_F, CLOCK).unwrap();
            for (b, c) in batch.iter().zip(&causal) {
                let (x, y) = (b.final_estimate(), c.final_estimate());
                assert!((x - y).abs() < 1e-10 * x.abs().max(1.0), "{x} vs {y}");
                assert!((b.log_evidence.unwrap() - c.log_evidence.unwrap()).abs() < 1e-10);
            }
            // Each causal prefix equals a batch estimate on the truncated trace.
            for k in [1usize, 17, 200] {
                let short = tr.truncated(k);
                let m = mixture_log_pdf(&build_log_matrix(&short, &q, None).unwrap());
                let b = mcis_estimate(&short, &m, &ALL_F, CLOCK).unwrap();
                for (bs, cs) in b.iter().zip(&causal) {
                    let (x, y) = (bs.final_estimate(), cs.estimates[k - 1]);
                    assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn independent_proposal_collapses_to_importance_sampling() {
        let t = gauss(3);
        let qd = DiagGaussian::isotropic(3, 4.5, 1.2).unwrap();
        let q = ProposalFamily::independent(qd.clone());
        let tr = trace(&t, &q, 500, 3);
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let est = mcis_estimate(&tr, &m, &ALL_F, CLOCK).unwrap();
        let exact = exact_mcis(&tr, &t, &q, &ALL_F, CLOCK).unwrap();
        let single = smcis(&tr, &q, &ALL_F, CLOCK).unwrap();
        let lw: Vec<f64> = (0..tr.len())
            .map(|i| t.log_density(tr.proposal(i)).unwrap() - qd.log_pdf(tr.proposal(i)))
            .collect();
        for j in 0..ALL_F.len() {
            let fv: Vec<f64> = (0..tr.len())
                .map(|i| ALL_F[j].eval(tr.proposal(i)))
                .collect();
            let is = self_normalized_estimate(&lw, &fv).unwrap();
            for s in [&est[j], &exact[j], &single[j]] {
                assert!((s.final_estimate() - is).abs() < 1e-12 * is.abs().max(1.0));
            }
        }
    }

    #[test]
    fn evidence_is_exactly_one_when_proposal_is_the_target() {
        let g = DiagGaussian::isotropic(3, 5.0, 0.7).unwrap();
        let t = TargetDensity::gaussian(g.clone());
        let q = ProposalFamily::independent(g);
        let tr = trace(&t, &q, 200, 1);
        let s = exact_mcis(&tr, &t, &q, &ALL_F, CLOCK).unwrap();
        assert_eq!(s[0].log_evidence, Some(0.0));
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let s = mcis_estimate(&tr, &m, &ALL_F, CLOCK).unwrap();
        // The mixture goes through the whitened kernel, not the density itself.
        assert!(s[0].log_evidence.unwrap().abs() < 1e-12);
        let s = smcis(&tr, &q, &ALL_F, CLOCK).unwrap();
        assert_eq!(s[0].log_evidence, Some(0.0));
    }

    #[test]
    fn evidence_scales_with_the_target() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.7).unwrap();
        let tr = trace(&t, &q, 300, 6);
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let base = mcis_estimate(&tr, &m, &ALL_F[..1], CLOCK).unwrap()[0]
            .log_evidence
            .unwrap();
        let mut scaled = tr.clone();
        let a = 3.5f64.ln();
        scaled.log_rho_y.iter_mut().for_each(|v| *v += a);
        let s = mcis_estimate(&scaled, &m, &ALL_F[..1], CLOCK).unwrap()[0]
            .log_evidence
            .unwrap();
        assert!((s - base - a).abs() < 1e-12);
    }

    #[test]
    fn lais_spends_one_target_call_per_step() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.6).unwrap();
        let tr = trace(&t, &q, 300, 2);
        for form in [MixtureForm::Final, MixtureForm::Causal] {
            let s = lais(&tr, &t, &q, &ALL_F, 99, form, CLOCK).unwrap();
            assert_eq!(s[0].target_evaluations, 2 * 300 + 1);
        }
        assert_eq!(
            vanilla(&tr, &ALL_F, CLOCK).unwrap()[0].target_evaluations,
            301
        );
        assert_eq!(
            mcis_running(&tr, &q, &ALL_F, CLOCK).unwrap()[0].target_evaluations,
            301
        );
        assert_eq!(
            smcis(&tr, &q, &ALL_F, CLOCK).unwrap()[0].target_evaluations,
            301
        );
    }

    #[test]
    fn lais_forms_agree_at_the_end() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.6).unwrap();
        let tr = trace(&t, &q, 300, 2);
        let a = lais(&tr, &t, &q, &ALL_F, 5, MixtureForm::Final, CLOCK).unwrap();
        let b = lais(&tr, &t, &q, &ALL_F, 5, MixtureForm::Causal, CLOCK).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (u, v) = (x.final_estimate(), y.final_estimate());
            assert!((u - v).abs() < 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn constant_function_is_exact_for_every_estimator() {
        let t = gauss(2);
        let q = ProposalFamily::random_walk(2, 0.6).unwrap();
        let tr = trace(&t, &q, 200, 2);
        let m = mixture_log_pdf(&build_log_matrix(&tr, &q, None).unwrap());
        let all = [
            vanilla(&tr, &ALL_F[..1], CLOCK).unwrap(),
            mcis_estimate(&tr, &m, &ALL_F[..1], CLOCK).unwrap(),
            mcis_running(&tr, &q, &ALL_F[..1], CLOCK).unwrap(),
            exact_mcis(&tr, &t, &q, &ALL_F[..1], CLOCK).unwrap(),
            smcis(&tr, &q, &ALL_F[..1], CLOCK).unwrap(),
            lais(&tr, &t, &q, &ALL_F[..1], 4, MixtureForm::Final, CLOCK).unwrap(),
        ];
        for s in &all {
            let lw = &s[0].terms.log_weights;
            assert_eq!(
                self_normalized_estimate(lw, &vec![-7.25; lw.len()]).unwrap(),
                -7.25
            );
        }
    }

    #[test]
    fn series_times_are_monotone_and_extend_the_chain() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.6).unwrap();
        let tr = trace(&t, &q, 500, 2);
        for s in mcis_running(&tr, &q, &ALL_F, CLOCK).unwrap() {
            assert_eq!(s.len(), 500);
            assert!(s.cpu_ns.windows(2).all(|w| w[0] <= w[1]));
            assert!(s.cpu_ns.iter().zip(&tr.cpu_ns).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        let t = gauss(3);
        let q = ProposalFamily::random_walk(3, 0.6).unwrap();
        let tr = trace(&t, &q, 20, 2);
        assert!(mcis_estimate(&tr, &[0.0; 19], &ALL_F, CLOCK).is_err());
        assert!(vanilla(&tr, &[], CLOCK).is_err());
    }

    #[test]
    fn batch_variance_of_constant_is_zero() {
        let lw: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert_eq!(batch_variance(&lw, &[2.5; 1000], 20).unwrap(), 0.0);
        assert!(batch_variance(&lw, &[2.5; 1000], 9).is_err());
    }

    #[test]
    fn batch_variance_matches_iid_oracle() {
        // log w ~ N(0,1) and f ~ N(0,1) independent: the asymptotic variance
        // of the ratio is E[w^2] E[f^2] / E[w]^2 = e^2 / e = e.
        let mut rng = Stream::seed_from_u64(8);
        let mut gammas: Vec<f64> = (0..50)
            .map(|_| {
                let n = 20_000;
                let lw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                batch_variance(&lw, &f, 20).unwrap()
            })
            .collect();
        gammas.sort_by(f64::total_cmp);
        let median = gammas[25];
        let e = std::f64::consts::E;
        assert!((e / 2.0..2.0 * e).contains(&median), "median {median}");
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in EstimatorKind::ALL {
            assert_eq!(e.name().parse::<EstimatorKind>().unwrap(), e);
        }
        assert!("mc".parse::<EstimatorKind>().is_err());
    }
}
