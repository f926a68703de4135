//! The acceptance-rejection chain driver and proposal-scale tuning.
//!
//! Per step the chain stream yields exactly `dim` standard normals (the
//! proposal) followed by one uniform (the acceptance decision). The uniform
//! is drawn in always-accept mode too, so both modes consume the stream
//! identically.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::clock::{ClockMode, Event, Meter, StepTimer};
use crate::error::{check_point, Error, Result};
use crate::proposals::{ProposalFamily, ProposalKind, Stream};
use crate::targets::TargetDensity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptMode {
    MetropolisHastings,
    /// Every proposal is accepted (unadjusted Langevin with a Langevin proposal).
    AlwaysAccept,
}

/// Acceptance probability `min{1, q(x|y) rho(y) / (q(y|x) rho(x))}`.
///
/// `log_q_xy` is `log q(x|y)` (reverse move) and `log_q_yx` is `log q(y|x)`.
pub fn mh_acceptance(log_rho_x: f64, log_rho_y: f64, log_q_xy: f64, log_q_yx: f64) -> Result<f64> {
    if log_rho_x == f64::NEG_INFINITY {
        return Err(Error::InvalidState("current state has zero density".into()));
    }
    if [log_rho_x, log_rho_y, log_q_xy, log_q_yx]
        .iter()
        .any(|v| v.is_nan())
    {
        return Err(Error::InvalidState("NaN in acceptance ratio".into()));
    }
    if log_rho_y == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let log_ratio = (log_q_xy + log_rho_y) - (log_q_yx + log_rho_x);
    if log_ratio.is_nan() {
        return Err(Error::InvalidState("undefined acceptance ratio".into()));
    }
    Ok(log_ratio.min(0.0).exp().clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub steps: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub accept_mode: AcceptMode,
    /// Unrecorded steps run before `X_1`; they share the chain stream.
    pub burn_in: usize,
    pub clock: ClockMode,
    /// CPU-clock reads happen every `timer_stride` steps.
    pub timer_stride: usize,
}

impl ChainConfig {
    pub fn new(steps: usize, seed: u64, x0: Vec<f64>, accept_mode: AcceptMode) -> Self {
        ChainConfig {
            steps,
            seed,
            x0,
            accept_mode,
            burn_in: 0,
            clock: ClockMode::ThreadCpu,
            timer_stride: 64,
        }
    }

    pub fn with_clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }
}

/// What produced a trace, kept alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSnapshot {
    pub config: ChainConfig,
    pub proposal: ProposalKind,
    pub theta: Option<f64>,
    pub target: String,
}

/// Paired record of states `X_k` and proposals `Y_k`, `k = 1..K`, stored
/// row-major. `X_{k+1}` is a bitwise copy of `Y_k` when step `k` accepts and
/// of `X_k` otherwise.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub dim: usize,
    pub states: Vec<f64>,
    pub proposals: Vec<f64>,
    /// Means of `q(.|X_k)`; cached because Langevin centres cost a gradient.
    pub centers: Vec<f64>,
    pub log_rho_y: Vec<f64>,
    pub log_rho_x: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Cumulative nanoseconds at the end of each step.
    pub cpu_ns: Vec<u64>,
    pub seed: u64,
    /// Target log-density calls, including the initial state and burn-in.
    pub target_evaluations: u64,
    pub gradient_evaluations: u64,
    pub proposal_evaluations: u64,
    pub snapshot: ChainSnapshot,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn proposal(&self, k: usize) -> &[f64] {
        &self.proposals[k * self.dim..(k + 1) * self.dim]
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|a| **a).count() as f64 / self.len().max(1) as f64
    }

    /// Total recorded time in nanoseconds.
    pub fn total_cpu_ns(&self) -> u64 {
        self.cpu_ns.last().copied().unwrap_or(0)
    }

    /// The same trace restricted to its first `k` steps.
    pub fn truncated(&self, k: usize) -> ChainTrace {
        let k = k.min(self.len());
        let d = self.dim;
        ChainTrace {
            dim: d,
            states: self.states[..k * d].to_vec(),
            proposals: self.proposals[..k * d].to_vec(),
            centers: self.centers[..k * d].to_vec(),
            log_rho_y: self.log_rho_y[..k].to_vec(),
            log_rho_x: self.log_rho_x[..k].to_vec(),
            accepted: self.accepted[..k].to_vec(),
            cpu_ns: self.cpu_ns[..k].to_vec(),
            seed: self.seed,
            target_evaluations: k as u64 + 1,
            gradient_evaluations: self.gradient_evaluations,
            proposal_evaluations: self.proposal_evaluations,
            snapshot: self.snapshot.clone(),
        }
    }
}

struct Walker<'a> {
    target: &'a TargetDensity,
    proposal: &'a ProposalFamily,
    mode: AcceptMode,
    rng: Stream,
    meter: Meter,
    x: Vec<f64>,
    cx: Vec<f64>,
    lrx: f64,
    target_evals: u64,
    grad_evals: u64,
    q_evals: u64,
}

struct Step {
    y: Vec<f64>,
    lry: f64,
    accepted: bool,
}

impl<'a> Walker<'a> {
    fn center(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if self.proposal.kind() == ProposalKind::Langevin {
            self.grad_evals += 1;
            self.meter.charge(Event::Gradient, 1);
        }
        self.proposal.center(x)
    }

    fn step(&mut self) -> Result<Step> {
        let y = self.proposal.propose_from_center(&self.cx, &mut self.rng);
        self.meter.charge(Event::Draw, 1);
        let lry = self.target.log_density(&y)?;
        self.target_evals += 1;
        self.meter.charge(Event::Target, 1);
        let u: f64 = self.rng.random();
        self.meter.charge(Event::Step, 1);

        let mut cy = None;
        let accepted = match self.mode {
            AcceptMode::AlwaysAccept => true,
            AcceptMode::MetropolisHastings => {
                let (lq_xy, lq_yx) = if self.proposal.is_symmetric() {
                    (0.0, 0.0)
                } else if self.proposal.is_state_independent() {
                    self.q_evals += 2;
                    self.meter.charge(Event::Proposal, 2);
                    (
                        self.proposal.log_pdf_from_center(&self.x, &self.cx),
                        self.proposal.log_pdf_from_center(&y, &self.cx),
                    )
                } else {
                    let c = self.center(&y)?;
                    self.q_evals += 2;
                    self.meter.charge(Event::Proposal, 2);
                    let pair = (
                        self.proposal.log_pdf_from_center(&self.x, &c),
                        self.proposal.log_pdf_from_center(&y, &self.cx),
                    );
                    cy = Some(c);
                    pair
                };
                u < mh_acceptance(self.lrx, lry, lq_xy, lq_yx)?
            }
        };
        if accepted {
            self.cx = match cy {
                Some(c) => c,
                None if self.proposal.is_state_independent() => self.cx.clone(),
                None => self.center(&y)?,
            };
            self.x.clone_from(&y);
            self.lrx = lry;
        }
        Ok(Step { y, lry, accepted })
    }
}

/// Runs `config.steps` recorded steps of the acceptance-rejection chain.
///
/// Performs exactly `steps + burn_in + 1` target evaluations: one per
/// proposal plus the initial state.
pub fn run_chain(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    config: &ChainConfig,
) -> Result<ChainTrace> {
    let d = target.dim();
    if proposal.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: proposal.dim(),
        });
    }
    if config.steps == 0 {
        return Err(Error::input("chain needs at least one step"));
    }
    check_point(&config.x0, d)?;
    let mut meter = Meter::start(config.clock);
    let lrx = target.log_density(&config.x0)?;
    meter.charge(Event::Target, 1);
    if !lrx.is_finite() {
        return Err(Error::Initialization(format!(
            "log density at the initial state is {lrx}"
        )));
    }
    let mut w = Walker {
        target,
        proposal,
        mode: config.accept_mode,
        rng: Stream::seed_from_u64(config.seed),
        meter,
        x: config.x0.clone(),
        cx: Vec::new(),
        lrx,
        target_evals: 1,
        grad_evals: 0,
        q_evals: 0,
    };
    w.cx = w.center(&config.x0)?;
    for _ in 0..config.burn_in {
        w.step()?;
    }

    let k = config.steps;
    let mut states = Vec::with_capacity(k * d);
    let mut proposals = Vec::with_capacity(k * d);
    let mut centers = Vec::with_capacity(k * d);
    let mut log_rho_y = Vec::with_capacity(k);
    let mut log_rho_x = Vec::with_capacity(k);
    let mut accepted = Vec::with_capacity(k);
    let mut timer = StepTimer::new(k, config.timer_stride);
    for _ in 0..k {
        states.extend_from_slice(&w.x);
        centers.extend_from_slice(&w.cx);
        log_rho_x.push(w.lrx);
        let s = w.step()?;
        proposals.extend_from_slice(&s.y);
        log_rho_y.push(s.lry);
        accepted.push(s.accepted);
        timer.record(&w.meter);
    }
    let cpu_ns = timer.finish(&w.meter);
    Ok(ChainTrace {
        dim: d,
        states,
        proposals,
        centers,
        log_rho_y,
        log_rho_x,
        accepted,
        cpu_ns,
        seed: config.seed,
        target_evaluations: w.target_evals,
        gradient_evaluations: w.grad_evals,
        proposal_evaluations: w.q_evals,
        snapshot: ChainSnapshot {
            config: config.clone(),
            proposal: proposal.kind(),
            theta: proposal.theta(),
            target: target.kind_name().to_string(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub pilot_steps: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            pilot_steps: 2000,
            tolerance: 0.05,
            max_iterations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub theta: f64,
    pub rate: f64,
    /// Every `(theta, pilot_rate)` pair evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Searches for a step parameter whose Metropolis-Hastings pilot acceptance
/// rate lies within `tolerance` of `desired_rate`.
///
/// Steps multiply by 2 until the rate is bracketed, then bisect geometrically.
/// Every pilot reuses `seed`, so the rate is a deterministic function of theta.
pub fn tune_scale(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    x0: &[f64],
    desired_rate: f64,
    seed: u64,
    options: TuneOptions,
) -> Result<Tuned> {
    if !(desired_rate > 0.0 && desired_rate < 1.0) {
        return Err(Error::input(format!(
            "desired acceptance rate must lie in (0, 1), got {desired_rate}"
        )));
    }
    if options.pilot_steps < 100 {
        return Err(Error::input("tuning needs at least 100 pilot steps"));
    }
    let mut theta = proposal
        .theta()
        .ok_or_else(|| Error::input("proposal has no step parameter to tune"))?;
    let config = ChainConfig::new(
        options.pilot_steps,
        seed,
        x0.to_vec(),
        AcceptMode::MetropolisHastings,
    )
    .with_burn_in(options.pilot_steps / 4);

    let mut trace = Vec::new();
    // `lo` accepts too often (theta too small), `hi` too rarely.
    let mut lo: Option<f64> = None;
    let mut hi: Option<f64> = None;
    for _ in 0..options.max_iterations {
        let rate = run_chain(target, &proposal.with_theta(theta)?, &config)?.acceptance_rate();
        trace.push((theta, rate));
        if (rate - desired_rate).abs() <= options.tolerance {
            return Ok(Tuned { theta, rate, trace });
        }
        if rate > desired_rate {
            lo = Some(theta);
        } else {
            hi = Some(theta);
        }
        theta = match (lo, hi) {
            (Some(a), Some(b)) => (a * b).sqrt(),
            (Some(a), None) => a * 2.0,
            (None, Some(b)) => b / 2.0,
            (None, None) => unreachable!("one side was just set"),
        };
    }
    Err(Error::Tuning { trace })
}
