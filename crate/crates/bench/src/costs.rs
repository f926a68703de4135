//! Runtime cost model of MCIS relative to the plain chain average.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use mcis::chain::{run_chain, ChainTrace};
use mcis::clock::{thread_cpu_ns, ClockMode, Meter};
use mcis::estimators::{mcis_estimate, vanilla};
use mcis::mixture::compressed_mixture_log_pdf;
use mcis::proposals::{ProposalFamily, ProposalKind};
use mcis::targets::TargetDensity;
use mcis::TestFunction;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{config_error, Result};
use crate::experiment::{chain_config, setup_metadata};
use crate::setup::{build_setup, Setup};

/// Per-evaluation costs in nanoseconds, with the acceptance rate and length
/// of the chain they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub alpha: f64,
    pub k: usize,
    /// All requested test functions at one point.
    pub c_f: f64,
    /// One pair `(y, x)` of the mixture table.
    pub c_q: f64,
    /// Target information needed per chain step: the log density, plus the
    /// gradient for Langevin proposals.
    pub c_rho: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_error(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(config_error("K must be at least 1"));
        }
        for (name, c) in [("c_f", self.c_f), ("c_q", self.c_q), ("c_rho", self.c_rho)] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(config_error(format!(
                    "{name} must be finite and non-negative, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Ratio of MCIS runtime to plain-average runtime:
    /// `1 + ((1 - a) K c_f + a K^2 c_q) / (a K c_f + K c_rho + 2 K c_q)`.
    ///
    /// The plain average evaluates `f` at the `aK` distinct states; MCIS
    /// evaluates it at the remaining proposals too and pays one proposal
    /// density per (proposal, distinct state) pair.
    pub fn prolongation_factor(&self) -> Result<f64> {
        self.validate()?;
        let (a, k) = (self.alpha, self.k as f64);
        let denom = a * k * self.c_f + k * self.c_rho + 2.0 * k * self.c_q;
        if denom <= 0.0 {
            return Err(config_error("prolongation model has a zero denominator"));
        }
        Ok(1.0 + ((1.0 - a) * k * self.c_f + a * k * k * self.c_q) / denom)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over `repeats` of the mean nanoseconds per call of `body(i)`,
/// `i = 0..evaluations`, after one untimed warm-up pass.
fn time_per_call(evaluations: usize, repeats: usize, mut body: impl FnMut(usize) -> f64) -> f64 {
    let mut sink = 0.0;
    for i in 0..evaluations {
        sink += body(i);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = thread_cpu_ns();
        for i in 0..evaluations {
            sink += body(i);
        }
        samples.push((thread_cpu_ns() - t0) as f64 / evaluations as f64);
    }
    std::hint::black_box(sink);
    median(samples)
}

/// Measures `c_f`, `c_q` and `c_rho` on points taken from `trace`.
pub fn measure_costs(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    trace: &ChainTrace,
    fs: &[TestFunction],
    evaluations: usize,
    repeats: usize,
) -> Result<CostModel> {
    if evaluations == 0 || repeats == 0 {
        return Err(config_error(
            "cost measurement needs evaluations and repeats",
        ));
    }
    let n = trace.len();
    let d = trace.dim;
    let point = |i: usize| trace.proposal(i % n);

    let c_f = time_per_call(evaluations, repeats, |i| {
        let y = point(i);
        fs.iter().map(|f| f.eval(y)).sum()
    });

    let kernel = proposal.kernel();
    let wy = kernel.whiten_rows(&trace.proposals, d);
    let mut wc = vec![0.0; trace.centers.len()];
    for (dst, c) in wc.chunks_exact_mut(d).zip(trace.centers.chunks_exact(d)) {
        kernel.whiten(c, dst);
    }
    let c_q = time_per_call(evaluations, repeats, |i| {
        // Rows and columns are offset so that pairs are not all diagonal.
        let r = i % n;
        let c = (i * 7 + 1) % n;
        kernel.log_pdf_whitened(&wy[r * d..(r + 1) * d], &wc[c * d..(c + 1) * d])
    });

    let langevin = proposal.kind() == ProposalKind::Langevin;
    let mut failure = None;
    let c_rho = time_per_call(evaluations, repeats, |i| {
        let y = point(i);
        let mut v = match target.log_density(y) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        };
        if langevin {
            match proposal.center(y) {
                Ok(c) => v += c[0],
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        v
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(CostModel {
        alpha: trace.acceptance_rate(),
        k: n,
        c_f,
        c_q,
        c_rho,
    })
}

/// Measured runtimes of one trace under both estimators, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProlongationMeasurement {
    pub chain_ns: f64,
    /// Plain average on top of the chain.
    pub vanilla_ns: f64,
    /// Run-compressed final mixture over all proposals.
    pub mixture_ns: f64,
    /// Weights and test functions on top of the mixture.
    pub weighting_ns: f64,
    pub ratio: f64,
}

/// Times the plain average and final-mixture MCIS on `trace`, `repeats`
/// times each, and reports medians. `chain_ns` is supplied by the caller,
/// usually the median over repeated chain runs.
pub fn measure_prolongation(
    trace: &ChainTrace,
    proposal: &ProposalFamily,
    fs: &[TestFunction],
    chain_ns: f64,
    repeats: usize,
) -> Result<ProlongationMeasurement> {
    if repeats == 0 {
        return Err(config_error(
            "prolongation measurement needs at least one repeat",
        ));
    }
    let base = trace.total_cpu_ns();
    let own = |cpu: &[u64]| cpu.last().copied().unwrap_or(base).saturating_sub(base) as f64;
    let mut van = Vec::with_capacity(repeats);
    let mut mix = Vec::with_capacity(repeats);
    let mut wts = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let v = vanilla(trace, fs, ClockMode::ThreadCpu)?;
        van.push(own(&v[0].cpu_ns));

        let meter = Meter::start(ClockMode::ThreadCpu);
        let (log_mix, _) = compressed_mixture_log_pdf(&trace.proposals, trace, proposal)?;
        mix.push(meter.elapsed_ns() as f64);

        let m = mcis_estimate(trace, &log_mix, fs, ClockMode::ThreadCpu)?;
        wts.push(own(&m[0].cpu_ns));
    }
    let vanilla_ns = median(van);
    let mixture_ns = median(mix);
    let weighting_ns = median(wts);
    Ok(ProlongationMeasurement {
        chain_ns,
        vanilla_ns,
        mixture_ns,
        weighting_ns,
        ratio: (chain_ns + mixture_ns + weighting_ns) / (chain_ns + vanilla_ns),
    })
}

/// Costs and prolongation at one target-cost inflation level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostLevel {
    /// Multiplier on the configured target cost repeats.
    pub inflation: u32,
    pub model: CostModel,
    pub predicted: f64,
    pub measured: ProlongationMeasurement,
}

/// The configured experiment's target with its cost multiplied by
/// `inflation`, and a proposal that sees the same target.
pub fn inflated(setup: &Setup, inflation: u32) -> Result<Setup> {
    let repeats = setup.target.cost_repeats().saturating_mul(inflation);
    let target = Arc::new((*setup.target).clone().with_cost_repeats(repeats));
    let proposal = match setup.proposal.kind() {
        ProposalKind::Langevin => {
            let theta = setup
                .proposal
                .theta()
                .expect("Langevin proposals have a step");
            ProposalFamily::langevin(Arc::clone(&target), theta)?
        }
        _ => setup.proposal.clone(),
    };
    Ok(Setup {
        target,
        proposal,
        ..setup.clone()
    })
}

/// Predicted and measured prolongation for each configured inflation level,
/// all on the first seed's chain. Each cost and runtime is the median over
/// `repeats` interleaved rounds.
pub fn cost_levels(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<CostLevel>> {
    let mut chain_cfg = chain_config(cfg, setup, cfg.seed);
    chain_cfg.clock = ClockMode::ThreadCpu;
    let repeats = cfg.costs.repeats;
    let mut levels = Vec::with_capacity(cfg.costs.inflation.len());
    for &inflation in &cfg.costs.inflation {
        let s = inflated(setup, inflation)?;
        // One sample of every quantity per round, so that slow drifts in
        // machine speed reach the model and the measurement alike.
        let mut rounds = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let trace = run_chain(&s.target, &s.proposal, &chain_cfg)?;
            let model = measure_costs(
                &s.target,
                &s.proposal,
                &trace,
                &cfg.test_functions,
                cfg.costs.evaluations,
                1,
            )?;
            let chain_ns = trace.total_cpu_ns() as f64;
            let measured =
                measure_prolongation(&trace, &s.proposal, &cfg.test_functions, chain_ns, 1)?;
            rounds.push((model, measured));
        }
        let pick = |get: fn(&(CostModel, ProlongationMeasurement)) -> f64| {
            median(rounds.iter().map(get).collect())
        };
        let model = CostModel {
            c_f: pick(|r| r.0.c_f),
            c_q: pick(|r| r.0.c_q),
            c_rho: pick(|r| r.0.c_rho),
            ..rounds
                .first()
                .map(|r| r.0)
                .ok_or_else(|| config_error("prolongation measurement needs at least one repeat"))?
        };
        let (chain_ns, vanilla_ns) = (pick(|r| r.1.chain_ns), pick(|r| r.1.vanilla_ns));
        let (mixture_ns, weighting_ns) = (pick(|r| r.1.mixture_ns), pick(|r| r.1.weighting_ns));
        let measured = ProlongationMeasurement {
            chain_ns,
            vanilla_ns,
            mixture_ns,
            weighting_ns,
            ratio: (chain_ns + mixture_ns + weighting_ns) / (chain_ns + vanilla_ns),
        };
        levels.push(CostLevel {
            inflation,
            model,
            predicted: model.prolongation_factor()?,
            measured,
        });
    }
    Ok(levels)
}

pub const COSTS_FILE: &str = "costs.csv";
pub const COSTS_METADATA_FILE: &str = "costs_metadata.json";

#[derive(Debug, Serialize)]
struct CostRow {
    inflation: u32,
    alpha: f64,
    k: usize,
    c_f: f64,
    c_q: f64,
    c_rho: f64,
    predicted: f64,
    measured: f64,
    chain_ns: f64,
    vanilla_ns: f64,
    mixture_ns: f64,
    weighting_ns: f64,
}

pub fn bench_costs(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<CostLevel>)> {
    cfg.validate()?;
    let setup = build_setup(cfg)?;
    let levels = cost_levels(cfg, &setup)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(COSTS_FILE);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    for l in &levels {
        w.serialize(CostRow {
            inflation: l.inflation,
            alpha: l.model.alpha,
            k: l.model.k,
            c_f: l.model.c_f,
            c_q: l.model.c_q,
            c_rho: l.model.c_rho,
            predicted: l.predicted,
            measured: l.measured.ratio,
            chain_ns: l.measured.chain_ns,
            vanilla_ns: l.measured.vanilla_ns,
            mixture_ns: l.measured.mixture_ns,
            weighting_ns: l.measured.weighting_ns,
        })?;
    }
    w.flush()?;
    let mut meta = setup_metadata(cfg, &setup);
    if let Some(m) = meta.as_object_mut() {
        m.insert("cost_levels".into(), serde_json::to_value(&levels)?);
        m.insert(
            "timing".into(),
            json!({
                "clock": "thread-cpu",
                "evaluations": cfg.costs.evaluations,
                "repeats": cfg.costs.repeats,
                "statistic": "median",
            }),
        );
    }
    let meta_path = cfg.output_dir.join(COSTS_METADATA_FILE);
    serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path)?), &meta)?;
    Ok((path, levels))
}
