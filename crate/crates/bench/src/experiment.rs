//! Seeded repetitions of one configuration, written as raw series, windowed
//! curves and a metadata file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mcis::chain::{run_chain, ChainConfig, ChainTrace};
use mcis::clock::{ClockMode, Meter};
use mcis::estimators::{
    exact_mcis, lais, mcis_estimate, mcis_running, smcis, vanilla, EstimateSeries, EstimatorKind,
    MixtureForm,
};
use mcis::mixture::{build_log_matrix_for, mixture_log_pdf, MatrixOptions};
use mcis::TestFunction;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::costs::{measure_costs, CostModel};
use crate::curves::{average_curves, error_curve, CurvePoint};
use crate::error::Result;
use crate::setup::{build_setup, Setup};

/// Keeps the fresh LAIS stream independent of the chain stream.
const LAIS_SEED: u64 = 0xd1b5_4a32_d192_ed03;

pub const RAW_FILE: &str = "raw.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// An estimator that could not run on this configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCounters {
    pub estimator: EstimatorKind,
    pub target_evaluations: u64,
    pub proposal_evaluations: u64,
    pub log_evidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub acceptance_rate: f64,
    pub chain_target_evaluations: u64,
    pub chain_gradient_evaluations: u64,
    /// Every series of every estimator that ran, in config order.
    pub series: Vec<EstimateSeries>,
    pub skipped: Vec<SkippedCell>,
}

impl SeedResult {
    pub fn get(&self, estimator: EstimatorKind, f: TestFunction) -> Option<&EstimateSeries> {
        self.series
            .iter()
            .find(|s| s.estimator == estimator && s.test_function == f)
    }
}

pub fn chain_config(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> ChainConfig {
    ChainConfig::new(cfg.steps, seed, setup.x0.clone(), cfg.accept_mode)
        .with_burn_in(cfg.burn_in)
        .with_clock(cfg.clock)
}

pub fn run_estimator(
    kind: EstimatorKind,
    cfg: &ExperimentConfig,
    setup: &Setup,
    trace: &ChainTrace,
) -> mcis::Result<Vec<EstimateSeries>> {
    let fs = &cfg.test_functions;
    let (target, proposal, clock) = (&*setup.target, &setup.proposal, cfg.clock);
    match kind {
        EstimatorKind::Vanilla => vanilla(trace, fs, clock),
        // With a state-independent proposal both forms reduce to q itself.
        EstimatorKind::Mcis => match cfg.mixture {
            MixtureForm::Final if !proposal.is_state_independent() => {
                final_mixture_mcis(trace, setup, fs, clock)
            }
            _ => mcis_running(trace, proposal, fs, clock),
        },
        EstimatorKind::ExactMcis => exact_mcis(trace, target, proposal, fs, clock),
        EstimatorKind::Smcis => smcis(trace, proposal, fs, clock),
        EstimatorKind::Lais => lais(
            trace,
            target,
            proposal,
            fs,
            trace.seed ^ LAIS_SEED,
            cfg.mixture,
            clock,
        ),
    }
}

/// MCIS against the mixture over all `K` states. No estimate exists before
/// the whole table is built, so its cost is charged to every step.
fn final_mixture_mcis(
    trace: &ChainTrace,
    setup: &Setup,
    fs: &[TestFunction],
    clock: ClockMode,
) -> mcis::Result<Vec<EstimateSeries>> {
    let mut meter = Meter::start(clock);
    let opts = MatrixOptions {
        store: false,
        parallel: false,
        ..MatrixOptions::default()
    };
    let m = build_log_matrix_for(&trace.proposals, trace, &setup.proposal, None, opts)?;
    meter.charge(mcis::clock::Event::Proposal, m.q_evaluations);
    let build_ns = meter.elapsed_ns();
    let mut series = mcis_estimate(trace, &mixture_log_pdf(&m), fs, clock)?;
    for s in &mut series {
        s.proposal_evaluations += m.q_evaluations;
        s.cpu_ns.iter_mut().for_each(|c| *c += build_ns);
    }
    Ok(series)
}

/// Runs the chain and every configured estimator for one seed. Estimators
/// that fail are recorded as skipped; chain failures abort.
pub fn run_seed(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedResult> {
    let trace = run_chain(
        &setup.target,
        &setup.proposal,
        &chain_config(cfg, setup, seed),
    )?;
    let mut series = Vec::new();
    let mut skipped = Vec::new();
    for &kind in &cfg.estimators {
        match run_estimator(kind, cfg, setup, &trace) {
            Ok(s) => series.extend(s),
            Err(e) => skipped.push(SkippedCell {
                seed,
                estimator: kind,
                reason: e.to_string(),
            }),
        }
    }
    Ok(SeedResult {
        seed,
        acceptance_rate: trace.acceptance_rate(),
        chain_target_evaluations: trace.target_evaluations,
        chain_gradient_evaluations: trace.gradient_evaluations,
        series,
        skipped,
    })
}

pub fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.repetitions as u64)
        .map(|r| cfg.seed.wrapping_add(r))
        .collect()
}

/// All seeds, run in parallel and returned in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<SeedResult>> {
    seeds(cfg)
        .into_par_iter()
        .map(|s| run_seed(cfg, setup, s))
        .collect()
}

#[derive(Debug, Serialize)]
struct RawRow {
    seed: u64,
    step: usize,
    cpu_ns: u64,
    estimator: EstimatorKind,
    test_function: TestFunction,
    estimate: f64,
    abs_error: f64,
}

#[derive(Debug, Serialize)]
struct CurveRow {
    estimator: EstimatorKind,
    test_function: TestFunction,
    step: usize,
    cpu_ns: u64,
    mean_log10_abs_error: f64,
}

pub fn write_raw(path: &Path, results: &[SeedResult], setup: &Setup) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in results {
        for s in &r.series {
            let truth = setup.truth(s.test_function);
            for (i, (&est, &cpu)) in s.estimates.iter().zip(&s.cpu_ns).enumerate() {
                w.serialize(RawRow {
                    seed: r.seed,
                    step: i + 1,
                    cpu_ns: cpu,
                    estimator: s.estimator,
                    test_function: s.test_function,
                    estimate: est,
                    abs_error: (est - truth).abs(),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Seed-averaged windowed curves per (estimator, test function).
pub fn mean_curves(
    cfg: &ExperimentConfig,
    results: &[SeedResult],
    setup: &Setup,
) -> Result<Vec<(EstimatorKind, TestFunction, Vec<CurvePoint>)>> {
    let mut out = Vec::new();
    for &e in &cfg.estimators {
        for &f in &cfg.test_functions {
            let curves = results
                .iter()
                .filter_map(|r| r.get(e, f))
                .map(|s| error_curve(s, setup.truth(f), cfg.window))
                .collect::<Result<Vec<_>>>()?;
            if !curves.is_empty() {
                out.push((e, f, average_curves(&curves)));
            }
        }
    }
    Ok(out)
}

pub fn write_curves(
    path: &Path,
    curves: &[(EstimatorKind, TestFunction, Vec<CurvePoint>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for (e, f, points) in curves {
        for p in points {
            w.serialize(CurveRow {
                estimator: *e,
                test_function: *f,
                step: p.step,
                cpu_ns: p.cpu_ns,
                mean_log10_abs_error: p.mean_log10_abs_error,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Provenance shared by every metadata file.
pub fn setup_metadata(cfg: &ExperimentConfig, setup: &Setup) -> serde_json::Value {
    let dataset = setup.dataset.as_ref().map(|d| {
        json!({
            "rows": d.len(),
            "column_names": d.column_names,
            "predictor_stats": d.predictor_stats,
            "response_stats": d.response_stats,
        })
    });
    let truth: BTreeMap<String, f64> = setup
        .truth
        .iter()
        .map(|(f, v)| (f.name().to_string(), *v))
        .collect();
    json!({
        "software": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "created_unix": unix_timestamp(),
        "config": cfg,
        "target": {
            "kind": setup.target.kind_name(),
            "dim": setup.target.dim(),
            "gradient": if setup.target.gradient_is_analytic() { "analytic" } else { "finite-difference" },
        },
        "x0": setup.x0,
        "proposal": setup.proposal_report,
        "truth": truth,
        "truth_source": setup.truth_source,
        "dataset": dataset,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub raw: PathBuf,
    pub curves: PathBuf,
    pub metadata: PathBuf,
    pub setup: Setup,
    pub results: Vec<SeedResult>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let setup = build_setup(cfg)?;
    let results = run_seeds(cfg, &setup)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let raw = cfg.output_dir.join(RAW_FILE);
    let curves_path = cfg.output_dir.join(CURVES_FILE);
    let metadata = cfg.output_dir.join(METADATA_FILE);
    write_raw(&raw, &results, &setup)?;
    let curves = mean_curves(cfg, &results, &setup)?;
    write_curves(&curves_path, &curves)?;

    let costs = cost_snapshot(cfg, &setup, &results);
    let mut meta = setup_metadata(cfg, &setup);
    let mut summary = Vec::new();
    for &e in &cfg.estimators {
        for &f in &cfg.test_functions {
            let errs: Vec<f64> = results
                .iter()
                .filter_map(|r| r.get(e, f))
                .map(|s| (s.final_estimate() - setup.truth(f)).abs())
                .collect();
            if !errs.is_empty() {
                summary.push(json!({
                    "estimator": e,
                    "test_function": f,
                    "median_final_abs_error": median(errs),
                }));
            }
        }
    }
    let per_seed: Vec<_> = results
        .iter()
        .map(|r| {
            let cells: Vec<CellCounters> = cfg
                .estimators
                .iter()
                .filter_map(|&e| {
                    let s = r.series.iter().find(|s| s.estimator == e)?;
                    Some(CellCounters {
                        estimator: e,
                        target_evaluations: s.target_evaluations,
                        proposal_evaluations: s.proposal_evaluations,
                        log_evidence: s.log_evidence,
                    })
                })
                .collect();
            json!({
                "seed": r.seed,
                "acceptance_rate": r.acceptance_rate,
                "chain_target_evaluations": r.chain_target_evaluations,
                "chain_gradient_evaluations": r.chain_gradient_evaluations,
                "estimators": cells,
            })
        })
        .collect();
    let skipped: Vec<&SkippedCell> = results.iter().flat_map(|r| &r.skipped).collect();
    let extra = json!({
        "error_log_base": 10,
        "window": cfg.window,
        "window_mode": "centred, points only where the window fits",
        "window_averaging": "mean of log10 errors",
        "mixture": cfg.mixture,
        "seeds": per_seed,
        "final_errors": summary,
        "skipped": skipped,
        "cost_model": costs,
        "files": { "raw": RAW_FILE, "curves": CURVES_FILE },
    });
    if let (Some(m), Some(x)) = (meta.as_object_mut(), extra.as_object()) {
        m.extend(x.clone());
    }
    serde_json::to_writer_pretty(BufWriter::new(File::create(&metadata)?), &meta)?;
    Ok(ExperimentOutput {
        raw,
        curves: curves_path,
        metadata,
        setup,
        results,
    })
}

/// Measured costs on the first seed's chain, with the predicted factor.
/// Costs are wall-clock properties, so this is only attempted for the CPU clock.
fn cost_snapshot(
    cfg: &ExperimentConfig,
    setup: &Setup,
    results: &[SeedResult],
) -> serde_json::Value {
    if cfg.clock != ClockMode::ThreadCpu || results.is_empty() {
        return serde_json::Value::Null;
    }
    let trace = match run_chain(
        &setup.target,
        &setup.proposal,
        &chain_config(cfg, setup, results[0].seed),
    ) {
        Ok(t) => t,
        Err(e) => return json!({ "error": e.to_string() }),
    };
    let measured: Result<CostModel> = measure_costs(
        &setup.target,
        &setup.proposal,
        &trace,
        &cfg.test_functions,
        cfg.costs.evaluations,
        cfg.costs.repeats,
    );
    match measured {
        Ok(m) => json!({
            "measured": m,
            "predicted_prolongation": m.prolongation_factor().ok(),
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
            name = "unit"
            output_dir = "{}"
            steps = 10
            repetitions = 2
            seed = 3
            accept_mode = "metropolis-hastings"
            estimators = ["vanilla", "mcis", "s-mcis"]
            test_functions = ["identity", "cube"]
            window = 4
            [target]
            kind = "gaussian"
            dim = 2
            mean = 5.0
            sd = 0.7
            [proposal]
            kind = "random-walk"
            theta = 0.9
            [clock]
            mode = "virtual"
            "#,
            dir.display()
        );
        ExperimentConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn files_have_the_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let out = run_experiment(&cfg).unwrap();
        let raw = fs::read_to_string(&out.raw).unwrap();
        let mut lines = raw.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,step,cpu_ns,estimator,test_function,estimate,abs_error"
        );
        assert_eq!(lines.count(), 2 * 10 * 3 * 2);
        let curves = fs::read_to_string(&out.curves).unwrap();
        assert_eq!(curves.lines().count(), 1 + 3 * 2 * (10 - 4 + 1));
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&out.metadata).unwrap()).unwrap();
        assert_eq!(meta["error_log_base"], 10);
        assert_eq!(meta["seeds"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn unsupported_cells_are_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.estimators = vec![EstimatorKind::Vanilla, EstimatorKind::ExactMcis];
        // Langevin with an accept step has no closed-form marginal proposal.
        cfg.target.family = crate::config::TargetFamily::Gaussian {
            dim: 2,
            mean: crate::config::Numbers::Scalar(0.0),
            sd: crate::config::Numbers::Vector(vec![1.0, 2.0]),
        };
        cfg.proposal.kind = mcis::proposals::ProposalKind::Langevin;
        cfg.accept_mode = mcis::chain::AcceptMode::MetropolisHastings;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.results.iter().all(|r| r.skipped.len() == 1));
        let raw = fs::read_to_string(&out.raw).unwrap();
        assert_eq!(raw.lines().count(), 1 + 2 * 10 * 2);
    }
}
