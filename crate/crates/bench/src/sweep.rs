//! Acceptance-rate sweep: final errors as the proposal scale grows.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use mcis::chain::{run_chain, AcceptMode};
use mcis::estimators::EstimatorKind;
use mcis::TestFunction;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{config_error, Result};
use crate::experiment::{chain_config, run_estimator, seeds, setup_metadata, SkippedCell};
use crate::setup::{build_setup, Setup};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_METADATA_FILE: &str = "sweep_metadata.json";

/// Halvings allowed while searching for a start scale.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RungError {
    pub estimator: EstimatorKind,
    pub test_function: TestFunction,
    /// Mean over chains of the final absolute error.
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub theta: f64,
    /// Mean acceptance rate over the rung's chains.
    pub acceptance_rate: f64,
    pub errors: Vec<RungError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub acceptance_rate: f64,
    pub estimator: EstimatorKind,
    pub test_function: TestFunction,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub csv: PathBuf,
    pub metadata: PathBuf,
    /// Rungs in the order they were run, i.e. increasing theta.
    pub rungs: Vec<Rung>,
    /// Rungs sorted by acceptance rate, errors rolling-averaged.
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedCell>,
}

fn run_rung(cfg: &ExperimentConfig, setup: &Setup, theta: f64) -> Result<(Rung, Vec<SkippedCell>)> {
    let rung_setup = Setup {
        proposal: setup.proposal.with_theta(theta)?,
        ..setup.clone()
    };
    let per_seed: Vec<(f64, Vec<mcis::estimators::EstimateSeries>, Vec<SkippedCell>)> = seeds(cfg)
        .into_par_iter()
        .map(|seed| {
            let trace = run_chain(
                &rung_setup.target,
                &rung_setup.proposal,
                &chain_config(cfg, &rung_setup, seed),
            )?;
            let mut series = Vec::new();
            let mut skipped = Vec::new();
            for &kind in &cfg.estimators {
                match run_estimator(kind, cfg, &rung_setup, &trace) {
                    Ok(s) => series.extend(s),
                    Err(e) => skipped.push(SkippedCell {
                        seed,
                        estimator: kind,
                        reason: e.to_string(),
                    }),
                }
            }
            Ok((trace.acceptance_rate(), series, skipped))
        })
        .collect::<Result<_>>()?;
    let n = per_seed.len() as f64;
    let acceptance_rate = per_seed.iter().map(|(a, _, _)| a).sum::<f64>() / n;
    let mut errors = Vec::new();
    for &e in &cfg.estimators {
        for &f in &cfg.test_functions {
            let errs: Vec<f64> = per_seed
                .iter()
                .flat_map(|(_, s, _)| s)
                .filter(|s| s.estimator == e && s.test_function == f)
                .map(|s| (s.final_estimate() - setup.truth(f)).abs())
                .collect();
            if !errs.is_empty() {
                errors.push(RungError {
                    estimator: e,
                    test_function: f,
                    mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
                });
            }
        }
    }
    let skipped = per_seed.into_iter().flat_map(|(_, _, s)| s).collect();
    Ok((
        Rung {
            theta,
            acceptance_rate,
            errors,
        },
        skipped,
    ))
}

/// Centred rolling mean of width `w`, truncated at both ends.
pub fn rolling_mean(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let before = (w - 1) / 2;
    let after = w - 1 - before;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Sorts rungs by acceptance rate and smooths each error column.
pub fn sweep_rows(rungs: &[Rung], rolling: usize) -> Vec<SweepRow> {
    let mut order: Vec<usize> = (0..rungs.len()).collect();
    order.sort_by(|&a, &b| {
        rungs[a]
            .acceptance_rate
            .total_cmp(&rungs[b].acceptance_rate)
            .then(rungs[a].theta.total_cmp(&rungs[b].theta))
    });
    let mut keys: Vec<(EstimatorKind, TestFunction)> = Vec::new();
    for r in rungs {
        for e in &r.errors {
            if !keys.contains(&(e.estimator, e.test_function)) {
                keys.push((e.estimator, e.test_function));
            }
        }
    }
    let mut smoothed = Vec::with_capacity(keys.len());
    for &(e, f) in &keys {
        // Rungs missing a cell keep their position with no value.
        let col: Vec<Option<f64>> = order
            .iter()
            .map(|&i| {
                rungs[i]
                    .errors
                    .iter()
                    .find(|x| x.estimator == e && x.test_function == f)
                    .map(|x| x.mean_abs_error)
            })
            .collect();
        let present: Vec<f64> = col.iter().flatten().copied().collect();
        let mut rolled = rolling_mean(&present, rolling).into_iter();
        smoothed.push(
            col.iter()
                .map(|v| v.and_then(|_| rolled.next()))
                .collect::<Vec<_>>(),
        );
    }
    let mut rows = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        for (c, &(e, f)) in keys.iter().enumerate() {
            if let Some(v) = smoothed[c][pos] {
                rows.push(SweepRow {
                    theta: rungs[i].theta,
                    acceptance_rate: rungs[i].acceptance_rate,
                    estimator: e,
                    test_function: f,
                    mean_abs_error: v,
                });
            }
        }
    }
    rows
}

/// Finds a scale whose first chain accepts at least `start_rate` of its steps.
fn start_theta(cfg: &ExperimentConfig, setup: &Setup) -> Result<f64> {
    if let Some(t) = cfg.sweep.start_theta {
        return Ok(t);
    }
    let mut theta = setup.proposal.theta().unwrap_or(1.0);
    let seed = cfg.seed;
    for _ in 0..MAX_HALVINGS {
        let proposal = setup.proposal.with_theta(theta)?;
        let trace = run_chain(&setup.target, &proposal, &chain_config(cfg, setup, seed))?;
        if trace.acceptance_rate() >= cfg.sweep.start_rate {
            return Ok(theta);
        }
        theta /= 2.0;
    }
    Err(config_error(format!(
        "no scale reached acceptance rate {} after {MAX_HALVINGS} halvings",
        cfg.sweep.start_rate
    )))
}

pub fn scaling_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    if cfg.accept_mode != AcceptMode::MetropolisHastings {
        return Err(config_error(
            "the sweep needs metropolis-hastings acceptance",
        ));
    }
    let setup = build_setup(cfg)?;
    if setup.proposal.theta().is_none() {
        return Err(config_error(
            "the sweep needs a proposal with a step parameter",
        ));
    }
    let mut theta = start_theta(cfg, &setup)?;
    let mut rungs = Vec::new();
    let mut skipped = Vec::new();
    for _ in 0..cfg.sweep.max_rungs {
        let (rung, s) = run_rung(cfg, &setup, theta)?;
        let done = rung.acceptance_rate < cfg.sweep.min_rate;
        rungs.push(rung);
        skipped.extend(s);
        if done {
            break;
        }
        theta *= cfg.sweep.factor;
    }
    let rows = sweep_rows(&rungs, cfg.sweep.rolling);

    fs::create_dir_all(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&csv_path)?));
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let metadata = cfg.output_dir.join(SWEEP_METADATA_FILE);
    let mut meta = setup_metadata(cfg, &setup);
    let extra = json!({
        "rungs": rungs,
        "rolling": cfg.sweep.rolling,
        "reached_min_rate": rungs.last().is_some_and(|r| r.acceptance_rate < cfg.sweep.min_rate),
        "skipped": skipped,
    });
    if let (Some(m), Some(x)) = (meta.as_object_mut(), extra.as_object()) {
        m.extend(x.clone());
    }
    serde_json::to_writer_pretty(BufWriter::new(File::create(&metadata)?), &meta)?;
    Ok(SweepOutput {
        csv: csv_path,
        metadata,
        rungs,
        rows,
        skipped,
    })
}
