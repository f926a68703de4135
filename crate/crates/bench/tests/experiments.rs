//! End-to-end runs of the shipped configs at reduced or full scale.

use std::path::{Path, PathBuf};

use mcis::estimators::EstimatorKind;
use mcis::TestFunction;
use mcis_bench::experiment::{mean_curves, run_experiment};
use mcis_bench::sweep::scaling_sweep;
use mcis_bench::ExperimentConfig;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn ula_weighting_beats_the_biased_chain_average() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(configs_dir().join("ula_gaussian.toml")).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.clock = mcis::clock::ClockMode::Virtual(Default::default());
    let out = run_experiment(&cfg).unwrap();
    let curves = mean_curves(&cfg, &out.results, &out.setup).unwrap();
    let last = |e: EstimatorKind| {
        curves
            .iter()
            .find(|(k, f, _)| *k == e && *f == TestFunction::Cube)
            .and_then(|(_, _, c)| c.last())
            .unwrap()
            .mean_log10_abs_error
    };
    let (mcis, van) = (last(EstimatorKind::Mcis), last(EstimatorKind::Vanilla));
    assert!(mcis < van - 0.5, "mcis {mcis} vanilla {van}");
    assert!(
        last(EstimatorKind::ExactMcis) < van,
        "exact-mcis should beat vanilla"
    );
}

#[test]
fn sweep_covers_the_rate_range_monotonically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(configs_dir().join("gaussian_sweep.toml")).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.steps = 1000;
    cfg.repetitions = 4;
    cfg.clock = mcis::clock::ClockMode::Virtual(Default::default());
    let out = scaling_sweep(&cfg).unwrap();
    let thetas: Vec<f64> = out.rungs.iter().map(|r| r.theta).collect();
    let rates: Vec<f64> = out.rungs.iter().map(|r| r.acceptance_rate).collect();
    assert!(spearman(&thetas, &rates) < -0.9);
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo < 0.05 && hi > 0.95, "rates span [{lo}, {hi}]");
    assert!(out
        .rows
        .windows(2)
        .all(|w| w[0].acceptance_rate <= w[1].acceptance_rate));
    let rows = std::fs::read_to_string(&out.csv).unwrap().lines().count() - 1;
    assert_eq!(rows, out.rows.len());
    assert_eq!(rows, 2 * out.rungs.len());
}
