//! Turns a config into a ready-to-run target, proposal, start point and truth.

use std::collections::BTreeMap;
use std::sync::Arc;

use mcis::chain::{run_chain, tune_scale, AcceptMode, ChainConfig, TuneOptions, Tuned};
use mcis::clock::ClockMode;
use mcis::estimators::vanilla;
use mcis::gp::{load_dataset, DatasetSpec, GpPosterior, RegressionDataset};
use mcis::proposals::{ProposalFamily, ProposalKind};
use mcis::targets::{DiagGaussian, GaussianMixture, TargetDensity, TargetKind};
use mcis::TestFunction;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ScalingSpec, TargetFamily};
use crate::error::{config_error, Result};

/// Offsets keeping pilot and reference streams apart from the chain seeds.
const PILOT_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
const COVARIANCE_SEED: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum TruthSource {
    Config,
    Analytic,
    /// Pooled vanilla mean over long random-walk runs.
    Reference {
        chains: usize,
        steps: usize,
        seed: u64,
        acceptance_rates: Vec<f64>,
    },
}

/// Record of how the proposal was prepared, for the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalReport {
    pub kind: ProposalKind,
    pub theta: Option<f64>,
    /// `(theta, pilot acceptance rate)` pairs tried while tuning.
    pub tuning: Vec<(f64, f64)>,
    pub tuned_rate: Option<f64>,
    /// Row-major pilot covariance used as the random-walk shape.
    pub scaling: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Setup {
    pub target: Arc<TargetDensity>,
    pub proposal: ProposalFamily,
    pub x0: Vec<f64>,
    /// Truth per configured test function.
    pub truth: BTreeMap<TestFunction, f64>,
    pub truth_source: TruthSource,
    pub proposal_report: ProposalReport,
    pub dataset: Option<RegressionDataset>,
}

impl Setup {
    pub fn truth(&self, f: TestFunction) -> f64 {
        self.truth[&f]
    }
}

pub fn build_target(cfg: &ExperimentConfig) -> Result<(TargetDensity, Option<RegressionDataset>)> {
    let spec = &cfg.target;
    let (base, data) = match &spec.family {
        TargetFamily::Gaussian { dim, mean, sd } => {
            let g = DiagGaussian::new(
                mean.expand(*dim, "target mean")?,
                sd.expand(*dim, "target sd")?,
            )?;
            (TargetDensity::gaussian(g), None)
        }
        TargetFamily::MixtureOfGaussians { dim, components } => {
            if components.is_empty() {
                return Err(config_error(
                    "a mixture target needs at least one component",
                ));
            }
            let mut weights = Vec::with_capacity(components.len());
            let mut comps = Vec::with_capacity(components.len());
            for c in components {
                weights.push(c.weight);
                comps.push(DiagGaussian::new(
                    c.mean.expand(*dim, "component mean")?,
                    c.sd.expand(*dim, "component sd")?,
                )?);
            }
            (
                TargetDensity::mixture(GaussianMixture::new(weights, comps)?),
                None,
            )
        }
        TargetFamily::GpPosterior {
            data,
            predictors,
            response,
            max_rows,
            standardize_response,
        } => {
            let ds = load_dataset(
                data,
                &DatasetSpec {
                    predictors: predictors.clone(),
                    response: *response,
                    max_rows: *max_rows,
                    standardize_response: *standardize_response,
                },
            )?;
            let target = TargetDensity::gp_posterior(GpPosterior::new(ds.clone()));
            (target, Some(ds))
        }
    };
    let target = base
        .with_log_scale(spec.log_scale)
        .with_cost_repeats(spec.cost_repeats);
    Ok((target, data))
}

/// The target mean where known; otherwise zero, the GP prior mode.
fn default_x0(target: &TargetDensity) -> Vec<f64> {
    match target.kind() {
        TargetKind::Gaussian(g) => g.mean().to_vec(),
        TargetKind::Mixture(m) => {
            let mut x = vec![0.0; target.dim()];
            for (w, c) in m.weights().zip(m.components()) {
                for (xi, mi) in x.iter_mut().zip(c.mean()) {
                    *xi += w * mi;
                }
            }
            x
        }
        _ => vec![0.0; target.dim()],
    }
}

fn tune(
    target: &TargetDensity,
    proposal: &ProposalFamily,
    x0: &[f64],
    rate: f64,
    seed: u64,
    pilot_steps: usize,
) -> Result<Tuned> {
    let options = TuneOptions {
        pilot_steps,
        ..TuneOptions::default()
    };
    Ok(tune_scale(target, proposal, x0, rate, seed, options)?)
}

/// Sample covariance of the second half of a tuned isotropic pilot chain,
/// and the pilot's final state.
fn pilot_covariance(
    target: &TargetDensity,
    x0: &[f64],
    theta: f64,
    rate: f64,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(DMatrix<f64>, Vec<f64>, Tuned)> {
    let d = target.dim();
    let iso = ProposalFamily::random_walk(d, theta)?;
    let tuned = tune(target, &iso, x0, rate, seed, cfg.proposal.pilot_steps)?;
    let steps = cfg.proposal.covariance_pilot_steps;
    if steps < 4 * d {
        return Err(config_error(
            "covariance_pilot_steps is too small for the dimension",
        ));
    }
    let chain_cfg = ChainConfig::new(
        steps,
        seed ^ COVARIANCE_SEED,
        x0.to_vec(),
        AcceptMode::MetropolisHastings,
    );
    let trace = run_chain(target, &iso.with_theta(tuned.theta)?, &chain_cfg)?;
    let half = steps / 2;
    let n = (steps - half) as f64;
    let mut mean = vec![0.0; d];
    for k in half..steps {
        for (m, v) in mean.iter_mut().zip(trace.state(k)) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for k in half..steps {
        let x = trace.state(k);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    // A tiny ridge keeps a short or sticky pilot positive definite.
    let ridge = 1e-9 * (cov.trace() / d as f64).max(1e-300);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let last = trace.state(steps - 1).to_vec();
    Ok((cov, last, tuned))
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let (target, dataset) = build_target(cfg)?;
    let target = Arc::new(target);
    let d = target.dim();
    let mut x0 = match &cfg.target.x0 {
        Some(x) if x.len() != d => {
            return Err(config_error(format!(
                "x0 has {} entries, target dimension is {d}",
                x.len()
            )))
        }
        Some(x) => x.clone(),
        None => default_x0(&target),
    };
    let p = &cfg.proposal;
    let pilot_seed = cfg.seed ^ PILOT_SEED;
    let start_theta = p.theta.unwrap_or(1.0);
    let mut report = ProposalReport {
        kind: p.kind,
        theta: None,
        tuning: Vec::new(),
        tuned_rate: None,
        scaling: None,
    };
    let proposal = match p.kind {
        ProposalKind::Independent => {
            let (mean, sd) = match (&p.mean, &p.sd) {
                (Some(m), Some(s)) => (m.expand(d, "proposal mean")?, s.expand(d, "proposal sd")?),
                _ => return Err(config_error("independent proposals need mean and sd")),
            };
            ProposalFamily::independent(DiagGaussian::new(mean, sd)?)
        }
        ProposalKind::Langevin => ProposalFamily::langevin(Arc::clone(&target), start_theta)?,
        ProposalKind::RandomWalk => match p.scaling {
            ScalingSpec::Identity => ProposalFamily::random_walk(d, start_theta)?,
            ScalingSpec::PilotCovariance => {
                let rate = p
                    .tune_to_rate
                    .ok_or_else(|| config_error("pilot-covariance scaling needs tune_to_rate"))?;
                let (cov, last, pilot) =
                    pilot_covariance(&target, &x0, start_theta, rate, pilot_seed, cfg)?;
                report.tuning.extend(pilot.trace);
                report.scaling = Some(cov.transpose().as_slice().to_vec());
                if cfg.target.x0.is_none() {
                    x0 = last;
                }
                // The shaped walk is tuned from scratch below, starting at the
                // scale that is optimal for a Gaussian with this covariance.
                ProposalFamily::random_walk_scaled(2.38 / (d as f64).sqrt(), cov)?
            }
        },
    };
    let proposal = match p.tune_to_rate {
        Some(rate) if p.kind != ProposalKind::Independent => {
            let tuned = tune(&target, &proposal, &x0, rate, pilot_seed, p.pilot_steps)?;
            report.tuning.extend(tuned.trace.iter().copied());
            report.tuned_rate = Some(tuned.rate);
            proposal.with_theta(tuned.theta)?
        }
        _ => proposal,
    };
    report.theta = proposal.theta();

    let (truth, truth_source) = build_truth(cfg, &target, &proposal, &x0)?;
    Ok(Setup {
        target,
        proposal,
        x0,
        truth,
        truth_source,
        proposal_report: report,
        dataset,
    })
}

fn build_truth(
    cfg: &ExperimentConfig,
    target: &TargetDensity,
    proposal: &ProposalFamily,
    x0: &[f64],
) -> Result<(BTreeMap<TestFunction, f64>, TruthSource)> {
    let fs = &cfg.test_functions;
    if fs.iter().all(|f| cfg.truth.values.contains_key(f)) {
        let truth = fs.iter().map(|f| (*f, cfg.truth.values[f])).collect();
        return Ok((truth, TruthSource::Config));
    }
    if let Ok(truth) = fs
        .iter()
        .map(|&f| target.analytic_moment(f).map(|v| (f, v)))
        .collect::<mcis::Result<BTreeMap<_, _>>>()
    {
        return Ok((truth, TruthSource::Analytic));
    }
    let t = &cfg.truth;
    if t.reference_chains == 0 || t.reference_steps == 0 {
        return Err(config_error(
            "no closed-form truth and no reference runs configured",
        ));
    }
    // Reference runs use Metropolis-Hastings so that they are unbiased even
    // when the experiment itself runs an unadjusted chain.
    let runs: Vec<_> = (0..t.reference_chains)
        .into_par_iter()
        .map(|c| {
            let chain_cfg = ChainConfig::new(
                t.reference_steps,
                t.reference_seed.wrapping_add(c as u64),
                x0.to_vec(),
                AcceptMode::MetropolisHastings,
            )
            .with_burn_in(t.reference_steps / 10)
            .with_clock(ClockMode::Virtual(Default::default()));
            let trace = run_chain(target, proposal, &chain_cfg)?;
            let series = vanilla(&trace, fs, ClockMode::Virtual(Default::default()))?;
            Ok((trace.acceptance_rate(), series))
        })
        .collect::<Result<_>>()?;
    let mut truth = BTreeMap::new();
    for (j, &f) in fs.iter().enumerate() {
        let mean = runs.iter().map(|(_, s)| s[j].final_estimate()).sum::<f64>() / runs.len() as f64;
        truth.insert(f, cfg.truth.values.get(&f).copied().unwrap_or(mean));
    }
    let source = TruthSource::Reference {
        chains: t.reference_chains,
        steps: t.reference_steps,
        seed: t.reference_seed,
        acceptance_rates: runs.iter().map(|(r, _)| *r).collect(),
    };
    Ok((truth, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn config(extra_target: &str, proposal: &str) -> ExperimentConfig {
        let text = format!(
            r#"
            name = "t"
            steps = 10
            accept_mode = "metropolis-hastings"
            estimators = ["vanilla"]
            test_functions = ["identity", "cube"]
            [target]
            {extra_target}
            [proposal]
            {proposal}
            "#
        );
        ExperimentConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn gaussian_setup_has_analytic_truth() {
        let cfg = config(
            "kind = \"gaussian\"\ndim = 2\nmean = 5.0\nsd = 0.7",
            "kind = \"random-walk\"\ntheta = 0.5",
        );
        let s = build_setup(&cfg).unwrap();
        assert_eq!(s.truth_source, TruthSource::Analytic);
        assert_eq!(s.x0, vec![5.0, 5.0]);
        assert!((s.truth(TestFunction::Cube) - (125.0 + 3.0 * 5.0 * 0.49)).abs() < 1e-9);
        assert_eq!(s.proposal.theta(), Some(0.5));
    }

    #[test]
    fn mixture_start_is_the_mixture_mean() {
        let cfg = config(
            r#"kind = "mixture-of-gaussians"
            dim = 3
            components = [
                { weight = 0.5, mean = 3.0, sd = 0.7 },
                { weight = 0.5, mean = 7.0, sd = 1.5 },
            ]"#,
            "kind = \"random-walk\"\ntheta = 0.9",
        );
        let s = build_setup(&cfg).unwrap();
        assert_eq!(s.x0, vec![5.0; 3]);
        assert!((s.truth(TestFunction::Cube) - 210.83).abs() < 1e-9);
    }

    #[test]
    fn tuning_hits_the_requested_rate() {
        let cfg = config(
            "kind = \"gaussian\"\ndim = 3\nmean = 0.0\nsd = 1.0",
            "kind = \"random-walk\"\ntune_to_rate = 0.3",
        );
        let s = build_setup(&cfg).unwrap();
        let rate = s.proposal_report.tuned_rate.unwrap();
        assert!((rate - 0.3).abs() <= 0.05, "{rate}");
        assert!(!s.proposal_report.tuning.is_empty());
    }

    #[test]
    fn configured_truth_wins() {
        let mut cfg = config(
            "kind = \"gaussian\"\ndim = 1\nmean = 0.0\nsd = 1.0",
            "kind = \"random-walk\"\ntheta = 1.0",
        );
        cfg.truth.values.insert(TestFunction::Identity, 3.0);
        cfg.truth.values.insert(TestFunction::Cube, 4.0);
        let s = build_setup(&cfg).unwrap();
        assert_eq!(s.truth_source, TruthSource::Config);
        assert_eq!(s.truth(TestFunction::Identity), 3.0);
    }

    #[test]
    fn wrong_x0_length_is_rejected() {
        let cfg = config(
            "kind = \"gaussian\"\ndim = 2\nmean = 0.0\nsd = 1.0\nx0 = [1.0]",
            "kind = \"random-walk\"\ntheta = 1.0",
        );
        assert!(build_setup(&cfg).is_err());
    }
}
