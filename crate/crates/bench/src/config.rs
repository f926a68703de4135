//! Experiment configuration, read from a TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcis::chain::AcceptMode;
use mcis::clock::ClockMode;
use mcis::estimators::{EstimatorKind, MixtureForm};
use mcis::proposals::ProposalKind;
use mcis::TestFunction;
use serde::{Deserialize, Serialize};

use crate::error::{config_error, Result};

/// A scalar broadcast to every coordinate, or one value per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Numbers {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Numbers {
    pub fn expand(&self, dim: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Numbers::Scalar(v) => Ok(vec![*v; dim]),
            Numbers::Vector(v) if v.len() == dim => Ok(v.clone()),
            Numbers::Vector(v) => Err(config_error(format!(
                "{what} has {} entries but the dimension is {dim}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Numbers,
    pub sd: Numbers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetFamily {
    Gaussian {
        dim: usize,
        mean: Numbers,
        sd: Numbers,
    },
    MixtureOfGaussians {
        dim: usize,
        components: Vec<ComponentSpec>,
    },
    GpPosterior {
        /// Relative paths resolve against the config file's directory.
        data: PathBuf,
        /// 1-based column indices.
        predictors: Vec<usize>,
        response: usize,
        #[serde(default = "default_max_rows")]
        max_rows: Option<usize>,
        #[serde(default = "default_true")]
        standardize_response: bool,
    },
}

fn default_max_rows() -> Option<usize> {
    Some(200)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub family: TargetFamily,
    /// Adds a constant to `log rho`; the evidence becomes `exp(log_scale)`.
    #[serde(default)]
    pub log_scale: f64,
    /// Every density evaluation is repeated this many times.
    #[serde(default = "default_one_u32")]
    pub cost_repeats: u32,
    /// Initial state; defaults to the target mean (prior mode for the GP).
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

fn default_one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingSpec {
    #[default]
    Identity,
    /// Random-walk covariance from a pilot chain's sample covariance.
    PilotCovariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSpec {
    pub kind: ProposalKind,
    /// Step parameter; the starting point when `tune_to_rate` is set.
    #[serde(default)]
    pub theta: Option<f64>,
    /// Tune theta with Metropolis-Hastings pilots to this acceptance rate.
    #[serde(default)]
    pub tune_to_rate: Option<f64>,
    #[serde(default = "default_pilot_steps")]
    pub pilot_steps: usize,
    #[serde(default)]
    pub scaling: ScalingSpec,
    #[serde(default = "default_covariance_pilot_steps")]
    pub covariance_pilot_steps: usize,
    /// Independent proposal parameters.
    #[serde(default)]
    pub mean: Option<Numbers>,
    #[serde(default)]
    pub sd: Option<Numbers>,
}

fn default_pilot_steps() -> usize {
    2000
}

fn default_covariance_pilot_steps() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    /// Fixed truth values per test function; skip oracles and reference runs.
    #[serde(default)]
    pub values: BTreeMap<TestFunction, f64>,
    #[serde(default = "default_reference_chains")]
    pub reference_chains: usize,
    #[serde(default = "default_reference_steps")]
    pub reference_steps: usize,
    #[serde(default = "default_reference_seed")]
    pub reference_seed: u64,
}

fn default_reference_chains() -> usize {
    3
}

fn default_reference_steps() -> usize {
    100_000
}

fn default_reference_seed() -> u64 {
    1 << 40
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            values: BTreeMap::new(),
            reference_chains: default_reference_chains(),
            reference_steps: default_reference_steps(),
            reference_seed: default_reference_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Geometric growth of theta per rung.
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// First rung; found by halving until `start_rate` is reached if unset.
    #[serde(default)]
    pub start_theta: Option<f64>,
    #[serde(default = "default_start_rate")]
    pub start_rate: f64,
    /// The sweep stops after the first rung below this rate.
    #[serde(default = "default_min_rate")]
    pub min_rate: f64,
    #[serde(default = "default_max_rungs")]
    pub max_rungs: usize,
    /// Width of the rolling mean over rungs sorted by acceptance rate.
    #[serde(default = "default_rolling")]
    pub rolling: usize,
}

fn default_factor() -> f64 {
    1.3
}

fn default_start_rate() -> f64 {
    0.95
}

fn default_min_rate() -> f64 {
    0.02
}

fn default_max_rungs() -> usize {
    80
}

fn default_rolling() -> usize {
    5
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            factor: default_factor(),
            start_theta: None,
            start_rate: default_start_rate(),
            min_rate: default_min_rate(),
            max_rungs: default_max_rungs(),
            rolling: default_rolling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// Target cost inflation levels compared by `bench-costs`.
    #[serde(default = "default_inflation")]
    pub inflation: Vec<u32>,
    #[serde(default = "default_cost_evaluations")]
    pub evaluations: usize,
    #[serde(default = "default_cost_repeats")]
    pub repeats: usize,
}

fn default_inflation() -> Vec<u32> {
    vec![1, 10, 100]
}

fn default_cost_evaluations() -> usize {
    1000
}

fn default_cost_repeats() -> usize {
    5
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            inflation: default_inflation(),
            evaluations: default_cost_evaluations(),
            repeats: default_cost_repeats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub steps: usize,
    #[serde(default = "default_one")]
    pub repetitions: usize,
    /// Repetition `r` uses chain seed `seed + r`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub burn_in: usize,
    pub accept_mode: AcceptMode,
    pub estimators: Vec<EstimatorKind>,
    pub test_functions: Vec<TestFunction>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_mixture")]
    pub mixture: MixtureForm,
    pub target: TargetSpec,
    pub proposal: ProposalSpec,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub truth: TruthSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub costs: CostSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_one() -> usize {
    1
}

fn default_window() -> usize {
    50
}

fn default_mixture() -> MixtureForm {
    MixtureForm::Causal
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let TargetFamily::GpPosterior { data, .. } = &mut self.target.family {
            if data.is_relative() {
                *data = base.join(&*data);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_error("steps must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(config_error("repetitions must be at least 1"));
        }
        if self.window == 0 {
            return Err(config_error("window must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(config_error("at least one estimator is required"));
        }
        if self.test_functions.is_empty() {
            return Err(config_error("at least one test function is required"));
        }
        let p = &self.proposal;
        if p.kind == ProposalKind::Independent {
            if p.mean.is_none() || p.sd.is_none() {
                return Err(config_error("independent proposals need mean and sd"));
            }
        } else if p.theta.is_none() && p.tune_to_rate.is_none() {
            return Err(config_error("proposal needs theta or tune_to_rate"));
        }
        if let Some(r) = p.tune_to_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(config_error("tune_to_rate must lie in (0, 1)"));
            }
        }
        if let ClockMode::Virtual(c) = &self.clock {
            c.validate()?;
        }
        let s = &self.sweep;
        if !(s.factor > 1.0) || s.rolling == 0 || !(s.min_rate >= 0.0 && s.min_rate < 1.0) {
            return Err(config_error(
                "sweep needs factor > 1, rolling >= 1 and min_rate in [0, 1)",
            ));
        }
        if self.costs.inflation.contains(&0)
            || self.costs.evaluations == 0
            || self.costs.repeats == 0
        {
            return Err(config_error(
                "cost inflation levels and counts must be positive",
            ));
        }
        Ok(())
    }
}
