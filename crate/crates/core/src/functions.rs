//! Test functions `f(x) = d^-1 * sum_i phi(x_i)` whose expectations are estimated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    Identity,
    Square,
    Cube,
    Exp,
}

impl TestFunction {
    pub const ALL: [TestFunction; 4] = [
        TestFunction::Identity,
        TestFunction::Square,
        TestFunction::Cube,
        TestFunction::Exp,
    ];

    /// The per-coordinate map `phi`.
    #[inline]
    pub fn phi(self, z: f64) -> f64 {
        match self {
            TestFunction::Identity => z,
            TestFunction::Square => z * z,
            TestFunction::Cube => z * z * z,
            TestFunction::Exp => z.exp(),
        }
    }

    /// Coordinate average of `phi`.
    #[inline]
    pub fn eval(self, x: &[f64]) -> f64 {
        x.iter().map(|&z| self.phi(z)).sum::<f64>() / x.len() as f64
    }

    /// `E[phi(Z)]` for `Z ~ N(mean, sd^2)`.
    pub fn gaussian_moment(self, mean: f64, sd: f64) -> f64 {
        let var = sd * sd;
        match self {
            TestFunction::Identity => mean,
            TestFunction::Square => mean * mean + var,
            TestFunction::Cube => mean * mean * mean + 3.0 * mean * var,
            TestFunction::Exp => (mean + 0.5 * var).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Identity => "identity",
            TestFunction::Square => "square",
            TestFunction::Cube => "cube",
            TestFunction::Exp => "exp",
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(TestFunction::Identity),
            "square" => Ok(TestFunction::Square),
            "cube" => Ok(TestFunction::Cube),
            "exp" => Ok(TestFunction::Exp),
            other => Err(Error::input(format!("unknown test function `{other}`"))),
        }
    }
}
