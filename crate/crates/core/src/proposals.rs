//! Conditional Gaussian proposal families `q(.|x)`.
//!
//! Every family here is Gaussian with a state-dependent centre and a fixed
//! covariance, so a single [`GaussianKernel`] describes `log q(y|x)` once the
//! centre of `x` is known. `propose` consumes exactly `dim` standard normals
//! from the caller's stream per call.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_point, Error, Result};
use crate::numeric::LN_2PI;
use crate::targets::{DiagGaussian, TargetDensity};

/// Deterministic random stream owned by one chain.
pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    RandomWalk,
    Langevin,
    Independent,
}

/// Lower Cholesky factor of a random-walk scaling matrix `S`.
#[derive(Debug, Clone, PartialEq)]
struct Scaling {
    lower: DMatrix<f64>,
    lower_inv: DMatrix<f64>,
    half_log_det: f64,
}

#[derive(Debug, Clone)]
enum Family {
    /// `N(x, theta^2 S)`.
    RandomWalk {
        theta: f64,
        scaling: Option<Scaling>,
    },
    /// `N(x + theta grad log rho(x), 2 theta I)`.
    Langevin {
        theta: f64,
        target: Arc<TargetDensity>,
    },
    /// Fixed diagonal Gaussian, independent of the current state.
    Independent { density: DiagGaussian },
}

#[derive(Debug, Clone)]
pub struct ProposalFamily {
    family: Family,
    dim: usize,
}

/// Whitening map `W` with `log q(y|x) = log_norm - |W y - W c(x)|^2 / 2`.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    pub log_norm: f64,
    transform: Transform,
}

#[derive(Debug, Clone)]
enum Transform {
    Scale(f64),
    Diagonal(Vec<f64>),
    Lower(DMatrix<f64>),
}

impl GaussianKernel {
    pub fn whiten(&self, v: &[f64], out: &mut [f64]) {
        match &self.transform {
            Transform::Scale(s) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = x * s;
                }
            }
            Transform::Diagonal(inv) => {
                for ((o, x), s) in out.iter_mut().zip(v).zip(inv) {
                    *o = x * s;
                }
            }
            Transform::Lower(m) => {
                let d = v.len();
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += m[(i, j)] * v[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// Whitens every row of a row-major `rows x dim` matrix.
    pub fn whiten_rows(&self, rows: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows.len()];
        for (src, dst) in rows.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            self.whiten(src, dst);
        }
        out
    }

    /// `log q` from two already-whitened points.
    #[inline]
    pub fn log_pdf_whitened(&self, a: &[f64], b: &[f64]) -> f64 {
        self.log_norm - 0.5 * sq_dist(a, b)
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn positive_step(theta: f64) -> Result<f64> {
    if theta > 0.0 && theta.is_finite() {
        Ok(theta)
    } else {
        Err(Error::input(format!(
            "step parameter must be positive, got {theta}"
        )))
    }
}

impl ProposalFamily {
    pub fn random_walk(dim: usize, theta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("proposal dimension must be at least 1"));
        }
        Ok(ProposalFamily {
            family: Family::RandomWalk {
                theta: positive_step(theta)?,
                scaling: None,
            },
            dim,
        })
    }

    /// Random walk with covariance `theta^2 * scaling`; `scaling` must be
    /// symmetric positive definite.
    pub fn random_walk_scaled(theta: f64, scaling: DMatrix<f64>) -> Result<Self> {
        let dim = scaling.nrows();
        if dim == 0 || scaling.ncols() != dim {
            return Err(Error::input("scaling matrix must be square and non-empty"));
        }
        if (&scaling - scaling.transpose()).amax() > 1e-12 * scaling.amax().max(1.0) {
            return Err(Error::input("scaling matrix must be symmetric"));
        }
        let chol = scaling
            .cholesky()
            .ok_or_else(|| Error::input("scaling matrix is not positive definite"))?;
        let lower = chol.l();
        let lower_inv = lower
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::input("singular scaling factor"))?;
        let half_log_det = lower.diagonal().iter().map(|d| d.ln()).sum();
        Ok(ProposalFamily {
            family: Family::RandomWalk {
                theta: positive_step(theta)?,
                scaling: Some(Scaling {
                    lower,
                    lower_inv,
                    half_log_det,
                }),
            },
            dim,
        })
    }

    pub fn langevin(target: Arc<TargetDensity>, theta: f64) -> Result<Self> {
        let dim = target.dim();
        Ok(ProposalFamily {
            family: Family::Langevin {
                theta: positive_step(theta)?,
                target,
            },
            dim,
        })
    }

    pub fn independent(density: DiagGaussian) -> Self {
        let dim = density.dim();
        ProposalFamily {
            family: Family::Independent { density },
            dim,
        }
    }

    pub fn kind(&self) -> ProposalKind {
        match self.family {
            Family::RandomWalk { .. } => ProposalKind::RandomWalk,
            Family::Langevin { .. } => ProposalKind::Langevin,
            Family::Independent { .. } => ProposalKind::Independent,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Step parameter; `None` for the independent kind.
    pub fn theta(&self) -> Option<f64> {
        match self.family {
            Family::RandomWalk { theta, .. } | Family::Langevin { theta, .. } => Some(theta),
            Family::Independent { .. } => None,
        }
    }

    /// Same family with a new step parameter.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        let theta = positive_step(theta)?;
        let mut out = self.clone();
        match &mut out.family {
            Family::RandomWalk { theta: t, .. } | Family::Langevin { theta: t, .. } => *t = theta,
            Family::Independent { .. } => {
                return Err(Error::input("independent proposals have no step parameter"))
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self.family, Family::RandomWalk { .. })
    }

    pub fn is_state_independent(&self) -> bool {
        matches!(self.family, Family::Independent { .. })
    }

    /// True for an isotropic random walk (no scaling matrix).
    pub fn is_isotropic_random_walk(&self) -> bool {
        matches!(self.family, Family::RandomWalk { scaling: None, .. })
    }

    pub fn independent_density(&self) -> Option<&DiagGaussian> {
        match &self.family {
            Family::Independent { density } => Some(density),
            _ => None,
        }
    }

    /// Mean of `q(.|x)`.
    pub fn center(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(x, self.dim)?;
        Ok(match &self.family {
            Family::RandomWalk { .. } => x.to_vec(),
            Family::Langevin { theta, target } => {
                let g = target.grad_log_density(x)?;
                x.iter().zip(&g).map(|(xi, gi)| xi + theta * gi).collect()
            }
            Family::Independent { density } => density.mean().to_vec(),
        })
    }

    /// Covariance of `q(.|x)` (the same for every `x`).
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        match &self.family {
            Family::RandomWalk { theta, scaling } => {
                let s = match scaling {
                    Some(sc) => &sc.lower * sc.lower.transpose(),
                    None => DMatrix::identity(d, d),
                };
                s * (theta * theta)
            }
            Family::Langevin { theta, .. } => DMatrix::identity(d, d) * (2.0 * theta),
            Family::Independent { density } => DMatrix::from_diagonal(
                &nalgebra::DVector::from_iterator(d, density.sd().iter().map(|s| s * s)),
            ),
        }
    }

    pub fn kernel(&self) -> GaussianKernel {
        let d = self.dim as f64;
        match &self.family {
            Family::RandomWalk {
                theta,
                scaling: None,
            } => GaussianKernel {
                log_norm: -0.5 * d * LN_2PI - d * theta.ln(),
                transform: Transform::Scale(1.0 / theta),
            },
            Family::RandomWalk {
                theta,
                scaling: Some(sc),
            } => GaussianKernel {
                log_norm: -0.5 * d * LN_2PI - d * theta.ln() - sc.half_log_det,
                transform: Transform::Lower(&sc.lower_inv / *theta),
            },
            Family::Langevin { theta, .. } => GaussianKernel {
                log_norm: -0.5 * d * (LN_2PI + (2.0 * theta).ln()),
                transform: Transform::Scale(1.0 / (2.0 * theta).sqrt()),
            },
            Family::Independent { density } => GaussianKernel {
                log_norm: density.log_pdf(density.mean()),
                transform: Transform::Diagonal(density.sd().iter().map(|s| 1.0 / s).collect()),
            },
        }
    }

    /// `log q(y|x)`.
    pub fn log_pdf(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        check_point(y, self.dim)?;
        check_point(x, self.dim)?;
        if let Family::Independent { density } = &self.family {
            return Ok(density.log_pdf(y));
        }
        let center = self.center(x)?;
        Ok(self.log_pdf_from_center(y, &center))
    }

    /// `log q(y|x)` given the precomputed centre of `x`. No validation.
    pub fn log_pdf_from_center(&self, y: &[f64], center: &[f64]) -> f64 {
        if let Family::Independent { density } = &self.family {
            return density.log_pdf(y);
        }
        let kernel = self.kernel();
        let diff: Vec<f64> = y.iter().zip(center).map(|(a, b)| a - b).collect();
        let mut w = vec![0.0; self.dim];
        kernel.whiten(&diff, &mut w);
        kernel.log_norm - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Maps standard normals `z` to a draw from `q(.|x)` with centre `center`.
    pub fn draw_from_normals(&self, center: &[f64], z: &[f64]) -> Vec<f64> {
        match &self.family {
            Family::RandomWalk { theta, scaling } => match scaling {
                None => center.iter().zip(z).map(|(c, zi)| c + theta * zi).collect(),
                Some(sc) => {
                    let mut y = center.to_vec();
                    for i in 0..self.dim {
                        let mut acc = 0.0;
                        for j in 0..=i {
                            acc += sc.lower[(i, j)] * z[j];
                        }
                        y[i] += theta * acc;
                    }
                    y
                }
            },
            Family::Langevin { theta, .. } => {
                let s = (2.0 * theta).sqrt();
                center.iter().zip(z).map(|(c, zi)| c + s * zi).collect()
            }
            Family::Independent { density } => {
                let mut y = vec![0.0; self.dim];
                density.transform_standard(z, &mut y);
                y
            }
        }
    }

    /// Draws `Y ~ q(.|x)` using exactly `dim` standard normals from `rng`.
    pub fn propose(&self, x: &[f64], rng: &mut Stream) -> Result<Vec<f64>> {
        let center = self.center(x)?;
        Ok(self.propose_from_center(&center, rng))
    }

    pub fn propose_from_center(&self, center: &[f64], rng: &mut Stream) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.draw_from_normals(center, &z)
    }
}
