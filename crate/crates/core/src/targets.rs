//! Target densities: unnormalized log-density, gradient and closed-form oracles.
//!
//! The Gaussian and mixture targets are stored fully normalized, so their
//! evidence is exactly `exp(log_scale)` (1 unless a scale is requested).

use std::cell::Cell;
use std::fmt;
use std::hint::black_box;
use std::sync::Arc;

use crate::error::{check_point, Error, Result};
use crate::functions::TestFunction;
use crate::gp::GpPosterior;
use crate::numeric::{log_sum_exp, LN_2PI};

/// Product of independent normals `N(mean_i, sd_i^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    sd: Vec<f64>,
    inv_sd: Vec<f64>,
    log_norm: f64,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::input("gaussian dimension must be at least 1"));
        }
        if mean.len() != sd.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: sd.len(),
            });
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::input(
                "standard deviations must be positive and finite",
            ));
        }
        let log_norm = -sd.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * mean.len() as f64 * LN_2PI;
        let inv_sd = sd.iter().map(|s| 1.0 / s).collect();
        Ok(DiagGaussian {
            mean,
            sd,
            inv_sd,
            log_norm,
        })
    }

    pub fn isotropic(dim: usize, mean: f64, sd: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![sd; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    /// Normalized log-density. No input validation.
    #[inline]
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((&xi, &m), &is) in x.iter().zip(&self.mean).zip(&self.inv_sd) {
            let z = (xi - m) * is;
            q += z * z;
        }
        self.log_norm - 0.5 * q
    }

    pub fn grad_log_pdf_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = -(x[i] - self.mean[i]) * self.inv_sd[i] * self.inv_sd[i];
        }
    }

    /// `mean + sd * z`, coordinate-wise.
    pub fn transform_standard(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..z.len() {
            out[i] = self.mean[i] + self.sd[i] * z[i];
        }
    }
}

/// Finite mixture of diagonal Gaussians, evaluated in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::input(
                "mixture needs one positive weight per component",
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::input("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        Ok(GaussianMixture {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_weights.iter().map(|lw| lw.exp())
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.log_weights
            .iter()
            .zip(&self.components)
            .map(|(lw, c)| lw + c.log_pdf(x))
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    /// Responsibility-weighted sum of the component gradients.
    pub fn grad_log_pdf_into(&self, x: &[f64], out: &mut [f64]) {
        let terms = self.component_log_terms(x);
        let total = log_sum_exp(&terms);
        out.iter_mut().for_each(|g| *g = 0.0);
        let mut scratch = vec![0.0; x.len()];
        for (t, c) in terms.iter().zip(&self.components) {
            let r = (t - total).exp();
            c.grad_log_pdf_into(x, &mut scratch);
            for (g, s) in out.iter_mut().zip(&scratch) {
                *g += r * s;
            }
        }
    }
}

/// User-supplied log-density; gradients come from central differences.
#[derive(Clone)]
pub struct CustomDensity {
    name: String,
    log_density: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDensity")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum TargetKind {
    Gaussian(DiagGaussian),
    Mixture(GaussianMixture),
    GpPosterior(Arc<GpPosterior>),
    Custom(CustomDensity),
}

/// An unnormalized target `rho`. Immutable after construction; every method
/// takes `&self` and is safe to call concurrently.
#[derive(Debug, Clone)]
pub struct TargetDensity {
    kind: TargetKind,
    dim: usize,
    log_scale: f64,
    cost_repeats: u32,
}

/// Step used for every central-difference gradient.
pub const FD_STEP: f64 = 1e-5;

impl TargetDensity {
    fn from_kind(kind: TargetKind, dim: usize) -> Self {
        TargetDensity {
            kind,
            dim,
            log_scale: 0.0,
            cost_repeats: 1,
        }
    }

    pub fn gaussian(density: DiagGaussian) -> Self {
        let dim = density.dim();
        Self::from_kind(TargetKind::Gaussian(density), dim)
    }

    pub fn isotropic_gaussian(dim: usize, mean: f64, sd: f64) -> Result<Self> {
        Ok(Self::gaussian(DiagGaussian::isotropic(dim, mean, sd)?))
    }

    pub fn mixture(mixture: GaussianMixture) -> Self {
        let dim = mixture.dim();
        Self::from_kind(TargetKind::Mixture(mixture), dim)
    }

    pub fn gp_posterior(posterior: GpPosterior) -> Self {
        let dim = posterior.num_params();
        Self::from_kind(TargetKind::GpPosterior(Arc::new(posterior)), dim)
    }

    pub fn custom<F>(dim: usize, name: impl Into<String>, log_density: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::input("target dimension must be at least 1"));
        }
        Ok(Self::from_kind(
            TargetKind::Custom(CustomDensity {
                name: name.into(),
                log_density: Arc::new(log_density),
            }),
            dim,
        ))
    }

    /// Multiplies `rho` by `exp(log_scale)`; the evidence scales accordingly.
    pub fn with_log_scale(mut self, log_scale: f64) -> Self {
        self.log_scale = log_scale;
        self
    }

    /// Repeats every log-density and gradient evaluation `repeats` times,
    /// inflating its cost without changing its value.
    pub fn with_cost_repeats(mut self, repeats: u32) -> Self {
        self.cost_repeats = repeats.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            TargetKind::Gaussian(_) => "gaussian",
            TargetKind::Mixture(_) => "mixture-of-gaussians",
            TargetKind::GpPosterior(_) => "gp-posterior",
            TargetKind::Custom(_) => "custom",
        }
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn cost_repeats(&self) -> u32 {
        self.cost_repeats
    }

    /// `log Z` when the stored density is a known multiple of a normalized one.
    pub fn known_log_normalizer(&self) -> Option<f64> {
        match self.kind {
            TargetKind::Gaussian(_) | TargetKind::Mixture(_) => Some(self.log_scale),
            _ => None,
        }
    }

    pub fn gradient_is_analytic(&self) -> bool {
        !matches!(self.kind, TargetKind::Custom(_))
    }

    fn raw_log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(match &self.kind {
            TargetKind::Gaussian(g) => g.log_pdf(x),
            TargetKind::Mixture(m) => m.log_pdf(x),
            TargetKind::GpPosterior(gp) => gp.log_posterior_slice(x)?,
            TargetKind::Custom(c) => (c.log_density)(x),
        })
    }

    /// `log rho(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_point(x, self.dim)?;
        for _ in 1..self.cost_repeats {
            black_box(self.raw_log_density(black_box(x))?);
        }
        Ok(self.raw_log_density(x)? + self.log_scale)
    }

    fn raw_grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        match &self.kind {
            TargetKind::Gaussian(g) => g.grad_log_pdf_into(x, &mut out),
            TargetKind::Mixture(m) => m.grad_log_pdf_into(x, &mut out),
            TargetKind::GpPosterior(gp) => {
                out = gp.grad_log_posterior_slice(x)?;
            }
            TargetKind::Custom(c) => {
                out = central_difference(|p| Ok((c.log_density)(p)), x, FD_STEP)?;
            }
        }
        Ok(out)
    }

    /// `grad log rho(x)`; analytic for all built-in kinds.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(x, self.dim)?;
        for _ in 1..self.cost_repeats {
            black_box(self.raw_grad_log_density(black_box(x))?);
        }
        self.raw_grad_log_density(x)
    }

    /// `E_mu[f]` in closed form for Gaussian and mixture targets.
    pub fn analytic_moment(&self, f: TestFunction) -> Result<f64> {
        let component_moment = |g: &DiagGaussian| {
            g.mean()
                .iter()
                .zip(g.sd())
                .map(|(&m, &s)| f.gaussian_moment(m, s))
                .sum::<f64>()
                / g.dim() as f64
        };
        match &self.kind {
            TargetKind::Gaussian(g) => Ok(component_moment(g)),
            TargetKind::Mixture(m) => Ok(m
                .weights()
                .zip(m.components())
                .map(|(w, c)| w * component_moment(c))
                .sum()),
            _ => Err(Error::UnsupportedOracle(format!(
                "no closed-form moments for a {} target",
                self.kind_name()
            ))),
        }
    }
}

/// Central finite-difference gradient with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Counts `log_density` calls made through it. Not `Sync`; one per chain.
pub struct CountingTarget<'a> {
    target: &'a TargetDensity,
    count: Cell<u64>,
}

impl<'a> CountingTarget<'a> {
    pub fn new(target: &'a TargetDensity) -> Self {
        CountingTarget {
            target,
            count: Cell::new(0),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.count.set(self.count.get() + 1);
        self.target.log_density(x)
    }

    pub fn count(&self) -> u64 {
        self.count.get()
    }

    pub fn target(&self) -> &'a TargetDensity {
        self.target
    }
}
