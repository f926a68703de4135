//! Markov chain importance sampling.
//!
//! A Markov chain acceptance-rejection sampler produces pairs `(X_k, Y_k)` of
//! states and proposals. Besides the usual chain average over `X_k`, every
//! proposal `Y_k` is reused through self-normalized importance weights
//! `rho(Y_k) / rho_A(Y_k)`, where `rho_A` is the marginal density of the
//! proposals, either known in closed form or estimated by the mixture
//! `(1/K) sum_j q(. | X_j)`. The cached `log rho(Y_k)` values make the
//! reweighting free of additional target evaluations.

pub mod chain;
pub mod clock;
pub mod error;
pub mod estimators;

pub mod functions;
pub mod gp;
pub mod mixture;

pub mod numeric;
pub mod proposals;
pub mod targets;

pub use chain::{run_chain, tune_scale, AcceptMode, ChainConfig, ChainTrace};
pub use error::{Error, Result};
pub use functions::TestFunction;
pub use proposals::{ProposalFamily, ProposalKind};
pub use targets::TargetDensity;
