//! Bayesian penalised-spline additive regression with autoregressive errors.
//!
//! The model is `y = Xβ + ε` where X stacks B-spline, cyclic, tensor-product,
//! thin-plate, factor and Fourier bases, each penalised through its own block
//! of the prior precision, and `ε_i = Σ_j φ_j ε_{i-lag_j} + u_i` with Gaussian
//! innovations. [`sampler`] draws from the joint posterior by blocked Gibbs
//! sampling, [`forecast`] rolls the AR errors forward for predictive
//! distributions, and [`diagnostics`] summarises fits and forecasts.
//!
//! ```no_run
//! use psar::design::{Dataset, ModelSpec};
//! use psar::par::Execution;
//!
//! # fn run(spec: ModelSpec, data: Dataset) -> psar::Result<()> {
//! let fit = psar::sampler::fit(&spec, &data, Execution::Auto)?;
//! let edf = psar::diagnostics::effective_df(&fit.draws, &fit.design().x, fit.ledger(), Execution::Auto)?;
//! println!("total edf {:.2}", edf.total.summary.mean);
//! # Ok(())
//! # }
//! ```

pub mod basis;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod forecast;
pub mod numerics;
pub mod par;
pub mod sampler;

pub use error::{Error, Result};
