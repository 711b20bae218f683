//! Synthetic hourly data with a smooth 2D surface, a daily cycle and AR(1)
//! errors.
//!
//! `μ_i = sin(πx_i)(1 − x_i y_i²) + sin(2πt_i/24)/2` with `x, y ~ U(0, 1)` and
//! `t` cycling 1..24. Errors follow `ε_i = −0.4 ε_{i−1} + u_i` with
//! `u_i ~ N(0, 0.1)`, where 0.1 is the variance. The first error is drawn from
//! the stationary distribution.

use std::f64::consts::PI;

use psar::design::{Dataset, LagSet, ModelSpec, TermSpec};
use psar::numerics::{standard_normal, RngStream};
use psar::{Error, Result};
use rand::Rng;

pub const AR_COEFFICIENT: f64 = -0.4;
pub const INNOVATION_VARIANCE: f64 = 0.1;
pub const CYCLE: usize = 24;

/// Dataset plus the true components that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    /// Covariates `x`, `y` and `t`; response is `μ + ε`.
    pub data: Dataset,
    pub mu: Vec<f64>,
    pub surface: Vec<f64>,
    pub daily: Vec<f64>,
    pub eps: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn true_surface(x: f64, y: f64) -> f64 {
    (PI * x).sin() * (1.0 - x * y * y)
}

pub fn true_daily(t: f64) -> f64 {
    (2.0 * PI * t / CYCLE as f64).sin() / 2.0
}

/// Intercept, 6×6 tensor spline on `(x, y)`, 6-column cyclic spline on `t`
/// and one AR lag: 43 coefficients.
pub fn simulation_spec() -> ModelSpec {
    ModelSpec {
        terms: vec![
            TermSpec::Intercept { name: "intercept".into() },
            TermSpec::Tensor {
                name: "surface".into(),
                covariates: ["x".into(), "y".into()],
                basis_size: [6, 6],
                order: [2, 2],
                penalty_order: [2, 2],
                period: [None, None],
                range: [Some([0.0, 1.0]), Some([0.0, 1.0])],
                gamma_scale: None,
            },
            TermSpec::CyclicBspline {
                name: "daily".into(),
                covariate: "t".into(),
                basis_size: 6,
                period: 24.0,
                order: 2,
                penalty_order: 2,
                gamma_scale: None,
            },
        ],
        lags: LagSet::new(vec![1]).expect("valid lag"),
        priors: Default::default(),
        mcmc: Default::default(),
        response_transform: Default::default(),
    }
}

/// `cycles` days of hourly data (at least two).
pub fn simulate(cycles: usize, seed: u64) -> Result<Simulated> {
    if cycles < 2 {
        return Err(Error::Config(format!("need at least 2 cycles (48 rows), got {cycles}")));
    }
    let n = cycles * CYCLE;
    let mut rng = RngStream::new(seed, 0).rng();
    let sd = INNOVATION_VARIANCE.sqrt();
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let t: Vec<f64> = (0..n).map(|i| (i % CYCLE + 1) as f64).collect();
    let u: Vec<f64> = (0..n).map(|_| sd * standard_normal(&mut rng)).collect();
    let mut eps = vec![0.0; n];
    eps[0] = u[0] / (1.0 - AR_COEFFICIENT * AR_COEFFICIENT).sqrt();
    for i in 1..n {
        eps[i] = AR_COEFFICIENT * eps[i - 1] + u[i];
    }
    let surface: Vec<f64> = (0..n).map(|i| true_surface(x[i], y[i])).collect();
    let daily: Vec<f64> = t.iter().map(|&v| true_daily(v)).collect();
    let mu: Vec<f64> = (0..n).map(|i| surface[i] + daily[i]).collect();
    let response = (0..n).map(|i| mu[i] + eps[i]).collect();
    let data = Dataset::new(
        (0..n as i64).collect(),
        response,
        vec![("x".into(), x), ("y".into(), y), ("t".into(), t)],
    )?;
    Ok(Simulated {
        data,
        mu,
        surface,
        daily,
        eps,
        u,
    })
}
