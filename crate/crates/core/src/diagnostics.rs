//! Posterior and forecast checks: effective degrees of freedom, DIC, PIT,
//! sharpness, autocorrelation, residual covariance and marginal effects.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::quantile_sorted;
use crate::design::{Block, BlockLedger, BlockPrior, Dataset, LagStructure};
use crate::error::{Error, Result};
use crate::numerics::cholesky;
use crate::par::{self, Execution};
use crate::sampler::PosteriorDraws;

/// Location and spread of a scalar posterior quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Summary {
            mean,
            sd: var.sqrt(),
            q025: quantile_sorted(&s, 0.025),
            q50: quantile_sorted(&s, 0.5),
            q975: quantile_sorted(&s, 0.975),
        }
    }
}

/// Type-7 sample quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermEdf {
    pub name: String,
    pub per_draw: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfReport {
    pub terms: Vec<TermEdf>,
    pub total: TermEdf,
}

impl EdfReport {
    pub fn term(&self, name: &str) -> Option<&TermEdf> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Smoothing precision `Λ` of the hat matrix: `σ²λK` for penalised blocks
/// and zero for fixed effects.
fn hat_penalty(ledger: &BlockLedger, lambdas: &[f64], sigma2: f64) -> DMatrix<f64> {
    let k = ledger.num_columns;
    let mut m = DMatrix::zeros(k, k);
    for b in &ledger.blocks {
        if !matches!(b.prior, BlockPrior::Fixed { .. }) {
            let w = b.width();
            m.view_mut((b.columns.start, b.columns.start), (w, w))
                .copy_from(&(b.prior.precision(lambdas, w) * sigma2));
        }
    }
    m
}

/// Per-draw traces of the hat-matrix blocks `H = (XᵀX + Λ)⁻¹XᵀX`.
pub fn effective_df(draws: &PosteriorDraws, x: &DMatrix<f64>, ledger: &BlockLedger, exec: Execution) -> Result<EdfReport> {
    if draws.is_empty() {
        return Err(Error::Diagnostics("no draws".into()));
    }
    let xtx = x.tr_mul(x);
    let per_draw = par::try_map_indices(draws.len(), exec, |t| {
        let d = &draws.draws[t];
        let lam = hat_penalty(ledger, &d.lambdas, d.sigma2);
        let f = cholesky(&(&xtx + &lam)).map_err(|e| {
            Error::Diagnostics(format!("XᵀX + Λ is singular at draw {t}: {e}"))
        })?;
        // H = I − (XᵀX+Λ)⁻¹Λ; fixed-effect columns of Λ are zero so their
        // diagonal entries of H are exactly one
        let correction = f.solve_matrix(&lam);
        let diag: Vec<f64> = (0..xtx.nrows()).map(|i| 1.0 - correction[(i, i)]).collect();
        Ok::<_, Error>(diag)
    })?;
    let mut terms = Vec::with_capacity(ledger.blocks.len());
    for b in &ledger.blocks {
        let tr: Vec<f64> = per_draw.iter().map(|d| d[b.columns.clone()].iter().sum()).collect();
        terms.push(TermEdf {
            name: b.name.clone(),
            summary: Summary::of(&tr),
            per_draw: tr,
        });
    }
    let tot: Vec<f64> = per_draw.iter().map(|d| d.iter().sum()).collect();
    Ok(EdfReport {
        terms,
        total: TermEdf {
            name: "total".into(),
            summary: Summary::of(&tot),
            per_draw: tot,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior means of β, φ and σ².
    pub deviance_at_mean: f64,
}

fn innovation_deviance(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lags: &LagStructure,
    beta: &DVector<f64>,
    phi: &[f64],
    sigma2: f64,
) -> f64 {
    let eps = y - x * beta;
    let ss: f64 = lags
        .targets
        .iter()
        .zip(&lags.lag_rows)
        .map(|(&t, rows)| {
            let u = eps[t] - rows.iter().zip(phi).map(|(&l, &p)| p * eps[l]).sum::<f64>();
            u * u
        })
        .sum();
    let n = lags.len() as f64;
    n * (2.0 * std::f64::consts::PI * sigma2).ln() + ss / sigma2
}

/// Deviance information criterion from the innovation likelihood.
pub fn dic(draws: &PosteriorDraws, x: &DMatrix<f64>, y: &DVector<f64>, lags: &LagStructure) -> Result<Dic> {
    if draws.is_empty() {
        return Err(Error::Diagnostics("no draws".into()));
    }
    if x.nrows() != y.len() || x.ncols() != draws.draws[0].beta.len() {
        return Err(Error::Shape("design does not match the draws".into()));
    }
    let n = draws.len() as f64;
    let mean_deviance = draws
        .draws
        .iter()
        .map(|d| innovation_deviance(x, y, lags, &d.beta, d.phi.as_slice(), d.sigma2))
        .sum::<f64>()
        / n;
    let beta = draws.posterior_mean_beta();
    let p = draws.draws[0].phi.len();
    let phi = draws.draws.iter().fold(DVector::zeros(p), |a, d| a + &d.phi) / n;
    let sigma2 = draws.draws.iter().map(|d| d.sigma2).sum::<f64>() / n;
    let deviance_at_mean = innovation_deviance(x, y, lags, &beta, phi.as_slice(), sigma2);
    let p_d = mean_deviance - deviance_at_mean;
    Ok(Dic {
        dic: deviance_at_mean + 2.0 * p_d,
        p_d,
        mean_deviance,
        deviance_at_mean,
    })
}

/// Minimum predictive sample size accepted by [`pit`].
pub const MIN_PIT_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    pub values: Vec<f64>,
    /// Counts over equal-width bins on [0, 1].
    pub histogram: Vec<usize>,
    /// Autocorrelation of the PIT sequence, lag 0 first; empty if the
    /// sequence is too short.
    pub acf: Vec<f64>,
}

/// Empirical CDF `#{s ≤ v} / N`.
pub fn ecdf(samples: &[f64], v: f64) -> f64 {
    samples.iter().filter(|&&s| s <= v).count() as f64 / samples.len() as f64
}

/// Probability integral transform of each observation under its predictive
/// samples.
pub fn pit(predictive: &[Vec<f64>], observed: &[f64], bins: usize, max_lag: usize) -> Result<PitResult> {
    if predictive.len() != observed.len() {
        return Err(Error::Data(format!(
            "{} forecasts but {} observations",
            predictive.len(),
            observed.len()
        )));
    }
    if let Some(i) = predictive.iter().position(|s| s.len() < MIN_PIT_SAMPLES) {
        return Err(Error::Diagnostics(format!(
            "forecast {i} has {} samples; at least {MIN_PIT_SAMPLES} are needed",
            predictive[i].len()
        )));
    }
    let bins = bins.max(1);
    let values: Vec<f64> = predictive.iter().zip(observed).map(|(s, &v)| ecdf(s, v)).collect();
    let mut histogram = vec![0; bins];
    for &v in &values {
        histogram[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let acf = match acf(&values, max_lag) {
        Ok(a) => a.values,
        Err(_) => Vec::new(),
    };
    Ok(PitResult { values, histogram, acf })
}

/// One-sample Kolmogorov–Smirnov statistic. Sorts `values` in place.
pub fn ks_statistic(values: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value with the usual small-sample correction.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Variance implied by a central 95% interval.
pub fn sharpness(lower: f64, upper: f64) -> f64 {
    ((upper - lower) / 2.0 / 1.96).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessResult {
    pub estimates: Vec<f64>,
    pub summary: Summary,
}

/// Sharpness of each predictive sample set.
pub fn sharpness_of(predictive: &[Vec<f64>]) -> Result<SharpnessResult> {
    if predictive.is_empty() {
        return Err(Error::Diagnostics("no forecasts".into()));
    }
    let estimates: Vec<f64> = predictive
        .iter()
        .map(|s| sharpness(quantile(s, 0.025), quantile(s, 0.975)))
        .collect();
    Ok(SharpnessResult {
        summary: Summary::of(&estimates),
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    /// Lags `0..=max_lag`.
    pub values: Vec<f64>,
    /// Half-width of the 5% significance band.
    pub band: f64,
}

/// Sample autocorrelation; non-finite values are skipped pairwise.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Acf> {
    let finite: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < max_lag + 2 {
        return Err(Error::Diagnostics(format!(
            "{} finite values cannot support lag {max_lag}",
            finite.len()
        )));
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let c0: f64 = finite.iter().map(|v| (v - mean).powi(2)).sum();
    if c0 == 0.0 {
        return Err(Error::Diagnostics("constant series has no autocorrelation".into()));
    }
    let values = (0..=max_lag)
        .map(|k| {
            series
                .iter()
                .zip(&series[k..])
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(a, b)| (a - mean) * (b - mean))
                .sum::<f64>()
                / c0
        })
        .collect();
    Ok(Acf {
        values,
        band: 1.96 / n.sqrt(),
    })
}

/// Across-draw covariance matrices of ε and u over a window of regression
/// targets. `targets` maps target index to kept-row index.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCovariance {
    pub eps: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl ResidualCovariance {
    /// Mean absolute off-diagonal entry of each matrix, `(ε, u)`.
    pub fn mean_abs_off_diagonal(&self) -> (f64, f64) {
        (mean_abs_off_diagonal(&self.eps), mean_abs_off_diagonal(&self.u))
    }
}

pub fn mean_abs_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)].abs();
            }
        }
    }
    s / (n * (n - 1)) as f64
}

fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    let w = rows[0].len();
    let data = DMatrix::from_fn(m, w, |i, j| rows[i][j]);
    let mean = data.row_mean();
    let mut c = data;
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    c.tr_mul(&c) / (m as f64 - 1.0)
}

pub fn residual_covariance(draws: &PosteriorDraws, targets: &[usize], window: Range<usize>) -> Result<ResidualCovariance> {
    if draws.residuals.len() < 2 {
        return Err(Error::Data("fewer than two stored residual draws".into()));
    }
    let n_u = draws.residuals[0].u.len();
    if window.is_empty() || window.end > n_u || targets.len() != n_u {
        return Err(Error::Data(format!(
            "window {window:?} outside the {n_u} stored innovations"
        )));
    }
    let eps: Vec<Vec<f64>> = draws
        .residuals
        .iter()
        .map(|r| window.clone().map(|i| r.eps[targets[i]]).collect())
        .collect();
    let u: Vec<Vec<f64>> = draws
        .residuals
        .iter()
        .map(|r| r.u.rows(window.start, window.len()).iter().copied().collect())
        .collect();
    Ok(ResidualCovariance {
        eps: sample_covariance(&eps),
        u: sample_covariance(&u),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEffect {
    pub term: String,
    /// Covariate names, one per grid coordinate.
    pub covariates: Vec<String>,
    /// Grid points; for 2D grids the second coordinate varies fastest.
    pub grid: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Partial-effect samples `B β_block` at given covariate values, one row per
/// draw.
pub fn effect_samples(draws: &PosteriorDraws, block: &Block, points: &Dataset) -> Result<DMatrix<f64>> {
    let b = block.evaluate(points)?;
    let coef = DMatrix::from_fn(block.width(), draws.len(), |i, t| draws.draws[t].beta[block.columns.start + i]);
    Ok((b.values() * coef).transpose())
}

fn summarize_effect(term: &str, covariates: Vec<String>, grid: Vec<Vec<f64>>, samples: &DMatrix<f64>) -> MarginalEffect {
    let (mut mean, mut lower, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    for c in samples.column_iter() {
        let v: Vec<f64> = c.iter().copied().collect();
        let s = Summary::of(&v);
        mean.push(s.mean);
        lower.push(s.q025);
        upper.push(s.q975);
    }
    MarginalEffect {
        term: term.to_string(),
        covariates,
        grid,
        mean,
        lower,
        upper,
    }
}

fn even_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn data_range(data: &Dataset, name: &str) -> Result<(f64, f64)> {
    let c = data
        .covariate(name)
        .ok_or_else(|| Error::Config(format!("unknown covariate {name}")))?;
    let lo = c.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = c.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

fn grid_dataset(names: &[String], cols: Vec<Vec<f64>>) -> Result<Dataset> {
    let n = cols[0].len();
    Dataset::new(
        (0..n as i64).collect(),
        vec![f64::NAN; n],
        names.iter().cloned().zip(cols).collect(),
    )
}

/// Posterior partial effect of a term over evenly spaced covariate values
/// spanning the data. For tensor terms `marginalise` averages the effect
/// over the given axis (0 or 1), leaving a curve in the other covariate.
pub fn marginal_effect(
    draws: &PosteriorDraws,
    ledger: &BlockLedger,
    data: &Dataset,
    term: &str,
    resolution: usize,
    marginalise: Option<usize>,
) -> Result<MarginalEffect> {
    let block = ledger
        .block(term)
        .ok_or_else(|| Error::Config(format!("unknown term {term}")))?;
    if block.kind == "intercept" {
        return Err(Error::Config("the intercept has no marginal effect".into()));
    }
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    if draws.is_empty() {
        return Err(Error::Diagnostics("no draws".into()));
    }
    let names = &block.covariates;
    let axes: Vec<Vec<f64>> = names
        .iter()
        .map(|n| data_range(data, n).map(|(lo, hi)| even_grid(lo, hi, resolution)))
        .collect::<Result<_>>()?;
    if names.len() == 1 {
        let points = grid_dataset(names, vec![axes[0].clone()])?;
        let s = effect_samples(draws, block, &points)?;
        let grid = axes[0].iter().map(|&v| vec![v]).collect();
        return Ok(summarize_effect(term, names.clone(), grid, &s));
    }
    let (a, b) = (&axes[0], &axes[1]);
    let c0: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, b.len())).collect();
    let c1: Vec<f64> = a.iter().flat_map(|_| b.iter().copied()).collect();
    let points = grid_dataset(names, vec![c0.clone(), c1.clone()])?;
    let s = effect_samples(draws, block, &points)?;
    match marginalise {
        None => {
            let grid = c0.iter().zip(&c1).map(|(&x, &y)| vec![x, y]).collect();
            Ok(summarize_effect(term, names.clone(), grid, &s))
        }
        Some(axis @ (0 | 1)) => {
            let keep = 1 - axis;
            let n = resolution;
            let avg = DMatrix::from_fn(s.nrows(), n, |t, g| {
                (0..n)
                    .map(|o| if keep == 0 { s[(t, g * n + o)] } else { s[(t, o * n + g)] })
                    .sum::<f64>()
                    / n as f64
            });
            let grid = axes[keep].iter().map(|&v| vec![v]).collect();
            Ok(summarize_effect(term, vec![names[keep].clone()], grid, &avg))
        }
        Some(other) => Err(Error::Config(format!("cannot marginalise over axis {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        assemble_design, drop_incomplete_rows, LagSet, McmcConfig, ModelSpec, PriorConfig, ResponseTransform, TermSpec,
    };
    use crate::numerics::{standard_normal, RngStream};
    use crate::sampler::{Draw, Sampler};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn summary_and_quantiles() {
        let v: Vec<f64> = (1..=5).map(f64::from).collect();
        let s = Summary::of(&v);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.q50, 3.0);
        assert_abs_diff_eq!(s.sd, 2.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(quantile(&v, 0.25), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn pit_boundaries_and_median() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = pit(&[samples.clone(), samples.clone(), samples.clone()], &[50.5, 0.0, 1000.0], 20, 0).unwrap();
        assert_eq!(r.values, vec![0.5, 0.0, 1.0]);
        assert_eq!(r.histogram.iter().sum::<usize>(), 3);
        assert!(pit(&[samples], &[1.0, 2.0], 20, 0).is_err());
        assert!(pit(&[vec![1.0; 10]], &[1.0], 20, 0).is_err());
    }

    #[test]
    fn pit_self_consistent_forecasts_are_uniform() {
        let mut rng = RngStream::new(21, 0).rng();
        let mut predictive = Vec::new();
        let mut observed = Vec::new();
        for _ in 0..500 {
            let mu: f64 = 3.0 * standard_normal(&mut rng);
            let sd: f64 = rng.random_range(0.5..2.0);
            predictive.push((0..400).map(|_| mu + sd * standard_normal(&mut rng)).collect::<Vec<_>>());
            observed.push(mu + sd * standard_normal(&mut rng));
        }
        let mut r = pit(&predictive, &observed, 20, 10).unwrap();
        let d = ks_statistic(&mut r.values, |v| v.clamp(0.0, 1.0));
        assert!(kolmogorov_p_value(d, 500) > 0.01);
        assert_eq!(r.acf.len(), 11);
    }

    #[test]
    fn ks_reference_values() {
        let mut v = vec![0.1, 0.4, 0.7];
        // ecdf steps at 1/3, 2/3, 1 against F(x) = x
        assert_abs_diff_eq!(ks_statistic(&mut v, |x| x), 0.3, epsilon = 1e-12);
        // critical value at 5% for large n is 1.358/√n
        let p = kolmogorov_p_value(1.358 / 1000f64.sqrt(), 1000);
        assert!((p - 0.05).abs() < 0.005, "{p}");
        assert_eq!(kolmogorov_p_value(0.0, 10), 1.0);
    }

    #[test]
    fn sharpness_arithmetic_and_gaussian() {
        assert_abs_diff_eq!(sharpness(-1.96, 1.96), 1.0, epsilon = 1e-15);
        assert_eq!(sharpness(2.0, 2.0), 0.0);
        let mut rng = RngStream::new(2, 2).rng();
        let s: Vec<f64> = (0..2000).map(|_| 1.5 * standard_normal(&mut rng)).collect();
        let r = sharpness_of(std::slice::from_ref(&s)).unwrap();
        let var = Summary::of(&s).sd.powi(2);
        assert!((r.estimates[0] / var - 1.0).abs() < 0.1);
    }

    #[test]
    fn acf_properties() {
        let mut rng = RngStream::new(4, 0).rng();
        let white: Vec<f64> = (0..10_000).map(|_| standard_normal(&mut rng)).collect();
        let a = acf(&white, 40).unwrap();
        assert_eq!(a.values[0], 1.0);
        let inside = a.values[1..].iter().filter(|v| v.abs() < a.band).count();
        assert!(inside as f64 >= 0.85 * 40.0);
        assert!(a.values[1..].iter().all(|v| v.abs() < 0.05));

        let mut ar = vec![0.0; 10_000];
        for i in 1..ar.len() {
            ar[i] = 0.5 * ar[i - 1] + standard_normal(&mut rng);
        }
        let a = acf(&ar, 5).unwrap();
        for k in 1..=5 {
            assert!((a.values[k] - 0.5f64.powi(k as i32)).abs() < 2.0 * a.band, "lag {k}");
        }
        assert!(acf(&[1.0; 10], 2).is_err());
        assert!(acf(&[1.0, 2.0], 2).is_err());
        let with_gap = [1.0, f64::NAN, 3.0, 2.0, 5.0, 4.0];
        assert!(acf(&with_gap, 1).unwrap().values[1].is_finite());
    }

    fn fixed_effects_fit(n: usize) -> (Sampler, PosteriorDraws) {
        let mut rng = RngStream::new(12, 0).rng();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 1.0 + (v * std::f64::consts::PI / 5.0).sin() + 0.5 * standard_normal(&mut rng))
            .collect();
        let data = Dataset::new((0..n as i64).collect(), y, vec![("x".into(), x)]).unwrap();
        let spec = ModelSpec {
            terms: vec![
                TermSpec::Intercept { name: "b0".into() },
                TermSpec::Fourier {
                    name: "f".into(),
                    covariate: "x".into(),
                    num_harmonics: 2,
                    half_period: 5.0,
                },
            ],
            lags: LagSet::default(),
            priors: PriorConfig::default(),
            mcmc: McmcConfig {
                iterations: 3000,
                burn_in: 200,
                seed: 5,
                ..McmcConfig::default()
            },
            response_transform: ResponseTransform::Identity,
        };
        let (kept, _) = drop_incomplete_rows(&data, &spec.lags).unwrap();
        let design = assemble_design(&spec, &kept).unwrap();
        let s = Sampler::new(spec, design, kept.time_index()).unwrap();
        let d = s.run(Execution::Sequential).unwrap();
        (s, d)
    }

    #[test]
    fn dic_identity_and_parameter_count() {
        let (s, draws) = fixed_effects_fit(500);
        let d = dic(&draws, &s.design().x, &s.design().y, s.lag_structure()).unwrap();
        assert_abs_diff_eq!(d.dic, d.mean_deviance + d.p_d, epsilon = 1e-9);
        // 5 coefficients + σ²
        assert!((d.p_d / 6.0 - 1.0).abs() < 0.15, "p_D = {}", d.p_d);
    }

    #[test]
    fn edf_unpenalised_block_is_full_rank() {
        let (s, draws) = fixed_effects_fit(200);
        let r = effective_df(&draws, &s.design().x, s.ledger(), Execution::Auto).unwrap();
        assert_eq!(r.term("b0").unwrap().summary.mean, 1.0);
        assert_abs_diff_eq!(r.term("f").unwrap().summary.mean, 4.0, epsilon = 1e-9);
    }

    fn spline_setup() -> (DMatrix<f64>, BlockLedger, Dataset) {
        let n = 200;
        let h: Vec<f64> = (0..n).map(|i| (i % 24 + 1) as f64).collect();
        let data = Dataset::new((0..n as i64).collect(), vec![0.0; n], vec![("hour".into(), h)]).unwrap();
        let spec = ModelSpec {
            terms: vec![
                TermSpec::Intercept { name: "b0".into() },
                TermSpec::CyclicBspline {
                    name: "daily".into(),
                    covariate: "hour".into(),
                    basis_size: 6,
                    period: 24.0,
                    order: 2,
                    penalty_order: 2,
                    gamma_scale: None,
                },
            ],
            lags: LagSet::default(),
            priors: PriorConfig::default(),
            mcmc: McmcConfig::default(),
            response_transform: ResponseTransform::Identity,
        };
        let d = assemble_design(&spec, &data).unwrap();
        (d.x, d.ledger, data)
    }

    fn fake_draws(lambdas: &[f64], betas: Vec<DVector<f64>>) -> PosteriorDraws {
        PosteriorDraws {
            chain: vec![0; betas.len()],
            draws: betas
                .into_iter()
                .map(|beta| Draw {
                    beta,
                    sigma2: 1.0,
                    phi: DVector::zeros(0),
                    lambdas: lambdas.to_vec(),
                })
                .collect(),
            residuals: vec![],
            acceptance: vec![],
            lambda_labels: vec![],
            burn_in: 0,
            iterations: 0,
            seed: 0,
        }
    }

    #[test]
    fn edf_shrinks_under_heavy_penalty_and_adds_up() {
        let (x, ledger, _) = spline_setup();
        let light = effective_df(&fake_draws(&[1e-6], vec![DVector::zeros(7)]), &x, &ledger, Execution::Sequential).unwrap();
        let heavy = effective_df(&fake_draws(&[1e12], vec![DVector::zeros(7)]), &x, &ledger, Execution::Sequential).unwrap();
        // intercept and cyclic block share the constant direction
        assert!(light.term("daily").unwrap().per_draw[0] > 4.9);
        assert!(heavy.term("daily").unwrap().per_draw[0] < 1e-3);
        for r in [&light, &heavy] {
            let sum: f64 = r.terms.iter().map(|t| t.per_draw[0]).sum();
            assert!((sum - r.total.per_draw[0]).abs() < 1e-8);
            assert_eq!(r.term("b0").unwrap().per_draw[0], 1.0);
        }
    }

    #[test]
    fn cyclic_effect_is_periodic_and_marginal_grid_spans_data() {
        let (_, ledger, data) = spline_setup();
        let beta = DVector::from_vec(vec![0.0, 1.0, -0.5, 0.3, 0.9, -1.2, 0.4]);
        let draws = fake_draws(&[1.0], vec![beta.clone(), beta * 0.5]);
        let block = ledger.block("daily").unwrap();
        let a = grid_dataset(&["hour".to_string()], vec![vec![1.0, 5.5, 13.0]]).unwrap();
        let b = grid_dataset(&["hour".to_string()], vec![vec![25.0, 29.5, 37.0]]).unwrap();
        assert_eq!(effect_samples(&draws, block, &a).unwrap(), effect_samples(&draws, block, &b).unwrap());
        let me = marginal_effect(&draws, &ledger, &data, "daily", 24, None).unwrap();
        assert_eq!(me.grid.first().unwrap()[0], 1.0);
        assert_eq!(me.grid.last().unwrap()[0], 24.0);
        assert!(me.lower.iter().zip(&me.mean).zip(&me.upper).all(|((l, m), u)| l <= m && m <= u));
        assert!(matches!(marginal_effect(&draws, &ledger, &data, "nope", 10, None), Err(Error::Config(_))));
    }

    #[test]
    fn residual_covariance_shapes() {
        let mut d = fake_draws(&[], vec![DVector::zeros(1); 3]);
        let mut rng = RngStream::new(0, 0).rng();
        for t in 0..3 {
            d.residuals.push(crate::sampler::ResidualDraw {
                draw: t,
                eps: DVector::from_fn(10, |_, _| standard_normal(&mut rng)),
                u: DVector::from_fn(9, |_, _| standard_normal(&mut rng)),
            });
        }
        let targets: Vec<usize> = (1..10).collect();
        let c = residual_covariance(&d, &targets, 2..3).unwrap();
        assert_eq!(c.eps.shape(), (1, 1));
        assert!(c.u[(0, 0)] > 0.0);
        let c = residual_covariance(&d, &targets, 0..9).unwrap();
        assert!(c.eps.diagonal().iter().all(|v| *v > 0.0));
        assert!(residual_covariance(&d, &targets, 5..12).is_err());
    }

    proptest! {
        #[test]
        fn pit_invariant_under_monotone_transform(
            samples in proptest::collection::vec(-5.0f64..5.0, 100..150),
            obs in -6.0f64..6.0,
        ) {
            let a = pit(std::slice::from_ref(&samples), &[obs], 10, 0).unwrap().values[0];
            let t: Vec<f64> = samples.iter().map(|v| v.exp()).collect();
            let b = pit(&[t], &[obs.exp()], 10, 0).unwrap().values[0];
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn ks_statistic_within_unit_interval(v in proptest::collection::vec(-3.0f64..3.0, 1..50)) {
            let n = Normal::new(0.0, 1.0).unwrap();
            let mut v = v;
            let d = ks_statistic(&mut v, |x| n.cdf(x));
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
