//! Posterior-predictive forecasts with AR error propagation, and the rolling
//! refit-and-forecast study.
//!
//! For each posterior draw the residual history `ε = y − Xβ` is rolled
//! forward one time step at a time, `ε̂_τ = Σ_j φ_j ε̂_{τ−lag_j} + u_τ` with
//! `u_τ ~ N(0, σ²)`, so every step conditions on the observed and previously
//! forecast values before it. Time steps with no observation (before or
//! between targets) are forecast the same way rather than zero-filled.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{build_ledger, drop_incomplete_rows, BlockLedger, Dataset, LagSet, ModelSpec};
use crate::diagnostics::Summary;
use crate::error::{Error, Result};
use crate::numerics::{standard_normal, RngStream};
use crate::par::{self, Execution};
use crate::sampler::{fit_with_ledger, Fit, PosteriorDraws};

/// Observed rows preceding a forecast; every response must be finite.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub times: &'a [i64],
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
}

/// Predictive samples per target time, indexed `[target][draw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub times: Vec<i64>,
    /// Steps between the issue time and each target.
    pub leads: Vec<i64>,
    /// `ŷ = μ̂ + ε̂`.
    pub samples: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    /// Innovations injected at each target.
    pub u: Vec<Vec<f64>>,
}

impl ForecastDistribution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn summary(&self, target: usize) -> Summary {
        Summary::of(&self.samples[target])
    }
}

struct DrawPath {
    y: Vec<f64>,
    mu: Vec<f64>,
    eps: Vec<f64>,
    u: Vec<f64>,
}

/// Sequential forecast of `future_times` (strictly increasing, all after the
/// history) from each posterior draw. Draw `t` uses substream `t` of
/// `stream`, so results do not depend on `exec`.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    draws: &PosteriorDraws,
    lags: &LagSet,
    history: &History<'_>,
    future_times: &[i64],
    future_x: &DMatrix<f64>,
    issue_time: i64,
    stream: RngStream,
    exec: Execution,
) -> Result<ForecastDistribution> {
    if draws.is_empty() {
        return Err(Error::Data("no posterior draws to forecast from".into()));
    }
    let k = draws.draws[0].beta.len();
    if future_x.ncols() != k || history.x.ncols() != k {
        return Err(Error::Shape(format!(
            "design has {} future / {} history columns, draws have {k}",
            future_x.ncols(),
            history.x.ncols()
        )));
    }
    if future_x.nrows() != future_times.len() || history.x.nrows() != history.times.len() || history.y.len() != history.times.len() {
        return Err(Error::Shape("row counts of times and design disagree".into()));
    }
    if future_times.is_empty() {
        return Err(Error::Data("nothing to forecast".into()));
    }
    if future_times.windows(2).any(|w| w[1] <= w[0]) || history.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("forecast and history times must be strictly increasing".into()));
    }
    if let Some(&last) = history.times.last() {
        if future_times[0] <= last {
            return Err(Error::Data(format!(
                "first forecast time {} is not after the history ending at {last}",
                future_times[0]
            )));
        }
    }
    if let Some(i) = history.y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("missing response in residual history at time {}", history.times[i])));
    }
    let start = history.times.first().copied().unwrap_or(future_times[0]);
    let end = *future_times.last().unwrap();
    let span = (end - start + 1) as usize;
    let lag_values = lags.lags();
    let hx = DMatrix::from_column_slice(history.y.len(), 1, history.y);

    let paths = par::try_map_indices(draws.len(), exec, |t| {
        let d = &draws.draws[t];
        let mut rng = stream.substream(t as u64).rng();
        let sd = d.sigma2.sqrt();
        let eps_hist = hx.column(0) - history.x * &d.beta;
        let mut vals: Vec<Option<f64>> = vec![None; span];
        let mut innov = vec![0.0; span];
        for (i, &tm) in history.times.iter().enumerate() {
            vals[(tm - start) as usize] = Some(eps_hist[i]);
        }
        for pos in 0..span {
            if vals[pos].is_some() {
                continue;
            }
            let mut acc = 0.0;
            let mut ok = true;
            for (&l, &p) in lag_values.iter().zip(d.phi.iter()) {
                match pos.checked_sub(l).and_then(|q| vals[q]) {
                    Some(v) => acc += p * v,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let u = sd * standard_normal(&mut rng);
                innov[pos] = u;
                vals[pos] = Some(acc + u);
            }
        }
        let mu = future_x * &d.beta;
        let mut path = DrawPath {
            y: Vec::with_capacity(future_times.len()),
            mu: mu.as_slice().to_vec(),
            eps: Vec::with_capacity(future_times.len()),
            u: Vec::with_capacity(future_times.len()),
        };
        for (j, &tm) in future_times.iter().enumerate() {
            let pos = (tm - start) as usize;
            let e = vals[pos].ok_or_else(|| {
                Error::Data(format!(
                    "residual history does not reach back {} steps before time {tm}",
                    lags.max_lag()
                ))
            })?;
            path.eps.push(e);
            path.u.push(innov[pos]);
            path.y.push(mu[j] + e);
        }
        Ok::<_, Error>(path)
    })?;

    let m = future_times.len();
    let gather = |f: &dyn Fn(&DrawPath) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..m).map(|j| paths.iter().map(|p| f(p)[j]).collect()).collect()
    };
    Ok(ForecastDistribution {
        times: future_times.to_vec(),
        leads: future_times.iter().map(|t| t - issue_time).collect(),
        samples: gather(&|p| &p.y),
        mu: gather(&|p| &p.mu),
        eps: gather(&|p| &p.eps),
        u: gather(&|p| &p.u),
    })
}

/// Forecast schedule for hourly-style data.
///
/// Days start at `time_origin + d · steps_per_day`. On issue day `d`
/// residuals are known for times before `issue_hour` of that day, and the
/// window covers `window` steps starting at the next day boundary. Targets in
/// the first day of the window are archived with lead `steps_per_day`, the
/// second with `2 · steps_per_day`, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingProtocol {
    /// Days between refits; `None` fits once at the first issue day.
    pub refit_interval: Option<usize>,
    pub window: usize,
    pub residual_history: usize,
    pub issue_hour: usize,
    pub steps_per_day: usize,
    pub time_origin: i64,
    pub first_issue_day: i64,
    /// Last issue day; defaults to the last day whose window fits the data.
    pub last_issue_day: Option<i64>,
    /// Forecast from every `draw_thin`-th posterior draw.
    pub draw_thin: usize,
}

impl Default for RollingProtocol {
    fn default() -> Self {
        Self {
            refit_interval: Some(20),
            window: 48,
            residual_history: 168,
            issue_hour: 12,
            steps_per_day: 24,
            time_origin: 0,
            first_issue_day: 20,
            last_issue_day: None,
            draw_thin: 1,
        }
    }
}

impl RollingProtocol {
    /// Every problem with the schedule, not just the first.
    pub fn problems(&self, lags: &LagSet) -> Vec<String> {
        let mut p = Vec::new();
        if self.window == 0 {
            p.push("window must be at least 1".to_string());
        }
        if self.steps_per_day == 0 {
            p.push("steps_per_day must be at least 1".into());
        }
        if self.issue_hour > self.steps_per_day {
            p.push("issue_hour must lie within the day".into());
        }
        if self.residual_history < lags.max_lag() {
            p.push(format!(
                "residual_history {} is shorter than the largest lag {}",
                self.residual_history,
                lags.max_lag()
            ));
        }
        if self.refit_interval == Some(0) {
            p.push("refit_interval must be at least 1 day".into());
        }
        if self.draw_thin == 0 {
            p.push("draw_thin must be at least 1".into());
        }
        p
    }

    pub fn validate(&self, lags: &LagSet) -> Result<()> {
        let p = self.problems(lags);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn day_start(&self, day: i64) -> i64 {
        self.time_origin + day * self.steps_per_day as i64
    }

    pub fn issue_time(&self, day: i64) -> i64 {
        self.day_start(day) + self.issue_hour as i64
    }
}

/// One archived predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub time: i64,
    /// Lead label in steps: `steps_per_day`, `2 · steps_per_day`, …
    pub lead: usize,
    pub issue_day: i64,
    pub samples: Vec<f64>,
    pub mu_mean: f64,
    pub eps_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingArchive {
    pub records: Vec<ForecastRecord>,
    /// Issue days at which the model was refit.
    pub refit_days: Vec<i64>,
}

impl RollingArchive {
    pub fn with_lead(&self, lead: usize) -> impl Iterator<Item = &ForecastRecord> {
        self.records.iter().filter(move |r| r.lead == lead)
    }
}

fn rows_between(data: &Dataset, lo: i64, hi: i64) -> Vec<usize> {
    let t = data.time_index();
    (t.partition_point(|&x| x < lo)..t.partition_point(|&x| x < hi)).collect()
}

fn thin_draws(draws: &PosteriorDraws, thin: usize) -> PosteriorDraws {
    if thin == 1 {
        return draws.clone();
    }
    let keep: Vec<usize> = (0..draws.len()).step_by(thin).collect();
    PosteriorDraws {
        chain: keep.iter().map(|&i| draws.chain[i]).collect(),
        draws: keep.iter().map(|&i| draws.draws[i].clone()).collect(),
        residuals: Vec::new(),
        ..draws.clone()
    }
}

/// Runs one issue day's forecast from a fit.
pub fn forecast_day(
    fit: &Fit,
    ledger: &BlockLedger,
    data: &Dataset,
    protocol: &RollingProtocol,
    day: i64,
    draws: &PosteriorDraws,
    exec: Execution,
) -> Result<Option<ForecastDistribution>> {
    let spec = fit.spec();
    let issue = protocol.issue_time(day);
    let hist = data.select_rows(&rows_between(data, issue - protocol.residual_history as i64, issue));
    let hist = hist.select_rows(&hist.complete_rows());
    let w0 = protocol.day_start(day + 1);
    let future_rows = rows_between(data, w0, w0 + protocol.window as i64);
    let future = data.select_rows(&future_rows);
    let future = future.select_rows(&future.covariates_complete_rows());
    if future.is_empty() {
        return Ok(None);
    }
    let hx = ledger.design_matrix(&hist)?;
    let hy = spec.response_transform.apply(hist.response())?;
    let fx = ledger.design_matrix(&future)?;
    let stream = RngStream::new(spec.mcmc.seed, 0).substream(1 << 32 | day as u64);
    let fd = forecast(
        draws,
        &spec.lags,
        &History {
            times: hist.time_index(),
            x: &hx,
            y: &hy,
        },
        future.time_index(),
        &fx,
        issue,
        stream,
        exec,
    )?;
    Ok(Some(fd))
}

/// Refits on a growing training set and archives the lead-labelled
/// forecasts of every issue day.
///
/// Knots come from `ledger`, built once on the full dataset, so every refit
/// and every forecast shares one basis.
pub fn rolling_forecast_study(
    spec: &ModelSpec,
    data: &Dataset,
    protocol: &RollingProtocol,
    exec: Execution,
) -> Result<RollingArchive> {
    protocol.validate(&spec.lags)?;
    let (complete, _) = drop_incomplete_rows(data, &spec.lags)?;
    let ledger = build_ledger(spec, &complete)?;
    let last_time = *data
        .time_index()
        .last()
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    let last_day = match protocol.last_issue_day {
        Some(d) => d,
        None => {
            let mut d = protocol.first_issue_day;
            while protocol.day_start(d + 2) + protocol.window as i64 - 1 <= last_time {
                d += 1;
            }
            d
        }
    };
    if last_day < protocol.first_issue_day {
        return Err(Error::Data("data too short for a single forecast window".into()));
    }
    let mut records = Vec::new();
    let mut refit_days = Vec::new();
    let mut current: Option<(Fit, PosteriorDraws)> = None;
    for day in protocol.first_issue_day..=last_day {
        let due = match (&current, protocol.refit_interval) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(_), Some(r)) => (day - protocol.first_issue_day) % r as i64 == 0,
        };
        if due {
            let issue = protocol.issue_time(day);
            let train = data.before(issue);
            let fit = fit_with_ledger(spec, ledger.clone(), &train, exec).map_err(|e| Error::Refit {
                time: issue,
                source: Box::new(e),
            })?;
            let thinned = thin_draws(&fit.draws, protocol.draw_thin);
            refit_days.push(day);
            current = Some((fit, thinned));
        }
        let (fit, draws) = current.as_ref().unwrap();
        let Some(fd) = forecast_day(fit, &ledger, data, protocol, day, draws, exec)? else {
            continue;
        };
        let w0 = protocol.day_start(day + 1);
        for j in 0..fd.len() {
            let offset = (fd.times[j] - w0) as usize;
            let n = fd.samples[j].len() as f64;
            records.push(ForecastRecord {
                time: fd.times[j],
                lead: (offset / protocol.steps_per_day + 1) * protocol.steps_per_day,
                issue_day: day,
                samples: fd.samples[j].clone(),
                mu_mean: fd.mu[j].iter().sum::<f64>() / n,
                eps_mean: fd.eps[j].iter().sum::<f64>() / n,
            });
        }
    }
    Ok(RollingArchive { records, refit_days })
}

/// Convenience for a one-off forecast from a fit: history is the last
/// `history_len` complete rows of the fit's data.
pub fn forecast_from_fit(
    fit: &Fit,
    future: &Dataset,
    history_len: usize,
    stream: RngStream,
    exec: Execution,
) -> Result<ForecastDistribution> {
    let data = &fit.data;
    let n = data.len();
    let rows: Vec<usize> = (n.saturating_sub(history_len)..n).collect();
    let hist = data.select_rows(&rows);
    let ledger = fit.ledger();
    let hx = ledger.design_matrix(&hist)?;
    let hy = fit.spec().response_transform.apply(hist.response())?;
    let fx = ledger.design_matrix(future)?;
    let issue = hist.time_index().last().map_or(0, |t| t + 1);
    forecast(
        &fit.draws,
        &fit.spec().lags,
        &History {
            times: hist.time_index(),
            x: &hx,
            y: &hy,
        },
        future.time_index(),
        &fx,
        issue,
        stream,
        exec,
    )
}

/// Recomputes `ε̂_τ − Σ_j φ_j ε̂_{τ−lag_j}` for a contiguous forecast path; used
/// to check that a draw's injected innovations are recovered.
pub fn innovations_of_path(eps: &[f64], phi: &DVector<f64>, lags: &LagSet) -> Vec<f64> {
    let m = lags.max_lag();
    (m..eps.len())
        .map(|i| eps[i] - lags.lags().iter().zip(phi.iter()).map(|(&l, &p)| p * eps[i - l]).sum::<f64>())
        .collect()
}
