//! The four subcommands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use psar::design::Dataset;
use psar::diagnostics::{
    acf, dic, effective_df, kolmogorov_p_value, ks_statistic, marginal_effect, pit, quantile, residual_covariance,
    sharpness_of, MarginalEffect, Summary,
};
use psar::forecast::{forecast, rolling_forecast_study, History};
use psar::numerics::RngStream;
use psar::par::Execution;
use psar::sampler::fit;

use crate::archive::{write_fit_archive, RunArchive, SUMMARY_HEADER};
use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::io::{load_dataset, num, Table};
use crate::simulate::simulate;

/// Substream of the run seed used by one-off forecasts; rolling forecasts
/// use `1 << 32 | day`.
pub const FORECAST_STREAM: u64 = 1 << 33;

pub fn cmd_simulate(cycles: usize, seed: u64, out: &Path) -> CliResult<()> {
    let s = simulate(cycles, seed)?;
    let mut t = Table::new(["time", "response", "x", "y", "t", "mu", "f_xy", "f_t", "eps", "u"]);
    let d = &s.data;
    let (x, y, h) = (d.covariate("x").unwrap(), d.covariate("y").unwrap(), d.covariate("t").unwrap());
    for i in 0..d.len() {
        t.push(vec![
            d.time_index()[i].to_string(),
            num(d.response()[i]),
            num(x[i]),
            num(y[i]),
            num(h[i]),
            num(s.mu[i]),
            num(s.surface[i]),
            num(s.daily[i]),
            num(s.eps[i]),
            num(s.u[i]),
        ]);
    }
    t.write(out)
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub chains: Option<usize>,
}

pub fn cmd_fit(args: &FitArgs, exec: Execution) -> CliResult<RunArchive> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::file(&args.config, e))?;
    let snapshot = Config::snapshot(&text, args.seed, args.chains)?;
    let cfg = Config::from_toml(&snapshot)?;
    cfg.validate()?;
    let bytes = fs::read(&args.data).map_err(|e| CliError::file(&args.data, e))?;
    let data = load_dataset(&args.data, &cfg.data, &cfg.covariates())?;
    log::info!(
        "fitting {} rows, {} iterations x {} chains, seed {}",
        data.len(),
        cfg.model.mcmc.iterations,
        cfg.model.mcmc.chains,
        cfg.model.mcmc.seed
    );
    let f = fit(&cfg.model, &data, exec)?;
    write_fit_archive(&args.out, &snapshot, &bytes, &data, &f)
}

/// Calibration of a set of predictive distributions against observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub n: usize,
    /// Share of observations inside the central 95% predictive interval.
    pub coverage: f64,
    /// KS statistic of the PIT values against Uniform(0, 1).
    pub ks: f64,
    pub ks_p_value: f64,
    pub mean_sharpness: f64,
}

pub fn calibration(predictive: &[Vec<f64>], observed: &[f64]) -> CliResult<Calibration> {
    let p = pit(predictive, observed, 10, 0)?;
    let inside = predictive
        .iter()
        .zip(observed)
        .filter(|(s, &o)| quantile(s, 0.025) <= o && o <= quantile(s, 0.975))
        .count();
    let mut v = p.values.clone();
    let ks = ks_statistic(&mut v, |x| x.clamp(0.0, 1.0));
    Ok(Calibration {
        n: observed.len(),
        coverage: inside as f64 / observed.len() as f64,
        ks,
        ks_p_value: kolmogorov_p_value(ks, observed.len()),
        mean_sharpness: sharpness_of(predictive)?.summary.mean,
    })
}

fn calibration_row(label: String, c: &Calibration) -> Vec<String> {
    vec![
        label,
        c.n.to_string(),
        num(c.coverage),
        num(c.ks),
        num(c.ks_p_value),
        num(c.mean_sharpness),
    ]
}

const CALIBRATION_HEADER: [&str; 6] = ["lead", "n", "coverage95", "ks_statistic", "ks_p_value", "mean_sharpness"];

#[derive(Debug, Clone)]
pub struct ForecastArgs {
    pub archive: PathBuf,
    pub future_data: PathBuf,
    /// Run the refit-and-forecast study over the archived and future data
    /// instead of one forecast from the archived fit.
    pub rolling: bool,
}

#[derive(Debug, Clone)]
pub struct ForecastOutcome {
    pub table: PathBuf,
    /// Per lead, over targets with an observed response.
    pub calibration: Vec<(i64, Calibration)>,
}

fn concat(a: &Dataset, b: &Dataset) -> CliResult<Dataset> {
    let mut t = a.time_index().to_vec();
    t.extend_from_slice(b.time_index());
    let mut y = a.response().to_vec();
    y.extend_from_slice(b.response());
    let covs = a
        .covariate_names()
        .map(|n| {
            let mut c = a.covariate(n).unwrap().to_vec();
            c.extend_from_slice(b.covariate(n).unwrap());
            (n.to_string(), c)
        })
        .collect();
    Ok(Dataset::new(t, y, covs)?)
}

pub fn cmd_forecast(args: &ForecastArgs, exec: Execution) -> CliResult<ForecastOutcome> {
    let archive = RunArchive::open(&args.archive)?;
    let (cfg, data, fit) = archive.load_fit()?;
    let future = load_dataset(&args.future_data, &cfg.data, &cfg.covariates())?;
    let last = *data.time_index().last().expect("archived data is non-empty");
    if future.time_index().first().is_some_and(|&t| t <= last) {
        return Err(CliError::file(&args.future_data, "future data must start after the archived data"));
    }
    if args.rolling {
        return rolling(&archive, &cfg, &concat(&data, &future)?, exec);
    }
    let spec = fit.spec();
    let h = cfg.forecast.residual_history as i64;
    let hist = data.before(last + 1);
    let rows: Vec<usize> = hist
        .complete_rows()
        .into_iter()
        .filter(|&i| hist.time_index()[i] > last - h)
        .collect();
    let hist = hist.select_rows(&rows);
    let future = future.select_rows(&future.covariates_complete_rows());
    if future.is_empty() {
        return Err(CliError::file(&args.future_data, "no rows with complete covariates"));
    }
    let ledger = fit.ledger();
    let hx = ledger.design_matrix(&hist)?;
    let hy = spec.response_transform.apply(hist.response())?;
    let fx = ledger.design_matrix(&future)?;
    let fd = forecast(
        &fit.draws,
        &spec.lags,
        &History {
            times: hist.time_index(),
            x: &hx,
            y: &hy,
        },
        future.time_index(),
        &fx,
        last + 1,
        RngStream::new(spec.mcmc.seed, 0).substream(FORECAST_STREAM),
        exec,
    )?;
    let observed = spec.response_transform.apply(future.response())?;
    let mut t = Table::new([
        "time", "lead", "mean", "sd", "q025", "q50", "q975", "mu_mean", "eps_mean", "observed", "pit",
    ]);
    let mut obs_pred = Vec::new();
    let mut obs = Vec::new();
    for j in 0..fd.len() {
        let s = fd.summary(j);
        let n = fd.samples[j].len() as f64;
        let p = if observed[j].is_finite() {
            obs_pred.push(fd.samples[j].clone());
            obs.push(observed[j]);
            psar::diagnostics::ecdf(&fd.samples[j], observed[j])
        } else {
            f64::NAN
        };
        t.push(vec![
            fd.times[j].to_string(),
            fd.leads[j].to_string(),
            num(s.mean),
            num(s.sd),
            num(s.q025),
            num(s.q50),
            num(s.q975),
            num(fd.mu[j].iter().sum::<f64>() / n),
            num(fd.eps[j].iter().sum::<f64>() / n),
            num(observed[j]),
            num(p),
        ]);
    }
    let table = archive.path("forecast.csv");
    t.write(&table)?;
    let mut calib = Vec::new();
    if !obs.is_empty() {
        let c = calibration(&obs_pred, &obs)?;
        let mut s = Table::new(CALIBRATION_HEADER);
        s.push(calibration_row("all".into(), &c));
        s.write(&archive.path("forecast_summary.csv"))?;
        calib.push((0, c));
    }
    Ok(ForecastOutcome { table, calibration: calib })
}

fn rolling(archive: &RunArchive, cfg: &Config, data: &Dataset, exec: Execution) -> CliResult<ForecastOutcome> {
    let study = rolling_forecast_study(&cfg.model, data, &cfg.forecast, exec)?;
    let observed = cfg.model.response_transform.apply(data.response())?;
    let times = data.time_index();
    let mut t = Table::new([
        "time", "lead", "issue_day", "mean", "q025", "q975", "mu_mean", "eps_mean", "observed", "pit",
    ]);
    let mut by_lead: Vec<(i64, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
    for r in &study.records {
        let o = times.binary_search(&r.time).map_or(f64::NAN, |i| observed[i]);
        let s = Summary::of(&r.samples);
        let p = if o.is_finite() { psar::diagnostics::ecdf(&r.samples, o) } else { f64::NAN };
        t.push(vec![
            r.time.to_string(),
            r.lead.to_string(),
            r.issue_day.to_string(),
            num(s.mean),
            num(s.q025),
            num(s.q975),
            num(r.mu_mean),
            num(r.eps_mean),
            num(o),
            num(p),
        ]);
        if o.is_finite() {
            let lead = r.lead as i64;
            let slot = match by_lead.iter().position(|(l, ..)| *l == lead) {
                Some(i) => i,
                None => {
                    by_lead.push((lead, vec![], vec![]));
                    by_lead.len() - 1
                }
            };
            by_lead[slot].1.push(r.samples.clone());
            by_lead[slot].2.push(o);
        }
    }
    let table = archive.path("rolling.csv");
    t.write(&table)?;
    let mut s = Table::new(CALIBRATION_HEADER);
    let mut calib = Vec::new();
    for (lead, pred, obs) in by_lead {
        let c = calibration(&pred, &obs)?;
        s.push(calibration_row(lead.to_string(), &c));
        calib.push((lead, c));
    }
    s.write(&archive.path("rolling_summary.csv"))?;
    let mut refits = Table::new(["issue_day"]);
    for d in &study.refit_days {
        refits.push(vec![d.to_string()]);
    }
    refits.write(&archive.path("rolling_refits.csv"))?;
    Ok(ForecastOutcome { table, calibration: calib })
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub archive: PathBuf,
    /// Marginal effect of this term only; every smooth term when `None`.
    pub term: Option<String>,
    /// Grid points per covariate axis.
    pub grid: usize,
    /// Number of regression targets in the residual-covariance window.
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutcome {
    pub edf: psar::diagnostics::EdfReport,
    pub dic: psar::diagnostics::Dic,
    /// Mean absolute off-diagonal covariance of ε and of u.
    pub residual_covariance: (f64, f64),
    pub effects: Vec<MarginalEffect>,
}

pub fn cmd_diagnose(args: &DiagnoseArgs, exec: Execution) -> CliResult<DiagnoseOutcome> {
    let archive = RunArchive::open(&args.archive)?;
    let (_, _, fit) = archive.load_fit()?;
    let draws = &fit.draws;
    let design = fit.design();

    let edf = effective_df(draws, &design.x, fit.ledger(), exec)?;
    let mut t = Table::new(SUMMARY_HEADER);
    for term in edf.terms.iter().chain(std::iter::once(&edf.total)) {
        let s = term.summary;
        t.push(vec![term.name.clone(), num(s.mean), num(s.sd), num(s.q025), num(s.q50), num(s.q975)]);
    }
    t.write(&archive.path("edf.csv"))?;

    let lags = fit.sampler.lag_structure();
    let d = dic(draws, &design.x, &design.y, lags)?;
    let mut t = Table::new(["dic", "p_d", "mean_deviance", "deviance_at_mean", "edf_total"]);
    t.push(vec![num(d.dic), num(d.p_d), num(d.mean_deviance), num(d.deviance_at_mean), num(edf.total.summary.mean)]);
    t.write(&archive.path("dic.csv"))?;

    let mean_of = |pick: &dyn Fn(&psar::sampler::ResidualDraw) -> &nalgebra::DVector<f64>| -> Vec<f64> {
        let n = draws.residuals.len() as f64;
        let len = draws.residuals.first().map_or(0, |r| pick(r).len());
        (0..len).map(|i| draws.residuals.iter().map(|r| pick(r)[i]).sum::<f64>() / n).collect()
    };
    let (eps, u) = (mean_of(&|r| &r.eps), mean_of(&|r| &r.u));
    let max_lag = 672.min(u.len().saturating_sub(2));
    let mut t = Table::new(["lag", "eps", "u", "band"]);
    if !draws.residuals.is_empty() {
        let (ae, au) = (acf(&eps, max_lag)?, acf(&u, max_lag)?);
        for k in 0..=max_lag {
            t.push(vec![k.to_string(), num(ae.values[k]), num(au.values[k]), num(au.band)]);
        }
    }
    t.write(&archive.path("acf.csv"))?;

    let w = args.window.min(lags.len());
    let rc = residual_covariance(draws, &lags.targets, 0..w)?;
    let (ce, cu) = rc.mean_abs_off_diagonal();
    let mut t = Table::new(["window", "eps_mean_abs_off_diagonal", "u_mean_abs_off_diagonal"]);
    t.push(vec![w.to_string(), num(ce), num(cu)]);
    t.write(&archive.path("residual_covariance.csv"))?;
    for (name, m) in [("residual_covariance_eps.csv", &rc.eps), ("residual_covariance_u.csv", &rc.u)] {
        let mut t = Table::new((0..m.ncols()).map(|j| format!("c{j}")));
        for r in m.row_iter() {
            t.push(r.iter().map(|&v| num(v)).collect());
        }
        t.write(&archive.path(name))?;
    }

    let terms: Vec<String> = match &args.term {
        Some(t) => vec![t.clone()],
        None => fit
            .ledger()
            .blocks
            .iter()
            .filter(|b| b.kind != "intercept")
            .map(|b| b.name.clone())
            .collect(),
    };
    let mut effects = Vec::new();
    for term in terms {
        let me = marginal_effect(draws, fit.ledger(), &fit.data, &term, args.grid, None)?;
        let mut t = Table::new(me.covariates.iter().cloned().chain(["mean", "q025", "q975"].map(String::from)));
        for (i, g) in me.grid.iter().enumerate() {
            t.push(g.iter().map(|&v| num(v)).chain([num(me.mean[i]), num(me.lower[i]), num(me.upper[i])]).collect());
        }
        t.write(&archive.path(&format!("effect_{term}.csv")))?;
        effects.push(me);
    }
    Ok(DiagnoseOutcome {
        edf,
        dic: d,
        residual_covariance: (ce, cu),
        effects,
    })
}
