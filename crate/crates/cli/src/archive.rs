//! On-disk layout of a fitted run.
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | configuration as run, with command-line overrides applied |
//! | `data.csv` | the input data, byte for byte |
//! | `kept_rows.csv` | per input row: `time`, `kept` (complete), `target` (used as a regression target) |
//! | `beta.csv`, `phi.csv`, `sigma2.csv`, `lambda.csv` | one row per retained draw, keyed by `draw` and `chain` |
//! | `eps.csv`, `u.csv` | residual vectors of every `residual_thin`-th draw, one column per time stamp |
//! | `acceptance.csv` | Metropolis–Hastings acceptance per tensor term |
//! | `seed.json` | seed, chains and iteration counts |
//! | `summary.csv` | posterior mean, sd and quantiles of every scalar parameter |
//!
//! `forecast` and `diagnose` add their tables to the same directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use psar::design::{build_ledger, design_from_ledger, drop_incomplete_rows, Dataset};
use psar::diagnostics::Summary;
use psar::sampler::{Acceptance, Draw, Fit, PosteriorDraws, ResidualDraw, Sampler};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::io::{load_dataset, num, Table};

pub const CONFIG: &str = "config.toml";
pub const DATA: &str = "data.csv";
pub const SEED: &str = "seed.json";
pub const ERROR: &str = "error.json";
/// Draw tables compared by the determinism check.
pub const DRAW_TABLES: [&str; 6] = ["beta.csv", "phi.csv", "sigma2.csv", "lambda.csv", "eps.csv", "u.csv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub residual_thin: usize,
    pub draws: usize,
}

/// A completed fit directory.
#[derive(Debug, Clone)]
pub struct RunArchive {
    pub dir: PathBuf,
}

impl RunArchive {
    /// Opens an archive, failing unless a fit completed there.
    pub fn open(dir: &Path) -> CliResult<RunArchive> {
        for f in [CONFIG, DATA, SEED] {
            if !dir.join(f).is_file() {
                return Err(CliError::archive(dir, format!("missing {f}; is this a completed fit?")));
            }
        }
        Ok(RunArchive { dir: dir.to_path_buf() })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn config(&self) -> CliResult<Config> {
        Config::load(&self.path(CONFIG))
    }

    pub fn seed_record(&self) -> CliResult<SeedRecord> {
        let p = self.path(SEED);
        let text = fs::read_to_string(&p).map_err(|e| CliError::file(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::file(&p, e))
    }

    pub fn dataset(&self, cfg: &Config) -> CliResult<Dataset> {
        load_dataset(&self.path(DATA), &cfg.data, &cfg.covariates())
    }

    /// Rebuilds the fit from the stored draws without rerunning the sampler.
    pub fn load_fit(&self) -> CliResult<(Config, Dataset, Fit)> {
        let cfg = self.config()?;
        let data = self.dataset(&cfg)?;
        let (kept, target_mask) = drop_incomplete_rows(&data, &cfg.model.lags)?;
        let ledger = build_ledger(&cfg.model, &kept)?;
        let design = design_from_ledger(&cfg.model, ledger, &kept)?;
        let sampler = Sampler::new(cfg.model.clone(), design, kept.time_index())?;
        let draws = self.read_draws(&sampler, &kept)?;
        let fit = Fit {
            data: kept,
            target_mask,
            sampler,
            draws,
        };
        Ok((cfg, data, fit))
    }

    fn table(&self, file: &str) -> CliResult<(PathBuf, Table)> {
        let p = self.path(file);
        let t = Table::read(&p)?;
        Ok((p, t))
    }

    fn read_draws(&self, sampler: &Sampler, kept: &Dataset) -> CliResult<PosteriorDraws> {
        let rec = self.seed_record()?;
        let ledger = sampler.ledger();
        let (bp, beta) = self.table("beta.csv")?;
        let (pp, phi) = self.table("phi.csv")?;
        let (sp, sigma2) = self.table("sigma2.csv")?;
        let (lp, lambda) = self.table("lambda.csv")?;
        let n = beta.rows.len();
        for (p, t, w) in [
            (&bp, &beta, ledger.num_columns),
            (&pp, &phi, sampler.spec().lags.len()),
            (&sp, &sigma2, 1),
            (&lp, &lambda, ledger.num_lambdas),
        ] {
            if t.rows.len() != n || t.header.len() != w + 2 {
                return Err(CliError::archive(p, "draw table does not match the configuration"));
            }
        }
        let values = |p: &Path, t: &Table| -> CliResult<Vec<Vec<f64>>> {
            let cols = t.header[2..]
                .iter()
                .map(|h| t.numeric_column(p, h, &[]))
                .collect::<CliResult<Vec<_>>>()?;
            Ok((0..t.rows.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
        };
        let (b, f, s, l) = (values(&bp, &beta)?, values(&pp, &phi)?, values(&sp, &sigma2)?, values(&lp, &lambda)?);
        let chain = beta
            .numeric_column(&bp, "chain", &[])?
            .into_iter()
            .map(|c| c as usize)
            .collect();
        let draws = (0..n)
            .map(|i| Draw {
                beta: DVector::from_vec(b[i].clone()),
                sigma2: s[i][0],
                phi: DVector::from_vec(f[i].clone()),
                lambdas: l[i].clone(),
            })
            .collect();
        let (ep, eps) = self.table("eps.csv")?;
        let (up, u) = self.table("u.csv")?;
        if eps.header.len() != kept.len() + 1 || u.header.len() != sampler.lag_structure().len() + 1 {
            return Err(CliError::archive(&ep, "residual tables do not match the data"));
        }
        let (ev, uv) = (values_after_draw(&ep, &eps)?, values_after_draw(&up, &u)?);
        let idx = eps.numeric_column(&ep, "draw", &[])?;
        let residuals = idx
            .iter()
            .zip(ev)
            .zip(uv)
            .map(|((&d, e), u)| ResidualDraw {
                draw: d as usize,
                eps: DVector::from_vec(e),
                u: DVector::from_vec(u),
            })
            .collect();
        let (ap, acc) = self.table("acceptance.csv")?;
        let accepted = acc.numeric_column(&ap, "accepted", &[])?;
        let proposed = acc.numeric_column(&ap, "proposed", &[])?;
        let acceptance = acc
            .rows
            .iter()
            .zip(accepted.iter().zip(&proposed))
            .map(|(r, (&a, &p))| {
                (
                    r[0].clone(),
                    Acceptance {
                        accepted: a as usize,
                        proposed: p as usize,
                    },
                )
            })
            .collect();
        Ok(PosteriorDraws {
            chain,
            draws,
            residuals,
            acceptance,
            lambda_labels: lambda.header[2..].to_vec(),
            burn_in: rec.burn_in,
            iterations: rec.iterations,
            seed: rec.seed,
        })
    }
}

fn values_after_draw(p: &Path, t: &Table) -> CliResult<Vec<Vec<f64>>> {
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r[1..]
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    c.parse::<f64>().map_err(|_| CliError::Cell {
                        path: p.to_path_buf(),
                        row: i + 1,
                        column: t.header[j + 1].clone(),
                        message: format!("cannot parse {c:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

fn draw_table(header: Vec<String>, draws: &PosteriorDraws, row: impl Fn(&Draw) -> Vec<f64>) -> Table {
    let mut t = Table::new(["draw".to_string(), "chain".to_string()].into_iter().chain(header));
    for (i, d) in draws.draws.iter().enumerate() {
        let mut r = vec![i.to_string(), draws.chain[i].to_string()];
        r.extend(row(d).into_iter().map(num));
        t.push(r);
    }
    t
}

fn summary_row(t: &mut Table, name: &str, values: &[f64]) {
    let s = Summary::of(values);
    t.push(vec![name.to_string(), num(s.mean), num(s.sd), num(s.q025), num(s.q50), num(s.q975)]);
}

pub const SUMMARY_HEADER: [&str; 6] = ["name", "mean", "sd", "q025", "q50", "q975"];

/// Writes a fit archive: everything goes to a temporary sibling directory that
/// is renamed over `out` once complete.
pub fn write_fit_archive(out: &Path, config_text: &str, data_bytes: &[u8], input: &Dataset, fit: &Fit) -> CliResult<RunArchive> {
    if out.is_file() {
        return Err(CliError::file(out, "output path is a file"));
    }
    let tmp = crate::io::tmp_sibling(out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::file(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| CliError::file(&tmp, e))?;
    let put = |name: &str, bytes: &[u8]| fs::write(tmp.join(name), bytes).map_err(|e| CliError::file(tmp.join(name), e));
    put(CONFIG, config_text.as_bytes())?;
    put(DATA, data_bytes)?;

    let draws = &fit.draws;
    let spec = fit.spec();
    let ledger = fit.ledger();

    let kept_times = fit.data.time_index();
    let mut kept = Table::new(["time", "kept", "target"]);
    for (i, &t) in input.time_index().iter().enumerate() {
        let k = kept_times.binary_search(&t).is_ok();
        kept.push(vec![t.to_string(), (k as u8).to_string(), (fit.target_mask[i] as u8).to_string()]);
    }
    kept.write(&tmp.join("kept_rows.csv"))?;

    draw_table(ledger.column_labels.clone(), draws, |d| d.beta.as_slice().to_vec()).write(&tmp.join("beta.csv"))?;
    let phi_names = spec.lags.lags().iter().map(|l| format!("phi_lag{l}")).collect();
    draw_table(phi_names, draws, |d| d.phi.as_slice().to_vec()).write(&tmp.join("phi.csv"))?;
    draw_table(vec!["sigma2".into()], draws, |d| vec![d.sigma2]).write(&tmp.join("sigma2.csv"))?;
    draw_table(draws.lambda_labels.clone(), draws, |d| d.lambdas.clone()).write(&tmp.join("lambda.csv"))?;

    let target_times: Vec<i64> = fit.sampler.lag_structure().targets.iter().map(|&r| kept_times[r]).collect();
    for (name, times, pick) in [
        ("eps.csv", kept_times, true),
        ("u.csv", target_times.as_slice(), false),
    ] {
        let mut t = Table::new(std::iter::once("draw".to_string()).chain(times.iter().map(|t| t.to_string())));
        for r in &draws.residuals {
            let v = if pick { &r.eps } else { &r.u };
            t.push(std::iter::once(r.draw.to_string()).chain(v.iter().map(|&x| num(x))).collect());
        }
        t.write(&tmp.join(name))?;
    }

    let mut acc = Table::new(["term", "accepted", "proposed", "rate"]);
    for (name, a) in &draws.acceptance {
        acc.push(vec![name.clone(), a.accepted.to_string(), a.proposed.to_string(), num(a.rate())]);
    }
    acc.write(&tmp.join("acceptance.csv"))?;

    let mut summary = Table::new(SUMMARY_HEADER);
    for (j, label) in ledger.column_labels.iter().enumerate() {
        let v: Vec<f64> = draws.draws.iter().map(|d| d.beta[j]).collect();
        summary_row(&mut summary, label, &v);
    }
    for (j, l) in spec.lags.lags().iter().enumerate() {
        let v: Vec<f64> = draws.draws.iter().map(|d| d.phi[j]).collect();
        summary_row(&mut summary, &format!("phi_lag{l}"), &v);
    }
    let v: Vec<f64> = draws.draws.iter().map(|d| d.sigma2).collect();
    summary_row(&mut summary, "sigma2", &v);
    for (j, label) in draws.lambda_labels.iter().enumerate() {
        let v: Vec<f64> = draws.draws.iter().map(|d| d.lambdas[j]).collect();
        summary_row(&mut summary, &format!("lambda:{label}"), &v);
    }
    summary.write(&tmp.join("summary.csv"))?;

    let rec = SeedRecord {
        seed: spec.mcmc.seed,
        chains: spec.mcmc.chains,
        iterations: spec.mcmc.iterations,
        burn_in: spec.mcmc.burn_in,
        residual_thin: spec.mcmc.residual_thin,
        draws: draws.len(),
    };
    put(SEED, serde_json::to_string_pretty(&rec).expect("seed record serializes").as_bytes())?;

    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| CliError::file(out, e))?;
    }
    fs::rename(&tmp, out).map_err(|e| CliError::file(out, e))?;
    Ok(RunArchive { dir: out.to_path_buf() })
}
