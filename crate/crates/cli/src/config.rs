//! Run configuration: a TOML file with `[data]`, `[model]` and an optional
//! `[forecast]` table.
//!
//! ```toml
//! [data]
//! time = "time"
//! response = "response"
//! time_step = 1
//!
//! [model]
//! lags = [1]
//!
//! [[model.terms]]
//! kind = "intercept"
//! name = "intercept"
//!
//! [[model.terms]]
//! kind = "cyclic_bspline"
//! name = "daily"
//! covariate = "t"
//! basis_size = 6
//! period = 24.0
//!
//! [model.mcmc]
//! iterations = 5000
//! burn_in = 500
//! seed = 1
//! ```

use std::path::Path;

use psar::design::ModelSpec;
use psar::forecast::RollingProtocol;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Column holding integer time stamps.
    pub time: String,
    pub response: String,
    /// Spacing of the time stamps; every stamp must be a multiple of it.
    #[serde(default = "one")]
    pub time_step: i64,
    /// Cell contents read as missing.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    /// Covariate columns to load; defaults to those the model terms use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
}

fn one() -> i64 {
    1
}

pub fn default_missing() -> Vec<String> {
    vec!["NaN".into(), "NA".into(), String::new()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub forecast: RollingProtocol,
}

impl Config {
    pub fn from_toml(text: &str) -> CliResult<Config> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string()]))
    }

    /// Parses and validates, reporting every problem at once.
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration text with `model.mcmc.seed` and `model.mcmc.chains`
    /// overridden where given. Everything else is kept as written.
    pub fn snapshot(text: &str, seed: Option<u64>, chains: Option<usize>) -> CliResult<String> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(vec![e.message().to_string()]))?;
        if seed.is_some() || chains.is_some() {
            let model = table_entry(&mut doc, "model")?;
            let mcmc = table_entry(model, "mcmc")?;
            if let Some(s) = seed {
                let s = i64::try_from(s).map_err(|_| CliError::Config(vec![format!("seed {s} exceeds the TOML integer range")]))?;
                mcmc.insert("seed".into(), toml::Value::Integer(s));
            }
            if let Some(c) = chains {
                mcmc.insert("chains".into(), toml::Value::Integer(c as i64));
            }
        }
        Ok(toml::to_string(&doc).expect("a parsed table serializes"))
    }

    pub fn covariates(&self) -> Vec<String> {
        match &self.data.covariates {
            Some(c) => c.clone(),
            None => self.model.covariates().into_iter().map(String::from).collect(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.model.problems().into_iter().map(|s| format!("model: {s}")).collect();
        p.extend(self.forecast.problems(&self.model.lags).into_iter().map(|s| format!("forecast: {s}")));
        let d = &self.data;
        if d.time_step < 1 {
            p.push("data.time_step must be at least 1".into());
        }
        if d.time == d.response {
            p.push("data.time and data.response name the same column".into());
        }
        let covs = self.covariates();
        for c in &covs {
            if *c == d.time || *c == d.response {
                p.push(format!("data.covariates: {c} is also the time or response column"));
            }
        }
        if d.covariates.is_some() {
            for c in self.model.covariates() {
                if !covs.iter().any(|x| x == c) {
                    p.push(format!("data.covariates does not list {c}, which a model term uses"));
                }
            }
        }
        p
    }

    pub fn validate(&self) -> CliResult<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }
}

fn table_entry<'a>(t: &'a mut toml::Table, key: &str) -> CliResult<&'a mut toml::Table> {
    t.entry(key)
        .or_insert_with(|| toml::Value::Table(Default::default()))
        .as_table_mut()
        .ok_or_else(|| CliError::Config(vec![format!("{key} must be a table")]))
}
