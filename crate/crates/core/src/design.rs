//! Model specification, datasets, and the stacked design matrix with its
//! block ledger and block-diagonal prior precision.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{
    self, BasisMatrix, FactorPrecision, FactorSpec, FourierSpec, KnotGrid, PenaltyMatrix,
    TensorPenaltyPair, ThinPlateSpec,
};
use crate::error::{Error, Result};

/// Time-indexed observations. Missing values are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    time_index: Vec<i64>,
    response: Vec<f64>,
    covariates: Vec<(String, Vec<f64>)>,
}

impl Dataset {
    pub fn new(time_index: Vec<i64>, response: Vec<f64>, covariates: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = time_index.len();
        if response.len() != n {
            return Err(Error::Shape(format!(
                "response has {} rows, time index has {n}",
                response.len()
            )));
        }
        for (name, col) in &covariates {
            if col.len() != n {
                return Err(Error::Shape(format!(
                    "covariate {name} has {} rows, time index has {n}",
                    col.len()
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &covariates {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate covariate {name}")));
            }
        }
        if let Some(i) = (1..n).find(|&i| time_index[i] <= time_index[i - 1]) {
            return Err(Error::Data(format!(
                "time index not strictly increasing at row {i} ({} after {})",
                time_index[i],
                time_index[i - 1]
            )));
        }
        Ok(Self {
            time_index,
            response,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.time_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_index.is_empty()
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.iter().map(|(n, _)| n.as_str())
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            time_index: rows.iter().map(|&r| self.time_index[r]).collect(),
            response: rows.iter().map(|&r| self.response[r]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r]).collect()))
                .collect(),
        }
    }

    /// Keeps only the named covariates.
    pub fn select_covariates(&self, names: &[&str]) -> Result<Dataset> {
        let covariates = names
            .iter()
            .map(|&n| {
                self.covariate(n)
                    .map(|c| (n.to_string(), c.to_vec()))
                    .ok_or_else(|| Error::Config(format!("unknown covariate {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            time_index: self.time_index.clone(),
            response: self.response.clone(),
            covariates,
        })
    }

    /// Rows with time index strictly below `t`.
    pub fn before(&self, t: i64) -> Dataset {
        let n = self.time_index.partition_point(|&x| x < t);
        self.select_rows(&(0..n).collect::<Vec<_>>())
    }

    fn row_complete(&self, i: usize) -> bool {
        self.response[i].is_finite() && self.covariates_complete(i)
    }

    fn covariates_complete(&self, i: usize) -> bool {
        self.covariates.iter().all(|(_, c)| c[i].is_finite())
    }

    /// Rows with a finite response and finite covariates.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.row_complete(i)).collect()
    }

    /// Rows whose covariates are all finite; the response may be missing.
    pub fn covariates_complete_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.covariates_complete(i)).collect()
    }
}

/// Autoregressive lags, strictly increasing and positive. May be empty for a
/// model with independent errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LagSet {
    lags: Vec<usize>,
}

impl LagSet {
    pub fn new(lags: Vec<usize>) -> Result<Self> {
        if lags.contains(&0) {
            return Err(Error::Config("lags must be at least 1".into()));
        }
        if lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "lags must be distinct and increasing, got {lags:?}"
            )));
        }
        Ok(Self { lags })
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn max_lag(&self) -> usize {
        self.lags.last().copied().unwrap_or(0)
    }
}

impl TryFrom<Vec<usize>> for LagSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        LagSet::new(v)
    }
}

impl From<LagSet> for Vec<usize> {
    fn from(l: LagSet) -> Self {
        l.lags
    }
}

/// Rows whose lagged values all exist, located by time index rather than by
/// row position so that gaps are handled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LagStructure {
    /// Row of each regression target.
    pub targets: Vec<usize>,
    /// `lag_rows[r][j]` is the row holding lag `j` of target `r`.
    pub lag_rows: Vec<Vec<usize>>,
}

impl LagStructure {
    pub fn from_time_index(time_index: &[i64], lags: &LagSet) -> Self {
        let pos: HashMap<i64, usize> = time_index.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut targets = Vec::new();
        let mut lag_rows = Vec::new();
        for (i, &t) in time_index.iter().enumerate() {
            let rows: Option<Vec<usize>> = lags
                .lags()
                .iter()
                .map(|&l| pos.get(&(t - l as i64)).copied())
                .collect();
            if let Some(rows) = rows {
                targets.push(i);
                lag_rows.push(rows);
            }
        }
        Self { targets, lag_rows }
    }

    /// Rows `max_lag..n` of a gap-free series.
    pub fn contiguous(n: usize, lags: &LagSet) -> Self {
        let m = lags.max_lag();
        let targets: Vec<usize> = (m.min(n)..n).collect();
        let lag_rows = targets
            .iter()
            .map(|&i| lags.lags().iter().map(|&l| i - l).collect())
            .collect();
        Self { targets, lag_rows }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Drops rows with a missing response or covariate, and flags the rows that
/// can act as regression targets (their own values and every lagged response
/// are present).
///
/// Returns the complete rows (lag-support rows included) and a mask over the
/// input rows marking the targets.
pub fn drop_incomplete_rows(data: &Dataset, lags: &LagSet) -> Result<(Dataset, Vec<bool>)> {
    let complete = data.complete_rows();
    let kept = data.select_rows(&complete);
    let structure = LagStructure::from_time_index(kept.time_index(), lags);
    let mut mask = vec![false; data.len()];
    for &r in &structure.targets {
        mask[complete[r]] = true;
    }
    if kept.len() < lags.max_lag() + 1 || structure.is_empty() {
        return Err(Error::Data(format!(
            "only {} usable rows ({} complete) remain for lags {:?}",
            structure.len(),
            kept.len(),
            lags.lags()
        )));
    }
    Ok((kept, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseTransform {
    Log,
    #[default]
    Identity,
}

impl ResponseTransform {
    pub fn apply(self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            ResponseTransform::Identity => Ok(y.to_vec()),
            ResponseTransform::Log => y
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v > 0.0 {
                        Ok(v.ln())
                    } else {
                        Err(Error::Domain(format!("cannot log-transform response {v} at row {i}")))
                    }
                })
                .collect(),
        }
    }
}

fn default_order() -> usize {
    2
}

fn default_penalty_order() -> usize {
    2
}

fn default_factor_precision() -> FactorPrecisionSpec {
    FactorPrecisionSpec::Iid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorPrecisionSpec {
    Iid,
    Penalty,
}

/// One additive term of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    Intercept {
        name: String,
    },
    Bspline {
        name: String,
        covariate: String,
        basis_size: usize,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_penalty_order")]
        penalty_order: usize,
        /// Covariate range spanned by the knots; defaults to the data range.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        range: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_scale: Option<f64>,
    },
    CyclicBspline {
        name: String,
        covariate: String,
        basis_size: usize,
        period: f64,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_penalty_order")]
        penalty_order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_scale: Option<f64>,
    },
    Tensor {
        name: String,
        covariates: [String; 2],
        basis_size: [usize; 2],
        #[serde(default = "default_pair_order")]
        order: [usize; 2],
        #[serde(default = "default_pair_order")]
        penalty_order: [usize; 2],
        /// Per-axis period; `None` for an open axis.
        #[serde(default)]
        period: [Option<f64>; 2],
        #[serde(default)]
        range: [Option<[f64; 2]>; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_scale: Option<f64>,
    },
    ThinPlate {
        name: String,
        covariate: String,
        #[serde(default = "one")]
        poly_order: usize,
        #[serde(default = "one_u32")]
        spline_order: u32,
        num_knots: usize,
    },
    Factor {
        name: String,
        covariate: String,
        num_levels: usize,
        #[serde(default = "default_factor_precision")]
        precision: FactorPrecisionSpec,
        #[serde(default = "one")]
        penalty_order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_scale: Option<f64>,
    },
    Fourier {
        name: String,
        covariate: String,
        num_harmonics: usize,
        half_period: f64,
    },
}

fn default_pair_order() -> [usize; 2] {
    [2, 2]
}

fn one() -> usize {
    1
}

fn one_u32() -> u32 {
    1
}

impl TermSpec {
    pub fn name(&self) -> &str {
        match self {
            TermSpec::Intercept { name }
            | TermSpec::Bspline { name, .. }
            | TermSpec::CyclicBspline { name, .. }
            | TermSpec::Tensor { name, .. }
            | TermSpec::ThinPlate { name, .. }
            | TermSpec::Factor { name, .. }
            | TermSpec::Fourier { name, .. } => name,
        }
    }

    pub fn covariates(&self) -> Vec<&str> {
        match self {
            TermSpec::Intercept { .. } => vec![],
            TermSpec::Tensor { covariates, .. } => covariates.iter().map(String::as_str).collect(),
            TermSpec::Bspline { covariate, .. }
            | TermSpec::CyclicBspline { covariate, .. }
            | TermSpec::ThinPlate { covariate, .. }
            | TermSpec::Factor { covariate, .. }
            | TermSpec::Fourier { covariate, .. } => vec![covariate.as_str()],
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            TermSpec::Intercept { .. } => "intercept",
            TermSpec::Bspline { .. } => "bspline",
            TermSpec::CyclicBspline { .. } => "cyclic_bspline",
            TermSpec::Tensor { .. } => "tensor",
            TermSpec::ThinPlate { .. } => "thin_plate",
            TermSpec::Factor { .. } => "factor",
            TermSpec::Fourier { .. } => "fourier",
        }
    }
}

/// Hyperparameters of the conjugate priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Prior mean of every coefficient.
    pub beta_mean: f64,
    /// Prior mean of every AR coefficient.
    pub phi_mean: f64,
    /// `Φ₀ = phi_precision · I`.
    pub phi_precision: f64,
    /// Inverse-gamma shape parameter; `None` means minus the column count of X.
    pub v0: Option<f64>,
    pub delta0: f64,
    /// Rate `b` of the Γ(a, b) prior on each smoothing parameter.
    pub gamma_scale: f64,
    /// Shape `a` of the smoothing-parameter prior.
    pub gamma_shape: f64,
    /// Prior precision of intercept, Fourier and thin-plate columns.
    pub fixed_precision: f64,
    /// Added to the diagonal of every difference penalty.
    pub ridge: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_mean: 0.0,
            phi_mean: 0.0,
            phi_precision: 1e-6,
            v0: None,
            delta0: 0.0,
            gamma_scale: 1.0,
            gamma_shape: 1.0,
            fixed_precision: 1e-6,
            ridge: basis::DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Random-walk step on the log scale for tensor smoothing parameters.
    pub mh_step: f64,
    /// Keep residual vectors for every `residual_thin`-th retained draw.
    pub residual_thin: usize,
    /// Also require every root of the AR polynomial outside the unit circle.
    pub strict_stationarity: bool,
    pub chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 500,
            seed: 1,
            mh_step: 0.5,
            residual_thin: 5,
            strict_stationarity: false,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub lags: LagSet,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub response_transform: ResponseTransform,
}

impl ModelSpec {
    /// Every problem with the specification, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let intercepts = self
            .terms
            .iter()
            .filter(|t| matches!(t, TermSpec::Intercept { .. }))
            .count();
        if intercepts != 1 {
            out.push(format!("model needs exactly one intercept term, found {intercepts}"));
        }
        let mut names = BTreeSet::new();
        for t in &self.terms {
            if !names.insert(t.name()) {
                out.push(format!("duplicate term name {}", t.name()));
            }
            let pfx = format!("term {} ({})", t.name(), t.kind_name());
            match t {
                TermSpec::Intercept { .. } => {}
                TermSpec::Bspline { basis_size, order, penalty_order, range, gamma_scale, .. } => {
                    if *basis_size < order + 1 {
                        out.push(format!("{pfx}: basis_size {basis_size} < order + 1"));
                    }
                    if *penalty_order < 1 || penalty_order >= basis_size {
                        out.push(format!("{pfx}: penalty_order must be in 1..basis_size"));
                    }
                    if let Some([lo, hi]) = range {
                        if !(hi > lo) {
                            out.push(format!("{pfx}: range must satisfy lo < hi"));
                        }
                    }
                    check_scale(&mut out, &pfx, *gamma_scale);
                }
                TermSpec::CyclicBspline { basis_size, period, order, penalty_order, gamma_scale, .. } => {
                    if *basis_size < order + 1 {
                        out.push(format!("{pfx}: basis_size {basis_size} < order + 1"));
                    }
                    if !(*period > 0.0) {
                        out.push(format!("{pfx}: period must be positive"));
                    }
                    if *penalty_order < 1 || penalty_order >= basis_size {
                        out.push(format!("{pfx}: penalty_order must be in 1..basis_size"));
                    }
                    check_scale(&mut out, &pfx, *gamma_scale);
                }
                TermSpec::Tensor { covariates, basis_size, order, penalty_order, period, gamma_scale, .. } => {
                    if covariates[0] == covariates[1] {
                        out.push(format!("{pfx}: needs two distinct covariates"));
                    }
                    for a in 0..2 {
                        if basis_size[a] < order[a] + 1 {
                            out.push(format!("{pfx}: axis {a} basis_size < order + 1"));
                        }
                        if penalty_order[a] < 1 || penalty_order[a] >= basis_size[a] {
                            out.push(format!("{pfx}: axis {a} penalty_order must be in 1..basis_size"));
                        }
                        if let Some(p) = period[a] {
                            if !(p > 0.0) {
                                out.push(format!("{pfx}: axis {a} period must be positive"));
                            }
                        }
                    }
                    check_scale(&mut out, &pfx, *gamma_scale);
                }
                TermSpec::ThinPlate { num_knots, spline_order, .. } => {
                    if *num_knots < 1 {
                        out.push(format!("{pfx}: num_knots must be at least 1"));
                    }
                    if *spline_order < 1 {
                        out.push(format!("{pfx}: spline_order must be at least 1"));
                    }
                }
                TermSpec::Factor { num_levels, precision, penalty_order, gamma_scale, .. } => {
                    if *num_levels < 2 {
                        out.push(format!("{pfx}: needs at least 2 levels"));
                    }
                    if *precision == FactorPrecisionSpec::Penalty
                        && (*penalty_order < 1 || penalty_order >= num_levels)
                    {
                        out.push(format!("{pfx}: penalty_order must be in 1..num_levels"));
                    }
                    check_scale(&mut out, &pfx, *gamma_scale);
                }
                TermSpec::Fourier { num_harmonics, half_period, .. } => {
                    if *num_harmonics < 1 {
                        out.push(format!("{pfx}: num_harmonics must be at least 1"));
                    }
                    if !(*half_period > 0.0) {
                        out.push(format!("{pfx}: half_period must be positive"));
                    }
                }
            }
        }
        let p = &self.priors;
        if !(p.phi_precision > 0.0) {
            out.push("priors.phi_precision must be positive".into());
        }
        if !(p.gamma_scale > 0.0) {
            out.push("priors.gamma_scale must be positive".into());
        }
        if !(p.gamma_shape > 0.0) {
            out.push("priors.gamma_shape must be positive".into());
        }
        if !(p.fixed_precision > 0.0) {
            out.push("priors.fixed_precision must be positive".into());
        }
        if !(0.0..=basis::MAX_RIDGE).contains(&p.ridge) {
            out.push(format!("priors.ridge must lie in [0, {}]", basis::MAX_RIDGE));
        }
        if p.delta0 < 0.0 {
            out.push("priors.delta0 must be non-negative".into());
        }
        let m = &self.mcmc;
        if m.iterations <= m.burn_in {
            out.push(format!(
                "mcmc.iterations ({}) must exceed mcmc.burn_in ({})",
                m.iterations, m.burn_in
            ));
        }
        if !(m.mh_step >= 0.0) {
            out.push("mcmc.mh_step must be non-negative".into());
        }
        if m.residual_thin == 0 {
            out.push("mcmc.residual_thin must be at least 1".into());
        }
        if m.chains == 0 {
            out.push("mcmc.chains must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Covariates referenced by any term, in first-use order.
    pub fn covariates(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.terms
            .iter()
            .flat_map(|t| t.covariates())
            .filter(|c| seen.insert(*c))
            .collect()
    }
}

fn check_scale(out: &mut Vec<String>, pfx: &str, b: Option<f64>) {
    if let Some(b) = b {
        if !(b > 0.0) {
            out.push(format!("{pfx}: gamma_scale must be positive"));
        }
    }
}

/// Basis construction frozen at fit time, reusable on new covariate values.
#[derive(Debug, Clone, PartialEq)]
pub enum TermBasis {
    Intercept,
    Spline(KnotGrid),
    Tensor(KnotGrid, KnotGrid),
    ThinPlate { spec: ThinPlateSpec, knots: Vec<f64> },
    Factor(FactorSpec),
    Fourier(FourierSpec),
}

impl TermBasis {
    /// Evaluates the basis at the given covariate columns (one per covariate
    /// of the term).
    pub fn evaluate(&self, columns: &[&[f64]], n: usize) -> Result<BasisMatrix> {
        match self {
            TermBasis::Intercept => BasisMatrix::new(DMatrix::from_element(n, 1, 1.0), vec!["1".into()], true),
            TermBasis::Spline(g) => basis::bspline_basis(columns[0], g),
            TermBasis::Tensor(g1, g2) => {
                let b1 = basis::bspline_basis(columns[0], g1)?;
                let b2 = basis::bspline_basis(columns[1], g2)?;
                basis::tensor_basis(&b1, &b2)
            }
            TermBasis::ThinPlate { spec, knots } => {
                Ok(basis::thin_plate_with_knots(columns[0], spec, knots.clone())?.basis)
            }
            TermBasis::Factor(spec) => {
                let codes = columns[0]
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if v.fract() == 0.0 {
                            Ok(v as i64)
                        } else {
                            Err(Error::Data(format!("factor code {v} at row {i} is not an integer")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                basis::factor_basis(&codes, spec)
            }
            TermBasis::Fourier(spec) => basis::fourier_basis(columns[0], spec),
        }
    }
}

/// Prior structure of one block of coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockPrior {
    /// Diagonal precision with no smoothing parameter.
    Fixed { precision: f64 },
    /// `λ K` with `λ ~ Γ(a, b)`.
    Penalized {
        penalty: PenaltyMatrix,
        gamma_scale: f64,
        lambda_index: usize,
    },
    /// `λ₁ P₁ + λ₂ P₂` with independent Γ(a, b) priors.
    Tensor {
        pair: TensorPenaltyPair,
        gamma_scale: f64,
        lambda_index: usize,
    },
}

impl BlockPrior {
    pub fn num_lambdas(&self) -> usize {
        match self {
            BlockPrior::Fixed { .. } => 0,
            BlockPrior::Penalized { .. } => 1,
            BlockPrior::Tensor { .. } => 2,
        }
    }

    /// The precision block for the given full smoothing-parameter vector.
    pub fn precision(&self, lambdas: &[f64], dim: usize) -> DMatrix<f64> {
        match self {
            BlockPrior::Fixed { precision } => DMatrix::identity(dim, dim) * *precision,
            BlockPrior::Penalized { penalty, lambda_index, .. } => penalty.values() * lambdas[*lambda_index],
            BlockPrior::Tensor { pair, lambda_index, .. } => {
                pair.combined(lambdas[*lambda_index], lambdas[*lambda_index + 1])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: &'static str,
    pub covariates: Vec<String>,
    pub columns: Range<usize>,
    pub prior: BlockPrior,
    pub unit_row_sums: bool,
    /// Centred each sweep with the shift moved into the intercept.
    pub centered: bool,
    pub basis: TermBasis,
}

impl Block {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Evaluates this block's basis on another dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<BasisMatrix> {
        let cols = self
            .covariates
            .iter()
            .map(|c| {
                data.covariate(c)
                    .ok_or_else(|| Error::Config(format!("unknown covariate {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.basis.evaluate(&cols, data.len())
    }
}

/// Column layout and prior structure of the design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLedger {
    pub blocks: Vec<Block>,
    pub num_columns: usize,
    pub num_lambdas: usize,
    pub intercept_column: usize,
    pub column_labels: Vec<String>,
}

impl BlockLedger {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Evaluates the full design matrix on a dataset.
    pub fn design_matrix(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(data.len(), self.num_columns);
        for b in &self.blocks {
            let bm = b.evaluate(data)?;
            x.columns_mut(b.columns.start, b.width()).copy_from(bm.values());
        }
        Ok(x)
    }

    /// Labels of the smoothing parameters, in λ-vector order.
    pub fn lambda_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.num_lambdas);
        for b in &self.blocks {
            match b.prior {
                BlockPrior::Penalized { .. } => out.push(b.name.clone()),
                BlockPrior::Tensor { .. } => {
                    out.push(format!("{}[{}]", b.name, b.covariates[0]));
                    out.push(format!("{}[{}]", b.name, b.covariates[1]));
                }
                BlockPrior::Fixed { .. } => {}
            }
        }
        out
    }
}

fn covariate_range(name: &str, x: &[f64]) -> Result<(f64, f64)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "covariate {name} has zero variance; a spline term needs a spread of values"
        )));
    }
    Ok((lo, hi))
}

fn axis_grid(
    name: &str,
    x: &[f64],
    size: usize,
    order: usize,
    period: Option<f64>,
    range: Option<[f64; 2]>,
) -> Result<KnotGrid> {
    let (lo, hi) = covariate_range(name, x)?;
    match period {
        Some(p) => KnotGrid::uniform_periodic(p, size, order),
        None => {
            let (lo, hi) = range.map(|[a, b]| (a, b)).unwrap_or((lo, hi));
            KnotGrid::uniform(lo, hi, size, order)
        }
    }
}

fn axis_penalty(size: usize, diff_order: usize, periodic: bool, ridge: f64) -> Result<PenaltyMatrix> {
    if periodic {
        basis::cyclic_difference_penalty(size, diff_order, ridge)
    } else {
        basis::difference_penalty(size, diff_order, ridge)
    }
}

/// Fits knot grids and penalties for every term from the data.
pub fn build_ledger(spec: &ModelSpec, data: &Dataset) -> Result<BlockLedger> {
    spec.validate()?;
    let mut blocks = Vec::with_capacity(spec.terms.len());
    let mut col = 0;
    let mut n_lambda = 0;
    let mut intercept_column = 0;
    let mut labels = Vec::new();
    let p = &spec.priors;
    for term in &spec.terms {
        let covs: Vec<&[f64]> = term
            .covariates()
            .iter()
            .map(|c| {
                data.covariate(c)
                    .ok_or_else(|| Error::Config(format!("term {}: unknown covariate {c}", term.name())))
            })
            .collect::<Result<_>>()?;
        let fixed = BlockPrior::Fixed {
            precision: p.fixed_precision,
        };
        let (basis, prior, centered) = match term {
            TermSpec::Intercept { .. } => {
                intercept_column = col;
                (TermBasis::Intercept, fixed, false)
            }
            TermSpec::Bspline { basis_size, order, penalty_order, range, gamma_scale, .. } => {
                let grid = axis_grid(term.name(), covs[0], *basis_size, *order, None, *range)?;
                let penalty = axis_penalty(*basis_size, *penalty_order, false, p.ridge)?;
                let prior = BlockPrior::Penalized {
                    penalty,
                    gamma_scale: gamma_scale.unwrap_or(p.gamma_scale),
                    lambda_index: n_lambda,
                };
                (TermBasis::Spline(grid), prior, true)
            }
            TermSpec::CyclicBspline { basis_size, period, order, penalty_order, gamma_scale, .. } => {
                let grid = axis_grid(term.name(), covs[0], *basis_size, *order, Some(*period), None)?;
                let penalty = axis_penalty(*basis_size, *penalty_order, true, p.ridge)?;
                let prior = BlockPrior::Penalized {
                    penalty,
                    gamma_scale: gamma_scale.unwrap_or(p.gamma_scale),
                    lambda_index: n_lambda,
                };
                (TermBasis::Spline(grid), prior, true)
            }
            TermSpec::Tensor { covariates, basis_size, order, penalty_order, period, range, gamma_scale, .. } => {
                let g1 = axis_grid(&covariates[0], covs[0], basis_size[0], order[0], period[0], range[0])?;
                let g2 = axis_grid(&covariates[1], covs[1], basis_size[1], order[1], period[1], range[1])?;
                let k1 = axis_penalty(basis_size[0], penalty_order[0], period[0].is_some(), p.ridge)?;
                let k2 = axis_penalty(basis_size[1], penalty_order[1], period[1].is_some(), p.ridge)?;
                let prior = BlockPrior::Tensor {
                    pair: basis::tensor_penalties(&k1, &k2)?,
                    gamma_scale: gamma_scale.unwrap_or(p.gamma_scale),
                    lambda_index: n_lambda,
                };
                (TermBasis::Tensor(g1, g2), prior, true)
            }
            TermSpec::ThinPlate { poly_order, spline_order, num_knots, .. } => {
                covariate_range(term.name(), covs[0])?;
                let tps = ThinPlateSpec {
                    poly_order: *poly_order,
                    spline_order: *spline_order,
                    num_knots: *num_knots,
                };
                let tp = basis::thin_plate_basis(covs[0], &tps)?;
                (TermBasis::ThinPlate { spec: tps, knots: tp.knots }, fixed, false)
            }
            TermSpec::Factor { num_levels, precision, penalty_order, gamma_scale, .. } => {
                let (fp, penalty) = match precision {
                    FactorPrecisionSpec::Iid => (FactorPrecision::Iid, PenaltyMatrix::identity(*num_levels)),
                    FactorPrecisionSpec::Penalty => (
                        FactorPrecision::Penalty { diff_order: *penalty_order },
                        basis::difference_penalty(*num_levels, *penalty_order, p.ridge)?,
                    ),
                };
                let prior = BlockPrior::Penalized {
                    penalty,
                    gamma_scale: gamma_scale.unwrap_or(p.gamma_scale),
                    lambda_index: n_lambda,
                };
                let fs = FactorSpec { num_levels: *num_levels, precision: fp };
                (TermBasis::Factor(fs), prior, true)
            }
            TermSpec::Fourier { num_harmonics, half_period, .. } => {
                let fs = FourierSpec {
                    num_harmonics: *num_harmonics,
                    half_period: *half_period,
                };
                (TermBasis::Fourier(fs), fixed, false)
            }
        };
        let bm = basis.evaluate(&covs, data.len())?.relabel(term.name());
        let width = bm.ncols();
        labels.extend_from_slice(bm.column_labels());
        n_lambda += prior.num_lambdas();
        blocks.push(Block {
            name: term.name().to_string(),
            kind: term.kind_name(),
            covariates: term.covariates().iter().map(|s| s.to_string()).collect(),
            columns: col..col + width,
            prior,
            unit_row_sums: bm.unit_row_sums(),
            centered,
            basis,
        });
        col += width;
    }
    Ok(BlockLedger {
        blocks,
        num_columns: col,
        num_lambdas: n_lambda,
        intercept_column,
        column_labels: labels,
    })
}

/// Design matrix, transformed response and block ledger for one dataset.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub ledger: BlockLedger,
}

pub fn assemble_design(spec: &ModelSpec, data: &Dataset) -> Result<Design> {
    let ledger = build_ledger(spec, data)?;
    design_from_ledger(spec, ledger, data)
}

/// Design for `data` using an already-fitted ledger (fixed knots).
pub fn design_from_ledger(spec: &ModelSpec, ledger: BlockLedger, data: &Dataset) -> Result<Design> {
    let x = ledger.design_matrix(data)?;
    let y = DVector::from_vec(spec.response_transform.apply(data.response())?);
    Ok(Design { x, y, ledger })
}

/// Block-diagonal `A₀` in the prior `β | σ² ~ N(β₀, σ² A₀⁻¹)`.
///
/// Penalized blocks carry `σ² λ K`, so their prior precision `λ K` does not
/// depend on σ²; fixed blocks carry their precision unscaled.
pub fn assemble_prior_precision(ledger: &BlockLedger, lambdas: &[f64], sigma2: f64) -> Result<DMatrix<f64>> {
    if lambdas.len() != ledger.num_lambdas {
        return Err(Error::Shape(format!(
            "{} smoothing parameters supplied, ledger needs {}",
            lambdas.len(),
            ledger.num_lambdas
        )));
    }
    if let Some((i, l)) = lambdas.iter().enumerate().find(|(_, &l)| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Domain(format!("smoothing parameter {i} must be positive, got {l}")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("σ² must be positive, got {sigma2}")));
    }
    let k = ledger.num_columns;
    let mut a0 = DMatrix::zeros(k, k);
    for b in &ledger.blocks {
        let s = b.columns.start;
        let w = b.width();
        let mut block = b.prior.precision(lambdas, w);
        if !matches!(b.prior, BlockPrior::Fixed { .. }) {
            block *= sigma2;
        }
        a0.view_mut((s, s), (w, w)).copy_from(&block);
    }
    Ok(a0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cholesky;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(n: usize) -> Dataset {
        let t: Vec<i64> = (0..n as i64).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let z: Vec<f64> = (0..n).map(|i| ((i * 53) % 97) as f64 / 96.0).collect();
        let h: Vec<f64> = (0..n).map(|i| (i % 24 + 1) as f64).collect();
        Dataset::new(t, y, vec![("x".into(), x), ("z".into(), z), ("hour".into(), h)]).unwrap()
    }

    pub(crate) fn simulation_like_spec() -> ModelSpec {
        ModelSpec {
            terms: vec![
                TermSpec::Intercept { name: "intercept".into() },
                TermSpec::Tensor {
                    name: "surface".into(),
                    covariates: ["x".into(), "z".into()],
                    basis_size: [6, 6],
                    order: [2, 2],
                    penalty_order: [2, 2],
                    period: [None, None],
                    range: [None, None],
                    gamma_scale: None,
                },
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
            lags: LagSet::new(vec![1]).unwrap(),
            priors: PriorConfig::default(),
            mcmc: McmcConfig::default(),
            response_transform: ResponseTransform::Identity,
        }
    }

    #[test]
    fn intercept_only_design() {
        let spec = ModelSpec {
            terms: vec![TermSpec::Intercept { name: "b0".into() }],
            ..simulation_like_spec()
        };
        let d = assemble_design(&spec, &series(5)).unwrap();
        assert_eq!(d.x, DMatrix::from_element(5, 1, 1.0));
    }

    #[test]
    fn simulation_layout_has_43_columns() {
        let d = assemble_design(&simulation_like_spec(), &series(300)).unwrap();
        assert_eq!(d.x.ncols(), 43);
        assert_eq!(d.ledger.blocks[1].columns, 1..37);
        assert_eq!(d.ledger.blocks[2].columns, 37..43);
        assert_eq!(d.ledger.num_lambdas, 3);
        assert_eq!(d.ledger.lambda_labels(), vec!["surface[x]", "surface[z]", "daily"]);
    }

    #[test]
    fn ledger_ranges_reconstruct_design() {
        let data = series(200);
        let d = assemble_design(&simulation_like_spec(), &data).unwrap();
        let mut covered = 0;
        for b in &d.ledger.blocks {
            assert_eq!(b.columns.start, covered);
            covered = b.columns.end;
            let bm = b.evaluate(&data).unwrap();
            assert_eq!(&d.x.columns(b.columns.start, b.width()).into_owned(), bm.values());
        }
        assert_eq!(covered, d.x.ncols());
        // deterministic
        let again = assemble_design(&simulation_like_spec(), &data).unwrap();
        assert_eq!(again.x, d.x);
    }

    #[test]
    fn log_transform() {
        let data = Dataset::new(vec![0, 1], vec![std::f64::consts::E, 1.0], vec![]).unwrap();
        let spec = ModelSpec {
            terms: vec![TermSpec::Intercept { name: "b0".into() }],
            response_transform: ResponseTransform::Log,
            ..simulation_like_spec()
        };
        let d = assemble_design(&spec, &data).unwrap();
        assert_abs_diff_eq!(d.y[0], 1.0, epsilon = 1e-15);
        assert_eq!(d.y[1], 0.0);
    }

    #[test]
    fn unknown_and_constant_covariates() {
        let mut spec = simulation_like_spec();
        if let TermSpec::CyclicBspline { covariate, .. } = &mut spec.terms[2] {
            *covariate = "nope".into();
        }
        assert!(matches!(assemble_design(&spec, &series(50)), Err(Error::Config(m)) if m.contains("nope")));

        let data = Dataset::new(vec![0, 1, 2], vec![1.0; 3], vec![("c".into(), vec![2.0; 3])]).unwrap();
        let spec = ModelSpec {
            terms: vec![
                TermSpec::Intercept { name: "b0".into() },
                TermSpec::Bspline {
                    name: "s".into(),
                    covariate: "c".into(),
                    basis_size: 5,
                    order: 2,
                    penalty_order: 2,
                    range: None,
                    gamma_scale: None,
                },
            ],
            ..simulation_like_spec()
        };
        assert!(matches!(assemble_design(&spec, &data), Err(Error::Config(m)) if m.contains("zero variance")));
    }

    #[test]
    fn problems_are_collected() {
        let mut spec = simulation_like_spec();
        spec.terms.remove(0);
        spec.mcmc.burn_in = spec.mcmc.iterations;
        spec.priors.gamma_scale = -1.0;
        let p = spec.problems();
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn drops_first_row_for_lag_one() {
        let data = series(10);
        let (kept, mask) = drop_incomplete_rows(&data, &LagSet::new(vec![1]).unwrap()).unwrap();
        assert_eq!(kept.len(), 10);
        assert_eq!(mask, (0..10).map(|i| i >= 1).collect::<Vec<_>>());
    }

    #[test]
    fn missing_response_drops_value_and_dependent() {
        let mut y: Vec<f64> = (0..10).map(f64::from).collect();
        y[4] = f64::NAN; // y₅ in one-based terms
        let data = Dataset::new((0..10).collect(), y, vec![]).unwrap();
        let (kept, mask) = drop_incomplete_rows(&data, &LagSet::new(vec![1]).unwrap()).unwrap();
        assert_eq!(kept.len(), 9);
        assert!(!mask[4] && !mask[5]);
        assert_eq!(mask.iter().filter(|m| **m).count(), 7);
    }

    #[test]
    fn gap_in_time_index_matches_brute_force() {
        let times: Vec<i64> = (0..10).chain(13..30).collect();
        let n = times.len();
        let data = Dataset::new(times.clone(), vec![1.0; n], vec![]).unwrap();
        let lags = LagSet::new(vec![1, 3]).unwrap();
        let (_, mask) = drop_incomplete_rows(&data, &lags).unwrap();
        let brute: Vec<bool> = times
            .iter()
            .map(|&t| lags.lags().iter().all(|&l| times.iter().any(|&s| s == t - l as i64)))
            .collect();
        assert_eq!(mask, brute);
        // first row after the gap loses its lag-1 neighbour
        assert!(!mask[10]);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let data = Dataset::new((0..5).collect(), vec![1.0; 5], vec![]).unwrap();
        assert!(matches!(
            drop_incomplete_rows(&data, &LagSet::new(vec![5]).unwrap()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn duplicate_time_rejected() {
        assert!(matches!(Dataset::new(vec![0, 1, 1], vec![0.0; 3], vec![]), Err(Error::Data(_))));
    }

    #[test]
    fn prior_precision_blocks() {
        let data = series(100);
        let d = assemble_design(&simulation_like_spec(), &data).unwrap();
        let a0 = assemble_prior_precision(&d.ledger, &[1.0, 1.0, 2.0], 0.5).unwrap();
        let BlockPrior::Tensor { pair, .. } = &d.ledger.blocks[1].prior else { panic!() };
        let BlockPrior::Penalized { penalty, .. } = &d.ledger.blocks[2].prior else { panic!() };
        assert_eq!(a0.view((1, 1), (36, 36)).into_owned(), (&pair.p1 + &pair.p2) * 0.5);
        assert_eq!(a0.view((37, 37), (6, 6)).into_owned(), penalty.values() * 2.0 * 0.5);
        assert_eq!(a0[(0, 0)], 1e-6);
        assert_eq!(a0[(0, 5)], 0.0);
        assert!(matches!(assemble_prior_precision(&d.ledger, &[1.0, 0.0, 1.0], 1.0), Err(Error::Domain(_))));
        assert!(matches!(assemble_prior_precision(&d.ledger, &[1.0, 1.0, 1.0], 0.0), Err(Error::Domain(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prior_precision_is_spd(l in proptest::collection::vec(1e-3f64..1e3, 3)) {
            let d = assemble_design(&simulation_like_spec(), &series(60)).unwrap();
            let a0 = assemble_prior_precision(&d.ledger, &l, 0.3).unwrap();
            prop_assert!((&a0 - a0.transpose()).amax() < 1e-12);
            prop_assert!(cholesky(&a0).is_ok());
        }

        #[test]
        fn drop_incomplete_rows_is_idempotent(missing in proptest::collection::vec(0usize..40, 0..6)) {
            let mut y: Vec<f64> = (0..40).map(|i| i as f64).collect();
            for m in &missing { y[*m] = f64::NAN; }
            let data = Dataset::new((0..40).collect(), y, vec![]).unwrap();
            let lags = LagSet::new(vec![1, 2]).unwrap();
            if let Ok((once, mask1)) = drop_incomplete_rows(&data, &lags) {
                let (twice, mask2) = drop_incomplete_rows(&once, &lags).unwrap();
                prop_assert_eq!(&once, &twice);
                let t1: Vec<i64> = (0..40).filter(|&i| mask1[i]).map(|i| i as i64).collect();
                let t2: Vec<i64> = (0..once.len()).filter(|&i| mask2[i]).map(|i| once.time_index()[i]).collect();
                prop_assert_eq!(t1, t2);
            }
        }
    }
}
