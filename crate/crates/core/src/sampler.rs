//! Blocked Gibbs sampler for the penalised additive model with AR errors.
//!
//! One sweep updates, in order: β (with identifiability centering), φ, σ²,
//! then every smoothing parameter. Univariate smoothing parameters have a
//! conjugate Gamma update; the two parameters of a tensor block are moved
//! jointly by a random-walk Metropolis step on the log scale.
//!
//! Error convention: `ε_i = Σ_j φ_j ε_{i-lag_j} + u_i`, so the lag transform
//! subtracts φ-weighted lags from both y and X.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{quad_form, PenaltyMatrix, TensorPenaltyPair};
use crate::design::{
    assemble_prior_precision, build_ledger, design_from_ledger, drop_incomplete_rows, BlockLedger,
    BlockPrior, Dataset, Design, LagStructure, ModelSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, sample_gamma, sample_inverse_gamma, sample_mvn_from_factor, standard_normal, RngStream,
};
use crate::par::{self, Execution};

/// Consecutive rejected φ proposals tolerated before giving up.
pub const PHI_REJECTION_CAP: usize = 1000;

/// Snapshot of one chain. Serializable so a failed run can report where it
/// stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub phi: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `ε = y − Xβ` on every kept row.
    pub eps: Vec<f64>,
    /// Innovations on the regression-target rows.
    pub u: Vec<f64>,
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub phi: DVector<f64>,
    pub lambdas: Vec<f64>,
}

/// Residual vectors kept for a thinned subset of draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDraw {
    /// Index into [`PosteriorDraws::draws`].
    pub draw: usize,
    pub eps: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Acceptance {
    pub accepted: usize,
    pub proposed: usize,
}

impl Acceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    /// Chain id of each draw.
    pub chain: Vec<usize>,
    pub draws: Vec<Draw>,
    pub residuals: Vec<ResidualDraw>,
    /// Per tensor block, by block name.
    pub acceptance: Vec<(String, Acceptance)>,
    pub lambda_labels: Vec<String>,
    pub burn_in: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn posterior_mean_beta(&self) -> DVector<f64> {
        let k = self.draws[0].beta.len();
        let sum = self.draws.iter().fold(DVector::zeros(k), |acc, d| acc + &d.beta);
        sum / self.draws.len() as f64
    }

    /// Concatenates chains in chain order.
    pub fn merge(chains: Vec<PosteriorDraws>) -> Result<PosteriorDraws> {
        let mut it = chains.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| Error::Config("no chains to merge".into()))?;
        for c in it {
            let offset = out.draws.len();
            out.chain.extend(c.chain);
            out.draws.extend(c.draws);
            out.residuals.extend(c.residuals.into_iter().map(|mut r| {
                r.draw += offset;
                r
            }));
            for (acc, (name, a)) in out.acceptance.iter_mut().zip(c.acceptance) {
                debug_assert_eq!(acc.0, name);
                acc.1.accepted += a.accepted;
                acc.1.proposed += a.proposed;
            }
        }
        Ok(out)
    }
}

/// Applies `1 − Σ φ_j L^{lag_j}` to the rows of `x` and `y`, keeping only the
/// target rows of `lags`.
pub fn lag_transform(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    phi: &[f64],
    lags: &LagStructure,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Shape(format!("y has {} rows, X has {n}", y.len())));
    }
    if lags.is_empty() {
        return Err(Error::Data("lags leave no rows to regress on".into()));
    }
    if lags.lag_rows.iter().flatten().chain(&lags.targets).any(|&r| r >= n) {
        return Err(Error::Data("lag structure refers past the end of the series".into()));
    }
    if lags.lag_rows[0].len() != phi.len() {
        return Err(Error::Shape(format!(
            "{} AR coefficients for {} lags",
            phi.len(),
            lags.lag_rows[0].len()
        )));
    }
    let m = lags.len();
    let mut xs = DMatrix::zeros(m, x.ncols());
    let mut ys = DVector::zeros(m);
    for (r, (&t, rows)) in lags.targets.iter().zip(&lags.lag_rows).enumerate() {
        let mut yv = y[t];
        for (&l, &p) in rows.iter().zip(phi) {
            yv -= p * y[l];
        }
        ys[r] = yv;
        for c in 0..x.ncols() {
            let mut v = x[(t, c)];
            for (&l, &p) in rows.iter().zip(phi) {
                v -= p * x[(l, c)];
            }
            xs[(r, c)] = v;
        }
    }
    Ok((xs, ys))
}

/// Cross-products of the lag-shifted row sets of X and y.
///
/// With `X_a` the rows of X at lag `a` (lag 0 being the targets) and
/// `c = (1, −φ₁, …, −φ_p)`, `X*ᵀX* = Σ_ab c_a c_b X_aᵀX_b`. This avoids
/// touching all n rows every sweep.
#[derive(Debug, Clone)]
struct CrossProducts {
    xx: Vec<Vec<DMatrix<f64>>>,
    xy: Vec<Vec<DVector<f64>>>,
}

impl CrossProducts {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>, lags: &LagStructure) -> Self {
        let p = lags.lag_rows.first().map_or(0, Vec::len);
        let sets: Vec<Vec<usize>> = (0..=p)
            .map(|a| {
                if a == 0 {
                    lags.targets.clone()
                } else {
                    lags.lag_rows.iter().map(|r| r[a - 1]).collect()
                }
            })
            .collect();
        let xs: Vec<DMatrix<f64>> = sets.iter().map(|s| x.select_rows(s)).collect();
        let ys: Vec<DVector<f64>> = sets.iter().map(|s| DVector::from_iterator(s.len(), s.iter().map(|&i| y[i]))).collect();
        let xx = (0..=p)
            .map(|a| (0..=p).map(|b| xs[a].tr_mul(&xs[b])).collect())
            .collect();
        let xy = (0..=p)
            .map(|a| (0..=p).map(|b| xs[a].tr_mul(&ys[b])).collect())
            .collect();
        Self { xx, xy }
    }

    fn combine(&self, phi: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let c: Vec<f64> = std::iter::once(1.0).chain(phi.iter().map(|p| -p)).collect();
        let k = self.xx[0][0].nrows();
        let mut xtx = DMatrix::zeros(k, k);
        let mut xty = DVector::zeros(k);
        for (a, &ca) in c.iter().enumerate() {
            for (b, &cb) in c.iter().enumerate() {
                let w = ca * cb;
                xtx.zip_apply(&self.xx[a][b], |o, v| *o += w * v);
                xty.axpy(w, &self.xy[a][b], 1.0);
            }
        }
        (xtx, xty)
    }
}

/// Draws `β ~ MVN(Λ(A₀β̄₀ + X*ᵀy*), σ²Λ)` with `Λ = (A₀ + X*ᵀX*)⁻¹`.
pub fn sample_beta<R: Rng + ?Sized>(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    a0: &DMatrix<f64>,
    beta0: &DVector<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let precision = a0 + xtx;
    let rhs = a0 * beta0 + xty;
    let f = cholesky(&precision)?;
    Ok(sample_mvn_from_factor(&f, &rhs, sigma2, rng))
}

/// Shifts every centering-eligible block so its data-weighted effect sums to
/// zero, moving the shift into the intercept. Returns the shift per block
/// (0 for blocks that are not centred).
pub fn center_spline_blocks(beta: &mut DVector<f64>, x: &DMatrix<f64>, ledger: &BlockLedger) -> Result<Vec<f64>> {
    let sums = column_sums(x);
    center_with_sums(beta, &sums, ledger)
}

fn column_sums(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum()))
}

fn center_with_sums(beta: &mut DVector<f64>, sums: &DVector<f64>, ledger: &BlockLedger) -> Result<Vec<f64>> {
    let mut shifts = Vec::with_capacity(ledger.blocks.len());
    for b in &ledger.blocks {
        if !b.centered {
            shifts.push(0.0);
            continue;
        }
        let s = sums.rows(b.columns.start, b.width());
        let denom = s.sum();
        if denom == 0.0 {
            return Err(Error::sampler(0, format!("block {} has an all-zero design", b.name)));
        }
        let delta = s.dot(&beta.rows(b.columns.start, b.width())) / denom;
        beta.rows_mut(b.columns.start, b.width()).add_scalar_mut(-delta);
        beta[ledger.intercept_column] += delta;
        shifts.push(delta);
    }
    Ok(shifts)
}

/// Inverse-gamma update for σ². `n_star` is the number of regression-target
/// rows, `k` the column count of X.
#[allow(clippy::too_many_arguments)]
pub fn sample_sigma2<R: Rng + ?Sized>(
    n_star: usize,
    k: usize,
    v0: Option<f64>,
    delta0: f64,
    q_beta: f64,
    ss_u: f64,
    rng: &mut R,
) -> Result<f64> {
    let (shape, scale) = sigma2_parameters(n_star, k, v0, delta0, q_beta, ss_u);
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(Error::sampler(
            0,
            format!("degenerate σ² posterior (shape {shape}, scale {scale})"),
        ));
    }
    sample_inverse_gamma(shape, scale, rng)
}

/// `(shape, scale)` of the σ² full conditional.
pub fn sigma2_parameters(n_star: usize, k: usize, v0: Option<f64>, delta0: f64, q_beta: f64, ss_u: f64) -> (f64, f64) {
    let v0 = v0.unwrap_or(-(k as f64));
    ((n_star as f64 + v0 + k as f64) / 2.0, (delta0 + q_beta + ss_u) / 2.0)
}

/// Inputs for the φ update.
pub struct PhiProblem<'a> {
    /// Lagged residuals, one column per lag.
    pub e: &'a DMatrix<f64>,
    /// Residuals at the target rows.
    pub target: &'a DVector<f64>,
    pub sigma2: f64,
    pub phi_mean: f64,
    pub phi_precision: f64,
    /// When set, the lags used for the root check.
    pub strict_lags: Option<&'a [usize]>,
}

/// Draws φ from its Gaussian full conditional restricted to `|Σφ| < 1`.
pub fn sample_phi<R: Rng + ?Sized>(prob: &PhiProblem<'_>, rng: &mut R) -> Result<DVector<f64>> {
    let p = prob.e.ncols();
    let s = 1.0 / prob.sigma2;
    let precision = DMatrix::identity(p, p) * prob.phi_precision + prob.e.tr_mul(prob.e) * s;
    let rhs = DVector::from_element(p, prob.phi_precision * prob.phi_mean) + prob.e.tr_mul(prob.target) * s;
    let f = cholesky(&precision)?;
    for _ in 0..PHI_REJECTION_CAP {
        let phi = sample_mvn_from_factor(&f, &rhs, 1.0, rng);
        if phi_admissible(phi.as_slice(), prob.strict_lags) {
            return Ok(phi);
        }
    }
    let mean = f.solve(&rhs);
    Err(Error::sampler(
        0,
        format!(
            "{PHI_REJECTION_CAP} consecutive AR proposals violated |Σφ| < 1; proposal mean {:?}",
            mean.as_slice()
        ),
    ))
}

/// Censoring condition `|Σφ| < 1`, plus all roots outside the unit circle
/// when `strict_lags` is given.
pub fn phi_admissible(phi: &[f64], strict_lags: Option<&[usize]>) -> bool {
    if phi.iter().sum::<f64>().abs() >= 1.0 {
        return false;
    }
    match strict_lags {
        None => true,
        Some(lags) => ar_is_stationary(phi, lags),
    }
}

fn ar_is_stationary(phi: &[f64], lags: &[usize]) -> bool {
    let m = lags.iter().copied().max().unwrap_or(0);
    if m == 0 {
        return true;
    }
    let mut c = DMatrix::zeros(m, m);
    for (&l, &p) in lags.iter().zip(phi) {
        c[(0, l - 1)] = p;
    }
    for i in 1..m {
        c[(i, i - 1)] = 1.0;
    }
    c.complex_eigenvalues().iter().all(|z| z.norm() < 1.0)
}

/// Conjugate update `λ ~ Γ(d/2 + a, b + ½βᵀKβ)`.
pub fn sample_lambda_univariate<R: Rng + ?Sized>(
    beta_block: &[f64],
    penalty: &PenaltyMatrix,
    shape: f64,
    rate: f64,
    rng: &mut R,
) -> Result<f64> {
    let q = penalty.quadratic_form(beta_block);
    sample_gamma(beta_block.len() as f64 / 2.0 + shape, rate + 0.5 * q, rng)
}

/// Log of the (unnormalised) joint conditional of a tensor block's smoothing
/// parameters:
/// `½ log|λ₁P₁+λ₂P₂| + (a−1)(log λ₁ + log λ₂) − ½βᵀ(λ₁P₁+λ₂P₂)β − b(λ₁+λ₂)`.
pub fn tensor_log_density(beta_block: &[f64], pair: &TensorPenaltyPair, shape: f64, rate: f64, l1: f64, l2: f64) -> Result<f64> {
    if !(l1 > 0.0 && l2 > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let m = pair.combined(l1, l2);
    let logdet = cholesky(&m)?.log_det();
    let v = 0.5 * logdet + (shape - 1.0) * (l1.ln() + l2.ln()) - 0.5 * quad_form(&m, beta_block) - rate * (l1 + l2);
    if v.is_nan() || v == f64::INFINITY {
        return Err(Error::sampler(0, format!("non-finite smoothing log-density at ({l1}, {l2})")));
    }
    Ok(v)
}

/// One random-walk Metropolis step on `(log λ₁, log λ₂)`. Returns the new
/// pair and whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn sample_lambda_tensor<R: Rng + ?Sized>(
    beta_block: &[f64],
    pair: &TensorPenaltyPair,
    shape: f64,
    rate: f64,
    step: f64,
    current: (f64, f64),
    rng: &mut R,
) -> Result<((f64, f64), bool)> {
    let (l1, l2) = current;
    let p1 = l1 * (step * standard_normal(rng)).exp();
    let p2 = l2 * (step * standard_normal(rng)).exp();
    // Jacobian of the log transform adds log λ₁ + log λ₂
    let cur = tensor_log_density(beta_block, pair, shape, rate, l1, l2)? + l1.ln() + l2.ln();
    let prop = tensor_log_density(beta_block, pair, shape, rate, p1, p2)? + p1.ln() + p2.ln();
    let u: f64 = rng.random();
    if u.ln() < prop - cur || (p1 == l1 && p2 == l2) {
        Ok(((p1, p2), true))
    } else {
        Ok(((l1, l2), false))
    }
}

/// Immutable model data shared by every chain.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: ModelSpec,
    design: Design,
    lags: LagStructure,
    col_sums: DVector<f64>,
    cross: Option<CrossProducts>,
    lag_values: Vec<usize>,
}

/// Reported by [`Chain::step`] for invariant checks.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// β as drawn, before centering.
    pub beta_uncentered: DVector<f64>,
    pub retained: bool,
}

impl Sampler {
    /// `design` must be built on rows already passed through
    /// [`drop_incomplete_rows`].
    pub fn new(spec: ModelSpec, design: Design, time_index: &[i64]) -> Result<Self> {
        spec.validate()?;
        if time_index.len() != design.x.nrows() {
            return Err(Error::Shape("time index and design disagree on row count".into()));
        }
        if let Some(i) = design.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite response at row {i}; drop incomplete rows first")));
        }
        let lags = LagStructure::from_time_index(time_index, &spec.lags);
        if lags.is_empty() {
            return Err(Error::Data("no rows have every lag available".into()));
        }
        let col_sums = column_sums(&design.x);
        let cross = Some(CrossProducts::new(&design.x, &design.y, &lags));
        let lag_values = spec.lags.lags().to_vec();
        Ok(Self {
            spec,
            design,
            lags,
            col_sums,
            cross,
            lag_values,
        })
    }

    /// Forms `X*ᵀX*` from the full lag-transformed matrix each sweep instead
    /// of the cached cross-products. Slower; kept as a reference path.
    pub fn without_cross_product_cache(mut self) -> Self {
        self.cross = None;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn lag_structure(&self) -> &LagStructure {
        &self.lags
    }

    pub fn ledger(&self) -> &BlockLedger {
        &self.design.ledger
    }

    /// `(X*ᵀX*, X*ᵀy*)` for the given φ.
    pub fn normal_equations(&self, phi: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        match &self.cross {
            Some(c) => Ok(c.combine(phi)),
            None => {
                let (xs, ys) = lag_transform(&self.design.x, &self.design.y, phi, &self.lags)?;
                Ok((xs.tr_mul(&xs), xs.tr_mul(&ys)))
            }
        }
    }

    pub fn initial_state(&self) -> ChainState {
        let y = &self.design.y;
        let n = y.len() as f64;
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let k = self.design.x.ncols();
        let phi = vec![0.0; self.spec.lags.len()];
        let eps = y.as_slice().to_vec();
        let u = self.innovations(&eps, &phi);
        ChainState {
            iteration: 0,
            beta: vec![0.0; k],
            sigma2: if var > 0.0 { var } else { 1.0 },
            phi,
            lambdas: vec![1.0; self.design.ledger.num_lambdas],
            eps,
            u,
        }
    }

    fn innovations(&self, eps: &[f64], phi: &[f64]) -> Vec<f64> {
        self.lags
            .targets
            .iter()
            .zip(&self.lags.lag_rows)
            .map(|(&t, rows)| eps[t] - rows.iter().zip(phi).map(|(&l, &p)| p * eps[l]).sum::<f64>())
            .collect()
    }

    pub fn chain(&self, stream: RngStream) -> Chain<'_> {
        Chain {
            sampler: self,
            state: self.initial_state(),
            rng: stream.rng(),
            acceptance: self
                .tensor_blocks()
                .map(|name| (name.to_string(), Acceptance::default()))
                .collect(),
        }
    }

    fn tensor_blocks(&self) -> impl Iterator<Item = &str> {
        self.design
            .ledger
            .blocks
            .iter()
            .filter(|b| matches!(b.prior, BlockPrior::Tensor { .. }))
            .map(|b| b.name.as_str())
    }

    /// Runs one chain for `mcmc.iterations` sweeps.
    pub fn run_chain(&self, stream: RngStream, chain_id: usize) -> Result<PosteriorDraws> {
        let mcmc = &self.spec.mcmc;
        let mut chain = self.chain(stream);
        let mut draws = Vec::with_capacity(mcmc.iterations - mcmc.burn_in);
        let mut residuals = Vec::new();
        for _ in 0..mcmc.iterations {
            let report = chain.step()?;
            if report.retained {
                let s = &chain.state;
                let idx = draws.len();
                draws.push(Draw {
                    beta: DVector::from_column_slice(&s.beta),
                    sigma2: s.sigma2,
                    phi: DVector::from_column_slice(&s.phi),
                    lambdas: s.lambdas.clone(),
                });
                if idx % mcmc.residual_thin == 0 {
                    residuals.push(ResidualDraw {
                        draw: idx,
                        eps: DVector::from_column_slice(&s.eps),
                        u: DVector::from_column_slice(&s.u),
                    });
                }
            }
        }
        for (name, a) in &chain.acceptance {
            let r = a.rate();
            if !(0.05..=0.95).contains(&r) {
                log::warn!("smoothing-parameter acceptance for {name} is {r:.3}; consider tuning mcmc.mh_step");
            }
        }
        Ok(PosteriorDraws {
            chain: vec![chain_id; draws.len()],
            draws,
            residuals,
            acceptance: chain.acceptance,
            lambda_labels: self.design.ledger.lambda_labels(),
            burn_in: mcmc.burn_in,
            iterations: mcmc.iterations,
            seed: stream.seed,
        })
    }

    /// Runs `mcmc.chains` chains on independent streams and concatenates them.
    pub fn run(&self, exec: Execution) -> Result<PosteriorDraws> {
        let seed = self.spec.mcmc.seed;
        let chains = par::try_map_indices(self.spec.mcmc.chains, exec, |c| {
            self.run_chain(RngStream::new(seed, c as u64), c)
        })?;
        PosteriorDraws::merge(chains)
    }
}

/// A running chain: state plus its own random stream.
pub struct Chain<'a> {
    sampler: &'a Sampler,
    state: ChainState,
    rng: ChaCha8Rng,
    acceptance: Vec<(String, Acceptance)>,
}

impl Chain<'_> {
    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn acceptance(&self) -> &[(String, Acceptance)] {
        &self.acceptance
    }

    /// One full Gibbs sweep. On failure the error carries the state at the
    /// start of the failed sweep.
    pub fn step(&mut self) -> Result<StepReport> {
        let iteration = self.state.iteration;
        match self.sweep() {
            Ok(r) => Ok(r),
            Err(e) => {
                let message = match e {
                    Error::Sampler { message, .. } => message,
                    other => other.to_string(),
                };
                Err(Error::Sampler {
                    iteration,
                    message,
                    state: Some(Box::new(self.state.clone())),
                })
            }
        }
    }

    fn sweep(&mut self) -> Result<StepReport> {
        let s = self.sampler;
        let spec = &s.spec;
        let pri = &spec.priors;
        let x = &s.design.x;
        let y = &s.design.y;
        let ledger = &s.design.ledger;
        let k = x.ncols();
        let st = &self.state;

        let a0 = assemble_prior_precision(ledger, &st.lambdas, st.sigma2)?;
        let beta0 = DVector::from_element(k, pri.beta_mean);
        let (xtx, xty) = s.normal_equations(&st.phi)?;
        let mut beta = sample_beta(&xtx, &xty, &a0, &beta0, st.sigma2, &mut self.rng)?;
        let beta_uncentered = beta.clone();
        center_with_sums(&mut beta, &s.col_sums, ledger)?;

        let eps = y - x * &beta;

        let phi = if s.lag_values.is_empty() {
            DVector::zeros(0)
        } else {
            let p = s.lag_values.len();
            let m = s.lags.len();
            let e = DMatrix::from_fn(m, p, |r, j| eps[s.lags.lag_rows[r][j]]);
            let target = DVector::from_iterator(m, s.lags.targets.iter().map(|&t| eps[t]));
            sample_phi(
                &PhiProblem {
                    e: &e,
                    target: &target,
                    sigma2: st.sigma2,
                    phi_mean: pri.phi_mean,
                    phi_precision: pri.phi_precision,
                    strict_lags: spec.mcmc.strict_stationarity.then_some(s.lag_values.as_slice()),
                },
                &mut self.rng,
            )?
        };

        let u = s.innovations(eps.as_slice(), phi.as_slice());
        let diff = &beta - &beta0;
        let q_beta = diff.dot(&(&a0 * &diff));
        let ss_u: f64 = u.iter().map(|v| v * v).sum();
        let sigma2 = sample_sigma2(s.lags.len(), k, pri.v0, pri.delta0, q_beta, ss_u, &mut self.rng)?;

        let mut lambdas = st.lambdas.clone();
        let mut tensor_idx = 0;
        for b in &ledger.blocks {
            let bb = &beta.as_slice()[b.columns.clone()];
            match &b.prior {
                BlockPrior::Fixed { .. } => {}
                BlockPrior::Penalized { penalty, gamma_scale, lambda_index } => {
                    lambdas[*lambda_index] =
                        sample_lambda_univariate(bb, penalty, pri.gamma_shape, *gamma_scale, &mut self.rng)?;
                }
                BlockPrior::Tensor { pair, gamma_scale, lambda_index } => {
                    let i = *lambda_index;
                    let ((l1, l2), ok) = sample_lambda_tensor(
                        bb,
                        pair,
                        pri.gamma_shape,
                        *gamma_scale,
                        spec.mcmc.mh_step,
                        (lambdas[i], lambdas[i + 1]),
                        &mut self.rng,
                    )?;
                    lambdas[i] = l1;
                    lambdas[i + 1] = l2;
                    let acc = &mut self.acceptance[tensor_idx].1;
                    acc.proposed += 1;
                    acc.accepted += ok as usize;
                    tensor_idx += 1;
                }
            }
        }

        let iteration = st.iteration + 1;
        self.state = ChainState {
            iteration,
            beta: beta.as_slice().to_vec(),
            sigma2,
            phi: phi.as_slice().to_vec(),
            lambdas,
            eps: eps.as_slice().to_vec(),
            u,
        };
        Ok(StepReport {
            beta_uncentered,
            retained: iteration > spec.mcmc.burn_in,
        })
    }
}

/// Everything produced by a fit: the rows it used, the design, and the draws.
#[derive(Debug, Clone)]
pub struct Fit {
    pub data: Dataset,
    /// Over the input rows: which ones served as regression targets.
    pub target_mask: Vec<bool>,
    pub sampler: Sampler,
    pub draws: PosteriorDraws,
}

impl Fit {
    pub fn design(&self) -> &Design {
        self.sampler.design()
    }

    pub fn ledger(&self) -> &BlockLedger {
        self.sampler.ledger()
    }

    pub fn spec(&self) -> &ModelSpec {
        self.sampler.spec()
    }
}

/// Drops incomplete rows, builds the design and runs every chain.
pub fn fit(spec: &ModelSpec, data: &Dataset, exec: Execution) -> Result<Fit> {
    let (kept, _) = drop_incomplete_rows(data, &spec.lags)?;
    let ledger = build_ledger(spec, &kept)?;
    fit_with_ledger(spec, ledger, data, exec)
}

/// As [`fit`], with basis knots fixed by an existing ledger.
pub fn fit_with_ledger(spec: &ModelSpec, ledger: BlockLedger, data: &Dataset, exec: Execution) -> Result<Fit> {
    let (kept, target_mask) = drop_incomplete_rows(data, &spec.lags)?;
    let design = design_from_ledger(spec, ledger, &kept)?;
    let sampler = Sampler::new(spec.clone(), design, kept.time_index())?;
    let draws = sampler.run(exec)?;
    Ok(Fit {
        data: kept,
        target_mask,
        sampler,
        draws,
    })
}

/// Single-chain convenience: fit `data` with the given stream.
pub fn run_gibbs(spec: &ModelSpec, data: &Dataset, stream: RngStream) -> Result<PosteriorDraws> {
    let (kept, _) = drop_incomplete_rows(data, &spec.lags)?;
    let design = crate::design::assemble_design(spec, &kept)?;
    Sampler::new(spec.clone(), design, kept.time_index())?.run_chain(stream, stream.stream as usize)
}
