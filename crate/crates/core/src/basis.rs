//! Basis matrices and their penalties: B-splines (plain, cyclic and tensor
//! products), low-rank thin-plate splines, factor indicators and Fourier terms.
//!
//! Spline order follows the polynomial degree: order 0 is piecewise constant,
//! order 1 piecewise linear, order 3 cubic. Basis values come from the
//! Cox–de Boor recurrence, evaluated with the triangular scheme so that only
//! the `order + 1` non-zero functions of each row are touched.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to difference penalties unless configured otherwise.
pub const DEFAULT_RIDGE: f64 = 1e-5;

/// Largest ridge accepted by [`difference_penalty`].
pub const MAX_RIDGE: f64 = 1e-3;

const ROW_SUM_TOL: f64 = 1e-10;

/// Breakpoints of a spline basis.
///
/// For an open grid `knots` are the distinct breakpoints; the boundary knots
/// are repeated `order` times when the basis is evaluated, so a grid with `m`
/// breakpoints carries `m - 1 + order` basis functions. For a periodic grid
/// `knots` lie in `[0, period)` and each knot starts one basis function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    knots: Vec<f64>,
    order: usize,
    periodic: bool,
    period: Option<f64>,
}

impl KnotGrid {
    pub fn new(knots: Vec<f64>, order: usize) -> Result<Self> {
        check_increasing(&knots)?;
        if knots.len() < 2 {
            return Err(Error::Config(format!(
                "an order-{order} spline needs at least two distinct knots, got {}",
                knots.len()
            )));
        }
        Ok(Self {
            knots,
            order,
            periodic: false,
            period: None,
        })
    }

    pub fn periodic(knots: Vec<f64>, order: usize, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        check_increasing(&knots)?;
        if let Some(k) = knots.iter().find(|&&k| !(0.0..period).contains(&k)) {
            return Err(Error::Config(format!(
                "periodic knot {k} outside [0, {period})"
            )));
        }
        if knots.len() < order + 1 {
            return Err(Error::Config(format!(
                "a cyclic order-{order} basis needs at least {} knots, got {}",
                order + 1,
                knots.len()
            )));
        }
        Ok(Self {
            knots,
            order,
            periodic: true,
            period: Some(period),
        })
    }

    /// Equally spaced breakpoints over `[lo, hi]` giving `num_basis` functions.
    pub fn uniform(lo: f64, hi: f64, num_basis: usize, order: usize) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "spline range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if num_basis < order + 1 {
            return Err(Error::Config(format!(
                "an order-{order} spline needs at least {} basis functions, got {num_basis}",
                order + 1
            )));
        }
        let intervals = num_basis - order;
        let knots = (0..=intervals)
            .map(|i| {
                if i == intervals {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / intervals as f64
                }
            })
            .collect();
        Self::new(knots, order)
    }

    /// `num_basis` equally spaced knots on the circle `[0, period)`.
    pub fn uniform_periodic(period: f64, num_basis: usize, order: usize) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        let knots = (0..num_basis)
            .map(|i| period * i as f64 / num_basis as f64)
            .collect();
        Self::periodic(knots, order, period)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn num_basis(&self) -> usize {
        if self.periodic {
            self.knots.len()
        } else {
            self.knots.len() - 1 + self.order
        }
    }

    /// Lower and upper end of the covariate range spanned by the basis.
    pub fn range(&self) -> (f64, f64) {
        match self.period {
            Some(p) => (0.0, p),
            None => (self.knots[0], self.knots[self.knots.len() - 1]),
        }
    }

    /// Full knot vector with the boundary knots repeated `order` times.
    pub fn clamped_knots(&self) -> Vec<f64> {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        let mut t = Vec::with_capacity(self.knots.len() + 2 * self.order);
        t.extend(std::iter::repeat_n(first, self.order));
        t.extend_from_slice(&self.knots);
        t.extend(std::iter::repeat_n(last, self.order));
        t
    }

    /// Knot `i` of the periodic extension (any integer index).
    fn extended(&self, i: isize) -> f64 {
        let d = self.knots.len() as isize;
        let wraps = i.div_euclid(d);
        self.knots[i.rem_euclid(d) as usize] + wraps as f64 * self.period.unwrap_or(0.0)
    }
}

fn check_increasing(knots: &[f64]) -> Result<()> {
    if knots.iter().any(|k| !k.is_finite()) {
        return Err(Error::Config("knots must be finite".into()));
    }
    if let Some(w) = knots.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "knots must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Design block: one row per observation, one column per basis function.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    values: DMatrix<f64>,
    column_labels: Vec<String>,
    unit_row_sums: bool,
}

impl BasisMatrix {
    pub fn new(values: DMatrix<f64>, column_labels: Vec<String>, unit_row_sums: bool) -> Result<Self> {
        if column_labels.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "{} labels for {} columns",
                column_labels.len(),
                values.ncols()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite basis entry {v}")));
        }
        if unit_row_sums {
            for (i, row) in values.row_iter().enumerate() {
                let s = row.sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Domain(format!("row {i} sums to {s}, expected 1")));
                }
            }
        }
        Ok(Self {
            values,
            column_labels,
            unit_row_sums,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }

    pub fn unit_row_sums(&self) -> bool {
        self.unit_row_sums
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub(crate) fn relabel(mut self, prefix: &str) -> Self {
        for l in &mut self.column_labels {
            *l = format!("{prefix}[{l}]");
        }
        self
    }
}

fn numbered_labels(n: usize) -> Vec<String> {
    (0..n).map(|j| j.to_string()).collect()
}

/// Evaluates the `order + 1` non-zero B-splines at `x` given the span index
/// `mu` (with `t(mu) <= x < t(mu + 1)`), writing `N_{mu-order+r}` into `out[r]`.
fn nonzero_basis(x: f64, mu: isize, order: usize, t: impl Fn(isize) -> f64, out: &mut [f64]) {
    let mut left = vec![0.0; order + 1];
    let mut right = vec![0.0; order + 1];
    out[0] = 1.0;
    for j in 1..=order {
        left[j] = x - t(mu + 1 - j as isize);
        right[j] = t(mu + j as isize) - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// B-spline basis on an open (clamped) grid; periodic grids are forwarded to
/// [`cyclic_bspline_basis`].
pub fn bspline_basis(x: &[f64], grid: &KnotGrid) -> Result<BasisMatrix> {
    if grid.periodic {
        return cyclic_bspline_basis(x, grid);
    }
    let k = grid.order;
    let t = grid.clamped_knots();
    if t.len() < k + 2 {
        return Err(Error::Config(format!(
            "{} knots cannot support an order-{k} spline",
            t.len()
        )));
    }
    let nb = grid.num_basis();
    let (lo, hi) = grid.range();
    let mut values = DMatrix::zeros(x.len(), nb);
    let mut row = vec![0.0; k + 1];
    for (i, &xi) in x.iter().enumerate() {
        if !(xi >= lo && xi <= hi) {
            return Err(Error::Domain(format!(
                "value {xi} (row {i}) outside spline range [{lo}, {hi}]"
            )));
        }
        // last span with t[mu] <= x, restricted to the non-degenerate spans
        let mu = if xi >= hi {
            nb - 1
        } else {
            k + grid.knots.partition_point(|&kn| kn <= xi) - 1
        };
        nonzero_basis(xi, mu as isize, k, |j| t[j as usize], &mut row);
        for (r, v) in row.iter().enumerate() {
            values[(i, mu - k + r)] = *v;
        }
    }
    BasisMatrix::new(values, numbered_labels(nb), true)
}

/// Cyclic B-spline basis: splines whose support crosses the period boundary
/// are wrapped onto the start of the circle, so `x` and `x + period` give
/// identical rows.
pub fn cyclic_bspline_basis(x: &[f64], grid: &KnotGrid) -> Result<BasisMatrix> {
    let period = match grid.period {
        Some(p) if grid.periodic => p,
        _ => return Err(Error::Config("cyclic basis needs a periodic knot grid".into())),
    };
    let k = grid.order;
    let d = grid.knots.len();
    let origin = grid.knots[0];
    let mut values = DMatrix::zeros(x.len(), d);
    let mut row = vec![0.0; k + 1];
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() {
            return Err(Error::Domain(format!("non-finite value {xi} (row {i})")));
        }
        let mut xr = origin + (xi - origin).rem_euclid(period);
        if xr >= origin + period {
            xr = origin;
        }
        let mu = grid.knots.partition_point(|&kn| kn <= xr) as isize - 1;
        nonzero_basis(xr, mu, k, |j| grid.extended(j), &mut row);
        for (r, v) in row.iter().enumerate() {
            let col = (mu - k as isize + r as isize).rem_euclid(d as isize) as usize;
            values[(i, col)] += *v;
        }
    }
    BasisMatrix::new(values, numbered_labels(d), true)
}

/// `K = DᵀD + ridge·I` for the penalty on `diff_order`-th differences.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    values: DMatrix<f64>,
    diff_order: usize,
    ridge: f64,
    cyclic: bool,
}

impl PenaltyMatrix {
    /// Wraps an arbitrary symmetric precision structure (e.g. an identity
    /// for iid factor levels).
    pub fn from_matrix(values: DMatrix<f64>, diff_order: usize, ridge: f64) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Shape("penalty must be square".into()));
        }
        Ok(Self {
            values,
            diff_order,
            ridge,
            cyclic: false,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            values: DMatrix::identity(d, d),
            diff_order: 0,
            ridge: 0.0,
            cyclic: false,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn diff_order(&self) -> usize {
        self.diff_order
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    /// `βᵀKβ`.
    pub fn quadratic_form(&self, beta: &[f64]) -> f64 {
        quad_form(&self.values, beta)
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for j in 0..n {
        let mut c = 0.0;
        for i in 0..n {
            c += m[(i, j)] * v[i];
        }
        s += c * v[j];
    }
    s
}

fn difference_coefficients(k: usize) -> Vec<f64> {
    // (-1)^(k-j) C(k, j)
    let mut c = vec![0.0; k + 1];
    let mut binom = 1.0;
    for j in 0..=k {
        let sign = if (k - j).is_multiple_of(2) { 1.0 } else { -1.0 };
        c[j] = sign * binom;
        binom = binom * (k - j) as f64 / (j + 1) as f64;
    }
    c
}

fn check_penalty_args(d: usize, k: usize, ridge: f64) -> Result<()> {
    if k == 0 || k >= d {
        return Err(Error::Config(format!(
            "difference order must satisfy 1 <= k < d, got k = {k}, d = {d}"
        )));
    }
    if !(0.0..=MAX_RIDGE).contains(&ridge) {
        return Err(Error::Domain(format!(
            "ridge must lie in [0, {MAX_RIDGE}], got {ridge}"
        )));
    }
    Ok(())
}

/// Open difference penalty: `D` has `d - k` rows.
pub fn difference_penalty(d: usize, diff_order: usize, ridge: f64) -> Result<PenaltyMatrix> {
    check_penalty_args(d, diff_order, ridge)?;
    let c = difference_coefficients(diff_order);
    let mut dm = DMatrix::zeros(d - diff_order, d);
    for r in 0..d - diff_order {
        for (j, cj) in c.iter().enumerate() {
            dm[(r, r + j)] = *cj;
        }
    }
    finish_penalty(dm, diff_order, ridge, false)
}

/// Cyclic difference penalty: differences wrap across the period boundary,
/// so `D` has `d` rows.
pub fn cyclic_difference_penalty(d: usize, diff_order: usize, ridge: f64) -> Result<PenaltyMatrix> {
    check_penalty_args(d, diff_order, ridge)?;
    let c = difference_coefficients(diff_order);
    let mut dm = DMatrix::zeros(d, d);
    for r in 0..d {
        for (j, cj) in c.iter().enumerate() {
            dm[(r, (r + j) % d)] += *cj;
        }
    }
    finish_penalty(dm, diff_order, ridge, true)
}

fn finish_penalty(dm: DMatrix<f64>, diff_order: usize, ridge: f64, cyclic: bool) -> Result<PenaltyMatrix> {
    let d = dm.ncols();
    let mut values = dm.transpose() * &dm;
    for i in 0..d {
        values[(i, i)] += ridge;
    }
    Ok(PenaltyMatrix {
        values,
        diff_order,
        ridge,
        cyclic,
    })
}

/// Row-wise Kronecker product; the column for `(i1, i2)` is `i1 * d2 + i2`.
pub fn tensor_basis(b1: &BasisMatrix, b2: &BasisMatrix) -> Result<BasisMatrix> {
    let n = b1.nrows();
    if b2.nrows() != n {
        return Err(Error::Shape(format!(
            "tensor factors have {} and {} rows",
            n,
            b2.nrows()
        )));
    }
    let (d1, d2) = (b1.ncols(), b2.ncols());
    let mut values = DMatrix::zeros(n, d1 * d2);
    for i in 0..n {
        for a in 0..d1 {
            let va = b1.values[(i, a)];
            if va == 0.0 {
                continue;
            }
            for b in 0..d2 {
                values[(i, a * d2 + b)] = va * b2.values[(i, b)];
            }
        }
    }
    let mut labels = Vec::with_capacity(d1 * d2);
    for a in &b1.column_labels {
        for b in &b2.column_labels {
            labels.push(format!("{a}:{b}"));
        }
    }
    BasisMatrix::new(values, labels, b1.unit_row_sums && b2.unit_row_sums)
}

/// Axis penalties for a tensor block, `P₁ = K₁ ⊗ I` and `P₂ = I ⊗ K₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPenaltyPair {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub d1: usize,
    pub d2: usize,
}

impl TensorPenaltyPair {
    /// `λ₁P₁ + λ₂P₂`.
    pub fn combined(&self, lambda1: f64, lambda2: f64) -> DMatrix<f64> {
        &self.p1 * lambda1 + &self.p2 * lambda2
    }
}

pub fn tensor_penalties(k1: &PenaltyMatrix, k2: &PenaltyMatrix) -> Result<TensorPenaltyPair> {
    let (d1, d2) = (k1.dim(), k2.dim());
    let p1 = k1.values.kronecker(&DMatrix::<f64>::identity(d2, d2));
    let p2 = DMatrix::<f64>::identity(d1, d1).kronecker(&k2.values);
    Ok(TensorPenaltyPair { p1, p2, d1, d2 })
}

/// Low-rank thin-plate term: `J` polynomial columns `x, …, x^J` followed by
/// `K` radial columns `|x - κ_k|^m` at the `k/(K+1)` sample quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinPlateSpec {
    pub poly_order: usize,
    pub spline_order: u32,
    pub num_knots: usize,
}

impl ThinPlateSpec {
    pub fn knot_quantiles(&self) -> Vec<f64> {
        (1..=self.num_knots)
            .map(|k| k as f64 / (self.num_knots + 1) as f64)
            .collect()
    }

    pub fn num_columns(&self) -> usize {
        self.poly_order + self.num_knots
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThinPlateBasis {
    pub basis: BasisMatrix,
    pub knots: Vec<f64>,
    /// Leading polynomial (fixed-effect) columns; the rest are radial.
    pub num_fixed: usize,
}

/// Linear-interpolation sample quantile (type 7) of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn thin_plate_basis(x: &[f64], spec: &ThinPlateSpec) -> Result<ThinPlateBasis> {
    if spec.num_knots < 1 {
        return Err(Error::Config("thin-plate basis needs at least one knot".into()));
    }
    let mut sorted: Vec<f64> = x.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("thin-plate covariate has non-finite values".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < spec.num_knots + 2 {
        return Err(Error::Config(format!(
            "thin-plate basis with {} knots needs at least {} distinct values, got {}",
            spec.num_knots,
            spec.num_knots + 2,
            distinct.len()
        )));
    }
    let knots: Vec<f64> = spec
        .knot_quantiles()
        .iter()
        .map(|&q| quantile_sorted(&sorted, q))
        .collect();
    thin_plate_with_knots(x, spec, knots)
}

/// Thin-plate columns at fixed knots, for prediction grids.
pub fn thin_plate_with_knots(x: &[f64], spec: &ThinPlateSpec, knots: Vec<f64>) -> Result<ThinPlateBasis> {
    let cols = spec.poly_order + knots.len();
    let values = DMatrix::from_fn(x.len(), cols, |i, j| {
        if j < spec.poly_order {
            x[i].powi(j as i32 + 1)
        } else {
            (x[i] - knots[j - spec.poly_order]).abs().powi(spec.spline_order as i32)
        }
    });
    let labels = (0..cols)
        .map(|j| {
            if j < spec.poly_order {
                format!("x^{}", j + 1)
            } else {
                format!("r{}", j - spec.poly_order)
            }
        })
        .collect();
    Ok(ThinPlateBasis {
        basis: BasisMatrix::new(values, labels, false)?,
        knots,
        num_fixed: spec.poly_order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorPrecision {
    /// `Q_F = λ_F I`.
    Iid,
    /// Difference penalty of the given order across adjacent levels.
    Penalty { diff_order: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub num_levels: usize,
    pub precision: FactorPrecision,
}

/// One-hot indicators for levels `1..=J`.
pub fn factor_basis(codes: &[i64], spec: &FactorSpec) -> Result<BasisMatrix> {
    let j = spec.num_levels;
    if j < 2 {
        return Err(Error::Config(format!("a factor needs at least 2 levels, got {j}")));
    }
    let mut values = DMatrix::zeros(codes.len(), j);
    for (i, &c) in codes.iter().enumerate() {
        if c < 1 || c as usize > j {
            return Err(Error::Data(format!(
                "factor code {c} at row {i} outside 1..={j}"
            )));
        }
        values[(i, c as usize - 1)] = 1.0;
    }
    BasisMatrix::new(values, (1..=j).map(|l| format!("level{l}")).collect(), true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub num_harmonics: usize,
    pub half_period: f64,
}

/// Columns `sin(cπx/L), cos(cπx/L)` for `c = 1..=C`; no intercept.
pub fn fourier_basis(x: &[f64], spec: &FourierSpec) -> Result<BasisMatrix> {
    if spec.num_harmonics < 1 {
        return Err(Error::Config("Fourier basis needs at least one harmonic".into()));
    }
    if !(spec.half_period > 0.0 && spec.half_period.is_finite()) {
        return Err(Error::Config(format!(
            "Fourier half period must be positive, got {}",
            spec.half_period
        )));
    }
    let c = spec.num_harmonics;
    let values = DMatrix::from_fn(x.len(), 2 * c, |i, j| {
        let w = (j / 2 + 1) as f64 * std::f64::consts::PI * x[i] / spec.half_period;
        if j % 2 == 0 {
            w.sin()
        } else {
            w.cos()
        }
    });
    let labels = (1..=c)
        .flat_map(|h| [format!("sin{h}"), format!("cos{h}")])
        .collect();
    BasisMatrix::new(values, labels, false)
}
