//! Dense factorizations, triangular solves and seedable random variates.
//!
//! Every solve goes through a Cholesky factor; nothing in the crate forms an
//! explicit inverse. Random streams are ChaCha8 generators keyed by
//! `(seed, stream)` so independent chains and per-draw forecast paths never
//! share state and reproduce bit-for-bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut v = DVector::from_iterator(col.len(), col.iter().copied());
            self.solve_lower_in_place(&mut v);
            self.solve_upper_in_place(&mut v);
            col.copy_from(&v);
        }
        out
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        log_det_from_factor(self)
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// Fails with the index of the first non-positive pivot.
pub fn cholesky(a: &DMatrix<f64>) -> Result<SpdFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            if (x - y).abs() > SYMMETRY_TOL * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Domain(format!(
                    "matrix not symmetric at ({i}, {j}): {x} vs {y}"
                )));
            }
        }
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Factorization { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(SpdFactor { l })
}

pub fn log_det_from_factor(f: &SpdFactor) -> f64 {
    2.0 * (0..f.dim()).map(|i| f.l[(i, i)].ln()).sum::<f64>()
}

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A new generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Derives a child stream; used to hand out per-draw substreams.
    pub fn substream(&self, index: u64) -> RngStream {
        // splitmix64 finaliser keeps child ids well spread
        let mut z = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_add(1));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngStream {
            seed: self.seed,
            stream: z ^ (z >> 31),
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws from `MVN(P⁻¹ r, P⁻¹)` given precision `P` and `r = mean_rhs`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    mean_rhs: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let f = cholesky(precision)?;
    Ok(sample_mvn_from_factor(&f, mean_rhs, 1.0, rng))
}

/// Draws from `MVN(P⁻¹ r, scale · P⁻¹)` with `P = L Lᵀ` already factored.
pub fn sample_mvn_from_factor<R: Rng + ?Sized>(
    f: &SpdFactor,
    mean_rhs: &DVector<f64>,
    scale: f64,
    rng: &mut R,
) -> DVector<f64> {
    let n = f.dim();
    let mean = f.solve(mean_rhs);
    let mut z = DVector::from_fn(n, |_, _| standard_normal(rng));
    // Lᵀ x = z gives Cov(x) = (L Lᵀ)⁻¹
    f.solve_upper_in_place(&mut z);
    mean + z * scale.sqrt()
}

/// Gamma draw with the given shape and rate (mean `shape / rate`).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma parameters must be positive and finite (shape {shape}, rate {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Domain(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Inverse-gamma draw with the given shape and scale (mean `scale / (shape - 1)`).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!(
            "inverse-gamma parameters must be positive and finite (shape {shape}, scale {scale})"
        )));
    }
    Ok(1.0 / sample_gamma(shape, scale, rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF, InverseGamma};

    use crate::diagnostics::{kolmogorov_p_value, ks_statistic};

    #[test]
    fn cholesky_identity() {
        let f = cholesky(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(f.lower(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = cholesky(&a).unwrap();
        let l = f.lower();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(0, 1)], 0.0);
        assert_abs_diff_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn cholesky_indefinite_names_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match cholesky(&a) {
            Err(Error::Factorization { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 2.0]);
        assert!(matches!(cholesky(&a), Err(Error::Domain(_))));
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, 0).rng();
        let m = DMatrix::from_fn(n, n, |_, _| standard_normal(&mut rng));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn factor_reconstructs_input() {
        let a = random_spd(7, 3);
        let f = cholesky(&a).unwrap();
        let r = f.lower() * f.lower().transpose();
        assert!((r - &a).norm() / a.norm() < 1e-12);
    }

    #[test]
    fn solves_match_nalgebra() {
        let a = random_spd(6, 11);
        let b = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let x = cholesky(&a).unwrap().solve(&b);
        let expected = a.clone().lu().solve(&b).unwrap();
        assert!((x - expected).norm() < 1e-10);
    }

    #[test]
    fn log_det_simple_cases() {
        assert_abs_diff_eq!(cholesky(&DMatrix::identity(3, 3)).unwrap().log_det(), 0.0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_abs_diff_eq!(cholesky(&d).unwrap().log_det(), 6f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let a = random_spd(5, 29);
        let eig = a.clone().symmetric_eigen();
        let oracle: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
        assert_abs_diff_eq!(cholesky(&a).unwrap().log_det(), oracle, epsilon = 1e-8);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(RngStream::new(7, 2).rng(), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(RngStream::new(7, 2).rng(), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(RngStream::new(7, 3).rng(), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(RngStream::new(7, 2).substream(0), RngStream::new(7, 2).substream(1));
    }

    #[test]
    fn mvn_identity_precision_is_standard_normal() {
        let mut rng = RngStream::new(1, 0).rng();
        let p = DMatrix::identity(2, 2);
        let r = DVector::zeros(2);
        let n = 20_000;
        let mut sum = DVector::zeros(2);
        let mut sq = DVector::zeros(2);
        for _ in 0..n {
            let x = sample_mvn_precision(&r, &p, &mut rng).unwrap();
            sum += &x;
            sq += x.component_mul(&x);
        }
        for i in 0..2 {
            assert!((sum[i] / n as f64).abs() < 4.0 / (n as f64).sqrt());
            assert!((sq[i] / n as f64 - 1.0).abs() < 0.05);
        }
    }

    fn three_by_three() -> (DMatrix<f64>, DVector<f64>) {
        let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.4, 0.5, -0.4, 2.0]);
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        (p, r)
    }

    #[test]
    fn mvn_moments_match_direct_solve() {
        let (p, r) = three_by_three();
        // oracle: nalgebra's LU inverse, independent of the factor path
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &r;
        let f = cholesky(&p).unwrap();
        let mut rng = RngStream::new(5, 0).rng();
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| sample_mvn_from_factor(&f, &r, 1.0, &mut rng))
            .collect();
        let m = draws.iter().fold(DVector::zeros(3), |a, d| a + d) / n as f64;
        for i in 0..3 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((m[i] - mean[i]).abs() < 4.0 * se, "mean {i}");
        }
        let mut c = DMatrix::zeros(3, 3);
        for d in &draws {
            let e = d - &m;
            c += &e * e.transpose();
        }
        c /= (n - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                let tol = 0.05 * cov[(i, j)].abs().max(0.05 * (cov[(i, i)] * cov[(j, j)]).sqrt());
                assert!((c[(i, j)] - cov[(i, j)]).abs() < tol, "cov ({i},{j})");
            }
        }
    }

    #[test]
    fn mvn_mahalanobis_chi_square_goodness_of_fit() {
        let (p, r) = three_by_three();
        let f = cholesky(&p).unwrap();
        let mean = f.solve(&r);
        let chi3 = ChiSquared::new(3.0).unwrap();
        let bins = 20;
        let edges: Vec<f64> = (1..bins).map(|b| chi3.inverse_cdf(b as f64 / bins as f64)).collect();
        let mut counts = vec![0usize; bins];
        let mut rng = RngStream::new(9, 0).rng();
        let n = 100_000;
        for _ in 0..n {
            let x = sample_mvn_from_factor(&f, &r, 1.0, &mut rng);
            let e = x - &mean;
            let d2 = (e.transpose() * &p * &e)[(0, 0)];
            let b = edges.iter().take_while(|&&edge| d2 > edge).count();
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn gamma_shape_one_is_exponential() {
        let mut rng = RngStream::new(2, 0).rng();
        let b = 2.5;
        let n = 100_000;
        let m: f64 = (0..n).map(|_| sample_gamma(1.0, b, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 1.0 / b).abs() < 4.0 * (1.0 / b) / (n as f64).sqrt());
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut rng = RngStream::new(3, 0).rng();
        let n = 100_000;
        let m: f64 = (0..n)
            .map(|_| sample_inverse_gamma(3.0, 2.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        // mean 2/(3-1) = 1, sd 1 for IG(3,2)
        assert!((m - 1.0).abs() < 4.0 / (n as f64).sqrt() * 1.0, "mean {m}");
    }

    #[test]
    fn inverse_gamma_matches_reference_cdf() {
        let mut rng = RngStream::new(4, 0).rng();
        let (a, s) = (2.5, 1.5);
        let reference = InverseGamma::new(a, s).unwrap();
        let mut draws: Vec<f64> = (0..20_000)
            .map(|_| sample_inverse_gamma(a, s, &mut rng).unwrap())
            .collect();
        let d = ks_statistic(&mut draws, |x| reference.cdf(x));
        assert!(kolmogorov_p_value(d, 20_000) > 0.01, "KS D = {d}");
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = RngStream::new(0, 0).rng();
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
        assert!(sample_inverse_gamma(1.0, 0.0, &mut rng).is_err());
    }
}
