//! Small dense linear-algebra helpers shared by the kernel, sampler and optimizer.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Cholesky factorization that reports failure instead of returning `None`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Cholesky of a matrix that is PSD in exact arithmetic but may lose definiteness
/// to rounding (GP conditional covariances). Adds diagonal jitter up to
/// `1e-8 * mean(diag)` before giving up.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let scale = (m.trace() / m.nrows().max(1) as f64).abs().max(f64::MIN_POSITIVE);
    cholesky_jittered_scaled(m, scale, what)
}

/// As [`cholesky_jittered`] with the jitter measured against `scale`, for
/// conditional covariances whose own diagonal can be far below the rounding
/// error of the matrix they were derived from.
pub fn cholesky_jittered_scaled(m: &DMatrix<f64>, scale: f64, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mut jitter = 1e-14 * scale;
    while jitter <= 1e-8 * scale {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw from N(mean, L Lᵀ) given the lower Cholesky factor `L`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vec(mean.len(), rng);
    mean + chol.l_dirty().lower_triangle() * z
}

/// Draw from N(P⁻¹b, P⁻¹) given the Cholesky factor of the precision `P`.
pub fn sample_mvn_canonical<R: Rng + ?Sized>(
    precision: &Cholesky<f64, Dyn>,
    b: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = precision.solve(b);
    let z = standard_normal_vec(b.len(), rng);
    // Lᵀ x = z  gives x ~ N(0, (L Lᵀ)⁻¹)
    let lt = precision.l_dirty().lower_triangle().transpose();
    let noise = lt
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + noise
}

/// log N(x | mean, Σ) given the Cholesky factor of Σ.
pub fn log_mvn_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let r = x - mean;
    let l = chol.l_dirty().lower_triangle();
    let w = l
        .solve_lower_triangular(&r)
        .expect("Cholesky factor has a positive diagonal");
    -0.5 * (x.len() as f64 * LN_2PI + log_det(chol) + w.norm_squared())
}

pub fn log_normal_density(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Symmetrize in place, averaging mirrored entries.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_density_standard_normal_origin() {
        let c = cholesky(&DMatrix::identity(1, 1), "id").unwrap();
        let v = log_mvn_density(&DVector::zeros(1), &DVector::zeros(1), &c);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn canonical_sampler_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let cov = p.clone().try_inverse().unwrap();
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let mean = &cov * &b;
        let chol = cholesky(&p, "p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut m = DVector::zeros(2);
        let mut s = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_mvn_canonical(&chol, &b, &mut rng);
            m += &x;
            s += &x * x.transpose();
        }
        m /= n as f64;
        s = s / n as f64 - &m * m.transpose();
        assert!((&m - &mean).amax() < 0.01);
        assert!((&s - &cov).amax() < 0.01);
    }

    #[test]
    fn jitter_rescues_rank_deficient_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        assert!(cholesky(&m, "rank1").is_err());
        assert!(cholesky_jittered(&m, "rank1").is_ok());
    }
}
