//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower Cholesky factor; on failure reports the first non-positive leading
/// minor (1-based).
pub fn cholesky(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidArgument(format!("{context}: matrix is not square")));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context: context.to_string(),
                minor: j + 1,
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    let l = cholesky(a, context)?;
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = a.nrows();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::NonFinite(format!("{context}: triangular solve")))?;
    let mut inv = l_inv.transpose() * l_inv;
    symmetrize(&mut inv);
    Ok((inv, logdet))
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draw from N(mean, L L') given the lower Cholesky factor `l`.
pub fn mvn_from_cholesky<R: Rng + ?Sized>(mean: &DVector<f64>, l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    mean + l * standard_normal_vector(mean.len(), rng)
}

/// Draw from the inverse-Wishart distribution with `df` degrees of freedom
/// and scale matrix `scale` (mean `scale / (df - p - 1)`).
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if df <= p as f64 - 1.0 {
        return Err(Error::InvalidArgument(format!("inverse-Wishart df {df} too small for dimension {p}")));
    }
    // W ~ Wishart(df, scale^-1) by Bartlett; Sigma = W^-1.
    let (scale_inv, _) = spd_inverse(scale, "inverse-Wishart scale")?;
    let l = cholesky(&scale_inv, "inverse-Wishart scale inverse")?;
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::InvalidArgument(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = &l * &a;
    let w = &la * la.transpose();
    let (sigma, _) = spd_inverse(&w, "inverse-Wishart draw")?;
    Ok(sigma)
}

/// Condition number of a symmetric matrix from its eigenvalues.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
