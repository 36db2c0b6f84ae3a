use nalgebra::DMatrix;

use super::Matrix;
use crate::error::{Error, Result};

/// Relative singular-value cutoff used by [`pinv`].
pub const PINV_RTOL: f64 = 1e-12;

/// Moore–Penrose pseudoinverse via a full SVD. Singular values below
/// `PINV_RTOL · σ_max` are treated as zero.
pub fn pinv(a: &Matrix) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(Error::InvalidValue("pseudoinverse of a non-finite matrix".into()));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Matrix::zeros(n, m));
    }
    let dm = DMatrix::from_row_slice(m, n, a.as_slice());
    let svd = dm.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with U");
    let v_t = svd.v_t.as_ref().expect("svd computed with Vᵀ");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RTOL * sigma_max;

    // A⁺ = V · Σ⁺ · Uᵀ, accumulated one singular triplet at a time.
    let mut out = Matrix::zeros(n, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vik = v_t[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vik * u[(j, k)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let i3 = Matrix::identity(3);
        assert!(pinv(&i3).unwrap().max_abs_diff(&i3) < 1e-15);
        let d = Matrix::diag(&[2.0, 4.0]);
        assert!(pinv(&d).unwrap().max_abs_diff(&Matrix::diag(&[0.5, 0.25])) < 1e-15);
    }

    #[test]
    fn zero_matrix_has_zero_pinv() {
        let z = Matrix::zeros(3, 2);
        assert_eq!(pinv(&z).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a[(0, 1)] = f64::INFINITY;
        assert!(matches!(pinv(&a), Err(Error::InvalidValue(_))));
    }
}
