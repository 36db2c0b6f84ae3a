use super::Matrix;
use crate::error::{Error, Result};

/// Linear-interpolation matrix `A` (`src_len × dst_len`) such that `x · A`
/// resizes a row vector of length `src_len` to `dst_len`.
///
/// Endpoints are aligned: output index `j` reads input coordinate
/// `j·(src−1)/(dst−1)`. A single output point reads the centre of the input;
/// a single input point is broadcast.
pub fn interp_matrix(src_len: usize, dst_len: usize) -> Result<Matrix> {
    if src_len == 0 || dst_len == 0 {
        return Err(Error::dim(format!(
            "interpolation lengths must be positive, got {src_len} -> {dst_len}"
        )));
    }
    let mut a = Matrix::zeros(src_len, dst_len);
    for j in 0..dst_len {
        // Source coordinate of output j as the exact rational num/den.
        let (num, den) = if dst_len == 1 {
            (src_len - 1, 2)
        } else {
            (j * (src_len - 1), dst_len - 1)
        };
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            a[(lo, j)] = 1.0;
        } else {
            let frac = rem as f64 / den as f64;
            a[(lo, j)] = 1.0 - frac;
            a[(lo + 1, j)] = frac;
        }
    }
    Ok(a)
}

/// Resizes `x` to `dst_len` points with endpoint-aligned linear interpolation.
pub fn interpolate(x: &[f64], dst_len: usize) -> Result<Vec<f64>> {
    let a = interp_matrix(x.len(), dst_len)?;
    Ok(Matrix::row_vector(x).matmul_unchecked(&a).into_vec())
}
