//! Rotary positional encoding.

use crate::error::{Error, Result};

/// Rotation angle of pair `m` of a `head_dim`-wide head at `position`.
/// A non-positive `base` disables rotation.
pub fn rope_angle(position: f64, pair: usize, head_dim: usize, base: f64) -> f64 {
    if base <= 0.0 {
        return 0.0;
    }
    position * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotates dimension pairs `(2m, 2m+1)` of one head vector.
pub fn rope_rotate(v: &[f64], position: f64, base: f64) -> Result<Vec<f64>> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::dim(format!("RoPE needs an even head dimension, got {d}")));
    }
    let mut out = vec![0.0; d];
    for m in 0..d / 2 {
        let (s, c) = rope_angle(position, m, d, base).sin_cos();
        let (x0, x1) = (v[2 * m], v[2 * m + 1]);
        out[2 * m] = x0 * c - x1 * s;
        out[2 * m + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}

/// Angles for a `positions.len() × (n_heads·head_dim)` activation, in the
/// layout expected by `Tape::rotate_pairs`.
pub(crate) fn rope_angles(positions: &[f64], n_heads: usize, head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(positions.len() * n_heads * half);
    for &pos in positions {
        for _ in 0..n_heads {
            out.extend((0..half).map(|m| rope_angle(pos, m, head_dim, base)));
        }
    }
    out
}
