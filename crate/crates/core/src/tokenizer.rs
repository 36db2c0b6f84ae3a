//! Instance normalization, periodical patching and the flex projection layer.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{interp_matrix, pinv, Matrix};

/// Variance clamp used by instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics needed to undo [`revin_normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub mean: f64,
    /// Population standard deviation, clamped below by `eps`.
    pub std: f64,
    pub eps: f64,
}

impl NormRecord {
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        revin_denormalize(y, self)
    }
}

/// Standardizes one channel to zero mean and unit population variance.
pub fn revin_normalize(x: &[f64]) -> Result<(Vec<f64>, NormRecord)> {
    if x.len() < 2 {
        return Err(Error::InsufficientHistory(format!(
            "normalization needs at least 2 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rec = NormRecord {
        mean,
        std: var.sqrt().max(NORM_EPS),
        eps: NORM_EPS,
    };
    Ok((rec.normalize(x), rec))
}

pub fn revin_denormalize(y: &[f64], rec: &NormRecord) -> Vec<f64> {
    y.iter().map(|v| v * rec.std + rec.mean).collect()
}

/// Non-overlapping cycle-length patches, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `N × P`, row `i` is the `i`-th oldest patch.
    pub patches: Matrix,
    pub cycle_length: usize,
    pub n_patches: usize,
    /// Oldest points discarded so that the last patch ends at the newest one.
    pub dropped_prefix: usize,
}

impl PatchGrid {
    /// Row-major flattening of the patches.
    pub fn flatten(&self) -> Vec<f64> {
        self.patches.as_slice().to_vec()
    }
}

pub fn patchify(x: &[f64], p: usize) -> Result<PatchGrid> {
    if p == 0 {
        return Err(Error::dim("cycle length must be positive"));
    }
    if x.len() < 2 * p {
        return Err(Error::InsufficientHistory(format!(
            "{} points cannot hold two patches of length {p}",
            x.len()
        )));
    }
    let n = x.len() / p;
    let dropped = x.len() - n * p;
    Ok(PatchGrid {
        patches: Matrix::from_vec_unchecked(n, p, x[dropped..].to_vec()),
        cycle_length: p,
        n_patches: n,
        dropped_prefix: dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Pseudoinverse resize with variance correction.
    #[default]
    Flex,
    /// Plain linear interpolation of the weights along the patch axis.
    Linear,
}

/// Variance-correction factor `sqrt(reference / target)`.
pub fn delta(reference: usize, target: usize) -> f64 {
    (reference as f64 / target as f64).sqrt()
}

/// Left operator `M` (`target × reference`) with `resized = M · θ`.
///
/// Flex: `M = δ⁻¹ A⁺` with `A = interp_matrix(reference, target)`.
/// Linear: `M = Aᵀ`, i.e. each weight column is interpolated.
pub fn resize_operator(reference: usize, target: usize, mode: ResizeMode) -> Result<Matrix> {
    if target == 0 || reference == 0 {
        return Err(Error::dim("resize sizes must be positive"));
    }
    if reference == target {
        return Ok(Matrix::identity(target));
    }
    let a = interp_matrix(reference, target)?;
    Ok(match mode {
        ResizeMode::Flex => pinv(&a)?.scale(1.0 / delta(reference, target)),
        ResizeMode::Linear => a.transpose(),
    })
}

/// Resizes reference weights `θ` (`P* × D`) to `target × D`. At
/// `target == P*` the weights are returned unchanged in both modes.
pub fn flex_resize(theta: &Matrix, target: usize, mode: ResizeMode) -> Result<Matrix> {
    if target == theta.rows() {
        return Ok(theta.clone());
    }
    resize_operator(theta.rows(), target, mode)?.matmul(theta)
}

/// Memoized resize operators keyed by `(reference, target, mode)`.
#[derive(Debug, Default)]
pub struct ResizeCache {
    ops: RwLock<HashMap<(usize, usize, ResizeMode), Arc<Matrix>>>,
}

impl ResizeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, reference: usize, target: usize, mode: ResizeMode) -> Result<Arc<Matrix>> {
        let key = (reference, target, mode);
        if let Some(m) = self.ops.read().expect("resize cache poisoned").get(&key) {
            return Ok(Arc::clone(m));
        }
        let op = Arc::new(resize_operator(reference, target, mode)?);
        let mut guard = self.ops.write().expect("resize cache poisoned");
        Ok(Arc::clone(guard.entry(key).or_insert(op)))
    }

    pub fn len(&self) -> usize {
        self.ops.read().expect("resize cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Clone for ResizeCache {
    fn clone(&self) -> Self {
        Self {
            ops: RwLock::new(self.ops.read().expect("resize cache poisoned").clone()),
        }
    }
}

/// Input and output projection weights at the reference patch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexWeights<T = Matrix> {
    /// `P* × D`
    pub theta_e: T,
    /// `P* × D`
    pub theta_d: T,
    pub reference_size: usize,
}

impl<T> FlexWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FlexWeights<U> {
        FlexWeights {
            theta_e: f(&self.theta_e),
            theta_d: f(&self.theta_d),
            reference_size: self.reference_size,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("flex.theta_e".into(), &self.theta_e);
        f("flex.theta_d".into(), &self.theta_d);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.theta_e);
        f(&mut self.theta_d);
    }
}

impl FlexWeights<Matrix> {
    pub fn d_model(&self) -> usize {
        self.theta_e.cols()
    }
}

/// Projects patches to tokens: `patches (N×P) · resize(θ_e, P)`.
pub fn embed_patches(grid: &PatchGrid, w: &FlexWeights, mode: ResizeMode) -> Result<Matrix> {
    if grid.patches.cols() != grid.cycle_length {
        return Err(Error::dim("patch grid width differs from its cycle length"));
    }
    let theta = flex_resize(&w.theta_e, grid.cycle_length, mode)?;
    grid.patches.matmul(&theta)
}

/// Projects `K` decoder tokens back to a length-`horizon` sequence:
/// `z · resize(θ_d, P)ᵀ`, flattened row-major and cut to the earliest
/// `horizon` points.
pub fn unembed_tokens(
    z: &Matrix,
    w: &FlexWeights,
    p: usize,
    horizon: usize,
    mode: ResizeMode,
) -> Result<Vec<f64>> {
    if p == 0 || z.rows() != horizon.div_ceil(p) {
        return Err(Error::dim(format!(
            "{} tokens cannot cover horizon {horizon} at cycle length {p}",
            z.rows()
        )));
    }
    if z.cols() != w.d_model() {
        return Err(Error::dim("token width differs from projection width"));
    }
    let theta = flex_resize(&w.theta_d, p, mode)?;
    let mut out = z.matmul_t(&theta).into_vec();
    out.truncate(horizon);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn normalize_examples() {
        let (y, rec) = revin_normalize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        assert_eq!(rec.std, NORM_EPS);
        let (y, _) = revin_normalize(&[0.0, 2.0]).unwrap();
        assert_eq!(y, vec![-1.0, 1.0]);
        assert!(revin_normalize(&[1.0]).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let rec = NormRecord {
            mean: 5.0,
            std: 2.0,
            eps: NORM_EPS,
        };
        assert_eq!(revin_denormalize(&[0.0, 0.0], &rec), vec![5.0, 5.0]);
        let rec = NormRecord {
            mean: 1.0,
            std: 1.0,
            eps: NORM_EPS,
        };
        assert_eq!(revin_denormalize(&[-1.0, 1.0], &rec), vec![0.0, 2.0]);
    }

    #[test]
    fn patchify_examples() {
        let x: Vec<f64> = (0..240).map(f64::from).collect();
        let g = patchify(&x, 24).unwrap();
        assert_eq!((g.n_patches, g.dropped_prefix), (10, 0));
        assert_eq!(g.patches.shape(), (10, 24));

        let x: Vec<f64> = (0..250).map(f64::from).collect();
        let g = patchify(&x, 24).unwrap();
        assert_eq!((g.n_patches, g.dropped_prefix), (10, 10));
        assert_eq!(*g.patches.row(9).last().unwrap(), 249.0);
        assert_eq!(g.patches[(0, 0)], 10.0);

        assert!(matches!(
            patchify(&x[..20], 24),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn resize_at_reference_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = random(&mut rng, 48, 16);
        for mode in [ResizeMode::Flex, ResizeMode::Linear] {
            assert_eq!(flex_resize(&theta, 48, mode).unwrap(), theta);
        }
    }

    #[test]
    fn downsampling_scale_factor() {
        // δ = sqrt(48/12) = 2.
        assert_eq!(delta(48, 12), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = random(&mut rng, 48, 4);
        let a = interp_matrix(48, 12).unwrap();
        let want = pinv(&a).unwrap().matmul(&theta).unwrap().scale(0.5);
        let got = flex_resize(&theta, 12, ResizeMode::Flex).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn linear_mode_interpolates_columns() {
        let theta = Matrix::from_fn(3, 2, |i, j| (i * (j + 1)) as f64);
        let got = flex_resize(&theta, 5, ResizeMode::Linear).unwrap();
        assert_eq!(got.shape(), (5, 2));
        for i in 0..5 {
            assert!((got[(i, 0)] - i as f64 * 0.5).abs() < 1e-12);
            assert!((got[(i, 1)] - i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_at_reference_matches_plain_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = FlexWeights {
            theta_e: random(&mut rng, 48, 256),
            theta_d: random(&mut rng, 48, 256),
            reference_size: 48,
        };
        let x: Vec<f64> = (0..480).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = patchify(&x, 48).unwrap();
        let tokens = embed_patches(&g, &w, ResizeMode::Flex).unwrap();
        assert_eq!(tokens.shape(), (10, 256));
        assert_eq!(tokens, g.patches.matmul(&w.theta_e).unwrap());

        let zeros = patchify(&[0.0; 480], 24).unwrap();
        assert_eq!(embed_patches(&zeros, &w, ResizeMode::Flex).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn unembed_lengths_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = FlexWeights {
            theta_e: random(&mut rng, 48, 8),
            theta_d: random(&mut rng, 48, 8),
            reference_size: 48,
        };
        let z = random(&mut rng, 4, 8);
        assert_eq!(unembed_tokens(&z, &w, 24, 96, ResizeMode::Flex).unwrap().len(), 96);
        let z5 = random(&mut rng, 5, 8);
        let full = z5.matmul_t(&flex_resize(&w.theta_d, 24, ResizeMode::Flex).unwrap());
        let out = unembed_tokens(&z5, &w, 24, 100, ResizeMode::Flex).unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(out[..], full.as_slice()[..100]);
        assert!(unembed_tokens(&z, &w, 24, 100, ResizeMode::Flex).is_err());
        let zero = unembed_tokens(&Matrix::zeros(4, 8), &w, 24, 96, ResizeMode::Flex).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cache_returns_same_operator() {
        let cache = ResizeCache::new();
        let a = cache.get(48, 24, ResizeMode::Flex).unwrap();
        let b = cache.get(48, 24, ResizeMode::Flex).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, resize_operator(48, 24, ResizeMode::Flex).unwrap());
        cache.get(48, 24, ResizeMode::Linear).unwrap();
        assert_eq!(cache.len(), 2);
    }
}
