use flexcast::linalg::{interp_matrix, pinv, Matrix};
use flexcast::periodicity::find_period_fft;
use flexcast::tokenizer::{delta, flex_resize, patchify, resize_operator, revin_denormalize, revin_normalize, ResizeMode};
use flexcast::{Exec, Model, ModelConfig};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinv_satisfies_penrose_conditions(a in matrix(9, 9)) {
        let p = pinv(&a).unwrap();
        prop_assert_eq!(p.shape(), (a.cols(), a.rows()));
        let ap = a.matmul(&p).unwrap();
        let pa = p.matmul(&a).unwrap();
        let scale = 1.0 + a.max_abs() * p.max_abs();
        let tol = 1e-9 * scale * scale;
        prop_assert!(ap.matmul(&a).unwrap().max_abs_diff(&a) < tol * (1.0 + a.max_abs()));
        prop_assert!(pa.matmul(&p).unwrap().max_abs_diff(&p) < tol * (1.0 + p.max_abs()));
        prop_assert!(ap.max_abs_diff(&ap.transpose()) < tol);
        prop_assert!(pa.max_abs_diff(&pa.transpose()) < tol);
    }

    #[test]
    fn interpolation_preserves_constants(src in 1usize..40, dst in 1usize..40, c in -5.0..5.0f64) {
        let a = interp_matrix(src, dst).unwrap();
        prop_assert_eq!(a.shape(), (src, dst));
        let y = Matrix::filled(1, src, c).matmul(&a).unwrap();
        prop_assert!(y.as_slice().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn flex_upsampling_preserves_inner_products(
        reference in 2usize..24,
        factor in 1usize..4,
        extra in 0usize..5,
        seed in any::<u64>(),
    ) {
        let target = reference * factor + extra;
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let theta = Matrix::from_fn(reference, 3, |_, _| next());
        let x = Matrix::from_fn(1, reference, |_, _| next());
        let a = interp_matrix(reference, target).unwrap();
        let resized = flex_resize(&theta, target, ResizeMode::Flex).unwrap().scale(delta(reference, target));
        let lhs = x.matmul(&a).unwrap().matmul(&resized).unwrap();
        let rhs = x.matmul(&theta).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-8, "{} -> {}", reference, target);
    }

    #[test]
    fn resize_is_identity_at_reference(reference in 2usize..64) {
        for mode in [ResizeMode::Flex, ResizeMode::Linear] {
            let op = resize_operator(reference, reference, mode).unwrap();
            prop_assert_eq!(op, Matrix::identity(reference));
        }
    }

    #[test]
    fn instance_normalization_round_trips(
        x in prop::collection::vec(-1e3..1e3f64, 2..200),
    ) {
        let (y, rec) = revin_normalize(&x).unwrap();
        let back = revin_denormalize(&y, &rec);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn patches_end_at_the_newest_point(len in 8usize..300, p in 1usize..40) {
        prop_assume!(len >= 2 * p);
        let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let grid = patchify(&x, p).unwrap();
        prop_assert_eq!(grid.n_patches, len / p);
        prop_assert_eq!(grid.dropped_prefix, len % p);
        prop_assert_eq!(grid.flatten(), x[len % p..].to_vec());
    }

    #[test]
    fn fft_recovers_sinusoid_period(p in 4usize..80, cycles in 8usize..16, phase in 0.0..std::f64::consts::TAU) {
        let x: Vec<f64> = (0..p * cycles)
            .map(|t| (std::f64::consts::TAU * t as f64 / p as f64 + phase).sin())
            .collect();
        let est = find_period_fft(&x, 2, x.len() / 2, 1).unwrap();
        prop_assert_eq!(est.cycle_length, p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forecasts_have_requested_length_and_agree_across_exec(
        horizon in 1usize..40,
        period in 3usize..10,
        seed in 0u64..1000,
    ) {
        let model = Model::new(ModelConfig::micro(), seed).unwrap();
        let chans: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..12 * period).map(|t| ((t + c) as f64 * 0.7).sin() * (c + 1) as f64).collect())
            .collect();
        let par = model.forecast_channels(&chans, horizon, period, Exec::Parallel).unwrap();
        let seq = model.forecast_channels(&chans, horizon, period, Exec::Sequential).unwrap();
        prop_assert_eq!(&par, &seq);
        for r in &par {
            prop_assert_eq!(r.values.len(), horizon);
            prop_assert!(r.values.iter().all(|v| v.is_finite()));
        }
    }
}
