//! Fast invariant checks runnable from the command line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::exec::Exec;
use crate::linalg::{grad_check, interp_matrix, pinv, Matrix};
use crate::model::{rope_rotate, Model, ModelConfig, ModelWeights};
use crate::periodicity::find_period_fft;
use crate::tokenizer::{delta, flex_resize, revin_denormalize, revin_normalize, ResizeCache, ResizeMode};
use crate::training::{window_loss, Window};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn penrose() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(7, 4, &mut rng);
    let p = pinv(&a)?;
    let apa = a.matmul(&p)?.matmul(&a)?;
    let pap = p.matmul(&a)?.matmul(&p)?;
    let err = apa.max_abs_diff(&a).max(pap.max_abs_diff(&p));
    Ok((err < 1e-10, format!("max error {err:.1e}")))
}

fn flex_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = random(48, 8, &mut rng);
    let same = flex_resize(&theta, 48, ResizeMode::Flex)? == theta;
    let a = interp_matrix(48, 96)?;
    let x = random(1, 48, &mut rng);
    let up = flex_resize(&theta, 96, ResizeMode::Flex)?.scale(delta(48, 96));
    let err = x.matmul(&a)?.matmul(&up)?.max_abs_diff(&x.matmul(&theta)?);
    Ok((same && err < 1e-5, format!("identity {same}, upsampling error {err:.1e}")))
}

fn revin_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = random(1, 200, &mut rng).into_vec().iter().map(|v| 3.0 * v + 7.0).collect();
    let (y, rec) = revin_normalize(&x)?;
    let back = revin_denormalize(&y, &rec);
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err < 1e-6, format!("max error {err:.1e}")))
}

fn rope_shift() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(1, 8, &mut rng).into_vec();
    let k = random(1, 8, &mut rng).into_vec();
    let dot = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
    let s0 = dot(rope_rotate(&q, 3.0, 1e4)?, rope_rotate(&k, 11.0, 1e4)?);
    let s1 = dot(rope_rotate(&q, 503.0, 1e4)?, rope_rotate(&k, 511.0, 1e4)?);
    let err = (s0 - s1).abs();
    Ok((err < 1e-6, format!("shift error {err:.1e}")))
}

fn period_recovery() -> Result<(bool, String)> {
    let mut found = Vec::new();
    for p in [8usize, 24, 96, 144] {
        let x: Vec<f64> = (0..10 * p)
            .map(|t| (std::f64::consts::TAU * t as f64 / p as f64).sin())
            .collect();
        found.push(find_period_fft(&x, 2, 5 * p, 1)?.cycle_length);
    }
    Ok((found == [8, 24, 96, 144], format!("found {found:?}")))
}

fn gradients() -> Result<(bool, String)> {
    let cfg = ModelConfig::micro();
    let layout = ModelWeights::init(&cfg, 0)?;
    let params: Vec<Matrix> = layout.leaves().into_iter().cloned().collect();
    let cache = ResizeCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = random(1, 30, &mut rng).into_vec();
    let (lookback, rec) = revin_normalize(&raw[..18])?;
    let window = Window {
        lookback,
        target: rec.normalize(&raw[18..]),
        patch: 6,
        source: 0,
        channel: 0,
        start: 0,
    };
    let err = grad_check(
        |t, vars| {
            let w = ModelWeights::from_leaves(&layout, vars.to_vec())?;
            window_loss(t, &cfg, &w, &cache, &window)
        },
        &params,
        1e-5,
    )?;
    Ok((err < 1e-4, format!("max relative error {err:.1e}")))
}

fn exec_agreement() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::micro(), 5)?;
    let chans: Vec<Vec<f64>> = (1..5)
        .map(|c| (0..60).map(|t| ((t * c) as f64 * 0.3).sin()).collect())
        .collect();
    let a = model.forecast_channels(&chans, 12, 6, Exec::Parallel)?;
    let b = model.forecast_channels(&chans, 12, 6, Exec::Sequential)?;
    Ok((a == b, format!("parallel equals sequential: {}", a == b)))
}

/// Runs every check; errors are reported as failures.
pub fn run() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 7] = [
        ("pseudoinverse Penrose conditions", penrose),
        ("flex-resize identity and upsampling", flex_identity),
        ("instance normalization round-trip", revin_round_trip),
        ("rotary shift invariance", rope_shift),
        ("period recovery on sinusoids", period_recovery),
        ("full-model gradient check", gradients),
        ("parallel and sequential agreement", exec_agreement),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            Check { name, pass, detail }
        })
        .collect()
}
