//! Sliding-window evaluation with MSE and MAE on train-standardized data.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::exec::{compensated_sum, Exec};
use crate::model::Model;
use crate::tokenizer::NORM_EPS;

/// Position of a window inside the test segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowCtx {
    pub channel: usize,
    /// Index of the first history point within the test segment.
    pub start: usize,
    pub cycle_length: usize,
}

pub trait Forecaster: Sync {
    /// History length consumed for a series with the given cycle length.
    fn lookback(&self, cycle_length: usize, n_tokens: usize) -> usize;

    fn predict(&self, ctx: &WindowCtx, history: &[f64], horizon: usize) -> Result<Vec<f64>>;
}

impl Forecaster for Model {
    fn lookback(&self, cycle_length: usize, n_tokens: usize) -> usize {
        n_tokens * self.config().patch_length(cycle_length)
    }

    fn predict(&self, ctx: &WindowCtx, history: &[f64], horizon: usize) -> Result<Vec<f64>> {
        Ok(self.forecast(history, horizon, ctx.cycle_length)?.values)
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn of(x: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InsufficientHistory("no training points for statistics".into()));
        }
        let n = x.len() as f64;
        let mean = compensated_sum(x.iter().copied()) / n;
        let var = compensated_sum(x.iter().map(|v| (v - mean) * (v - mean))) / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(NORM_EPS),
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

/// Test channels standardized with training statistics.
pub fn standardize_test(split: &Split<'_>) -> Result<Vec<Vec<f64>>> {
    split
        .train
        .channels
        .iter()
        .zip(&split.test.channels)
        .map(|(tr, te)| Ok(ChannelStats::of(tr)?.apply(te)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    /// Lookback tokens `N`; the lookback is `N·P`.
    pub n_tokens: usize,
    pub cycle_length: usize,
    /// Windows per chunk; `None` evaluates everything in one chunk. The last
    /// chunk is kept even when short.
    pub batch_size: Option<usize>,
    pub exec: Exec,
    pub fingerprint: String,
}

impl EvalOptions {
    pub fn new(horizons: Vec<usize>, cycle_length: usize) -> Self {
        Self {
            horizons,
            n_tokens: 10,
            cycle_length,
            batch_size: None,
            exec: Exec::default(),
            fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub cycle_length: usize,
    pub lookback: usize,
    pub fingerprint: String,
    pub metrics: Vec<HorizonMetrics>,
}

impl EvalReport {
    pub fn get(&self, horizon: usize) -> Option<&HorizonMetrics> {
        self.metrics.iter().find(|m| m.horizon == horizon)
    }

    /// Mean MSE over horizons.
    pub fn mean_mse(&self) -> f64 {
        self.metrics.iter().map(|m| m.mse).sum::<f64>() / self.metrics.len().max(1) as f64
    }
}

/// One `dataset horizon metric value` line per metric, after a commented
/// header.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(
            s,
            "# cycle_length={} lookback={} fingerprint={}",
            self.cycle_length,
            self.lookback,
            if self.fingerprint.is_empty() { "-" } else { &self.fingerprint }
        )?;
        for m in &self.metrics {
            writeln!(s, "{} {} mse {:.10}", self.dataset, m.horizon, m.mse)?;
            writeln!(s, "{} {} mae {:.10}", self.dataset, m.horizon, m.mae)?;
            writeln!(s, "{} {} n_windows {}", self.dataset, m.horizon, m.n_windows)?;
        }
        f.write_str(&s)
    }
}

/// Stride-1 evaluation over the test segment of `split`, standardized with
/// the train segment's per-channel statistics.
pub fn evaluate<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &str,
    split: &Split<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let test = standardize_test(split)?;
    evaluate_series(model, dataset, &test, opts)
}

/// As [`evaluate`], on channels that are already standardized.
pub fn evaluate_series<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &str,
    channels: &[Vec<f64>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.horizons.is_empty() || opts.horizons.contains(&0) {
        return Err(Error::InvalidValue("horizons must be non-empty and positive".into()));
    }
    if channels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lookback = model.lookback(opts.cycle_length, opts.n_tokens);
    let len = channels[0].len();
    let mut metrics = Vec::with_capacity(opts.horizons.len());
    for &horizon in &opts.horizons {
        let per_channel = (len + 1).saturating_sub(lookback + horizon);
        if per_channel == 0 || lookback == 0 {
            return Err(Error::InsufficientHistory(format!(
                "test length {len} cannot hold lookback {lookback} plus horizon {horizon}"
            )));
        }
        let windows: Vec<WindowCtx> = (0..channels.len())
            .flat_map(|channel| {
                (0..per_channel).map(move |start| WindowCtx {
                    channel,
                    start,
                    cycle_length: opts.cycle_length,
                })
            })
            .collect();
        let chunk = opts.batch_size.unwrap_or(windows.len()).max(1);
        let mut sq = Vec::with_capacity(windows.len());
        let mut abs = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk) {
            let errs = opts.exec.map(part, |ctx| {
                let x = &channels[ctx.channel];
                let hist = &x[ctx.start..ctx.start + lookback];
                let truth = &x[ctx.start + lookback..ctx.start + lookback + horizon];
                let pred = model.predict(ctx, hist, horizon)?;
                if pred.len() != horizon {
                    return Err(Error::dim(format!(
                        "forecaster returned {} values for horizon {horizon}",
                        pred.len()
                    )));
                }
                let d: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
                Ok((
                    compensated_sum(d.iter().map(|e| e * e)),
                    compensated_sum(d.iter().map(|e| e.abs())),
                ))
            });
            for e in errs {
                let (s, a) = e?;
                sq.push(s);
                abs.push(a);
            }
        }
        let denom = (windows.len() * horizon) as f64;
        let mse = compensated_sum(sq) / denom;
        let mae = compensated_sum(abs) / denom;
        if !(mse.is_finite() && mae.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite metrics at horizon {horizon}")));
        }
        metrics.push(HorizonMetrics {
            horizon,
            mse,
            mae,
            n_windows: windows.len(),
        });
    }
    Ok(EvalReport {
        dataset: dataset.to_owned(),
        cycle_length: opts.cycle_length,
        lookback,
        fingerprint: opts.fingerprint.clone(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, split_chronological, SyntheticSpec};

    struct Oracle<'a>(&'a [Vec<f64>], usize);

    impl Forecaster for Oracle<'_> {
        fn lookback(&self, _: usize, _: usize) -> usize {
            self.1
        }
        fn predict(&self, ctx: &WindowCtx, _: &[f64], horizon: usize) -> Result<Vec<f64>> {
            let s = ctx.start + self.1;
            Ok(self.0[ctx.channel][s..s + horizon].to_vec())
        }
    }

    struct Zero(usize);

    impl Forecaster for Zero {
        fn lookback(&self, _: usize, _: usize) -> usize {
            self.0
        }
        fn predict(&self, _: &WindowCtx, _: &[f64], horizon: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; horizon])
        }
    }

    fn noise_dataset() -> crate::data::Dataset {
        make_synthetic(&SyntheticSpec {
            amplitudes: vec![0.0],
            noise_std: 1.0,
            length: 5000,
            channels: 2,
            seed: 9,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_scores_zero_and_counts_windows() {
        let ds = noise_dataset();
        let split = split_chronological(&ds).unwrap();
        let test = standardize_test(&split).unwrap();
        let opts = EvalOptions::new(vec![24, 96], 24);
        let r = evaluate(&Oracle(&test, 240), "noise", &split, &opts).unwrap();
        let t = split.test.len();
        for m in &r.metrics {
            assert_eq!((m.mse, m.mae), (0.0, 0.0));
            assert_eq!(m.n_windows, 2 * (t - 240 - m.horizon + 1));
        }
    }

    #[test]
    fn zero_predictor_on_standard_noise() {
        let ds = noise_dataset();
        let split = split_chronological(&ds).unwrap();
        let r = evaluate(&Zero(48), "noise", &split, &EvalOptions::new(vec![24], 24)).unwrap();
        assert!((r.metrics[0].mse - 1.0).abs() < 0.05, "{}", r.metrics[0].mse);
    }

    #[test]
    fn batching_does_not_change_metrics() {
        let ds = noise_dataset();
        let split = split_chronological(&ds).unwrap();
        let base = evaluate(&Zero(48), "n", &split, &EvalOptions::new(vec![24, 48], 24)).unwrap();
        for (bs, exec) in [(Some(1), Exec::Sequential), (Some(7), Exec::Parallel), (Some(100_000), Exec::Parallel)] {
            let opts = EvalOptions {
                batch_size: bs,
                exec,
                ..EvalOptions::new(vec![24, 48], 24)
            };
            let r = evaluate(&Zero(48), "n", &split, &opts).unwrap();
            for (a, b) in r.metrics.iter().zip(&base.metrics) {
                assert!((a.mse - b.mse).abs() <= 1e-9 && (a.mae - b.mae).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn too_short_test_segment() {
        let ds = noise_dataset();
        let split = split_chronological(&ds).unwrap();
        let err = evaluate(&Zero(5000), "n", &split, &EvalOptions::new(vec![24], 24));
        assert!(matches!(err, Err(Error::InsufficientHistory(_))));
    }

    #[test]
    fn report_text_lines() {
        let r = EvalReport {
            dataset: "d".into(),
            cycle_length: 24,
            lookback: 240,
            fingerprint: "abc".into(),
            metrics: vec![HorizonMetrics {
                horizon: 96,
                mse: 0.5,
                mae: 0.25,
                n_windows: 3,
            }],
        };
        let text = r.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "d 96 mse 0.5000000000");
        assert_eq!(lines[2], "d 96 mae 0.2500000000");
        assert_eq!(lines.len(), 4);
    }
}
