//! Cycle-length detection from sampling metadata or the FFT amplitude
//! spectrum.

use std::time::Duration;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest series accepted by [`find_period_fft`].
pub const MIN_FFT_LEN: usize = 8;

/// Total non-DC amplitude below which a series is treated as constant.
const FLAT_SPECTRUM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodSource {
    Metadata,
    Fft,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    /// Data points per intrinsic period.
    pub cycle_length: usize,
    pub source: PeriodSource,
    /// Winning amplitude over total non-DC amplitude.
    pub confidence: f64,
}

/// Amplitude spectrum `|X_k|` for `k = 0..=L/2` of the mean-removed input.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf.iter().map(|c| c.norm()).collect()
}

/// Picks the dominant spectral bin whose implied period `round(L/k)` lies in
/// `[p_min, p_max]`. Equal amplitudes resolve to the larger period. A flat
/// spectrum yields `fallback` with [`PeriodSource::Fallback`].
pub fn find_period_fft(
    x: &[f64],
    p_min: usize,
    p_max: usize,
    fallback: usize,
) -> Result<PeriodEstimate> {
    let len = x.len();
    if len < MIN_FFT_LEN {
        return Err(Error::InsufficientHistory(format!(
            "period finding needs at least {MIN_FFT_LEN} points, got {len}"
        )));
    }
    if p_min < 2 || p_min > p_max || p_max > len / 2 {
        return Err(Error::InvalidValue(format!(
            "period bounds [{p_min}, {p_max}] invalid for length {len}"
        )));
    }

    let amp = amplitude_spectrum(x);
    let total: f64 = amp[1..].iter().sum();
    if total < FLAT_SPECTRUM {
        return Ok(PeriodEstimate {
            cycle_length: fallback,
            source: PeriodSource::Fallback,
            confidence: 0.0,
        });
    }

    let mut best: Option<(usize, f64)> = None;
    // Ascending k means descending period, so a strict comparison keeps the
    // larger period on ties.
    for (k, &a) in amp.iter().enumerate().skip(1) {
        let period = (len as f64 / k as f64).round() as usize;
        if period < p_min || period > p_max {
            continue;
        }
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((k, a));
        }
    }

    Ok(match best {
        Some((k, a)) => PeriodEstimate {
            cycle_length: (len as f64 / k as f64).round() as usize,
            source: PeriodSource::Fft,
            confidence: a / total,
        },
        None => PeriodEstimate {
            cycle_length: fallback,
            source: PeriodSource::Fallback,
            confidence: 0.0,
        },
    })
}

/// FFT period search with default bounds: `p_min = 2` and `p_max` chosen so at
/// least `min_patches` whole cycles fit the series.
pub fn find_period(x: &[f64], min_patches: usize, fallback: usize) -> Result<PeriodEstimate> {
    let len = x.len();
    if len < MIN_FFT_LEN {
        return Err(Error::InsufficientHistory(format!(
            "period finding needs at least {MIN_FFT_LEN} points, got {len}"
        )));
    }
    let p_max = (len / min_patches.max(2)).max(2);
    find_period_fft(x, 2, p_max, fallback)
}

/// Cycle length from sampling metadata, e.g. hourly samples of a daily
/// pattern give 24.
pub fn cycle_length_from_interval(
    sampling_interval: Duration,
    intrinsic_period: Duration,
) -> Result<usize> {
    let interval = sampling_interval.as_nanos();
    let period = intrinsic_period.as_nanos();
    let non_integral = || Error::NonIntegralCycle {
        interval_secs: sampling_interval.as_secs_f64(),
        period_secs: intrinsic_period.as_secs_f64(),
    };
    if interval == 0 || period == 0 || !period.is_multiple_of(interval) {
        return Err(non_integral());
    }
    usize::try_from(period / interval).map_err(|_| non_integral())
}

/// Metadata-based estimate; for multi-period series pass the shortest
/// intrinsic period.
pub fn period_from_metadata(
    sampling_interval: Duration,
    intrinsic_period: Duration,
) -> Result<PeriodEstimate> {
    Ok(PeriodEstimate {
        cycle_length: cycle_length_from_interval(sampling_interval, intrinsic_period)?,
        source: PeriodSource::Metadata,
        confidence: 1.0,
    })
}
