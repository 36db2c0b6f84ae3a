use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::revin_normalize;

/// One multichannel training source with its cycle length.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSeries {
    pub name: String,
    pub channels: Vec<Vec<f64>>,
    pub cycle_length: usize,
}

impl CorpusSeries {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_points(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub series: Vec<CorpusSeries>,
}

impl Corpus {
    pub fn new(series: Vec<CorpusSeries>) -> Self {
        Self { series }
    }
}

/// A univariate training window, normalized with the lookback's statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub lookback: Vec<f64>,
    pub target: Vec<f64>,
    /// Patch length the window was cut for.
    pub patch: usize,
    pub source: usize,
    pub channel: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: Vec<Window>,
}

impl Batch {
    /// Windows grouped by patch length, in first-seen order.
    pub fn buckets(&self) -> Vec<(usize, Vec<&Window>)> {
        let mut out: Vec<(usize, Vec<&Window>)> = Vec::new();
        for w in &self.windows {
            match out.iter_mut().find(|(p, _)| *p == w.patch) {
                Some((_, v)) => v.push(w),
                None => out.push((w.patch, vec![w])),
            }
        }
        out
    }
}

/// Draws a batch of `(N+K)·P` windows: a source with probability
/// proportional to its point count, then a channel and a start offset
/// uniformly. Sources too short for one window are skipped.
pub fn sample_window_batch(
    corpus: &Corpus,
    cfg: &TrainConfig,
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let eligible: Vec<(usize, usize, usize)> = corpus
        .series
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let patch = model.patch_length(s.cycle_length);
            let need = (cfg.n_hist_tokens + cfg.n_pred_tokens) * patch;
            (patch > 0 && !s.channels.is_empty() && s.len() >= need).then_some((i, patch, need))
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let weights: Vec<usize> = eligible
        .iter()
        .map(|&(i, _, _)| corpus.series[i].total_points())
        .collect();
    let total: usize = weights.iter().sum();

    let mut windows = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let mut pick = rng.random_range(0..total);
        let mut slot = 0;
        while pick >= weights[slot] {
            pick -= weights[slot];
            slot += 1;
        }
        let (source, patch, need) = eligible[slot];
        let series = &corpus.series[source];
        let channel = rng.random_range(0..series.channels.len());
        let start = rng.random_range(0..=series.len() - need);
        let raw = &series.channels[channel][start..start + need];
        let split = cfg.n_hist_tokens * patch;
        let (lookback, rec) = revin_normalize(&raw[..split])?;
        let target = rec.normalize(&raw[split..]);
        windows.push(Window {
            lookback,
            target,
            patch,
            source,
            channel,
            start,
        });
    }
    Ok(Batch { windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn series(name: &str, len: usize, cycle: usize) -> CorpusSeries {
        CorpusSeries {
            name: name.into(),
            channels: vec![(0..len).map(|t| (t as f64 * 0.3).sin()).collect(); 2],
            cycle_length: cycle,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn window_geometry() {
        let corpus = Corpus::new(vec![series("a", 1000, 24)]);
        let model = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_window_batch(&corpus, &cfg(), &model, &mut rng).unwrap();
        assert_eq!(b.windows.len(), 16);
        for w in &b.windows {
            assert_eq!((w.lookback.len(), w.target.len()), (240, 96));
            assert!(w.start + 336 <= 1000);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let corpus = Corpus::new(vec![series("a", 1000, 24), series("b", 800, 12)]);
        let model = ModelConfig::micro();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..3)
                .map(|_| sample_window_batch(&corpus, &cfg(), &model, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_series_excluded() {
        let model = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = Corpus::new(vec![series("short", 300, 24), series("ok", 400, 24)]);
        let b = sample_window_batch(&corpus, &cfg(), &model, &mut rng).unwrap();
        assert!(b.windows.iter().all(|w| w.source == 1));

        let corpus = Corpus::new(vec![series("short", 300, 24)]);
        assert!(matches!(
            sample_window_batch(&corpus, &cfg(), &model, &mut rng),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            sample_window_batch(&Corpus::default(), &cfg(), &model, &mut rng),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn buckets_group_by_patch() {
        let corpus = Corpus::new(vec![series("a", 1000, 24), series("b", 1000, 12)]);
        let model = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_window_batch(&corpus, &cfg(), &model, &mut rng).unwrap();
        let buckets = b.buckets();
        let total: usize = buckets.iter().map(|(_, v)| v.len()).sum();
        assert_eq!(total, 16);
        for (p, ws) in buckets {
            assert!(ws.iter().all(|w| w.patch == p));
        }
    }
}
