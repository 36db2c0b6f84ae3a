//! Datasets: CSV ingestion, chronological splits and synthetic sinusoid mixtures.

use std::ops::Range;
use std::path::Path;
use std::time::Duration;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::CorpusSeries;

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatio {
    /// 6:2:2, used by the ETT family.
    pub const ETT: Self = Self {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    /// 7:1:2, used by the remaining benchmarks.
    pub const STANDARD: Self = Self {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidValue("split fractions must lie in [0, 1]".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub sampling_interval: Option<Duration>,
    pub split_ratio: SplitRatio,
}

impl Dataset {
    /// Builds a dataset with default channel names, checking that channels
    /// are non-empty and of equal length.
    pub fn new(name: impl Into<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..channels.len()).map(|c| format!("ch{c}")).collect();
        let ds = Self {
            name: name.into(),
            channel_names: names,
            channels,
            sampling_interval: None,
            split_ratio: SplitRatio::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.channels.is_empty() || len == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::dim("channels differ in length"));
        }
        if self.channel_names.len() != self.channels.len() {
            return Err(Error::dim("channel names do not match channel count"));
        }
        self.split_ratio.validate()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn with_split(mut self, ratio: SplitRatio) -> Result<Self> {
        ratio.validate()?;
        self.split_ratio = ratio;
        Ok(self)
    }

    /// Training source for the sampler, at the given cycle length.
    pub fn to_corpus_series(&self, cycle_length: usize) -> CorpusSeries {
        CorpusSeries {
            name: self.name.clone(),
            channels: self.channels.clone(),
            cycle_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimestampColumn {
    /// Treat the first column as timestamps when its first cell is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub timestamp: TimestampColumn,
    /// Replace missing or non-finite cells with the previous value in the channel.
    pub forward_fill: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            timestamp: TimestampColumn::Auto,
            forward_fill: false,
        }
    }
}

const TIME_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y/%m/%d %H:%M",
];

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Loads a CSV whose rows are time steps. Row indices in errors count data
/// rows from zero.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(&name, &text, options)
}

pub fn parse_csv(name: &str, text: &str, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Option<Vec<String>> = if options.has_header {
        let h = reader
            .headers()
            .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?;
        Some(h.iter().map(str::to_owned).collect())
    } else {
        None
    };

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i, msg: e.to_string() })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push(rec);
    }
    let Some(first) = rows.first() else {
        return Err(Error::EmptyDataset);
    };
    let width = first.len();
    let skip = match options.timestamp {
        TimestampColumn::Present => 1,
        TimestampColumn::Absent => 0,
        TimestampColumn::Auto => usize::from(first[0].parse::<f64>().is_err()),
    };
    if width <= skip {
        return Err(Error::EmptyDataset);
    }
    let n_ch = width - skip;
    let mut channels = vec![Vec::with_capacity(rows.len()); n_ch];
    for (row, rec) in rows.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().skip(skip).enumerate() {
            let parsed = cell.parse::<f64>().ok();
            let value = match parsed {
                Some(v) if v.is_finite() => v,
                _ if options.forward_fill && (cell.is_empty() || parsed.is_some()) => {
                    *channels[c].last().ok_or_else(|| Error::Parse {
                        row,
                        msg: format!("missing value in column {} with nothing to carry forward", c + skip),
                    })?
                }
                Some(v) => {
                    return Err(Error::Parse {
                        row,
                        msg: format!("non-finite value {v} in column {}", c + skip),
                    })
                }
                None => {
                    return Err(Error::Parse {
                        row,
                        msg: format!("cannot parse {cell:?} in column {}", c + skip),
                    })
                }
            };
            channels[c].push(value);
        }
    }

    let sampling_interval = if skip == 1 && rows.len() >= 2 {
        match (parse_time(&rows[0][0]), parse_time(&rows[1][0])) {
            (Some(a), Some(b)) => (b - a).to_std().ok().filter(|d| !d.is_zero()),
            _ => None,
        }
    } else {
        None
    };
    let channel_names = match header {
        Some(h) if h.len() == width => h[skip..].to_vec(),
        _ => (0..n_ch).map(|c| format!("ch{c}")).collect(),
    };
    let ds = Dataset {
        name: name.to_owned(),
        channel_names,
        channels,
        sampling_interval,
        split_ratio: SplitRatio::default(),
    };
    ds.validate()?;
    Ok(ds)
}

/// A contiguous time range of a dataset, borrowing its channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<'a> {
    pub range: Range<usize>,
    pub channels: Vec<&'a [f64]>,
}

impl Segment<'_> {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<'a> {
    pub train: Segment<'a>,
    pub val: Segment<'a>,
    pub test: Segment<'a>,
}

/// Segment boundaries `⌊r·len⌋` for cumulative fractions.
pub fn split_bounds(len: usize, ratio: &SplitRatio) -> Result<[Range<usize>; 3]> {
    ratio.validate()?;
    // The tolerance absorbs representation error such as 0.7 + 0.1 < 0.8.
    let at = |r: f64| (((r * len as f64) + 1e-9).floor() as usize).min(len);
    let b1 = at(ratio.train);
    let b2 = at(ratio.train + ratio.val).max(b1);
    let b3 = if ratio.test == 0.0 { b2 } else { len };
    Ok([0..b1, b1..b2, b2..b3])
}

pub fn split_chronological(ds: &Dataset) -> Result<Split<'_>> {
    let [a, b, c] = split_bounds(ds.len(), &ds.split_ratio)?;
    let seg = |r: Range<usize>| Segment {
        channels: ds.channels.iter().map(|ch| &ch[r.clone()]).collect(),
        range: r,
    };
    Ok(Split {
        train: seg(a),
        val: seg(b),
        test: seg(c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Component periods in base-granularity samples.
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise_std: f64,
    /// Output length in samples at the requested granularity.
    pub length: usize,
    /// Keep every `granularity`-th base sample; fractions sample finer.
    pub granularity: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            periods: vec![24.0],
            amplitudes: vec![1.0],
            noise_std: 0.0,
            length: 2400,
            granularity: 1.0,
            channels: 1,
            seed: 0,
        }
    }
}

/// Sum of sinusoids plus Gaussian noise. Phases depend only on the seed, so
/// changing `granularity` resamples the same underlying signal.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.periods.len() != spec.amplitudes.len() || spec.periods.is_empty() {
        return Err(Error::InvalidValue(
            "periods and amplitudes must be non-empty and of equal length".into(),
        ));
    }
    if !(spec.granularity > 0.0 && spec.granularity.is_finite()) {
        return Err(Error::InvalidValue("granularity must be positive".into()));
    }
    if spec.periods.iter().any(|p| !(p / spec.granularity >= 2.0)) {
        return Err(Error::InvalidValue(
            "every period must span at least 2 samples at the requested granularity".into(),
        ));
    }
    if !(spec.noise_std >= 0.0) || spec.channels == 0 || spec.length == 0 {
        return Err(Error::InvalidValue(
            "noise_std must be non-negative; channels and length positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let phases: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| spec.periods.iter().map(|_| phase.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    let channels = phases
        .iter()
        .map(|ph| {
            (0..spec.length)
                .map(|i| {
                    let t = i as f64 * spec.granularity;
                    let clean: f64 = spec
                        .periods
                        .iter()
                        .zip(&spec.amplitudes)
                        .zip(ph)
                        .map(|((p, a), phi)| a * (std::f64::consts::TAU * t / p + phi).sin())
                        .sum();
                    if spec.noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();
    let mut ds = Dataset::new("synthetic", channels)?;
    ds.split_ratio = SplitRatio::STANDARD;
    Ok(ds)
}
