use std::fs;
use std::path::{Path, PathBuf};

use flexcast::data::{load_csv, split_chronological, CsvOptions, Dataset};
use flexcast::eval::{evaluate, ChannelStats, EvalOptions, EvalReport};
use flexcast::periodicity::{find_period, PeriodEstimate};
use flexcast::training::{load_checkpoint, save_checkpoint, Checkpoint, Corpus};
use flexcast::{Model, Trainer};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] flexcast::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0} self-test check(s) failed")]
    SelfTest(usize),
}

impl CliError {
    /// 2 configuration, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(flexcast::Error::Diverged { .. }) => 4,
            CliError::Core(_) | CliError::Io { .. } => 3,
            CliError::SelfTest(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let opts = CsvOptions {
        forward_fill: cfg.forward_fill,
        ..CsvOptions::default()
    };
    let ds = load_csv(path, &opts)?;
    Ok(match cfg.split {
        Some(r) => ds.with_split(r)?,
        None => ds,
    })
}

/// FFT period of the averaged, standardized training channels unless the
/// configuration fixes one.
pub fn resolve_period(ds: &Dataset, cfg: &RunConfig) -> Result<PeriodEstimate> {
    if let Some(p) = cfg.period {
        return Ok(PeriodEstimate {
            cycle_length: p,
            source: flexcast::periodicity::PeriodSource::Metadata,
            confidence: 1.0,
        });
    }
    let split = split_chronological(ds)?;
    let len = split.train.len();
    let mut mean = vec![0.0; len];
    for ch in &split.train.channels {
        let z = ChannelStats::of(ch)?.apply(ch);
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v / split.train.channels.len() as f64;
        }
    }
    let min_patches = cfg.train.n_hist_tokens + cfg.train.n_pred_tokens;
    Ok(find_period(&mean, min_patches, cfg.model.reference_patch)?)
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Core(flexcast::Error::EmptyCorpus));
    }
    Ok(files)
}

fn corpus_for(datasets: &[Dataset], cfg: &RunConfig) -> Result<Corpus> {
    let mut series = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let cycle = resolve_period(ds, cfg)?.cycle_length;
        let split = split_chronological(ds)?;
        series.push(flexcast::training::CorpusSeries {
            name: ds.name.clone(),
            channels: split.train.channels.iter().map(|c| c.to_vec()).collect(),
            cycle_length: cycle,
        });
    }
    Ok(Corpus::new(series))
}

fn train(trainer: &mut Trainer, corpus: &Corpus, steps: u64) -> Result<()> {
    let every = (steps / 10).max(1);
    trainer.fit(corpus, steps, |step, loss| {
        if step % every == 0 || step == steps {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    Ok(())
}

fn write_checkpoint(trainer: &Trainer, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join("model.ckpt");
    save_checkpoint(&path, &trainer.checkpoint())?;
    Ok(path)
}

/// Checkpointed model with the inference options the run set explicitly.
fn load_model(cfg: &RunConfig) -> Result<(Checkpoint, Model)> {
    let ckpt = load_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    let mut model_cfg = ckpt.config.clone();
    if cfg.is_explicit("decoding") {
        model_cfg.decoding = cfg.model.decoding;
    }
    if cfg.is_explicit("patching") {
        model_cfg.patching = cfg.model.patching;
    }
    if cfg.is_explicit("fixed_patch") {
        model_cfg.fixed_patch = cfg.model.fixed_patch;
    }
    if cfg.is_explicit("resize") {
        model_cfg.resize_mode = cfg.model.resize_mode;
    }
    let model = Model::from_parts(model_cfg, ckpt.weights.clone())?;
    Ok((ckpt, model))
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = require(&cfg.data, "data")?;
    let datasets = csv_files(data)?
        .iter()
        .map(|p| load_dataset(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let corpus = corpus_for(&datasets, cfg)?;
    for s in &corpus.series {
        eprintln!("{}: {} channels, cycle length {}", s.name, s.channels.len(), s.cycle_length);
    }
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    eprintln!("model with {} parameters", model.param_count());
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    train(&mut trainer, &corpus, cfg.train.steps)?;
    let path = write_checkpoint(&trainer, &cfg.out)?;
    println!("{}", path.display());
    Ok(())
}

fn finetuned(cfg: &RunConfig, ds: &Dataset) -> Result<Trainer> {
    let (ckpt, model) = load_model(cfg)?;
    let resumed = Checkpoint {
        config: model.config().clone(),
        ..ckpt
    };
    let mut trainer = Trainer::resume(resumed, cfg.train.clone())?;
    let corpus = corpus_for(std::slice::from_ref(ds), cfg)?;
    train(&mut trainer, &corpus, cfg.train.steps)?;
    Ok(trainer)
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(require(&cfg.data, "data")?, cfg)?;
    let trainer = finetuned(cfg, &ds)?;
    let path = write_checkpoint(&trainer, &cfg.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn fingerprint(model: &Model, step: u64) -> String {
    let c = model.config();
    format!(
        "enc{}-dec{}-d{}-ref{}-{}-{}-{}-{}-step{}",
        c.enc_layers,
        c.dec_layers,
        c.d_model,
        c.reference_patch,
        c.decoding,
        c.patching,
        c.resize_mode,
        c.replicated_token,
        step
    )
}

pub fn run_evaluate(cfg: &RunConfig, zero_shot: bool) -> Result<EvalReport> {
    let ds = load_dataset(require(&cfg.data, "data")?, cfg)?;
    let (model, step) = if zero_shot {
        let (ckpt, model) = load_model(cfg)?;
        (model, ckpt.step)
    } else {
        let trainer = finetuned(cfg, &ds)?;
        let step = trainer.step_count();
        (trainer.into_model(), step)
    };
    let cycle = resolve_period(&ds, cfg)?.cycle_length;
    let split = split_chronological(&ds)?;
    let opts = EvalOptions {
        n_tokens: cfg.train.n_hist_tokens,
        fingerprint: fingerprint(&model, step),
        ..EvalOptions::new(cfg.horizons.clone(), cycle)
    };
    Ok(evaluate(&model, &ds.name, &split, &opts)?)
}

pub fn evaluate_cmd(cfg: &RunConfig, zero_shot: bool) -> Result<()> {
    let report = run_evaluate(cfg, zero_shot)?;
    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    let path = cfg.out.join("report.txt");
    fs::write(&path, report.to_string()).map_err(io(&path))?;
    print!("{report}");
    Ok(())
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(require(&cfg.data, "data")?, cfg)?;
    let (_, model) = load_model(cfg)?;
    let horizon = cfg.horizons[0];
    let cycle = resolve_period(&ds, cfg)?.cycle_length;
    let lookback = cfg.train.n_hist_tokens * model.config().patch_length(cycle);
    let histories: Vec<Vec<f64>> = ds
        .channels
        .iter()
        .map(|c| c[c.len().saturating_sub(lookback)..].to_vec())
        .collect();
    let results = model.forecast_channels(&histories, horizon, cycle, flexcast::Exec::default())?;

    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    let path = cfg.out.join("forecast.csv");
    let csv_err = |e: csv::Error| CliError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(&ds.channel_names).map_err(csv_err)?;
    for t in 0..horizon {
        w.write_record(results.iter().map(|r| r.values[t].to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    println!("{}", path.display());
    Ok(())
}

pub fn find_period_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(require(&cfg.data, "data")?, cfg)?;
    let split = split_chronological(&ds)?;
    let min_patches = cfg.train.n_hist_tokens + cfg.train.n_pred_tokens;
    for (name, ch) in ds.channel_names.iter().zip(&split.train.channels) {
        let est = find_period(ch, min_patches, cfg.model.reference_patch)?;
        println!("{name} {} {:?} {:.3}", est.cycle_length, est.source, est.confidence);
    }
    let est = resolve_period(&ds, cfg)?;
    println!("dataset {} {:?} {:.3}", est.cycle_length, est.source, est.confidence);
    Ok(())
}

pub fn selftest() -> Result<()> {
    let checks = flexcast::selftest::run();
    let failed = checks.iter().filter(|c| !c.pass).count();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(CliError::SelfTest(failed));
    }
    Ok(())
}
