//! Windowed channel-independent training with an MSE objective, Adam and a
//! step-decay learning-rate schedule.

mod checkpoint;
mod optim;
mod sampler;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sampler::{sample_window_batch, Batch, Corpus, CorpusSeries, Window};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{compensated_sum, Exec};
use crate::linalg::{Matrix, Tape, Var};
use crate::model::{graph, Model, ModelConfig, ModelWeights};
use crate::tokenizer::ResizeCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    /// Epochs between learning-rate decays.
    pub step_size: u64,
    pub gamma: f64,
    /// Optimizer steps that make up one epoch-equivalent.
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    /// Lookback tokens `N`.
    pub n_hist_tokens: usize,
    /// Predicted tokens `K`.
    pub n_pred_tokens: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            step_size: 1,
            gamma: 0.5,
            steps_per_epoch: 500,
            batch_size: 64,
            n_hist_tokens: 10,
            n_pred_tokens: 4,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::InvalidValue("lr_init must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidValue("gamma must lie in (0, 1]".into()));
        }
        if self.n_hist_tokens < 2 {
            return Err(Error::InvalidValue("n_hist_tokens must be at least 2".into()));
        }
        if self.n_pred_tokens < 1 || self.batch_size < 1 {
            return Err(Error::InvalidValue(
                "n_pred_tokens and batch_size must be at least 1".into(),
            ));
        }
        if self.step_size < 1 || self.steps_per_epoch < 1 {
            return Err(Error::InvalidValue(
                "step_size and steps_per_epoch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr_init · gamma^⌊epoch / step_size⌋`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let epoch = step / cfg.steps_per_epoch.max(1);
    let decays = epoch / cfg.step_size.max(1);
    cfg.lr_init * cfg.gamma.powi(decays.min(i32::MAX as u64) as i32)
}

/// Mean of squared elementwise differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "prediction length {} differs from target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Records the normalized-space MSE of one window on `t`.
pub fn window_loss(
    t: &mut Tape<'_>,
    config: &ModelConfig,
    weights: &ModelWeights<Var>,
    cache: &ResizeCache,
    window: &Window,
) -> Result<Var> {
    let fwd = graph::forward_window(
        t,
        config,
        weights,
        cache,
        &window.lookback,
        window.patch,
        window.target.len(),
        config.decoding,
        0.0,
    )?;
    t.mse(fwd.pred, &Matrix::row_vector(&window.target))
}

/// Normalized-space loss and parameter gradients for one window.
pub fn window_gradient(model: &Model, window: &Window) -> Result<(f64, Vec<Matrix>)> {
    let mut t = Tape::new();
    let vars = graph::register(&mut t, model.weights(), true);
    let loss = window_loss(&mut t, model.config(), &vars, model.cache(), window)?;
    let value = t.value(loss).as_slice()[0];
    let grads = t.backward(loss);
    let per_param = vars
        .leaves()
        .into_iter()
        .zip(model.weights().leaves())
        .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
        .collect();
    Ok((value, per_param))
}

/// Batch-mean loss without gradients.
pub fn batch_loss(model: &Model, batch: &Batch, exec: Exec) -> Result<f64> {
    if batch.windows.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let losses = exec.map(&batch.windows, |w| {
        let mut t = Tape::new();
        let vars = graph::register(&mut t, model.weights(), false);
        let loss = window_loss(&mut t, model.config(), &vars, model.cache(), w)?;
        Ok(t.value(loss).as_slice()[0])
    });
    let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(losses) / batch.windows.len() as f64)
}

/// Batch-mean loss and gradients. Per-window work runs under `exec`; the
/// reduction is sequential in bucket order, so the result does not depend
/// on the policy.
pub fn batch_gradient(model: &Model, batch: &Batch, exec: Exec) -> Result<(f64, Vec<Matrix>)> {
    if batch.windows.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let mut acc: Vec<Matrix> = model
        .weights()
        .leaves()
        .into_iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut loss_sum = 0.0;
    for (_, windows) in batch.buckets() {
        let results = exec.map(&windows, |w| window_gradient(model, w));
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
        }
    }
    let inv = 1.0 / batch.windows.len() as f64;
    for a in &mut acc {
        a.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss_sum * inv, acc))
}

/// Forward, backward and one Adam update at the learning rate for `step`.
/// A non-finite loss or gradient rejects the step and leaves the weights
/// untouched.
pub fn train_step(
    batch: &Batch,
    model: &mut Model,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: u64,
    exec: Exec,
) -> Result<f64> {
    let (loss, grads) = batch_gradient(model, batch, exec)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, loss });
    }
    let mut params = model.weights_mut().leaves_mut();
    opt.update(&mut params, &grads, lr_at(step, cfg))?;
    Ok(loss)
}

/// Owns a model and its optimizer state. Step `s` samples its batch from
/// ChaCha stream `s` of the configured seed, so a resumed run draws the same
/// batches as an uninterrupted one.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    opt: Adam,
    cfg: TrainConfig,
    step: u64,
    exec: Exec,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(model.weights().leaves());
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
            exec: Exec::default(),
        })
    }

    /// Continues from a checkpoint, reusing its optimizer moments if present.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_parts(ckpt.config, ckpt.weights)?;
        let opt = match ckpt.optimizer {
            Some(opt) => opt,
            None => Adam::new(model.weights().leaves()),
        };
        Ok(Self {
            model,
            opt,
            cfg,
            step: ckpt.step,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&mut self, corpus: &Corpus) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let batch = sample_window_batch(corpus, &self.cfg, self.model.config(), &mut rng)?;
        let loss = train_step(
            &batch,
            &mut self.model,
            &mut self.opt,
            &self.cfg,
            self.step,
            self.exec,
        )?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `steps` optimizer steps and returns the loss trajectory.
    pub fn fit(
        &mut self,
        corpus: &Corpus,
        steps: u64,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let loss = self.step(corpus)?;
            on_step(self.step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Snapshot with weights rounded to the on-disk precision.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.model.config().clone(),
            self.model.weights().clone(),
            Some(self.opt.clone()),
            self.step,
        )
    }
}
