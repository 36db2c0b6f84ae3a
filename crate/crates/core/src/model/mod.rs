//! RoPE encoder–decoder with periodical parallel decoding.

mod config;
pub(crate) mod graph;
mod rope;
mod weights;

pub use config::{DecodingMode, ModelConfig, Patching, ReplicatedToken};
pub use rope::{rope_angle, rope_rotate};
pub use weights::{
    Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, ModelWeights, Norm, ParamVisit,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{Matrix, Tape};
use crate::tokenizer::{revin_normalize, NormRecord, ResizeCache};

/// Encoder latents `E`, one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub latents: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub values: Vec<f64>,
    /// Patch length actually used.
    pub cycle_length: usize,
    pub n_tokens: usize,
    pub k_tokens: usize,
    pub norm: NormRecord,
    pub decoder_passes: usize,
}

/// Configuration plus weights, with a cache of resize operators.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    cache: ResizeCache,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self {
            config,
            weights,
            cache: ResizeCache::new(),
        })
    }

    pub fn from_parts(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        if !weights.is_finite() {
            return Err(Error::InvalidValue("non-finite weights".into()));
        }
        Ok(Self {
            config,
            weights,
            cache: ResizeCache::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, ModelWeights) {
        (self.config, self.weights)
    }

    pub(crate) fn cache(&self) -> &ResizeCache {
        &self.cache
    }

    /// Switches inference-time options that do not change the weight layout.
    pub fn with_inference_options(
        mut self,
        decoding: DecodingMode,
        patching: Patching,
        resize: crate::tokenizer::ResizeMode,
    ) -> Self {
        self.config.decoding = decoding;
        self.config.patching = patching;
        self.config.resize_mode = resize;
        self
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Runs the encoder on an `N × D` token matrix at positions `1..=N`.
    pub fn encode(&self, tokens: &Matrix) -> Result<EncoderOutput> {
        self.encode_at(tokens, 0.0)
    }

    /// As [`Model::encode`] with all positions shifted by `offset`.
    pub fn encode_at(&self, tokens: &Matrix, offset: f64) -> Result<EncoderOutput> {
        self.check_width(tokens)?;
        if tokens.rows() == 0 {
            return Err(Error::dim("encoder needs at least one token"));
        }
        let mut t = Tape::new();
        let w = graph::register(&mut t, &self.weights, false);
        let x = t.constant_ref(tokens);
        let pos = graph::positions(1, tokens.rows(), offset);
        let e = graph::encode(&mut t, &self.config, &w, x, &pos)?;
        Ok(EncoderOutput {
            latents: t.value(e).clone(),
        })
    }

    /// Replicated, `ω`-reweighted decoder input (`K × D`).
    pub fn ppd_init(&self, enc: &EncoderOutput, k: usize) -> Result<Matrix> {
        if k == 0 {
            return Err(Error::InvalidValue("K must be at least 1".into()));
        }
        self.check_width(&enc.latents)?;
        let mut t = Tape::new();
        let w = graph::register(&mut t, &self.weights, false);
        let e = t.constant_ref(&enc.latents);
        let h = graph::ppd_init(&mut t, &self.config, &w, e, k)?;
        Ok(t.value(h).clone())
    }

    /// One non-causal decoder pass over `K` tokens at positions
    /// `N+1..=N+K`, attending to the encoder latents at `1..=N`.
    pub fn decode(&self, h: &Matrix, enc: &EncoderOutput) -> Result<Matrix> {
        self.decode_at(h, enc, 0.0)
    }

    pub fn decode_at(&self, h: &Matrix, enc: &EncoderOutput, offset: f64) -> Result<Matrix> {
        self.check_width(h)?;
        self.check_width(&enc.latents)?;
        let n = enc.latents.rows();
        let mut t = Tape::new();
        let w = graph::register(&mut t, &self.weights, false);
        let e = t.constant_ref(&enc.latents);
        let hv = t.constant_ref(h);
        let enc_pos = graph::positions(1, n, offset);
        let dec_pos = graph::positions(n + 1, h.rows(), offset);
        let z = graph::decode(&mut t, &self.config, &w, hv, &dec_pos, e, &enc_pos, false)?;
        Ok(t.value(z).clone())
    }

    fn check_width(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.config.d_model {
            return Err(Error::dim(format!(
                "token width {} differs from d_model {}",
                m.cols(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// Forecasts `horizon` points after `x` using the configured decoding.
    /// `period` is the series' cycle length; fixed patching ignores it.
    pub fn forecast(&self, x: &[f64], horizon: usize, period: usize) -> Result<ForecastResult> {
        self.run(x, horizon, period, self.config.decoding)
    }

    /// Forecast with autoregressive decoding regardless of the configuration:
    /// one decoder pass per future token.
    pub fn ar_forecast(&self, x: &[f64], horizon: usize, period: usize) -> Result<ForecastResult> {
        self.run(x, horizon, period, DecodingMode::Autoregressive)
    }

    fn run(
        &self,
        x: &[f64],
        horizon: usize,
        period: usize,
        decoding: DecodingMode,
    ) -> Result<ForecastResult> {
        let patch = self.config.patch_length(period);
        let (x_norm, norm) = revin_normalize(x)?;
        let mut t = Tape::new();
        let w = graph::register(&mut t, &self.weights, false);
        let fwd = graph::forward_window(
            &mut t,
            &self.config,
            &w,
            &self.cache,
            &x_norm,
            patch,
            horizon,
            decoding,
            0.0,
        )?;
        let values = norm.denormalize(t.value(fwd.pred).as_slice());
        Ok(ForecastResult {
            values,
            cycle_length: patch,
            n_tokens: fwd.n_tokens,
            k_tokens: fwd.k_tokens,
            norm,
            decoder_passes: fwd.decoder_passes,
        })
    }

    /// Channel-independent forecast of several series.
    pub fn forecast_channels(
        &self,
        channels: &[Vec<f64>],
        horizon: usize,
        period: usize,
        exec: Exec,
    ) -> Result<Vec<ForecastResult>> {
        exec.map(channels, |x| self.forecast(x, horizon, period))
            .into_iter()
            .collect()
    }
}
