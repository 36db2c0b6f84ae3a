//! Forward graph of the encoder–decoder, recorded on a [`Tape`].

use super::config::{DecodingMode, ModelConfig, ReplicatedToken};
use super::rope::rope_angles;
use super::weights::{Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, ModelWeights, Norm};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, Var};
use crate::tokenizer::{patchify, ResizeCache};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers every weight on the tape, borrowing the matrices.
pub(crate) fn register<'w>(
    tape: &mut Tape<'w>,
    weights: &'w ModelWeights<Matrix>,
    trainable: bool,
) -> ModelWeights<Var> {
    let vars = weights
        .leaves()
        .into_iter()
        .map(|m| {
            if trainable {
                tape.param_ref(m)
            } else {
                tape.constant_ref(m)
            }
        })
        .collect();
    ModelWeights::from_leaves(weights, vars).expect("layout is taken from the same weights")
}

fn linear(t: &mut Tape<'_>, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = t.matmul(x, l.weight)?;
    t.add_row(y, l.bias)
}

fn layer_norm(t: &mut Tape<'_>, x: Var, n: &Norm<Var>) -> Result<Var> {
    let s = t.standardize_rows(x, LN_EPS);
    let s = t.mul_row(s, n.scale)?;
    t.add_row(s, n.bias)
}

fn feed_forward(t: &mut Tape<'_>, x: Var, f: &FeedForward<Var>) -> Result<Var> {
    let h = linear(t, x, &f.up)?;
    let h = t.gelu(h);
    linear(t, h, &f.down)
}

fn rotate(t: &mut Tape<'_>, x: Var, positions: &[f64], cfg: &ModelConfig) -> Result<Var> {
    if cfg.rope_base <= 0.0 {
        return Ok(x);
    }
    let angles = rope_angles(positions, cfg.n_heads, cfg.head_dim(), cfg.rope_base);
    t.rotate_pairs(x, &angles)
}

/// Multi-head attention with rotary queries and keys.
///
/// Scores are `rot(q_i)·rot(k_j)/sqrt(d_head)`; `causal` hides keys after
/// the query's own row index.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    a: &Attention<Var>,
    xq: Var,
    q_pos: &[f64],
    xkv: Var,
    k_pos: &[f64],
    causal: bool,
) -> Result<Var> {
    let q = linear(t, xq, &a.q)?;
    let k = linear(t, xkv, &a.k)?;
    let v = linear(t, xkv, &a.v)?;
    let q = rotate(t, q, q_pos, cfg)?;
    let k = rotate(t, k, k_pos, cfg)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, lo, hi)?;
        let kh = t.slice_cols(k, lo, hi)?;
        let vh = t.slice_cols(v, lo, hi)?;
        let scores = t.matmul_t(qh, kh)?;
        let scores = t.scale(scores, scale);
        let probs = t.softmax(scores, causal);
        heads.push(t.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)?
    };
    linear(t, merged, &a.o)
}

fn encoder_layer(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    l: &EncoderLayer<Var>,
    x: Var,
    pos: &[f64],
) -> Result<Var> {
    let h = layer_norm(t, x, &l.attn_norm)?;
    let h = attention(t, cfg, &l.attn, h, pos, h, pos, false)?;
    let x = t.add(x, h)?;
    let h = layer_norm(t, x, &l.ffn_norm)?;
    let h = feed_forward(t, h, &l.ffn)?;
    t.add(x, h)
}

/// Full encoder stack plus final norm. `pos` holds one position per token.
pub(crate) fn encode(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    tokens: Var,
    pos: &[f64],
) -> Result<Var> {
    let mut x = tokens;
    for layer in &w.encoder {
        x = encoder_layer(t, cfg, layer, x, pos)?;
    }
    layer_norm(t, x, &w.enc_norm)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    l: &DecoderLayer<Var>,
    h: Var,
    pos: &[f64],
    enc: Var,
    enc_pos: &[f64],
    causal: bool,
) -> Result<Var> {
    let a = layer_norm(t, h, &l.self_norm)?;
    let a = attention(t, cfg, &l.self_attn, a, pos, a, pos, causal)?;
    let h = t.add(h, a)?;
    let c = layer_norm(t, h, &l.cross_norm)?;
    let c = attention(t, cfg, &l.cross_attn, c, pos, enc, enc_pos, false)?;
    let h = t.add(h, c)?;
    let f = layer_norm(t, h, &l.ffn_norm)?;
    let f = feed_forward(t, f, &l.ffn)?;
    t.add(h, f)
}

/// One pass through the decoder stack plus final norm.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    h: Var,
    pos: &[f64],
    enc: Var,
    enc_pos: &[f64],
    causal: bool,
) -> Result<Var> {
    let mut x = h;
    for layer in &w.decoder {
        x = decoder_layer(t, cfg, layer, x, pos, enc, enc_pos, causal)?;
    }
    layer_norm(t, x, &w.dec_norm)
}

/// The token replicated into the decoder input (`1 × D`).
pub(crate) fn base_token(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    enc: Var,
) -> Result<Var> {
    let n = t.shape(enc).0;
    match cfg.replicated_token {
        ReplicatedToken::Last => t.slice_rows(enc, n - 1, n),
        ReplicatedToken::Mean => Ok(t.mean_rows(enc)),
        ReplicatedToken::Learned => w
            .learned_token
            .ok_or_else(|| Error::dim("learned replicated token missing from weights")),
    }
}

/// `K` copies of the base token, row `j` scaled by `ω(j)`.
pub(crate) fn ppd_init(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    enc: Var,
    k: usize,
) -> Result<Var> {
    let base = base_token(t, cfg, w, enc)?;
    let reps = t.repeat_row(base, k)?;
    t.row_scale(reps, cfg.omega(k))
}

pub(crate) fn positions(first: usize, count: usize, offset: f64) -> Vec<f64> {
    (first..first + count).map(|p| p as f64 + offset).collect()
}

pub(crate) struct Forward {
    /// `1 × horizon` prediction in normalized units.
    pub pred: Var,
    pub n_tokens: usize,
    pub k_tokens: usize,
    pub decoder_passes: usize,
}

/// Normalized lookback → normalized forecast.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_window(
    t: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    cache: &ResizeCache,
    x_norm: &[f64],
    patch: usize,
    horizon: usize,
    decoding: DecodingMode,
    pos_offset: f64,
) -> Result<Forward> {
    if horizon == 0 {
        return Err(Error::InvalidValue("horizon must be positive".into()));
    }
    let grid = patchify(x_norm, patch)?;
    let n = grid.n_patches;
    let k = horizon.div_ceil(patch);
    let reference = cfg.reference_patch;

    let theta_e = resized(t, cache, w.flex.theta_e, reference, patch, cfg)?;
    let patches = t.constant(grid.patches);
    let tokens = t.matmul(patches, theta_e)?;

    let enc_pos = positions(1, n, pos_offset);
    let enc = encode(t, cfg, w, tokens, &enc_pos)?;

    let (z, passes) = match decoding {
        DecodingMode::Ppd => {
            let h = ppd_init(t, cfg, w, enc, k)?;
            let dec_pos = positions(n + 1, k, pos_offset);
            (decode(t, cfg, w, h, &dec_pos, enc, &enc_pos, false)?, 1)
        }
        DecodingMode::Autoregressive => {
            let base = base_token(t, cfg, w, enc)?;
            let mut inputs = vec![base];
            let mut outputs = Vec::with_capacity(k);
            for j in 0..k {
                let seq = if inputs.len() == 1 {
                    inputs[0]
                } else {
                    t.concat_rows(&inputs)?
                };
                let dec_pos = positions(n + 1, j + 1, pos_offset);
                let out = decode(t, cfg, w, seq, &dec_pos, enc, &enc_pos, true)?;
                let next = t.slice_rows(out, j, j + 1)?;
                outputs.push(next);
                inputs.push(next);
            }
            let z = if outputs.len() == 1 {
                outputs[0]
            } else {
                t.concat_rows(&outputs)?
            };
            (z, k)
        }
    };

    let theta_d = resized(t, cache, w.flex.theta_d, reference, patch, cfg)?;
    let patches_out = t.matmul_t(z, theta_d)?;
    let flat = t.reshape(patches_out, 1, k * patch)?;
    let pred = if k * patch == horizon {
        flat
    } else {
        t.slice_cols(flat, 0, horizon)?
    };
    Ok(Forward {
        pred,
        n_tokens: n,
        k_tokens: k,
        decoder_passes: passes,
    })
}

fn resized(
    t: &mut Tape<'_>,
    cache: &ResizeCache,
    theta: Var,
    reference: usize,
    patch: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    if patch == reference {
        return Ok(theta);
    }
    let op = cache.get(reference, patch, cfg.resize_mode)?;
    let op = t.constant(Matrix::clone(&op));
    t.matmul(op, theta)
}
