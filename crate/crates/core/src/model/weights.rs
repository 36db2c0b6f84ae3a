//! Parameter containers, generic over the leaf type so the same layout holds
//! stored matrices, tape handles, gradients and optimizer moments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ReplicatedToken};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tokenizer::FlexWeights;

/// Walks every leaf with a dotted path name, in a fixed order.
pub trait ParamVisit<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T));
}

/// `y = x·W + b`, `W` is `in × out`, `b` is `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T = Matrix> {
    pub weight: T,
    pub bias: T,
}

/// Per-feature affine after row standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<T = Matrix> {
    pub scale: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention<T = Matrix> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward<T = Matrix> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T = Matrix> {
    pub attn_norm: Norm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer<T = Matrix> {
    pub self_norm: Norm<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: Norm<T>,
    pub cross_attn: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights<T = Matrix> {
    pub flex: FlexWeights<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: Norm<T>,
    /// Present only with [`ReplicatedToken::Learned`].
    pub learned_token: Option<T>,
}

impl<T> ParamVisit<T> for Linear<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T> ParamVisit<T> for Norm<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.scale"), &self.scale);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.scale);
        f(&mut self.bias);
    }
}

impl<T> ParamVisit<T> for Attention<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.q.visit_named(&format!("{prefix}.q"), f);
        self.k.visit_named(&format!("{prefix}.k"), f);
        self.v.visit_named(&format!("{prefix}.v"), f);
        self.o.visit_named(&format!("{prefix}.o"), f);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.q.visit_mut_all(f);
        self.k.visit_mut_all(f);
        self.v.visit_mut_all(f);
        self.o.visit_mut_all(f);
    }
}

impl<T> ParamVisit<T> for FeedForward<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.up.visit_named(&format!("{prefix}.up"), f);
        self.down.visit_named(&format!("{prefix}.down"), f);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.up.visit_mut_all(f);
        self.down.visit_mut_all(f);
    }
}

impl<T> ParamVisit<T> for EncoderLayer<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attn_norm.visit_named(&format!("{prefix}.attn_norm"), f);
        self.attn.visit_named(&format!("{prefix}.attn"), f);
        self.ffn_norm.visit_named(&format!("{prefix}.ffn_norm"), f);
        self.ffn.visit_named(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.attn_norm.visit_mut_all(f);
        self.attn.visit_mut_all(f);
        self.ffn_norm.visit_mut_all(f);
        self.ffn.visit_mut_all(f);
    }
}

impl<T> ParamVisit<T> for DecoderLayer<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.self_norm.visit_named(&format!("{prefix}.self_norm"), f);
        self.self_attn.visit_named(&format!("{prefix}.self_attn"), f);
        self.cross_norm.visit_named(&format!("{prefix}.cross_norm"), f);
        self.cross_attn.visit_named(&format!("{prefix}.cross_attn"), f);
        self.ffn_norm.visit_named(&format!("{prefix}.ffn_norm"), f);
        self.ffn.visit_named(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        self.self_norm.visit_mut_all(f);
        self.self_attn.visit_mut_all(f);
        self.cross_norm.visit_mut_all(f);
        self.cross_attn.visit_mut_all(f);
        self.ffn_norm.visit_mut_all(f);
        self.ffn.visit_mut_all(f);
    }
}

impl<T> ParamVisit<T> for ModelWeights<T> {
    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        f(p("flex.theta_e"), &self.flex.theta_e);
        f(p("flex.theta_d"), &self.flex.theta_d);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.visit_named(&p(&format!("encoder.{i}")), f);
        }
        self.enc_norm.visit_named(&p("enc_norm"), f);
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.visit_named(&p(&format!("decoder.{i}")), f);
        }
        self.dec_norm.visit_named(&p("dec_norm"), f);
        if let Some(t) = &self.learned_token {
            f(p("learned_token"), t);
        }
    }

    fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.flex.theta_e);
        f(&mut self.flex.theta_d);
        for layer in &mut self.encoder {
            layer.visit_mut_all(f);
        }
        self.enc_norm.visit_mut_all(f);
        for layer in &mut self.decoder {
            layer.visit_mut_all(f);
        }
        self.dec_norm.visit_mut_all(f);
        if let Some(t) = &mut self.learned_token {
            f(t);
        }
    }
}

impl<T> ModelWeights<T> {
    /// Leaves in visiting order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit_named("", &mut |_, t| out.push(t));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut_all(&mut |t| out.push(t));
        out
    }

    pub fn named_leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit_named("", &mut |n, t| out.push((n, t)));
        out
    }

    /// Rebuilds the same layout with leaves produced by `f`, called in
    /// visiting order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelWeights<U> {
        let lin = |l: &Linear<T>, f: &mut dyn FnMut(&T) -> U| Linear {
            weight: f(&l.weight),
            bias: f(&l.bias),
        };
        let norm = |n: &Norm<T>, f: &mut dyn FnMut(&T) -> U| Norm {
            scale: f(&n.scale),
            bias: f(&n.bias),
        };
        let attn = |a: &Attention<T>, f: &mut dyn FnMut(&T) -> U| Attention {
            q: lin(&a.q, f),
            k: lin(&a.k, f),
            v: lin(&a.v, f),
            o: lin(&a.o, f),
        };
        let ffn = |m: &FeedForward<T>, f: &mut dyn FnMut(&T) -> U| FeedForward {
            up: lin(&m.up, f),
            down: lin(&m.down, f),
        };
        let f: &mut dyn FnMut(&T) -> U = &mut f;
        let flex = FlexWeights {
            theta_e: f(&self.flex.theta_e),
            theta_d: f(&self.flex.theta_d),
            reference_size: self.flex.reference_size,
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| EncoderLayer {
                attn_norm: norm(&l.attn_norm, f),
                attn: attn(&l.attn, f),
                ffn_norm: norm(&l.ffn_norm, f),
                ffn: ffn(&l.ffn, f),
            })
            .collect();
        let enc_norm = norm(&self.enc_norm, f);
        let decoder = self
            .decoder
            .iter()
            .map(|l| DecoderLayer {
                self_norm: norm(&l.self_norm, f),
                self_attn: attn(&l.self_attn, f),
                cross_norm: norm(&l.cross_norm, f),
                cross_attn: attn(&l.cross_attn, f),
                ffn_norm: norm(&l.ffn_norm, f),
                ffn: ffn(&l.ffn, f),
            })
            .collect();
        let dec_norm = norm(&self.dec_norm, f);
        let learned_token = self.learned_token.as_ref().map(|t| f(t));
        ModelWeights {
            flex,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            learned_token,
        }
    }

    /// Rebuilds the layout from leaves supplied in visiting order.
    pub fn from_leaves<U>(layout: &ModelWeights<U>, leaves: Vec<T>) -> Result<Self> {
        let expected = layout.leaves().len();
        if leaves.len() != expected {
            return Err(Error::dim(format!(
                "expected {expected} parameter tensors, got {}",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        Ok(layout.map(|_| it.next().expect("length checked")))
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
    Linear {
        weight: xavier(rng, fan_in, fan_out),
        bias: Matrix::zeros(1, fan_out),
    }
}

fn norm(d: usize) -> Norm {
    Norm {
        scale: Matrix::filled(1, d, 1.0),
        bias: Matrix::zeros(1, d),
    }
}

fn attention(rng: &mut ChaCha8Rng, d: usize) -> Attention {
    Attention {
        q: linear(rng, d, d),
        k: linear(rng, d, d),
        v: linear(rng, d, d),
        o: linear(rng, d, d),
    }
}

fn feed_forward(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> FeedForward {
    FeedForward {
        up: linear(rng, d, hidden),
        down: linear(rng, hidden, d),
    }
}

impl ModelWeights<Matrix> {
    /// Random initialization: Xavier-uniform projections, unit norm scales,
    /// zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = config.ffn_dim;
        let p = config.reference_patch;

        let flex = FlexWeights {
            theta_e: xavier(rng, p, d),
            theta_d: xavier(rng, p, d),
            reference_size: p,
        };
        let encoder = (0..config.enc_layers)
            .map(|_| EncoderLayer {
                attn_norm: norm(d),
                attn: attention(rng, d),
                ffn_norm: norm(d),
                ffn: feed_forward(rng, d, hidden),
            })
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|_| DecoderLayer {
                self_norm: norm(d),
                self_attn: attention(rng, d),
                cross_norm: norm(d),
                cross_attn: attention(rng, d),
                ffn_norm: norm(d),
                ffn: feed_forward(rng, d, hidden),
            })
            .collect();
        let learned_token = (config.replicated_token == ReplicatedToken::Learned).then(|| {
            let normal = Normal::new(0.0, 0.02).expect("valid normal");
            Matrix::from_fn(1, d, |_, _| normal.sample(rng))
        });

        Ok(ModelWeights {
            flex,
            encoder,
            enc_norm: norm(d),
            decoder,
            dec_norm: norm(d),
            learned_token,
        })
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|m| m.is_finite())
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::init_shapes(config);
        let got = self.named_leaves();
        let want = reference.named_leaves();
        if got.len() != want.len() {
            return Err(Error::dim(format!(
                "weights hold {} tensors, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, m), (_, shape)) in got.iter().zip(want) {
            if m.shape() != *shape {
                return Err(Error::dim(format!(
                    "{name}: shape {:?}, config implies {shape:?}",
                    m.shape()
                )));
            }
        }
        if self.flex.reference_size != config.reference_patch {
            return Err(Error::dim("reference size differs from config"));
        }
        Ok(())
    }

    /// Rounds every parameter through `f32`.
    pub fn quantize_f32(&mut self) {
        for m in self.leaves_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

impl ModelWeights<(usize, usize)> {
    /// Tensor shapes implied by `config`, without allocating weights.
    pub fn init_shapes(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim;
        let lin = |i, o| Linear {
            weight: (i, o),
            bias: (1, o),
        };
        let norm = || Norm {
            scale: (1, d),
            bias: (1, d),
        };
        let attn = || Attention {
            q: lin(d, d),
            k: lin(d, d),
            v: lin(d, d),
            o: lin(d, d),
        };
        let ffn = || FeedForward {
            up: lin(d, f),
            down: lin(f, d),
        };
        ModelWeights {
            flex: FlexWeights {
                theta_e: (config.reference_patch, d),
                theta_d: (config.reference_patch, d),
                reference_size: config.reference_patch,
            },
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayer {
                    attn_norm: norm(),
                    attn: attn(),
                    ffn_norm: norm(),
                    ffn: ffn(),
                })
                .collect(),
            enc_norm: norm(),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayer {
                    self_norm: norm(),
                    self_attn: attn(),
                    cross_norm: norm(),
                    cross_attn: attn(),
                    ffn_norm: norm(),
                    ffn: ffn(),
                })
                .collect(),
            dec_norm: norm(),
            learned_token: (config.replicated_token == ReplicatedToken::Learned).then_some((1, d)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_shapes_and_is_deterministic() {
        let cfg = ModelConfig::micro();
        let a = ModelWeights::init(&cfg, 5).unwrap();
        let b = ModelWeights::init(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelWeights::init(&cfg, 6).unwrap());
        a.check_shapes(&cfg).unwrap();
        assert!(a.is_finite());
    }

    #[test]
    fn learned_token_only_when_requested() {
        let mut cfg = ModelConfig::micro();
        assert!(ModelWeights::init(&cfg, 0).unwrap().learned_token.is_none());
        cfg.replicated_token = ReplicatedToken::Learned;
        let w = ModelWeights::init(&cfg, 0).unwrap();
        assert_eq!(w.learned_token.as_ref().unwrap().shape(), (1, 8));
        w.check_shapes(&cfg).unwrap();
        assert!(w.check_shapes(&ModelConfig::micro()).is_err());
    }

    #[test]
    fn map_and_from_leaves_preserve_order() {
        let w = ModelWeights::init(&ModelConfig::micro(), 1).unwrap();
        let names: Vec<String> = w.named_leaves().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "flex.theta_e");
        assert!(names.contains(&"decoder.0.cross_attn.v.bias".to_string()));
        let mut names_sorted = names.clone();
        names_sorted.sort();
        names_sorted.dedup();
        assert_eq!(names_sorted.len(), names.len());

        let rebuilt = ModelWeights::from_leaves(&w, w.leaves().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, w);
        let mut counter = 0;
        let idx = w.map(|_| {
            counter += 1;
            counter
        });
        assert_eq!(idx.leaves().into_iter().copied().collect::<Vec<_>>(), (1..=counter).collect::<Vec<_>>());
    }
}
