use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::ResizeMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    /// Periodical parallel decoding: all future tokens in one decoder pass.
    #[default]
    Ppd,
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Patching {
    /// One patch per detected cycle.
    #[default]
    Periodical,
    /// Constant patch length `ModelConfig::fixed_patch`.
    Fixed,
}

/// Base token replicated into the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReplicatedToken {
    #[default]
    Last,
    Mean,
    Learned,
}

macro_rules! enum_names {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::InvalidValue(format!(
                        "`{other}` is not one of: {}",
                        Self::NAMES.join(", ")
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

enum_names!(DecodingMode { Ppd => "ppd", Autoregressive => "autoregressive" });
enum_names!(Patching { Periodical => "periodical", Fixed => "fixed" });
enum_names!(ReplicatedToken { Last => "last", Mean => "mean", Learned => "learned" });
enum_names!(ResizeMode { Flex => "flex", Linear => "linear" });

/// Architecture, tokenization and decoding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    /// Reference patch size `P*` of the projection weights.
    pub reference_patch: usize,
    pub decoding: DecodingMode,
    pub patching: Patching,
    pub fixed_patch: usize,
    pub resize_mode: ResizeMode,
    pub replicated_token: ReplicatedToken,
    /// RoPE frequency base; `0` disables rotation.
    pub rope_base: f64,
    /// Index of the first decoder token in `ω(τ) = e^{−τ}` (1 by default).
    pub omega_origin: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mini()
    }
}

impl ModelConfig {
    /// 3 encoder / 3 decoder layers, D = 256, FFN 512.
    pub fn mini() -> Self {
        Self {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 256,
            ffn_dim: 512,
            n_heads: 8,
            reference_patch: 48,
            decoding: DecodingMode::Ppd,
            patching: Patching::Periodical,
            fixed_patch: 48,
            resize_mode: ResizeMode::Flex,
            replicated_token: ReplicatedToken::Last,
            rope_base: 10_000.0,
            omega_origin: 1,
        }
    }

    /// 1 encoder / 1 decoder layer at D = 256, FFN 512.
    pub fn tiny() -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 1,
            ..Self::mini()
        }
    }

    /// Small enough for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            ffn_dim: 16,
            n_heads: 2,
            reference_patch: 4,
            fixed_patch: 4,
            ..Self::mini()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("fixed_patch", self.fixed_patch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidValue(format!("{name} must be at least 1")));
            }
        }
        if self.reference_patch < 2 {
            return Err(Error::InvalidValue("reference_patch must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(2 * self.n_heads) {
            return Err(Error::InvalidValue(format!(
                "d_model {} must be divisible by 2·n_heads = {}",
                self.d_model,
                2 * self.n_heads
            )));
        }
        if !(self.rope_base >= 0.0 && self.rope_base.is_finite()) {
            return Err(Error::InvalidValue("rope_base must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Patch length used for a series whose cycle length is `period`.
    pub fn patch_length(&self, period: usize) -> usize {
        match self.patching {
            Patching::Periodical => period,
            Patching::Fixed => self.fixed_patch,
        }
    }

    /// Reweighting of the replicated decoder tokens, one weight per row.
    pub fn omega(&self, k: usize) -> Vec<f64> {
        (0..k)
            .map(|j| (-((j + self.omega_origin) as f64)).exp())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_is_one_based_by_default() {
        let w = ModelConfig::default().omega(4);
        let want = [0.3679, 0.1353, 0.0498, 0.0183];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(w[0], (-1f64).exp());
        let zero_based = ModelConfig {
            omega_origin: 0,
            ..ModelConfig::default()
        };
        assert_eq!(zero_based.omega(2)[0], 1.0);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::mini().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
        let bad = ModelConfig {
            d_model: 12,
            n_heads: 4,
            ..ModelConfig::micro()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            enc_layers: 0,
            ..ModelConfig::micro()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enum_parsing() {
        assert_eq!("autoregressive".parse::<DecodingMode>().unwrap(), DecodingMode::Autoregressive);
        let err = "banana".parse::<DecodingMode>().unwrap_err().to_string();
        assert!(err.contains("ppd") && err.contains("autoregressive"));
        assert_eq!("linear".parse::<ResizeMode>().unwrap(), ResizeMode::Linear);
        assert_eq!(ReplicatedToken::Mean.to_string(), "mean");
    }
}
