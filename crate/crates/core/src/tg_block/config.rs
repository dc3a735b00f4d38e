use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a gated sublayer does with its sigmoid gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOverride {
    #[default]
    None,
    /// Gate pinned to 0: the sublayer collapses to its residual input.
    ForceZero,
    /// Gate pinned to 1: the plain residual of the ungated layer.
    ForceOne,
}

/// Architecture and ablation switches for a stack of time-gated layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TGConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub rope_enabled: bool,
    pub gating_enabled: bool,
    pub spatial_enabled: bool,
    pub temporal_enabled: bool,
    pub mlp_enabled: bool,
    pub gate_override: GateOverride,
    pub ln_eps: f64,
}

impl Default for TGConfig {
    fn default() -> Self {
        Self::new(64, 4)
    }
}

/// `4 * d_model` rounded up to a multiple of 8.
pub fn default_mlp_hidden(d_model: usize) -> usize {
    (4 * d_model).div_ceil(8) * 8
}

impl TGConfig {
    /// Full three-layer gated stack with the default SwiGLU width.
    pub fn new(d_model: usize, num_heads: usize) -> Self {
        Self {
            num_layers: 3,
            d_model,
            num_heads,
            mlp_hidden: default_mlp_hidden(d_model),
            rope_enabled: true,
            gating_enabled: true,
            spatial_enabled: true,
            temporal_enabled: true,
            mlp_enabled: true,
            gate_override: GateOverride::None,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    /// Checks everything except the layer count.
    pub fn validate_arch(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("d_model, num_heads and mlp_hidden must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.rope_enabled && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head width, got {}", self.head_dim())));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        self.validate_arch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TGConfig::default();
        assert_eq!(c.num_layers, 3);
        assert_eq!(c.mlp_hidden, 256);
        assert_eq!(default_mlp_hidden(20), 80);
        assert_eq!(default_mlp_hidden(6), 24);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = TGConfig::new(16, 3);
        assert!(c.validate().is_err());
        c = TGConfig::new(12, 4); // head width 3 with rope
        assert!(c.validate().is_err());
        c.rope_enabled = false;
        c.validate().unwrap();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TGConfig>(r#"{"num_layers": 2, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TGConfig = serde_json::from_str(r#"{"num_layers": 2, "gate_override": "force_one"}"#).unwrap();
        assert_eq!(ok.gate_override, GateOverride::ForceOne);
    }
}
