use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::params::ParamSet;

use super::config::TGConfig;

/// Init scale for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Projections and pre-norm of one self-attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// SwiGLU weights and pre-norm.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub w3: Tensor,
    pub w2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Learnable weights of one time-gated layer.
#[derive(Clone, Debug)]
pub struct TGLayerParams {
    pub spatial: AttentionParams,
    pub temporal: AttentionParams,
    pub mlp: MlpParams,
    /// `[2 * d_model, d_model]` gate projections, no bias.
    pub gate_spatial: Tensor,
    pub gate_temporal: Tensor,
    pub gate_mlp: Tensor,
}

/// Field names in canonical (checkpoint) order.
pub const LAYER_FIELDS: [&str; 20] = [
    "spatial.wq",
    "spatial.wk",
    "spatial.wv",
    "spatial.wo",
    "spatial.ln_gain",
    "spatial.ln_bias",
    "temporal.wq",
    "temporal.wk",
    "temporal.wv",
    "temporal.wo",
    "temporal.ln_gain",
    "temporal.ln_bias",
    "mlp.w1",
    "mlp.w3",
    "mlp.w2",
    "mlp.ln_gain",
    "mlp.ln_bias",
    "gate_spatial",
    "gate_temporal",
    "gate_mlp",
];

fn field_shape(cfg: &TGConfig, field: &str) -> Vec<usize> {
    let (d, h) = (cfg.d_model, cfg.mlp_hidden);
    match field.rsplit('.').next().unwrap_or(field) {
        "w1" | "w3" => vec![d, h],
        "w2" => vec![h, d],
        "ln_gain" | "ln_bias" => vec![d],
        "gate_spatial" | "gate_temporal" | "gate_mlp" => vec![2 * d, d],
        _ => vec![d, d],
    }
}

impl TGLayerParams {
    /// `(field, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let tensors = [
            &self.spatial.wq,
            &self.spatial.wk,
            &self.spatial.wv,
            &self.spatial.wo,
            &self.spatial.ln_gain,
            &self.spatial.ln_bias,
            &self.temporal.wq,
            &self.temporal.wk,
            &self.temporal.wv,
            &self.temporal.wo,
            &self.temporal.ln_gain,
            &self.temporal.ln_bias,
            &self.mlp.w1,
            &self.mlp.w3,
            &self.mlp.w2,
            &self.mlp.ln_gain,
            &self.mlp.ln_bias,
            &self.gate_spatial,
            &self.gate_temporal,
            &self.gate_mlp,
        ];
        LAYER_FIELDS.into_iter().zip(tensors).collect()
    }

    /// Builds a layer by asking `lookup` for each field.
    pub fn from_lookup(mut lookup: impl FnMut(&'static str) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            spatial: AttentionParams {
                wq: lookup("spatial.wq")?,
                wk: lookup("spatial.wk")?,
                wv: lookup("spatial.wv")?,
                wo: lookup("spatial.wo")?,
                ln_gain: lookup("spatial.ln_gain")?,
                ln_bias: lookup("spatial.ln_bias")?,
            },
            temporal: AttentionParams {
                wq: lookup("temporal.wq")?,
                wk: lookup("temporal.wk")?,
                wv: lookup("temporal.wv")?,
                wo: lookup("temporal.wo")?,
                ln_gain: lookup("temporal.ln_gain")?,
                ln_bias: lookup("temporal.ln_bias")?,
            },
            mlp: MlpParams {
                w1: lookup("mlp.w1")?,
                w3: lookup("mlp.w3")?,
                w2: lookup("mlp.w2")?,
                ln_gain: lookup("mlp.ln_gain")?,
                ln_bias: lookup("mlp.ln_bias")?,
            },
            gate_spatial: lookup("gate_spatial")?,
            gate_temporal: lookup("gate_temporal")?,
            gate_mlp: lookup("gate_mlp")?,
        })
    }

    /// Appends this layer's tensors to `set` under `prefix`.
    pub fn export(&self, prefix: &str, set: &mut ParamSet) {
        for (field, t) in self.named() {
            set.push_tensor(format!("{prefix}.{field}"), t);
        }
    }

    /// Reads a layer stored under `prefix`.
    pub fn import(prefix: &str, set: &ParamSet, requires_grad: bool) -> Result<Self> {
        Self::from_lookup(|f| set.leaf(&format!("{prefix}.{f}"), requires_grad))
    }
}

/// Fresh layer weights: projections from a truncated normal (std 0.02),
/// LayerNorm gain 1 / bias 0, gate projections exactly zero so every gate
/// starts at 0.5. Each field draws from its own child stream of `rng`.
pub fn init_layer(cfg: &TGConfig, rng: &RngState) -> Result<TGLayerParams> {
    cfg.validate_arch()?;
    TGLayerParams::from_lookup(|field| {
        let shape = field_shape(cfg, field);
        let n: usize = shape.iter().product();
        let data = if field.ends_with("ln_gain") {
            vec![1.0; n]
        } else if field.ends_with("ln_bias") || field.starts_with("gate_") {
            vec![0.0; n]
        } else {
            rng.derive(field).truncated_normal_vec(n, INIT_STD)
        };
        Tensor::param(&shape, data)
    })
}
