use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, ROPE_BASE};

use super::config::{GateOverride, TGConfig};
use super::params::{AttentionParams, TGLayerParams};

/// Which of the three sublayers a gate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Spatial,
    Temporal,
    Mlp,
}

impl fmt::Display for Submodule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Submodule::Spatial => "spatial",
            Submodule::Temporal => "temporal",
            Submodule::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for Submodule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Submodule::Spatial),
            "temporal" => Ok(Submodule::Temporal),
            "mlp" => Ok(Submodule::Mlp),
            other => Err(Error::Usage(format!("unknown submodule `{other}`"))),
        }
    }
}

/// Gate activations recorded during one forward pass.
///
/// `values` has the shape of the sublayer's own view: `[T, L_V, D_V]` for
/// spatial and MLP gates, `[L_V, T, D_V]` for temporal gates.
#[derive(Clone, Debug)]
pub struct GateCapture {
    pub layer: usize,
    pub submodule: Submodule,
    pub values: Tensor,
}

/// Arrangement of the `[T, L_V, D_V]` video tensor seen by each sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Batch over frames, sequence over patches: `[T, L_V, D_V]`.
    Spatial,
    /// Batch over patches, sequence over frames: `[L_V, T, D_V]`.
    Temporal,
    /// Back to `[T, L_V, D_V]` for the token-wise MLP.
    Mlp,
}

/// Rearranges `v` for the next sublayer. Spatial mode expects the layer
/// input, temporal mode the spatial view, MLP mode the temporal view.
pub fn axis_view(v: &Tensor, mode: ViewMode) -> Result<Tensor> {
    if v.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "axis_view",
            detail: format!("expected a rank-3 tensor, got {:?}", v.shape()),
        });
    }
    match mode {
        ViewMode::Spatial => Ok(v.clone()),
        ViewMode::Temporal | ViewMode::Mlp => v.permute(&[1, 0, 2]),
    }
}

/// Pre-normalized input goes in; returns the attention output before any residual.
///
/// `x: [batch, seq, d]`. Queries and keys are RoPE-rotated by their position
/// in `seq` when `rope` is set. Scores are scaled by `1/sqrt(d / heads)`.
pub fn multi_head_self_attention(x: &Tensor, p: &AttentionParams, heads: usize, rope: bool) -> Result<Tensor> {
    let &[b, s, d] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "attention",
            detail: format!("expected [batch, seq, d], got {:?}", x.shape()),
        });
    };
    if s == 0 || heads == 0 || d % heads != 0 {
        return Err(Error::InvalidShape {
            op: "attention",
            detail: format!("seq {s}, width {d}, heads {heads}"),
        });
    }
    let dh = d / heads;
    let split = |t: Tensor| t.reshape(&[b, s, heads, dh])?.permute(&[0, 2, 1, 3]);
    let mut q = split(x.matmul(&p.wq)?)?;
    let mut k = split(x.matmul(&p.wk)?)?;
    let v = split(x.matmul(&p.wv)?)?;
    if rope {
        let positions: Vec<usize> = (0..s).collect();
        q = q.rope(&positions, ROPE_BASE)?;
        k = k.rope(&positions, ROPE_BASE)?;
    }
    let scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt())?;
    let weights = scores.softmax(3)?;
    weights
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, s, d])?
        .matmul(&p.wo)
}

/// `(SiLU(x W1) * (x W3)) W2`, token-wise.
pub fn swiglu_mlp(x: &Tensor, w1: &Tensor, w3: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let gate = x.matmul(w1)?.silu()?;
    gate.mul(&x.matmul(w3)?)?.matmul(w2)
}

/// `g = sigmoid([sub_in, sub_out] W_gate)`, returns `(g * sub_out + sub_in, g)`.
/// An override replaces `g` with a constant tensor of zeros or ones.
pub fn gated_residual(
    sub_in: &Tensor,
    sub_out: &Tensor,
    w_gate: &Tensor,
    gate_override: GateOverride,
) -> Result<(Tensor, Tensor)> {
    if sub_in.shape() != sub_out.shape() || sub_in.rank() == 0 {
        return Err(Error::Shape {
            op: "gated_residual",
            lhs: sub_in.shape().to_vec(),
            rhs: sub_out.shape().to_vec(),
        });
    }
    let d = sub_in.shape()[sub_in.rank() - 1];
    if w_gate.shape() != [2 * d, d] {
        return Err(Error::Shape {
            op: "gated_residual",
            lhs: vec![2 * d, d],
            rhs: w_gate.shape().to_vec(),
        });
    }
    let gate = match gate_override {
        GateOverride::None => sub_in.concat_last(sub_out)?.matmul(w_gate)?.sigmoid()?,
        GateOverride::ForceZero => Tensor::zeros(sub_in.shape()),
        GateOverride::ForceOne => Tensor::full(sub_in.shape(), 1.0),
    };
    let out = gate.mul(sub_out)?.add(sub_in)?;
    Ok((out, gate))
}

struct LayerRun<'a> {
    cfg: &'a TGConfig,
    layer: usize,
    capture: Option<&'a mut Vec<GateCapture>>,
}

impl LayerRun<'_> {
    fn residual(&mut self, input: &Tensor, branch: &Tensor, w_gate: &Tensor, which: Submodule) -> Result<Tensor> {
        if !self.cfg.gating_enabled {
            return branch.add(input);
        }
        let (out, gate) = gated_residual(input, branch, w_gate, self.cfg.gate_override)?;
        if let Some(sink) = self.capture.as_deref_mut() {
            sink.push(GateCapture {
                layer: self.layer,
                submodule: which,
                values: gate.detach(),
            });
        }
        Ok(out)
    }

    fn attention(&mut self, x: &Tensor, p: &AttentionParams, w_gate: &Tensor, which: Submodule) -> Result<Tensor> {
        let normed = x.layer_norm(&p.ln_gain, &p.ln_bias, self.cfg.ln_eps)?;
        let branch = multi_head_self_attention(&normed, p, self.cfg.num_heads, self.cfg.rope_enabled)?;
        self.residual(x, &branch, w_gate, which)
    }
}

/// One time-gated layer over `v: [T, L_V, D_V]`.
///
/// Spatial attention (within each frame), temporal attention (across frames at
/// each patch site), then the SwiGLU MLP, each pre-normalized and wrapped in a
/// gated residual, or a plain one when gating is off. Disabled sublayers are
/// skipped outright.
pub fn tg_layer_forward(
    v: &Tensor,
    params: &TGLayerParams,
    cfg: &TGConfig,
    layer: usize,
    capture: Option<&mut Vec<GateCapture>>,
) -> Result<Tensor> {
    if v.rank() != 3 || v.shape()[2] != cfg.d_model {
        return Err(Error::InvalidShape {
            op: "tg_layer",
            detail: format!("expected [T, L_V, {}], got {:?}", cfg.d_model, v.shape()),
        });
    }
    let mut run = LayerRun { cfg, layer, capture };

    let vs = axis_view(v, ViewMode::Spatial)?;
    let ys = if cfg.spatial_enabled {
        run.attention(&vs, &params.spatial, &params.gate_spatial, Submodule::Spatial)?
    } else {
        vs
    };

    let vt = axis_view(&ys, ViewMode::Temporal)?;
    let yt = if cfg.temporal_enabled {
        run.attention(&vt, &params.temporal, &params.gate_temporal, Submodule::Temporal)?
    } else {
        vt
    };

    let vm = axis_view(&yt, ViewMode::Mlp)?;
    if !cfg.mlp_enabled {
        return Ok(vm);
    }
    let m = &params.mlp;
    let normed = vm.layer_norm(&m.ln_gain, &m.ln_bias, cfg.ln_eps)?;
    let branch = swiglu_mlp(&normed, &m.w1, &m.w3, &m.w2)?;
    run.residual(&vm, &branch, &params.gate_mlp, Submodule::Mlp)
}

/// Applies `stack` in order. The stack length must equal `cfg.num_layers`.
pub fn tg_forward(
    v: &Tensor,
    stack: &[TGLayerParams],
    cfg: &TGConfig,
    mut capture: Option<&mut Vec<GateCapture>>,
) -> Result<Tensor> {
    cfg.validate()?;
    if stack.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "stack has {} layers but num_layers is {}",
            stack.len(),
            cfg.num_layers
        )));
    }
    let mut x = v.clone();
    for (i, params) in stack.iter().enumerate() {
        x = tg_layer_forward(&x, params, cfg, i, capture.as_deref_mut())?;
    }
    Ok(x)
}
