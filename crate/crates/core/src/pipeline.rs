//! End-to-end desk-scale model around the time-gated stack.
//!
//! `video [T, L_V, D_V]` → TG stack → per-frame query compression
//! `[T, L_q, D_V]` → projection into the text width and concatenation with
//! the text rows `[T·L_q + L_T, D_T]` → mean-pool + linear head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, flatten_json, unflatten_json};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::params::ParamSet;
use crate::tg_block::{tg_forward, GateCapture, TGConfig, TGLayerParams, INIT_STD};

const COMPRESSOR_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `tg.num_layers == 0` means no TG stack at all (the baseline).
    pub tg: TGConfig,
    /// Query tokens per frame, `L_q`.
    pub num_queries: usize,
    /// Text embedding width `D_T`; `None` means `D_V`.
    pub text_width: Option<usize>,
    /// Number of synthetic text rows `L_T`.
    pub text_len: usize,
    pub num_classes: usize,
    /// Parameter groups (`tg`, `compressor`, `fusion`, `text`, `head`) left untouched by the optimizer.
    pub frozen_groups: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tg: TGConfig::default(),
            num_queries: 32,
            text_width: None,
            text_len: 4,
            num_classes: 2,
            frozen_groups: Vec::new(),
        }
    }
}

pub const PARAM_GROUPS: [&str; 5] = ["tg", "compressor", "fusion", "text", "head"];

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.tg.d_model
    }

    pub fn d_text(&self) -> usize {
        self.text_width.unwrap_or(self.tg.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tg.num_layers > 0 {
            self.tg.validate()?;
        } else if self.tg.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if self.d_text() == 0 || self.num_classes == 0 {
            return Err(Error::Config("text_width and num_classes must be positive".into()));
        }
        if let Some(g) = self.frozen_groups.iter().find(|g| !PARAM_GROUPS.contains(&g.as_str())) {
            return Err(Error::Config(format!("unknown parameter group `{g}`")));
        }
        Ok(())
    }
}

/// Learnable queries cross-attending over one frame's patch tokens.
#[derive(Clone, Debug)]
pub struct CompressorParams {
    pub queries: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// `[D_V, D_T]`.
    pub w_vt: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor,
    /// Rows entering the head: `T·L_q + L_T`.
    pub fused_length: usize,
}

/// Compresses every frame from `L_V` patch tokens to `L_q` query tokens with
/// one single-head cross-attention. Frames never see each other.
pub fn compress_frames(v: &Tensor, p: &CompressorParams) -> Result<Tensor> {
    if v.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "compress_frames",
            detail: format!("expected [T, L_V, D_V], got {:?}", v.shape()),
        });
    }
    let d = v.shape()[2];
    let kv = v.layer_norm(&p.ln_gain, &p.ln_bias, COMPRESSOR_LN_EPS)?;
    let q = p.queries.matmul(&p.wq)?;
    let k = kv.matmul(&p.wk)?;
    let values = kv.matmul(&p.wv)?;
    let scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt())?;
    scores.softmax(2)?.matmul(&values)?.matmul(&p.wo)
}

/// `[flatten(v_q) · W_VT ; text]`, video rows first.
pub fn fuse_video_text(v_q: &Tensor, text: &Tensor, f: &FusionParams) -> Result<Tensor> {
    let &[t, lq, d] = v_q.shape() else {
        return Err(Error::InvalidShape {
            op: "fuse_video_text",
            detail: format!("expected [T, L_q, D_V], got {:?}", v_q.shape()),
        });
    };
    if text.rank() != 2 || f.w_vt.rank() != 2 || text.shape()[1] != f.w_vt.shape()[1] {
        return Err(Error::Shape {
            op: "fuse_video_text",
            lhs: text.shape().to_vec(),
            rhs: f.w_vt.shape().to_vec(),
        });
    }
    let video = v_q.reshape(&[t * lq, d])?.matmul(&f.w_vt)?;
    Tensor::concat(&[&video, text], 0)
}

/// Mean over rows, then one affine map to class logits.
pub fn classify(fused: &Tensor, head: &HeadParams) -> Result<Tensor> {
    if fused.rank() != 2 || fused.shape()[0] == 0 {
        return Err(Error::InvalidShape {
            op: "classify",
            detail: format!("expected [n >= 1, D_T], got {:?}", fused.shape()),
        });
    }
    let d = fused.shape()[1];
    let c = head.b.numel();
    let pooled = fused.mean_axis(0)?.reshape(&[1, d])?;
    pooled.matmul(&head.w)?.reshape(&[c])?.add(&head.b)
}

/// Model weights as tensor handles, ready for a forward pass.
pub struct Model {
    cfg: ModelConfig,
    pub tg: Vec<TGLayerParams>,
    pub compressor: CompressorParams,
    pub fusion: FusionParams,
    /// `[L_T, D_T]` learnable text rows.
    pub text: Tensor,
    pub head: HeadParams,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, video: &Tensor, capture: Option<&mut Vec<GateCapture>>) -> Result<ModelOutput> {
        if video.rank() != 3 || video.shape()[2] != self.cfg.d_model() {
            return Err(Error::InvalidShape {
                op: "model",
                detail: format!("expected [T, L_V, {}], got {:?}", self.cfg.d_model(), video.shape()),
            });
        }
        let x = if self.tg.is_empty() {
            video.clone()
        } else {
            tg_forward(video, &self.tg, &self.cfg.tg, capture)?
        };
        let compressed = compress_frames(&x, &self.compressor)?;
        let fused = fuse_video_text(&compressed, &self.text, &self.fusion)?;
        let fused_length = fused.shape()[0];
        Ok(ModelOutput {
            logits: classify(&fused, &self.head)?,
            fused_length,
        })
    }

    /// Cross-entropy of `label` and the logits.
    pub fn loss(&self, video: &Tensor, label: usize) -> Result<(Tensor, Tensor)> {
        let out = self.forward(video, None)?;
        let loss = out.logits.cross_entropy(label)?;
        Ok((loss, out.logits))
    }

    /// Every parameter tensor with its checkpoint name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.tg.iter().enumerate() {
            for (field, t) in layer.named() {
                out.push((format!("tg.{i}.{field}"), t));
            }
        }
        let c = &self.compressor;
        for (n, t) in [
            ("queries", &c.queries),
            ("wq", &c.wq),
            ("wk", &c.wk),
            ("wv", &c.wv),
            ("wo", &c.wo),
            ("ln_gain", &c.ln_gain),
            ("ln_bias", &c.ln_bias),
        ] {
            out.push((format!("compressor.{n}"), t));
        }
        out.push(("fusion.w_vt".into(), &self.fusion.w_vt));
        out.push(("text.rows".into(), &self.text));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn snapshot(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, t) in self.named_params() {
            set.push_tensor(name, t);
        }
        set
    }

    /// Accumulated gradients in [`Model::named_params`] order; zeros where a
    /// parameter did not take part in any backward pass.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

/// Thread-safe model description: config plus plain parameter storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl ModelState {
    /// Fresh weights. Every tensor draws from a child stream named after the
    /// tensor, so e.g. the compressor is identical for any TG depth.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(seed).derive("model");
        let mut params = ParamSet::new();
        for i in 0..cfg.tg.num_layers {
            let layer = crate::tg_block::init_layer(&cfg.tg, &root.derive(&format!("tg.{i}")))?;
            layer.export(&format!("tg.{i}"), &mut params);
        }
        let (d, dt, c) = (cfg.d_model(), cfg.d_text(), cfg.num_classes);
        let weight = |name: &str, n: usize| root.derive(name).truncated_normal_vec(n, INIT_STD);
        params.push("compressor.queries", &[cfg.num_queries, d], weight("compressor.queries", cfg.num_queries * d));
        for w in ["wq", "wk", "wv", "wo"] {
            let name = format!("compressor.{w}");
            params.push(name.clone(), &[d, d], weight(&name, d * d));
        }
        params.push("compressor.ln_gain", &[d], vec![1.0; d]);
        params.push("compressor.ln_bias", &[d], vec![0.0; d]);
        params.push("fusion.w_vt", &[d, dt], weight("fusion.w_vt", d * dt));
        params.push("text.rows", &[cfg.text_len, dt], weight("text.rows", cfg.text_len * dt));
        params.push("head.w", &[dt, c], weight("head.w", dt * c));
        params.push("head.b", &[c], vec![0.0; c]);
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Materializes tensor handles; `requires_grad` marks every leaf for tracking.
    pub fn build(&self, requires_grad: bool) -> Result<Model> {
        let p = &self.params;
        let leaf = |n: &str| p.leaf(n, requires_grad);
        let tg = (0..self.cfg.tg.num_layers)
            .map(|i| TGLayerParams::import(&format!("tg.{i}"), p, requires_grad))
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            cfg: self.cfg.clone(),
            tg,
            compressor: CompressorParams {
                queries: leaf("compressor.queries")?,
                wq: leaf("compressor.wq")?,
                wk: leaf("compressor.wk")?,
                wv: leaf("compressor.wv")?,
                wo: leaf("compressor.wo")?,
                ln_gain: leaf("compressor.ln_gain")?,
                ln_bias: leaf("compressor.ln_bias")?,
            },
            fusion: FusionParams {
                w_vt: leaf("fusion.w_vt")?,
            },
            text: leaf("text.rows")?,
            head: HeadParams {
                w: leaf("head.w")?,
                b: leaf("head.b")?,
            },
        };
        if model.named_params().len() != p.len() {
            return Err(Error::Format(format!(
                "parameter set has {} tensors, model expects {}",
                p.len(),
                model.named_params().len()
            )));
        }
        Ok(model)
    }

    pub fn manifest(&self) -> Result<checkpoint::Manifest> {
        let mut m = vec![
            ("format".to_string(), "timegate-model".to_string()),
            ("layers".to_string(), self.cfg.tg.num_layers.to_string()),
            ("tensors".to_string(), self.params.len().to_string()),
        ];
        flatten_json("model", &serde_json::to_value(&self.cfg)?, &mut m);
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.manifest()?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, params) = checkpoint::decode(bytes)?;
        let cfg: ModelConfig = serde_json::from_value(unflatten_json("model", &manifest)?)?;
        cfg.validate()?;
        let state = Self { cfg, params };
        // Shape/name check against what the config implies.
        let expected = Self::init(&state.cfg, 0)?;
        for (a, b) in expected.params.entries().iter().zip(state.params.entries()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{}` {:?} does not match expected `{}` {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        if expected.params.len() != state.params.len() {
            return Err(Error::Format("checkpoint tensor count does not match config".into()));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        let mut tg = TGConfig::new(16, 2);
        tg.num_layers = 2;
        ModelConfig {
            tg,
            num_queries: 2,
            text_width: Some(16),
            text_len: 3,
            num_classes: 2,
            frozen_groups: Vec::new(),
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, RngState::new(seed).normal_vec(n, 1.0)).unwrap()
    }

    #[test]
    fn default_query_length() {
        assert_eq!(ModelConfig::default().num_queries, 32);
        assert_eq!(ModelConfig::default().tg.num_layers, 3);
    }

    #[test]
    fn single_patch_compression_is_value_projection() {
        let model = ModelState::init(&tiny_cfg(), 1).unwrap().build(false).unwrap();
        let v = random(&[3, 1, 16], 2);
        let out = compress_frames(&v, &model.compressor).unwrap();
        assert_eq!(out.shape(), &[3, 2, 16]);
        let c = &model.compressor;
        let expect = v
            .layer_norm(&c.ln_gain, &c.ln_bias, COMPRESSOR_LN_EPS)
            .unwrap()
            .matmul(&c.wv)
            .unwrap()
            .matmul(&c.wo)
            .unwrap();
        for f in 0..3 {
            for q in 0..2 {
                for k in 0..16 {
                    let a = out.data()[(f * 2 + q) * 16 + k];
                    assert!((a - expect.data()[f * 16 + k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn compression_is_frame_independent() {
        let model = ModelState::init(&tiny_cfg(), 3).unwrap().build(false).unwrap();
        let v = random(&[3, 4, 16], 4);
        let mut data = v.to_vec();
        for x in &mut data[4 * 16..2 * 4 * 16] {
            *x += 1.0;
        }
        let a = compress_frames(&v, &model.compressor).unwrap();
        let b = compress_frames(&Tensor::new(v.shape(), data).unwrap(), &model.compressor).unwrap();
        let frame = 2 * 16;
        assert_eq!(a.data()[..frame], b.data()[..frame]);
        assert_ne!(a.data()[frame..2 * frame], b.data()[frame..2 * frame]);
        assert_eq!(a.data()[2 * frame..], b.data()[2 * frame..]);
    }

    #[test]
    fn fused_length_formula() {
        let f = FusionParams {
            w_vt: random(&[8, 6], 5),
        };
        let vq = random(&[16, 32, 8], 6);
        let out = fuse_video_text(&vq, &random(&[8, 6], 7), &f).unwrap();
        assert_eq!(out.shape(), &[16 * 32 + 8, 6]);
        for (t, lq, lt) in [(1, 1, 0), (3, 2, 5), (7, 4, 1)] {
            let o = fuse_video_text(&random(&[t, lq, 8], 8), &random(&[lt, 6], 9), &f).unwrap();
            assert_eq!(o.shape()[0], t * lq + lt);
        }
        assert!(fuse_video_text(&vq, &random(&[2, 5], 10), &f).is_err());
    }

    #[test]
    fn empty_text_and_identity_projection() {
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let f = FusionParams {
            w_vt: Tensor::new(&[4, 4], eye).unwrap(),
        };
        let vq = random(&[2, 3, 4], 11);
        let out = fuse_video_text(&vq, &Tensor::zeros(&[0, 4]), &f).unwrap();
        assert_eq!(out.shape(), &[6, 4]);
        assert_eq!(out.data(), vq.data());
    }

    #[test]
    fn classify_examples() {
        let zero_head = HeadParams {
            w: Tensor::zeros(&[4, 3]),
            b: Tensor::zeros(&[3]),
        };
        let fused = random(&[5, 4], 12);
        assert!(classify(&fused, &zero_head).unwrap().data().iter().all(|&v| v == 0.0));

        let head = HeadParams {
            w: random(&[4, 3], 13),
            b: random(&[3], 14),
        };
        let one = random(&[1, 4], 15);
        let direct = one.matmul(&head.w).unwrap().reshape(&[3]).unwrap().add(&head.b).unwrap();
        assert_eq!(classify(&one, &head).unwrap().data(), direct.data());

        let pooled = fused.mean_axis(0).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|r| fused.data()[r * 4 + c]).sum::<f64>() / 5.0;
            assert!((pooled.data()[c] - mean).abs() <= 1e-12);
        }
        assert!(classify(&Tensor::zeros(&[0, 4]), &zero_head).is_err());
    }

    #[test]
    fn forward_reports_fused_length() {
        let cfg = tiny_cfg();
        let model = ModelState::init(&cfg, 16).unwrap().build(false).unwrap();
        let out = model.forward(&random(&[3, 4, 16], 17), None).unwrap();
        assert_eq!(out.fused_length, 3 * 2 + 3);
        assert_eq!(out.logits.shape(), &[2]);
    }

    #[test]
    fn non_tg_weights_do_not_depend_on_depth() {
        let mut cfg = tiny_cfg();
        let a = ModelState::init(&cfg, 18).unwrap();
        cfg.tg.num_layers = 0;
        let b = ModelState::init(&cfg, 18).unwrap();
        for e in b.params.entries() {
            assert_eq!(a.params.get(&e.name).unwrap(), e);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let state = ModelState::init(&tiny_cfg(), 19).unwrap();
        let back = ModelState::from_bytes(&state.to_bytes().unwrap()).unwrap();
        assert_eq!(back, state);
        let mut bad = tiny_cfg();
        bad.tg.d_model = 8;
        bad.tg.mlp_hidden = 32;
        bad.text_width = Some(8);
        let other = ModelState::init(&bad, 0).unwrap();
        let mut bytes = state.to_bytes().unwrap();
        bytes.truncate(4);
        assert!(ModelState::from_bytes(&bytes).is_err());
        assert_ne!(other.params.numel(), state.params.numel());
    }

    #[test]
    fn unknown_frozen_group_rejected() {
        let mut cfg = tiny_cfg();
        cfg.frozen_groups = vec!["vision".into()];
        assert!(cfg.validate().is_err());
    }
}
