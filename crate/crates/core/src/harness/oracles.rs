//! Slow, loop-based reference computations and the property checks built on
//! them. Nothing here calls into the tensor engine's op implementations
//! except to produce the value being checked.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::tg_block::{
    init_layer, multi_head_self_attention, tg_layer_forward, AttentionParams, GateOverride, Submodule, TGConfig,
    TGLayerParams,
};

/// Outcome of one named property check.
#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl OracleResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn rotate_pairs(v: &mut [f64], pos: usize) {
    let d = v.len();
    for p in 0..d / 2 {
        let theta = pos as f64 / 10_000f64.powf(2.0 * p as f64 / d as f64);
        let (c, s) = (theta.cos(), theta.sin());
        let (a, b) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = a * c - b * s;
        v[2 * p + 1] = a * s + b * c;
    }
}

fn row_times(x: &[f64], w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_out];
    for (i, xi) in x.iter().enumerate().take(d_in) {
        for j in 0..d_out {
            out[j] += xi * w[i * d_out + j];
        }
    }
    out
}

/// Multi-head self-attention evaluated one query/key pair at a time.
/// `x: [batch, seq, d]` row-major; weights `[d, d]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    x: &[f64],
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
    rope: bool,
    w: [&[f64]; 4],
) -> Vec<f64> {
    let [wq, wk, wv, wo] = w;
    let dh = d / heads;
    let mut out = vec![0.0; batch * seq * d];
    for b in 0..batch {
        let tok = |i: usize| &x[(b * seq + i) * d..(b * seq + i + 1) * d];
        let qs: Vec<Vec<f64>> = (0..seq).map(|i| row_times(tok(i), wq, d, d)).collect();
        let ks: Vec<Vec<f64>> = (0..seq).map(|i| row_times(tok(i), wk, d, d)).collect();
        let vs: Vec<Vec<f64>> = (0..seq).map(|i| row_times(tok(i), wv, d, d)).collect();
        for i in 0..seq {
            let mut mixed = vec![0.0; d];
            for h in 0..heads {
                let mut q = qs[i][h * dh..(h + 1) * dh].to_vec();
                if rope {
                    rotate_pairs(&mut q, i);
                }
                let mut scores = Vec::with_capacity(seq);
                for j in 0..seq {
                    let mut k = ks[j][h * dh..(h + 1) * dh].to_vec();
                    if rope {
                        rotate_pairs(&mut k, j);
                    }
                    let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    scores.push(dot / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..seq {
                    for c in 0..dh {
                        mixed[h * dh + c] += exps[j] / z * vs[j][h * dh + c];
                    }
                }
            }
            let o = row_times(&mixed, wo, d, d);
            out[(b * seq + i) * d..(b * seq + i + 1) * d].copy_from_slice(&o);
        }
    }
    out
}

fn random_tensor(rng: &mut RngState, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n, std))
}

fn random_attention(rng: &mut RngState, d: usize) -> Result<AttentionParams> {
    let s = 1.0 / (d as f64).sqrt();
    Ok(AttentionParams {
        wq: random_tensor(rng, &[d, d], s)?,
        wk: random_tensor(rng, &[d, d], s)?,
        wv: random_tensor(rng, &[d, d], s)?,
        wo: random_tensor(rng, &[d, d], s)?,
        ln_gain: Tensor::full(&[d], 1.0),
        ln_bias: Tensor::zeros(&[d]),
    })
}

/// Random layer weights with non-trivial gates (not the zero init).
pub fn random_layer(cfg: &TGConfig, rng: &mut RngState) -> Result<TGLayerParams> {
    let base = init_layer(cfg, rng)?;
    let mut draw = rng.derive("random_layer");
    TGLayerParams::from_lookup(|field| {
        let t = base
            .named()
            .into_iter()
            .find(|(f, _)| *f == field)
            .map(|(_, t)| t.clone())
            .expect("known field");
        let fan_in = t.shape()[0] as f64;
        let data = if field.ends_with("ln_gain") {
            draw.normal_vec(t.numel(), 0.1).into_iter().map(|v| 1.0 + v).collect()
        } else if field.ends_with("ln_bias") {
            draw.normal_vec(t.numel(), 0.1)
        } else {
            draw.normal_vec(t.numel(), 1.0 / fan_in.sqrt())
        };
        Tensor::param(t.shape(), data)
    })
}

/// Batched attention vs. the loop reference on `shapes` random shapes, with
/// and without RoPE. Returns the worst absolute deviation.
pub fn attention_oracle(seed: u64, shapes: usize) -> Result<OracleResult> {
    let mut rng = RngState::new(seed).derive("attention_oracle");
    let mut worst: f64 = 0.0;
    for case in 0..shapes {
        let heads = 1 + rng.below(3);
        let dh = 2 * (1 + rng.below(4));
        let d = heads * dh;
        let (batch, seq) = (1 + rng.below(4), 1 + rng.below(7));
        let x = random_tensor(&mut rng, &[batch, seq, d], 1.0)?;
        let p = random_attention(&mut rng, d)?;
        let rope = case % 2 == 0;
        for rope in [rope, !rope] {
            let fast = multi_head_self_attention(&x, &p, heads, rope)?;
            let slow = naive_attention(
                x.data(),
                batch,
                seq,
                d,
                heads,
                rope,
                [p.wq.data(), p.wk.data(), p.wv.data(), p.wo.data()],
            );
            for (a, b) in fast.data().iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(OracleResult::new(
        "attention_oracle",
        worst <= 1e-12,
        format!("{shapes} shapes x {{rope, no rope}}, max |diff| = {worst:.3e} (tol 1e-12)"),
    ))
}

fn small_cfg(rng: &mut RngState) -> TGConfig {
    let mut cfg = TGConfig::new(8, 2);
    cfg.num_layers = 1;
    cfg.mlp_hidden = 16;
    cfg.rope_enabled = rng.below(2) == 0;
    cfg
}

/// force_zero is a bitwise identity, force_one matches the ungated layer,
/// and zero-initialized gates read exactly 0.5 on the first pass.
pub fn gate_equivalences(seed: u64, instances: usize) -> Result<Vec<OracleResult>> {
    let mut rng = RngState::new(seed).derive("gate_equivalences");
    let (mut zero_ok, mut one_dev, mut half_ok) = (true, 0.0f64, true);
    for _ in 0..instances {
        let mut cfg = small_cfg(&mut rng);
        let (t, l) = (1 + rng.below(4), 1 + rng.below(5));
        let v = random_tensor(&mut rng, &[t, l, cfg.d_model], 1.0)?;
        let params = random_layer(&cfg, &mut rng)?;

        // Each sublayer alone, gate pinned shut.
        cfg.gate_override = GateOverride::ForceZero;
        for which in [Submodule::Spatial, Submodule::Temporal, Submodule::Mlp] {
            let mut single = cfg.clone();
            single.spatial_enabled = which == Submodule::Spatial;
            single.temporal_enabled = which == Submodule::Temporal;
            single.mlp_enabled = which == Submodule::Mlp;
            let out = tg_layer_forward(&v, &params, &single, 0, None)?;
            zero_ok &= out.data() == v.data();
        }
        let out = tg_layer_forward(&v, &params, &cfg, 0, None)?;
        zero_ok &= out.data() == v.data();

        cfg.gate_override = GateOverride::ForceOne;
        let forced = tg_layer_forward(&v, &params, &cfg, 0, None)?;
        let mut vanilla_cfg = cfg.clone();
        vanilla_cfg.gating_enabled = false;
        vanilla_cfg.gate_override = GateOverride::None;
        let vanilla = tg_layer_forward(&v, &params, &vanilla_cfg, 0, None)?;
        for (a, b) in forced.data().iter().zip(vanilla.data()) {
            one_dev = one_dev.max((a - b).abs());
        }

        cfg.gate_override = GateOverride::None;
        let fresh = init_layer(&cfg, &rng.derive("fresh"))?;
        let mut sink = Vec::new();
        tg_layer_forward(&v, &fresh, &cfg, 0, Some(&mut sink))?;
        half_ok &= sink.len() == 3 && sink.iter().all(|c| c.values.data().iter().all(|&g| g == 0.5));
    }
    Ok(vec![
        OracleResult::new(
            "gate_force_zero_identity",
            zero_ok,
            format!("{instances} instances, bitwise identity: {zero_ok}"),
        ),
        OracleResult::new(
            "gate_force_one_vanilla",
            one_dev <= 1e-12,
            format!("max |force_one - ungated| = {one_dev:.3e} (tol 1e-12)"),
        ),
        OracleResult::new(
            "gate_zero_init_half",
            half_ok,
            format!("all first-pass gates exactly 0.5: {half_ok}"),
        ),
    ])
}

/// Perturb one frame (spatial-only) or one patch site (temporal-only) and
/// require every other frame/site of the output to stay bitwise unchanged.
pub fn factorization_locality(seed: u64, instances: usize) -> Result<Vec<OracleResult>> {
    let mut rng = RngState::new(seed).derive("locality");
    let (mut frame_ok, mut site_ok) = (true, true);
    let (mut frame_moved, mut site_moved) = (true, true);
    for _ in 0..instances {
        let base_cfg = small_cfg(&mut rng);
        let (t, l) = (2 + rng.below(4), 2 + rng.below(5));
        let d = base_cfg.d_model;
        let v = random_tensor(&mut rng, &[t, l, d], 1.0)?;
        let params = random_layer(&base_cfg, &mut rng)?;

        let mut spatial = base_cfg.clone();
        spatial.temporal_enabled = false;
        spatial.mlp_enabled = false;
        let tf = rng.below(t);
        let mut data = v.to_vec();
        for p in 0..l {
            for c in 0..d {
                data[(tf * l + p) * d + c] += rng.normal();
            }
        }
        let perturbed = Tensor::new(v.shape(), data)?;
        let a = tg_layer_forward(&v, &params, &spatial, 0, None)?;
        let b = tg_layer_forward(&perturbed, &params, &spatial, 0, None)?;
        for frame in 0..t {
            let r = frame * l * d..(frame + 1) * l * d;
            let same = a.data()[r.clone()] == b.data()[r];
            if frame == tf {
                frame_moved &= !same;
            } else {
                frame_ok &= same;
            }
        }

        let mut temporal = base_cfg.clone();
        temporal.spatial_enabled = false;
        temporal.mlp_enabled = false;
        let site = rng.below(l);
        let mut data = v.to_vec();
        for f in 0..t {
            for c in 0..d {
                data[(f * l + site) * d + c] += rng.normal();
            }
        }
        let perturbed = Tensor::new(v.shape(), data)?;
        let a = tg_layer_forward(&v, &params, &temporal, 0, None)?;
        let b = tg_layer_forward(&perturbed, &params, &temporal, 0, None)?;
        for p in 0..l {
            let same = (0..t).all(|f| {
                let r = (f * l + p) * d..(f * l + p + 1) * d;
                a.data()[r.clone()] == b.data()[r]
            });
            if p == site {
                site_moved &= !same;
            } else {
                site_ok &= same;
            }
        }
    }
    Ok(vec![
        OracleResult::new(
            "spatial_frame_locality",
            frame_ok && frame_moved,
            format!("{instances} instances: untouched frames bitwise equal {frame_ok}, perturbed frame changed {frame_moved}"),
        ),
        OracleResult::new(
            "temporal_site_locality",
            site_ok && site_moved,
            format!("{instances} instances: untouched sites bitwise equal {site_ok}, perturbed site changed {site_moved}"),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_attention_single_token_is_value_then_output() {
        let d = 4;
        let x = [0.3, -1.0, 0.5, 2.0];
        let mut rng = RngState::new(1);
        let w: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(16, 0.5)).collect();
        let out = naive_attention(&x, 1, 1, d, 2, true, [&w[0], &w[1], &w[2], &w[3]]);
        let expect = row_times(&row_times(&x, &w[2], d, d), &w[3], d, d);
        assert_eq!(out, expect);
    }
}
