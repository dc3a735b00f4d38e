use std::fmt::Write as _;

use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::params::ParamSet;
use crate::pipeline::{ModelConfig, ModelState};
use crate::tg_block::TGConfig;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients below this are compared in absolute terms,
/// so the effective absolute tolerance is `FD_TOLERANCE * REL_FLOOR = 1e-8`.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_err <= self.tolerance))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>6} {:>12} {:>6}\n", "tensor", "numel", "max_rel_err", "worst");
        for t in &self.tensors {
            let _ = writeln!(out, "{:<28} {:>6} {:>12.3e} {:>6}", t.name, t.numel, t.max_rel_err, t.worst_index);
        }
        out
    }
}

/// Model shape used by the suite: T=3, L_V=4, D_V=16, H=2, L_q=2, N=2.
pub fn tiny_model_config() -> ModelConfig {
    let mut tg = TGConfig::new(16, 2);
    tg.num_layers = 2;
    ModelConfig {
        tg,
        num_queries: 2,
        text_len: 2,
        ..ModelConfig::default()
    }
}

pub const TINY_FRAMES: usize = 3;
pub const TINY_PATCHES: usize = 4;

/// Replaces every weight with a well-conditioned random value (gates
/// included) so no gradient path is trivially zero.
pub fn randomize(params: &mut ParamSet, rng: &RngState) {
    for e in params.entries_mut() {
        let mut r = rng.derive(&e.name);
        let noise = r.normal_vec(e.data.len(), 0.3);
        let base = if e.name.ends_with("ln_gain") { 1.0 } else { 0.0 };
        e.data = noise.into_iter().map(|x| base + x).collect();
    }
}

/// Central differences of `f` at every coordinate of `params`, compared
/// with `analytic`.
pub fn finite_difference_check(
    params: &ParamSet,
    analytic: &[Vec<f64>],
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<TensorCheck>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (ti, entry) in params.entries().iter().enumerate() {
        let mut check = TensorCheck {
            name: entry.name.clone(),
            numel: entry.data.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            max_abs_grad: 0.0,
        };
        for i in 0..entry.data.len() {
            let x = entry.data[i];
            probe.entries_mut()[ti].data[i] = x + FD_STEP;
            let up = f(&probe)?;
            probe.entries_mut()[ti].data[i] = x - FD_STEP;
            let down = f(&probe)?;
            probe.entries_mut()[ti].data[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][i];
            let err = rel_err(a, numeric);
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            if !(err <= check.max_rel_err) {
                check.max_rel_err = err;
                check.worst_index = i;
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// Analytic gradients of `cross_entropy(model(video), label)`.
pub fn model_gradients(state: &ModelState, video: &Tensor, label: usize) -> Result<Vec<Vec<f64>>> {
    let model = state.build(true)?;
    let (loss, _) = model.loss(video, label)?;
    loss.backward()?;
    Ok(model.gradients())
}

pub fn model_loss(state: &ModelState, video: &Tensor, label: usize) -> Result<f64> {
    state.build(false)?.loss(video, label)?.0.item()
}

/// Randomized tiny model and input for `seed`.
pub fn tiny_problem(cfg: &ModelConfig, seed: u64) -> Result<(ModelState, Tensor, usize)> {
    let rng = RngState::new(seed).derive("grad-check");
    let mut state = ModelState::init(cfg, seed)?;
    randomize(&mut state.params, &rng.derive("params"));
    let d = cfg.d_model();
    let video = Tensor::new(
        &[TINY_FRAMES, TINY_PATCHES, d],
        rng.derive("video").normal_vec(TINY_FRAMES * TINY_PATCHES * d, 1.0),
    )?;
    let label = rng.derive("label").below(cfg.num_classes);
    Ok((state, video, label))
}

/// Compares every parameter's analytic gradient with central finite
/// differences on the tiny end-to-end model.
pub fn grad_check_suite(seed: u64) -> Result<GradCheckReport> {
    grad_check_config(&tiny_model_config(), seed)
}

pub fn grad_check_config(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let (state, video, label) = tiny_problem(cfg, seed)?;
    let analytic = model_gradients(&state, &video, label)?;
    let mut probe = state.clone();
    let tensors = finite_difference_check(&state.params, &analytic, |p| {
        probe.params.clone_from(p);
        model_loss(&probe, &video, label)
    })?;
    Ok(GradCheckReport {
        seed,
        tolerance: FD_TOLERANCE,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut p = ParamSet::new();
        p.push("w", &[3], vec![0.5, -1.0, 2.0]);
        let f = |p: &ParamSet| Ok(p.entries()[0].data.iter().map(|x| x * x * x).sum::<f64>());
        let good: Vec<f64> = p.entries()[0].data.iter().map(|x| 3.0 * x * x).collect();
        let checks = finite_difference_check(&p, &[good.clone()], f).unwrap();
        assert!(checks[0].max_rel_err <= FD_TOLERANCE);
        let mut bad = good;
        bad[2] += 0.1;
        let checks = finite_difference_check(&p, &[bad], f).unwrap();
        assert!(checks[0].max_rel_err > FD_TOLERANCE);
        assert_eq!(checks[0].worst_index, 2);
    }

    #[test]
    fn disabled_submodule_has_zero_gradient() {
        let mut cfg = tiny_model_config();
        cfg.tg.temporal_enabled = false;
        let (state, video, label) = tiny_problem(&cfg, 1).unwrap();
        let grads = model_gradients(&state, &video, label).unwrap();
        for (e, g) in state.params.entries().iter().zip(&grads) {
            let temporal = e.name.contains(".temporal.") || e.name.ends_with("gate_temporal");
            if temporal {
                assert!(g.iter().all(|&v| v == 0.0), "{}", e.name);
            } else if e.name.starts_with("tg.") {
                assert!(g.iter().any(|&v| v != 0.0), "{}", e.name);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = tiny_model_config();
        let (a, va, la) = tiny_problem(&cfg, 9).unwrap();
        let (b, vb, lb) = tiny_problem(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(va.data(), vb.data());
        assert_eq!(la, lb);
        assert_eq!(model_gradients(&a, &va, la).unwrap(), model_gradients(&b, &vb, lb).unwrap());
    }

    #[test]
    fn ungated_stack_matches_finite_differences() {
        let mut cfg = tiny_model_config();
        cfg.tg.gating_enabled = false;
        cfg.tg.num_layers = 1;
        let report = grad_check_config(&cfg, 4).unwrap();
        assert!(report.passed(), "{}", report.table());
    }
}
