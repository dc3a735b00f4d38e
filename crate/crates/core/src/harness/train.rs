use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{set_finite_checks, RngState};
use crate::pipeline::{Model, ModelConfig, ModelState};
use crate::synth::{Dataset, DatasetSpec, SyntheticSample};

use super::optim::{adam_step, lr_at, AdamState, TrainConfig};

/// Summary of one training run.
///
/// `wall_time_secs` is kept out of the JSON form so that serialized reports
/// of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub first_batch_loss: f64,
    pub last_batch_loss: f64,
    /// `last_batch_loss <= first_batch_loss`; a warning, not an error.
    pub loss_decreased: bool,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// SHA-256 of the serialized checkpoint, hex.
    pub checkpoint_sha256: String,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub report: RunReport,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label; 0 for an empty set.
pub fn accuracy_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 / logits.len() as f64
}

pub fn predict(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(model.forward(&s.video()?, None)?.logits.to_vec()))
        .collect()
}

pub fn evaluate(model: &Model, samples: &[SyntheticSample]) -> Result<f64> {
    let logits = predict(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(accuracy_from_logits(&logits, &labels))
}

/// Forward + backward of one batch; gradients are `sum_i dL_i / B`.
fn batch_gradients(state: &ModelState, samples: &[&SyntheticSample]) -> Result<(Vec<Vec<f64>>, f64)> {
    let model = state.build(true)?;
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        let (loss, _) = model.loss(&s.video()?, s.label)?;
        total += loss.item()?;
        loss.scale(scale)?.backward()?;
    }
    Ok((model.gradients(), total * scale))
}

/// Re-runs a failing batch with finite checks on to name the culprit.
fn diagnose(state: &ModelState, samples: &[&SyntheticSample], grads: Option<&[Vec<f64>]>) -> String {
    if let Some(e) = state.params.entries().iter().find(|e| e.data.iter().any(|v| !v.is_finite())) {
        return format!("parameter `{}` holds a non-finite value", e.name);
    }
    let previous = set_finite_checks(true);
    let rerun = batch_gradients(state, samples);
    set_finite_checks(previous);
    match rerun {
        Err(Error::NonFinite { op }) => format!("operation `{op}` produced a non-finite value"),
        Err(e) => format!("re-run failed: {e}"),
        Ok(_) => match grads.and_then(|g| g.iter().position(|g| g.iter().any(|v| !v.is_finite()))) {
            Some(i) => format!("gradient of `{}` is non-finite", state.params.entries()[i].name),
            None => "loss overflowed without a non-finite intermediate".into(),
        },
    }
}

/// Trains `state` on `data.train` and evaluates on both splits.
pub fn train(mut state: ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let shuffle = RngState::new(cfg.seed).derive("shuffle");
    let mut adam = AdamState::new(&state.params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffle.derive_index(epoch as u64).permutation(n);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let diverged = |grads: Option<&[Vec<f64>]>| {
                Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}: {}",
                    diagnose(&state, &batch, grads)
                ))
            };
            let (grads, loss) = match batch_gradients(&state, &batch) {
                Err(Error::NonFinite { .. }) => return Err(diverged(None)),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(diverged(Some(&grads)));
            }
            if step == 0 {
                first = loss;
            }
            last = loss;
            sum += loss * batch.len() as f64;
            let lr = lr_at(step, total, cfg);
            adam_step(
                &mut state.params,
                &grads,
                &mut adam,
                step as u64 + 1,
                lr,
                cfg,
                &state.cfg.frozen_groups,
            )?;
            step += 1;
        }
        epoch_losses.push(sum / n as f64);
    }
    let model = state.build(false)?;
    let train_accuracy = evaluate(&model, &data.train)?;
    let test_accuracy = evaluate(&model, &data.test)?;
    let checkpoint_sha256 = sha256_hex(&state.to_bytes()?);
    let report = RunReport {
        model: state.cfg.clone(),
        train: cfg.clone(),
        dataset: data.spec.clone(),
        epoch_losses,
        first_batch_loss: first,
        last_batch_loss: last,
        loss_decreased: !(last > first),
        steps: step,
        train_accuracy,
        test_accuracy,
        checkpoint_sha256,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { state, report })
}

/// Initializes a model from `model_cfg` and trains it.
pub fn train_fresh(model_cfg: &ModelConfig, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = ModelState::init(model_cfg, cfg.seed)?;
    train(state, data, cfg)
}

/// Writes `checkpoint.tgv`, `report.json` and `timing.json` into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.state.save(&dir.join("checkpoint.tgv"))?;
    let report = serde_json::to_string_pretty(&outcome.report)? + "\n";
    let path = dir.join("report.json");
    std::fs::write(&path, report).map_err(|e| Error::io(&path, e))?;
    let timing = serde_json::json!({ "wall_time_secs": outcome.report.wall_time_secs });
    let path = dir.join("timing.json");
    std::fs::write(&path, serde_json::to_string_pretty(&timing)? + "\n").map_err(|e| Error::io(&path, e))
}
