use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::synth::Dataset;
use crate::tg_block::TGConfig;

use super::optim::TrainConfig;
use super::train::{train_fresh, RunReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub tg: TGConfig,
}

impl AblationVariant {
    fn flags(label: &str, base: &TGConfig, [s, t, m, g]: [bool; 4]) -> Self {
        let mut tg = base.clone();
        tg.spatial_enabled = s;
        tg.temporal_enabled = t;
        tg.mlp_enabled = m;
        tg.gating_enabled = g;
        Self {
            label: label.to_string(),
            tg,
        }
    }
}

/// Which variants to include when building an [`AblationSpec`] from a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Include the six-row component/gating grid.
    pub table4: bool,
    /// Depths for the full-TG layer sweep.
    pub depths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            table4: true,
            depths: (0..=6).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variants: Vec<AblationVariant>,
}

/// (label, [spatial, temporal, mlp, gating]) for the component/gating grid.
pub const TABLE4_ROWS: [(&str, [bool; 4]); 6] = [
    ("t4_none", [false, false, false, false]),
    ("t4_st_vanilla", [true, true, true, false]),
    ("t4_tg_full", [true, true, true, true]),
    ("t4_no_spatial", [false, true, true, true]),
    ("t4_no_temporal", [true, false, true, true]),
    ("t4_no_mlp", [true, true, false, true]),
];

impl AblationSpec {
    /// Flag grid at `base.num_layers` plus a full-TG depth sweep; sorted by label.
    pub fn build(base: &TGConfig, cfg: &AblationConfig) -> Result<Self> {
        let mut variants = Vec::new();
        if cfg.table4 {
            for (label, flags) in TABLE4_ROWS {
                variants.push(AblationVariant::flags(label, base, flags));
            }
        }
        for &n in &cfg.depths {
            let mut v = AblationVariant::flags(&format!("n{n}"), base, [true; 4]);
            v.tg.num_layers = n;
            variants.push(v);
        }
        let spec = Self { variants };
        spec.validate()?;
        Ok(spec.sorted())
    }

    pub fn sorted(mut self) -> Self {
        self.variants.sort_by(|a, b| a.label.cmp(&b.label));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate ablation label `{}`", w[0])));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub outcome: std::result::Result<RunReport, String>,
}

pub const CSV_HEADER: &str =
    "label,spatial,temporal,mlp,gating,layers,status,test_accuracy,train_accuracy,final_epoch_loss,checkpoint_sha256";

/// Trains every variant on `data`, at most `workers` at a time. Rows come
/// back in the spec's order whatever the completion order; a failing
/// variant is recorded and does not stop the others.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &ModelConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        spec.variants
            .par_iter()
            .map(|variant| {
                let model = ModelConfig {
                    tg: variant.tg.clone(),
                    ..base.clone()
                };
                let outcome = train_fresh(&model, data, train_cfg)
                    .map(|o| o.report)
                    .map_err(|e| e.to_string());
                AblationRow {
                    variant: variant.clone(),
                    outcome,
                }
            })
            .collect()
    });
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Result table with [`CSV_HEADER`]; free of timing so reruns are byte-identical.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let tg = &r.variant.tg;
        let _ = write!(
            out,
            "{},{},{},{},{},{},",
            csv_field(&r.variant.label),
            tg.spatial_enabled,
            tg.temporal_enabled,
            tg.mlp_enabled,
            tg.gating_enabled,
            tg.num_layers
        );
        match &r.outcome {
            Ok(rep) => {
                let _ = writeln!(
                    out,
                    "ok,{},{},{},{}",
                    rep.test_accuracy,
                    rep.train_accuracy,
                    rep.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    rep.checkpoint_sha256
                );
            }
            Err(msg) => {
                let _ = writeln!(out, "{},,,,", csv_field(&format!("error: {msg}")));
            }
        }
    }
    out
}

/// `label,wall_time_secs` companion table.
pub fn ablation_timing_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,wall_time_secs\n");
    for r in rows {
        let secs = r.outcome.as_ref().map(|o| o.wall_time_secs).unwrap_or(f64::NAN);
        let _ = writeln!(out, "{},{secs}", csv_field(&r.variant.label));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_has_grid_and_sweep_sorted() {
        let spec = AblationSpec::build(&TGConfig::default(), &AblationConfig::default()).unwrap();
        let labels: Vec<&str> = spec.variants.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels.len(), 13);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(labels, sorted);
        for (label, _) in TABLE4_ROWS {
            assert!(labels.contains(&label));
        }
        for n in 0..=6 {
            let v = spec.variants.iter().find(|v| v.label == format!("n{n}")).unwrap();
            assert_eq!(v.tg.num_layers, n);
        }
    }

    #[test]
    fn duplicate_labels_rejected() {
        let cfg = AblationConfig {
            table4: false,
            depths: vec![2, 2],
        };
        assert!(AblationSpec::build(&TGConfig::default(), &cfg).is_err());
    }

    #[test]
    fn csv_quotes_errors() {
        let row = AblationRow {
            variant: AblationVariant::flags("x", &TGConfig::default(), [true; 4]),
            outcome: Err("bad, \"worse\"".into()),
        };
        let csv = ablation_csv(&[row]);
        assert_eq!(csv.lines().nth(1).unwrap(), "x,true,true,true,true,3,\"error: bad, \"\"worse\"\"\",,,,");
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 11);
    }
}
