use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use timegate::gateviz::{capture_gates, export_heatmap, pool_gates, HeatmapFormat};
use timegate::harness::ablation::{ablation_timing_csv, AblationSpec};
use timegate::harness::oracles::{attention_oracle, factorization_locality, gate_equivalences, OracleResult};
use timegate::harness::train::write_run;
use timegate::harness::{ablation_csv, evaluate, grad_check_suite, run_ablation, train_fresh, RunConfig};
use timegate::pipeline::ModelState;
use timegate::synth::generate;
use timegate::tg_block::Submodule;
use timegate::Error;

#[derive(Parser)]
#[command(name = "timegate", version, about = "Time-gated video attention: checks, training, ablations, gate heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every parameter gradient on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Shorthand for `--set train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the configured synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation variant and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variants trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export a gate heatmap for one test sample.
    VizGates {
        #[command(flatten)]
        common: Common,
        /// Trained weights; a fresh init from the config seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = SubmoduleArg::Temporal)]
        submodule: SubmoduleArg,
        #[arg(long, value_enum, default_value_t = FormatArg::Both)]
        format: FormatArg,
    },
    /// Attention, gate-equivalence and factorization-locality oracles.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Random shapes for the attention oracle.
        #[arg(long, default_value_t = 20)]
        shapes: usize,
        /// Random instances for the gate and locality checks.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SubmoduleArg {
    Spatial,
    Temporal,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Pgm,
    Both,
}

/// Exit status: 1 for failed checks and runtime errors, 2 for bad input.
enum Failure {
    Check(String),
    Err(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Err(e)
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig, Error> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    match &common.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_json("{}", &overrides),
    }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `dir` and records the resolved configuration in it.
fn prepare(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write(&dir.join("resolved_config.json"), cfg.to_json()?)
}

fn seed_override(seed: Option<u64>) -> Vec<String> {
    seed.map(|s| vec![format!("train.seed={s}")]).unwrap_or_default()
}

fn grad_check(common: &Common, seed: Option<u64>) -> Outcome {
    let cfg = load_config(common, &seed_override(seed))?;
    let report = grad_check_suite(cfg.train.seed)?;
    print!("{}", report.table());
    if let Some(dir) = &common.out {
        prepare(dir, &cfg)?;
        let mut csv = String::from("tensor,numel,max_rel_err,worst_index\n");
        for t in &report.tensors {
            csv.push_str(&format!("{},{},{},{}\n", t.name, t.numel, t.max_rel_err, t.worst_index));
        }
        write(&dir.join("grad_check.csv"), csv)?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|t| format!("{} (max rel err {:.3e} at index {})", t.name, t.max_rel_err, t.worst_index))
        .collect();
    if failed.is_empty() {
        println!("all {} tensors within {:e}", report.tensors.len(), report.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn train_cmd(common: &Common) -> Outcome {
    let cfg = load_config(common, &[])?;
    let dir = out_dir(common, "out/train");
    let data = generate(&cfg.dataset)?;
    let outcome = train_fresh(&cfg.model, &data, &cfg.train)?;
    prepare(&dir, &cfg)?;
    write_run(&dir, &outcome)?;
    let r = &outcome.report;
    println!(
        "steps {}  final loss {:.6}  train acc {:.4}  test acc {:.4}  ({:.1}s)",
        r.steps,
        r.epoch_losses.last().copied().unwrap_or(f64::NAN),
        r.train_accuracy,
        r.test_accuracy,
        r.wall_time_secs
    );
    if !r.loss_decreased {
        eprintln!(
            "warning: last batch loss {:.6} exceeds first batch loss {:.6}",
            r.last_batch_loss, r.first_batch_loss
        );
    }
    Ok(())
}

fn eval_cmd(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common, &[])?;
    let state = ModelState::load(checkpoint)?;
    let data = generate(&cfg.dataset)?;
    let accuracy = evaluate(&state.build(false)?, &data.test)?;
    println!("test accuracy {accuracy}");
    if let Some(dir) = &common.out {
        prepare(dir, &cfg)?;
        let json = serde_json::json!({ "samples": data.test.len(), "test_accuracy": accuracy });
        write(&dir.join("eval.json"), serde_json::to_string_pretty(&json).map_err(Error::from)? + "\n")?;
    }
    Ok(())
}

fn ablate(common: &Common, workers: usize) -> Outcome {
    let cfg = load_config(common, &[])?;
    let dir = out_dir(common, "out/ablation");
    let spec = AblationSpec::build(&cfg.model.tg, &cfg.ablation)?;
    let data = generate(&cfg.dataset)?;
    let rows = run_ablation(&spec, &cfg.model, &data, &cfg.train, workers)?;
    prepare(&dir, &cfg)?;
    let csv = ablation_csv(&rows);
    write(&dir.join("ablation.csv"), &csv)?;
    write(&dir.join("ablation_timing.csv"), ablation_timing_csv(&rows))?;
    print!("{csv}");
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.outcome.is_err())
        .map(|r| r.variant.label.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("variants failed: {}", failed.join(", "))))
    }
}

fn viz_gates(
    common: &Common,
    checkpoint: Option<&Path>,
    layer: usize,
    sample: usize,
    submodule: SubmoduleArg,
    format: FormatArg,
) -> Outcome {
    let cfg = load_config(common, &[])?;
    let dir = out_dir(common, "out/gates");
    let state = match checkpoint {
        Some(p) => ModelState::load(p)?,
        None => ModelState::init(&cfg.model, cfg.train.seed)?,
    };
    if state.cfg.d_model() != cfg.dataset.d_model {
        return Err(Error::Config(format!(
            "checkpoint width {} does not match dataset.d_model {}",
            state.cfg.d_model(),
            cfg.dataset.d_model
        ))
        .into());
    }
    let data = generate(&cfg.dataset)?;
    let s = data
        .test
        .get(sample)
        .ok_or_else(|| Error::Usage(format!("sample {sample} out of range for {} test samples", data.test.len())))?;
    let submodule = match submodule {
        SubmoduleArg::Spatial => Submodule::Spatial,
        SubmoduleArg::Temporal => Submodule::Temporal,
        SubmoduleArg::Mlp => Submodule::Mlp,
    };
    let gates = capture_gates(&state.build(false)?, &s.video()?, layer, submodule)?;
    let mut heatmap = pool_gates(&gates)?;
    heatmap.layer = layer;
    heatmap.submodule = submodule;
    heatmap.sample_id = sample as u64;
    prepare(&dir, &cfg)?;
    let stem = format!("gates_{submodule}_l{layer}_s{sample}");
    let formats: &[HeatmapFormat] = match format {
        FormatArg::Csv => &[HeatmapFormat::Csv],
        FormatArg::Pgm => &[HeatmapFormat::Pgm],
        FormatArg::Both => &[HeatmapFormat::Csv, HeatmapFormat::Pgm],
    };
    for &f in formats {
        let ext = if f == HeatmapFormat::Csv { "csv" } else { "pgm" };
        let path = dir.join(format!("{stem}.{ext}"));
        export_heatmap(&heatmap, &path, f)?;
        println!("wrote {} ({} sites x {} frames)", path.display(), heatmap.sites, heatmap.frames);
    }
    Ok(())
}

fn oracle_check(common: &Common, seed: Option<u64>, shapes: usize, instances: usize) -> Outcome {
    let cfg = load_config(common, &seed_override(seed))?;
    let seed = cfg.train.seed;
    let mut results: Vec<OracleResult> = vec![attention_oracle(seed, shapes)?];
    results.extend(gate_equivalences(seed, instances)?);
    results.extend(factorization_locality(seed, instances)?);
    let mut lines = String::new();
    for r in &results {
        let line = format!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(dir) = &common.out {
        prepare(dir, &cfg)?;
        write(&dir.join("oracles.txt"), lines)?;
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Check(format!("{n} oracle checks failed"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GradCheck { common, seed } => grad_check(common, *seed),
        Command::Train { common } => train_cmd(common),
        Command::Eval { common, checkpoint } => eval_cmd(common, checkpoint),
        Command::Ablate { common, workers } => ablate(common, *workers),
        Command::VizGates {
            common,
            checkpoint,
            layer,
            sample,
            submodule,
            format,
        } => viz_gates(common, checkpoint.as_deref(), *layer, *sample, *submodule, *format),
        Command::OracleCheck {
            common,
            seed,
            shapes,
            instances,
        } => oracle_check(common, *seed, *shapes, *instances),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Err(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
