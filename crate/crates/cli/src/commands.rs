use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aila::ablation::{check_param_ordering, compare_variants, run_ablation, AblationReport};
use aila::gradcheck::{run_suite, SuiteScale};
use aila::model::{read_checkpoint, KnockoutMask};
use aila::train::{evaluate, mean_std, run_seeds, write_run_dir, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{load_plan, load_run_config, OutputSpec};
use crate::{CliError, KnockoutArg, OutputArgs, TrainOverrides};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn apply_overrides(train: &mut TrainConfig, o: &TrainOverrides) -> Result<(), CliError> {
    if !o.seeds.is_empty() {
        train.seeds = o.seeds.clone();
    }
    if let Some(e) = o.epochs {
        train.epochs = e;
    }
    if let Some(lr) = o.lr {
        train.lr = lr;
    }
    Ok(train.validate()?)
}

/// `--out` (or `AILA_OUTPUT_ROOT`), then the config's `[output].dir`, then `runs`.
fn output_root(args: &OutputArgs, spec: &OutputSpec) -> PathBuf {
    args.out
        .clone()
        .or_else(|| spec.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates a fresh run directory. Existing directories are never written
/// into unless `--overwrite` names them explicitly.
fn make_run_dir(args: &OutputArgs, spec: &OutputSpec, config_path: &Path) -> Result<PathBuf, CliError> {
    let root = output_root(args, spec);
    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    if let Some(name) = &args.run_name {
        let dir = root.join(name);
        if dir.exists() {
            if !args.overwrite {
                return Err(CliError::Usage(format!(
                    "run directory {} exists; pass --overwrite to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| io_err(&dir, e))?;
        return Ok(dir);
    }
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let base = format!("{stem}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Other(format!("cannot serialize config: {e}")))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn train(config_path: &Path, overrides: &TrainOverrides, output: &OutputArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(config_path)?;
    apply_overrides(&mut cfg.train, overrides)?;
    let data = cfg.data.build()?;
    let dir = make_run_dir(output, &cfg.output, config_path)?;
    write_toml(&dir.join("config.toml"), &cfg)?;

    let runs = run_seeds(&cfg.model, data.input_spec(), data.as_ref(), &cfg.train)?;
    let mut per_seed = Vec::new();
    let mut diverged = Vec::new();
    for run in &runs {
        let r = &run.report;
        write_run_dir(&dir.join(format!("seed-{}", r.seed)), run)?;
        if let Some(why) = &r.diverged {
            diverged.push(format!("seed {}: {why}", r.seed));
        }
        per_seed.push(json!({
            "seed": r.seed,
            "epochs_run": r.epochs.len(),
            "best_epoch": r.best_epoch,
            "best_val_loss": r.best_val_loss,
            "test_loss": r.test_loss,
            "test_metric": r.test_metric.value,
            "diverged": r.diverged,
        }));
    }
    let metrics: Vec<f64> = runs.iter().map(|r| r.report.test_metric.value).collect();
    let (mean, std) = mean_std(&metrics);
    let summary = json!({
        "run_dir": dir,
        "metric": cfg.train.loss.metric_name(),
        "param_count": runs.first().map(|r| r.report.param_count),
        "dataset_fingerprint": data.fingerprint(),
        "mean": mean,
        "std": std,
        "per_seed": per_seed,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{summary}");
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Diverged(diverged.join("; ")))
    }
}

pub fn eval(checkpoint: &Path, config_path: &Path, knockout: Option<KnockoutArg>) -> Result<(), CliError> {
    let cfg = load_run_config(config_path)?;
    let data = cfg.data.build()?;
    let ckpt = read_checkpoint(checkpoint)?;
    if ckpt.header.model != cfg.model {
        eprintln!("aila: warning: checkpoint was saved with a different model config than {}", config_path.display());
    }
    if let Some(fp) = ckpt.header.extra.get("dataset_fingerprint").and_then(|v| v.as_u64()) {
        if fp != data.fingerprint() {
            eprintln!("aila: warning: dataset differs from the one the checkpoint was trained on");
        }
    }
    let model = ckpt.into_model_with(cfg.model.clone(), data.input_spec())?;
    let n = model.config().num_layers;
    let layers: Vec<Option<usize>> = match knockout {
        None => vec![None],
        Some(KnockoutArg::All) => (1..=n).map(Some).collect(),
        Some(KnockoutArg::Layer(j)) if j > n => {
            return Err(CliError::Usage(format!("--knockout {j} is out of range for a {n}-layer model")));
        }
        Some(KnockoutArg::Layer(j)) => vec![Some(j)],
    };
    let range = data.splits().test_or_val();
    let loss = cfg.train.loss;
    for layer in layers {
        let mask = KnockoutMask::layers(layer.map(|j| j - 1));
        let ev = evaluate(&model, data.as_ref(), range.clone(), loss, cfg.train.batch_size, &mask)?;
        let record = json!({
            "checkpoint": checkpoint,
            "knockout": layer,
            "examples": ev.examples,
            "loss": ev.loss,
            "metric": loss.metric_name(),
            "value": ev.metric,
        });
        println!("{record}");
    }
    Ok(())
}

/// Prints the summary; `run_ablation` has already written the files.
fn finish_ablation(report: &AblationReport, dir: &Path) -> Result<(), CliError> {
    print!("{}", report.summary());
    println!("run directory: {}", dir.display());
    let diverged: Vec<String> = report
        .cells
        .iter()
        .flat_map(|c| {
            c.per_seed
                .iter()
                .filter_map(move |s| s.diverged.as_ref().map(|why| format!("{} seed {}: {why}", c.name, s.seed)))
        })
        .collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Diverged(diverged.join("; ")))
    }
}

pub fn ablate(plan_path: &Path, output: &OutputArgs) -> Result<(), CliError> {
    let plan_file = load_plan(plan_path)?;
    let data = plan_file.data.build()?;
    let dir = make_run_dir(output, &plan_file.output, plan_path)?;
    write_toml(&dir.join("config.toml"), &plan_file)?;
    let report = run_ablation(&plan_file.plan(), data.as_ref(), Some(&dir))?;
    finish_ablation(&report, &dir)
}

pub fn compare(config_path: &Path, overrides: &TrainOverrides, output: &OutputArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(config_path)?;
    apply_overrides(&mut cfg.train, overrides)?;
    let data = cfg.data.build()?;
    let dir = make_run_dir(output, &cfg.output, config_path)?;
    write_toml(&dir.join("config.toml"), &cfg)?;
    let report = compare_variants(&cfg.model, &cfg.train, data.as_ref(), Some(&dir))?;
    let ordering = check_param_ordering(&report);
    match &ordering {
        Ok(()) => println!("parameter ordering plain <= residual_sum < aila1, aila2: ok"),
        Err(e) => println!("parameter ordering: {e}"),
    }
    finish_ablation(&report, &dir)?;
    Ok(ordering?)
}

pub fn gradcheck(scale: SuiteScale) -> Result<(), CliError> {
    let started = Instant::now();
    let entries = run_suite(scale)?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.passes();
        println!(
            "{:<6} {:<44} max_rel {:.3e}  tol {:.0e}  {}",
            e.kind,
            e.report.label,
            e.report.max_rel_error,
            e.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(e.report.label.clone());
        }
    }
    for kind in ["op", "layer", "model"] {
        let worst = entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max);
        println!("max relative error over {kind} checks: {worst:.3e}");
    }
    eprintln!("{} checks in {:.1}s", entries.len(), started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
