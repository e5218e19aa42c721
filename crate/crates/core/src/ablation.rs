//! Variant, head-count, depth and layer-knockout studies.
//!
//! A plan names a base model, a training setup and one axis with a list of
//! values. Each value becomes a cell trained (or, for knockout, evaluated)
//! once per seed. Deltas are always taken against the base cell, whose
//! configuration is the plan's model as written.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/ablation_report.json   deterministic aggregate
//! <out>/timings.json           wall-clock per cell
//! <out>/summary.txt            human-readable table
//! <out>/<cell>/seed-<s>/       run directory per trained seed
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{KnockoutMask, Variant};
use crate::model::{Model, ModelConfig};
use crate::train::{evaluate, mean_std, run_seeds, train_with_knockout, write_run_dir, SeedRun, TrainConfig};

/// The swept axis and its values. Knockout values are 1-based layer
/// indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    Variant(Vec<Variant>),
    Heads(Vec<usize>),
    Depth(Vec<usize>),
    Knockout(Vec<usize>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Variant(_) => "variant",
            AblationAxis::Heads(_) => "heads",
            AblationAxis::Depth(_) => "depth",
            AblationAxis::Knockout(_) => "knockout",
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            AblationAxis::Variant(v) => v.iter().map(|x| x.to_string()).collect(),
            AblationAxis::Heads(v) | AblationAxis::Depth(v) | AblationAxis::Knockout(v) => {
                v.iter().map(|x| x.to_string()).collect()
            }
        }
    }

    fn len(&self) -> usize {
        self.labels().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationAxis,
    /// Knockout cells retrain with the layer held at zero instead of
    /// evaluating the trained base model.
    #[serde(default)]
    pub retrain_knockout: bool,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let axis = &self.ablation;
        if axis.len() == 0 {
            return Err(Error::Config(format!("ablation axis `{}` has no values", axis.name())));
        }
        let mut labels = axis.labels();
        labels.sort();
        labels.dedup();
        if labels.len() != axis.len() {
            return Err(Error::Config(format!("ablation axis `{}` repeats a value", axis.name())));
        }
        match axis {
            AblationAxis::Knockout(v) => {
                for &j in v {
                    if j == 0 || j > self.model.num_layers {
                        return Err(Error::Config(format!(
                            "knockout layer {j} outside 1..={}",
                            self.model.num_layers
                        )));
                    }
                }
            }
            _ => {
                for label in axis.labels() {
                    self.cell_config(&label)?.validate()?;
                }
            }
        }
        Ok(())
    }

    fn cell_config(&self, label: &str) -> Result<ModelConfig> {
        let mut c = self.model.clone();
        let num = || label.parse::<usize>().map_err(|_| Error::Config(format!("bad axis value `{label}`")));
        match self.ablation {
            AblationAxis::Variant(_) => {
                c.variant = label.parse()?;
                if c.variant != Variant::Aila1 {
                    c.task_embedding = None;
                }
            }
            AblationAxis::Heads(_) => c.heads = num()?,
            AblationAxis::Depth(_) => c.num_layers = num()?,
            AblationAxis::Knockout(_) => {}
        }
        Ok(c)
    }

    /// Label of the cell whose configuration equals the base model.
    fn base_label(&self) -> Option<String> {
        let m = &self.model;
        let v = match &self.ablation {
            AblationAxis::Variant(v) => v.contains(&m.variant).then(|| m.variant.to_string()),
            AblationAxis::Heads(v) => v.contains(&m.heads).then(|| m.heads.to_string()),
            AblationAxis::Depth(v) => v.contains(&m.num_layers).then(|| m.num_layers.to_string()),
            AblationAxis::Knockout(_) => None,
        };
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metric: f64,
    pub diverged: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub train_seconds: f64,
    pub inference_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// `base`, or `<axis>=<value>`.
    pub name: String,
    pub is_base: bool,
    /// Configuration that reproduces this cell at each listed seed.
    pub config: ModelConfig,
    /// 1-based layer zeroed at evaluation (knockout cells only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knockout_layer: Option<usize>,
    pub param_count: usize,
    pub dataset_fingerprints: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    /// `mean − base mean`.
    pub delta: f64,
    /// `delta / |base mean|`.
    pub relative_delta: f64,
    /// `|delta|` does not exceed the base cell's seed standard deviation.
    pub within_noise: bool,
    /// Parameter checksums per seed before and after a knockout evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checksums: Vec<(u64, u64)>,
    /// Wall-clock summed over seeds; not part of the deterministic report.
    #[serde(skip)]
    pub timing: CellTiming,
}

impl CellReport {
    pub fn any_diverged(&self) -> bool {
        self.per_seed.iter().any(|s| s.diverged.is_some())
    }

    pub fn checksums_unchanged(&self) -> bool {
        self.checksums.iter().all(|(a, b)| a == b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub metric: String,
    pub higher_is_better: bool,
    pub seeds: Vec<u64>,
    pub plan: AblationPlan,
    /// Base cell first, then one cell per axis value in plan order (the base
    /// cell is not repeated when it coincides with an axis value).
    pub cells: Vec<CellReport>,
}

impl AblationReport {
    pub fn base(&self) -> &CellReport {
        self.cells.iter().find(|c| c.is_base).expect("report always has a base cell")
    }

    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn total_runs(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.knockout_layer.is_none() || self.plan.retrain_knockout)
            .map(|c| c.per_seed.len())
            .sum()
    }

    /// Plain text table of the cells.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ablation over {} ({} seeds, metric {})",
            self.axis,
            self.seeds.len(),
            self.metric
        );
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>12} {:>12} {:>12} {:>9} {:>10} {:>10}  note",
            "cell", "params", "mean", "std", "delta", "rel", "train_s", "infer_s"
        );
        for c in &self.cells {
            let mut note = Vec::new();
            if c.is_base {
                note.push("base");
            } else if c.within_noise {
                note.push("within noise");
            }
            if c.any_diverged() {
                note.push("DIVERGED");
            }
            if !c.checksums_unchanged() {
                note.push("PARAMS MUTATED");
            }
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>12.6} {:>12.6} {:>+12.6} {:>+8.2}% {:>10.2} {:>10.3}  {}",
                c.name,
                c.param_count,
                c.mean,
                c.std,
                c.delta,
                100.0 * c.relative_delta,
                c.timing.train_seconds,
                c.timing.inference_seconds,
                note.join(", ")
            );
        }
        s
    }

    /// Writes the report, timings and summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("ablation_report.json");
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))?;
        let timings: Vec<_> = self
            .cells
            .iter()
            .map(|c| serde_json::json!({"cell": c.name, "train_seconds": c.timing.train_seconds, "inference_seconds": c.timing.inference_seconds}))
            .collect();
        let p = dir.join("timings.json");
        fs::write(&p, serde_json::to_string_pretty(&timings)? + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.txt");
        fs::write(&p, self.summary()).map_err(|e| Error::io(&p, e))
    }
}

struct RawCell {
    name: String,
    is_base: bool,
    config: ModelConfig,
    knockout_layer: Option<usize>,
    param_count: usize,
    fingerprints: Vec<u64>,
    per_seed: Vec<SeedResult>,
    checksums: Vec<(u64, u64)>,
    timing: CellTiming,
}

fn trained_cell(name: String, is_base: bool, config: ModelConfig, runs: &[SeedRun]) -> RawCell {
    let mut timing = CellTiming::default();
    for r in runs {
        timing.train_seconds += r.report.timings.train_seconds;
        timing.inference_seconds += r.report.timings.inference_seconds;
    }
    RawCell {
        name,
        is_base,
        config,
        knockout_layer: None,
        param_count: runs.first().map_or(0, |r| r.report.param_count),
        fingerprints: runs.iter().map(|r| r.report.dataset_fingerprint).collect(),
        per_seed: runs
            .iter()
            .map(|r| SeedResult {
                seed: r.report.seed,
                metric: r.report.test_metric.value,
                diverged: r.report.diverged.clone(),
            })
            .collect(),
        checksums: Vec::new(),
        timing,
    }
}

fn write_cell_runs(out: Option<&Path>, cell: &str, runs: &[SeedRun]) -> Result<()> {
    if let Some(dir) = out {
        for r in runs {
            write_run_dir(&dir.join(cell).join(format!("seed-{}", r.report.seed)), r)?;
        }
    }
    Ok(())
}

/// Runs every cell of `plan` on `data`. When `out` is given, per-seed run
/// directories and the aggregate files are written there.
pub fn run_ablation(plan: &AblationPlan, data: &dyn Dataset, out: Option<&Path>) -> Result<AblationReport> {
    plan.validate()?;
    let input = data.input_spec();
    let tc = &plan.train;
    let axis = plan.ablation.name();
    let mut raw = Vec::new();

    let base_label = plan.base_label();
    let base_runs = run_seeds(&plan.model, input, data, tc)?;
    let base_name = match &base_label {
        Some(l) => format!("{axis}={l}"),
        None => "base".to_string(),
    };
    write_cell_runs(out, &base_name, &base_runs)?;
    raw.push(trained_cell(base_name, true, plan.model.clone(), &base_runs));

    for label in plan.ablation.labels() {
        if Some(&label) == base_label.as_ref() {
            continue;
        }
        let name = format!("{axis}={label}");
        if let AblationAxis::Knockout(_) = plan.ablation {
            let layer: usize = label.parse().expect("validated");
            raw.push(knockout_cell(plan, data, &base_runs, layer, name, out)?);
            continue;
        }
        let config = plan.cell_config(&label)?;
        let runs = run_seeds(&config, input, data, tc)?;
        write_cell_runs(out, &name, &runs)?;
        raw.push(trained_cell(name, false, config, &runs));
    }

    let report = aggregate(plan, raw, tc.loss.metric_name(), tc.loss.higher_is_better());
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

fn knockout_cell(
    plan: &AblationPlan,
    data: &dyn Dataset,
    base_runs: &[SeedRun],
    layer: usize,
    name: String,
    out: Option<&Path>,
) -> Result<RawCell> {
    let mask = KnockoutMask::layers([layer - 1]);
    let tc = &plan.train;
    let test = data.splits().test_or_val();
    let mut cell = RawCell {
        name,
        is_base: false,
        config: plan.model.clone(),
        knockout_layer: Some(layer),
        param_count: base_runs.first().map_or(0, |r| r.report.param_count),
        fingerprints: Vec::new(),
        per_seed: Vec::new(),
        checksums: Vec::new(),
        timing: CellTiming::default(),
    };
    if plan.retrain_knockout {
        let mut runs = Vec::new();
        for &seed in &tc.seeds {
            let mut model = Model::new(plan.model.clone(), data.input_spec(), seed)?;
            let report = train_with_knockout(&mut model, data, tc, seed, &mask)?;
            runs.push(SeedRun { model, report });
        }
        write_cell_runs(out, &cell.name, &runs)?;
        let t = trained_cell(cell.name.clone(), false, plan.model.clone(), &runs);
        cell.fingerprints = t.fingerprints;
        cell.per_seed = t.per_seed;
        cell.timing = t.timing;
        return Ok(cell);
    }
    let mut lines = String::new();
    for run in base_runs {
        let before = run.model.params().checksum();
        let started = std::time::Instant::now();
        let eval = evaluate(&run.model, data, test.clone(), tc.loss, tc.batch_size, &mask)?;
        cell.timing.inference_seconds += started.elapsed().as_secs_f64();
        let after = run.model.params().checksum();
        cell.checksums.push((before, after));
        cell.fingerprints.push(data.fingerprint());
        cell.per_seed.push(SeedResult {
            seed: run.report.seed,
            metric: eval.metric,
            diverged: run.report.diverged.clone(),
        });
        let line = serde_json::json!({
            "seed": run.report.seed,
            "knockout": layer,
            "loss": eval.loss,
            "metric": eval.metric,
            "checksum_before": before,
            "checksum_after": after,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    // The models are the base cell's; only the evaluations are stored here.
    if let Some(dir) = out {
        let dir = dir.join(&cell.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = dir.join("eval.jsonl");
        fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
    }
    Ok(cell)
}

fn aggregate(plan: &AblationPlan, raw: Vec<RawCell>, metric: &str, higher_is_better: bool) -> AblationReport {
    let metrics = |c: &RawCell| c.per_seed.iter().map(|s| s.metric).collect::<Vec<_>>();
    let (base_mean, base_std) = mean_std(&metrics(&raw[0]));
    let cells = raw
        .into_iter()
        .map(|c| {
            let (mean, std) = mean_std(&metrics(&c));
            let delta = mean - base_mean;
            CellReport {
                relative_delta: if base_mean != 0.0 { delta / base_mean.abs() } else { 0.0 },
                within_noise: delta.abs() <= base_std,
                name: c.name,
                is_base: c.is_base,
                config: c.config,
                knockout_layer: c.knockout_layer,
                param_count: c.param_count,
                dataset_fingerprints: c.fingerprints,
                per_seed: c.per_seed,
                mean,
                std,
                delta,
                checksums: c.checksums,
                timing: c.timing,
            }
        })
        .collect();
    AblationReport {
        axis: plan.ablation.name().to_string(),
        metric: metric.to_string(),
        higher_is_better,
        seeds: plan.train.seeds.clone(),
        plan: plan.clone(),
        cells,
    }
}

/// Trains all five variants at the configuration's depth and width.
pub fn compare_variants(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &dyn Dataset,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let plan = AblationPlan {
        model: ModelConfig {
            variant: Variant::Aila1,
            ..model.clone()
        },
        train: train.clone(),
        ablation: AblationAxis::Variant(Variant::ALL.to_vec()),
        retrain_knockout: false,
    };
    run_ablation(&plan, data, out)
}

/// Checks `plain ≤ residual_sum < aila1, aila2` on a variant report.
pub fn check_param_ordering(report: &AblationReport) -> Result<()> {
    let count = |v: Variant| {
        report
            .cells
            .iter()
            .find(|c| c.config.variant == v && c.knockout_layer.is_none())
            .map(|c| c.param_count)
            .ok_or_else(|| Error::Contract(format!("report has no `{v}` cell")))
    };
    let (plain, res) = (count(Variant::Plain)?, count(Variant::ResidualSum)?);
    let (a1, a2) = (count(Variant::Aila1)?, count(Variant::Aila2)?);
    if plain <= res && res < a1 && res < a2 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "parameter ordering violated: plain {plain}, residual_sum {res}, aila1 {a1}, aila2 {a2}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_long_memory, LongMemoryOptions};

    fn plan(axis: AblationAxis) -> AblationPlan {
        AblationPlan {
            model: ModelConfig {
                num_layers: 2,
                hidden: 4,
                ..ModelConfig::new(Variant::Aila2)
            },
            train: TrainConfig {
                epochs: 2,
                seeds: vec![0, 1],
                ..Default::default()
            },
            ablation: axis,
            retrain_knockout: false,
        }
    }

    fn data() -> impl Dataset {
        synth_long_memory(&LongMemoryOptions {
            num_examples: 40,
            window: 4,
            lag: 2,
            noise: 0.05,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn empty_values_rejected() {
        let p = plan(AblationAxis::Heads(vec![]));
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn knockout_range_checked() {
        assert!(plan(AblationAxis::Knockout(vec![3])).validate().is_err());
        assert!(plan(AblationAxis::Knockout(vec![0])).validate().is_err());
        assert!(plan(AblationAxis::Knockout(vec![1, 2])).validate().is_ok());
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(plan(AblationAxis::Heads(vec![1, 3])).validate().is_err());
    }

    #[test]
    fn knockout_cells_and_checksums() {
        let r = run_ablation(&plan(AblationAxis::Knockout(vec![1, 2])), &data(), None).unwrap();
        assert_eq!(r.cells.len(), 3);
        assert_eq!(r.total_runs(), 2);
        assert!(r.cells.iter().all(|c| c.checksums_unchanged()));
        assert_eq!(r.cells[1].knockout_layer, Some(1));
    }

    #[test]
    fn base_not_duplicated() {
        let r = run_ablation(&plan(AblationAxis::Heads(vec![1, 2])), &data(), None).unwrap();
        let names: Vec<_> = r.cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["heads=1", "heads=2"]);
        assert!(r.cells[0].is_base);
        assert_eq!(r.cells[0].delta, 0.0);
    }
}
