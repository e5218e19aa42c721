//! Run and plan files.
//!
//! ```toml
//! [model]            # ModelConfig fields
//! [train]            # TrainConfig fields
//! [data]             # kind = "long_memory" | "csv" | "tokens", plus options
//! [output]           # dir = "runs" (optional)
//! [ablation]         # plan files only: axis = "depth", values = [2, 4, 6]
//! ```
//!
//! Unknown keys anywhere are rejected; the error names the key and line.

use std::fs;
use std::path::{Path, PathBuf};

use aila::ablation::{AblationAxis, AblationPlan};
use aila::data::{
    load_csv_series, synth_long_memory, synth_token_task, CsvOptions, Dataset, LongMemoryOptions, SeriesDataset,
    TokenTaskOptions,
};
use aila::model::ModelConfig;
use aila::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    LongMemory(LongMemoryOptions),
    Tokens(TokenTaskOptions),
    Csv(CsvSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    /// Optional binary cache of the prepared windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    pub value_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_column: Option<String>,
    /// Required: the window length has no sensible default.
    pub window: usize,
    /// Required: steps between the window's end and the target.
    pub horizon: usize,
    #[serde(default)]
    pub monthly: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_frac: Option<f64>,
}

impl CsvSource {
    fn options(&self) -> CsvOptions {
        let mut o = CsvOptions::new(self.value_column.clone(), self.window, self.horizon);
        o.monthly = self.monthly;
        if let Some(c) = &self.date_column {
            o.date_column = c.clone();
        }
        if let Some(f) = self.train_frac {
            o.train_frac = f;
        }
        if let Some(f) = self.val_frac {
            o.val_frac = f;
        }
        o
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    pub ablation: AblationAxis,
    #[serde(default)]
    pub retrain_knockout: bool,
    #[serde(default)]
    pub output: OutputSpec,
}

impl PlanFile {
    pub fn plan(&self) -> AblationPlan {
        AblationPlan {
            model: self.model.clone(),
            train: self.train.clone(),
            ablation: self.ablation.clone(),
            retrain_knockout: self.retrain_knockout,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parses TOML, mapping failures to config errors that cite the line.
pub fn parse<T: for<'de> Deserialize<'de>>(text: &str, origin: &Path) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|s| format!(" (line {})", text[..s.start.min(text.len())].matches('\n').count() + 1))
            .unwrap_or_default();
        CliError::Config(format!("{}{at}: {}", origin.display(), e.message()))
    })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = parse(&read(path)?, path)?;
    cfg.data.resolve_paths(path);
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_plan(path: &Path) -> Result<PlanFile, CliError> {
    let mut plan: PlanFile = parse(&read(path)?, path)?;
    plan.data.resolve_paths(path);
    plan.plan().validate()?;
    Ok(plan)
}

impl DataSpec {
    fn resolve_paths(&mut self, config_path: &Path) {
        if let DataSpec::Csv(src) = self {
            let base = config_path.parent().unwrap_or(Path::new("."));
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
            if let Some(c) = &mut src.cache {
                if c.is_relative() {
                    *c = base.join(&*c);
                }
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Dataset>, CliError> {
        Ok(match self {
            DataSpec::LongMemory(o) => Box::new(synth_long_memory(o)?),
            DataSpec::Tokens(o) => Box::new(synth_token_task(o)?),
            DataSpec::Csv(src) => Box::new(load_csv(src)?),
        })
    }
}

fn load_csv(src: &CsvSource) -> Result<SeriesDataset, CliError> {
    if let Some(cache) = &src.cache {
        if cache.exists() {
            return Ok(SeriesDataset::read_cache(cache)?);
        }
    }
    if !src.path.exists() {
        return Err(CliError::Io(format!("data file {} does not exist", src.path.display())));
    }
    let ds = load_csv_series(&src.path, &src.options())?;
    if let Some(cache) = &src.cache {
        ds.write_cache(cache)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
variant = "aila2"
num_layers = 2
hidden = 8

[train]
epochs = 3
seeds = [1, 2]

[data]
kind = "long_memory"
num_examples = 50
window = 6
lag = 3
"#;

    #[test]
    fn parses_and_defaults() {
        let c: RunConfig = parse(GOOD, Path::new("x.toml")).unwrap();
        assert_eq!(c.model.heads, 1);
        assert_eq!(c.train.batch_size, 32);
        assert!(matches!(c.data, DataSpec::LongMemory(ref o) if o.lag == 3));
    }

    #[test]
    fn unknown_key_cites_line() {
        let text = GOOD.replace("[model]", "[modle]");
        let err = parse::<RunConfig>(&text, Path::new("x.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("modle") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_nested_key() {
        let text = GOOD.replace("hidden = 8", "hidden = 8\nwidth = 3");
        let msg = parse::<RunConfig>(&text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(msg.contains("width") && msg.contains("line 6"), "{msg}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c: RunConfig = parse(GOOD, Path::new("x.toml")).unwrap();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = parse(&text, Path::new("echo.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn plan_axis() {
        let text = format!("{GOOD}\n[ablation]\naxis = \"depth\"\nvalues = [2, 4]\n");
        let p: PlanFile = parse(&text, Path::new("p.toml")).unwrap();
        assert_eq!(p.ablation, AblationAxis::Depth(vec![2, 4]));
    }
}
