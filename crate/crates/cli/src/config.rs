//! Training configuration assembly: defaults, then a JSON file, then
//! `--set key=value` pairs, then typed flags. Unknown keys are errors.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde_json::{Map, Value};

use ldcrf::trainer::{GradMode, TrainConfig, TrainMode};

use crate::output::{coded, EXIT_CONFIG, EXIT_IO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// LDCRF with a CTC layer; mode decides how it is trained.
    CtcLdcrf,
    /// LDCRF trained frame-wise on per-frame labels.
    Ldcrf,
    /// Plain linear-chain CRF: one hidden state per label, frame-wise.
    Crf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Unsegmented,
    FrameWise,
    PretrainFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradModeArg {
    Exact,
    #[value(name = "local_eq8", alias = "local")]
    Local,
}

impl From<GradModeArg> for GradMode {
    fn from(g: GradModeArg) -> Self {
        match g {
            GradModeArg::Exact => GradMode::Exact,
            GradModeArg::Local => GradMode::Local,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON file with any TrainConfig fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config field; VALUE is parsed as JSON, falling back to a
    /// plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModelKind::CtcLdcrf)]
    pub model: ModelKind,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub grad_mode: Option<GradModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hidden_per_label: Option<usize>,
    /// Print wall-clock time to stderr and store it in the report.
    #[arg(long)]
    pub timing: bool,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    coded(EXIT_CONFIG, msg)
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {raw:?}")))?;
    let key = key.trim().replace('-', "_");
    if key.is_empty() {
        return Err(config_error(format!("--set has an empty key: {raw:?}")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key, value))
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut layered = match serde_json::to_value(TrainConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let set = |m: &mut Map<String, Value>, key: &str, value: Value| -> Result<()> {
            if !m.contains_key(key) {
                return Err(config_error(format!("unknown config key {key:?}")));
            }
            m.insert(key.to_string(), value);
            Ok(())
        };

        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| coded(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let Value::Object(file) = file else {
                return Err(config_error(format!("{} must hold a JSON object", path.display())));
            };
            for (k, v) in file {
                set(&mut layered, &k, v)?;
            }
        }
        for raw in &self.overrides {
            let (k, v) = parse_override(raw)?;
            set(&mut layered, &k, v)?;
        }

        let mut config: TrainConfig = serde_json::from_value(Value::Object(layered))
            .map_err(|e| config_error(format!("invalid config: {e}")))?;
        self.apply_flags(&mut config)?;
        config.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(config)
    }

    fn apply_flags(&self, c: &mut TrainConfig) -> Result<()> {
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Unsegmented => TrainMode::Unsegmented,
                ModeArg::FrameWise => TrainMode::FrameWise,
                ModeArg::PretrainFinetune => TrainMode::PretrainFinetune,
            };
        }
        match self.model {
            ModelKind::CtcLdcrf => {}
            ModelKind::Ldcrf | ModelKind::Crf => {
                if self.mode.is_some() && c.mode != TrainMode::FrameWise {
                    return Err(config_error(format!(
                        "--model {:?} trains frame-wise and cannot use --mode {:?}",
                        self.model, c.mode
                    )));
                }
                c.mode = TrainMode::FrameWise;
                if self.model == ModelKind::Crf {
                    if self.hidden_per_label.is_some_and(|h| h != 1) {
                        return Err(config_error("--model crf uses exactly one hidden state per label"));
                    }
                    c.hidden_per_label = 1;
                }
            }
        }
        if let Some(g) = self.grad_mode {
            c.grad_mode = g.into();
        }
        macro_rules! copy {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        copy!(epochs, pretrain_epochs, learning_rate, momentum, batch_size, l2, seed, window, hidden_per_label);
        if self.timing {
            c.record_timing = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        args: TrainArgs,
    }

    fn resolve(argv: &[&str]) -> Result<TrainConfig> {
        Wrap::try_parse_from(std::iter::once("x").chain(argv.iter().copied()))
            .unwrap()
            .args
            .resolve()
    }

    #[test]
    fn defaults_pass_through() {
        assert_eq!(resolve(&[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn flags_beat_overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 3, "seed": 4, "l2": 0.5}"#).unwrap();
        let p = path.to_str().unwrap();
        let c = resolve(&["--config", p, "--set", "epochs=7", "--set", "seed=8", "--seed", "9"]).unwrap();
        assert_eq!((c.epochs, c.seed, c.l2), (7, 9, 0.5));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = resolve(&["--set", "epoch=3"]).unwrap_err();
        assert_eq!(crate::output::exit_code(&err), EXIT_CONFIG);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"learning_rat": 0.1}"#).unwrap();
        assert!(resolve(&["--config", path.to_str().unwrap()]).is_err());
    }

    #[test]
    fn model_kinds() {
        let c = resolve(&["--model", "crf"]).unwrap();
        assert_eq!((c.mode, c.hidden_per_label), (TrainMode::FrameWise, 1));
        let c = resolve(&["--model", "ldcrf", "--hidden-per-label", "3"]).unwrap();
        assert_eq!((c.mode, c.hidden_per_label), (TrainMode::FrameWise, 3));
        assert!(resolve(&["--model", "crf", "--mode", "unsegmented"]).is_err());
        let c = resolve(&["--set", "grad_mode=local_eq8", "--mode", "pretrain-finetune"]).unwrap();
        assert_eq!((c.grad_mode, c.mode), (GradMode::Local, TrainMode::PretrainFinetune));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = resolve(&["--learning-rate=-1"]).unwrap_err();
        assert_eq!(crate::output::exit_code(&err), EXIT_CONFIG);
    }
}
