//! Run configuration: a flat `key = value` file with one section per stage,
//! overridden by `--section.key value` flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use usfg_core::dataset::AugmentParams;
use usfg_core::postprocess::BoxParams;
use usfg_core::{SynthConfig, TeacherConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Maxf,
    Corloc,
    Pixel,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Maxf => "maxf",
            Metric::Corloc => "corloc",
            Metric::Pixel => "pixel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Every stage reads and writes under this directory.
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub keep_fraction: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { keep_fraction: 0.10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metric: Metric::Maxf }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness; copied into every stage.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub teacher: TeacherConfig,
    pub select: SelectConfig,
    pub augment: AugmentParams,
    pub train: TrainConfig,
    pub boxes: BoxParams,
    pub eval: EvalConfig,
}

/// Keys that exist on the stage structs but are owned by the driver.
const DRIVER_KEYS: [&str; 4] = ["synth.seed", "train.seed", "train.checkpoint_path", "train.loss_log"];

impl RunConfig {
    /// Defaults, then the file, then `overrides` as `(dotted key, raw value)`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
                toml::from_str::<Table>(&text)
                    .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        for key in DRIVER_KEYS {
            let (section, name) = key.split_once('.').expect("dotted");
            if table.get(section).and_then(|s| s.get(name)).is_some() {
                return Err(CliError::Invalid(format!(
                    "{key} is set by the driver; use the global seed and workdir instead"
                )));
            }
        }
        let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut value = Value::Table(table);
        coerce(&mut value, &defaults);
        let mut config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Invalid(format!("config: {}", e.message())))?;
        config.synth.seed = config.seed;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: usfg_core::Error| CliError::Invalid(e.to_string());
        self.synth.validate().map_err(invalid)?;
        self.teacher.validate().map_err(invalid)?;
        if self.train.checkpoint_every > 0 {
            // The driver supplies the path; validate the rest.
            let mut t = self.train.clone();
            t.checkpoint_path = Some(PathBuf::from("checkpoint"));
            t.validate().map_err(invalid)?;
        } else {
            self.train.validate().map_err(invalid)?;
        }
        let k = self.select.keep_fraction;
        if !(k > 0.0 && k <= 1.0) {
            return Err(CliError::Invalid(format!("select.keep_fraction must lie in (0, 1], got {k}")));
        }
        let arch = self.train.preset.architecture();
        let a = &self.augment;
        if a.crop != arch.input_size || a.target != arch.output_side() || a.scale < a.crop {
            return Err(CliError::Invalid(format!(
                "augment sizes (scale {}, crop {}, target {}) do not fit the {} preset (input {}, output {})",
                a.scale,
                a.crop,
                a.target,
                self.train.preset,
                arch.input_size,
                arch.output_side()
            )));
        }
        let b = &self.boxes;
        if !(0.0..=1.0).contains(&b.threshold_rel) || !(0.0..=1.0).contains(&b.min_area_frac) {
            return Err(CliError::Invalid("boxes thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn workdir(&self) -> &Path {
        &self.paths.workdir
    }
}

/// TOML scalar if it parses as one, otherwise the raw text as a string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        [name] if !name.is_empty() => {
            table.insert(name.to_string(), value);
        }
        [section, name] if !section.is_empty() && !name.is_empty() => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(inner) = entry else {
                return Err(CliError::Invalid(format!("{section} is not a section")));
            };
            inner.insert(name.to_string(), value);
        }
        _ => return Err(CliError::Usage(format!("malformed override --{key}"))),
    }
    Ok(())
}

/// Adjusts scalars to the type the default has at the same key, so
/// `keep_fraction = 1` and `--train.preset desk` both work.
fn coerce(value: &mut Value, default: &Value) {
    match (value, default) {
        (Value::Table(t), Value::Table(d)) => {
            for (k, v) in t.iter_mut() {
                if let Some(dv) = d.get(k) {
                    coerce(v, dv);
                }
            }
        }
        (v @ Value::Integer(_), Value::Float(_)) => {
            if let Value::Integer(i) = v {
                *v = Value::Float(*i as f64);
            }
        }
        (v, Value::String(_)) if !v.is_str() && !v.is_table() && !v.is_array() => {
            *v = Value::String(v.to_string());
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed = 3\n[select]\nkeep_fraction = 0.5\n[train]\nsteps = 10\n").unwrap();
        let c = RunConfig::load(Some(&path), &ov(&[("select.keep_fraction", "1"), ("seed", "9")])).unwrap();
        assert_eq!(c.select.keep_fraction, 1.0);
        assert_eq!(c.train.steps, 10);
        assert_eq!((c.seed, c.synth.seed, c.train.seed), (9, 9, 9));
    }

    #[test]
    fn strings_and_enums_parse() {
        let c = RunConfig::load(
            None,
            &ov(&[
                ("train.preset", "tiny"),
                ("augment.crop", "8"),
                ("augment.target", "2"),
                ("augment.scale", "10"),
                ("eval.metric", "corloc"),
                ("paths.workdir", "out/run1"),
            ]),
        )
        .unwrap();
        assert_eq!(c.eval.metric, Metric::Corloc);
        assert_eq!(c.paths.workdir, PathBuf::from("out/run1"));
    }

    #[test]
    fn rejects_unknown_and_driver_keys() {
        assert!(matches!(RunConfig::load(None, &ov(&[("train.stpes", "3")])), Err(CliError::Invalid(_))));
        assert!(matches!(RunConfig::load(None, &ov(&[("bogus.key", "3")])), Err(CliError::Invalid(_))));
        assert!(matches!(RunConfig::load(None, &ov(&[("synth.seed", "3")])), Err(CliError::Invalid(_))));
        assert!(matches!(
            RunConfig::load(None, &ov(&[("select.keep_fraction", "0")])),
            Err(CliError::Invalid(_))
        ));
        // Desk crop sizes with the tiny preset.
        assert!(matches!(RunConfig::load(None, &ov(&[("train.preset", "tiny")])), Err(CliError::Invalid(_))));
    }
}
