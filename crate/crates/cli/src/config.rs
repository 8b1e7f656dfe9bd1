//! Run configuration: a TOML file with `[model]`, `[encoder]`, `[train]` and
//! `[paths]` tables, plus `--section.key=value` overrides from the command
//! line.

use std::fs;
use std::path::{Path, PathBuf};

use sarcasm_core::model::ModelConfig;
use sarcasm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SECTIONS: [&str; 4] = ["model", "encoder", "train", "paths"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Everything a run needs. In the file, the encoder settings live in their
/// own `[encoder]` table rather than under `[model]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

/// One `--section.key=value` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub section: String,
    pub key: String,
    pub value: Value,
}

/// Reads `value` as a TOML value, falling back to a plain string so that
/// `--model.squeeze_activation=relu` needs no quoting.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `args` into overrides and the remaining arguments. Any
/// `--a.b=...` flag whose section is unknown is a usage error.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<Override>, Vec<String>), CliError> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    for arg in args {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let Some((path, value)) = body.split_once('=') else {
            rest.push(arg);
            continue;
        };
        let Some((section, key)) = path.split_once('.') else {
            rest.push(arg);
            continue;
        };
        if !SECTIONS.contains(&section) {
            return Err(CliError::Usage(format!(
                "unknown config section `{section}` in `{arg}` (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
        if key.is_empty() || key.contains('.') {
            return Err(CliError::Usage(format!("malformed override `{arg}`")));
        }
        overrides.push(Override {
            section: section.into(),
            key: key.into(),
            value: parse_value(value),
        });
    }
    Ok((overrides, rest))
}

fn section<'t>(table: &'t mut Table, name: &str) -> Result<&'t mut Table, CliError> {
    table
        .entry(name)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("`{name}` must be a table")))
}

impl RunConfig {
    /// Builds the config from an optional file and overrides, then
    /// validates it.
    pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            section(&mut table, &o.section)?.insert(o.key.clone(), o.value.clone());
        }
        Self::from_table(table)
    }

    fn from_table(mut table: Table) -> Result<Self, CliError> {
        if let Some(encoder) = table.remove("encoder") {
            if section(&mut table, "model")?
                .insert("encoder".into(), encoder)
                .is_some()
            {
                return Err(CliError::Usage(
                    "encoder settings belong in [encoder], not [model.encoder]".into(),
                ));
            }
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| {
                CliError::Usage(format!("invalid configuration: {}", e.message()))
            })?;
        config.validate()?;
        Ok(config)
    }

    /// A toy-encoder `vocab_size` of 0 means "size the vocabulary from the
    /// training data"; a positive value caps it.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut model = self.model.clone();
        if model.has_toy_encoder() && model.encoder.vocab_size == 0 {
            model.encoder.vocab_size = usize::MAX;
        }
        model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let mut table = Table::try_from(self).expect("config serializes");
        let encoder = table
            .get_mut("model")
            .and_then(Value::as_table_mut)
            .and_then(|m| m.remove("encoder"));
        let mut out = Table::new();
        for name in SECTIONS {
            let value = if name == "encoder" {
                encoder.clone()
            } else {
                table.remove(name)
            };
            if let Some(v) = value {
                out.insert(name.into(), v);
            }
        }
        toml::to_string(&out).expect("table serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_toml())
            .map_err(|e| CliError::Core(sarcasm_core::CoreError::io(path, e)))
    }
}
