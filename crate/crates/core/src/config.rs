//! Run configuration: flat dotted keys (`model.channels = 16`) read from a
//! TOML file, then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const ENV_CONFIG: &str = "BSVSR_CONFIG";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    /// Clip directory for `infer` and `inspect-kernel`.
    pub input: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeOptions {
    /// Per-clip sigma is drawn uniformly from `[sigma_min, sigma_max]`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub kernel_size: usize,
    pub scale: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseSelection {
    Kernel,
    Full,
}

impl std::str::FromStr for PhaseSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(PhaseSelection::Kernel),
            "full" => Ok(PhaseSelection::Full),
            other => Err(Error::config("job.phase", format!("expected kernel or full, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobOptions {
    pub phase: PhaseSelection,
    /// Continue from `paths.checkpoint` when it exists.
    pub resume: bool,
    /// Border crop for metrics.
    pub crop: usize,
    /// Write `bicubic | SR | GT` PNGs during `eval`.
    pub side_by_side: bool,
    /// Frame index inspected by `inspect-kernel`.
    pub frame: usize,
    /// Heat-map cell size in pixels.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
    pub synth: SynthOptions,
    pub degrade: DegradeOptions,
    pub job: JobOptions,
}

impl RunConfig {
    fn with_train(train: TrainConfig) -> Self {
        Self {
            paths: Paths {
                dataset: "data".into(),
                output: "out".into(),
                checkpoint: "out/model.ckpt".into(),
                input: "data/lr/clip_000".into(),
            },
            synth: SynthOptions {
                clips: 64,
                height: 128,
                width: 128,
                frames: 7,
                seed: train.seed,
            },
            degrade: DegradeOptions {
                sigma_min: train.sigma_range.0,
                sigma_max: train.sigma_range.1,
                kernel_size: train.model.kernel_size,
                scale: train.model.scale,
                seed: train.seed,
            },
            job: JobOptions {
                phase: PhaseSelection::Full,
                resume: false,
                crop: 0,
                side_by_side: true,
                frame: 0,
                cell: 16,
            },
            train,
        }
    }

    pub fn full() -> Self {
        Self::with_train(TrainConfig::full())
    }

    pub fn toy() -> Self {
        Self::with_train(TrainConfig::toy())
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    /// Sections `model`, `train` (including `train.adam`), `paths`, `synth`,
    /// `degrade` and `job`.
    pub fn to_table(&self) -> Result<toml::Table> {
        let mut train = table(&self.train)?;
        let model = train
            .remove("model")
            .ok_or_else(|| Error::invalid("model section missing"))?;
        let mut out = toml::Table::new();
        out.insert("model".into(), model);
        out.insert("train".into(), toml::Value::Table(train));
        out.insert("paths".into(), toml::Value::Table(table(&self.paths)?));
        out.insert("synth".into(), toml::Value::Table(table(&self.synth)?));
        out.insert("degrade".into(), toml::Value::Table(table(&self.degrade)?));
        out.insert("job".into(), toml::Value::Table(table(&self.job)?));
        Ok(out)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let section = |name: &str| -> Result<toml::Value> {
            table
                .get(name)
                .cloned()
                .ok_or_else(|| Error::config(name, "section missing"))
        };
        let mut train = match section("train")? {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config("train", "must be a table")),
        };
        train.insert("model".into(), section("model")?);
        Ok(Self {
            train: parse("train", toml::Value::Table(train))?,
            paths: parse("paths", section("paths")?)?,
            synth: parse("synth", section("synth")?)?,
            degrade: parse("degrade", section("degrade")?)?,
            job: parse("job", section("job")?)?,
        })
    }

    /// Every leaf as `section.key[.sub] -> value`.
    pub fn flat(&self) -> Result<BTreeMap<String, toml::Value>> {
        let mut out = BTreeMap::new();
        flatten("", &toml::Value::Table(self.to_table()?), &mut out);
        Ok(out)
    }

    /// Set one dotted key, rejecting unknown keys and ill-typed values.
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut flat = self.flat()?;
        if !flat.contains_key(key) {
            return Err(Error::config(key, "unknown key"));
        }
        flat.insert(key.to_string(), value);
        let table = unflatten(&flat);
        let updated = Self::from_table(&table).map_err(|e| match e {
            Error::Config { message, .. } => Error::config(key, message),
            other => other,
        })?;
        *self = updated;
        Ok(())
    }

    /// Set from `key=value` text; the value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = parse_literal(raw);
        // Numbers given where floats are expected.
        let value = match (self.flat()?.get(key), value) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        self.set(key, value)
    }

    /// Apply every leaf of a TOML document on top of `self`.
    pub fn merge_toml(&mut self, text: &str, origin: &Path) -> Result<()> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(origin.display().to_string(), e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(doc), &mut flat);
        let known = self.flat()?;
        for (key, value) in flat {
            let value = match (known.get(&key), value) {
                (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            self.set(&key, value)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.synth.clips == 0 || self.synth.frames == 0 {
            return Err(Error::config("synth.clips", "clip and frame counts must be positive"));
        }
        if self.synth.height == 0 || self.synth.width == 0 {
            return Err(Error::config("synth.height", "canvas must be non-empty"));
        }
        let d = &self.degrade;
        if !(d.sigma_min > 0.0) || d.sigma_max < d.sigma_min {
            return Err(Error::config("degrade.sigma_min", "need 0 < sigma_min <= sigma_max"));
        }
        if d.kernel_size % 2 == 0 {
            return Err(Error::config("degrade.kernel_size", "must be odd"));
        }
        if d.scale == 0 {
            return Err(Error::config("degrade.scale", "must be positive"));
        }
        if self.job.cell == 0 {
            return Err(Error::config("job.cell", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_table()?).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Record the effective configuration in `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Parse(e.to_string()))
}

fn parse<T: serde::de::DeserializeOwned>(name: &str, v: toml::Value) -> Result<T> {
    v.try_into()
        .map_err(|e: toml::de::Error| Error::config(name, e.message().to_string()))
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, toml::Value>) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = match node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            {
                toml::Value::Table(t) => t,
                _ => unreachable!("leaf and table share a key"),
            };
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    root
}

/// Defaults (toy or full), then the config file (explicit path or
/// `BSVSR_CONFIG`), then `key=value` overrides.
pub fn resolve(
    toy: bool,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = if toy { RunConfig::toy() } else { RunConfig::full() };
    let env = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
    if let Some(path) = file.map(Path::to_path_buf).or(env) {
        cfg.merge_file(&path)?;
    }
    for o in overrides {
        cfg.set_str(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
