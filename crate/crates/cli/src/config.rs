//! Run configuration: TOML files layered over defaults, plus `key=value`
//! overrides addressed by dotted paths (`train.epochs=5`).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sparselab::data::{load_mnist, make_synthetic_with, Dataset};
use sparselab::train::TrainConfig;
use sparselab::NetworkSpec;
use toml::Value;

use crate::CliError;

/// Environment variable naming the MNIST directory.
pub const MNIST_ENV: &str = "MNIST_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// The four IDX files; `dir` falls back to `$MNIST_DIR`, then
    /// `data/mnist` under the working directory and the workspace.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    Synthetic {
        n: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        seed: u64,
    },
}

fn default_separation() -> f64 {
    3.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Mnist { dir: None }
    }
}

pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(d) = explicit {
        return d.to_path_buf();
    }
    if let Some(d) = std::env::var_os(MNIST_ENV) {
        return PathBuf::from(d);
    }
    let local = PathBuf::from("data/mnist");
    if local.exists() {
        return local;
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataSource::Mnist { dir } => {
                let dir = mnist_dir(dir.as_deref());
                load_mnist(&dir).map_err(|e| {
                    CliError::Runtime(format!("{e} (set {MNIST_ENV} or data.dir to the MNIST directory)"))
                })
            }
            DataSource::Synthetic {
                n,
                classes,
                dim,
                separation,
                seed,
            } => make_synthetic_with(*n, *classes, *dim, *separation, *seed).map_err(CliError::from_core),
        }
    }

    /// Short description for manifests.
    pub fn describe(&self) -> String {
        match self {
            DataSource::Mnist { .. } => "mnist".into(),
            DataSource::Synthetic {
                n, classes, dim, seed, ..
            } => format!("synthetic(n={n},classes={classes},dim={dim},seed={seed})"),
        }
    }
}

/// Configuration of a single `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSource,
    pub train: TrainConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::new(NetworkSpec::lenet5(), 0);
        train.eval_every_epoch = true;
        Self {
            data: DataSource::default(),
            train,
            checkpoint_every_epochs: 0,
        }
    }
}

/// Recursively overlays `top` onto `base`: tables merge key by key,
/// everything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling
/// back to a bare string (`init=per-neuron`).
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{path}'")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{path}': '{k}' is not a table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("'{path}' does not address a table entry")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a `T` from its default, an optional TOML document and overrides.
pub fn layered<T>(defaults: &T, file: Option<&str>, overrides: &[String]) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut root = Value::try_from(defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(text) = file {
        let doc: toml::Table = text.parse().map_err(|e| CliError::Config(format!("TOML: {e}")))?;
        merge(&mut root, Value::Table(doc));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    root.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_run_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = file.map(read_file).transpose()?;
    let cfg: RunConfig = layered(&RunConfig::default(), text.as_deref(), overrides)?;
    cfg.train.validate().map_err(CliError::from_core)?;
    Ok(cfg)
}
