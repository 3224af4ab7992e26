//! Run configuration: TOML sections plus `--section.key=value` overrides.

use std::path::Path;

use semppl_core::nets::NetworkConfig;
use semppl_core::objective::LossConfig;
use semppl_core::optim::LarsConfig;
use semppl_core::synthdata::{AugmentationSpec, DatasetSpec};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{HarnessError, Result};

/// Top-level section names accepted in files and overrides.
pub const SECTIONS: [&str; 6] = [
    "dataset",
    "augmentation",
    "networks",
    "loss",
    "lars",
    "train",
];

/// Name accepted by `--config` for the built-in desk configuration.
pub const BASE_PRESET: &str = "base";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Defaults to `20 * batch_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
    pub label_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    pub oracle_mode: bool,
    pub voting_enabled: bool,
    pub knn_k: usize,
    /// Probe every this many epochs; 0 probes only after the last epoch.
    pub probe_every: usize,
    pub test_samples_per_class: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 256,
            queue_capacity: None,
            label_fraction: 0.1,
            epochs: 100,
            seed: 0,
            oracle_mode: false,
            voting_enabled: true,
            knn_k: 1,
            probe_every: 0,
            test_samples_per_class: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub augmentation: AugmentationSpec,
    pub networks: NetworkConfig,
    pub loss: LossConfig,
    pub lars: LarsConfig,
    pub train: TrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        let dim = dataset.dim;
        Self {
            augmentation: AugmentationSpec::desk(dim),
            networks: NetworkConfig::desk(dim),
            dataset,
            loss: LossConfig::default(),
            lars: LarsConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn queue_capacity(&self) -> usize {
        self.train
            .queue_capacity
            .unwrap_or(20 * self.train.batch_size)
    }

    /// Loads `source` (a path or [`BASE_PRESET`]) on top of the base
    /// configuration and applies `overrides` as `(dotted.key, value)`.
    pub fn load(source: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree =
            Value::try_from(Self::default()).map_err(|e| HarnessError::Config(e.to_string()))?;
        if source != BASE_PRESET {
            let path = Path::new(source);
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::ConfigFile {
                path: path.to_path_buf(),
                source: e,
            })?;
            let user: Value = toml::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user);
        }
        Self::finish(tree, overrides)
    }

    /// This configuration with `(dotted.key, value)` overrides applied.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let tree = Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::finish(tree, overrides)
    }

    fn finish(mut tree: Value, overrides: &[(String, String)]) -> Result<Self> {
        for (key, raw) in overrides {
            apply_override(&mut tree, key, raw)?;
        }
        let config: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let d = &self.dataset;
        if d.num_classes == 0 || d.samples_per_class == 0 {
            return bad("dataset needs classes and samples".into());
        }
        self.augmentation
            .validate(d.dim)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.lars
            .validate(self.train.epochs)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let n = &self.networks;
        for (name, spec) in [
            ("encoder", n.encoder),
            ("projector", n.projector),
            ("predictor", n.predictor),
        ] {
            spec.validate(name)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if n.encoder.output != n.projector.input
            || n.projector.output != n.predictor.input
            || n.predictor.output != n.projector.output
        {
            return bad("network sizes do not chain (encoder -> projector -> predictor)".into());
        }
        if n.encoder.input != d.dim {
            return bad(format!(
                "networks.encoder.input is {} but dataset.dim is {}",
                n.encoder.input, d.dim
            ));
        }
        if self.augmentation.num_large != self.loss.num_large
            || self.augmentation.num_small != self.loss.num_small
        {
            return bad("augmentation and loss disagree on the number of views".into());
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be at least 2, got {}",
                t.batch_size
            ));
        }
        if d.num_classes * d.samples_per_class < t.batch_size {
            return bad("dataset is smaller than one batch".into());
        }
        if !(t.label_fraction > 0.0 && t.label_fraction <= 1.0) {
            return bad(format!(
                "train.label_fraction {} outside (0, 1]",
                t.label_fraction
            ));
        }
        if t.knn_k == 0 || t.knn_k > self.queue_capacity() {
            return bad(format!(
                "train.knn_k {} outside 1..=queue capacity",
                t.knn_k
            ));
        }
        if self.queue_capacity() < d.num_classes {
            return bad(format!(
                "queue capacity {} is below the class count {}",
                self.queue_capacity(),
                d.num_classes
            ));
        }
        if t.test_samples_per_class == 0 {
            return bad("train.test_samples_per_class must be positive".into());
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
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

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || !SECTIONS.contains(&parts[0]) || parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("unknown override --{key}")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("--{key}: {part} is not a section")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| HarnessError::Config(format!("--{key}: parent is not a section")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Splits `--section.key=value` overrides out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let section = key.split('.').next().unwrap_or("");
        if !key.contains('.') || !SECTIONS.contains(&section) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match iter.peek() {
                Some(next) if !next.starts_with("--") => iter.next().expect("peeked"),
                _ => String::new(),
            },
        };
        overrides.push((key, value));
    }
    (rest, overrides)
}
