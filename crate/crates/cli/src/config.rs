//! Run configuration: every option of every subcommand, addressable by flat
//! dotted keys (`train.epochs`, `model.vision.depth`, ...). Values are
//! layered defaults → config file → command-line flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use make_core::corpus::SynthConfig;
use make_core::encoders::ModelConfig;
use make_core::evaluator::DEFAULT_TEMPLATES;
use make_core::gradcheck::ToyShape;
use make_core::trainer::TrainConfig;
use make_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub eval_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self { classes: s.n_classes, per_class: s.samples_per_class, image_size: s.image_size, patch_size: s.patch_size, seed: s.seed, eval_fraction: 0.2 }
    }
}

impl SynthSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { n_classes: self.classes, samples_per_class: self.per_class, image_size: self.image_size, patch_size: self.patch_size, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<String>,
    pub ks: Vec<usize>,
    pub prompts: Vec<String>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec!["classify".into(), "concepts".into(), "retrieval".into()],
            ks: vec![1, 5, 10],
            prompts: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub tol: f64,
    pub tau: f64,
    pub trials: usize,
    pub seed: u64,
    pub precision: String,
    pub shape: ToyShape,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { eps: 1e-3, tol: 1e-3, tau: 0.07, trials: 5, seed: 0, precision: "f64".into(), shape: ToyShape::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], threads: 0 }
    }
}

impl AblateSection {
    pub fn workers(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub model: ModelConfig,
    /// Training options; its `model` field is filled from the top-level `model`.
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub ablate: AblateSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { model: self.model.clone(), ..self.train.clone() }
    }
}

/// A resolved configuration plus the keys that were set explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    pub fn set_explicitly(&self, prefix: &str) -> bool {
        self.explicit.iter().any(|k| k == prefix || k.starts_with(&format!("{prefix}.")))
    }
}

fn to_tree(cfg: &RunConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("serializable");
    // The model lives at the top level only.
    v["train"].as_object_mut().expect("object").remove("model");
    v
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn set(tree: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let unknown = || Error::InvalidConfig(format!("unknown config key `{key}`"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(unknown());
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

/// Reads a JSON config file into flat `(key, value)` pairs. Nested objects
/// are accepted and flattened.
pub fn read_file(path: &Path) -> Result<Vec<(String, Value)>, Error> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::InvalidConfig(format!("{}: expected a JSON object", path.display())));
    }
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    Ok(out)
}

/// Applies `layers` in order on top of `defaults`.
pub fn resolve(defaults: &RunConfig, layers: &[Vec<(String, Value)>]) -> Result<Resolved, Error> {
    let mut tree = to_tree(defaults);
    let mut explicit = BTreeSet::new();
    for layer in layers {
        for (k, v) in layer {
            set(&mut tree, k, v.clone())?;
            explicit.insert(k.clone());
        }
    }
    let model = tree["model"].clone();
    tree["train"].as_object_mut().expect("object").insert("model".into(), model);
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(Resolved { config, explicit })
}

/// Collects command-line overrides, skipping unset flags.
#[derive(Default)]
pub struct Overrides(pub Vec<(String, Value)>);

impl Overrides {
    pub fn put<T: Serialize>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), serde_json::to_value(v).expect("serializable")));
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: Value) -> (String, Value) {
        (k.to_string(), v)
    }

    #[test]
    fn flat_keys_and_flag_precedence() {
        let file = vec![kv("train.epochs", 3.into()), kv("model.vision.depth", 1.into())];
        let flags = vec![kv("train.epochs", 4.into())];
        let r = resolve(&RunConfig::default(), &[file, flags]).unwrap();
        assert_eq!(r.config.train.epochs, 4);
        assert_eq!(r.config.train_config().model.vision.depth, 1);
        assert!(r.set_explicitly("model"));
        assert!(!r.set_explicitly("synth"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = resolve(&RunConfig::default(), &[vec![kv("train.epoch", 3.into())]]).unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
        assert!(resolve(&RunConfig::default(), &[vec![kv("model", 3.into())]]).is_err());
    }

    #[test]
    fn wrong_types_are_config_errors() {
        let err = resolve(&RunConfig::default(), &[vec![kv("train.epochs", "many".into())]]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn nested_file_objects_flatten() {
        let mut out = Vec::new();
        flatten("", &serde_json::json!({"train": {"epochs": 2}, "paths.out_dir": "x"}), &mut out);
        assert!(out.contains(&kv("train.epochs", 2.into())));
        assert!(out.contains(&kv("paths.out_dir", "x".into())));
    }
}
