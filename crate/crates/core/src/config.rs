//! Run configuration: every tunable behind one flat namespace of dotted keys.
//!
//! Keys are derived from the serialized layout of [`RunConfig`], so
//! `proposer.conf_threshold`, `loss.gamma` or `augment.detection.mixup_p` all
//! address the matching struct field. A handful of fields are copies of other
//! keys (the proposer input size is the patch size, the pipeline reuses the
//! proposer's thresholds, sub-seeds come from `seed`); they are filled in by
//! [`RunConfig::resolve`] and are not settable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::augment::AugmentProfile;
use crate::classifier::{ClassifierConfig, ClassifierTrainConfig, HybridLossParams};
use crate::data_io::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::MatchRule;
use crate::pipeline::PipelineConfig;
use crate::proposer::{ProposerConfig, ProposerTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Side of the square box placed on each annotated center.
    pub box_size: f64,
    pub match_rule: MatchRule,
    /// Confidence down to which proposals are mined as classifier training crops.
    pub mine_conf: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { box_size: 50.0, match_rule: MatchRule::default(), mine_conf: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub detection: AugmentProfile,
    pub classification: AugmentProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub proposer: ProposerConfig,
    pub proposer_train: ProposerTrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub loss: HybridLossParams,
    pub augment: AugmentConfig,
    pub pipeline: PipelineConfig,
}

/// Keys (or key prefixes ending in '.') that mirror other keys.
const DERIVED: &[&str] = &[
    "synth.seed",
    "proposer.input_size",
    "proposer.block.channels",
    "proposer_train.augment.",
    "proposer_train.match_rule",
    "classifier_train.loss.",
    "classifier_train.augment.",
    "augment.detection.seed",
    "augment.detection.stage",
    "augment.detection.crop_size",
    "augment.classification.seed",
    "augment.classification.stage",
    "augment.classification.crop_size",
    "pipeline.conf_threshold",
    "pipeline.nms_iou",
    "pipeline.classifier_threshold",
];

fn is_derived(key: &str) -> bool {
    DERIVED.iter().any(|d| if d.ends_with('.') { key.starts_with(d) } else { key == *d })
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        let mut c = Self {
            seed: 0,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            proposer: ProposerConfig::paper(),
            proposer_train: ProposerTrainConfig::paper(),
            classifier: ClassifierConfig::paper(),
            classifier_train: ClassifierTrainConfig::paper(),
            loss: HybridLossParams::default(),
            augment: AugmentConfig { detection: AugmentProfile::detection(), classification: AugmentProfile::classification() },
            pipeline: PipelineConfig::default(),
        };
        c.resolve();
        c
    }

    /// Small models and short schedules for a single CPU core. Every threshold
    /// and loss constant keeps its full-scale value.
    pub fn desk() -> Self {
        let mut c = Self {
            proposer: ProposerConfig::desk(),
            proposer_train: ProposerTrainConfig::desk(),
            classifier: ClassifierConfig::desk(),
            classifier_train: ClassifierTrainConfig::desk(),
            ..Self::paper()
        };
        c.resolve();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected paper or desk"))),
        }
    }

    /// Copies shared settings into the places that consume them.
    pub fn resolve(&mut self) {
        self.synth.seed = self.seed;
        self.proposer.input_size = self.pipeline.patch_size;
        self.pipeline.conf_threshold = self.proposer.conf_threshold;
        self.pipeline.nms_iou = self.proposer.nms_iou;
        self.pipeline.classifier_threshold = self.classifier.threshold;
        self.augment.detection.seed = self.seed;
        self.augment.detection.stage = crate::augment::Stage::Detection;
        self.augment.classification.seed = self.seed.wrapping_add(1);
        self.augment.classification.stage = crate::augment::Stage::Classification;
        self.augment.classification.crop_size = self.classifier.input_size;
        self.augment.detection.crop_size = self.augment.classification.crop_size;
        self.proposer_train.augment = self.augment.detection.clone();
        self.proposer_train.match_rule = self.data.match_rule;
        self.classifier_train.loss = self.loss.clone();
        self.classifier_train.augment = self.augment.classification.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.proposer.validate()?;
        self.proposer_train.validate()?;
        self.classifier.validate()?;
        self.classifier_train.validate()?;
        self.pipeline.validate()?;
        if !(self.data.box_size > 0.0) || !(0.0..1.0).contains(&self.data.mine_conf) {
            return Err(Error::Config("data.box_size must be positive and data.mine_conf in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every settable key with its current value.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.retain(|k, _| !is_derived(k));
        out
    }

    /// Sets one key from its textual form, using the current value's type to
    /// interpret the text.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let current = self.entries().remove(key).ok_or_else(|| unknown_key(key))?;
        let value = parse_like(&current, raw).ok_or_else(|| Error::Config(format!("{key}: cannot read {raw:?} as {}", type_name(&current))))?;
        self.set_value(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        if is_derived(key) {
            return Err(unknown_key(key));
        }
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(|| unknown_key(key))?;
        }
        if node.is_object() {
            return Err(unknown_key(key));
        }
        *node = value;
        let mut next: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.resolve();
        *self = next;
        Ok(())
    }

    /// Builds a configuration from `key = value` pairs. A `preset` key picks
    /// the starting point (default `paper`); the rest apply in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map_or("paper", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads either a `key = value` file or the `config` object of a
    /// `run.json` written by an earlier run.
    pub fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&text)?;
            let cfg = v.get("config").and_then(Value::as_object).ok_or_else(|| Error::Config(format!("{}: no \"config\" object", path.display())))?;
            return Ok(cfg.iter().map(|(k, v)| (k.clone(), value_text(v))).collect());
        }
        parse_conf(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown configuration key {key:?}"))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "an optional value",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        Value::String(_) => "text",
        Value::Array(_) => "a comma-separated list",
        Value::Object(_) => "a section",
    }
}

/// Text form of a value, inverse of [`parse_like`].
pub fn value_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(value_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
        return Value::Null;
    }
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(u) = raw.parse::<u64>() {
        return Value::Number(u.into());
    }
    if let Some(n) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
        return Value::Number(n);
    }
    Value::String(raw.to_string())
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
        return Some(Value::Null);
    }
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            // Integer-valued fields may still be floats (e.g. 50.0 serializes
            // as a float, 300 as an integer); let deserialization decide.
            raw.parse::<u64>().ok().map(|u| Value::Number(u.into())).or_else(|| raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number))
        }
        Value::Number(_) => raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != items.len() {
                return None;
            }
            parts.iter().zip(items).map(|(p, item)| parse_like(item, p)).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        Value::Null | Value::Object(_) => Some(parse_scalar(raw)),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_conf(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// The `run.json` written next to every run's outputs: the command, the seed,
/// the input paths and every resolved configuration key. Output paths are left
/// out so that identical runs produce identical trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub config: Map<String, Value>,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            inputs: inputs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect(),
            config: cfg.entries().into_iter().collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// The configuration this run used.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_pairs(&self.config.iter().map(|(k, v)| (k.clone(), value_text(v))).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_are_exposed_under_flat_keys() {
        let e = RunConfig::default().entries();
        let num = |k: &str| e[k].as_f64().unwrap_or_else(|| panic!("{k}"));
        assert_eq!(num("proposer.conf_threshold"), 0.2);
        assert_eq!(num("proposer.nms_iou"), 0.3);
        assert_eq!(num("classifier.threshold"), 0.5);
        assert_eq!(num("pipeline.merge_iou"), 0.5);
        assert_eq!(num("pipeline.patch_size"), 512.0);
        assert_eq!(num("pipeline.overlap"), 0.2);
        assert_eq!(num("loss.gamma"), 2.0);
        assert_eq!(num("loss.temperature"), 0.2);
        assert_eq!(num("loss.lambda"), 1.0);
        assert_eq!(num("loss.alpha_mitosis"), 1.0);
        assert_eq!(num("loss.alpha_background"), 1.5);
        assert_eq!(e["data.match_rule"], Value::String("center:30".into()));
        assert!(!e.contains_key("pipeline.conf_threshold"));
        assert!(!e.contains_key("classifier_train.loss.gamma"));
    }

    #[test]
    fn set_and_propagate() {
        let mut c = RunConfig::desk();
        c.set("proposer.conf_threshold", "0.1").unwrap();
        assert_eq!(c.pipeline.conf_threshold, 0.1);
        c.set("loss.gamma", "1.5").unwrap();
        assert_eq!(c.classifier_train.loss.gamma, 1.5);
        c.set("augment.classification.rotation", "-10,10").unwrap();
        assert_eq!(c.classifier_train.augment.rotation, (-10.0, 10.0));
        c.set("proposer_train.train_size", "none").unwrap();
        assert_eq!(c.proposer_train.train_size, None);
        c.set("proposer_train.train_size", "128").unwrap();
        assert_eq!(c.proposer_train.train_size, Some(128));
        c.set("data.match_rule", "iou:0.5").unwrap();
        assert_eq!(c.proposer_train.match_rule, MatchRule::Iou { threshold: 0.5, gt_box: 50.0 });
        c.set("seed", "9").unwrap();
        assert_eq!((c.synth.seed, c.augment.detection.seed), (9, 9));
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut c = RunConfig::desk();
        for (k, v) in [("proposer.nope", "1"), ("pipeline.conf_threshold", "0.1"), ("proposer", "1"), ("loss.gamma", "abc"), ("proposer_train.epochs", "-3")] {
            let err = c.set(k, v).unwrap_err();
            assert!(err.is_validation(), "{k}: {err}");
        }
        assert!(RunConfig::from_pairs(&[("proposer.conf_threshold".into(), "1.5".into())]).is_err());
    }

    #[test]
    fn every_entry_round_trips_through_text() {
        let c = RunConfig::desk();
        let mut d = RunConfig::desk();
        for (k, v) in c.entries() {
            d.set(&k, &value_text(&v)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, d);
    }

    #[test]
    fn run_records_restore_the_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::desk();
        c.set("loss.temperature", "0.1").unwrap();
        c.set("seed", "42").unwrap();
        RunRecord::new("evaluate", &c, &[("gt", Path::new("g.csv"))]).write(dir.path()).unwrap();
        let pairs = RunConfig::load_pairs(&dir.path().join("run.json")).unwrap();
        assert_eq!(RunConfig::from_pairs(&pairs).unwrap(), c);
        let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(rec.config().unwrap(), c);
        assert_eq!((rec.seed, rec.inputs["gt"].as_str()), (42, "g.csv"));
    }

    #[test]
    fn conf_files_and_presets() {
        let pairs = parse_conf("# comment\npreset = desk\nloss.lambda = 0.5  # inline\n\n").unwrap();
        let c = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.proposer, { let mut p = ProposerConfig::desk(); p.input_size = 512; p });
        assert_eq!(c.loss.lambda, 0.5);
        assert!(parse_conf("novalue\n").is_err());
        assert!(RunConfig::from_pairs(&[("preset".into(), "huge".into())]).is_err());
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), "3".into()));
    }
}
