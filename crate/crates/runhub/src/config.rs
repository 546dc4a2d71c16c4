//! Versioned, strict JSON run configs.
//!
//! Every command reads one config object with a `version` field; unknown
//! fields anywhere are rejected. Overrides of the form `a.b=value` are
//! applied to the raw JSON before validation, so they are checked exactly
//! like the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scrub_core::attack::AttackConfig;
use scrub_core::genmodels::{GanConfig, ProbeConfig, VaeConfig};
use scrub_core::metrics::{AblationVariant, EvalConfig};
use scrub_core::synthdata::FeatureName;
use scrub_core::unlearner::{LossTerms, OracleConfig, UnlearnConfig};

use crate::error::RunError;

pub const CONFIG_VERSION: u32 = 1;

/// An unparsed `key.path=value` override.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Override {
    pub key: String,
    pub raw: String,
}

pub fn parse_override(s: &str) -> Result<Override, RunError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| RunError::invalid(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(RunError::invalid(format!("override `{s}` has an empty key segment")));
    }
    Ok(Override {
        key: key.to_string(),
        raw: raw.to_string(),
    })
}

impl Override {
    pub fn new(key: &str, value: impl std::fmt::Display) -> Self {
        Self {
            key: key.to_string(),
            raw: value.to_string(),
        }
    }

    /// The value as JSON, typed by what the field holds in `defaults`:
    /// string and optional fields take the text verbatim (artifact ids may
    /// be all digits), anything else is parsed as JSON with a string fallback.
    pub fn value(&self, defaults: &Value) -> Value {
        let slot = self
            .key
            .split('.')
            .try_fold(defaults, |node, part| node.get(part));
        let textual = matches!(slot, Some(Value::String(_)) | Some(Value::Null));
        if textual && !matches!(self.raw.trim_start().chars().next(), Some('"')) && self.raw != "null" {
            return Value::String(self.raw.clone());
        }
        serde_json::from_str(&self.raw).unwrap_or_else(|_| Value::String(self.raw.clone()))
    }
}

fn pointer(path: &[&str]) -> String {
    path.iter().map(|p| format!("/{p}")).collect()
}

pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), RunError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| RunError::Schema {
            pointer: pointer(&parts[..i]),
            message: "cannot set a field inside a non-object value".into(),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("override keys have at least one segment")
}

/// Reads the config file (or an empty versioned object), applies overrides
/// and deserialises strictly. Schema errors carry a JSON pointer.
pub fn load_config<T: DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    overrides: &[Override],
) -> Result<T, RunError> {
    let mut raw = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| {
                RunError::invalid(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_slice(&bytes).map_err(|e| RunError::Schema {
                pointer: String::new(),
                message: format!("invalid JSON in {}: {e}", p.display()),
            })?
        }
        None => serde_json::json!({ "version": CONFIG_VERSION }),
    };
    apply_overrides::<T>(&mut raw, overrides)?;
    parse_config(raw)
}

pub fn apply_overrides<T: Serialize + Default>(raw: &mut Value, overrides: &[Override]) -> Result<(), RunError> {
    let defaults = serde_json::to_value(T::default())?;
    for o in overrides {
        apply_override(raw, &o.key, o.value(&defaults))?;
    }
    Ok(())
}

pub fn parse_config<T: DeserializeOwned>(raw: Value) -> Result<T, RunError> {
    match raw.get("version") {
        None => {
            return Err(RunError::Schema {
                pointer: "/version".into(),
                message: "missing field `version`".into(),
            })
        }
        Some(v) if v.as_u64() != Some(u64::from(CONFIG_VERSION)) => {
            return Err(RunError::Schema {
                pointer: "/version".into(),
                message: format!("unsupported config version {v}, expected {CONFIG_VERSION}"),
            })
        }
        Some(_) => {}
    }
    serde_path_to_error::deserialize(raw).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                Segment::Map { key } => pointer.push_str(&format!("/{key}")),
                Segment::Enum { variant } => pointer.push_str(&format!("/{variant}")),
                Segment::Unknown => pointer.push_str("/?"),
            }
        }
        RunError::Schema {
            pointer: if pointer.is_empty() { "/".into() } else { pointer },
            message: e.into_inner().to_string(),
        }
    })
}

fn version() -> u32 {
    CONFIG_VERSION
}

fn default_feature() -> FeatureName {
    FeatureName::Bar
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub version: u32,
    #[serde(default = "SynthRun::default_n")]
    pub n: usize,
    #[serde(default = "SynthRun::default_seed")]
    pub seed: u64,
    #[serde(default = "SynthRun::default_bar_prob")]
    pub bar_prob: f64,
}

impl SynthRun {
    fn default_n() -> usize {
        2000
    }
    fn default_seed() -> u64 {
        7
    }
    fn default_bar_prob() -> f64 {
        0.1
    }
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            version: version(),
            n: Self::default_n(),
            seed: Self::default_seed(),
            bar_prob: Self::default_bar_prob(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGanRun {
    pub version: u32,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub gan: GanConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainVaeRun {
    pub version: u32,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub vae: VaeConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProbeRun {
    pub version: u32,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

/// Target-vector identification from either a probe or a stored selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub probe: Option<String>,
    /// Selection set id; takes precedence over the probe.
    #[serde(default)]
    pub selection: Option<String>,
    #[serde(default = "default_feature")]
    pub feature: FeatureName,
    #[serde(default = "IdentifyRun::default_n")]
    pub n: usize,
    #[serde(default = "IdentifyRun::default_seed")]
    pub seed: u64,
}

impl IdentifyRun {
    fn default_n() -> usize {
        500
    }
    fn default_seed() -> u64 {
        5
    }
}

impl Default for IdentifyRun {
    fn default() -> Self {
        Self {
            version: version(),
            model: None,
            probe: None,
            selection: None,
            feature: default_feature(),
            n: Self::default_n(),
            seed: Self::default_seed(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    /// Defaults to the dataset the model was trained on.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_feature")]
    pub feature: FeatureName,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl Default for OracleRun {
    fn default() -> Self {
        Self {
            version: version(),
            model: None,
            dataset: None,
            feature: default_feature(),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub probe: Option<String>,
    /// Reference images; defaults to the model's training dataset.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Adds the identification ROC-AUC when set.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "default_feature")]
    pub feature: FeatureName,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            version: version(),
            model: None,
            probe: None,
            dataset: None,
            target: None,
            feature: default_feature(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    /// Probe whose gradients drive the attack.
    #[serde(default)]
    pub probe: Option<String>,
    /// Independently trained probe that judges the result.
    #[serde(default)]
    pub eval_probe: Option<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_feature")]
    pub feature: FeatureName,
    #[serde(default = "AttackRun::default_n")]
    pub n: usize,
    #[serde(default = "AttackRun::default_splits")]
    pub splits: usize,
    #[serde(default)]
    pub record_success: bool,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl AttackRun {
    fn default_n() -> usize {
        1000
    }
    fn default_splits() -> usize {
        10
    }
}

impl Default for AttackRun {
    fn default() -> Self {
        Self {
            version: version(),
            model: None,
            probe: None,
            eval_probe: None,
            dataset: None,
            feature: default_feature(),
            n: Self::default_n(),
            splits: Self::default_splits(),
            record_success: false,
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub version: u32,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub probe: Option<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub base: UnlearnConfig,
    #[serde(default = "AblateRun::default_variants")]
    pub variants: Vec<AblationVariant>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl AblateRun {
    /// Alpha sweep of the full objective plus the two term subsets at the
    /// default alpha.
    pub fn default_variants() -> Vec<AblationVariant> {
        let mut v = AblationVariant::grid(&[LossTerms::FULL], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        v.extend(AblationVariant::grid(
            &[LossTerms::RECON_UNLEARN, LossTerms::UNLEARN_ONLY],
            &[3.0],
        ));
        v
    }
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            version: version(),
            model: None,
            target: None,
            probe: None,
            dataset: None,
            base: UnlearnConfig::default(),
            variants: Self::default_variants(),
            eval: EvalConfig::default(),
        }
    }
}
