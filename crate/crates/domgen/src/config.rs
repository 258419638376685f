//! The run configuration: one JSON document covering data, model,
//! training, splitting, baseline, and output settings. Loading validates
//! aggressively — unknown keys are rejected with their full key path, and
//! every semantic rule reports the offending path — and the final parsed
//! document is hashed so outputs can be traced back to their exact
//! configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Result, RunError};
use crate::model::DEFAULT_WIDTHS;
use crate::trainer::TrainConfig;

// ── Blocks ──────────────────────────────────────────────────────────────

/// Which protocol runs and under which method/seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentBlock {
    /// `rotation` (fixed source/target angle lists) or `leave-one-out`
    /// (each source angle held out in turn).
    pub kind: String,
    /// `full`, `invariant`, `no-hierarchy`, `no-prior-supervision`,
    /// `non-meta`, or `erm`.
    pub method: String,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        ExperimentBlock {
            kind: "rotation".into(),
            method: "full".into(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Corpus construction. `glyphs` synthesizes the procedural corpus;
/// `idx` loads an external image/label pair in the classic binary format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub source: String,
    pub n_per_class: usize,
    pub seed: u64,
    pub source_angles: Vec<f64>,
    pub target_angles: Vec<f64>,
    pub val_fraction: f64,
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            source: "glyphs".into(),
            n_per_class: 200,
            seed: 7,
            source_angles: vec![15.0, 30.0, 60.0, 75.0],
            target_angles: vec![0.0, 90.0],
            val_fraction: 0.2,
            idx_images: None,
            idx_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub widths: Vec<usize>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock { widths: DEFAULT_WIDTHS.to_vec() }
    }
}

/// How pooled source data is cut into training domains when the natural
/// grouping is unavailable or deliberately ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitBlock {
    /// `none`, `annotation`, `cluster`, or `random`.
    pub strategy: String,
    /// Number of pseudo-domains; 0 means "as many as source angles".
    pub k: usize,
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock { strategy: "none".into(), k: 0 }
    }
}

/// Settings for the entropy-minimization adaptation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TentBlock {
    pub batch_sizes: Vec<usize>,
    pub step_counts: Vec<usize>,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl Default for TentBlock {
    fn default() -> Self {
        TentBlock {
            batch_sizes: vec![1, 32, 128],
            step_counts: vec![1, 10, 100],
            lr: 1e-3,
            shuffle_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineBlock {
    pub tent: TentBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: String,
    /// How many target samples the visualize command projects per figure.
    pub scatter_samples: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "out".into(), scatter_samples: 3 }
    }
}

/// The whole configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentBlock,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub split: SplitBlock,
    pub baseline: BaselineBlock,
    pub output: OutputBlock,
}

// ── Key-path validation ─────────────────────────────────────────────────

/// Allowed keys, mirrored from the block structs. Kept explicit so an
/// unknown key is reported with its full dotted path rather than serde's
/// flat message.
const TOP_KEYS: &[(&str, &[&str])] = &[
    ("experiment", &["kind", "method", "seeds"]),
    (
        "data",
        &[
            "source",
            "n_per_class",
            "seed",
            "source_angles",
            "target_angles",
            "val_fraction",
            "idx_images",
            "idx_labels",
        ],
    ),
    ("model", &["widths"]),
    (
        "train",
        &[
            "iterations",
            "batch",
            "support_per_class",
            "lr_backbone",
            "lr_heads",
            "mc_m",
            "mc_n",
            "mc_l",
            "kl_weight",
            "seed",
            "val_every",
        ],
    ),
    ("split", &["strategy", "k"]),
    ("baseline", &["tent"]),
    ("output", &["dir", "scatter_samples"]),
];

const TENT_KEYS: &[&str] = &["batch_sizes", "step_counts", "lr", "shuffle_seed"];

fn check_keys(doc: &Value) -> Result<()> {
    let Some(top) = doc.as_object() else {
        return Err(RunError::config("<root>", "configuration must be a JSON object"));
    };
    for (key, val) in top {
        let Some((_, allowed)) = TOP_KEYS.iter().find(|(k, _)| k == key) else {
            return Err(RunError::config(key.clone(), "unknown configuration block"));
        };
        let Some(block) = val.as_object() else {
            return Err(RunError::config(key.clone(), "block must be a JSON object"));
        };
        for (sub, subval) in block {
            if !allowed.contains(&sub.as_str()) {
                return Err(RunError::config(format!("{key}.{sub}"), "unknown key"));
            }
            if key == "baseline" && sub == "tent" {
                let Some(tent) = subval.as_object() else {
                    return Err(RunError::config(
                        "baseline.tent",
                        "block must be a JSON object",
                    ));
                };
                for t in tent.keys() {
                    if !TENT_KEYS.contains(&t.as_str()) {
                        return Err(RunError::config(
                            format!("baseline.tent.{t}"),
                            "unknown key",
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

// ── Overrides ───────────────────────────────────────────────────────────

/// Splits one `--set key.path=value` argument.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(RunError::config(
            arg,
            "override must look like `key.path=value`",
        )),
    }
}

/// Applies one dotted-path override onto the raw document. Values parse as
/// JSON when possible (numbers, booleans, arrays) and fall back to strings.
fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::config(key, "empty path segment"));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(RunError::config(key, "path walks through a non-object"));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let Some(obj) = node.as_object_mut() else {
        return Err(RunError::config(key, "path walks through a non-object"));
    };
    let value = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

// ── Loading ─────────────────────────────────────────────────────────────

/// Parses a configuration document from JSON text, applying `--set`
/// overrides before validation.
pub fn parse_config(text: &str, sets: &[(String, String)]) -> Result<RunConfig> {
    let mut doc: Value = serde_json::from_str(text)
        .map_err(|e| RunError::config("<config>", format!("invalid JSON: {e}")))?;
    for (k, v) in sets {
        apply_override(&mut doc, k, v)?;
    }
    check_keys(&doc)?;
    let config: RunConfig = serde_json::from_value(doc)
        .map_err(|e| RunError::config("<config>", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Loads the configuration: from a file when given, otherwise all
/// defaults; `--set` overrides apply in both cases.
pub fn load_config(path: Option<&Path>, sets: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => "{}".to_string(),
    };
    parse_config(&text, sets)
}

impl RunConfig {
    /// Semantic validation beyond shape: enum-valued strings, conditional
    /// requirements, dimensional consistency.
    pub fn validate(&self) -> Result<()> {
        const KINDS: &[&str] = &["rotation", "leave-one-out"];
        if !KINDS.contains(&self.experiment.kind.as_str()) {
            return Err(RunError::config(
                "experiment.kind",
                format!("`{}` is not one of {:?}", self.experiment.kind, KINDS),
            ));
        }
        const METHODS: &[&str] = &[
            "full",
            "invariant",
            "no-hierarchy",
            "no-prior-supervision",
            "non-meta",
            "erm",
        ];
        if !METHODS.contains(&self.experiment.method.as_str()) {
            return Err(RunError::config(
                "experiment.method",
                format!("`{}` is not one of {:?}", self.experiment.method, METHODS),
            ));
        }
        if self.experiment.seeds.is_empty() {
            return Err(RunError::config("experiment.seeds", "need at least one seed"));
        }

        const SOURCES: &[&str] = &["glyphs", "idx"];
        if !SOURCES.contains(&self.data.source.as_str()) {
            return Err(RunError::config(
                "data.source",
                format!("`{}` is not one of {:?}", self.data.source, SOURCES),
            ));
        }
        if self.data.source == "idx" {
            if self.data.idx_images.is_none() {
                return Err(RunError::config(
                    "data.idx_images",
                    "required when data.source = \"idx\"",
                ));
            }
            if self.data.idx_labels.is_none() {
                return Err(RunError::config(
                    "data.idx_labels",
                    "required when data.source = \"idx\"",
                ));
            }
        }
        if self.data.n_per_class == 0 {
            return Err(RunError::config("data.n_per_class", "must be positive"));
        }
        if self.data.source_angles.is_empty() {
            return Err(RunError::config("data.source_angles", "need at least one angle"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(RunError::config("data.val_fraction", "must lie in [0, 1)"));
        }

        if self.model.widths.len() < 2 {
            return Err(RunError::config(
                "model.widths",
                "need at least input and output widths",
            ));
        }
        if self.model.widths.iter().any(|&w| w == 0) {
            return Err(RunError::config("model.widths", "layer widths must be positive"));
        }
        if self.model.widths[0] != 784 {
            return Err(RunError::config(
                "model.widths",
                format!("input width {} does not match the 28x28 images", self.model.widths[0]),
            ));
        }

        self.train.validate()?;

        const STRATEGIES: &[&str] = &["none", "annotation", "cluster", "random"];
        if !STRATEGIES.contains(&self.split.strategy.as_str()) {
            return Err(RunError::config(
                "split.strategy",
                format!("`{}` is not one of {:?}", self.split.strategy, STRATEGIES),
            ));
        }
        let episodic = self.experiment.method != "erm" && self.experiment.method != "non-meta";
        if episodic && self.data.source_angles.len() < 2 && self.split.strategy == "none" {
            return Err(RunError::config(
                "split.strategy",
                "episodic training needs several source domains: either list \
                 more data.source_angles or pick a split strategy to cut the \
                 single source into pseudo-domains",
            ));
        }
        if self.split.strategy != "none" && self.split.effective_k(&self.data) < 2 {
            return Err(RunError::config("split.k", "need at least two pseudo-domains"));
        }

        if self.baseline.tent.batch_sizes.is_empty() {
            return Err(RunError::config("baseline.tent.batch_sizes", "must not be empty"));
        }
        if self.baseline.tent.batch_sizes.iter().any(|&b| b == 0) {
            return Err(RunError::config("baseline.tent.batch_sizes", "batch sizes must be positive"));
        }
        if self.baseline.tent.step_counts.is_empty() {
            return Err(RunError::config("baseline.tent.step_counts", "must not be empty"));
        }
        if !(self.baseline.tent.lr > 0.0) || !self.baseline.tent.lr.is_finite() {
            return Err(RunError::config("baseline.tent.lr", "must be positive and finite"));
        }

        if self.output.dir.is_empty() {
            return Err(RunError::config("output.dir", "must not be empty"));
        }
        Ok(())
    }

    /// Canonical serialization used for hashing: serde's struct order is
    /// fixed, so equal configs serialize identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization cannot fail")
    }

    /// Hex SHA-256 over the canonical serialization of the *parsed*
    /// document, so formatting and key order in the input file do not
    /// matter.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

impl SplitBlock {
    /// The pseudo-domain count actually used: explicit `k`, defaulting to
    /// the number of source angles.
    pub fn effective_k(&self, data: &DataBlock) -> usize {
        if self.k == 0 {
            data.source_angles.len()
        } else {
            self.k
        }
    }
}
