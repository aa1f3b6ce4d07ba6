//! Run configuration: one JSON document validated in full before any work
//! starts. Unknown keys are rejected and every violation is reported, not
//! just the first.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};

use amfc_core::amfc::HeadKind;
use amfc_core::cnn::{ArchitectureSpec, ConvLayerSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize, // 0 = library default
    pub architecture: ArchConfig,
    pub dataset: DatasetConfig,
    pub folds: usize,
    pub m_samples: usize,
    pub p_schedule: Vec<usize>,
    pub scenarios: Vec<u8>,
    pub heads: Vec<String>,
    pub cnn: CnnHyperConfig,
    pub mlp_head: MlpHeadConfig,
    pub knn: KnnConfig,
    pub gaussian_nb: NbConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            architecture: ArchConfig::default(),
            dataset: DatasetConfig::default(),
            folds: 5,
            m_samples: 200,
            p_schedule: vec![196, 144, 100, 64],
            scenarios: vec![1, 2, 3, 4, 5, 6],
            heads: vec!["mlp".into(), "knn".into(), "gaussian_nb".into()],
            cnn: CnnHyperConfig::default(),
            mlp_head: MlpHeadConfig::default(),
            knn: KnnConfig::default(),
            gaussian_nb: NbConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_h: usize,
    pub conv: Vec<ConvConfig>,
    /// Hidden fc units; the class count is appended from the dataset.
    pub fc_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        // Mini-VGG shape.
        ArchConfig {
            input_h: 32,
            conv: [8, 16, 16, 32]
                .into_iter()
                .enumerate()
                .map(|(i, k)| ConvConfig {
                    out_channels: k,
                    kernel: 3,
                    pool_after: i % 2 == 1,
                })
                .collect(),
            fc_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool_after: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_h")]
        h: usize,
        #[serde(default = "default_jitter")]
        jitter_px: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Corpus {
        dir: PathBuf,
        labels: PathBuf,
        target_h: usize,
    },
}

fn default_h() -> usize {
    32
}
fn default_jitter() -> usize {
    2
}
fn default_noise() -> f64 {
    0.05
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            classes: 3,
            per_class: 125,
            h: 32,
            jitter_px: 2,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnHyperConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for CnnHyperConfig {
    fn default() -> Self {
        CnnHyperConfig {
            lr: 0.02,
            batch: 20,
            max_epochs: 40,
            patience: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpHeadConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for MlpHeadConfig {
    fn default() -> Self {
        MlpHeadConfig {
            hidden: vec![64],
            lr: 0.05,
            batch: 20,
            max_epochs: 300,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NbConfig {
    pub var_floor: f64,
}

impl Default for NbConfig {
    fn default() -> Self {
        NbConfig { var_floor: 1e-9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repeats: u32,
    pub warmup: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 50,
            warmup: 10,
        }
    }
}

impl RunConfig {
    /// Architecture spec for a dataset with `classes` classes.
    pub fn architecture_spec(&self, classes: usize) -> ArchitectureSpec {
        let mut fc = self.architecture.fc_hidden.clone();
        fc.push(classes);
        ArchitectureSpec {
            input_h: self.architecture.input_h,
            conv_layers: self
                .architecture
                .conv
                .iter()
                .map(|c| ConvLayerSpec {
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    pool_after: c.pool_after,
                })
                .collect(),
            fc_layers: fc,
        }
    }

    pub fn head_kinds(&self) -> Result<Vec<HeadKind>> {
        self.heads
            .iter()
            .map(|h| h.parse::<HeadKind>().map_err(|e| anyhow!("{e}")))
            .collect()
    }
}

/// Allowed keys per object, used for the unknown-key scan.
fn allowed_keys(path: &str) -> Option<&'static [&'static str]> {
    Some(match path {
        "" => &[
            "seed",
            "out_dir",
            "threads",
            "architecture",
            "dataset",
            "folds",
            "m_samples",
            "p_schedule",
            "scenarios",
            "heads",
            "cnn",
            "mlp_head",
            "knn",
            "gaussian_nb",
            "bench",
        ],
        "architecture" => &["input_h", "conv", "fc_hidden"],
        "architecture.conv[]" => &["out_channels", "kernel", "pool_after"],
        "dataset" => &[
            "kind",
            "classes",
            "per_class",
            "h",
            "jitter_px",
            "noise",
            "dir",
            "labels",
            "target_h",
        ],
        "cnn" => &["lr", "batch", "max_epochs", "patience"],
        "mlp_head" => &["hidden", "lr", "batch", "max_epochs", "patience"],
        "knn" => &["k"],
        "gaussian_nb" => &["var_floor"],
        "bench" => &["repeats", "warmup"],
        _ => return None,
    })
}

/// Record and strip unknown keys, so the typed parse afterwards only reports
/// genuine structural problems.
fn prune_unknown_keys(value: &mut serde_json::Value, path: &str, violations: &mut Vec<String>) {
    let serde_json::Value::Object(map) = value else {
        return;
    };
    if let Some(allowed) = allowed_keys(path) {
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .cloned()
            .collect();
        for key in unknown {
            let loc = if path.is_empty() { "top level" } else { path };
            violations.push(format!("unknown key {key:?} at {loc}"));
            map.remove(&key);
        }
    }
    for (key, child) in map.iter_mut() {
        let child_path = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match child {
            serde_json::Value::Array(items) => {
                let item_path = format!("{child_path}[]");
                for item in items {
                    prune_unknown_keys(item, &item_path, violations);
                }
            }
            serde_json::Value::Object(_) => prune_unknown_keys(child, &child_path, violations),
            _ => {}
        }
    }
}

fn is_square(n: usize) -> bool {
    let s = (n as f64).sqrt().round() as usize;
    s * s == n
}

fn semantic_violations(cfg: &RunConfig) -> Vec<String> {
    let mut v = Vec::new();
    if cfg.folds < 2 {
        v.push(format!("folds must be >= 2, got {}", cfg.folds));
    }
    if cfg.m_samples == 0 {
        v.push("m_samples must be positive".into());
    }
    if cfg.p_schedule.is_empty() {
        v.push("p_schedule must not be empty".into());
    } else {
        for (i, &p) in cfg.p_schedule.iter().enumerate() {
            if p == 0 {
                v.push(format!("p_schedule[{i}] must be positive"));
            } else if i + 1 < cfg.p_schedule.len() && !is_square(p) {
                v.push(format!(
                    "p_schedule[{i}] = {p} feeds another layer and must be a perfect square"
                ));
            }
        }
        if cfg.p_schedule.len() > cfg.architecture.conv.len() {
            v.push(format!(
                "p_schedule has {} entries but the architecture has {} conv layers",
                cfg.p_schedule.len(),
                cfg.architecture.conv.len()
            ));
        }
    }
    if cfg.scenarios.is_empty() {
        v.push("scenarios must not be empty".into());
    }
    let mut seen = BTreeSet::new();
    for &id in &cfg.scenarios {
        if !(1..=6).contains(&id) {
            v.push(format!("scenario id {id} not in 1..=6"));
        } else if !seen.insert(id) {
            v.push(format!("scenario id {id} listed twice"));
        }
    }
    if cfg.heads.is_empty() {
        v.push("heads must not be empty".into());
    }
    for h in &cfg.heads {
        if h.parse::<HeadKind>().is_err() {
            v.push(format!(
                "unknown head {h:?} (expected mlp, knn or gaussian_nb)"
            ));
        }
    }
    match &cfg.dataset {
        DatasetConfig::Synth {
            classes,
            per_class,
            h,
            jitter_px,
            noise,
        } => {
            if !(2..=5).contains(classes) {
                v.push(format!("dataset.classes must be in 2..=5, got {classes}"));
            }
            if *per_class == 0 {
                v.push("dataset.per_class must be positive".into());
            }
            if *h < 8 {
                v.push(format!("dataset.h must be >= 8, got {h}"));
            } else if *jitter_px >= h / 4 {
                v.push(format!("dataset.jitter_px {jitter_px} too large for h {h}"));
            }
            if !(noise.is_finite() && *noise >= 0.0) {
                v.push(format!("dataset.noise must be finite >= 0, got {noise}"));
            }
            if *h != cfg.architecture.input_h {
                v.push(format!(
                    "dataset.h {} does not match architecture.input_h {}",
                    h, cfg.architecture.input_h
                ));
            }
            if *per_class < cfg.folds {
                v.push(format!(
                    "dataset.per_class {per_class} smaller than folds {}",
                    cfg.folds
                ));
            }
        }
        DatasetConfig::Corpus {
            dir,
            labels,
            target_h,
        } => {
            if dir.as_os_str().is_empty() {
                v.push("dataset.dir must not be empty".into());
            }
            if labels.as_os_str().is_empty() {
                v.push("dataset.labels must not be empty".into());
            }
            if *target_h == 0 {
                v.push("dataset.target_h must be positive".into());
            } else if *target_h != cfg.architecture.input_h {
                v.push(format!(
                    "dataset.target_h {} does not match architecture.input_h {}",
                    target_h, cfg.architecture.input_h
                ));
            }
        }
    }
    // Architecture checks mirror ArchitectureSpec::validate but report all.
    if cfg.architecture.conv.is_empty() {
        v.push("architecture.conv must not be empty".into());
    }
    if cfg.architecture.input_h == 0 {
        v.push("architecture.input_h must be positive".into());
    }
    let mut side = cfg.architecture.input_h;
    for (i, c) in cfg.architecture.conv.iter().enumerate() {
        if c.out_channels == 0 {
            v.push(format!(
                "architecture.conv[{i}].out_channels must be positive"
            ));
        }
        if c.kernel == 0 || c.kernel % 2 == 0 {
            v.push(format!(
                "architecture.conv[{i}].kernel must be odd, got {}",
                c.kernel
            ));
        }
        if c.pool_after {
            if !side.is_multiple_of(2) || side < 2 {
                v.push(format!(
                    "architecture.conv[{i}]: cannot pool a {side}x{side} map"
                ));
            } else {
                side /= 2;
            }
        }
    }
    if !(cfg.cnn.lr.is_finite() && cfg.cnn.lr > 0.0) {
        v.push(format!("cnn.lr must be finite > 0, got {}", cfg.cnn.lr));
    }
    if cfg.cnn.batch == 0 {
        v.push("cnn.batch must be positive".into());
    }
    if !(cfg.mlp_head.lr.is_finite() && cfg.mlp_head.lr > 0.0) {
        v.push(format!(
            "mlp_head.lr must be finite > 0, got {}",
            cfg.mlp_head.lr
        ));
    }
    if cfg.mlp_head.batch == 0 {
        v.push("mlp_head.batch must be positive".into());
    }
    if cfg.knn.k == 0 {
        v.push("knn.k must be >= 1".into());
    }
    if cfg.gaussian_nb.var_floor.is_nan() || cfg.gaussian_nb.var_floor <= 0.0 {
        v.push("gaussian_nb.var_floor must be positive".into());
    }
    if cfg.bench.repeats < 30 {
        v.push(format!(
            "bench.repeats must be >= 30, got {}",
            cfg.bench.repeats
        ));
    }
    v
}

/// Parse and fully validate a config file. Every violation found — unknown
/// keys and semantic problems alike — is reported in one error.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| anyhow!("config {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| anyhow!("config {}: {e}", path.display()))
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| anyhow!("not valid JSON: {e}"))?;
    let mut violations = Vec::new();
    prune_unknown_keys(&mut value, "", &mut violations);
    let parsed = match serde_json::from_value::<RunConfig>(value) {
        Ok(cfg) => {
            violations.extend(semantic_violations(&cfg));
            Some(cfg)
        }
        Err(e) => {
            violations.push(format!("structure: {e}"));
            None
        }
    };
    if !violations.is_empty() {
        return Err(anyhow!(
            "{} violation(s): {}",
            violations.len(),
            violations.join("; ")
        ));
    }
    Ok(parsed.expect("no violations means the parse succeeded"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gets_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.p_schedule, vec![196, 144, 100, 64]);
        assert_eq!(cfg.architecture.conv.len(), 4);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let err = parse_config(r#"{"bogus": 1, "cnn": {"lr": 0.1, "nope": 2}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("nope"), "{err}");
        assert!(err.contains("2 violation"), "{err}");
    }

    #[test]
    fn semantic_violations_are_enumerated() {
        let err =
            parse_config(r#"{"folds": 1, "m_samples": 0, "scenarios": [9], "heads": ["svm"]}"#)
                .unwrap_err()
                .to_string();
        for needle in ["folds", "m_samples", "scenario id 9", "svm"] {
            assert!(err.contains(needle), "{needle} missing in {err}");
        }
    }

    #[test]
    fn schedule_square_rule_is_checked() {
        let err = parse_config(r#"{"p_schedule": [50, 25]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("perfect square"), "{err}");
        // Non-square last entry is fine.
        parse_config(r#"{"p_schedule": [49, 30]}"#).unwrap();
    }

    #[test]
    fn dataset_and_architecture_must_agree() {
        let err = parse_config(
            r#"{"dataset": {"kind": "synth", "classes": 3, "per_class": 10, "h": 16}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("input_h"), "{err}");
    }
}
