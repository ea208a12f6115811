//! Declarative experiment configs: a dataset, a split recipe and an ordered
//! list of training stages, serialized as TOML. The canonical serialization
//! is hashed so finished stages can be recognized and skipped on rerun.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use detlab_core::error::{Error, Result};
use detlab_core::model::ScaleKind;
use detlab_core::split::Fraction;
use detlab_core::train::{LrSchedule, TrainMode};
use detlab_core::loss::KDMethod;

/// Overrides `[dataset] root` for VOC-layout datasets when set.
pub const DATA_ROOT_ENV: &str = "DETLAB_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "SplitRecipe::is_empty")]
    pub splits: SplitRecipe,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

fn default_scale() -> String {
    "desk".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// "shapes" or "voc".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_split: Option<String>,
    #[serde(default = "default_train_images")]
    pub train_images: usize,
    #[serde(default = "default_val_images")]
    pub val_images: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_shapes_min")]
    pub shapes_min: usize,
    #[serde(default = "default_shapes_max")]
    pub shapes_max: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_images() -> usize {
    2000
}
fn default_val_images() -> usize {
    400
}
fn default_image_size() -> usize {
    128
}
fn default_shapes_min() -> usize {
    1
}
fn default_shapes_max() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecipe {
    /// Nested prefix fractions of the training pool, e.g. ["1/2", "1/4"].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fractions: Vec<String>,
    /// Also materialize the complement of each fraction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub complements: bool,
    /// Detection share of a disjoint detection/segmentation partition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_fraction: Option<String>,
}

impl SplitRecipe {
    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty() && !self.complements && self.det_fraction.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// Row label in rendered tables; defaults to the stage name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// One of supervised | teacher | segmentation | self | crosstask |
    /// multitask | multitask_selftrain.
    pub op: String,
    /// Training split name: "full", a materialized split, or "det"/"seg".
    pub train: String,
    /// Segmentation split for the multitask ops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<String>,
    /// Earlier stage whose checkpoint provides the teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    /// Earlier stage whose checkpoint replaces random init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<String>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// "cosine" or "constant".
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    /// "none", "mse", "pdf" or "defeat".
    #[serde(default = "default_kd")]
    pub kd: String,
    #[serde(default = "default_kd_weight")]
    pub kd_weight: f64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_schedule() -> String {
    "cosine".into()
}
fn default_kd() -> String {
    "none".into()
}
fn default_kd_weight() -> f64 {
    1.0
}

impl StageConfig {
    pub fn new(name: &str, op: &str, train: &str, epochs: usize) -> Self {
        Self {
            name: name.into(),
            label: None,
            op: op.into(),
            train: train.into(),
            seg: None,
            teacher: None,
            pretrain: None,
            epochs,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: default_schedule(),
            patience: None,
            kd: default_kd(),
            kd_weight: default_kd_weight(),
        }
    }

    pub fn mode(&self) -> Result<TrainMode> {
        match self.op.as_str() {
            "supervised" | "teacher" | "segmentation" => Ok(TrainMode::Supervised),
            "self" => Ok(TrainMode::SelfTrain),
            "crosstask" => Ok(TrainMode::CrosstaskKd),
            "multitask" => Ok(TrainMode::Multitask),
            "multitask_selftrain" => Ok(TrainMode::MultitaskSelftrain),
            other => Err(Error::Config(format!(
                "stage {}: op `{other}` is not one of supervised|teacher|segmentation|self|\
                 crosstask|multitask|multitask_selftrain",
                self.name
            ))),
        }
    }

    pub fn schedule_kind(&self) -> Result<LrSchedule> {
        match self.schedule.as_str() {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(Error::Config(format!(
                "stage {}: schedule `{other}` is not one of cosine|constant",
                self.name
            ))),
        }
    }

    pub fn kd_method(&self) -> Result<KDMethod> {
        match self.kd.as_str() {
            "none" => Ok(KDMethod::None),
            "mse" => Ok(KDMethod::Mse),
            "pdf" => Ok(KDMethod::Pdf),
            "defeat" => Ok(KDMethod::Defeat),
            other => Err(Error::Config(format!(
                "stage {}: kd `{other}` is not one of none|mse|pdf|defeat",
                self.name
            ))),
        }
    }

    pub fn wants_teacher(&self) -> bool {
        matches!(self.op.as_str(), "self" | "crosstask" | "multitask_selftrain")
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }
}

/// Parses "N/D" into an exact fraction.
pub fn parse_fraction(text: &str) -> Result<Fraction> {
    let bad = || Error::Config(format!("fraction `{text}` is not of the form N/D"));
    let (n, d) = text.split_once('/').ok_or_else(bad)?;
    let n: u64 = n.trim().parse().map_err(|_| bad())?;
    let d: u64 = d.trim().parse().map_err(|_| bad())?;
    if d == 0 {
        return Err(Error::Config(format!("fraction `{text}` has denominator 0")));
    }
    Ok(Fraction::new(n, d))
}

impl ExperimentConfig {
    pub fn scale_kind(&self) -> Result<ScaleKind> {
        match self.scale.as_str() {
            "desk" => Ok(ScaleKind::Desk),
            "paper" => Ok(ScaleKind::Paper),
            other => Err(Error::Config(format!(
                "scale `{other}` is not one of desk|paper"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        self.scale_kind()?;
        match self.dataset.kind.as_str() {
            "shapes" => {
                if self.dataset.train_images == 0 || self.dataset.val_images == 0 {
                    return Err(Error::Config(
                        "dataset: train_images and val_images must be positive".into(),
                    ));
                }
                if self.dataset.shapes_min > self.dataset.shapes_max {
                    return Err(Error::Config(
                        "dataset: shapes_min exceeds shapes_max".into(),
                    ));
                }
            }
            "voc" => {
                if self.dataset.root.is_none() && std::env::var_os(DATA_ROOT_ENV).is_none() {
                    return Err(Error::Config(format!(
                        "dataset: voc needs `root` or the {DATA_ROOT_ENV} variable"
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset: kind `{other}` is not one of shapes|voc"
                )));
            }
        }
        for f in &self.splits.fractions {
            parse_fraction(f)?;
        }
        if let Some(f) = &self.splits.det_fraction {
            parse_fraction(f)?;
        }
        if self.stages.is_empty() {
            return Err(Error::Config("config has no stages".into()));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.name.is_empty() {
                return Err(Error::Config(format!("stage {i}: name must not be empty")));
            }
            if !seen.insert(&stage.name) {
                return Err(Error::Config(format!(
                    "stage {}: duplicate stage name",
                    stage.name
                )));
            }
            let mode = stage.mode()?;
            stage.schedule_kind()?;
            let kd = stage.kd_method()?;
            if stage.epochs == 0 {
                return Err(Error::Config(format!(
                    "stage {}: epochs must be positive",
                    stage.name
                )));
            }
            if stage.batch_size == 0 {
                return Err(Error::Config(format!(
                    "stage {}: batch_size must be positive",
                    stage.name
                )));
            }
            let earlier = |label: &str, target: &Option<String>| -> Result<()> {
                if let Some(t) = target {
                    let found = self.stages[..i].iter().any(|s| &s.name == t);
                    if !found {
                        return Err(Error::Config(format!(
                            "stage {}: {label} `{t}` does not name an earlier stage",
                            stage.name
                        )));
                    }
                }
                Ok(())
            };
            earlier("teacher", &stage.teacher)?;
            earlier("pretrain", &stage.pretrain)?;
            if stage.wants_teacher() && stage.teacher.is_none() {
                return Err(Error::Config(format!(
                    "stage {}: op {} needs a `teacher` stage",
                    stage.name, stage.op
                )));
            }
            if !stage.wants_teacher() && stage.teacher.is_some() {
                return Err(Error::Config(format!(
                    "stage {}: op {} takes no teacher",
                    stage.name, stage.op
                )));
            }
            let multitask = matches!(mode, TrainMode::Multitask | TrainMode::MultitaskSelftrain);
            if multitask && stage.seg.is_none() {
                return Err(Error::Config(format!(
                    "stage {}: op {} needs a `seg` split",
                    stage.name, stage.op
                )));
            }
            if !multitask && stage.seg.is_some() {
                return Err(Error::Config(format!(
                    "stage {}: op {} takes no seg split",
                    stage.name, stage.op
                )));
            }
            if kd != KDMethod::None
                && !matches!(
                    mode,
                    TrainMode::SelfTrain | TrainMode::CrosstaskKd | TrainMode::MultitaskSelftrain
                )
            {
                return Err(Error::Config(format!(
                    "stage {}: kd {} is not available under op {}",
                    stage.name, stage.kd, stage.op
                )));
            }
            if stage.op == "crosstask" && kd == KDMethod::Pdf {
                return Err(Error::Config(format!(
                    "stage {}: kd pdf weights disagreement by detection predictions, which a \
                     cross-task teacher does not produce",
                    stage.name
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialization; the bytes stored next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let mut s = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(s, "{b:02x}");
        }
        Ok(s)
    }
}
