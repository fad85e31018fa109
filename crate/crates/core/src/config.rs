//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationKind, AugmentationSpec};
use crate::data::{LabelFraction, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, HeadConfig, Variant};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Exactly one of the three sources must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub synthetic: Option<SyntheticConfig>,
    /// PTB-XL root (the directory holding `ptbxl_database.csv`).
    pub ptbxl: Option<PathBuf>,
    /// Record cap for PTB-XL ingestion.
    pub limit: Option<usize>,
    /// Dataset file written by `synth-data` or `ingest`.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Ptbxl { root: PathBuf, limit: Option<usize> },
    File(PathBuf),
}

impl DatasetSection {
    pub fn source(&self) -> Result<DatasetSource> {
        let set = self.synthetic.is_some() as u8 + self.ptbxl.is_some() as u8 + self.file.is_some() as u8;
        if set != 1 {
            return Err(Error::Config(format!(
                "[dataset] needs exactly one of synthetic, ptbxl, file; {set} given"
            )));
        }
        Ok(if let Some(s) = &self.synthetic {
            DatasetSource::Synthetic(s.clone())
        } else if let Some(root) = &self.ptbxl {
            DatasetSource::Ptbxl {
                root: root.clone(),
                limit: self.limit,
            }
        } else {
            DatasetSource::File(self.file.clone().expect("counted above"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Explicit encoder layout; overrides the preset. Its `variant` is replaced
    /// by the variant being run.
    pub encoder: Option<EncoderConfig>,
    pub heads: Option<HeadConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Full,
            encoder: None,
            heads: None,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self, variant: Variant) -> EncoderConfig {
        let mut e = self.encoder.clone().unwrap_or_else(|| match self.preset {
            Preset::Full => EncoderConfig::full(variant),
            Preset::Toy => EncoderConfig::toy(variant),
        });
        e.variant = variant;
        e
    }

    pub fn heads(&self) -> HeadConfig {
        self.heads.clone().unwrap_or_else(|| match self.preset {
            Preset::Full => HeadConfig::default(),
            Preset::Toy => HeadConfig::toy(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSection {
    /// Single augmentation for `pretrain`.
    pub spec: AugmentationSpec,
    /// Grids swept by `sweep`.
    pub grids: Vec<AugmentationKind>,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection {
            spec: AugmentationSpec::GaussianNoise { sigma: 0.15 },
            grids: vec![AugmentationKind::GaussianNoise],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub encoders: Vec<Variant>,
    pub label_fractions: Vec<LabelFraction>,
    pub output_dir: PathBuf,
    /// Worker slots for the sweep; `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub deterministic: bool,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub augmentation: AugmentationSection,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0],
            encoders: Variant::ALL.to_vec(),
            label_fractions: LabelFraction::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
            workers: None,
            deterministic: false,
            dataset: DatasetSection {
                synthetic: Some(SyntheticConfig::default()),
                ..Default::default()
            },
            model: ModelSection::default(),
            augmentation: AugmentationSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() || self.encoders.is_empty() || self.label_fractions.is_empty() {
            return Err(Error::Config("seeds, encoders and label_fractions must be non-empty".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.dataset.source()?;
        self.augmentation.spec.validate()?;
        self.model.heads().validate()?;
        for &v in &self.encoders {
            self.model.encoder(v).validate()?;
        }
        self.train.validate()
    }

    /// Checks that paths named by the config exist.
    pub fn check_paths(&self) -> Result<()> {
        match self.dataset.source()? {
            DatasetSource::Ptbxl { root: p, .. } | DatasetSource::File(p) if !p.exists() => {
                Err(Error::Config(format!("dataset path {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }
}
