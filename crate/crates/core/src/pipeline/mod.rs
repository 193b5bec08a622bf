//! Config-driven orchestration of the three stages and the downstream
//! tracks, with per-stage artifact directories and run manifests.
//!
//! Every stage writes into `<output>/<stage>/` and finishes by writing
//! `<output>/<stage>/manifest.json`, which lists its upstream manifests, every
//! file in the stage directory with its SHA-256, the hash of the config the
//! stage consumed, and the metric rows shown by [`render_report`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anticipation::LTATrainConfig;
use crate::corpus::{DomainShift, SelectionConfig, WorldConfig};
use crate::encoders::{ClassifierConfig, EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::grounding::GroundingConfig;
use crate::moments::MomentsConfig;
use crate::retrieval::{retrieval_finetune_config, retrieval_finetune_desk};
use crate::train::PhaseConfig;

mod manifest;
mod report;
pub mod stages;

pub use manifest::{file_sha256, FileRecord, Manifest, MetricRows, MANIFEST_FILE};
pub use report::{parse_report_tables, render_report, ParsedTable, Report, ReportTable, TABLES};
pub use stages::{merge_prediction_files, run_pipeline, run_stage, Context, PredictionKind, VideoSplit};

/// Overrides the configured output directory.
pub const OUTPUT_ENV: &str = "EGOVIDEO_OUTPUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small epochs and larger steps sized for the synthetic corpora.
    Desk,
    /// The published schedules, kept for reference runs.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?}; expected desk or paper"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Pretrain,
    Nlq,
    Goalstep,
    Mq,
    Lta,
    EkAr,
    EkMir,
    EkUda,
    Ensemble,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Corpus,
        Stage::Pretrain,
        Stage::Nlq,
        Stage::Goalstep,
        Stage::Mq,
        Stage::Lta,
        Stage::EkAr,
        Stage::EkMir,
        Stage::EkUda,
        Stage::Ensemble,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Pretrain => "pretrain",
            Stage::Nlq => "nlq",
            Stage::Goalstep => "goalstep",
            Stage::Mq => "mq",
            Stage::Lta => "lta",
            Stage::EkAr => "ek_ar",
            Stage::EkMir => "ek_mir",
            Stage::EkUda => "ek_uda",
            Stage::Ensemble => "ensemble",
            Stage::Report => "report",
        }
    }

    /// Stages whose manifests must exist before this one runs, nearest first.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Corpus | Stage::Report => &[],
            Stage::Pretrain => &[Stage::Corpus],
            Stage::Ensemble => &[Stage::Nlq],
            _ => &[Stage::Pretrain, Stage::Corpus],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingTrack {
    pub model: GroundingConfig,
    /// Independently seeded models; the ensemble stage merges their predictions.
    pub members: usize,
    /// Pretrain on narration queries of the training clips before fine-tuning.
    pub narration_pretraining: bool,
    /// Caps the narration set, which is five times the query set.
    pub max_pretrain_queries: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsTrack {
    pub model: MomentsConfig,
    /// With two or more members their logits are also averaged.
    pub members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtaTrack {
    pub classifier: ClassifierConfig,
    pub forecaster: LTATrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionTrack {
    pub classifier: ClassifierConfig,
    pub members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalTrack {
    pub finetune: PretrainConfig,
    pub frames_per_item: usize,
    /// Evaluate the stage-2 checkpoint only.
    pub zero_shot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationTrack {
    pub classifier: ClassifierConfig,
    pub shift: DomainShift,
    pub target_clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleTrack {
    /// One weight per NLQ member; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Replaces every per-block seed; members use `seed + i`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// TOML file holding a `WorldConfig`; takes precedence over `[world]`.
    pub world_path: Option<PathBuf>,
    pub stages: Vec<Stage>,
    /// Share of videos held out for evaluation.
    pub test_fraction: f64,
    pub world: WorldConfig,
    pub selection: SelectionConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub nlq: GroundingTrack,
    pub goalstep: GroundingTrack,
    pub mq: MomentsTrack,
    pub lta: LtaTrack,
    pub ek_ar: RecognitionTrack,
    pub ek_mir: RetrievalTrack,
    pub ek_uda: AdaptationTrack,
    pub ensemble: EnsembleTrack,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Published schedules on the reference world.
    pub fn paper() -> Self {
        let recognition = ClassifierConfig { phase: PhaseConfig::new(48, 100, 2, 1e-5), ..ClassifierConfig::default() };
        Self {
            profile: Profile::Paper,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            world_path: None,
            stages: Stage::ALL.to_vec(),
            test_fraction: 0.25,
            world: WorldConfig::reference(),
            selection: SelectionConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            nlq: GroundingTrack {
                model: GroundingConfig::default(),
                members: 2,
                narration_pretraining: true,
                max_pretrain_queries: None,
            },
            goalstep: GroundingTrack {
                model: GroundingConfig::step_grounding(),
                members: 1,
                narration_pretraining: false,
                max_pretrain_queries: None,
            },
            mq: MomentsTrack { model: MomentsConfig::default(), members: 2 },
            lta: LtaTrack { classifier: ClassifierConfig::default(), forecaster: LTATrainConfig::default() },
            ek_ar: RecognitionTrack { classifier: recognition.clone(), members: 2 },
            ek_mir: RetrievalTrack { finetune: retrieval_finetune_config(), frames_per_item: 8, zero_shot: false },
            ek_uda: AdaptationTrack {
                classifier: recognition,
                shift: DomainShift { hue_degrees: 40.0, speed: 1.5 },
                target_clips: 64,
            },
            ensemble: EnsembleTrack { weights: None },
        }
    }

    /// Same layout with schedules that learn within seconds on CPU.
    pub fn desk() -> Self {
        let classifier = ClassifierConfig { phase: PhaseConfig::new(16, 8, 1, 5e-3), ..ClassifierConfig::default() };
        let paper = Self::paper();
        Self {
            profile: Profile::Desk,
            nlq: GroundingTrack { model: GroundingConfig::desk(), max_pretrain_queries: Some(400), ..paper.nlq },
            goalstep: GroundingTrack { model: GroundingConfig::step_grounding().scaled(3, 20.0), ..paper.goalstep },
            mq: MomentsTrack {
                model: MomentsConfig { phase: PhaseConfig::new(2, 12, 2, 2e-3), ..MomentsConfig::default() },
                members: 2,
            },
            lta: LtaTrack { classifier: classifier.clone(), forecaster: LTATrainConfig::desk() },
            ek_ar: RecognitionTrack { classifier: classifier.clone(), members: 2 },
            ek_mir: RetrievalTrack { finetune: retrieval_finetune_desk(), ..paper.ek_mir },
            ek_uda: AdaptationTrack { classifier, ..paper.ek_uda },
            ..paper
        }
    }

    /// Parses TOML layered over the defaults of its `profile` (desk when
    /// absent); keys left out keep the profile value.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        deep_merge(&mut merged, user);
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(path) = &cfg.world_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("world_path {}: {e}", path.display())))?;
            let mut world =
                toml::Table::try_from(WorldConfig::reference()).map_err(|e| Error::Config(e.to_string()))?;
            deep_merge(&mut world, text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?);
            cfg.world = world.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        for (name, members) in [
            ("nlq", self.nlq.members),
            ("goalstep", self.goalstep.members),
            ("mq", self.mq.members),
            ("ek_ar", self.ek_ar.members),
        ] {
            if members == 0 {
                return Err(Error::Config(format!("{name}: members must be at least 1")));
            }
        }
        if let Some(w) = &self.ensemble.weights {
            if w.len() != self.nlq.members {
                return Err(Error::Config(format!(
                    "ensemble: {} weights for {} nlq members",
                    w.len(),
                    self.nlq.members
                )));
            }
        }
        if self.ek_mir.frames_per_item == 0 || self.ek_uda.target_clips == 0 {
            return Err(Error::Config("frames_per_item and target_clips must be positive".into()));
        }
        self.world.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.nlq.model.validate()?;
        self.goalstep.model.validate()?;
        self.mq.model.validate()?;
        self.lta.forecaster.validate()
    }

    /// Output root: an explicit override, else `EGOVIDEO_OUTPUT`, else the
    /// configured directory.
    pub fn output_root(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            // a different enum variant replaces the whole table
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if !(o.contains_key("kind") && o.get("kind") != b.get("kind")) =>
            {
                deep_merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
