//! Project configuration file. Every field is optional; the model preset
//! picks the front-end, the network size and the default segment length.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, TrackConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, PitchTrackerConfig, TripletConfig};
use crate::spectral::{GriffinLimConfig, PhaseInit, StftConfig};
use crate::train::{CodebookInit, Preset, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub spectral: SpectralSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralSection {
    pub griffin_lim_iterations: usize,
    /// Start phase reconstruction from random phases drawn from the seed
    /// instead of zero phase.
    pub random_phase: bool,
}

impl Default for SpectralSection {
    fn default() -> Self {
        Self {
            griffin_lim_iterations: GriffinLimConfig::default().iterations,
            random_phase: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: Preset::Toy }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub beta: Option<f64>,
    pub clip_norm: Option<f64>,
    pub codebook_init: Option<CodebookInit>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub segment_seconds: Option<f64>,
    pub max_transpose: Option<i32>,
    pub max_resample_semitones: Option<f64>,
    pub track: Option<TrackConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mel_bands: usize,
    pub tracker: PitchTrackerConfig,
    pub timbre: TripletConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mel_bands: EvalConfig::default().mel_bands,
            tracker: PitchTrackerConfig::default(),
            timbre: TripletConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train(0).validate()?;
        self.data().validate()?;
        if self.eval.mel_bands == 0 {
            return Err(Error::Config("eval.mel_bands must be positive".into()));
        }
        Ok(())
    }

    pub fn stft(&self) -> StftConfig {
        self.model.preset.stft()
    }

    pub fn griffin_lim(&self, seed: u64) -> GriffinLimConfig {
        GriffinLimConfig {
            iterations: self.spectral.griffin_lim_iterations,
            init: if self.spectral.random_phase {
                PhaseInit::Random { seed }
            } else {
                PhaseInit::Zero
            },
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            adam_beta1: t.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: t.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: t.adam_eps.unwrap_or(d.adam_eps),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            beta: t.beta.unwrap_or(d.beta),
            clip_norm: t.clip_norm.unwrap_or(d.clip_norm),
            codebook_init: t.codebook_init.unwrap_or(d.codebook_init),
            seed,
            preset: self.model.preset,
        }
    }

    pub fn data(&self) -> DataConfig {
        let d = match self.model.preset {
            Preset::Toy => DataConfig::toy(),
            Preset::PaperScale => DataConfig::default(),
        };
        let s = &self.data;
        DataConfig {
            segment_seconds: s.segment_seconds.unwrap_or(d.segment_seconds),
            max_transpose: s.max_transpose.unwrap_or(d.max_transpose),
            max_resample_semitones: s.max_resample_semitones.unwrap_or(d.max_resample_semitones),
            track: s.track.clone().unwrap_or(d.track),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            tracker: self.eval.tracker,
            mel_bands: self.eval.mel_bands,
        }
    }

    pub fn timbre(&self, seed: u64) -> TripletConfig {
        TripletConfig {
            seed,
            ..self.eval.timbre
        }
    }
}
