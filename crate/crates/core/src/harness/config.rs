//! Experiment configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::{Framework, ModelConfig, PromptStyle};
use crate::series::SplitRatios;
use crate::tuning::Scheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetBlock {
    /// `sinusoid` for the built-in fixture, otherwise a label for `path`.
    pub name: String,
    /// CSV file, relative to the data root unless absolute.
    pub path: Option<String>,
    /// Split ratios such as `"6:2:2"`; chosen from the name when absent.
    pub split: Option<SplitRatios>,
    /// Sinusoid fixture length and period.
    pub points: usize,
    pub period: f64,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        DatasetBlock {
            name: "sinusoid".into(),
            path: None,
            split: None,
            points: 2048,
            period: 32.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowBlock {
    pub history: usize,
    pub horizon: usize,
    pub patch: usize,
}

impl Default for WindowBlock {
    fn default() -> Self {
        WindowBlock {
            history: 512,
            horizon: 336,
            patch: 8,
        }
    }
}

/// Model dimensions; the patch size lives in the window block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub framework: Framework,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelBlock {
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            model_dim: m.model_dim,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim,
            dropout: m.dropout,
            framework: m.framework,
        }
    }
}

impl ModelBlock {
    pub fn to_model_config(&self, patch: usize) -> ModelConfig {
        ModelConfig {
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            patch,
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            framework: self.framework,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskBlock {
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl Default for MaskBlock {
    fn default() -> Self {
        MaskBlock {
            strategy: MaskStrategy::Isometric,
            ratio: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeBlock {
    pub scheme: Scheme,
    pub prompt: PromptStyle,
    pub concat_rows: usize,
}

impl Default for SchemeBlock {
    fn default() -> Self {
        SchemeBlock {
            scheme: Scheme::PtTuning,
            prompt: PromptStyle::AddFuture,
            concat_rows: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingBlock {
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Independent repeats; seeds are `seed, seed + 1, ...`.
    pub repeats: usize,
    /// Length of pretraining windows.
    pub pretrain_length: usize,
    /// Caps on optimizer steps; unset means whole epochs.
    pub pretrain_steps: Option<usize>,
    pub tune_steps: Option<usize>,
    pub pretrain_stride: usize,
    pub tune_stride: usize,
    pub eval_stride: usize,
    /// Cap on windows per split, taken evenly across the split.
    pub max_windows: Option<usize>,
    pub dropout: bool,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        TrainingBlock {
            lr: 1e-3,
            batch_size: 32,
            pretrain_epochs: 20,
            finetune_epochs: 20,
            patience: 3,
            seed: 0,
            repeats: 1,
            pretrain_length: 512,
            pretrain_steps: None,
            tune_steps: None,
            pretrain_stride: 1,
            tune_stride: 1,
            eval_stride: 1,
            max_windows: None,
            dropout: true,
        }
    }
}

impl TrainingBlock {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats.max(1) as u64).map(|i| self.seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub ratios: Vec<f64>,
    pub lookbacks: Vec<usize>,
    pub patches: Vec<usize>,
    pub pretrain_lengths: Vec<usize>,
    pub horizons: Vec<usize>,
    pub strategies: Vec<MaskStrategy>,
    pub frameworks: Vec<Framework>,
    pub prompts: Vec<PromptStyle>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            ratios: vec![0.65, 0.7, 0.75, 0.8, 0.85],
            lookbacks: vec![96, 192, 336, 512, 720],
            patches: vec![4, 6, 8, 12, 16],
            pretrain_lengths: vec![336, 512, 720, 912],
            horizons: vec![96, 192, 336, 720],
            strategies: vec![
                MaskStrategy::Periodic,
                MaskStrategy::Continuous,
                MaskStrategy::Random,
                MaskStrategy::Isometric,
            ],
            frameworks: Framework::ALL.to_vec(),
            prompts: vec![PromptStyle::ConcatHistory, PromptStyle::AddHistory, PromptStyle::AddFuture],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub window: WindowBlock,
    pub model: ModelBlock,
    pub mask: MaskBlock,
    pub scheme: SchemeBlock,
    pub training: TrainingBlock,
    pub sweep: SweepBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config(self.window.patch)
    }

    pub fn split_ratios(&self) -> SplitRatios {
        self.dataset.split.unwrap_or_else(|| SplitRatios::for_dataset(&self.dataset.name))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let t = &self.training;
        if t.batch_size == 0 || t.pretrain_stride == 0 || t.tune_stride == 0 || t.eval_stride == 0 {
            return Err(Error::Config("batch size and strides must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not usable", t.lr)));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} must lie in (0, 1)", self.mask.ratio)));
        }
        if self.sweep.horizons.is_empty() {
            return Err(Error::Config("sweep.horizons must not be empty".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// The sinusoid fixture used for the toy-scale checks: one channel,
    /// period 32, 2048 points, look-back 64, patch 8, d = 16. Large batches
    /// and lr 1e-2 so 200 pretraining steps converge.
    pub fn toy() -> Self {
        ExperimentConfig {
            dataset: DatasetBlock::default(),
            window: WindowBlock {
                history: 64,
                horizon: 32,
                patch: 8,
            },
            model: ModelBlock {
                n_encoder_layers: 2,
                n_decoder_layers: 2,
                model_dim: 16,
                n_heads: 2,
                ffn_dim: 32,
                dropout: 0.0,
                framework: Framework::CrossMae,
            },
            mask: MaskBlock::default(),
            scheme: SchemeBlock::default(),
            training: TrainingBlock {
                lr: 1e-2,
                batch_size: 256,
                pretrain_length: 64,
                pretrain_steps: Some(200),
                tune_steps: Some(200),
                finetune_epochs: 20,
                pretrain_stride: 1,
                tune_stride: 1,
                eval_stride: 1,
                max_windows: None,
                ..TrainingBlock::default()
            },
            sweep: SweepBlock {
                ratios: vec![0.75],
                lookbacks: vec![64],
                patches: vec![8],
                pretrain_lengths: vec![64],
                horizons: vec![16, 32],
                ..SweepBlock::default()
            },
        }
    }
}
