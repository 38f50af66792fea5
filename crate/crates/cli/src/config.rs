//! Pipeline configuration: one JSON document with a section per stage,
//! loaded from `--config` and patched by `--set path=value` overrides.

use std::path::Path;

use mdd_core::denoiser::DenoiserTrainConfig;
use mdd_core::hsa::NgramProvider;
use mdd_core::motion_repr::{DEFAULT_CONTACT_THRESHOLD, MAX_FRAMES, TARGET_FPS};
use mdd_core::nn::Activation;
use mdd_core::sampler::GuidanceConfig;
use mdd_core::vq::VqTrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for corpus synthesis and split assignment.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub text: NgramProvider,
    pub vq: VqTrainConfig,
    pub denoiser: DenoiserSection,
    pub generate: GuidanceConfig,
    pub evaluate: EvaluateConfig,
    pub filter: FilterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synthetic: SyntheticConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitConfig::default(),
            text: NgramProvider::default(),
            vq: VqTrainConfig::default(),
            denoiser: DenoiserSection::default(),
            generate: GuidanceConfig::default(),
            evaluate: EvaluateConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub motions: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Capture rates cycled over the generated motions.
    pub source_fps: Vec<u32>,
    /// Fraction of wild captions that describe a different motion.
    pub off_topic: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            motions: 60,
            min_frames: 48,
            max_frames: 96,
            source_fps: vec![20, 40, 30],
            off_topic: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_fps: u32,
    pub max_frames: usize,
    pub contact_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fps: TARGET_FPS,
            max_frames: MAX_FRAMES,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train/val/test (or train/test) fractions.
    pub ratios: Vec<f64>,
    pub batch_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.8, 0.1, 0.1],
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub hidden: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub radius: usize,
    pub activation: Activation,
    pub diffusion_steps: usize,
    pub profile: String,
    pub train: DenoiserTrainConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            cond_dim: mdd_core::hsa::DEFAULT_COND_DIM,
            blocks: 2,
            radius: 2,
            activation: Activation::Silu,
            diffusion_steps: 100,
            profile: "mask-and-replace".into(),
            train: DenoiserTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Width of the shared motion/text feature space.
    pub feature_dim: usize,
    pub extractor_seed: u64,
    pub runs: usize,
    /// Captions used for the multimodality score.
    pub mm_texts: usize,
    /// Pairs per caption for the multimodality score.
    pub mm_subset: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            extractor_seed: 7,
            runs: mdd_core::metrics::METRIC_RUNS,
            mm_texts: mdd_core::metrics::MMODALITY_SUBSET,
            mm_subset: mdd_core::metrics::MMODALITY_SUBSET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub tau: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau: mdd_core::corpus::DEFAULT_TAU,
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the config file (if any), then each `path=value`
    /// override in order. Values parse as JSON, falling back to a string.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config file {} is not valid JSON: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not of the form path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut slot = doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
