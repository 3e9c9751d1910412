//! Experiment configuration: strict TOML-backed schema with unknown-key
//! rejection, validated before any run.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distill::{FreezePlan, KDLossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, WeightRole};
use crate::quant::{Granularity, QuantScheme, Symmetry};
use crate::util::fnv1a64_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Fake quantization enabled for the student (false = FP run).
    pub enabled: bool,
    pub bits: u8,
    pub symmetry: Symmetry,
    pub granularity: WeightGranularity,
    pub calibration: CalibrationChoice,
    pub grid_points: usize,
    /// Weight roles to quantize; embeddings, norms and head stay FP.
    pub policy: Vec<WeightRole>,
    /// Activation bitwidth for post-hoc W4A16-style evaluation.
    pub act_bits: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGranularity {
    PerTensor,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationChoice {
    MinMax,
    Mse,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            enabled: true,
            bits: 4,
            symmetry: Symmetry::SymmetricSigned,
            granularity: WeightGranularity::PerChannel,
            calibration: CalibrationChoice::Mse,
            grid_points: 101,
            policy: WeightRole::ALL.to_vec(),
            act_bits: 16,
        }
    }
}

impl QuantConfig {
    /// Weight quantizer scheme; per-channel granularity is over the
    /// output axis (axis 1 of [d_in, d_out]).
    pub fn scheme(&self) -> Result<QuantScheme> {
        let granularity = match self.granularity {
            WeightGranularity::PerTensor => Granularity::PerTensor,
            WeightGranularity::PerChannel => Granularity::PerChannel { axis: 1 },
        };
        QuantScheme::new(self.bits, self.symmetry, granularity)
    }

    pub fn method(&self) -> crate::model::CalibrationMethod {
        match self.calibration {
            CalibrationChoice::MinMax => crate::model::CalibrationMethod::MinMax,
            CalibrationChoice::Mse => {
                crate::model::CalibrationMethod::Mse { grid_points: self.grid_points }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { corpus: PathBuf::from("data/corpus.txt"), out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KDLossConfig,
    pub quant: QuantConfig,
    /// Freeze preset: none | o | v | ov | qkv | oqkv.
    pub freeze: String,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kd: KDLossConfig::default(),
            quant: QuantConfig::default(),
            freeze: "none".to_string(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.kd.validate()?;
        self.eval.validate(self.model.max_seq_len)?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        self.quant.scheme()?;
        let unique: BTreeSet<_> = self.quant.policy.iter().collect();
        if unique.len() != self.quant.policy.len() {
            return Err(Error::Config("duplicate roles in quant.policy".into()));
        }
        self.freeze_plan()?;
        Ok(())
    }

    pub fn freeze_plan(&self) -> Result<FreezePlan> {
        self.freeze.parse()
    }

    /// Parse from TOML text, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Stable short hash of (config, seed); used for run-directory names.
    pub fn run_hash(&self) -> String {
        let canon = serde_json::to_string(&self.to_json_value()).expect("config serializes");
        fnv1a64_hex(canon.as_bytes())[..12].to_string()
    }
}
