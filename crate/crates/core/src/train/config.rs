use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::selection::Strategy;

/// Backward mode of one linear layer. Text form: `exact`, `lora:<rank>`, or any
/// base-selection strategy (`lp_l1:4`, `lp_linf:3`, `lhe:10:8`, `full`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSpec {
    Exact,
    LbpWht(Strategy),
    Lora(usize),
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeSpec::Exact => write!(f, "exact"),
            ModeSpec::LbpWht(s) => write!(f, "{s}"),
            ModeSpec::Lora(r) => write!(f, "lora:{r}"),
        }
    }
}

impl FromStr for ModeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(ModeSpec::Exact);
        }
        if let Some(rank) = s.strip_prefix("lora:") {
            return match rank.parse::<usize>() {
                Ok(r) if r > 0 => Ok(ModeSpec::Lora(r)),
                _ => Err(Error::Config(format!("bad LoRA rank in '{s}'"))),
            };
        }
        s.parse::<Strategy>()
            .map(ModeSpec::LbpWht)
            .map_err(|_| Error::Config(format!("unknown backward mode '{s}'")))
    }
}

impl Serialize for ModeSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModeSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    /// Adam with bias correction and no weight decay.
    AdamLite { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdamLite {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

/// Token-wise MLP body, then mean pooling over tokens and a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output widths of the body's linear layers; empty gives a linear probe.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Gelu,
        }
    }
}

fn default_mode() -> ModeSpec {
    ModeSpec::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Mode of every body linear layer unless `layer_modes` overrides it.
    #[serde(default = "default_mode")]
    pub bp_mode: ModeSpec,
    /// One entry per body linear layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_modes: Option<Vec<ModeSpec>>,
    /// Number of leading linear layers (body first, then the classifier) whose
    /// weights are never updated.
    #[serde(default)]
    pub frozen_prefix: usize,
    #[serde(default)]
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            bp_mode: ModeSpec::Exact,
            layer_modes: None,
            frozen_prefix: 0,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Number of linear layers including the classifier.
    pub fn linear_layers(&self) -> usize {
        self.model.hidden.len() + 1
    }

    pub fn body_modes(&self) -> Vec<ModeSpec> {
        match &self.layer_modes {
            Some(m) => m.clone(),
            None => vec![self.bp_mode; self.model.hidden.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        // Zero is accepted so a run can be checked for leaving weights untouched.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Some(m) = &self.layer_modes {
            if m.len() != self.model.hidden.len() {
                return Err(Error::Config(format!(
                    "{} layer modes for {} body layers",
                    m.len(),
                    self.model.hidden.len()
                )));
            }
        }
        if self.frozen_prefix >= self.linear_layers() {
            return Err(Error::Config(format!(
                "frozen_prefix {} leaves no trainable layer out of {}",
                self.frozen_prefix,
                self.linear_layers()
            )));
        }
        match self.optimizer {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
            }
            OptimizerConfig::AdamLite { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                return Err(Error::Config("invalid Adam hyperparameters".into()));
            }
            _ => {}
        }
        self.dataset.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_text_round_trip() {
        for s in ["exact", "lora:4", "lp_l1:2", "lp_linf:3", "lhe:10:8", "full"] {
            assert_eq!(s.parse::<ModeSpec>().unwrap().to_string(), s);
        }
        assert!("lora:0".parse::<ModeSpec>().is_err());
        assert!("nope".parse::<ModeSpec>().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = TrainConfig::from_json(r#"{"seed": 1, "epochs": 2, "batch_size": 8, "learning_rate": 0.01, "bp_mode": "lp_l1:4"}"#).unwrap();
        assert_eq!(cfg.bp_mode, ModeSpec::LbpWht(Strategy::LpL1(4)));
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.dataset, DatasetSpec::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = TrainConfig::default();
        let mut bad = vec![];
        bad.push(TrainConfig { epochs: 0, ..base.clone() });
        bad.push(TrainConfig { batch_size: 0, ..base.clone() });
        bad.push(TrainConfig { learning_rate: -1.0, ..base.clone() });
        bad.push(TrainConfig { frozen_prefix: 3, ..base.clone() });
        bad.push(TrainConfig { layer_modes: Some(vec![ModeSpec::Exact]), ..base.clone() });
        bad.push(TrainConfig { optimizer: OptimizerConfig::Sgd { momentum: 1.0 }, ..base.clone() });
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(TrainConfig::from_json(r#"{"seed": 1, "epochs": 2, "batch_size": 8, "learning_rate": 0.01, "bogus": 1}"#).is_err());
    }
}
