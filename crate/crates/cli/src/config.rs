//! Run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` TOML file,
//! `--set section.key=value` overrides, then dedicated flags such as
//! `--seed`. Unknown sections or keys are rejected at every layer.

use std::fmt;
use std::path::Path;

use q2t::encoder::EncoderConfig;
use q2t::encoding::{EncodingConfig, EncodingMode};
use q2t::kge::{PretrainConfig, Scorer};
use q2t::symbolic::{GenerateConfig, SamplerConfig, SplitCounts};
use q2t::train::{EvalTarget, SweepAxis, TrainRunConfig};
use q2t::QueryType;
use serde::{Deserialize, Serialize};

/// A configuration problem; maps to its own exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub sample: SampleSection,
    pub pretrain: PretrainSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Training queries per supervised type.
    pub train_per_type: usize,
    /// Validation and test queries per template.
    pub eval_per_type: usize,
    pub negation_attempts: usize,
    pub query_attempts: usize,
    pub attempts_per_record: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub scorer: String,
    pub dim: usize,
    pub lambda_rel: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub reg_weight: f64,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub d1: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub encoding: String,
    pub clamp: usize,
    pub signed: bool,
    pub k_neg: usize,
    pub label_smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub freeze_kge: bool,
    pub eval_every: usize,
    /// Query types drawn during training, each with equal weight.
    pub types: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `hard` or `all`.
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            device: "cpu".into(),
            sample: SampleSection::default(),
            pretrain: PretrainSection::default(),
            encoder: EncoderSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        let g = GenerateConfig::default();
        SampleSection {
            train_per_type: 1000,
            eval_per_type: 100,
            negation_attempts: g.sampler.negation_attempts,
            query_attempts: g.sampler.query_attempts,
            attempts_per_record: g.attempts_per_record,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            scorer: p.scorer.to_string(),
            dim: p.dim,
            lambda_rel: p.lambda_rel,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            epochs: p.epochs,
            reg_weight: p.reg_weight,
            init_scale: p.init_scale,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            num_layers: e.num_layers,
            d1: e.d1,
            num_heads: e.num_heads,
            dropout: e.dropout,
            encoding: e.encoding.mode.to_string(),
            clamp: e.encoding.clamp,
            signed: e.encoding.signed,
            k_neg: e.k_neg,
            label_smoothing: e.label_smoothing,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainRunConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            steps: t.steps,
            freeze_kge: t.freeze_kge,
            eval_every: t.eval_every,
            types: t.type_mix.iter().map(|(qt, _)| qt.to_string()).collect(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            target: "hard".into(),
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: SweepAxis::LabelSmoothing.to_string(),
            values: vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

/// Parses the right-hand side of `--set`. Bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, entry: &str) -> anyhow::Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| bad(format!("override {entry:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) || keys.len() > 2 {
        return Err(bad(format!("override key {path:?} must be `key` or `section.key`")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| bad(format!("{k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then each `section.key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| bad(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.message().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Rejects values that parse but cannot be used.
    pub fn check(&self) -> anyhow::Result<()> {
        if self.device != "cpu" {
            return Err(bad(format!("device {:?} is not available (only cpu)", self.device)));
        }
        self.pretrain_config()?.validate().map_err(|e| bad(e.to_string()))?;
        self.train_config()?.validate().map_err(|e| bad(e.to_string()))?;
        self.eval_target()?;
        self.sweep_axis()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            sampler: SamplerConfig {
                negation_attempts: self.sample.negation_attempts,
                query_attempts: self.sample.query_attempts,
            },
            attempts_per_record: self.sample.attempts_per_record,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        let s = &self.sample;
        SplitCounts {
            train: QueryType::SUPERVISED.iter().map(|&t| (t, s.train_per_type)).collect(),
            valid: QueryType::TEMPLATES.iter().map(|&t| (t, s.eval_per_type)).collect(),
            test: QueryType::TEMPLATES.iter().map(|&t| (t, s.eval_per_type)).collect(),
        }
    }

    pub fn pretrain_config(&self) -> anyhow::Result<PretrainConfig> {
        let p = &self.pretrain;
        Ok(PretrainConfig {
            scorer: p.scorer.parse::<Scorer>().map_err(|e| bad(e.to_string()))?,
            dim: p.dim,
            lambda_rel: p.lambda_rel,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            epochs: p.epochs,
            reg_weight: p.reg_weight,
            init_scale: p.init_scale,
            seed: self.seed,
        })
    }

    pub fn encoder_config(&self) -> anyhow::Result<EncoderConfig> {
        let e = &self.encoder;
        Ok(EncoderConfig {
            num_layers: e.num_layers,
            d1: e.d1,
            num_heads: e.num_heads,
            dropout: e.dropout,
            encoding: EncodingConfig {
                mode: e.encoding.parse::<EncodingMode>().map_err(|e| bad(e.to_string()))?,
                clamp: e.clamp,
                signed: e.signed,
            },
            k_neg: e.k_neg,
            label_smoothing: e.label_smoothing,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> anyhow::Result<TrainRunConfig> {
        let t = &self.train;
        let type_mix = t
            .types
            .iter()
            .map(|s| {
                s.parse::<QueryType>()
                    .map(|qt| (qt, 1.0))
                    .map_err(|e| bad(format!("train.types: {e}")))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(TrainRunConfig {
            encoder: self.encoder_config()?,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            steps: t.steps,
            freeze_kge: t.freeze_kge,
            eval_every: t.eval_every,
            seed: self.seed,
            type_mix,
        })
    }

    pub fn eval_target(&self) -> anyhow::Result<EvalTarget> {
        match self.eval.target.as_str() {
            "hard" => Ok(EvalTarget::Hard),
            "all" => Ok(EvalTarget::All),
            other => Err(bad(format!("eval.target {other:?} (expected hard or all)"))),
        }
    }

    pub fn sweep_axis(&self) -> anyhow::Result<SweepAxis> {
        self.sweep.axis.parse().map_err(|e: q2t::Error| bad(e.to_string()))
    }
}
