//! `key = value` run configuration with `gen.`, `model.`, `asn.` and
//! `train.` sections.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use sortsimul_core::encoder::ModelConfig;
use sortsimul_core::sorting::{Ablation, AsnConfig, Normalization};
use sortsimul_core::synth::{GenConfig, ReorderRule};
use sortsimul_core::train::{Phase, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Sizes of the generated splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub gen: GenConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub asn: AsnConfig,
    pub train: TrainConfig,
    /// The text this configuration was parsed from.
    pub text: String,
}

pub const KEYS: &[&str] = &[
    "output_dir",
    "gen.vocab_size",
    "gen.min_len",
    "gen.max_len",
    "gen.rule",
    "gen.window",
    "gen.distance",
    "gen.block",
    "gen.rule_prob",
    "gen.seed",
    "gen.train_size",
    "gen.valid_size",
    "gen.test_size",
    "model.embed_dim",
    "model.ffn_dim",
    "model.heads",
    "model.layers",
    "model.dropout",
    "model.delay_k",
    "model.upsample_ratio",
    "asn.decoder_layers",
    "asn.sinkhorn_iters",
    "asn.temperature",
    "asn.noise_factor",
    "asn.context_mask_ratio",
    "asn.normalization",
    "train.max_lr",
    "train.warmup_steps",
    "train.max_steps",
    "train.patience_steps",
    "train.accumulate_batches",
    "train.label_smoothing",
    "train.seed",
    "train.max_tokens",
    "train.eval_every",
    "train.valid_limit",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.phase",
    "train.ablation",
];

/// Desk-scale defaults used for keys the file leaves out.
pub fn default_train() -> TrainConfig {
    TrainConfig {
        max_tokens: 512,
        warmup_steps: 1000,
        max_lr: 1e-3,
        ..TrainConfig::desk_scale()
    }
}

struct Raw {
    line: usize,
    key: String,
    value: String,
}

impl Raw {
    fn parse<T: FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse::<T>().map_err(|e| self.err(e.to_string()))
    }

    fn err(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.clone(),
            value: self.value.clone(),
            msg: msg.into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (k.trim().to_string(), v.trim().to_string());
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if !seen.insert(key.clone()) {
                return Err(ConfigError::Duplicate { line, key });
            }
            entries.push(Raw { line, key, value });
        }

        let mut output_dir = PathBuf::from("runs");
        let mut gen = GenConfig::new(ReorderRule::Monotonic, 1);
        let mut rule_name: Option<&Raw> = None;
        let (mut window, mut distance, mut block) = (3usize, 5usize, 2usize);
        let mut splits = SplitSizes {
            train: 20_000,
            valid: 500,
            test: 500,
        };
        let mut model = ModelConfig::desk_scale(0);
        let mut asn = AsnConfig::default();
        let mut train = default_train();

        for e in &entries {
            match e.key.as_str() {
                "output_dir" => output_dir = PathBuf::from(&e.value),
                "gen.vocab_size" => gen.vocab_size = e.parse()?,
                "gen.min_len" => gen.min_len = e.parse()?,
                "gen.max_len" => gen.max_len = e.parse()?,
                "gen.rule" => rule_name = Some(e),
                "gen.window" => window = e.parse()?,
                "gen.distance" => distance = e.parse()?,
                "gen.block" => block = e.parse()?,
                "gen.rule_prob" => gen.rule_prob = e.parse()?,
                "gen.seed" => gen.seed = e.parse()?,
                "gen.train_size" => splits.train = e.parse()?,
                "gen.valid_size" => splits.valid = e.parse()?,
                "gen.test_size" => splits.test = e.parse()?,
                "model.embed_dim" => model.embed_dim = e.parse()?,
                "model.ffn_dim" => model.ffn_dim = e.parse()?,
                "model.heads" => model.heads = e.parse()?,
                "model.layers" => model.layers = e.parse()?,
                "model.dropout" => model.dropout = e.parse()?,
                "model.delay_k" => model.delay_k = e.parse()?,
                "model.upsample_ratio" => model.upsample_ratio = e.parse()?,
                "asn.decoder_layers" => asn.decoder_layers = e.parse()?,
                "asn.sinkhorn_iters" => asn.sinkhorn_iters = e.parse()?,
                "asn.temperature" => asn.temperature = e.parse()?,
                "asn.noise_factor" => asn.noise_factor = e.parse()?,
                "asn.context_mask_ratio" => asn.context_mask_ratio = e.parse()?,
                "asn.normalization" => {
                    asn.normalization = match e.value.as_str() {
                        "sinkhorn" => Normalization::Sinkhorn,
                        "softmax" => Normalization::Softmax,
                        _ => return Err(e.err("expected `sinkhorn` or `softmax`")),
                    }
                }
                "train.max_lr" => train.max_lr = e.parse()?,
                "train.warmup_steps" => train.warmup_steps = e.parse()?,
                "train.max_steps" => train.max_steps = e.parse()?,
                "train.patience_steps" => train.patience_steps = e.parse()?,
                "train.accumulate_batches" => train.accumulate_batches = e.parse()?,
                "train.label_smoothing" => train.label_smoothing = e.parse()?,
                "train.seed" => train.seed = e.parse()?,
                "train.max_tokens" => train.max_tokens = e.parse()?,
                "train.eval_every" => train.eval_every = e.parse()?,
                "train.valid_limit" => train.valid_limit = e.parse()?,
                "train.beta1" => train.beta1 = e.parse()?,
                "train.beta2" => train.beta2 = e.parse()?,
                "train.adam_eps" => train.adam_eps = e.parse()?,
                "train.phase" => {
                    train.phase = Phase::parse(&e.value).map_err(|x| e.err(x.to_string()))?
                }
                "train.ablation" => {
                    train.ablation = Ablation::parse(&e.value).map_err(|x| e.err(x.to_string()))?
                }
                _ => unreachable!("key list checked above"),
            }
        }
        if let Some(e) = rule_name {
            gen.rule = match e.value.as_str() {
                "monotonic" => ReorderRule::Monotonic,
                "local_swap" => ReorderRule::LocalSwap { window },
                "block_move" => ReorderRule::BlockMove { distance, block },
                _ => return Err(e.err("expected `monotonic`, `local_swap` or `block_move`")),
            };
        }
        let invalid = |e: sortsimul_core::Error| ConfigError::Invalid(e.to_string());
        gen.validate().map_err(invalid)?;
        model.vocab_size = gen.model_vocab();
        model.validate().map_err(invalid)?;
        asn.validate().map_err(invalid)?;
        train.validate().map_err(invalid)?;
        if splits.train == 0 {
            return Err(ConfigError::Invalid(
                "gen.train_size must be positive".into(),
            ));
        }
        Ok(Self {
            output_dir,
            gen,
            splits,
            model,
            asn,
            train,
            text: text.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse(
            "# comment\noutput_dir = out\ngen.rule = block_move\ngen.distance = 4 # inline\nmodel.layers = 3\n",
        )
        .unwrap();
        assert_eq!(
            c.gen.rule,
            ReorderRule::BlockMove {
                distance: 4,
                block: 2
            }
        );
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.model.vocab_size, c.gen.model_vocab());
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            RunConfig::parse("model.depth = 3"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("gen.seed = 1\ngen.seed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("gen.seed"),
            Err(ConfigError::Syntax { line: 1 })
        ));
    }

    #[test]
    fn bad_rule_names_the_key() {
        let err = RunConfig::parse("gen.rule = shuffle").unwrap_err();
        assert!(err.to_string().contains("gen.rule"), "{err}");
    }

    #[test]
    fn invariants_checked_at_parse_time() {
        assert!(RunConfig::parse("model.heads = 3").is_err());
        assert!(RunConfig::parse("gen.rule = block_move\ngen.min_len = 6").is_err());
        assert!(RunConfig::parse("asn.temperature = 0").is_err());
        assert!(RunConfig::parse("train.max_steps = x").is_err());
    }
}
