//! Run configuration: a flat `section.key = value` namespace with a
//! default for every key, named presets, config-file loading, and typed
//! extraction into the per-module config structs.
//!
//! Precedence, lowest to highest: defaults, preset, config file,
//! individual overrides.

use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::lm::{LmConfig, PositionEncoding};
use crate::model::{PeftSpec, PromptMode};
use crate::peft::{LoraConfig, PrefixConfig};
use crate::scalar::Precision;
use crate::synth::{SynthConfig, TaskRule};
use crate::train::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::defaults()
    }
}

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("precision", "f32"),
    ("lm.d_model", "64"),
    ("lm.n_layers", "4"),
    ("lm.n_heads", "4"),
    ("lm.max_seq", "64"),
    ("lm.vocab", "258"),
    ("gnn.d_gnn", "32"),
    ("gnn.k_layers", "2"),
    ("gnn.n_rel", "2"),
    ("peft.rank", "4"),
    ("peft.alpha", "4"),
    ("peft.n_prefix", "1"),
    ("train.prompt_mode", "prepend"),
    ("train.epochs", "4"),
    ("train.pretrain_batch", "8"),
    ("train.finetune_batch", "4"),
    ("train.pretrain_lr", "0.001"),
    ("train.finetune_lr", "0.0001"),
    ("train.warmup_epochs", "1"),
    ("train.max_grad_norm", "1"),
    ("train.margin", "0.5"),
    ("train.fanouts", "5,5"),
    ("train.skip_pretrain", "false"),
    ("train.fixed_negatives", "false"),
    ("train.predict_first_from_prompt", "false"),
    ("train.grl_in_pretrain", "false"),
    ("train.val_max_edges", "100"),
    ("train.val_n_neg", "100"),
    ("synth.n_nodes", "100"),
    ("synth.n_topics", "10"),
    ("synth.tokens_per_node", "24"),
    ("synth.p_noise", "0.9"),
    ("synth.density", "0.7"),
    ("synth.task_rule", "shared_neighbors:2"),
    ("synth.d_feat", "32"),
    ("split.task_type", "task"),
    ("split.n_train", "150"),
    ("split.n_val", "50"),
    ("eval.n_neg", "100"),
];

pub const PRESETS: &[&str] = &["desk-small", "desk-medium", "paper-llama"];

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig { map: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.map.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    /// `key=value` lines; blank lines and `#` comments are skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let content = std::fs::read_to_string(path)?;
        for (ln, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let entries: &[(&str, &str)] = match name {
            // CI scale: a pipeline run in well under two minutes.
            "desk-small" => &[
                ("synth.n_nodes", "100"),
                ("synth.n_topics", "10"),
                ("synth.tokens_per_node", "24"),
                ("synth.density", "0.7"),
                ("split.n_train", "150"),
                ("split.n_val", "50"),
                ("train.val_max_edges", "50"),
            ],
            // Acceptance scale: the structure-vs-text experiment.
            "desk-medium" => &[
                ("synth.n_nodes", "500"),
                ("synth.n_topics", "20"),
                ("synth.tokens_per_node", "32"),
                ("synth.density", "0.5"),
                ("split.n_train", "800"),
                ("split.n_val", "200"),
                ("train.val_max_edges", "100"),
            ],
            // Paper-scale dimensions, for parameter counting only.
            "paper-llama" => &[
                ("lm.d_model", "4096"),
                ("lm.n_layers", "32"),
                ("lm.n_heads", "32"),
                ("gnn.d_gnn", "768"),
                ("gnn.k_layers", "2"),
                ("gnn.n_rel", "2"),
                ("peft.rank", "16"),
                ("peft.alpha", "16"),
            ],
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?} (have: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        for (k, v) in entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// The effective configuration, one key per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    // ── typed getters ────────────────────────────────────────────

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {:?}", self.get(key))))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            v => Err(Error::Config(format!("bad boolean for {key}: {v:?}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::parse(self.get("precision"))
            .ok_or_else(|| Error::Config(format!("bad precision {:?}", self.get("precision"))))
    }

    pub fn lm_config(&self) -> Result<LmConfig> {
        let cfg = LmConfig {
            vocab_size: self.parse("lm.vocab")?,
            d_model: self.parse("lm.d_model")?,
            n_layers: self.parse("lm.n_layers")?,
            n_heads: self.parse("lm.n_heads")?,
            max_seq: self.parse("lm.max_seq")?,
            pos_encoding: PositionEncoding::LearnedAbsolute,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// d_feat and n_rel default from the config but follow the graph when
    /// one is present.
    pub fn gnn_config(&self, d_feat: Option<usize>, n_rel: Option<usize>) -> Result<GnnConfig> {
        let cfg = GnnConfig {
            d_gnn: self.parse("gnn.d_gnn")?,
            k_layers: self.parse("gnn.k_layers")?,
            n_rel: match n_rel {
                Some(n) => n,
                None => self.parse("gnn.n_rel")?,
            },
            d_feat: match d_feat {
                Some(d) => d,
                None => self.parse("synth.d_feat")?,
            },
            d_model: self.parse("lm.d_model")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn peft_spec(&self) -> Result<PeftSpec> {
        Ok(match self.prompt_mode()? {
            PromptMode::Prefix => {
                PeftSpec::Prefix(PrefixConfig { n_prefix: self.parse("peft.n_prefix")? })
            }
            _ => PeftSpec::Lora(LoraConfig {
                rank: self.parse("peft.rank")?,
                alpha: self.parse("peft.alpha")?,
            }),
        })
    }

    pub fn prompt_mode(&self) -> Result<PromptMode> {
        PromptMode::parse(self.get("train.prompt_mode"))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let fanouts: Vec<usize> = self
            .get("train.fanouts")
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad fanout {t:?}")))
            })
            .collect::<Result<_>>()?;
        let cfg = TrainConfig {
            epochs: self.parse("train.epochs")?,
            pretrain_batch: self.parse("train.pretrain_batch")?,
            finetune_batch: self.parse("train.finetune_batch")?,
            pretrain_lr: self.parse("train.pretrain_lr")?,
            finetune_lr: self.parse("train.finetune_lr")?,
            warmup_epochs: self.parse("train.warmup_epochs")?,
            max_grad_norm: self.parse("train.max_grad_norm")?,
            margin: self.parse("train.margin")?,
            fanouts,
            prompt_mode: self.prompt_mode()?,
            skip_pretrain: self.parse_bool("train.skip_pretrain")?,
            fixed_negatives: self.parse_bool("train.fixed_negatives")?,
            predict_first_from_prompt: self.parse_bool("train.predict_first_from_prompt")?,
            grl_in_pretrain: self.parse_bool("train.grl_in_pretrain")?,
            val_max_edges: self.parse("train.val_max_edges")?,
            val_n_neg: self.parse("train.val_n_neg")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            n_nodes: self.parse("synth.n_nodes")?,
            n_topics: self.parse("synth.n_topics")?,
            tokens_per_node: self.parse("synth.tokens_per_node")?,
            p_noise: self.parse("synth.p_noise")?,
            density: self.parse("synth.density")?,
            task_rule: TaskRule::parse(self.get("synth.task_rule"))?,
            d_feat: self.parse("synth.d_feat")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_sizes(&self) -> Result<(String, usize, usize)> {
        Ok((
            self.get("split.task_type").to_string(),
            self.parse("split.n_train")?,
            self.parse("split.n_val")?,
        ))
    }

    pub fn eval_n_neg(&self) -> Result<usize> {
        self.parse("eval.n_neg")
    }
}
