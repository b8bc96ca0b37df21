//! Flat `key = value` configuration for the toy model and its training run.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    pub no_analyzing_gate: bool,
    pub no_writing_gate: bool,
    pub no_history: bool,
    pub no_persona: bool,
}

impl Ablations {
    pub const FLAGS: [&'static str; 4] = ["no_analyzing_gate", "no_writing_gate", "no_history", "no_persona"];

    /// Parses a comma-separated flag list; unknown flags are config errors.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for flag in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            a.set(flag)?;
        }
        Ok(a)
    }

    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_analyzing_gate" => self.no_analyzing_gate = true,
            "no_writing_gate" => self.no_writing_gate = true,
            "no_history" => self.no_history = true,
            "no_persona" => self.no_persona = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag {other:?}; expected one of {}",
                    Self::FLAGS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let on = [self.no_analyzing_gate, self.no_writing_gate, self.no_history, self.no_persona];
        Self::FLAGS.iter().zip(on).filter(|(_, o)| *o).map(|(f, _)| *f).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.flags().is_empty()
    }
}

/// Model shape, optimizer and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub gate_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub steps: usize,
    pub freeze_base: bool,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub ablations: Ablations,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: super::prompt::BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 512,
            n_experts: 3,
            rank: 8,
            alpha: crate::pac_lora::DEFAULT_ALPHA,
            gate_hidden: crate::pac_lora::DEFAULT_GATE_HIDDEN,
            dropout: 0.1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 1,
            grad_accum: 16,
            steps: 200,
            freeze_base: false,
            top_k: crate::retrieval::DEFAULT_TOP_K,
            max_new_tokens: 48,
            ablations: Ablations::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl ToyModelConfig {
    /// Full-scale profile: the optimizer values used for 7B-parameter
    /// fine-tuning, kept for reference.
    pub fn full_scale_profile() -> Self {
        ToyModelConfig {
            learning_rate: 2e-5,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn sequences_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model, n_layers and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2".into());
        }
        if self.n_experts == 0 || self.gate_hidden == 0 {
            return bad("n_experts and gate_hidden must be positive".into());
        }
        if self.rank == 0 || 2 * self.rank > self.d_model {
            return bad(format!("rank {} outside 1..={}", self.rank, self.d_model / 2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.alpha.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("alpha must be positive; learning_rate and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.top_k == 0 {
            return bad("batch_size, grad_accum and top_k must be positive".into());
        }
        Ok(())
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_layers" => self.n_layers = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "context_len" => self.context_len = parse_num(key, v)?,
            "n_experts" => self.n_experts = parse_num(key, v)?,
            "rank" => self.rank = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "gate_hidden" => self.gate_hidden = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "grad_accum" => self.grad_accum = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "freeze_base" => self.freeze_base = parse_bool(key, v)?,
            "top_k" => self.top_k = parse_num(key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse_num(key, v)?,
            "ablate" => self.ablations = Ablations::parse(v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(src: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in src.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("vocab_size", self.vocab_size.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("context_len", self.context_len.to_string());
        kv("n_experts", self.n_experts.to_string());
        kv("rank", self.rank.to_string());
        kv("alpha", format!("{:?}", self.alpha));
        kv("gate_hidden", self.gate_hidden.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("batch_size", self.batch_size.to_string());
        kv("grad_accum", self.grad_accum.to_string());
        kv("steps", self.steps.to_string());
        kv("freeze_base", self.freeze_base.to_string());
        kv("top_k", self.top_k.to_string());
        kv("max_new_tokens", self.max_new_tokens.to_string());
        kv("ablate", self.ablations.flags().join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ToyModelConfig::default();
        c.validate().unwrap();
        assert_eq!(ToyModelConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.scale(), 2.0);
        assert_eq!(ToyModelConfig::full_scale_profile().learning_rate, 2e-5);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ToyModelConfig::parse("# toy\nd_model = 32\nn_heads=2 # inline\nablate = no_history,no_persona\n").unwrap();
        assert_eq!((c.d_model, c.n_heads), (32, 2));
        assert!(c.ablations.no_history && c.ablations.no_persona && !c.ablations.no_writing_gate);
    }

    #[test]
    fn invariant_violations() {
        assert!(ToyModelConfig::parse("d_model = 30\nn_heads = 4").is_err());
        assert!(ToyModelConfig::parse("dropout = 1.0").is_err());
        assert!(ToyModelConfig::parse("rank = 40").is_err());
        assert!(ToyModelConfig::parse("colour = red").is_err());
        assert!(ToyModelConfig::parse("d_model").is_err());
    }

    #[test]
    fn ablation_flags() {
        assert!(Ablations::parse("").unwrap().is_empty());
        let a = Ablations::parse("no_writing_gate").unwrap();
        assert_eq!(a.flags(), vec!["no_writing_gate"]);
        assert!(matches!(Ablations::parse("no_gates"), Err(Error::Config(_))));
    }
}
