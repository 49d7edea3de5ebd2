//! Run configuration: one struct holding every tunable, two named presets,
//! and flat dotted-key overrides (flags override file, file overrides
//! preset). Artifacts embed the resolved config hash for reproducibility.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::text::corpus::{LengthCaps, SyntheticConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub retriever: RetrieverConfig,
    pub index: IndexParams,
    pub train: TrainConfig,
    pub decode: DecodeDefaults,
    pub eval: EvalConfig,
    pub synth: SyntheticConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub max_context: usize,
    pub max_target: usize,
    pub doc_cap: usize,
    pub min_freq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub doc_pos_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrieverConfig {
    pub dim: usize,
    pub emb_dim: usize,
    
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexParams {
    pub tables: usize,
    pub bits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub refresh_every: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_retriever: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub warm_start_steps: u64,
    pub control_variate: String,
    pub estimator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeDefaults {
    pub k: usize,
    pub mode: String,
    pub sample_topk: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub correction: bool,
    pub mmi_num_hypotheses: usize,
    pub mmi_sample_topk: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub stopword_top_percent: f64,
    pub bleu_max_order: usize,
}

impl RunConfig {
    /// Desk-scale defaults: everything sized to train on one CPU in minutes.
    pub fn tiny() -> Self {
        RunConfig {
            preset: "tiny".into(),
            seed: 0,
            threads: 1,
            data: DataConfig { max_context: 64, max_target: 32, doc_cap: 32, min_freq: 1 },
            model: ModelConfig { layers: 2, heads: 2, dim: 32, ff_dim: 64, doc_pos_offset: 64 },
            retriever: RetrieverConfig { dim: 32, emb_dim: 32 },
            index: IndexParams { tables: 16, bits: 8 },
            train: TrainConfig {
                k: 4,
                refresh_every: 200,
                batch_size: 8,
                lr_generator: 1e-3,
                lr_retriever: 1e-4,
                max_steps: 2000,
                eval_every: 100,
                warm_start_steps: 60,
                control_variate: "expected_reward".into(),
                estimator: "autodiff".into(),
            },
            decode: DecodeDefaults {
                k: 4,
                mode: "greedy".into(),
                sample_topk: 10,
                temperature: 1.0,
                max_len: 16,
                correction: true,
                mmi_num_hypotheses: 16,
                mmi_sample_topk: 10,
            },
            eval: EvalConfig { stopword_top_percent: 1.0, bleu_max_order: 4 },
            synth: SyntheticConfig::default(),
        }
    }

    /// The reference hyperparameters at publication scale. Documentation
    /// preset: validates, but is far beyond desk-scale runtime.
    pub fn paper_faithful() -> Self {
        let mut c = RunConfig::tiny();
        c.preset = "paper-faithful".into();
        c.data = DataConfig { max_context: 256, max_target: 128, doc_cap: 100, min_freq: 1 };
        c.model = ModelConfig { layers: 24, heads: 16, dim: 1024, ff_dim: 4096, doc_pos_offset: 400 };
        c.retriever = RetrieverConfig { dim: 768, emb_dim: 768 };
        c.train.batch_size = 128;
        c.train.lr_generator = 1e-6;
        c.train.lr_retriever = 1e-6;
        c.train.k = 4;
        c.train.refresh_every = 200;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(RunConfig::tiny()),
            "paper-faithful" => Ok(RunConfig::paper_faithful()),
            other => Err(CoreError::Config(format!(
                "unknown preset `{other}` (expected `tiny` or `paper-faithful`)"
            ))),
        }
    }

    pub fn caps(&self) -> LengthCaps {
        LengthCaps {
            max_context: self.data.max_context,
            max_target: self.data.max_target,
            doc_cap: self.data.doc_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.train.k < 1 {
            problems.push("train.k must be >= 1".to_string());
        }
        if self.train.refresh_every < 1 {
            problems.push("train.refresh_every must be >= 1".to_string());
        }
        if self.train.batch_size < 1 {
            problems.push("train.batch_size must be >= 1".to_string());
        }
        if self.index.tables < 1 || self.index.bits < 1 {
            problems.push("index.tables and index.bits must be >= 1".to_string());
        }
        if self.index.bits > 63 {
            problems.push("index.bits must be <= 63".to_string());
        }
        if self.model.heads == 0 || self.model.dim % self.model.heads != 0 {
            problems.push("model.dim must be divisible by model.heads".to_string());
        }
        if self.decode.mmi_num_hypotheses < 1 {
            problems.push("decode.mmi_num_hypotheses must be >= 1".to_string());
        }
        if !matches!(self.train.control_variate.as_str(), "expected_reward" | "zero") {
            problems.push(format!(
                "train.control_variate must be expected_reward or zero, got `{}`",
                self.train.control_variate
            ));
        }
        if !matches!(self.train.estimator.as_str(), "autodiff" | "actor_critic") {
            problems.push(format!(
                "train.estimator must be autodiff or actor_critic, got `{}`",
                self.train.estimator
            ));
        }
        if !matches!(self.decode.mode.as_str(), "greedy" | "topk") {
            problems.push(format!("decode.mode must be greedy or topk, got `{}`", self.decode.mode));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems.join("; ")))
        }
    }

    /// Apply one flat dotted-key override, e.g. `("train.k", 8)`.
    pub fn set_key(&mut self, key: &str, value: &serde_json::Value) -> Result<()> {
        let as_u64 = || -> Result<u64> {
            value.as_u64().ok_or_else(|| CoreError::Config(format!("`{key}` expects an integer")))
        };
        let as_usize = || -> Result<usize> { Ok(as_u64()? as usize) };
        let as_f64 = || -> Result<f64> {
            value.as_f64().ok_or_else(|| CoreError::Config(format!("`{key}` expects a number")))
        };
        let as_str = || -> Result<String> {
            value
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| CoreError::Config(format!("`{key}` expects a string")))
        };
        let as_bool = || -> Result<bool> {
            value.as_bool().ok_or_else(|| CoreError::Config(format!("`{key}` expects a bool")))
        };
        match key {
            "seed" => self.seed = as_u64()?,
            "threads" => self.threads = as_usize()?,
            "data.max_context" => self.data.max_context = as_usize()?,
            "data.max_target" => self.data.max_target = as_usize()?,
            "data.doc_cap" => self.data.doc_cap = as_usize()?,
            "data.min_freq" => self.data.min_freq = as_u64()?,
            "model.layers" => self.model.layers = as_usize()?,
            "model.heads" => self.model.heads = as_usize()?,
            "model.dim" => self.model.dim = as_usize()?,
            "model.ff_dim" => self.model.ff_dim = as_usize()?,
            "model.doc_pos_offset" => self.model.doc_pos_offset = as_usize()?,
            "retriever.dim" => self.retriever.dim = as_usize()?,
            "retriever.emb_dim" => self.retriever.emb_dim = as_usize()?,
            
            "index.tables" => self.index.tables = as_usize()?,
            "index.bits" => self.index.bits = as_usize()?,
            "train.k" => self.train.k = as_usize()?,
            "train.refresh_every" => self.train.refresh_every = as_u64()?,
            "train.batch_size" => self.train.batch_size = as_usize()?,
            "train.lr_generator" => self.train.lr_generator = as_f64()?,
            "train.lr_retriever" => self.train.lr_retriever = as_f64()?,
            "train.max_steps" => self.train.max_steps = as_u64()?,
            "train.eval_every" => self.train.eval_every = as_u64()?,
            "train.warm_start_steps" => self.train.warm_start_steps = as_u64()?,
            "train.control_variate" => self.train.control_variate = as_str()?,
            "train.estimator" => self.train.estimator = as_str()?,
            "decode.k" => self.decode.k = as_usize()?,
            "decode.mode" => self.decode.mode = as_str()?,
            "decode.sample_topk" => self.decode.sample_topk = as_usize()?,
            "decode.temperature" => self.decode.temperature = as_f64()?,
            "decode.max_len" => self.decode.max_len = as_usize()?,
            "decode.correction" => self.decode.correction = as_bool()?,
            "decode.mmi_num_hypotheses" => self.decode.mmi_num_hypotheses = as_usize()?,
            "decode.mmi_sample_topk" => self.decode.mmi_sample_topk = as_usize()?,
            "eval.stopword_top_percent" => self.eval.stopword_top_percent = as_f64()?,
            "eval.bleu_max_order" => self.eval.bleu_max_order = as_usize()?,
            "synth.n_docs" => self.synth.n_docs = as_usize()?,
            "synth.vocab_size" => self.synth.vocab_size = as_usize()?,
            "synth.key_len" => self.synth.key_len = as_usize()?,
            "synth.fact_len" => self.synth.fact_len = as_usize()?,
            "synth.n_examples" => self.synth.n_examples = as_usize()?,
            "synth.distractor_len" => self.synth.distractor_len = as_usize()?,
            other => return Err(CoreError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Load a flat-key JSON config file over a preset base. The file may
    /// select its own base via a "preset" key.
    pub fn from_flat_file(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&raw)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let preset = map
            .get("preset")
            .and_then(|v| v.as_str())
            .unwrap_or("tiny")
            .to_string();
        let mut config = RunConfig::preset(&preset)?;
        let mut keys: Vec<&String> = map.keys().filter(|k| k.as_str() != "preset").collect();
        keys.sort();
        for key in keys {
            config.set_key(key, &map[key])?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Short hex digest of the canonical JSON rendering; embedded in every
    /// artifact header.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = canonical_json(&value);
        let digest = Sha256::digest(canonical.as_bytes());
        hex_prefix(&digest, 16)
    }

    pub fn artifact_header(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "preset": self.preset,
        })
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// JSON with recursively sorted object keys, for stable hashing.
pub fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let inner: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}
