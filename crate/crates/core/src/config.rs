//! Run configuration and its text format.
//!
//! The native format is sectioned `key = value` lines:
//!
//! ```text
//! # comment
//! [model]
//! d_model = 64
//! pooling = mean
//!
//! [train]
//! strategy = grl
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique per
//! section; every key is optional and falls back to its default. List
//! values are comma separated. A file whose first non-blank character is
//! `{` is read as JSON with the same structure instead.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SyntheticOptions};
use crate::error::{Error, Result};
use crate::eval::parse_metrics;
use crate::losses::LossWeights;
use crate::model::{LoraConfig, LoraTarget, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_docs: usize,
    pub n_keys: usize,
    pub n_negatives: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_eval: 100,
            n_docs: 500,
            n_keys: 1000,
            n_negatives: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn options(&self) -> SyntheticOptions {
        SyntheticOptions {
            n_docs: self.n_docs,
            n_negatives: self.n_negatives,
            ..SyntheticOptions::new(self.seed, self.n_train, self.n_eval, self.n_keys)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines training file. When absent the synthetic task is used.
    pub train: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Corpus directory evaluated after training, if any.
    pub corpus: Option<PathBuf>,
    pub metrics: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            metrics: "ndcg@10,map".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `None` trains every parameter.
    pub lora: Option<LoraConfig>,
    pub lora_seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lora: Some(LoraConfig::default()),
            lora_seed: 0,
            train: TrainConfig {
                batch_size: 32,
                micro_batch_size: 32,
                ..Default::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one `section.key` to a textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key;
        match key {
            "model.vocab_size" => self.model.vocab_size = parse(k, v)?,
            "model.d_model" => self.model.d_model = parse(k, v)?,
            "model.n_layers" => self.model.n_layers = parse(k, v)?,
            "model.n_heads" => self.model.n_heads = parse(k, v)?,
            "model.d_ff" => self.model.d_ff = parse(k, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(k, v)?,
            "model.pooling" => self.model.pooling = parse(k, v)?,
            "model.embed_attention" => self.model.embed_attention = parse(k, v)?,
            "model.seed" => self.model.seed = parse(k, v)?,
            "lora.enabled" => {
                let on = parse_bool(k, v)?;
                match (on, &self.lora) {
                    (true, None) => self.lora = Some(LoraConfig::default()),
                    (false, _) => self.lora = None,
                    _ => {}
                }
            }
            "lora.seed" => self.lora_seed = parse(k, v)?,
            "lora.r" | "lora.alpha" | "lora.dropout" | "lora.targets" => {
                let lora = self
                    .lora
                    .as_mut()
                    .ok_or_else(|| Error::config(k, "LoRA is disabled (lora.enabled = false)"))?;
                match k {
                    "lora.r" => lora.r = parse(k, v)?,
                    "lora.alpha" => lora.alpha = parse(k, v)?,
                    "lora.dropout" => lora.dropout = parse(k, v)?,
                    _ => {
                        lora.targets = v
                            .split(',')
                            .map(|t| parse::<LoraTarget>(k, t.trim()))
                            .collect::<Result<_>>()?
                    }
                }
            }
            "train.strategy" => self.train.strategy = parse(k, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.micro_batch_size" => self.train.micro_batch_size = parse(k, v)?,
            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "train.beta1" => self.train.beta1 = parse(k, v)?,
            "train.beta2" => self.train.beta2 = parse(k, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(k, v)?,
            "train.max_grad_norm" => self.train.max_grad_norm = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "loss.lambda_cl" => self.train.weights.lambda_cl = parse(k, v)?,
            "loss.lambda_dpo" => self.train.weights.lambda_dpo = parse(k, v)?,
            "loss.lambda_kl" => self.train.weights.lambda_kl = parse(k, v)?,
            "loss.lambda_sft" => self.train.weights.lambda_sft = parse(k, v)?,
            "loss.tau" => self.train.weights.tau = parse(k, v)?,
            "loss.kl_tau" => self.train.weights.kl_tau = parse(k, v)?,
            "loss.beta" => self.train.weights.beta = parse(k, v)?,
            "loss.cross_negatives" => self.train.weights.cross_negatives = parse_bool(k, v)?,
            "loss.stop_gen_grad" => self.train.weights.stop_gen_grad = parse_bool(k, v)?,
            "data.train" => self.data.train = opt_path(v),
            "data.synthetic_seed" => self.data.synthetic.seed = parse(k, v)?,
            "data.synthetic_train" => self.data.synthetic.n_train = parse(k, v)?,
            "data.synthetic_eval" => self.data.synthetic.n_eval = parse(k, v)?,
            "data.synthetic_docs" => self.data.synthetic.n_docs = parse(k, v)?,
            "data.synthetic_keys" => self.data.synthetic.n_keys = parse(k, v)?,
            "data.synthetic_negatives" => self.data.synthetic.n_negatives = parse(k, v)?,
            "eval.corpus" => self.eval.corpus = opt_path(v),
            "eval.metrics" => self.eval.metrics = v.to_string(),
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Parses the sectioned text format on top of the defaults.
    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            if section.is_empty() {
                return Err(err("key outside of any [section]".into()));
            }
            let key = format!("{section}.{}", k.trim());
            if !seen.insert(key.clone()) {
                return Err(Error::config(key, format!("set twice (line {})", i + 1)));
            }
            cfg.set(&key, v)?;
        }
        Ok(cfg)
    }

    /// Reads a config file in either format. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                reason: e.to_string(),
            })?
        } else {
            Self::from_kv(&text, path)?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.train.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.eval.corpus.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Checks every field, and that referenced inputs exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(l) = &self.lora {
            l.validate(&self.model)?;
        }
        self.train.validate()?;
        if let Some(p) = &self.data.train {
            if !p.is_file() {
                return Err(Error::config("data.train", format!("{} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.eval.corpus {
            if !p.is_dir() {
                return Err(Error::config("eval.corpus", format!("{} is not a directory", p.display())));
            }
        }
        parse_metrics(&self.eval.metrics).map_err(|e| Error::config("eval.metrics", e))?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        Ok(())
    }

    /// Every key with its current value, in the sectioned text format.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let w: &LossWeights = &t.weights;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "d_model = {}", m.d_model);
        let _ = writeln!(s, "n_layers = {}", m.n_layers);
        let _ = writeln!(s, "n_heads = {}", m.n_heads);
        let _ = writeln!(s, "d_ff = {}", m.d_ff);
        let _ = writeln!(s, "max_seq_len = {}", m.max_seq_len);
        let _ = writeln!(s, "pooling = {}", m.pooling);
        let _ = writeln!(s, "embed_attention = {}", m.embed_attention);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "\n[lora]");
        let _ = writeln!(s, "enabled = {}", self.lora.is_some());
        let _ = writeln!(s, "seed = {}", self.lora_seed);
        if let Some(l) = &self.lora {
            let targets: Vec<String> = l.targets.iter().map(ToString::to_string).collect();
            let _ = writeln!(s, "r = {}", l.r);
            let _ = writeln!(s, "alpha = {:?}", l.alpha);
            let _ = writeln!(s, "dropout = {:?}", l.dropout);
            let _ = writeln!(s, "targets = {}", targets.join(","));
        }
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "strategy = {}", t.strategy);
        let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "micro_batch_size = {}", t.micro_batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "beta1 = {:?}", t.beta1);
        let _ = writeln!(s, "beta2 = {:?}", t.beta2);
        let _ = writeln!(s, "adam_eps = {:?}", t.adam_eps);
        let _ = writeln!(s, "max_grad_norm = {:?}", t.max_grad_norm);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "lambda_cl = {:?}", w.lambda_cl);
        let _ = writeln!(s, "lambda_dpo = {:?}", w.lambda_dpo);
        let _ = writeln!(s, "lambda_kl = {:?}", w.lambda_kl);
        let _ = writeln!(s, "lambda_sft = {:?}", w.lambda_sft);
        let _ = writeln!(s, "tau = {:?}", w.tau);
        let _ = writeln!(s, "kl_tau = {:?}", w.kl_tau);
        let _ = writeln!(s, "beta = {:?}", w.beta);
        let _ = writeln!(s, "cross_negatives = {}", w.cross_negatives);
        let _ = writeln!(s, "stop_gen_grad = {}", w.stop_gen_grad);
        let syn = &self.data.synthetic;
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train = {}", path(&self.data.train));
        let _ = writeln!(s, "synthetic_seed = {}", syn.seed);
        let _ = writeln!(s, "synthetic_train = {}", syn.n_train);
        let _ = writeln!(s, "synthetic_eval = {}", syn.n_eval);
        let _ = writeln!(s, "synthetic_docs = {}", syn.n_docs);
        let _ = writeln!(s, "synthetic_keys = {}", syn.n_keys);
        let _ = writeln!(s, "synthetic_negatives = {}", syn.n_negatives);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "corpus = {}", path(&self.eval.corpus));
        let _ = writeln!(s, "metrics = {}", self.eval.metrics);
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output_dir.display());
        s
    }

    /// Loads the eval corpus named by the config, if any.
    pub fn eval_corpus(&self) -> Result<Option<Corpus>> {
        self.eval.corpus.as_deref().map(Corpus::load).transpose()
    }
}
