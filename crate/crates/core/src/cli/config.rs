//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decode::{DecodeConfig, ProvisionalPolicy};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::ModelConfig;
use crate::noise::{LossWeights, NoiseSchedule, ScheduleKind, DEFAULT_EXPONENT};
use crate::toydata::{self, SyntheticSpec, DEFAULT_MIX_WEIGHT};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mix_weight: f64,
    pub data_seed: u64,
    pub train_count: usize,
    pub heldout_count: usize,
    /// Directory holding `train.tsv` / `heldout.tsv`; empty means generate
    /// the splits in memory from the spec.
    pub data_dir: String,

    pub k: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_q: usize,

    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub shard_size: usize,
    pub eval_every: usize,
    pub eval_count: usize,
    pub checkpoint_every: usize,

    pub schedule: ScheduleKind,
    pub exponent: f64,
    /// Empty means uniform weights.
    pub loss_weights: Vec<f64>,

    pub temperature: f64,
    /// Zero disables truncation.
    pub top_k: usize,
    pub greedy: bool,
    pub provisional_policy: ProvisionalPolicy,
    pub num_samples: usize,

    pub samples_per_class: usize,

    pub bench_k_values: Vec<usize>,
    pub bench_batch: usize,
    pub bench_repetitions: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run_name: "default".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            vocab_size: 16,
            height: 8,
            width: 8,
            num_classes: 4,
            mix_weight: DEFAULT_MIX_WEIGHT,
            data_seed: 1,
            train_count: 10_000,
            heldout_count: 1000,
            data_dir: String::new(),
            k: 4,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_q: 1,
            batch_size: 32,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            grad_clip_norm: 1.0,
            shard_size: 32,
            eval_every: 250,
            eval_count: 200,
            checkpoint_every: 500,
            schedule: ScheduleKind::Exponential,
            exponent: DEFAULT_EXPONENT,
            loss_weights: Vec::new(),
            temperature: 1.0,
            top_k: 0,
            greedy: false,
            provisional_policy: ProvisionalPolicy::Sample,
            num_samples: 16,
            samples_per_class: 1000,
            bench_k_values: vec![1, 2, 4, 8],
            bench_batch: 8,
            bench_repetitions: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Sets one key. Unknown keys and unparsable values are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.name" => self.run_name = v.to_string(),
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.seed" => self.seed = parse(key, v)?,
            "data.vocab_size" => self.vocab_size = parse(key, v)?,
            "data.height" => self.height = parse(key, v)?,
            "data.width" => self.width = parse(key, v)?,
            "data.num_classes" => self.num_classes = parse(key, v)?,
            "data.mix_weight" => self.mix_weight = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train_count" => self.train_count = parse(key, v)?,
            "data.heldout_count" => self.heldout_count = parse(key, v)?,
            "data.dir" => self.data_dir = v.to_string(),
            "model.k" => self.k = parse(key, v)?,
            "model.d_model" => self.d_model = parse(key, v)?,
            "model.n_layers" => self.n_layers = parse(key, v)?,
            "model.n_heads" => self.n_heads = parse(key, v)?,
            "model.d_q" => self.d_q = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.learning_rate" => self.learning_rate = parse(key, v)?,
            "train.warmup_steps" => self.warmup_steps = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.beta1" => self.beta1 = parse(key, v)?,
            "train.beta2" => self.beta2 = parse(key, v)?,
            "train.epsilon" => self.epsilon = parse(key, v)?,
            "train.grad_clip_norm" => self.grad_clip_norm = parse(key, v)?,
            "train.shard_size" => self.shard_size = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "train.eval_count" => self.eval_count = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "noise.schedule" => {
                self.schedule = v.parse().map_err(|e: Error| Error::Usage(e.to_string()))?
            }
            "noise.exponent" => self.exponent = parse(key, v)?,
            "noise.weights" => {
                self.loss_weights = if v == "uniform" { Vec::new() } else { parse_list(key, v)? }
            }
            "decode.temperature" => self.temperature = parse(key, v)?,
            "decode.top_k" => self.top_k = parse(key, v)?,
            "decode.greedy" => self.greedy = parse(key, v)?,
            "decode.provisional_policy" => {
                self.provisional_policy = v.parse().map_err(|e: Error| Error::Usage(e.to_string()))?
            }
            "decode.num_samples" => self.num_samples = parse(key, v)?,
            "eval.samples_per_class" => self.samples_per_class = parse(key, v)?,
            "bench.k_values" => self.bench_k_values = parse_list(key, v)?,
            "bench.batch" => self.bench_batch = parse(key, v)?,
            "bench.repetitions" => self.bench_repetitions = parse(key, v)?,
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// All keys with their current values, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("run.name", self.run_name.clone()),
            ("run.output_dir", self.output_dir.display().to_string()),
            ("run.seed", self.seed.to_string()),
            ("data.vocab_size", self.vocab_size.to_string()),
            ("data.height", self.height.to_string()),
            ("data.width", self.width.to_string()),
            ("data.num_classes", self.num_classes.to_string()),
            ("data.mix_weight", self.mix_weight.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.train_count", self.train_count.to_string()),
            ("data.heldout_count", self.heldout_count.to_string()),
            ("data.dir", self.data_dir.clone()),
            ("model.k", self.k.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.n_layers", self.n_layers.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.d_q", self.d_q.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.warmup_steps", self.warmup_steps.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.epsilon", self.epsilon.to_string()),
            ("train.grad_clip_norm", self.grad_clip_norm.to_string()),
            ("train.shard_size", self.shard_size.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.eval_count", self.eval_count.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("noise.schedule", self.schedule.to_string()),
            ("noise.exponent", self.exponent.to_string()),
            (
                "noise.weights",
                if self.loss_weights.is_empty() { "uniform".into() } else { join(&self.loss_weights) },
            ),
            ("decode.temperature", self.temperature.to_string()),
            ("decode.top_k", self.top_k.to_string()),
            ("decode.greedy", self.greedy.to_string()),
            ("decode.provisional_policy", self.provisional_policy.to_string()),
            ("decode.num_samples", self.num_samples.to_string()),
            ("eval.samples_per_class", self.samples_per_class.to_string()),
            ("bench.k_values", join(&self.bench_k_values)),
            ("bench.batch", self.bench_batch.to_string()),
            ("bench.repetitions", self.bench_repetitions.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Defaults overlaid with the keys in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let kv = eval::parse_key_values(text).map_err(|e| Error::Usage(e.to_string()))?;
        for (k, v) in kv {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..6].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn spec(&self) -> Result<SyntheticSpec> {
        toydata::make_spec(self.vocab_size, self.height, self.width, self.num_classes, self.data_seed)?
            .with_mix_weight(self.mix_weight)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            vocab_size: self.vocab_size,
            k: self.k,
            seq_len: self.height * self.width,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_q: self.d_q,
            num_classes: self.num_classes,
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_exponent(self.schedule, self.k, self.exponent)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let weights = if self.loss_weights.is_empty() {
            LossWeights::uniform(self.k)
        } else {
            LossWeights::new(self.loss_weights.clone())?
        };
        let c = TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            schedule: self.schedule()?,
            weights,
            shard_size: self.shard_size,
            eval_every: self.eval_every,
        };
        c.validate(self.k)?;
        Ok(c)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let c = DecodeConfig {
            temperature: self.temperature,
            top_k: if self.top_k == 0 { self.vocab_size } else { self.top_k },
            greedy: self.greedy,
            provisional_policy: self.provisional_policy,
            seed: self.seed,
        };
        c.validate(self.vocab_size)?;
        Ok(c)
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.model_config()?;
        self.train_config()?;
        self.decode_config()?;
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::param(format!("run name {:?} is not a plain file name", self.run_name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.set("model.k", "8").unwrap();
        c.set("noise.weights", "1,0.5,1,1,1,1,1,2").unwrap();
        c.set("train.learning_rate", "0.0003").unwrap();
        let back = Config::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let mut c = Config::default();
        assert!(matches!(c.set("model.width", "3"), Err(Error::Usage(_))));
        assert!(matches!(c.set("model.k", "four"), Err(Error::Usage(_))));
    }

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(Config::default().decode_config().unwrap().top_k, 16);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut c = Config::default();
        let h = c.hash();
        c.seed = 1;
        assert_ne!(h, c.hash());
        assert_eq!(h.len(), 12);
    }
}
