//! Run configuration: flat `key = value` files with `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, TartError};
use crate::head::{Distance, HeadConfig, HeadKind};
use crate::training::TrainConfig;

/// Everything a `train` or `eval` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub vocab_limit: Option<usize>,
    pub train_embeddings: bool,
    pub output_dir: PathBuf,
    /// Encoder output and reference dimension.
    pub dim: usize,
    pub head_kind: HeadKind,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            split: None,
            embeddings: None,
            vocab_limit: None,
            train_embeddings: false,
            output_dir: PathBuf::from("runs"),
            dim: 256,
            head_kind: HeadKind::Tart,
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

pub const KEYS: &[&str] = &[
    "corpus",
    "split",
    "embeddings",
    "vocab_limit",
    "train_embeddings",
    "output_dir",
    "dim",
    "head",
    "distance",
    "lambda",
    "cosine_eps",
    "n_way",
    "k_shot",
    "q_queries",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "episodes_per_epoch",
    "val_episodes",
    "test_episodes",
    "patience",
    "max_epochs",
    "workers",
    "seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TartError::Config(format!("invalid value {value:?} for {key}")))
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none").then_some(value)
}

/// Splits a config file into `(line, key, value)` triples.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TartError::format(path, Some(i + 1), "expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(TartError::format(path, Some(i + 1), "empty key"));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TartError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_pairs(&text, path)? {
            cfg.set(&key, &value)
                .map_err(|e| TartError::format(path, Some(line), e.to_string()))?;
        }
        for p in [&mut cfg.corpus, &mut cfg.split, &mut cfg.embeddings]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Assigns one key. Used for both file lines and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "corpus" => self.corpus = optional(value).map(PathBuf::from),
            "split" => self.split = optional(value).map(PathBuf::from),
            "embeddings" => self.embeddings = optional(value).map(PathBuf::from),
            "vocab_limit" => self.vocab_limit = optional(value).map(|v| parse(key, v)).transpose()?,
            "train_embeddings" => self.train_embeddings = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "dim" => self.dim = parse(key, value)?,
            "head" => self.head_kind = parse(key, value)?,
            "distance" => self.head.distance = parse::<Distance>(key, value)?,
            "lambda" => self.head.lambda = parse(key, value)?,
            "cosine_eps" => self.head.epsilon = parse(key, value)?,
            "n_way" => t.n_way = parse(key, value)?,
            "k_shot" => t.k_shot = parse(key, value)?,
            "q_queries" => t.q_queries = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "episodes_per_epoch" => t.episodes_per_epoch = parse(key, value)?,
            "val_episodes" => t.val_episodes = parse(key, value)?,
            "test_episodes" => t.test_episodes = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "max_epochs" => t.max_epochs = optional(value).map(|v| parse(key, v)).transpose()?,
            "workers" => t.workers = parse(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(TartError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks value ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let corpus = self
            .corpus
            .as_ref()
            .ok_or_else(|| TartError::Config("no corpus given".into()))?;
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| TartError::Config("no split given".into()))?;
        for p in [Some(corpus), Some(split), self.embeddings.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(TartError::Config(format!("file {} does not exist", p.display())));
            }
        }
        if self.dim == 0 {
            return Err(TartError::Config("dim must be at least 1".into()));
        }
        if self.head_kind == HeadKind::Tart && self.dim < self.train.n_way {
            return Err(TartError::Config(format!(
                "dim {} must be at least n_way {}",
                self.dim, self.train.n_way
            )));
        }
        if !(self.head.lambda >= 0.0 && self.head.lambda.is_finite()) {
            return Err(TartError::Config(format!(
                "lambda {} must be finite and non-negative",
                self.head.lambda
            )));
        }
        if self.head.epsilon.is_nan() || self.head.epsilon <= 0.0 {
            return Err(TartError::Config("cosine_eps must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(TartError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let t = &self.train;
        match key {
            "corpus" => path(&self.corpus),
            "split" => path(&self.split),
            "embeddings" => path(&self.embeddings),
            "vocab_limit" => opt(self.vocab_limit),
            "train_embeddings" => self.train_embeddings.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "dim" => self.dim.to_string(),
            "head" => self.head_kind.to_string(),
            "distance" => self.head.distance.to_string(),
            "lambda" => self.head.lambda.to_string(),
            "cosine_eps" => self.head.epsilon.to_string(),
            "n_way" => t.n_way.to_string(),
            "k_shot" => t.k_shot.to_string(),
            "q_queries" => t.q_queries.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "episodes_per_epoch" => t.episodes_per_epoch.to_string(),
            "val_episodes" => t.val_episodes.to_string(),
            "test_episodes" => t.test_episodes.to_string(),
            "patience" => t.patience.to_string(),
            "max_epochs" => opt(t.max_epochs),
            "workers" => t.workers.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// The effective configuration in the same format [`RunConfig::load`] reads.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.value_of(key)).expect("writing to a string");
        }
        out
    }
}
