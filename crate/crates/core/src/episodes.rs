//! Corpora, class splits, N-way K-shot episode sampling and the synthetic
//! low inter-class-variance benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TartError};

pub const DEFAULT_QUERIES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum ExampleInput {
    Text(String),
    /// Pre-embedded vector, bypasses tokenization and pooling.
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: ExampleInput,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    examples: Vec<Example>,
    label_index: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>) -> Self {
        let mut label_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            label_index.entry(ex.label.clone()).or_default().push(i);
        }
        Corpus { examples, label_index }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.label_index.keys().map(String::as_str)
    }

    pub fn indices_of(&self, label: &str) -> &[usize] {
        self.label_index.get(label).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, label: &str) -> usize {
        self.indices_of(label).len()
    }

    /// Dimension of the vector records, `None` for a text corpus.
    pub fn vector_dim(&self) -> Option<usize> {
        self.examples.iter().find_map(|e| match &e.input {
            ExampleInput::Vector(v) => Some(v.len()),
            ExampleInput::Text(_) => None,
        })
    }
}

/// Reads one record per line, each a flat object with a string `label` and
/// either a string `text` or a numeric array `vector`. Blank lines are
/// ignored.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| TartError::io(path, e))?;
    parse_corpus(&text).map_err(|(line, msg)| TartError::format(path, Some(line), msg))
}

fn parse_corpus(text: &str) -> std::result::Result<Corpus, (usize, String)> {
    let mut examples = Vec::new();
    let mut vector_dim: Option<usize> = None;
    let mut has_text = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| (lineno, format!("malformed record: {e}")))?;
        let obj = value
            .as_object()
            .ok_or((lineno, "record is not an object".to_string()))?;
        let label = obj
            .get("label")
            .ok_or((lineno, "missing field `label`".to_string()))?
            .as_str()
            .ok_or((lineno, "field `label` is not a string".to_string()))?
            .to_string();
        let input = match (obj.get("text"), obj.get("vector")) {
            (Some(t), None) => {
                let t = t.as_str().ok_or((lineno, "field `text` is not a string".to_string()))?;
                has_text = true;
                ExampleInput::Text(t.to_string())
            }
            (None, Some(v)) => {
                let arr = v
                    .as_array()
                    .ok_or((lineno, "field `vector` is not an array".to_string()))?;
                let vec = arr
                    .iter()
                    .map(|x| x.as_f64().filter(|f| f.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or((lineno, "field `vector` must hold finite numbers".to_string()))?;
                match vector_dim {
                    None => vector_dim = Some(vec.len()),
                    Some(d) if d != vec.len() => {
                        return Err((lineno, format!("vector of length {} after length {d}", vec.len())))
                    }
                    _ => {}
                }
                ExampleInput::Vector(vec)
            }
            (Some(_), Some(_)) => return Err((lineno, "record has both `text` and `vector`".into())),
            (None, None) => return Err((lineno, "missing field `text`".into())),
        };
        if has_text && vector_dim.is_some() {
            return Err((lineno, "corpus mixes text and vector records".into()));
        }
        examples.push(Example { input, label });
    }
    Ok(Corpus::new(examples))
}

/// Writes a corpus in the line-delimited record format.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for ex in corpus.examples() {
        let record = match &ex.input {
            ExampleInput::Text(t) => serde_json::json!({ "text": t, "label": ex.label }),
            ExampleInput::Vector(v) => serde_json::json!({ "vector": v, "label": ex.label }),
        };
        serde_json::to_writer(&mut out, &record).expect("serializing to memory");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| TartError::io(path, e))
}

/// Pairwise-disjoint train, validation and test label sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ClassSplit {
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let split = ClassSplit { train, val, test };
        split.check_disjoint()?;
        Ok(split)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, labels) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for l in labels {
                if let Some(prev) = seen.insert(l, name) {
                    return Err(TartError::Config(format!(
                        "label {l:?} appears in both {prev} and {name}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every split label must exist in `corpus`.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        for l in self.train.iter().chain(&self.val).chain(&self.test) {
            if corpus.count(l) == 0 {
                return Err(TartError::Config(format!(
                    "split label {l:?} has no examples in the corpus"
                )));
            }
        }
        Ok(())
    }
}

pub fn load_split(path: &Path) -> Result<ClassSplit> {
    let text = fs::read_to_string(path).map_err(|e| TartError::io(path, e))?;
    let split: ClassSplit =
        serde_json::from_str(&text).map_err(|e| TartError::format(path, Some(e.line()), e.to_string()))?;
    split.check_disjoint()?;
    Ok(split)
}

pub fn write_split(split: &ClassSplit, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string(split).expect("serializing to memory");
    text.push('\n');
    fs::write(path, text).map_err(|e| TartError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into the corpus.
    pub example: usize,
    /// Episode class id in `0..n_way`.
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// `labels[c]` is the corpus label of episode class `c`.
    pub labels: Vec<String>,
}

impl Episode {
    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.class).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.class).collect()
    }
}

/// Draws `n` labels without replacement from the eligible `labels`, then
/// `k + q` examples per label without replacement: the first `k` go to the
/// support set, the rest to the query set. Deterministic in `seed`.
pub fn sample_episode(corpus: &Corpus, labels: &[String], n: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(TartError::Sampling("n, k and q must all be at least 1".into()));
    }
    let need = k + q;
    let eligible: Vec<&String> = labels.iter().filter(|l| corpus.count(l) >= need).collect();
    if eligible.len() < n {
        let deficient = labels
            .iter()
            .find(|l| corpus.count(l) < need)
            .map(|l| format!("; label {l:?} has {} examples, needs {need}", corpus.count(l)))
            .unwrap_or_default();
        return Err(TartError::Sampling(format!(
            "{} eligible labels for a {n}-way episode{deficient}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, eligible.len(), n);
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    let mut out_labels = Vec::with_capacity(n);
    for (class, li) in chosen.iter().enumerate() {
        let label = eligible[li];
        let pool = corpus.indices_of(label);
        let picks = index::sample(&mut rng, pool.len(), need);
        for (j, p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                example: pool[p],
                class,
            };
            if j < k {
                support.push(item);
            } else {
                query.push(item);
            }
        }
        out_labels.push(label.clone());
    }
    Ok(Episode {
        n_way: n,
        k_shot: k,
        q_queries: q,
        support,
        query,
        labels: out_labels,
    })
}

/// Generator settings for the synthetic benchmark.
///
/// Classes come in blocks of `block_size`. In every block the first
/// `clustered_per_block` class means share a block-specific center of norm
/// `shared_scale` and differ from it by Gaussian offsets with per-coordinate
/// standard deviation `inter_class_gap` (the low inter-class-variance regime
/// when this is comparable to `noise`); the remaining class means are
/// independent directions of norm `separated_scale`. Class structure lives in
/// the first `informative_dim` coordinates. Samples add Gaussian noise of
/// standard deviation `noise`, scaled by `nuisance_scale` in the remaining
/// coordinates. The last block is the test split, the one before it the
/// validation split, and all others are training classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub inter_class_gap: f64,
    pub noise: f64,
    pub dim: usize,
    pub informative_dim: usize,
    pub nuisance_scale: f64,
    pub shared_scale: f64,
    pub separated_scale: f64,
    pub block_size: usize,
    pub clustered_per_block: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 30,
            per_class: 40,
            inter_class_gap: 1.0,
            noise: 1.0,
            dim: 64,
            informative_dim: 16,
            nuisance_scale: 3.0,
            shared_scale: 5.0,
            separated_scale: 6.0,
            block_size: 5,
            clustered_per_block: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TartError::Config(format!("synthetic generator: {msg}")));
        if !self.inter_class_gap.is_finite() || self.inter_class_gap < 0.0 {
            return bad("inter_class_gap must be finite and >= 0");
        }
        if !self.noise.is_finite() || self.noise <= 0.0 {
            return bad("noise must be finite and > 0");
        }
        for (name, v) in [
            ("nuisance_scale", self.nuisance_scale),
            ("shared_scale", self.shared_scale),
            ("separated_scale", self.separated_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if self.block_size == 0 || self.clustered_per_block > self.block_size {
            return bad("need 0 < clustered_per_block <= block_size");
        }
        if !self.n_classes.is_multiple_of(self.block_size) || self.n_classes / self.block_size < 3 {
            return bad("n_classes must be a multiple of block_size covering at least 3 blocks");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if self.informative_dim == 0 || self.informative_dim > self.dim {
            return bad("need 0 < informative_dim <= dim");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub split: ClassSplit,
    pub class_means: Vec<Vec<f64>>,
    pub clustered: Vec<bool>,
    pub labels: Vec<String>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn synth_label(class: usize) -> String {
    format!("class{class:03}")
}

/// Generates a vector corpus and its class split. Bit-identical for a fixed
/// configuration.
pub fn make_synthetic_corpus(cfg: &SynthConfig) -> Result<(Corpus, SynthMeta)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inf = cfg.informative_dim;
    let mut means = Vec::with_capacity(cfg.n_classes);
    let mut clustered = Vec::with_capacity(cfg.n_classes);
    for _block in 0..cfg.n_classes / cfg.block_size {
        let center = unit_vector(&mut rng, inf);
        for slot in 0..cfg.block_size {
            let mut mean = vec![0.0; cfg.dim];
            if slot < cfg.clustered_per_block {
                for k in 0..inf {
                    let z: f64 = rng.sample(StandardNormal);
                    mean[k] = cfg.shared_scale * center[k] + cfg.inter_class_gap * z;
                }
                clustered.push(true);
            } else {
                let dir = unit_vector(&mut rng, inf);
                for k in 0..inf {
                    mean[k] = cfg.separated_scale * dir[k];
                }
                clustered.push(false);
            }
            means.push(mean);
        }
    }
    let mut examples = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    let labels: Vec<String> = (0..cfg.n_classes).map(synth_label).collect();
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let v = mean
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let sd = if k < inf {
                        cfg.noise
                    } else {
                        cfg.noise * cfg.nuisance_scale
                    };
                    m + sd * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            examples.push(Example {
                input: ExampleInput::Vector(v),
                label: labels[c].clone(),
            });
        }
    }
    let blocks = cfg.n_classes / cfg.block_size;
    let block_labels = |b: usize| labels[b * cfg.block_size..(b + 1) * cfg.block_size].to_vec();
    let split = ClassSplit::new(
        (0..blocks - 2).flat_map(block_labels).collect(),
        block_labels(blocks - 2),
        block_labels(blocks - 1),
    )?;
    Ok((
        Corpus::new(examples),
        SynthMeta {
            split,
            class_means: means,
            clustered,
            labels,
        },
    ))
}

/// Writes `corpus.jsonl` and `split.json` into `dir`.
pub fn write_synthetic(corpus: &Corpus, meta: &SynthMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TartError::io(dir, e))?;
    write_corpus(corpus, &dir.join("corpus.jsonl"))?;
    write_split(&meta.split, &dir.join("split.json"))?;
    let means_path = dir.join("class_means.tsv");
    let mut f = fs::File::create(&means_path).map_err(|e| TartError::io(&means_path, e))?;
    for ((label, mean), clustered) in meta.labels.iter().zip(&meta.class_means).zip(&meta.clustered) {
        let coords: Vec<String> = mean.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{label}\t{}\t{}", u8::from(*clustered), coords.join("\t"))
            .map_err(|e| TartError::io(&means_path, e))?;
    }
    Ok(())
}
