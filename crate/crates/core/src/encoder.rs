//! Text ingestion and the mean-pooled affine encoder.
//!
//! Inputs are either token sequences (looked up in an [`EmbeddingTable`] and
//! mean pooled) or pre-embedded dense vectors. Both then go through a
//! trainable affine map into the reference dimension `E`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TartError};
use crate::tensor::{Matrix, Tape, Var};

pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from distinct known tokens. The unknown index is
    /// `tokens.len()`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TartError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { index, tokens })
    }

    /// Known tokens plus the unknown slot.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unknown_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.tokens.len())
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens.get(index).map_or(UNKNOWN_TOKEN, String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Parses a whitespace-delimited word-vector file (`word v1 ... vD` per line).
///
/// An optional `V D` header line is skipped. At most `vocab_limit` words are
/// kept, in file order; a zero row for the unknown token is appended.
pub fn load_embeddings(path: &Path, vocab_limit: Option<usize>) -> Result<(Vocab, EmbeddingTable)> {
    let text = fs::read_to_string(path).map_err(|e| TartError::io(path, e))?;
    parse_embeddings(&text, vocab_limit).map_err(|(line, msg)| TartError::format(path, line, msg))
}

fn parse_embeddings(
    text: &str,
    vocab_limit: Option<usize>,
) -> std::result::Result<(Vocab, EmbeddingTable), (Option<usize>, String)> {
    let limit = vocab_limit.unwrap_or(usize::MAX);
    let mut words = Vec::new();
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            continue;
        }
        if words.len() >= limit {
            break;
        }
        if fields.len() < 2 {
            return Err((Some(lineno), "expected a word followed by at least one value".into()));
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err((Some(lineno), format!("expected {expected} values, found {d}")));
            }
            _ => {}
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| (Some(lineno), format!("cannot parse {f:?} as a number")))?;
            if !v.is_finite() {
                return Err((Some(lineno), format!("non-finite value {f}")));
            }
            data.push(v);
        }
        words.push(fields[0].to_string());
    }
    let dim = dim.ok_or((None, "no word vectors found".to_string()))?;
    let n = words.len();
    data.extend(std::iter::repeat_n(0.0, dim));
    let vocab = Vocab::new(words).map_err(|e| (None, e.to_string()))?;
    let vectors = Matrix::from_vec(n + 1, dim, data).map_err(|e| (None, e.to_string()))?;
    Ok((
        vocab,
        EmbeddingTable {
            vectors,
            trainable: false,
        },
    ))
}

/// Lowercases, splits on whitespace and strips ASCII punctuation from both
/// ends of every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Encoder input prepared once per example.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// Vocabulary indices, pooled on the tape (trainable embeddings).
    TokenIds(Vec<usize>),
    /// An already pooled or pre-embedded `D`-vector.
    Dense(Vec<f64>),
}

/// Tape handles of the encoder parameters for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub projection: Var,
    pub bias: Var,
    pub embeddings: Option<Var>,
}

/// Anything that maps prepared inputs to `E`-dimensional embeddings on a tape.
pub trait Encoder {
    fn output_dim(&self) -> usize;

    /// Registers the trainable parameters on `tape`.
    fn bind(&self, tape: &mut Tape) -> EncoderVars;

    /// Encodes `inputs` into an `inputs.len() x E` node.
    fn encode_batch(&self, tape: &mut Tape, vars: &EncoderVars, inputs: &[&Features]) -> Result<Var>;
}

/// Mean of token embeddings followed by `x * projection + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanAffineEncoder {
    pub vocab: Option<Arc<Vocab>>,
    pub embeddings: Option<Arc<EmbeddingTable>>,
    /// `D x E`
    pub projection: Matrix,
    /// `1 x E`
    pub bias: Matrix,
}

impl MeanAffineEncoder {
    /// Fan-scaled uniform projection, zero bias.
    pub fn init<R: Rng>(
        input_dim: usize,
        output_dim: usize,
        vocab: Option<Arc<Vocab>>,
        embeddings: Option<Arc<EmbeddingTable>>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(TartError::Config("encoder dimensions must be positive".into()));
        }
        if let Some(table) = &embeddings {
            if table.dim() != input_dim {
                return Err(TartError::Config(format!(
                    "embedding dimension {} does not match encoder input dimension {input_dim}",
                    table.dim()
                )));
            }
        }
        let a = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let data = (0..input_dim * output_dim).map(|_| rng.random_range(-a..=a)).collect();
        Ok(MeanAffineEncoder {
            vocab,
            embeddings,
            projection: Matrix::from_raw(input_dim, output_dim, data),
            bias: Matrix::zeros(1, output_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn embeddings_trainable(&self) -> bool {
        self.embeddings.as_ref().is_some_and(|t| t.trainable)
    }

    /// Prepares text for encoding. Frozen embeddings are pooled right away.
    pub fn featurize_text(&self, text: &str) -> Result<Features> {
        let (vocab, table) = match (&self.vocab, &self.embeddings) {
            (Some(v), Some(t)) => (v, t),
            _ => return Err(TartError::Config("text input needs word embeddings".into())),
        };
        let ids: Vec<usize> = tokenize(text).iter().map(|t| vocab.index_of(t)).collect();
        if ids.is_empty() {
            return Err(TartError::EmptyInput(format!("no tokens in {text:?}")));
        }
        if table.trainable {
            return Ok(Features::TokenIds(ids));
        }
        let mut pooled = vec![0.0; table.dim()];
        for &id in &ids {
            for (p, v) in pooled.iter_mut().zip(table.vectors.row(id)) {
                *p += v;
            }
        }
        let n = ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(Features::Dense(pooled))
    }

    pub fn featurize_vector(&self, vector: &[f64]) -> Result<Features> {
        if vector.len() != self.input_dim() {
            return Err(TartError::shape(
                "featurize_vector",
                format!(
                    "vector of length {} for input dimension {}",
                    vector.len(),
                    self.input_dim()
                ),
            ));
        }
        Ok(Features::Dense(vector.to_vec()))
    }

    /// Encodes a single token sequence into a `1 x E` node.
    pub fn encode(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &[String]) -> Result<Var> {
        let vocab = self
            .vocab
            .as_ref()
            .ok_or_else(|| TartError::Config("token input needs a vocabulary".into()))?;
        if tokens.is_empty() {
            return Err(TartError::EmptyInput("empty token list".into()));
        }
        let ids = tokens.iter().map(|t| vocab.index_of(t)).collect();
        let features = Features::TokenIds(ids);
        self.encode_batch(tape, vars, &[&features])
    }
}

impl Encoder for MeanAffineEncoder {
    fn output_dim(&self) -> usize {
        self.projection.cols()
    }

    fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let projection = tape.param(self.projection.clone());
        let bias = tape.param(self.bias.clone());
        let embeddings = self.embeddings.as_ref().map(|t| {
            if t.trainable {
                tape.param(t.vectors.clone())
            } else {
                tape.constant(t.vectors.clone())
            }
        });
        EncoderVars {
            projection,
            bias,
            embeddings,
        }
    }

    fn encode_batch(&self, tape: &mut Tape, vars: &EncoderVars, inputs: &[&Features]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TartError::EmptyInput("encode_batch of no inputs".into()));
        }
        let d = self.input_dim();
        let pooled = if inputs.iter().all(|f| matches!(f, Features::Dense(_))) {
            let mut data = Vec::with_capacity(inputs.len() * d);
            for f in inputs {
                if let Features::Dense(v) = f {
                    if v.len() != d {
                        return Err(TartError::shape("encode_batch", format!("{} vs {d}", v.len())));
                    }
                    data.extend_from_slice(v);
                }
            }
            tape.constant(Matrix::from_raw(inputs.len(), d, data))
        } else {
            let mut rows = Vec::with_capacity(inputs.len());
            for f in inputs {
                let row = match f {
                    Features::Dense(v) => tape.constant(Matrix::row_vector(v.clone())?),
                    Features::TokenIds(ids) => {
                        let table = vars
                            .embeddings
                            .ok_or_else(|| TartError::Config("token input needs word embeddings".into()))?;
                        if ids.is_empty() {
                            return Err(TartError::EmptyInput("empty token list".into()));
                        }
                        let gathered = tape.gather_rows(table, ids)?;
                        tape.mean_rows(gathered)?
                    }
                };
                rows.push(row);
            }
            tape.stack_rows(&rows)?
        };
        let projected = tape.matmul(pooled, vars.projection)?;
        tape.add_row(projected, vars.bias)
    }
}
