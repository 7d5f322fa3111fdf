//! Named-tensor checkpoint files.
//!
//! Layout: the ASCII line `TARTCKPT 1\n`, then for every tensor an ASCII line
//! `<name> <rows> <cols>\n` followed by `rows * cols` little-endian `f64`
//! values in row-major order. Counters are stored as `1 x 1` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::encoder::{EmbeddingTable, MeanAffineEncoder};
use crate::error::{Result, TartError};
use crate::head::{HeadKind, ReferenceLayer};
use crate::model::{ModelSpec, TartModel, BIAS, EMBEDDINGS, PROJECTION, REFERENCE};
use crate::tensor::Matrix;

use super::adam::Adam;
use super::TrainState;

pub const MAGIC: &str = "TARTCKPT";
pub const VERSION: u32 = 1;

const STEP: &str = "state.step";
const EPOCH: &str = "state.epoch";
const BEST: &str = "state.best_val_acc";
const SINCE: &str = "state.epochs_since_improvement";

fn corrupt(msg: impl Into<String>) -> TartError {
    TartError::Checkpoint(msg.into())
}

pub fn encode_tensors(tensors: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    for (name, m) in tensors {
        out.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .take(4096)
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(format!("unterminated header at byte {}", *pos)))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut pos = 0;
    let header = take_line(bytes, &mut pos)?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt(format!("not a checkpoint (header {header:?})")))?;
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut tensors = Vec::new();
    while pos < bytes.len() {
        let line = take_line(bytes, &mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, rows, cols] = fields[..] else {
            return Err(corrupt(format!("bad tensor header {line:?}")));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| corrupt(format!("bad tensor header {line:?}")))
        };
        let (rows, cols) = (parse(rows)?, parse(cols)?);
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt(format!("tensor {name} is too large")))?;
        let body = bytes
            .get(pos..pos + len)
            .ok_or_else(|| corrupt(format!("tensor {name} is truncated")))?;
        pos += len;
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name.to_string(), m));
    }
    Ok(tensors)
}

pub fn state_tensors(state: &TrainState) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    let params = state.model.params();
    for (name, m) in &params {
        out.push((name.to_string(), (*m).clone()));
    }
    for ((name, _), m) in params.iter().zip(&state.adam.first) {
        out.push((format!("adam.m.{name}"), m.clone()));
    }
    for ((name, _), v) in params.iter().zip(&state.adam.second) {
        out.push((format!("adam.v.{name}"), v.clone()));
    }
    out.push((STEP.into(), Matrix::scalar(state.adam.step as f64)));
    out.push((EPOCH.into(), Matrix::scalar(state.epoch as f64)));
    out.push((BEST.into(), Matrix::scalar(state.best_val_acc)));
    out.push((SINCE.into(), Matrix::scalar(state.epochs_since_improvement as f64)));
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_tensors(&state_tensors(state))).map_err(|e| TartError::io(path, e))
}

struct Tensors(BTreeMap<String, Matrix>);

impl Tensors {
    fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let m = self
            .0
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if m.shape() != shape {
            return Err(corrupt(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    fn counter(&mut self, name: &str) -> Result<u64> {
        let v = self.take(name, (1, 1))?.data()[0];
        if v < 0.0 || v.fract() != 0.0 || v > 2f64.powi(53) {
            return Err(corrupt(format!("{name} = {v} is not a count")));
        }
        Ok(v as u64)
    }
}

/// Reads a checkpoint written for a model built from `spec`.
pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| TartError::io(path, e))?;
    let decoded = decode_tensors(&bytes)?;
    let n_decoded = decoded.len();
    let mut map = BTreeMap::new();
    for (name, m) in decoded {
        map.insert(name, m);
    }
    if map.len() != n_decoded {
        return Err(corrupt("duplicate tensor names"));
    }
    let mut t = Tensors(map);
    let kind = if t.0.contains_key(REFERENCE) {
        HeadKind::Tart
    } else {
        HeadKind::Proto
    };
    if kind != spec.kind {
        return Err(corrupt(format!(
            "checkpoint holds a {kind} model, configuration asks for {}",
            spec.kind
        )));
    }
    let (d, e) = (spec.input_dim, spec.output_dim);
    let projection = t.take(PROJECTION, (d, e))?;
    let bias = t.take(BIAS, (1, e))?;
    let embeddings = match &spec.embeddings {
        Some(table) if table.trainable => Some(Arc::new(EmbeddingTable {
            vectors: t.take(EMBEDDINGS, table.vectors.shape())?,
            trainable: true,
        })),
        other => other.clone(),
    };
    let reference = match kind {
        HeadKind::Tart => Some(ReferenceLayer {
            raw: t.take(REFERENCE, (spec.n_way, e))?,
        }),
        HeadKind::Proto => None,
    };
    let model = TartModel {
        encoder: MeanAffineEncoder {
            vocab: spec.vocab.clone(),
            embeddings,
            projection,
            bias,
        },
        reference,
        head: spec.head,
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, p) in model.params() {
        first.push(t.take(&format!("adam.m.{name}"), p.shape())?);
        second.push(t.take(&format!("adam.v.{name}"), p.shape())?);
    }
    let step = t.counter(STEP)?;
    let epoch = t.counter(EPOCH)?;
    let best_val_acc = t.take(BEST, (1, 1))?.data()[0];
    let epochs_since_improvement = t.counter(SINCE)?;
    if let Some(extra) = t.0.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        model,
        adam: Adam { step, first, second },
        epoch,
        best_val_acc,
        epochs_since_improvement,
    })
}
