//! Prototypes, the task-adaptive transformation and the classification heads.
//!
//! For an episode with normalized prototype matrix `P` (`N x E`) and
//! normalized reference matrix `R`, the transformation is
//! `W = P^T (P P^T)^-1 R`, the Moore–Penrose right inverse of `P` applied to
//! `R`, so that `P W = R` holds exactly whenever `P` has full row rank.
//! Queries and raw prototypes are compared after multiplication by `W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, TartError};
use crate::tensor::{Matrix, Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Cosine,
    SquaredEuclidean,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Cosine => "cosine",
            Distance::SquaredEuclidean => "sqeuclidean",
        })
    }
}

impl FromStr for Distance {
    type Err = TartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "sqeuclidean" | "squared-euclidean" => Ok(Distance::SquaredEuclidean),
            _ => Err(TartError::Config(format!("unknown distance {s:?}"))),
        }
    }
}

/// Which classifier sits on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Task-adaptive reference transformation with DRR.
    Tart,
    /// Prototypical network: distances in the untransformed embedding space.
    Proto,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Tart => "tart",
            HeadKind::Proto => "proto",
        })
    }
}

impl FromStr for HeadKind {
    type Err = TartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tart" => Ok(HeadKind::Tart),
            "proto" => Ok(HeadKind::Proto),
            _ => Err(TartError::Config(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub distance: Distance,
    /// Weight of the discriminative reference regularizer.
    pub lambda: f64,
    /// Floor for the cosine denominator.
    pub epsilon: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            distance: Distance::Cosine,
            lambda: DEFAULT_LAMBDA,
            epsilon: COSINE_EPS,
        }
    }
}

/// Learnable reference vectors, one row per episode class.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLayer {
    pub raw: Matrix,
}

impl ReferenceLayer {
    /// Uniform entries in `[-a, a]` with `a = sqrt(6 / (N + E))`.
    pub fn init<R: Rng>(n_way: usize, dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (n_way + dim) as f64).sqrt();
        let data = (0..n_way * dim).map(|_| rng.random_range(-a..=a)).collect();
        ReferenceLayer {
            raw: Matrix::from_raw(n_way, dim, data),
        }
    }

    pub fn n_way(&self) -> usize {
        self.raw.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet {
    /// Class means, row `c` for episode class `c`.
    pub raw: Var,
    /// Row-normalized class means.
    pub norm: Var,
}

/// Averages the support embeddings of every class. `classes[i]` is the
/// episode class of row `i` of `support`.
pub fn compute_prototypes(tape: &mut Tape, support: Var, classes: &[usize], n_way: usize) -> Result<PrototypeSet> {
    if classes.len() != tape.shape(support).0 {
        return Err(TartError::shape(
            "compute_prototypes",
            format!("{} class ids for {} support rows", classes.len(), tape.shape(support).0),
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&y| y >= n_way) {
        return Err(TartError::shape(
            "compute_prototypes",
            format!("class id {bad} for {n_way} ways"),
        ));
    }
    let mut rows = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let members: Vec<usize> = classes
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(TartError::EmptyInput(format!("class {c} has no support examples")));
        }
        let g = tape.gather_rows(support, &members)?;
        rows.push(tape.mean_rows(g)?);
    }
    let raw = tape.stack_rows(&rows)?;
    let norm = tape.row_normalize(raw);
    Ok(PrototypeSet { raw, norm })
}

/// Pair of distinct rows with the largest cosine similarity.
fn closest_pair(m: &Matrix) -> (usize, usize) {
    let mut best = (0, 1.min(m.rows().saturating_sub(1)));
    let mut best_sim = f64::NEG_INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let (a, b) = (m.row(i), m.row(j));
            let denom = crate::tensor::norm(a) * crate::tensor::norm(b);
            let sim = if denom > 0.0 {
                crate::tensor::dot(a, b) / denom
            } else {
                1.0
            };
            if sim > best_sim {
                best_sim = sim;
                best = (i, j);
            }
        }
    }
    best
}

/// Solves `P_norm W = R_norm` with `W = P_norm^T (P_norm P_norm^T)^-1 R_norm`.
///
/// A rank-deficient prototype matrix yields [`TartError::DegenerateTask`]
/// naming the two classes whose normalized prototypes are most alike.
pub fn compute_w(tape: &mut Tape, proto: &PrototypeSet, reference_raw: Var) -> Result<Var> {
    let (n, e) = tape.shape(proto.norm);
    if tape.shape(reference_raw) != (n, e) {
        return Err(TartError::shape(
            "compute_w",
            format!("prototypes {:?} vs references {:?}", (n, e), tape.shape(reference_raw)),
        ));
    }
    if !tape.value(proto.raw).is_finite() {
        return Err(TartError::Numerical("non-finite prototypes".into()));
    }
    let r_norm = tape.row_normalize(reference_raw);
    let p_t = tape.transpose(proto.norm);
    let gram = tape.matmul(proto.norm, p_t)?;
    let gram_inv = match tape.inverse(gram) {
        Ok(v) => v,
        Err(TartError::SingularMatrix { .. }) => {
            return Err(TartError::DegenerateTask {
                classes: closest_pair(tape.value(proto.norm)),
            })
        }
        Err(e) => return Err(e),
    };
    let right_inverse = tape.matmul(p_t, gram_inv)?;
    tape.matmul(right_inverse, r_norm)
}

/// Pairwise distances between the rows of `a` and `b`.
pub fn distance_matrix(tape: &mut Tape, a: Var, b: Var, cfg: &HeadConfig) -> Result<Var> {
    match cfg.distance {
        Distance::Cosine => tape.cosine_distance(a, b, cfg.epsilon),
        Distance::SquaredEuclidean => tape.sq_euclidean(a, b),
    }
}

/// Distance between two `1 x E` rows, a `1 x 1` node.
pub fn distance(tape: &mut Tape, u: Var, v: Var, cfg: &HeadConfig) -> Result<Var> {
    if tape.shape(u).0 != 1 || tape.shape(v).0 != 1 {
        return Err(TartError::shape("distance", "expects single rows"));
    }
    distance_matrix(tape, u, v, cfg)
}

/// `Q x N` distances between transformed queries and transformed raw
/// prototypes. `w = None` compares in the untransformed space.
pub fn query_distances(
    tape: &mut Tape,
    queries: Var,
    proto: &PrototypeSet,
    w: Option<Var>,
    cfg: &HeadConfig,
) -> Result<Var> {
    let (tq, tp) = match w {
        Some(w) => (tape.matmul(queries, w)?, tape.matmul(proto.raw, w)?),
        None => (queries, proto.raw),
    };
    distance_matrix(tape, tq, tp, cfg)
}

/// Row-wise softmax of negated distances.
pub fn softmax_neg(distances: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(distances.rows(), distances.cols());
    for r in 0..distances.rows() {
        let neg: Vec<f64> = distances.row(r).iter().map(|d| -d).collect();
        let lse = crate::tensor::log_sum_exp(&neg);
        for (o, x) in out.row_mut(r).iter_mut().zip(&neg) {
            *o = (x - lse).exp();
        }
    }
    out
}

/// Class probabilities for each query row, `Q x N`.
pub fn classify(tape: &mut Tape, queries: Var, proto: &PrototypeSet, w: Var, cfg: &HeadConfig) -> Result<Matrix> {
    let d = query_distances(tape, queries, proto, Some(w), cfg)?;
    Ok(softmax_neg(tape.value(d)))
}

/// The PROTO baseline: [`classify`] with `W` the identity.
pub fn proto_baseline_classify(
    tape: &mut Tape,
    queries: Var,
    proto: &PrototypeSet,
    cfg: &HeadConfig,
) -> Result<Matrix> {
    let d = query_distances(tape, queries, proto, None, cfg)?;
    Ok(softmax_neg(tape.value(d)))
}

/// Index of the largest entry of each row, lowest index on ties.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            probs
                .row(r)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, &p)| if p > best.1 { (c, p) } else { best },
                )
                .0
        })
        .collect()
}

/// Mean over queries of `d(q, p_y) + log sum_c exp(-d(q, p_c))`, the mean
/// negative log-probability of the true class.
pub fn classification_loss(tape: &mut Tape, distances: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(TartError::EmptyInput("no queries".into()));
    }
    let true_d = tape.pick_per_row(distances, labels)?;
    let neg = tape.scale(distances, -1.0);
    let lse = tape.log_sum_exp_rows(neg)?;
    let per_query = tape.add(true_d, lse)?;
    tape.mean(per_query)
}

/// `-sum_{i != j} d(p_i W, p_j W)` over ordered pairs of raw prototypes.
pub fn drr_loss(tape: &mut Tape, proto: &PrototypeSet, w: Var, cfg: &HeadConfig) -> Result<Var> {
    let n = tape.shape(proto.raw).0;
    if n < 2 {
        return Err(TartError::DegenerateTask { classes: (0, 0) });
    }
    let tp = tape.matmul(proto.raw, w)?;
    let d = distance_matrix(tape, tp, tp, cfg)?;
    let mut mask = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        mask.set(i, i, 0.0);
    }
    let mask = tape.constant(mask);
    let off_diag = tape.mul(d, mask)?;
    let s = tape.sum(off_diag);
    Ok(tape.scale(s, -1.0))
}

/// `l_cls + lambda * l_drr`. With `lambda == 0` the regularizer is left out
/// of the graph entirely.
pub fn total_loss(tape: &mut Tape, l_cls: Var, l_drr: Option<Var>, cfg: &HeadConfig) -> Result<Var> {
    match l_drr {
        Some(drr) if cfg.lambda != 0.0 => {
            let weighted = tape.scale(drr, cfg.lambda);
            tape.add(l_cls, weighted)
        }
        _ => Ok(l_cls),
    }
}
