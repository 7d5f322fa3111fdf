//! Property tests over randomly generated inputs.

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tart_core::encoder::{EmbeddingTable, Encoder, Features, MeanAffineEncoder, Vocab};
use tart_core::episodes::{sample_episode, Corpus, Example, ExampleInput};
use tart_core::head::{self, HeadConfig};
use tart_core::{Matrix, Tape};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Orthonormal `n x n` matrix by Gram-Schmidt on random columns.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-3 {
            cols.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    let mut m = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, x) in c.iter().enumerate() {
            m.set(i, j, *x);
        }
    }
    m
}

/// `U diag(s) V^T` with singular values spread from 1 to `cond`.
fn conditioned(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> Matrix {
    let u = orthogonal(rng, n);
    let v = orthogonal(rng, n);
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        s.set(i, i, cond.powf(t));
    }
    u.matmul(&s).unwrap().matmul(&v.transpose()).unwrap()
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_residual_is_tiny(seed in any::<u64>(), n in 1usize..=10, log_cond in 0.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = conditioned(&mut rng, n, 10f64.powf(log_cond));
        let inv = a.inverse().unwrap();
        let err = max_abs_diff(&a.matmul(&inv).unwrap(), &Matrix::identity(n));
        prop_assert!(err <= 1e-10, "residual {err:e}");
    }

    #[test]
    fn centering_rows_sum_to_zero(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, rows, cols, 10.0);
        let mut t = Tape::new();
        let v = t.constant(x);
        let m = t.mean_rows(v).unwrap();
        let c = t.sub_row(v, m).unwrap();
        let centered = t.value(c);
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| centered.get(i, j)).sum();
            prop_assert!(s.abs() <= 1e-12, "column {j} sums to {s:e}");
        }
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random(&mut rng, 6, 5, 1.0);
        let q = random(&mut rng, 4, 5, 1.0);
        let r = random(&mut rng, 3, 5, 1.0);
        let grads = || {
            let mut t = Tape::new();
            let (sv, qv, rv) = (t.param(s.clone()), t.param(q.clone()), t.param(r.clone()));
            let cfg = HeadConfig::default();
            let p = head::compute_prototypes(&mut t, sv, &[0, 1, 2, 0, 1, 2], 3).unwrap();
            let w = head::compute_w(&mut t, &p, rv).unwrap();
            let d = head::query_distances(&mut t, qv, &p, Some(w), &cfg).unwrap();
            let cls = head::classification_loss(&mut t, d, &[0, 1, 2, 1]).unwrap();
            let drr = head::drr_loss(&mut t, &p, w, &cfg).unwrap();
            let l = head::total_loss(&mut t, cls, Some(drr), &cfg).unwrap();
            t.backward(l).unwrap();
            [sv, qv, rv].map(|v| t.grad(v).unwrap().clone())
        };
        let (a, b) = (grads(), grads());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn exact_solve_and_right_inverse(seed in any::<u64>(), n in 2usize..=6, extra in 0usize..20) {
        let e = n + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = random(&mut rng, n, e, 2.0);
        let refs = random(&mut rng, n, e, 1.0);
        let mut t = Tape::new();
        let (sv, rv) = (t.constant(support), t.constant(refs));
        let classes: Vec<usize> = (0..n).collect();
        let p = head::compute_prototypes(&mut t, sv, &classes, n).unwrap();
        let pn = t.value(p.norm).clone();
        let gram = pn.matmul(&pn.transpose()).unwrap();
        // near-degenerate episodes lose accuracy in proportion to the condition number
        prop_assume!(spd_condition(&gram) <= 1e6);
        let w = head::compute_w(&mut t, &p, rv).unwrap();
        let pw = t.matmul(p.norm, w).unwrap();
        let rn = t.row_normalize(rv);
        let err = t.value(pw).sub(t.value(rn)).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8, "|Pn W - Rn| = {err:e}");
        // Pn Pn^+ = I
        let pinv = pn.transpose().matmul(&gram.inverse().unwrap()).unwrap();
        prop_assert!(max_abs_diff(&pn.matmul(&pinv).unwrap(), &Matrix::identity(n)) <= 1e-8);
    }

    #[test]
    fn probabilities_and_loss_consistency(seed in any::<u64>(), n in 2usize..=6, q in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = 8;
        let support = random(&mut rng, n, e, 2.0);
        let queries = random(&mut rng, q, e, 2.0);
        let refs = random(&mut rng, n, e, 1.0);
        let labels: Vec<usize> = (0..q).map(|i| i % n).collect();
        let cfg = HeadConfig::default();
        let mut t = Tape::new();
        let (sv, qv, rv) = (t.constant(support), t.constant(queries), t.constant(refs));
        let classes: Vec<usize> = (0..n).collect();
        let p = head::compute_prototypes(&mut t, sv, &classes, n).unwrap();
        let w = head::compute_w(&mut t, &p, rv).unwrap();
        let probs = head::classify(&mut t, qv, &p, w, &cfg).unwrap();
        for r in 0..q {
            prop_assert!(probs.row(r).iter().all(|&x| x > 0.0 && x < 1.0));
            prop_assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let d = head::query_distances(&mut t, qv, &p, Some(w), &cfg).unwrap();
        let loss = head::classification_loss(&mut t, d, &labels).unwrap();
        let oracle = labels.iter().enumerate().map(|(r, &y)| -probs.get(r, y).ln()).sum::<f64>() / q as f64;
        prop_assert!((t.scalar(loss) - oracle).abs() <= 1e-10);
        let drr = head::drr_loss(&mut t, &p, w, &cfg).unwrap();
        let v = t.scalar(drr);
        let bound = -2.0 * (n * (n - 1)) as f64;
        prop_assert!(v <= 0.0 && v >= bound, "drr {v} outside [{bound}, 0]");
    }

    #[test]
    fn cosine_classification_ignores_query_scale(seed in any::<u64>(), alpha in 0.01f64..100.0, row in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = random(&mut rng, 3, 6, 2.0);
        let queries = random(&mut rng, 4, 6, 2.0);
        let refs = random(&mut rng, 3, 6, 1.0);
        let mut scaled = queries.clone();
        scaled.row_mut(row).iter_mut().for_each(|x| *x *= alpha);
        let cfg = HeadConfig::default();
        let probs = |qs: Matrix| {
            let mut t = Tape::new();
            let (sv, qv, rv) = (t.constant(support.clone()), t.constant(qs), t.constant(refs.clone()));
            let p = head::compute_prototypes(&mut t, sv, &[0, 1, 2], 3).unwrap();
            let w = head::compute_w(&mut t, &p, rv).unwrap();
            head::classify(&mut t, qv, &p, w, &cfg).unwrap()
        };
        prop_assert!(max_abs_diff(&probs(queries), &probs(scaled)) <= 1e-9);
    }

    #[test]
    fn pooling_ignores_token_order(seed in any::<u64>(), len in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new((0..12).map(|i| format!("w{i}")).collect()).unwrap();
        let table = EmbeddingTable { vectors: random(&mut rng, vocab.len(), 5, 3.0), trainable: true };
        let enc = MeanAffineEncoder::init(5, 7, Some(Arc::new(vocab)), Some(Arc::new(table)), &mut rng).unwrap();
        let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..13)).collect();
        let run = |ids: Vec<usize>| {
            let mut t = Tape::new();
            let vars = enc.bind(&mut t);
            let out = enc.encode_batch(&mut t, &vars, &[&Features::TokenIds(ids)]).unwrap();
            t.value(out).clone()
        };
        let a = run(ids.clone());
        ids.shuffle(&mut rng);
        let b = run(ids);
        prop_assert_eq!(a.shape(), (1, 7));
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn primitives_match_finite_differences_at_scale(seed in any::<u64>()) {
        use tart_core::tensor::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 3, 4, 10.0);
        let b = random(&mut rng, 4, 3, 10.0);
        // a composite of primitive ops on inputs of magnitude up to 10; near-zero
        // entries sit at the finite-difference noise floor, hence 1e-4
        let f = |t: &mut Tape, x: tart_core::Var, y: tart_core::Var| {
            let m = t.matmul(x, y).unwrap();
            let s = t.scale(m, 0.01);
            let l = t.log_sum_exp_rows(s).unwrap();
            t.sum(l)
        };
        let mut t = Tape::new();
        let (x, y) = (t.param(a.clone()), t.param(b.clone()));
        let root = f(&mut t, x, y);
        t.backward(root).unwrap();
        let analytic = [t.grad(x).unwrap().clone(), t.grad(y).unwrap().clone()];
        let numeric = central_difference(&[a, b], DEFAULT_STEP, |ps| {
            let mut t = Tape::new();
            let (x, y) = (t.constant(ps[0].clone()), t.constant(ps[1].clone()));
            let root = f(&mut t, x, y);
            Ok(t.scalar(root))
        }).unwrap();
        for (an, nu) in analytic.iter().zip(&numeric) {
            for (u, v) in an.data().iter().zip(nu.data()) {
                prop_assert!(relative_error(*u, *v) <= 1e-4, "{u} vs {v}");
            }
        }
    }
}

/// Largest eigenvalue of a symmetric positive definite matrix by power iteration.
fn top_eigenvalue(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut v = Matrix::filled(n, 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let next = m.matmul(&v).unwrap();
        lambda = next.frobenius_norm() / v.frobenius_norm();
        v = next.scale(1.0 / next.frobenius_norm());
    }
    lambda
}

/// Condition number of a symmetric positive definite matrix.
fn spd_condition(m: &Matrix) -> f64 {
    match m.inverse() {
        Ok(inv) => top_eigenvalue(m) * top_eigenvalue(&inv),
        Err(_) => f64::INFINITY,
    }
}

fn shuffled_corpus(order_seed: u64) -> Corpus {
    let mut examples: Vec<Example> = (0..8)
        .flat_map(|c| {
            (0..10).map(move |i| Example {
                input: ExampleInput::Vector(vec![c as f64, i as f64]),
                label: format!("l{c}"),
            })
        })
        .collect();
    // interleave labels differently while keeping within-label order
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut keys: Vec<(u64, usize)> = examples.iter().enumerate().map(|(i, _)| (rng.random(), i)).collect();
    keys.sort();
    let mut by_label: Vec<Vec<Example>> = vec![Vec::new(); 8];
    for ex in examples.drain(..) {
        let c: usize = ex.label[1..].parse().unwrap();
        by_label[c].push(ex);
    }
    let mut cursors = [0; 8];
    let mut out = Vec::new();
    for (_, i) in keys {
        let c = i / 10;
        out.push(by_label[c][cursors[c]].clone());
        cursors[c] += 1;
    }
    Corpus::new(out)
}

#[test]
fn episodes_are_disjoint_for_1000_seeds() {
    let corpus = shuffled_corpus(0);
    let labels: Vec<String> = corpus.labels().map(str::to_string).collect();
    for seed in 0..1000u64 {
        let ep = sample_episode(&corpus, &labels, 5, 3, 4, seed).unwrap();
        let support: BTreeSet<usize> = ep.support.iter().map(|s| s.example).collect();
        let query: BTreeSet<usize> = ep.query.iter().map(|s| s.example).collect();
        assert_eq!(support.len(), 15, "seed {seed}");
        assert_eq!(query.len(), 20, "seed {seed}");
        assert!(support.is_disjoint(&query), "seed {seed}");
        let chosen: BTreeSet<&String> = ep.labels.iter().collect();
        assert_eq!(chosen.len(), 5);
        for item in ep.support.iter().chain(&ep.query) {
            assert_eq!(corpus.examples()[item.example].label, ep.labels[item.class]);
        }
    }
}

#[test]
fn sampling_ignores_corpus_interleaving() {
    let a = shuffled_corpus(1);
    let b = shuffled_corpus(2);
    let labels: Vec<String> = (0..8).map(|c| format!("l{c}")).collect();
    for seed in 0..200u64 {
        let ea = sample_episode(&a, &labels, 4, 2, 3, seed).unwrap();
        let eb = sample_episode(&b, &labels, 4, 2, 3, seed).unwrap();
        let inputs = |c: &Corpus, items: &[tart_core::episodes::EpisodeItem]| -> Vec<ExampleInput> {
            items.iter().map(|i| c.examples()[i.example].input.clone()).collect()
        };
        assert_eq!(ea.labels, eb.labels);
        assert_eq!(inputs(&a, &ea.support), inputs(&b, &eb.support));
        assert_eq!(inputs(&a, &ea.query), inputs(&b, &eb.query));
    }
}

#[test]
fn drr_decreases_as_second_prototype_rotates_away() {
    // N = 2, E = 2. W is solved once at the 90 degree configuration and held fixed.
    let refs = Matrix::from_rows(&[vec![1.0, 0.1], vec![-0.2, 1.0]]).unwrap();
    let cfg = HeadConfig::default();
    let w = {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let r = t.constant(refs.clone());
        let p = head::compute_prototypes(&mut t, s, &[0, 1], 2).unwrap();
        let w = head::compute_w(&mut t, &p, r).unwrap();
        t.value(w).clone()
    };
    let drr_at = |theta: f64| {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![theta.cos(), theta.sin()]]).unwrap());
        let p = head::compute_prototypes(&mut t, s, &[0, 1], 2).unwrap();
        let wv = t.constant(w.clone());
        let d = head::drr_loss(&mut t, &p, wv, &cfg).unwrap();
        t.scalar(d)
    };
    let steps = 90;
    let values: Vec<f64> = (0..=steps)
        .map(|i| drr_at(std::f64::consts::FRAC_PI_2 * i as f64 / steps as f64))
        .collect();
    assert!(values[0].abs() < 1e-12);
    for pair in values.windows(2) {
        assert!(pair[1] < pair[0], "{} !< {}", pair[1], pair[0]);
    }
}
