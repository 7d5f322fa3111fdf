use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoder::Features;
use crate::episodes::{sample_episode, Corpus};
use crate::error::{Result, TartError};
use crate::model::TartModel;
use crate::seed::{self, Stream};

/// Aggregated accuracy over evaluation episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Half-width of the normal 95% interval, `1.96 * sd / sqrt(n)`.
    pub ci95: f64,
    pub n_episodes: usize,
    pub per_seed: Vec<f64>,
    pub skipped_degenerate: usize,
    /// Set when no episode could be scored.
    pub all_degenerate: bool,
    /// Per-episode accuracies in episode order.
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    fn from_accuracies(accuracies: Vec<f64>, per_seed: Vec<f64>, skipped: usize) -> Self {
        let n = accuracies.len();
        let (mean, ci95) = mean_ci95(&accuracies);
        EvalReport {
            mean_accuracy: mean,
            ci95,
            n_episodes: n,
            per_seed,
            skipped_degenerate: skipped,
            all_degenerate: n == 0,
            accuracies,
        }
    }

    /// Pools several single-seed reports. `per_seed` lists each input mean.
    pub fn combine(reports: &[EvalReport]) -> EvalReport {
        let accuracies: Vec<f64> = reports.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
        let per_seed = reports.iter().map(|r| r.mean_accuracy).collect();
        let skipped = reports.iter().map(|r| r.skipped_degenerate).sum();
        EvalReport::from_accuracies(accuracies, per_seed, skipped)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Mean and 95% half-width; an empty sample gives `(0, 0)`.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Which episodes to score.
#[derive(Clone, Debug)]
pub struct EvalPlan<'a> {
    pub labels: &'a [String],
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub n_episodes: usize,
    /// Episode `i` is drawn with `derive(seed, stream, 0, i)`.
    pub seed: u64,
    pub stream: Stream,
    pub workers: usize,
}

enum Scored {
    Accuracy(f64),
    Degenerate,
}

fn score(model: &TartModel, corpus: &Corpus, features: &[Features], plan: &EvalPlan, i: usize) -> Result<Scored> {
    let s = seed::derive(plan.seed, plan.stream, 0, i as u64);
    let ep = sample_episode(corpus, plan.labels, plan.n_way, plan.k_shot, plan.q_queries, s)?;
    match model.predict(features, &ep) {
        Ok(out) => Ok(Scored::Accuracy(out.accuracy)),
        Err(TartError::DegenerateTask { classes }) => {
            warn!("skipping degenerate evaluation episode {i}: classes {classes:?} coincide");
            Ok(Scored::Degenerate)
        }
        Err(e) => Err(e),
    }
}

/// Scores `plan.n_episodes` episodes. Workers share the model read-only and
/// results are gathered in episode order, so the report does not depend on
/// the worker count.
pub fn evaluate(model: &TartModel, corpus: &Corpus, features: &[Features], plan: &EvalPlan) -> Result<EvalReport> {
    let workers = plan.workers.clamp(1, plan.n_episodes.max(1));
    let mut slots: Vec<Option<Result<Scored>>> = (0..plan.n_episodes).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(score(model, corpus, features, plan, i));
        }
    } else {
        let chunk = plan.n_episodes.div_ceil(workers);
        std::thread::scope(|s| {
            for (w, part) in slots.chunks_mut(chunk).enumerate() {
                s.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(score(model, corpus, features, plan, w * chunk + j));
                    }
                });
            }
        });
    }
    let mut accuracies = Vec::with_capacity(plan.n_episodes);
    let mut skipped = 0;
    for slot in slots {
        match slot.expect("every episode is scored")? {
            Scored::Accuracy(a) => accuracies.push(a),
            Scored::Degenerate => skipped += 1,
        }
    }
    if accuracies.is_empty() && plan.n_episodes > 0 {
        warn!("all {} evaluation episodes were degenerate", plan.n_episodes);
    }
    let mean = mean_ci95(&accuracies).0;
    Ok(EvalReport::from_accuracies(accuracies, vec![mean], skipped))
}
