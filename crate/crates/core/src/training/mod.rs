//! Episodic training with Adam, early stopping, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod report;

use log::{debug, info, warn};
use serde::Serialize;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_tensors, encode_tensors, load_checkpoint, save_checkpoint, state_tensors, MAGIC, VERSION};
pub use report::{evaluate, mean_ci95, EvalPlan, EvalReport};

use crate::encoder::Features;
use crate::episodes::{sample_episode, ClassSplit, Corpus};
use crate::error::{Result, TartError};
use crate::model::{ModelSpec, TartModel};
use crate::seed::{self, Stream};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub patience: usize,
    /// Hard cap on epochs; `None` relies on early stopping alone.
    pub max_epochs: Option<usize>,
    pub adam: AdamConfig,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 1,
            q_queries: crate::episodes::DEFAULT_QUERIES,
            episodes_per_epoch: 100,
            val_episodes: 100,
            test_episodes: 1000,
            patience: 20,
            max_epochs: None,
            adam: AdamConfig::default(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_queries", self.q_queries),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("val_episodes", self.val_episodes),
            ("test_episodes", self.test_episodes),
            ("patience", self.patience),
            ("workers", self.workers),
            ("max_epochs", self.max_epochs.unwrap_or(1)),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TartError::Config(format!("{name} must be at least 1")));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(TartError::Config(format!(
                "learning rate {} is not a finite non-negative number",
                a.lr
            )));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps.is_nan() || a.eps <= 0.0 {
            return Err(TartError::Config("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        Ok(())
    }

    /// Evaluation plan over `labels`.
    pub fn plan<'a>(&self, labels: &'a [String], n_episodes: usize, seed: u64, stream: Stream) -> EvalPlan<'a> {
        EvalPlan {
            labels,
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.q_queries,
            n_episodes,
            seed,
            stream,
            workers: self.workers,
        }
    }
}

/// Parameters, optimizer moments and early-stopping counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: TartModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
    /// `-1` before the first validation.
    pub best_val_acc: f64,
    pub epochs_since_improvement: u64,
}

impl TrainState {
    pub fn new(model: TartModel) -> Self {
        let adam = Adam::new(model.params().into_iter().map(|(_, m)| m));
        TrainState {
            model,
            adam,
            epoch: 0,
            best_val_acc: -1.0,
            epochs_since_improvement: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub cls_loss: f64,
    /// `lambda` times the mean regularizer value.
    pub drr_term: f64,
    pub lambda: f64,
    pub val_accuracy: f64,
    pub epochs_since_improvement: u64,
    pub skipped_degenerate: usize,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log line serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot taken at the best validation epoch.
    pub best: TrainState,
    pub best_epoch: u64,
    pub log: Vec<EpochLog>,
}

/// Initializes a model from `spec` and trains it on `split.train`.
pub fn train(
    spec: &ModelSpec,
    corpus: &Corpus,
    split: &ClassSplit,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    let model = spec.init(run_seed)?;
    let features = model.featurize(corpus)?;
    train_from(TrainState::new(model), corpus, &features, split, cfg, run_seed)
}

/// Continues training `state`. Stops once validation accuracy has not
/// strictly improved for `cfg.patience` epochs or `cfg.max_epochs` is reached.
pub fn train_from(
    mut state: TrainState,
    corpus: &Corpus,
    features: &[Features],
    split: &ClassSplit,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate_against(corpus)?;
    let lambda = state.model.head.lambda;
    let val_seed = seed::derive(run_seed, Stream::Validation, 0, 0);
    let mut log = Vec::new();
    let mut best = state.clone();
    let mut best_epoch = state.epoch;
    let mut run = 0;
    loop {
        let epoch = state.epoch + 1;
        let (mut total, mut cls, mut drr) = (0.0, 0.0, 0.0);
        let mut used = 0usize;
        let mut skipped = 0usize;
        for i in 0..cfg.episodes_per_epoch {
            let s = seed::derive(run_seed, Stream::Train, epoch, i as u64);
            let ep = sample_episode(corpus, &split.train, cfg.n_way, cfg.k_shot, cfg.q_queries, s)?;
            let mut tape = Tape::new();
            let fwd = match state.model.forward(&mut tape, features, &ep) {
                Ok(f) => f,
                Err(TartError::DegenerateTask { classes }) => {
                    warn!("epoch {epoch}: skipping degenerate episode {i}, classes {classes:?} coincide");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            tape.backward(fwd.loss)?;
            let mut grads = state.model.gradients(&tape, &fwd.vars)?;
            total += tape.scalar(fwd.loss);
            cls += tape.scalar(fwd.classification);
            if let Some(d) = fwd.drr {
                drr += tape.scalar(d);
            }
            state.adam.step(&mut state.model.params_mut(), &mut grads, &cfg.adam)?;
            used += 1;
        }
        if used == 0 {
            return Err(TartError::Training(format!(
                "all {} training episodes of epoch {epoch} were degenerate",
                cfg.episodes_per_epoch
            )));
        }
        let plan = cfg.plan(&split.val, cfg.val_episodes, val_seed, Stream::Validation);
        let val = evaluate(&state.model, corpus, features, &plan)?;
        state.epoch = epoch;
        if val.mean_accuracy > state.best_val_acc {
            state.best_val_acc = val.mean_accuracy;
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
        }
        let n = used as f64;
        let line = EpochLog {
            epoch,
            train_loss: total / n,
            cls_loss: cls / n,
            // adding 0.0 turns a -0.0 product into 0.0
            drr_term: lambda * (drr / n) + 0.0,
            lambda,
            val_accuracy: val.mean_accuracy,
            epochs_since_improvement: state.epochs_since_improvement,
            skipped_degenerate: skipped,
        };
        info!(
            "epoch {epoch}: loss {:.5} val {:.4} since-best {}",
            line.train_loss, line.val_accuracy, line.epochs_since_improvement
        );
        debug!("{line:?}");
        log.push(line);
        if state.epochs_since_improvement == 0 {
            best = state.clone();
            best_epoch = epoch;
        }
        run += 1;
        if state.epochs_since_improvement >= cfg.patience as u64 || cfg.max_epochs.is_some_and(|m| run >= m) {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, log })
}
