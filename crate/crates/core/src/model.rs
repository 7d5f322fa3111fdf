//! A complete few-shot classifier: encoder plus TART or PROTO head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EmbeddingTable, Encoder, EncoderVars, Features, MeanAffineEncoder, Vocab};
use crate::episodes::{Corpus, Episode, ExampleInput};
use crate::error::{Result, TartError};
use crate::head::{self, HeadConfig, HeadKind, PrototypeSet, ReferenceLayer};
use crate::seed::{self, Stream};
use crate::tensor::{Matrix, Tape, Var};

pub const PROJECTION: &str = "encoder.projection";
pub const BIAS: &str = "encoder.bias";
pub const EMBEDDINGS: &str = "encoder.embeddings";
pub const REFERENCE: &str = "reference.raw";

#[derive(Clone, Debug, PartialEq)]
pub struct TartModel {
    pub encoder: MeanAffineEncoder,
    /// Present exactly for the TART head.
    pub reference: Option<ReferenceLayer>,
    pub head: HeadConfig,
}

/// Everything needed to build a model except its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_way: usize,
    pub vocab: Option<Arc<Vocab>>,
    pub embeddings: Option<Arc<EmbeddingTable>>,
    pub head: HeadConfig,
}

impl ModelSpec {
    /// Fresh parameters drawn from the init stream of `run_seed`.
    pub fn init(&self, run_seed: u64) -> Result<TartModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(run_seed, Stream::Init, 0, 0));
        let encoder = MeanAffineEncoder::init(
            self.input_dim,
            self.output_dim,
            self.vocab.clone(),
            self.embeddings.clone(),
            &mut rng,
        )?;
        TartModel::new(self.kind, encoder, self.n_way, self.head, &mut rng)
    }
}

/// Parameter handles bound to one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub reference: Option<Var>,
}

impl ModelVars {
    /// Handles in [`TartModel::param_names`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut v = vec![self.encoder.projection, self.encoder.bias];
        v.extend(self.encoder.embeddings);
        v.extend(self.reference);
        v
    }
}

/// Graph of one episode.
#[derive(Clone, Debug)]
pub struct Forward {
    pub vars: ModelVars,
    pub prototypes: PrototypeSet,
    pub queries: Var,
    pub w: Option<Var>,
    /// `Q x N` query-to-prototype distances.
    pub distances: Var,
    pub classification: Var,
    /// Unweighted regularizer, TART only.
    pub drr: Option<Var>,
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub probabilities: Matrix,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

impl TartModel {
    pub fn new<R: Rng>(
        kind: HeadKind,
        encoder: MeanAffineEncoder,
        n_way: usize,
        head: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let e = encoder.output_dim();
        if n_way == 0 {
            return Err(TartError::Config("n_way must be positive".into()));
        }
        if kind == HeadKind::Tart && e < n_way {
            return Err(TartError::Config(format!(
                "reference dimension {e} must be at least n_way {n_way}"
            )));
        }
        let reference = (kind == HeadKind::Tart).then(|| ReferenceLayer::init(n_way, e, rng));
        Ok(TartModel {
            encoder,
            reference,
            head,
        })
    }

    pub fn kind(&self) -> HeadKind {
        if self.reference.is_some() {
            HeadKind::Tart
        } else {
            HeadKind::Proto
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![(PROJECTION, &self.encoder.projection), (BIAS, &self.encoder.bias)];
        if let Some(t) = self.encoder.embeddings.as_ref().filter(|t| t.trainable) {
            v.push((EMBEDDINGS, &t.vectors));
        }
        if let Some(r) = &self.reference {
            v.push((REFERENCE, &r.raw));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = vec![
            (PROJECTION, &mut self.encoder.projection),
            (BIAS, &mut self.encoder.bias),
        ];
        if let Some(t) = self.encoder.embeddings.as_mut().filter(|t| t.trainable) {
            v.push((EMBEDDINGS, &mut Arc::make_mut(t).vectors));
        }
        if let Some(r) = &mut self.reference {
            v.push((REFERENCE, &mut r.raw));
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            reference: self.reference.as_ref().map(|r| tape.param(r.raw.clone())),
        }
    }

    /// Prepares every corpus example for [`TartModel::forward`].
    pub fn featurize(&self, corpus: &Corpus) -> Result<Vec<Features>> {
        corpus
            .examples()
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let f = match &ex.input {
                    ExampleInput::Text(t) => self.encoder.featurize_text(t),
                    ExampleInput::Vector(v) => self.encoder.featurize_vector(v),
                };
                f.map_err(|e| TartError::Config(format!("corpus example {i}: {e}")))
            })
            .collect()
    }

    /// Builds the loss graph of `episode`. `features[i]` belongs to corpus
    /// example `i`.
    pub fn forward(&self, tape: &mut Tape, features: &[Features], episode: &Episode) -> Result<Forward> {
        if let Some(r) = &self.reference {
            if r.n_way() != episode.n_way {
                return Err(TartError::Config(format!(
                    "model has {} reference vectors but the episode is {}-way",
                    r.n_way(),
                    episode.n_way
                )));
            }
        }
        let vars = self.bind(tape);
        let pick = |items: &[crate::episodes::EpisodeItem]| -> Result<Vec<&Features>> {
            items
                .iter()
                .map(|it| {
                    features
                        .get(it.example)
                        .ok_or_else(|| TartError::Sampling(format!("example {} has no features", it.example)))
                })
                .collect()
        };
        let support = self
            .encoder
            .encode_batch(tape, &vars.encoder, &pick(&episode.support)?)?;
        let queries = self.encoder.encode_batch(tape, &vars.encoder, &pick(&episode.query)?)?;
        let prototypes = head::compute_prototypes(tape, support, &episode.support_classes(), episode.n_way)?;
        let w = match vars.reference {
            Some(r) => Some(head::compute_w(tape, &prototypes, r)?),
            None => None,
        };
        let distances = head::query_distances(tape, queries, &prototypes, w, &self.head)?;
        let classification = head::classification_loss(tape, distances, &episode.query_classes())?;
        let drr = match w {
            Some(w) => Some(head::drr_loss(tape, &prototypes, w, &self.head)?),
            None => None,
        };
        let loss = head::total_loss(tape, classification, drr, &self.head)?;
        Ok(Forward {
            vars,
            prototypes,
            queries,
            w,
            distances,
            classification,
            drr,
            loss,
        })
    }

    /// Classifies the queries of `episode`; ties go to the lowest class id.
    pub fn predict(&self, features: &[Features], episode: &Episode) -> Result<EpisodeOutcome> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, features, episode)?;
        let probabilities = head::softmax_neg(tape.value(fwd.distances));
        let predictions = head::argmax_rows(&probabilities);
        let correct = predictions
            .iter()
            .zip(episode.query_classes())
            .filter(|(p, y)| **p == *y)
            .count();
        Ok(EpisodeOutcome {
            accuracy: correct as f64 / predictions.len() as f64,
            probabilities,
            predictions,
        })
    }

    /// Embeds `inputs` and maps them through the transformation solved for
    /// `episode`. The PROTO head has no transformation and returns plain
    /// embeddings.
    pub fn transform(&self, features: &[Features], episode: &Episode, inputs: &[&Features]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, features, episode)?;
        let x = self.encoder.encode_batch(&mut tape, &fwd.vars.encoder, inputs)?;
        let out = match fwd.w {
            Some(w) => tape.matmul(x, w)?,
            None => x,
        };
        Ok(tape.value(out).clone())
    }

    /// Gradients of the last backward pass, in [`TartModel::param_names`] order.
    pub fn gradients(&self, tape: &Tape, vars: &ModelVars) -> Result<Vec<Matrix>> {
        vars.params()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .cloned()
                    .ok_or_else(|| TartError::Autodiff("backward has not run".into()))
            })
            .collect()
    }
}
