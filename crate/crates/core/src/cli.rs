//! The `tart` command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::{load_embeddings, EmbeddingTable, Vocab};
use crate::episodes::{
    load_corpus, load_split, make_synthetic_corpus, sample_episode, write_synthetic, ClassSplit, Corpus, Episode,
    EpisodeItem, Example, ExampleInput, SynthConfig,
};
use crate::error::{Result, TartError};
use crate::head::HeadConfig;
use crate::model::ModelSpec;
use crate::seed::{self, Stream};
use crate::tensor::gradcheck::{self, GroupReport};
use crate::tensor::{Fault, Matrix, Tape};
use crate::training::{self, evaluate, load_checkpoint, save_checkpoint, EvalReport};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "tart",
    version,
    about = "Few-shot classification with task-adaptive reference transformation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed, then evaluate each on the test classes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences on a toy episode.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic vector corpus and its class split.
    Synth(SynthArgs),
    /// Write transformed embeddings of a corpus as tab-separated values.
    ExportEmbeddings(ExportArgs),
}

/// Settings that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `tart` or `proto`.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Parallel evaluation workers.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Any config key, as `key=value`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| TartError::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        let pairs = [
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("head", self.head.clone()),
            ("lr", self.lr.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    /// Which classes to draw episodes from.
    #[arg(long, value_enum, default_value_t = SplitPart::Test)]
    pub split: SplitPart,
    /// Report file; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Takes the distance, lambda and cosine floor from this file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corrupts the inverse backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Per-coordinate spread of clustered class means around their shared center.
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub informative_dim: Option<usize>,
    #[arg(long)]
    pub nuisance_scale: Option<f64>,
    #[arg(long)]
    pub shared_scale: Option<f64>,
    #[arg(long)]
    pub separated_scale: Option<f64>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub clustered_per_block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_classes: self.n_classes.unwrap_or(d.n_classes),
            per_class: self.per_class.unwrap_or(d.per_class),
            inter_class_gap: self.gap.unwrap_or(d.inter_class_gap),
            noise: self.noise.unwrap_or(d.noise),
            dim: self.dim.unwrap_or(d.dim),
            informative_dim: self.informative_dim.unwrap_or(d.informative_dim),
            nuisance_scale: self.nuisance_scale.unwrap_or(d.nuisance_scale),
            shared_scale: self.shared_scale.unwrap_or(d.shared_scale),
            separated_scale: self.separated_scale.unwrap_or(d.separated_scale),
            block_size: self.block_size.unwrap_or(d.block_size),
            clustered_per_block: self.clustered_per_block.unwrap_or(d.clustered_per_block),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to export; defaults to the configured one.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the episode whose transformation is applied.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Data and model layout resolved from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Workspace {
    pub corpus: Corpus,
    pub split: ClassSplit,
    pub spec: ModelSpec,
}

/// Loads corpus, split and embeddings and derives the model layout.
pub fn load_workspace(cfg: &RunConfig) -> Result<Workspace> {
    cfg.validate()?;
    let corpus_path = cfg.corpus.as_ref().expect("validated");
    let corpus = load_corpus(corpus_path)?;
    let split = load_split(cfg.split.as_ref().expect("validated"))?;
    split.validate_against(&corpus)?;
    let (input_dim, vocab, embeddings) = match (corpus.vector_dim(), &cfg.embeddings) {
        (Some(d), emb) => {
            if emb.is_some() {
                warn!("corpus holds vectors; ignoring the embeddings file");
            }
            (d, None, None)
        }
        (None, Some(path)) => {
            let (vocab, mut table) = load_embeddings(path, cfg.vocab_limit)?;
            table.trainable = cfg.train_embeddings;
            (table.dim(), Some(Arc::new(vocab)), Some(Arc::new(table)))
        }
        (None, None) => {
            return Err(TartError::Config(format!(
                "corpus {} holds text, which needs an embeddings file",
                corpus_path.display()
            )))
        }
    };
    let spec = ModelSpec {
        kind: cfg.head_kind,
        input_dim,
        output_dim: cfg.dim,
        n_way: cfg.train.n_way,
        vocab,
        embeddings,
        head: cfg.head,
    };
    Ok(Workspace { corpus, split, spec })
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| TartError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| TartError::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(&a),
    }
}

/// Trains per seed. Writes, under the output directory, `effective.cfg`,
/// `seed-<s>/{checkpoint.tart,train_log.jsonl,report.json}` and a pooled
/// `report.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let ws = load_workspace(&cfg)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("effective.cfg"), cfg.render())?;
    let mut reports = Vec::new();
    for &s in &cfg.seeds {
        info!("training seed {s}");
        let outcome = training::train(&ws.spec, &ws.corpus, &ws.split, &cfg.train, s)?;
        let dir = cfg.output_dir.join(format!("seed-{s}"));
        create_dir(&dir)?;
        save_checkpoint(&outcome.best, &dir.join("checkpoint.tart"))?;
        let log: String = outcome.log.iter().map(|l| l.to_json_line()).collect();
        write_file(&dir.join("train_log.jsonl"), log)?;
        let features = outcome.best.model.featurize(&ws.corpus)?;
        let plan = cfg.train.plan(&ws.split.test, cfg.train.test_episodes, s, Stream::Test);
        let report = evaluate(&outcome.best.model, &ws.corpus, &features, &plan)?;
        write_file(&dir.join("report.json"), report.to_json())?;
        println!(
            "seed {s}: best epoch {}, test accuracy {:.4} ± {:.4}",
            outcome.best_epoch, report.mean_accuracy, report.ci95
        );
        reports.push(report);
    }
    let pooled = EvalReport::combine(&reports);
    write_file(&cfg.output_dir.join("report.json"), pooled.to_json())?;
    println!("mean test accuracy {:.4} ± {:.4}", pooled.mean_accuracy, pooled.ci95);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let ws = load_workspace(&cfg)?;
    let state = load_checkpoint(&args.checkpoint, &ws.spec)?;
    let features = state.model.featurize(&ws.corpus)?;
    let labels = match args.split {
        SplitPart::Train => &ws.split.train,
        SplitPart::Val => &ws.split.val,
        SplitPart::Test => &ws.split.test,
    };
    let s = cfg.seeds[0];
    let plan = cfg.train.plan(labels, args.episodes, s, Stream::Test);
    let report = evaluate(&state.model, &ws.corpus, &features, &plan)?;
    let json = report.to_json();
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn fixture_corpus() -> Corpus {
    let sentences = [
        ("sports", "the team won the final match"),
        ("sports", "a late goal decided the match"),
        ("sports", "team coach praised the goal"),
        ("sports", "final whistle ended a tense game"),
        ("markets", "stocks rallied as rates fell"),
        ("markets", "bond rates rose on inflation data"),
        ("markets", "the index fell after weak earnings"),
        ("markets", "earnings lifted stocks and bonds"),
        ("weather", "heavy rain expected across the coast"),
        ("weather", "a cold front brings snow and rain"),
        ("weather", "sunny skies after the storm"),
        ("weather", "storm warning issued for the coast"),
    ];
    Corpus::new(
        sentences
            .iter()
            .map(|(l, t)| Example {
                input: ExampleInput::Text(t.to_string()),
                label: l.to_string(),
            })
            .collect(),
    )
}

/// Full-loss gradient check on a 3-way 2-shot episode with 8-dimensional
/// embeddings, trainable word vectors and two queries per class. Returns the
/// worst errors per parameter group.
pub fn gradcheck_fixture(head: HeadConfig, fault: Option<Fault>) -> Result<Vec<GroupReport>> {
    let corpus = fixture_corpus();
    let mut words: Vec<String> = corpus
        .examples()
        .iter()
        .flat_map(|e| match &e.input {
            ExampleInput::Text(t) => crate::encoder::tokenize(t),
            ExampleInput::Vector(_) => Vec::new(),
        })
        .collect();
    words.sort();
    words.dedup();
    let vocab = Vocab::new(words)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 4;
    let data = (0..vocab.len() * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let table = EmbeddingTable {
        vectors: Matrix::from_vec(vocab.len(), d, data)?,
        trainable: true,
    };
    let spec = ModelSpec {
        kind: crate::head::HeadKind::Tart,
        input_dim: d,
        output_dim: 8,
        n_way: 3,
        vocab: Some(Arc::new(vocab)),
        embeddings: Some(Arc::new(table)),
        head,
    };
    let model = spec.init(5)?;
    let features = model.featurize(&corpus)?;
    let labels: Vec<String> = corpus.labels().map(str::to_string).collect();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (class, label) in labels.iter().enumerate() {
        for (j, &example) in corpus.indices_of(label).iter().enumerate() {
            let item = EpisodeItem { example, class };
            if j < 2 {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    let episode = Episode {
        n_way: 3,
        k_shot: 2,
        q_queries: 2,
        support,
        query,
        labels,
    };

    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let fwd = model.forward(&mut tape, &features, &episode)?;
    tape.backward(fwd.loss)?;
    let analytic = model.gradients(&tape, &fwd.vars)?;

    let names = model.param_names();
    let start: Vec<Matrix> = model.params().into_iter().map(|(_, m)| m.clone()).collect();
    let numeric = gradcheck::central_difference(&start, gradcheck::DEFAULT_STEP, |ps| {
        let mut m = model.clone();
        for ((_, slot), p) in m.params_mut().into_iter().zip(ps) {
            *slot = p.clone();
        }
        let mut t = Tape::new();
        let f = m.forward(&mut t, &features, &episode)?;
        Ok(t.scalar(f.loss))
    })?;
    Ok(gradcheck::compare(&names, &analytic, &numeric))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let head = match &args.config {
        Some(p) => RunConfig::load(p)?.head,
        None => HeadConfig::default(),
    };
    let fault = args.inject_fault.then_some(Fault::InverseBackwardSign);
    let reports = gradcheck_fixture(head, fault)?;
    for r in &reports {
        println!(
            "{:<20} entries {:>3}  max rel err {:.3e}  max abs err {:.3e}",
            r.name, r.entries, r.max_relative_error, r.max_absolute_error
        );
    }
    let worst = gradcheck::worst(&reports);
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(TartError::Numerical(format!(
            "gradient check failed: relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
        )))
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (corpus, meta) = make_synthetic_corpus(&args.to_config())?;
    write_synthetic(&corpus, &meta, &args.out)?;
    println!(
        "wrote {} examples of {} classes to {}",
        corpus.len(),
        meta.labels.len(),
        args.out.display()
    );
    Ok(())
}

/// Writes one line per corpus example: the label, then the example's
/// embedding mapped through the transformation of one sampled episode.
pub fn cmd_export_embeddings(args: &ExportArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(c) = &args.corpus {
        cfg.corpus = Some(c.clone());
    }
    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| TartError::Config("no corpus given".into()))?;
    let corpus = load_corpus(&corpus_path)?;
    if corpus.is_empty() {
        return Err(TartError::EmptyInput(format!(
            "corpus {} has no examples",
            corpus_path.display()
        )));
    }
    let ws = load_workspace(&cfg)?;
    let state = load_checkpoint(&args.checkpoint, &ws.spec)?;
    let features = state.model.featurize(&corpus)?;
    let labels: Vec<String> = corpus.labels().map(str::to_string).collect();
    let t = &cfg.train;
    let s = seed::derive(args.seed, Stream::Export, 0, 0);
    let episode = sample_episode(&corpus, &labels, t.n_way, t.k_shot, 1, s)?;
    let inputs: Vec<_> = features.iter().collect();
    let coords = state.model.transform(&features, &episode, &inputs)?;
    let mut out = String::new();
    for (i, ex) in corpus.examples().iter().enumerate() {
        out.push_str(&ex.label);
        for v in coords.row(i) {
            write!(out, "\t{v}").expect("writing to a string");
        }
        out.push('\n');
    }
    write_file(&args.out, out)?;
    println!(
        "wrote {} rows of {} coordinates to {}",
        corpus.len(),
        coords.cols(),
        args.out.display()
    );
    Ok(())
}
