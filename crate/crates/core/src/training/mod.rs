//! Joint objective and the mini-batch Adam training loop.
//!
//! Each training sequence gets an `<EOS>` event appended, so a sequence of
//! `n` actions yields `n` next-event targets: the actions `2..=n` followed by
//! `<EOS>`. History rows, goal traces and margin traces are taken at the `n`
//! real actions.

mod checkpoint;
pub mod loss;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use loss::{action_margin, discounted_ce, goal_margin, lognormal_logpdf, RunningMax};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{cluster_actions, ActionEvent, Ctas, DataError, Dataset, GoalId, MarkId};
use crate::encoder;
use crate::heads;
use crate::model::{Model, ModelConfig, ModelError, ModelParams, TimeScales};
use crate::seed::derive_seed;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, sequence {sequence}: first non-finite node is {node}")]
    NonFinite {
        epoch: usize,
        sequence: usize,
        node: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimization and objective settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub gamma: f64,
    pub nll_weight: f64,
    /// Applied to the sum of the goal and action margin terms.
    pub margin_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            l2: 1e-3,
            gamma: 0.9,
            nll_weight: 1.0,
            margin_weight: 0.1,
            ce_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        loss::check_gamma(self.gamma)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 {
            return Err(TrainError::Config("lr must be positive and l2 nonnegative".into()));
        }
        if [self.nll_weight, self.margin_weight, self.ce_weight]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(TrainError::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn weighted_total(&self, t: &SequenceLoss) -> f64 {
        self.nll_weight * t.nll
            + self.margin_weight * (t.goal_margin + t.action_margin)
            + self.ce_weight * t.discounted_ce
    }
}

/// One training sequence with its shifted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub events: Vec<ActionEvent>,
    /// `events[1..]` followed by the `<EOS>` event.
    pub targets: Vec<ActionEvent>,
    pub goal: GoalId,
}

impl TrainingSequence {
    pub fn new(seq: &Ctas, eos: MarkId, eos_gap: f64) -> Result<Self> {
        let with_eos = seq.append_eos(eos, eos_gap)?;
        Ok(Self {
            events: seq.events().to_vec(),
            targets: with_eos.events()[1..].to_vec(),
            goal: seq.goal(),
        })
    }
}

/// Prepared training split: sequences plus each goal's action set.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub sequences: Vec<TrainingSequence>,
    pub goal_marks: Vec<Vec<MarkId>>,
}

impl TrainingSet {
    pub fn new(train: &Dataset, eos_gap: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let sequences = train
            .sequences
            .iter()
            .map(|s| TrainingSequence::new(s, train.eos(), eos_gap))
            .collect::<Result<_>>()?;
        Ok(Self {
            sequences,
            goal_marks: train.goal_mark_sets(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Unweighted loss terms of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceLoss {
    pub nll: f64,
    pub goal_margin: f64,
    pub action_margin: f64,
    pub discounted_ce: f64,
    pub total: f64,
}

/// Per-sequence means of each term over a pass, with the per-sequence rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub goal_margin: f64,
    pub action_margin: f64,
    pub discounted_ce: f64,
    pub total: f64,
    pub per_sequence: Vec<SequenceLoss>,
}

impl LossReport {
    fn from_rows(per_sequence: Vec<SequenceLoss>) -> Self {
        let n = per_sequence.len().max(1) as f64;
        let mean = |f: fn(&SequenceLoss) -> f64| per_sequence.iter().map(f).sum::<f64>() / n;
        Self {
            nll: mean(|r| r.nll),
            goal_margin: mean(|r| r.goal_margin),
            action_margin: mean(|r| r.action_margin),
            discounted_ce: mean(|r| r.discounted_ce),
            total: mean(|r| r.total),
            per_sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossReport,
}

/// Graph nodes of the four loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub nll: Var,
    pub goal_margin: Var,
    pub action_margin: Var,
    pub discounted_ce: Var,
    pub total: Var,
}

/// Records every parameter as a named trainable leaf.
pub fn bind_params(g: &mut Graph, p: &ModelParams<Tensor>) -> ModelParams<Var> {
    p.map(&mut |name, t| g.param(name, t))
}

/// Builds the objective of one sequence on `g`.
pub fn sequence_terms(
    g: &mut Graph,
    vars: &ModelParams<Var>,
    model: &Model,
    seq: &TrainingSequence,
    goal_marks: &[MarkId],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let s = encoder::encode(g, &seq.events, &model.scales, &vars.encoder, &model.config)?;
    let h = &vars.heads;

    let ml = heads::mark_logits_graph(g, s, h)?;
    let lsm = g.log_softmax(ml)?;
    let targets: Vec<usize> = seq.targets.iter().map(|e| e.mark.0).collect();
    let mark_nll = loss::pick_nll_graph(g, lsm, &targets)?;
    let clusters = seq
        .events
        .iter()
        .map(|e| model.cluster_of(e.mark))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (mu, sigma2) = heads::flow_graph(g, s, &clusters, h, model.log_delta_scale())?;
    let deltas: Vec<f64> = seq.targets.iter().map(|e| e.delta).collect();
    let gap_nll = loss::gap_nll_graph(g, mu, sigma2, &deltas)?;
    let nll = g.add(mark_nll, gap_nll)?;

    let gl = heads::goal_logits_graph(g, s, h)?;
    let gp = g.softmax(gl)?;
    let goal_margin = loss::margin_graph(g, gp, &[seq.goal.0])?;
    let mp = g.softmax(ml)?;
    let keep: Vec<usize> = goal_marks.iter().map(|m| m.0).collect();
    let action_margin = loss::margin_graph(g, mp, &keep)?;
    let discounted_ce = loss::discounted_ce_graph(g, gl, seq.goal.0, cfg.gamma)?;

    let a = g.scale(nll, cfg.nll_weight);
    let margins = g.add(goal_margin, action_margin)?;
    let b = g.scale(margins, cfg.margin_weight);
    let c = g.scale(discounted_ce, cfg.ce_weight);
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(LossTerms {
        nll,
        goal_margin,
        action_margin,
        discounted_ce,
        total,
    })
}

fn read_terms(g: &Graph, t: &LossTerms, cfg: &TrainConfig) -> SequenceLoss {
    let mut row = SequenceLoss {
        nll: g.item(t.nll),
        goal_margin: g.item(t.goal_margin),
        action_margin: g.item(t.action_margin),
        discounted_ce: g.item(t.discounted_ce),
        total: 0.0,
    };
    row.total = cfg.weighted_total(&row);
    row
}

fn non_finite(g: &Graph, epoch: usize, sequence: usize) -> TrainError {
    let node = match g.first_non_finite() {
        Some((i, op, Some(label))) => format!("#{i} {op} ({label})"),
        Some((i, op, None)) => format!("#{i} {op}"),
        None => "unknown".into(),
    };
    TrainError::NonFinite {
        epoch,
        sequence,
        node,
    }
}

/// Loss terms and flattened parameter gradients (in `named()` order) of one
/// sequence.
pub fn sequence_gradient(
    model: &Model,
    data: &TrainingSet,
    index: usize,
    cfg: &TrainConfig,
) -> Result<(SequenceLoss, Vec<Vec<f64>>)> {
    let seq = &data.sequences[index];
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &model.params);
    let terms = sequence_terms(&mut g, &vars, model, seq, &data.goal_marks[seq.goal.0], cfg)?;
    let row = read_terms(&g, &terms, cfg);
    if !g.item(terms.total).is_finite() {
        return Err(non_finite(&g, 0, index));
    }
    g.backward(terms.total)?;
    let grads = vars
        .named()
        .into_iter()
        .zip(model.params.named())
        .map(|((_, v), (_, t))| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((row, grads))
}

/// Loss terms of one sequence on frozen parameters.
pub fn sequence_loss(model: &Model, data: &TrainingSet, index: usize, cfg: &TrainConfig) -> Result<SequenceLoss> {
    let seq = &data.sequences[index];
    let mut g = Graph::new();
    let vars = model.params.map(&mut |_, t| g.constant(t.shape(), t.values().to_vec()).expect("valid tensor"));
    let terms = sequence_terms(&mut g, &vars, model, seq, &data.goal_marks[seq.goal.0], cfg)?;
    Ok(read_terms(&g, &terms, cfg))
}

/// Joint negative log-likelihood of one sequence on frozen parameters.
pub fn sequence_nll(model: &Model, seq: &TrainingSequence) -> Result<f64> {
    let data = TrainingSet {
        sequences: vec![seq.clone()],
        goal_marks: vec![Vec::new(); model.goals.len()],
    };
    Ok(sequence_loss(model, &data, 0, &TrainConfig::default())?.nll)
}

/// Loss report over a whole set without updating parameters.
pub fn evaluate_loss(model: &Model, data: &TrainingSet, cfg: &TrainConfig) -> Result<LossReport> {
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| sequence_loss(model, data, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::from_rows(rows))
}

/// Clusters marks, fixes time scales and the `<EOS>` gap on the training
/// split, and initializes parameters.
pub fn initialize(train: &Dataset, config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let clusters = cluster_actions(train, config.clusters, derive_seed(seed, "cluster"))?;
    Ok(Model::new(
        config,
        train.marks.clone(),
        train.goals.clone(),
        clusters,
        TimeScales::from_dataset(train),
        train.median_delta(),
        derive_seed(seed, "init"),
    )?)
}

/// Runs `cfg.epochs` passes of shuffled mini-batch Adam. `on_epoch` sees the
/// report and model after every epoch; returning an error stops training.
pub fn train(
    model: &mut Model,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            l2: cfg.l2,
            ..AdamConfig::default()
        },
        &model.params.sizes(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut rows = vec![SequenceLoss::default(); data.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| sequence_gradient(model, data, i, cfg))
                .collect();
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (row, grads) = r.map_err(|e| match e {
                    TrainError::NonFinite { node, .. } => TrainError::NonFinite {
                        epoch,
                        sequence: i,
                        node,
                    },
                    other => other,
                })?;
                rows[i] = row;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;
            for v in grads.iter_mut().flatten() {
                *v *= scale;
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut named = model.params.named_mut();
            let mut slices: Vec<&mut [f64]> = named.iter_mut().map(|(_, t)| t.values_mut()).collect();
            adam.step(&mut slices, &grad_refs)?;
            if let Some((name, _)) = model.params.named().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    sequence: batch[0],
                    node: format!("parameter {name} after update"),
                });
            }
        }
        let report = EpochReport {
            epoch,
            loss: LossReport::from_rows(rows),
        };
        on_epoch(&report, model)?;
        history.push(report);
    }
    Ok(history)
}
