//! Model configuration, parameter containers, and the frozen model bundle
//! (parameters plus everything needed to interpret them).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClusterMap, DataError, Dataset, Vocab};
use crate::encoder::{BlockParams, EncoderParams, InputParams, NormParams};
use crate::heads::{FlowParams, HeadParams, PointEstimator};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("capacity: sequence of {len} events exceeds the positional table of {max}")]
    Capacity { len: usize, max: usize },
    #[error("contract: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Generates a parameter struct whose fields all share one type, plus
/// order-preserving `map`, `named` and `named_mut` helpers.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            pub fn named(&self, prefix: &str) -> Vec<(String, &T)> {
                vec![$((format!("{prefix}{}", stringify!($field)), &self.$field),)*]
            }

            pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut T)> {
                vec![$((format!("{prefix}{}", stringify!($field)), &mut self.$field),)*]
            }
        }
    };
}
pub(crate) use param_struct;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden width `D`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of the goal MLP; `0` means `dim`.
    pub goal_hidden: usize,
    /// Rows of the positional table.
    pub max_len: usize,
    /// Number of action clusters `M`.
    pub clusters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            blocks: 2,
            heads: 2,
            goal_hidden: 0,
            max_len: 512,
            clusters: 8,
        }
    }
}

impl ModelConfig {
    pub fn goal_width(&self) -> usize {
        if self.goal_hidden == 0 {
            self.dim
        } else {
            self.goal_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Contract(format!(
                "dim {} must be at least 2 and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.max_len < 2 || self.clusters == 0 {
            return Err(ModelError::Contract(
                "blocks, clusters must be positive and max_len at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Corpus-level normalizers: mean event time and mean gap of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScales {
    pub time: f64,
    pub delta: f64,
}

impl Default for TimeScales {
    fn default() -> Self {
        Self {
            time: 1.0,
            delta: 1.0,
        }
    }
}

impl TimeScales {
    pub fn from_dataset(d: &Dataset) -> Self {
        let (time, delta) = d.time_scales();
        Self { time, delta }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub heads: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            heads: self.heads.map("heads.", f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut v = self.encoder.named();
        v.extend(self.heads.named("heads."));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut v = self.encoder.named_mut();
        v.extend(self.heads.named_mut("heads."));
        v
    }
}

impl ModelParams<Tensor> {
    /// Uniform(−1/√D, 1/√D) weight tables, zero biases, unit norm gains.
    pub fn init(
        config: &ModelConfig,
        n_marks: usize,
        n_goals: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.goal_width();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Ok(Tensor::new(shape, v)?.with_grad())
        };
        let zeros = |shape: &[usize]| Tensor::zeros(shape).with_grad();
        let ones = |n: usize| Tensor::vector(vec![1.0; n]).with_grad();

        let input = InputParams {
            mark_embed: uniform(&[n_marks, d])?,
            w_time: uniform(&[1, d])?,
            w_delta: uniform(&[1, d])?,
            b_y: zeros(&[d]),
            pos_embed: uniform(&[config.max_len, d])?,
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(BlockParams {
                ln1_gain: ones(d),
                ln1_bias: zeros(&[d]),
                w_q: uniform(&[d, d])?,
                w_k: uniform(&[d, d])?,
                w_v: uniform(&[d, d])?,
                ln2_gain: ones(d),
                ln2_bias: zeros(&[d]),
                ffn_w_in: uniform(&[d])?,
                ffn_b_in: zeros(&[d]),
                ffn_w_out: uniform(&[d])?,
                ffn_b_out: zeros(&[d]),
            });
        }
        let encoder = EncoderParams {
            input,
            blocks,
            final_norm: NormParams {
                gain: ones(d),
                bias: zeros(&[d]),
            },
        };
        let heads = HeadParams {
            mark_weight: uniform(&[d, n_marks])?,
            mark_bias: zeros(&[n_marks]),
            cluster_embed: uniform(&[config.clusters, d])?,
            w_mu: uniform(&[d, 1])?,
            b_mu: zeros(&[1]),
            w_sigma: uniform(&[d, 1])?,
            b_sigma: zeros(&[1]),
            goal_weight: uniform(&[d, h])?,
            goal_bias: zeros(&[h]),
            goal_out: uniform(&[h, n_goals])?,
        };
        Ok(Self { encoder, heads })
    }

    pub fn n_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Replaces every tensor from `(name, tensor)` pairs; names and shapes
    /// must match this skeleton exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != entries.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                entries.len()
            )));
        }
        for ((name, slot), (ename, t)) in slots.iter_mut().zip(entries) {
            if *name != ename || slot.shape() != t.shape() {
                return Err(ModelError::Contract(format!(
                    "parameter {ename} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t.with_grad();
        }
        Ok(())
    }
}

/// Trained parameters together with the vocabularies, clusters and scales
/// they were fitted against.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
    pub marks: Vocab,
    pub goals: Vocab,
    pub clusters: ClusterMap,
    pub scales: TimeScales,
    /// Gap used for the `<EOS>` event appended to training sequences.
    pub eos_gap: f64,
    pub estimator: PointEstimator,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        marks: Vocab,
        goals: Vocab,
        clusters: ClusterMap,
        scales: TimeScales,
        eos_gap: f64,
        seed: u64,
    ) -> Result<Self> {
        if clusters.m != config.clusters {
            return Err(ModelError::Contract(format!(
                "cluster map has {} clusters but the config asks for {}",
                clusters.m, config.clusters
            )));
        }
        let params = ModelParams::init(&config, marks.len(), goals.len(), seed)?;
        Ok(Self {
            config,
            params,
            marks,
            goals,
            clusters,
            scales,
            eos_gap,
            estimator: PointEstimator::Median,
        })
    }

    pub fn eos(&self) -> crate::data::MarkId {
        crate::data::MarkId(self.marks.len() - 1)
    }

    pub fn cluster_of(&self, mark: crate::data::MarkId) -> Result<usize> {
        self.clusters.cluster_of(mark).ok_or_else(|| {
            ModelError::Contract(format!(
                "mark {:?} has no cluster",
                self.marks.name(mark.0)
            ))
        })
    }

    /// Log of the gap scale, added to every predicted log-gap mean.
    pub fn log_delta_scale(&self) -> f64 {
        self.scales.delta.ln()
    }

    /// Next-mark distribution, log-normal gap parameters, and goal
    /// distribution from one history embedding row, given the current
    /// event's cluster.
    pub fn predict(&self, s: &[f64], cluster: usize) -> Result<(Vec<f64>, FlowParams, Vec<f64>)> {
        let h = &self.params.heads;
        Ok((
            crate::heads::mark_distribution(s, h)?,
            crate::heads::flow_params(s, cluster, h, self.log_delta_scale())?,
            crate::heads::goal_scores(s, h)?,
        ))
    }
}
