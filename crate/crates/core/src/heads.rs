//! Output heads on a history row `s_k`: the next-mark softmax, the
//! cluster-conditioned log-normal gap distribution, and the goal classifier.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{param_struct, ModelError, Result};
use crate::tensor::{kernels, Graph, Var};

/// Floor added to the softplus variance.
pub const SIGMA2_FLOOR: f64 = 1e-6;

param_struct!(
    /// Mark head (`D×|C|`), cluster table (`M×D`), flow projections, and the
    /// one-hidden-layer goal classifier.
    HeadParams {
        mark_weight,
        mark_bias,
        cluster_embed,
        w_mu,
        b_mu,
        w_sigma,
        b_sigma,
        goal_weight,
        goal_bias,
        goal_out,
    }
);

/// Log-normal parameters of the next gap: `ln Δ ~ N(mu, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl FlowParams {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Deterministic gap estimate used for time prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimator {
    #[default]
    Median,
    Mean,
}

impl FromStr for PointEstimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown estimator {other:?} (expected median or mean)")),
        }
    }
}

impl std::fmt::Display for PointEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Median => "median",
            Self::Mean => "mean",
        })
    }
}

fn check_row(s: &[f64], h: &HeadParams<crate::tensor::Tensor>) -> Result<()> {
    let d = h.mark_weight.rows();
    if s.len() != d {
        return Err(ModelError::Tensor(crate::tensor::TensorError::Dimension {
            op: "heads",
            lhs: vec![s.len()],
            rhs: vec![d],
        }));
    }
    Ok(())
}

pub fn mark_logits(s: &[f64], h: &HeadParams<crate::tensor::Tensor>) -> Result<Vec<f64>> {
    check_row(s, h)?;
    let n = h.mark_weight.cols();
    let mut z = kernels::vecmat(s, h.mark_weight.values(), n);
    for (zi, b) in z.iter_mut().zip(h.mark_bias.values()) {
        *zi += b;
    }
    Ok(z)
}

pub fn mark_distribution(s: &[f64], h: &HeadParams<crate::tensor::Tensor>) -> Result<Vec<f64>> {
    Ok(kernels::softmax(&mark_logits(s, h)?)?)
}

/// Gap distribution after an event in `cluster`. `log_scale` shifts `mu`
/// back from normalized to raw time units.
pub fn flow_params(
    s: &[f64],
    cluster: usize,
    h: &HeadParams<crate::tensor::Tensor>,
    log_scale: f64,
) -> Result<FlowParams> {
    check_row(s, h)?;
    let m = h.cluster_embed.rows();
    if cluster >= m {
        return Err(ModelError::Contract(format!(
            "cluster {cluster} out of range for {m} clusters"
        )));
    }
    let sz: Vec<f64> = s.iter().zip(h.cluster_embed.row(cluster)).map(|(a, b)| a * b).collect();
    let mu = kernels::dot(&sz, h.w_mu.values()) + h.b_mu.values()[0] + log_scale;
    let a = kernels::dot(&sz, h.w_sigma.values()) + h.b_sigma.values()[0];
    Ok(FlowParams {
        mu,
        sigma2: kernels::softplus(a) + SIGMA2_FLOOR,
    })
}

pub fn goal_logits(s: &[f64], h: &HeadParams<crate::tensor::Tensor>) -> Result<Vec<f64>> {
    check_row(s, h)?;
    let hidden = h.goal_weight.cols();
    let mut a = kernels::vecmat(s, h.goal_weight.values(), hidden);
    for (ai, b) in a.iter_mut().zip(h.goal_bias.values()) {
        *ai = (*ai + b).max(0.0);
    }
    Ok(kernels::vecmat(&a, h.goal_out.values(), h.goal_out.cols()))
}

pub fn goal_scores(s: &[f64], h: &HeadParams<crate::tensor::Tensor>) -> Result<Vec<f64>> {
    Ok(kernels::softmax(&goal_logits(s, h)?)?)
}

/// Draws `exp(mu + sigma·z)` with `z` standard normal.
pub fn sample_delta(f: &FlowParams, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (f.mu + f.sigma() * z).exp()
}

pub fn point_delta(f: &FlowParams, estimator: PointEstimator) -> f64 {
    match estimator {
        PointEstimator::Median => f.mu.exp(),
        PointEstimator::Mean => (f.mu + 0.5 * f.sigma2).exp(),
    }
}

pub fn next_time(t: f64, delta: f64) -> Result<f64> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(ModelError::Contract(format!("gap {delta} must be positive")));
    }
    Ok(t + delta)
}

/// Mark logits for every history row (`K×|C|`).
pub fn mark_logits_graph(g: &mut Graph, s: Var, h: &HeadParams<Var>) -> Result<Var> {
    let z = g.matmul(s, h.mark_weight)?;
    Ok(g.add_row(z, h.mark_bias)?)
}

/// `(mu, sigma2)` columns (`K×1` each); row `k` is conditioned on `clusters[k]`.
pub fn flow_graph(
    g: &mut Graph,
    s: Var,
    clusters: &[usize],
    h: &HeadParams<Var>,
    log_scale: f64,
) -> Result<(Var, Var)> {
    let z = g.gather_rows(h.cluster_embed, clusters)?;
    let sz = g.mul(s, z)?;
    let mu = g.matmul(sz, h.w_mu)?;
    let mu = g.add_row(mu, h.b_mu)?;
    let mu = g.add_scalar(mu, log_scale);
    let a = g.matmul(sz, h.w_sigma)?;
    let a = g.add_row(a, h.b_sigma)?;
    let sp = g.softplus(a);
    Ok((mu, g.add_scalar(sp, SIGMA2_FLOOR)))
}

/// Goal logits for every history row (`K×|G|`).
pub fn goal_logits_graph(g: &mut Graph, s: Var, h: &HeadParams<Var>) -> Result<Var> {
    let a = g.matmul(s, h.goal_weight)?;
    let a = g.add_row(a, h.goal_bias)?;
    let a = g.relu(a);
    Ok(g.matmul(a, h.goal_out)?)
}
