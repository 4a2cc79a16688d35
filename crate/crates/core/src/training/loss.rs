//! Loss terms. Plain functions operate on already computed probability
//! traces; the `*_graph` variants record the same quantities on a [`Graph`].

use std::f64::consts::PI;

use crate::data::MarkId;
use crate::heads::FlowParams;
use crate::tensor::{Graph, TensorError, Var};

use super::{Result, TrainError};

/// Log density of a log-normal gap.
pub fn lognormal_logpdf(delta: f64, f: &FlowParams) -> crate::tensor::Result<f64> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(TensorError::Domain {
            op: "lognormal_logpdf",
            index: 0,
            value: delta,
        });
    }
    let y = delta.ln();
    Ok(-y - 0.5 * (2.0 * PI * f.sigma2).ln() - (y - f.mu).powi(2) / (2.0 * f.sigma2))
}

/// Best-so-far probability per tracked item within one sequence.
#[derive(Debug, Clone, Default)]
pub struct RunningMax {
    best: Vec<f64>,
}

impl RunningMax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.best.clear();
    }

    pub fn best(&self) -> &[f64] {
        &self.best
    }

    /// Hinge penalty of `current` against the maxima of earlier steps, then
    /// folds `current` into the maxima. The first observation costs nothing.
    pub fn observe(&mut self, current: &[f64]) -> f64 {
        if self.best.is_empty() {
            self.best = current.to_vec();
            return 0.0;
        }
        let mut penalty = 0.0;
        for (b, &p) in self.best.iter_mut().zip(current) {
            penalty += (*b - p).max(0.0);
            *b = b.max(p);
        }
        penalty
    }
}

/// Ranking penalty on the true goal's probability trace.
pub fn goal_margin(trace: &[f64]) -> f64 {
    let mut rm = RunningMax::new();
    trace.iter().map(|&p| rm.observe(&[p])).sum()
}

/// Ranking penalty summed over the goal's action set. `traces[k]` is the mark
/// distribution at step `k`.
pub fn action_margin(traces: &[Vec<f64>], goal_marks: &[MarkId]) -> f64 {
    let mut rm = RunningMax::new();
    traces
        .iter()
        .map(|dist| {
            let cur: Vec<f64> = goal_marks.iter().map(|m| dist[m.0]).collect();
            rm.observe(&cur)
        })
        .sum()
}

/// `Σ_k γ^k · ce[k-1]` for `k = 1..`.
pub fn discounted_ce(ce: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let mut w = 1.0;
    Ok(ce
        .iter()
        .map(|c| {
            w *= gamma;
            w * c
        })
        .sum())
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(TrainError::Config(format!("discount {gamma} must lie in [0, 1]")));
    }
    Ok(())
}

/// Running-max hinge over the columns `keep` of a `K×cols` probability matrix.
pub fn margin_graph(g: &mut Graph, probs: Var, keep: &[usize]) -> Result<Var> {
    let (rows, cols) = (g.shape(probs)[0], g.shape(probs)[1]);
    let mut total = g.scalar(0.0);
    if rows < 2 || keep.is_empty() {
        return Ok(total);
    }
    let row = |g: &mut Graph, k: usize| {
        let idx: Vec<usize> = keep.iter().map(|c| k * cols + c).collect();
        g.gather(probs, &idx, &[keep.len()])
    };
    let mut best = row(g, 0)?;
    for k in 1..rows {
        let cur = row(g, k)?;
        let gap = g.sub(best, cur)?;
        let hinge = g.relu(gap);
        let s = g.sum(hinge);
        total = g.add(total, s)?;
        best = g.maximum(best, cur)?;
    }
    Ok(total)
}

/// Negative log-normal log density summed over rows of `mu`/`sigma2`
/// columns against the observed gaps.
pub fn gap_nll_graph(g: &mut Graph, mu: Var, sigma2: Var, deltas: &[f64]) -> Result<Var> {
    let n = deltas.len();
    let mut constant = 0.0;
    let mut logs = Vec::with_capacity(n);
    for (i, &d) in deltas.iter().enumerate() {
        if d.is_nan() || d <= 0.0 {
            return Err(TensorError::Domain {
                op: "lognormal_logpdf",
                index: i,
                value: d,
            }
            .into());
        }
        let y = d.ln();
        constant += y + 0.5 * (2.0 * PI).ln();
        logs.push(y);
    }
    let y = g.constant(&[n, 1], logs)?;
    let diff = g.sub(y, mu)?;
    let sq = g.square(diff);
    let den = g.scale(sigma2, 2.0);
    let quad = g.div(sq, den)?;
    let quad = g.sum(quad);
    let ls = g.log(sigma2)?;
    let ls = g.sum(ls);
    let ls = g.scale(ls, 0.5);
    let total = g.add(quad, ls)?;
    Ok(g.add_scalar(total, constant))
}

/// `−Σ_k log p_k[targets[k]]` for a `K×cols` log-probability matrix.
pub fn pick_nll_graph(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let cols = g.shape(log_probs)[1];
    let idx: Vec<usize> = targets.iter().enumerate().map(|(k, t)| k * cols + t).collect();
    let picked = g.gather(log_probs, &idx, &[targets.len()])?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// `Σ_k γ^k · CE_k` with `k` counted from one over rows of goal logits.
pub fn discounted_ce_graph(g: &mut Graph, goal_logits: Var, goal: usize, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let (rows, cols) = (g.shape(goal_logits)[0], g.shape(goal_logits)[1]);
    let lsm = g.log_softmax(goal_logits)?;
    let idx: Vec<usize> = (0..rows).map(|k| k * cols + goal).collect();
    let picked = g.gather(lsm, &idx, &[rows])?;
    let weights: Vec<f64> = (1..=rows).map(|k| gamma.powi(k as i32)).collect();
    let w = g.constant(&[rows], weights)?;
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_lognormal_at_one() {
        let f = FlowParams { mu: 0.0, sigma2: 1.0 };
        let v = lognormal_logpdf(1.0, &f).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.9189).abs() < 1e-4);
        assert!(lognormal_logpdf(0.0, &f).is_err());
        assert!(lognormal_logpdf(-1.0, &f).is_err());
    }

    #[test]
    fn logpdf_peaks_at_log_delta() {
        let delta = 2.5;
        let at = |mu| lognormal_logpdf(delta, &FlowParams { mu, sigma2: 0.4 }).unwrap();
        let best = at(delta.ln());
        for off in [-0.3, -1e-3, 1e-3, 0.3] {
            assert!(at(delta.ln() + off) < best);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Simpson's rule in log space: ∫ p(x) dx = ∫ p(e^u) e^u du.
        let f = FlowParams { mu: 0.0, sigma2: 0.25 };
        let (a, b, n) = (-30.0f64, 50f64.ln(), 20_000);
        let h = (b - a) / n as f64;
        let p = |u: f64| lognormal_logpdf(u.exp(), &f).unwrap().exp() * u.exp();
        let mut s = p(a) + p(b);
        for i in 1..n {
            s += p(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn goal_margin_examples() {
        assert_eq!(goal_margin(&[0.2, 0.3, 0.5]), 0.0);
        assert!((goal_margin(&[0.5, 0.3, 0.6]) - 0.2).abs() < 1e-15);
        assert_eq!(goal_margin(&[0.4, 0.4, 0.4]), 0.0);
        assert_eq!(goal_margin(&[0.9]), 0.0);
    }

    #[test]
    fn action_margin_examples() {
        let traces = vec![vec![0.4, 0.1], vec![0.2, 0.3]];
        let set = [MarkId(0), MarkId(1)];
        assert!((action_margin(&traces, &set) - 0.2).abs() < 1e-15);
        assert_eq!(action_margin(&traces, &[MarkId(1)]), 0.0);
        assert_eq!(action_margin(&traces[..1], &set), 0.0);
    }

    #[test]
    fn discount_examples() {
        assert!((discounted_ce(&[1.0, 1.0], 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(discounted_ce(&[1.3, 0.2, 2.0], 1.0).unwrap(), 1.3 + 0.2 + 2.0);
        assert_eq!(discounted_ce(&[1.3, 0.2], 0.0).unwrap(), 0.0);
        assert!(matches!(discounted_ce(&[1.0], 1.5), Err(TrainError::Config(_))));
        assert!(discounted_ce(&[1.0], -0.1).is_err());
    }

    #[test]
    fn running_max_resets() {
        let mut rm = RunningMax::new();
        rm.observe(&[0.9]);
        assert!((rm.observe(&[0.1]) - 0.8).abs() < 1e-15);
        rm.reset();
        assert_eq!(rm.observe(&[0.1]), 0.0);
    }

    #[test]
    fn graph_terms_match_plain_terms() {
        let probs = vec![0.5, 0.2, 0.3, 0.1, 0.6, 0.3, 0.7, 0.1, 0.2];
        let mut g = Graph::new();
        let p = g.constant(&[3, 3], probs.clone()).unwrap();
        let gm = margin_graph(&mut g, p, &[0]).unwrap();
        let am = margin_graph(&mut g, p, &[0, 2]).unwrap();
        let traces: Vec<Vec<f64>> = probs.chunks(3).map(<[f64]>::to_vec).collect();
        let col0: Vec<f64> = traces.iter().map(|r| r[0]).collect();
        assert!((g.item(gm) - goal_margin(&col0)).abs() < 1e-15);
        assert!((g.item(am) - action_margin(&traces, &[MarkId(0), MarkId(2)])).abs() < 1e-15);

        let f = [FlowParams { mu: 0.3, sigma2: 0.5 }, FlowParams { mu: -1.0, sigma2: 2.0 }];
        let deltas = [1.7, 0.2];
        let mu = g.constant(&[2, 1], f.iter().map(|x| x.mu).collect()).unwrap();
        let s2 = g.constant(&[2, 1], f.iter().map(|x| x.sigma2).collect()).unwrap();
        let nll = gap_nll_graph(&mut g, mu, s2, &deltas).unwrap();
        let expect: f64 = f.iter().zip(deltas).map(|(f, d)| -lognormal_logpdf(d, f).unwrap()).sum();
        assert!((g.item(nll) - expect).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn margins_are_nonnegative_and_vanish_on_monotone_traces(
            mut trace in proptest::collection::vec(0.0f64..1.0, 1..12)
        ) {
            prop_assert!(goal_margin(&trace) >= 0.0);
            trace.sort_by(f64::total_cmp);
            prop_assert_eq!(goal_margin(&trace), 0.0);
        }

        #[test]
        fn unit_discount_is_plain_sum(ce in proptest::collection::vec(0.0f64..5.0, 0..10)) {
            prop_assert_eq!(discounted_ce(&ce, 1.0).unwrap(), ce.iter().sum::<f64>());
        }
    }
}
