//! Evaluation metrics: next-event MAE and APA under teacher forcing, goal
//! accuracy from sequence prefixes, and faithfulness of generated sequences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Ctas, Dataset};
use crate::encoder;
use crate::generation::{self, GenerationConfig};
use crate::heads;
use crate::model::{Model, ModelError, Result};
use crate::seed::derive_seed;
use crate::tensor::kernels;

/// Next-event accuracy and timing error over every predicted event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NextEventMetrics {
    pub mae: f64,
    pub apa: f64,
    pub n_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub apa_gen: f64,
    pub mae_gen: f64,
    pub cl: f64,
    /// Positions compared for `apa_gen` and `mae_gen`.
    pub n_compared: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalAccuracy {
    pub fraction: f64,
    pub gpa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prefix_fractions: Vec<f64>,
    pub generation: GenerationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prefix_fractions: vec![0.3, 0.6, 1.0],
            generation: GenerationConfig {
                mode: generation::GenerationMode::Greedy,
                ..GenerationConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub seed: u64,
    pub mae: f64,
    pub apa: f64,
    pub gpa_by_prefix: Vec<GoalAccuracy>,
    pub cl: f64,
    pub apa_gen: f64,
    pub mae_gen: f64,
    pub n_sequences: usize,
    pub n_events: usize,
}

impl MetricReport {
    pub fn gpa_at(&self, fraction: f64) -> Option<f64> {
        self.gpa_by_prefix
            .iter()
            .find(|g| (g.fraction - fraction).abs() < 1e-9)
            .map(|g| g.gpa)
    }
}

fn require_nonempty(test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(ModelError::Contract("evaluation set is empty".into()));
    }
    Ok(())
}

/// Sums of absolute time error and correct marks over one sequence's
/// teacher-forced predictions, including the final `<EOS>` target.
fn next_event_sums(seq: &Ctas, model: &Model) -> Result<(f64, usize, usize)> {
    let events = seq.events();
    let hist = encoder::history(events, &model.scales, &model.params.encoder, &model.config)?;
    let (mut abs_err, mut correct) = (0.0, 0);
    for (k, e) in events.iter().enumerate() {
        let (mark, time) = match events.get(k + 1) {
            Some(next) => (next.mark, next.time),
            None => (model.eos(), e.time + model.eos_gap),
        };
        let s = hist.row(k);
        let probs = heads::mark_distribution(s, &model.params.heads)?;
        let flow = heads::flow_params(s, model.cluster_of(e.mark)?, &model.params.heads, model.log_delta_scale())?;
        let t_hat = e.time + heads::point_delta(&flow, model.estimator);
        abs_err += (time - t_hat).abs();
        correct += usize::from(kernels::argmax(&probs) == mark.0);
    }
    Ok((abs_err, correct, events.len()))
}

/// Teacher-forced next-event MAE (time units of the corpus) and APA.
pub fn next_event_eval(test: &Dataset, model: &Model) -> Result<NextEventMetrics> {
    require_nonempty(test)?;
    let parts = test
        .sequences
        .par_iter()
        .map(|s| next_event_sums(s, model))
        .collect::<Result<Vec<_>>>()?;
    let (mut err, mut correct, mut n) = (0.0, 0, 0);
    for (e, c, k) in parts {
        err += e;
        correct += c;
        n += k;
    }
    Ok(NextEventMetrics {
        mae: err / n as f64,
        apa: correct as f64 / n as f64,
        n_events: n,
    })
}

/// Number of events fed for a prefix fraction: `⌈f·K⌉`, at least one.
pub fn prefix_len(fraction: f64, k: usize) -> usize {
    ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k)
}

/// Goal accuracy after observing each prefix fraction of every sequence.
pub fn goal_eval(test: &Dataset, model: &Model, fractions: &[f64]) -> Result<Vec<GoalAccuracy>> {
    require_nonempty(test)?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(ModelError::Contract(format!("prefix fraction {f} must lie in (0, 1]")));
    }
    let hits = test
        .sequences
        .par_iter()
        .map(|seq| {
            let hist = encoder::history(seq.events(), &model.scales, &model.params.encoder, &model.config)?;
            fractions
                .iter()
                .map(|&f| {
                    let p = heads::goal_scores(hist.row(prefix_len(f, seq.len()) - 1), &model.params.heads)?;
                    Ok(kernels::argmax(&p) == seq.goal().0)
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| GoalAccuracy {
            fraction,
            gpa: hits.iter().filter(|h| h[i]).count() as f64 / hits.len() as f64,
        })
        .collect())
}

/// Generates each test sequence from its goal and first action and compares
/// it with the truth. Positions after the given first action are compared up
/// to the shorter length; lengths exclude the generated `<EOS>`.
pub fn generation_eval(test: &Dataset, model: &Model, cfg: &GenerationConfig) -> Result<GenerationMetrics> {
    require_nonempty(test)?;
    let parts = test
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let first = seq.events()[0];
            let c = GenerationConfig {
                seed: derive_seed(cfg.seed, &format!("evaluate/{i}")),
                ..*cfg
            };
            let g = generation::generate(model, seq.goal(), (first.mark, first.time), &c)?;
            let gen_len = g.action_len(model.eos());
            let n = seq.len().min(gen_len);
            let (mut err, mut correct) = (0.0, 0);
            for (t, p) in seq.events()[1..n].iter().zip(&g.events[1..n]) {
                err += (t.time - p.time).abs();
                correct += usize::from(t.mark == p.mark);
            }
            Ok((err, correct, n - 1, seq.len() == gen_len))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut err, mut correct, mut compared, mut same_len) = (0.0, 0, 0, 0);
    for (e, c, n, l) in &parts {
        err += e;
        correct += c;
        compared += n;
        same_len += usize::from(*l);
    }
    let denom = compared.max(1) as f64;
    Ok(GenerationMetrics {
        apa_gen: correct as f64 / denom,
        mae_gen: err / denom,
        cl: same_len as f64 / parts.len() as f64,
        n_compared: compared,
    })
}

/// All metrics for one trained model on one test split.
pub fn evaluate(test: &Dataset, model: &Model, cfg: &EvalConfig, dataset: &str, seed: u64) -> Result<MetricReport> {
    let next = next_event_eval(test, model)?;
    let gpa = goal_eval(test, model, &cfg.prefix_fractions)?;
    let gen = generation_eval(test, model, &cfg.generation)?;
    Ok(MetricReport {
        dataset: dataset.to_string(),
        seed,
        mae: next.mae,
        apa: next.apa,
        gpa_by_prefix: gpa,
        cl: gen.cl,
        apa_gen: gen.apa_gen,
        mae_gen: gen.mae_gen,
        n_sequences: test.len(),
        n_events: next.n_events,
    })
}

pub const CSV_HEADER: &str = "dataset,seed,mae,apa,gpa_30,gpa_60,gpa_100,cl,apa_gen,mae_gen";

pub fn csv_row(r: &MetricReport) -> String {
    let gpa = |f| r.gpa_at(f).map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.dataset,
        r.seed,
        r.mae,
        r.apa,
        gpa(0.3),
        gpa(0.6),
        gpa(1.0),
        r.cl,
        r.apa_gen,
        r.mae_gen
    )
}

pub fn write_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> std::io::Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Mean and sample standard deviation of a metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, runs: n }
    }
}

/// Per-metric spread across several runs of the same dataset.
pub fn summarize(reports: &[MetricReport]) -> BTreeMap<String, Spread> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in [
            ("mae", r.mae),
            ("apa", r.apa),
            ("cl", r.cl),
            ("apa_gen", r.apa_gen),
            ("mae_gen", r.mae_gen),
        ] {
            cols.entry(k.to_string()).or_default().push(v);
        }
        for g in &r.gpa_by_prefix {
            cols.entry(format!("gpa_{}", (g.fraction * 100.0).round())).or_default().push(g.gpa);
        }
    }
    cols.into_iter().map(|(k, v)| (k, Spread::of(&v))).collect()
}

/// Full-scale published results on the original benchmark corpora.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub dataset: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const PUBLISHED_REFERENCE: &[ReferenceValue] = &[
    ReferenceValue { dataset: "Breakfast", metric: "apa", value: 0.583 },
    ReferenceValue { dataset: "Breakfast", metric: "mae", value: 0.364 },
    ReferenceValue { dataset: "Breakfast", metric: "cl", value: 0.21 },
    ReferenceValue { dataset: "Multi-THUMOS", metric: "cl", value: 0.11 },
    ReferenceValue { dataset: "Activity-Net", metric: "cl", value: 0.16 },
];

/// Text table placing a run's metrics next to the published full-scale
/// values. The two are not comparable: different corpora and scale.
pub fn reference_table(r: &MetricReport) -> String {
    let mut out = String::from("metric  this run  published (full-scale, different corpus; not comparable)\n");
    for (metric, ours) in [("apa", r.apa), ("mae", r.mae), ("cl", r.cl)] {
        let refs: Vec<String> = PUBLISHED_REFERENCE
            .iter()
            .filter(|v| v.metric == metric)
            .map(|v| format!("{} {}", v.dataset, v.value))
            .collect();
        let _ = writeln!(out, "{metric:<7} {ours:<9.4} {}", refs.join(", "));
    }
    out
}
