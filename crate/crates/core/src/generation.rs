//! Goal-conditioned sequence generation.
//!
//! Starting from one observed action, the model repeatedly draws the next
//! mark and gap, appends the event, re-encodes the history and checks that
//! the goal it now predicts is still the requested one. Generation ends when
//! `<EOS>` is drawn, when the predicted goal diverges, or at `max_len`.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionEvent, ActionRecord, GoalId, MarkId};
use crate::encoder::EncoderState;
use crate::heads::{self, FlowParams};
use crate::model::{Model, ModelError, Result};
use crate::seed::derive_seed;
use crate::tensor::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    #[default]
    Sample,
    Greedy,
}

impl std::str::FromStr for GenerationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sample" => Ok(Self::Sample),
            "greedy" => Ok(Self::Greedy),
            other => Err(format!("unknown mode {other:?} (expected sample or greedy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Maximum number of actions, not counting the terminal `<EOS>`.
    pub max_len: usize,
    /// Goal mismatches are ignored until the sequence holds this many actions.
    pub min_len: usize,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 100,
            min_len: 1,
            mode: GenerationMode::Sample,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(ModelError::Contract(format!(
                "generation max_len must be at least 2, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EosSampled,
    GoalMismatch,
    MaxLen,
}

/// Conditioning used for one drawn event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub cluster: usize,
    pub flow: FlowParams,
    pub predicted_goal: Option<GoalId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCtas {
    /// Generated actions, ending in `<EOS>` unless `stop_reason` is `MaxLen`.
    pub events: Vec<ActionEvent>,
    pub target_goal: GoalId,
    pub stop_reason: StopReason,
    pub steps: Vec<StepTrace>,
}

impl GeneratedCtas {
    /// Number of actions excluding a terminal `<EOS>`.
    pub fn action_len(&self, eos: MarkId) -> usize {
        self.events.iter().filter(|e| e.mark != eos).count()
    }
}

/// One line of generator output: the corpus format plus stop metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub goal: String,
    pub actions: Vec<ActionRecord>,
    pub stop_reason: StopReason,
    pub target_goal: String,
}

impl GeneratedRecord {
    pub fn new(g: &GeneratedCtas, model: &Model) -> Self {
        let goal = model.goals.name(g.target_goal.0).to_string();
        Self {
            goal: goal.clone(),
            actions: g
                .events
                .iter()
                .map(|e| ActionRecord {
                    mark: model.marks.name(e.mark.0).to_string(),
                    time: e.time,
                })
                .collect(),
            stop_reason: g.stop_reason,
            target_goal: goal,
        }
    }
}

pub fn write_generated(path: impl AsRef<Path>, model: &Model, seqs: &[GeneratedCtas]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in seqs {
        serde_json::to_writer(&mut out, &GeneratedRecord::new(g, model)).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Generates a continuation of `first` toward `goal`.
pub fn generate(model: &Model, goal: GoalId, first: (MarkId, f64), cfg: &GenerationConfig) -> Result<GeneratedCtas> {
    cfg.validate()?;
    let (mark, time) = first;
    if mark.0 >= model.marks.len() || mark == model.eos() {
        return Err(ModelError::Contract(format!("first mark id {} is not an action", mark.0)));
    }
    if goal.0 >= model.goals.len() {
        return Err(ModelError::Contract(format!("goal id {} out of range", goal.0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = &model.params.heads;
    let max_len = cfg.max_len.min(model.config.max_len);
    let mut state = EncoderState::new(&model.config);
    state.extend(mark, time, &model.params.encoder, &model.config, &model.scales)?;
    let mut events = vec![ActionEvent { mark, time, delta: time }];
    let mut steps = Vec::new();

    let stop_reason = loop {
        if events.len() >= max_len {
            break StopReason::MaxLen;
        }
        let last = *events.last().expect("nonempty");
        let s = state.last().expect("nonempty").to_vec();
        let cluster = model.cluster_of(last.mark)?;
        let probs = heads::mark_distribution(&s, h)?;
        let flow = heads::flow_params(&s, cluster, h, model.log_delta_scale())?;
        let (next, delta) = match cfg.mode {
            GenerationMode::Greedy => (
                MarkId(kernels::argmax(&probs)),
                heads::point_delta(&flow, model.estimator),
            ),
            GenerationMode::Sample => {
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| ModelError::Contract(format!("mark distribution: {e}")))?;
                (MarkId(dist.sample(&mut rng)), heads::sample_delta(&flow, &mut rng))
            }
        };
        // an underflowed gap becomes the smallest representable step
        let delta = if delta > 0.0 { delta } else { last.time.next_up() - last.time };
        let t = heads::next_time(last.time, delta)?;
        if next == model.eos() {
            steps.push(StepTrace { cluster, flow, predicted_goal: None });
            events.push(ActionEvent { mark: next, time: t, delta });
            break StopReason::EosSampled;
        }
        let row = state.extend(next, t, &model.params.encoder, &model.config, &model.scales)?;
        let predicted = GoalId(kernels::argmax(&heads::goal_scores(row, h)?));
        steps.push(StepTrace {
            cluster,
            flow,
            predicted_goal: Some(predicted),
        });
        events.push(ActionEvent { mark: next, time: t, delta });
        if predicted != goal && events.len() >= cfg.min_len {
            let t_eos = heads::next_time(t, model.eos_gap)?;
            events.push(ActionEvent {
                mark: model.eos(),
                time: t_eos,
                delta: model.eos_gap,
            });
            break StopReason::GoalMismatch;
        }
    };
    Ok(GeneratedCtas {
        events,
        target_goal: goal,
        stop_reason,
        steps,
    })
}

/// Generates one sequence per request, in parallel. Request `i` samples
/// from its own stream derived from `cfg.seed` and `i`.
pub fn generate_many(
    model: &Model,
    requests: &[(GoalId, (MarkId, f64))],
    cfg: &GenerationConfig,
) -> Result<Vec<GeneratedCtas>> {
    requests
        .par_iter()
        .enumerate()
        .map(|(i, &(goal, first))| {
            let c = GenerationConfig {
                seed: derive_seed(cfg.seed, &format!("generate/{i}")),
                ..*cfg
            };
            generate(model, goal, first, &c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{fixtures, synth_generate};
    use crate::model::ModelConfig;
    use crate::tensor::Graph;
    use crate::training::{self, initialize, TrainConfig, TrainingSet};

    fn untrained(seed: u64) -> Model {
        let data = synth_generate(&fixtures::goal_chains(0.1), 9, seed).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            blocks: 1,
            heads: 2,
            max_len: 32,
            clusters: 3,
            ..Default::default()
        };
        initialize(&data, cfg, seed).unwrap()
    }

    fn check_shape(g: &GeneratedCtas, model: &Model, max_len: usize) {
        assert!(g.events.windows(2).all(|w| w[1].time > w[0].time));
        assert!(g.action_len(model.eos()) <= max_len);
        match g.stop_reason {
            StopReason::MaxLen => assert_ne!(g.events.last().unwrap().mark, model.eos()),
            _ => assert_eq!(g.events.last().unwrap().mark, model.eos()),
        }
        assert!(g.events.iter().filter(|e| e.mark == model.eos()).count() <= 1);
    }

    #[test]
    fn max_len_two_runs_loop_once() {
        let model = untrained(0);
        let cfg = GenerationConfig {
            max_len: 2,
            min_len: 100,
            ..Default::default()
        };
        for seed in 0..20 {
            let g = generate(&model, GoalId(0), (MarkId(0), 0.5), &GenerationConfig { seed, ..cfg }).unwrap();
            assert_eq!(g.steps.len(), 1);
            check_shape(&g, &model, 2);
        }
    }

    #[test]
    fn terminates_with_valid_shape() {
        let model = untrained(1);
        for seed in 0..50 {
            let cfg = GenerationConfig {
                max_len: 12,
                seed,
                min_len: (seed % 4) as usize,
                ..Default::default()
            };
            let goal = GoalId(seed as usize % 3);
            let g = generate(&model, goal, (MarkId(seed as usize % 6), 1.0), &cfg).unwrap();
            check_shape(&g, &model, 12);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_sampling_is_seeded() {
        let model = untrained(2);
        let greedy = GenerationConfig {
            mode: GenerationMode::Greedy,
            min_len: 50,
            max_len: 10,
            ..Default::default()
        };
        let a = generate(&model, GoalId(1), (MarkId(1), 1.0), &greedy).unwrap();
        let b = generate(&model, GoalId(1), (MarkId(1), 1.0), &GenerationConfig { seed: 99, ..greedy }).unwrap();
        assert_eq!(a, b);
        let s = GenerationConfig { min_len: 50, max_len: 10, ..Default::default() };
        let x = generate(&model, GoalId(1), (MarkId(1), 1.0), &s).unwrap();
        let y = generate(&model, GoalId(1), (MarkId(1), 1.0), &s).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_bad_requests() {
        let model = untrained(3);
        let cfg = GenerationConfig::default();
        assert!(generate(&model, GoalId(0), (model.eos(), 1.0), &cfg).is_err());
        assert!(generate(&model, GoalId(0), (MarkId(99), 1.0), &cfg).is_err());
        assert!(generate(&model, GoalId(7), (MarkId(0), 1.0), &cfg).is_err());
        let short = GenerationConfig { max_len: 1, ..cfg };
        assert!(generate(&model, GoalId(0), (MarkId(0), 1.0), &short).is_err());
    }

    #[test]
    fn flow_conditioning_matches_training_graph() {
        let data = synth_generate(&fixtures::goal_chains(0.1), 24, 4).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            blocks: 1,
            heads: 1,
            max_len: 16,
            clusters: 3,
            ..Default::default()
        };
        let mut model = initialize(&data, cfg, 4).unwrap();
        let set = TrainingSet::new(&data, model.eos_gap).unwrap();
        let tc = TrainConfig { epochs: 2, lr: 1e-2, ..Default::default() };
        training::train(&mut model, &set, &tc, |_, _| Ok(())).unwrap();

        let gen = GenerationConfig { max_len: 8, min_len: 8, seed: 3, ..Default::default() };
        let out = generate(&model, GoalId(0), (MarkId(0), 0.7), &gen).unwrap();
        let actions: Vec<ActionEvent> = out.events.iter().copied().filter(|e| e.mark != model.eos()).collect();
        let n = out.steps.len().min(actions.len());
        let mut g = Graph::new();
        let vars = model.params.map(&mut |_, t| g.constant(t.shape(), t.values().to_vec()).unwrap());
        let s = crate::encoder::encode(&mut g, &actions[..n], &model.scales, &vars.encoder, &model.config).unwrap();
        let clusters: Vec<usize> = actions[..n].iter().map(|e| model.cluster_of(e.mark).unwrap()).collect();
        let (mu, s2) = heads::flow_graph(&mut g, s, &clusters, &vars.heads, model.log_delta_scale()).unwrap();
        for k in 0..n {
            assert_eq!(out.steps[k].cluster, clusters[k]);
            assert!((out.steps[k].flow.mu - g.value(mu)[k]).abs() < 1e-9);
            assert!((out.steps[k].flow.sigma2 - g.value(s2)[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn records_carry_stop_metadata() {
        let model = untrained(5);
        let reqs: Vec<_> = (0..4).map(|i| (GoalId(i % 3), (MarkId(i), 1.0))).collect();
        let out = generate_many(&model, &reqs, &GenerationConfig { max_len: 6, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.jsonl");
        write_generated(&path, &model, &out).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<GeneratedRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].target_goal, model.goals.name(1));
        assert!(text.contains("\"stop_reason\""));
    }
}
