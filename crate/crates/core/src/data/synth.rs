//! Synthetic corpora drawn from a known generative process: a per-goal Markov
//! chain over marks with per-mark log-normal gaps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActionRecord, DataError, Dataset, Result, SequenceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalGap {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalGap {
    pub fn median(&self) -> f64 {
        self.mu.exp()
    }
}

/// Generative process for one goal. `init` and the rows of `trans` index the
/// oracle's `marks` list. The gap preceding an event is drawn from its mark's
/// entry in `deltas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalProcess {
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub deltas: BTreeMap<String, LogNormalGap>,
    /// Maximum number of events per sequence.
    pub length: usize,
    /// Optional per-mark probability of ending the sequence after that mark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub marks: Vec<String>,
    pub goals: BTreeMap<String, GoalProcess>,
}

fn check_distribution(what: &str, p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(DataError::Validation(format!(
            "{what} has {} entries, expected {n}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(DataError::Validation(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Validation(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl OracleSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.marks.len();
        if n == 0 || self.goals.is_empty() {
            return Err(DataError::Validation("oracle needs marks and goals".into()));
        }
        if self.marks.iter().any(|m| m == super::EOS) {
            return Err(DataError::Validation("mark <EOS> is reserved".into()));
        }
        for (name, g) in &self.goals {
            check_distribution(&format!("goal {name:?} init"), &g.init, n)?;
            if g.trans.len() != n {
                return Err(DataError::Validation(format!(
                    "goal {name:?} trans has {} rows, expected {n}",
                    g.trans.len()
                )));
            }
            for (i, row) in g.trans.iter().enumerate() {
                check_distribution(&format!("goal {name:?} trans row {i}"), row, n)?;
            }
            if g.length == 0 {
                return Err(DataError::Validation(format!("goal {name:?} has length 0")));
            }
            if let Some(stop) = &g.stop {
                if stop.len() != n || stop.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(DataError::Validation(format!("goal {name:?} stop vector invalid")));
                }
            }
            for (m, mark) in self.marks.iter().enumerate() {
                let reachable = g.init[m] > 0.0 || g.trans.iter().any(|row| row[m] > 0.0);
                match g.deltas.get(mark) {
                    None if reachable => {
                        return Err(DataError::Validation(format!(
                            "goal {name:?} has no gap distribution for mark {mark:?}"
                        )))
                    }
                    Some(d) if !(d.sigma >= 0.0) || !d.mu.is_finite() => {
                        return Err(DataError::Validation(format!(
                            "goal {name:?} mark {mark:?} gap parameters invalid"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Draws `n` sequences; sequence `i` has goal number `i mod |goals|` in
    /// sorted goal order.
    pub fn sample_records(&self, n: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goals: Vec<(&String, &GoalProcess)> = self.goals.iter().collect();
        let weighted = |p: &[f64]| {
            WeightedIndex::new(p).map_err(|e| DataError::Validation(e.to_string()))
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (name, g) = goals[i % goals.len()];
            let init = weighted(&g.init)?;
            let mut mark = init.sample(&mut rng);
            let mut time = 0.0;
            let mut actions = Vec::with_capacity(g.length);
            loop {
                let gap = g.deltas[&self.marks[mark]];
                let z: f64 = rng.sample(StandardNormal);
                time += (gap.mu + gap.sigma * z).exp();
                actions.push(ActionRecord {
                    mark: self.marks[mark].clone(),
                    time,
                });
                if actions.len() == g.length {
                    break;
                }
                if let Some(stop) = &g.stop {
                    if rng.random::<f64>() < stop[mark] {
                        break;
                    }
                }
                mark = weighted(&g.trans[mark])?.sample(&mut rng);
            }
            out.push(SequenceRecord {
                goal: name.clone(),
                actions,
            });
        }
        Ok(out)
    }
}

/// Samples `n` sequences from `spec` into a dataset.
pub fn synth_generate(spec: &OracleSpec, n: usize, seed: u64) -> Result<Dataset> {
    Dataset::from_records(&spec.sample_records(n, seed)?)
}

/// Ready-made oracles used by examples and tests.
pub mod fixtures {
    use super::*;

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    /// A process that visits `chain` (indices into `n` marks) in order.
    fn chain_process(n: usize, chain: &[usize], gaps: BTreeMap<String, LogNormalGap>) -> GoalProcess {
        let mut trans: Vec<Vec<f64>> = (0..n).map(|i| one_hot(n, i)).collect();
        for w in chain.windows(2) {
            trans[w[0]] = one_hot(n, w[1]);
        }
        GoalProcess {
            init: one_hot(n, chain[0]),
            trans,
            deltas: gaps,
            length: chain.len(),
            stop: None,
        }
    }

    /// Single goal, chain A→B→C with unit gaps and no noise.
    pub fn unit_chain() -> OracleSpec {
        let marks: Vec<String> = ["A", "B", "C"].map(String::from).to_vec();
        let gaps = marks
            .iter()
            .map(|m| (m.clone(), LogNormalGap { mu: 0.0, sigma: 0.0 }))
            .collect();
        OracleSpec {
            goals: BTreeMap::from([("abc".to_string(), chain_process(3, &[0, 1, 2], gaps))]),
            marks,
        }
    }

    /// Three goals over six marks. Each goal's chain starts with its own mark
    /// (so the first event identifies the goal) and then visits the three
    /// shared marks in a goal-specific order. Gaps are log-normal with the
    /// given `sigma` and medians 0.5, 1, 2, 1.5, 3, 0.8 for marks a..f.
    pub fn goal_chains(sigma: f64) -> OracleSpec {
        let marks: Vec<String> = ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec();
        let medians = [0.5, 1.0, 2.0, 1.5, 3.0, 0.8];
        let gaps: BTreeMap<String, LogNormalGap> = marks
            .iter()
            .zip(medians)
            .map(|(m, med)| (m.clone(), LogNormalGap { mu: f64::ln(med), sigma }))
            .collect();
        let chains: [(&str, [usize; 4]); 3] = [
            ("bake", [0, 3, 4, 5]),
            ("brew", [1, 4, 5, 3]),
            ("chop", [2, 5, 3, 4]),
        ];
        let goals = chains
            .iter()
            .map(|(g, c)| (g.to_string(), chain_process(6, c, gaps.clone())))
            .collect();
        OracleSpec { marks, goals }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_chain_is_deterministic() {
        let d = synth_generate(&fixtures::unit_chain(), 5, 1).unwrap();
        for s in &d.sequences {
            let got: Vec<(&str, f64)> = s
                .events()
                .iter()
                .map(|e| (d.marks.name(e.mark.0), e.time))
                .collect();
            assert_eq!(got, vec![("A", 1.0), ("B", 2.0), ("C", 3.0)]);
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut spec = fixtures::unit_chain();
        spec.goals.get_mut("abc").unwrap().trans[1] = vec![0.5, 0.4, 0.0];
        assert!(matches!(spec.validate(), Err(DataError::Validation(_))));
        let mut spec = fixtures::unit_chain();
        spec.goals.get_mut("abc").unwrap().init = vec![1.5, -0.5, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = fixtures::unit_chain();
        spec.goals.get_mut("abc").unwrap().deltas.remove("B");
        assert!(spec.validate().is_err());
    }

    fn random_spec() -> OracleSpec {
        let marks: Vec<String> = ["p", "q", "r"].map(String::from).to_vec();
        let deltas = marks
            .iter()
            .zip([0.2, -0.4, 1.0])
            .map(|(m, mu)| (m.clone(), LogNormalGap { mu, sigma: 0.5 }))
            .collect();
        let process = GoalProcess {
            init: vec![0.2, 0.5, 0.3],
            trans: vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25], vec![0.3, 0.3, 0.4]],
            deltas,
            length: 6,
            stop: None,
        };
        OracleSpec {
            marks,
            goals: BTreeMap::from([("g".to_string(), process)]),
        }
    }

    #[test]
    fn transition_frequencies_match_spec() {
        let spec = random_spec();
        let d = synth_generate(&spec, 10_000, 42).unwrap();
        let id = |m: &str| d.marks.id(m).unwrap();
        let mut counts = [[0.0f64; 3]; 3];
        for s in &d.sequences {
            for w in s.events().windows(2) {
                let from = spec.marks.iter().position(|m| id(m) == w[0].mark.0).unwrap();
                let to = spec.marks.iter().position(|m| id(m) == w[1].mark.0).unwrap();
                counts[from][to] += 1.0;
            }
        }
        let g = &spec.goals["g"];
        for i in 0..3 {
            let total: f64 = counts[i].iter().sum();
            for j in 0..3 {
                let freq = counts[i][j] / total;
                assert!((freq - g.trans[i][j]).abs() < 0.02, "{i}->{j}: {freq}");
            }
        }
    }

    #[test]
    fn log_gap_mean_within_three_standard_errors() {
        let spec = random_spec();
        let d = synth_generate(&spec, 10_000, 7).unwrap();
        for (m, gap) in &spec.goals["g"].deltas {
            let id = d.marks.id(m).unwrap();
            let logs: Vec<f64> = d
                .sequences
                .iter()
                .flat_map(|s| s.events())
                .filter(|e| e.mark.0 == id)
                .map(|e| e.delta.ln())
                .collect();
            let n = logs.len() as f64;
            let mean = logs.iter().sum::<f64>() / n;
            let se = gap.sigma / n.sqrt();
            assert!((mean - gap.mu).abs() < 3.0 * se, "{m}: {mean} vs {}", gap.mu);
        }
    }

    #[test]
    fn stop_vector_shortens_sequences() {
        let mut spec = random_spec();
        spec.goals.get_mut("g").unwrap().stop = Some(vec![1.0, 1.0, 1.0]);
        let d = synth_generate(&spec, 20, 3).unwrap();
        assert!(d.sequences.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        let spec = fixtures::goal_chains(0.1);
        spec.save(&path).unwrap();
        assert_eq!(OracleSpec::load(&path).unwrap(), spec);
    }

    #[test]
    fn goal_chain_fixture_shape() {
        let d = synth_generate(&fixtures::goal_chains(0.1), 30, 0).unwrap();
        assert_eq!(d.goals.len(), 3);
        assert_eq!(d.marks.len(), 7);
        assert!(d.sequences.iter().all(|s| s.len() == 4));
    }
}
