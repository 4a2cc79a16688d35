//! Continuous-time action sequences, corpus ingestion, splitting, and action
//! clustering.

mod cluster;
mod jsonl;
pub mod synth;

pub use cluster::{cluster_actions, kmeans_1d, mean_completion_times, ClusterMap};
pub use jsonl::{ActionRecord, SequenceRecord};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved end-of-sequence mark.
pub const EOS: &str = "<EOS>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation: {0}")]
    Validation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarkId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalId(pub usize);

/// One action: its mark, absolute start time, and gap since the previous action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub mark: MarkId,
    pub time: f64,
    pub delta: f64,
}

/// An ordered action sequence performed toward one goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ctas {
    events: Vec<ActionEvent>,
    goal: GoalId,
}

impl Ctas {
    /// Builds a sequence from `(mark, time)` pairs. The first gap is measured
    /// from time zero.
    pub fn from_times(goal: GoalId, actions: &[(MarkId, f64)]) -> Result<Self> {
        if actions.is_empty() {
            return Err(DataError::Validation("sequence has no actions".into()));
        }
        let mut events = Vec::with_capacity(actions.len());
        let mut prev = 0.0;
        for (i, &(mark, time)) in actions.iter().enumerate() {
            if !time.is_finite() || time < 0.0 {
                return Err(DataError::Validation(format!(
                    "action {i} has invalid time {time}"
                )));
            }
            if i > 0 && time <= prev {
                return Err(DataError::Validation(format!(
                    "times must strictly increase: action {i} at {time} follows {prev}"
                )));
            }
            events.push(ActionEvent {
                mark,
                time,
                delta: time - prev,
            });
            prev = time;
        }
        Ok(Self { events, goal })
    }

    pub fn events(&self) -> &[ActionEvent] {
        &self.events
    }

    pub fn goal(&self) -> GoalId {
        self.goal
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last(&self) -> &ActionEvent {
        self.events.last().expect("sequences are nonempty")
    }

    pub fn marks(&self) -> impl Iterator<Item = MarkId> + '_ {
        self.events.iter().map(|e| e.mark)
    }

    /// First `len` events as a new sequence.
    pub fn prefix(&self, len: usize) -> Ctas {
        Ctas {
            events: self.events[..len.clamp(1, self.events.len())].to_vec(),
            goal: self.goal,
        }
    }

    /// Appends one end-of-sequence event `eos_gap` after the last event.
    pub fn append_eos(&self, eos: MarkId, eos_gap: f64) -> Result<Ctas> {
        if self.last().mark == eos {
            return Err(DataError::Validation(
                "sequence already ends with <EOS>".into(),
            ));
        }
        if !(eos_gap > 0.0) {
            return Err(DataError::Config(format!("eos gap must be positive, got {eos_gap}")));
        }
        let mut events = self.events.clone();
        events.push(ActionEvent {
            mark: eos,
            time: self.last().time + eos_gap,
            delta: eos_gap,
        });
        Ok(Ctas {
            events,
            goal: self.goal,
        })
    }

    /// Appends an already-formed event. Times must keep increasing.
    pub fn push(&mut self, event: ActionEvent) -> Result<()> {
        if event.time <= self.last().time {
            return Err(DataError::Validation(format!(
                "event at {} does not follow {}",
                event.time,
                self.last().time
            )));
        }
        self.events.push(event);
        Ok(())
    }
}

/// Bidirectional string ↔ id map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.names
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A corpus of sequences sharing mark and goal vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Ctas>,
    pub marks: Vocab,
    pub goals: Vocab,
    pub clusters: Option<ClusterMap>,
}

/// Result of [`Dataset::split_by_goal`].
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Builds vocabularies in sorted lexical order (with `<EOS>` appended to
    /// the marks) and validates every record.
    pub fn from_records(records: &[SequenceRecord]) -> Result<Self> {
        let mut marks = BTreeSet::new();
        let mut goals = BTreeSet::new();
        for r in records {
            goals.insert(r.goal.clone());
            for a in &r.actions {
                marks.insert(a.mark.clone());
            }
        }
        let mut mark_names: Vec<String> = marks.into_iter().collect();
        mark_names.push(EOS.to_string());
        let marks = Vocab::from(mark_names);
        let goals = Vocab::from(goals.into_iter().collect::<Vec<_>>());
        Self::from_records_with_vocab(records, marks, goals)
    }

    /// Indexes records against fixed vocabularies; unknown names are errors.
    pub fn from_records_with_vocab(
        records: &[SequenceRecord],
        marks: Vocab,
        goals: Vocab,
    ) -> Result<Self> {
        if marks.id(EOS) != Some(marks.len() - 1) {
            return Err(DataError::Validation(
                "mark vocabulary must end with <EOS>".into(),
            ));
        }
        let mut sequences = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let goal = goals.id(&r.goal).ok_or_else(|| {
                DataError::Validation(format!("sequence {i}: unknown goal {:?}", r.goal))
            })?;
            let mut actions = Vec::with_capacity(r.actions.len());
            for a in &r.actions {
                if a.mark == EOS {
                    return Err(DataError::Validation(format!(
                        "sequence {i}: mark {EOS} is reserved"
                    )));
                }
                let mark = marks.id(&a.mark).ok_or_else(|| {
                    DataError::Validation(format!("sequence {i}: unknown mark {:?}", a.mark))
                })?;
                actions.push((MarkId(mark), a.time));
            }
            let seq = Ctas::from_times(GoalId(goal), &actions).map_err(|e| match e {
                DataError::Validation(m) => {
                    DataError::Validation(format!("sequence {i} (goal {:?}): {m}", r.goal))
                }
                other => other,
            })?;
            sequences.push(seq);
        }
        Ok(Self {
            sequences,
            marks,
            goals,
            clusters: None,
        })
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&jsonl::read_records(path.as_ref())?)
    }

    pub fn load_jsonl_with_vocab(path: impl AsRef<Path>, marks: Vocab, goals: Vocab) -> Result<Self> {
        Self::from_records_with_vocab(&jsonl::read_records(path.as_ref())?, marks, goals)
    }

    pub fn to_records(&self) -> Vec<SequenceRecord> {
        self.sequences
            .iter()
            .map(|s| SequenceRecord {
                goal: self.goals.name(s.goal().0).to_string(),
                actions: s
                    .events()
                    .iter()
                    .map(|e| ActionRecord {
                        mark: self.marks.name(e.mark.0).to_string(),
                        time: e.time,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_records(path.as_ref(), &self.to_records())
    }

    pub fn eos(&self) -> MarkId {
        MarkId(self.marks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn with_sequences(&self, sequences: Vec<Ctas>) -> Self {
        Self {
            sequences,
            marks: self.marks.clone(),
            goals: self.goals.clone(),
            clusters: self.clusters.clone(),
        }
    }

    /// Per goal, the first `⌈fraction·n⌉` sequences in file order form the
    /// training split and the rest the test split.
    pub fn split_by_goal(&self, train_fraction: f64) -> Result<Split> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::Config(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let mut by_goal: BTreeMap<GoalId, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            by_goal.entry(s.goal()).or_default().push(i);
        }
        let mut in_train = vec![false; self.sequences.len()];
        let mut warnings = Vec::new();
        for (goal, idx) in &by_goal {
            let n = idx.len();
            if n == 1 {
                warnings.push(format!(
                    "goal {:?} has a single sequence; it is placed in the training split",
                    self.goals.name(goal.0)
                ));
            }
            let n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
            for &i in &idx[..n_train.min(n)] {
                in_train[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, t) in self.sequences.iter().zip(in_train) {
            if t {
                train.push(s.clone());
            } else {
                test.push(s.clone());
            }
        }
        Ok(Split {
            train: self.with_sequences(train),
            test: self.with_sequences(test),
            warnings,
        })
    }

    /// Median gap over all events of all sequences.
    pub fn median_delta(&self) -> f64 {
        let mut deltas: Vec<f64> = self
            .sequences
            .iter()
            .flat_map(|s| s.events().iter().map(|e| e.delta))
            .collect();
        if deltas.is_empty() {
            return 1.0;
        }
        deltas.sort_by(f64::total_cmp);
        let n = deltas.len();
        if n % 2 == 1 {
            deltas[n / 2]
        } else {
            0.5 * (deltas[n / 2 - 1] + deltas[n / 2])
        }
    }

    /// Mean absolute time and mean gap over all events.
    pub fn time_scales(&self) -> (f64, f64) {
        let (mut t, mut d, mut n) = (0.0, 0.0, 0usize);
        for e in self.sequences.iter().flat_map(|s| s.events()) {
            t += e.time;
            d += e.delta;
            n += 1;
        }
        if n == 0 || t <= 0.0 || d <= 0.0 {
            return (1.0, 1.0);
        }
        (t / n as f64, d / n as f64)
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Ctas::len).max().unwrap_or(0)
    }

    /// For each goal, the set of marks that occur in any of its sequences.
    pub fn goal_mark_sets(&self) -> Vec<Vec<MarkId>> {
        let mut sets = vec![BTreeSet::new(); self.goals.len()];
        for s in &self.sequences {
            for m in s.marks() {
                if m != self.eos() {
                    sets[s.goal().0].insert(m);
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(goal: &str, actions: &[(&str, f64)]) -> SequenceRecord {
        SequenceRecord {
            goal: goal.into(),
            actions: actions
                .iter()
                .map(|&(m, t)| ActionRecord {
                    mark: m.into(),
                    time: t,
                })
                .collect(),
        }
    }

    fn goal_corpus(counts: &[(&str, usize)]) -> Dataset {
        let records: Vec<_> = counts
            .iter()
            .flat_map(|&(g, n)| (0..n).map(move |i| rec(g, &[("a", 1.0 + i as f64)])))
            .collect();
        Dataset::from_records(&records).unwrap()
    }

    #[test]
    fn deltas_follow_definition() {
        let d = Dataset::from_records(&[rec("coffee", &[("pour", 1.0), ("stir", 3.5)])]).unwrap();
        let deltas: Vec<f64> = d.sequences[0].events().iter().map(|e| e.delta).collect();
        assert_eq!(deltas, vec![1.0, 2.5]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let err = Dataset::from_records(&[rec("coffee", &[])]).unwrap_err();
        assert!(matches!(err, DataError::Validation(_)));
    }

    #[test]
    fn non_increasing_times_name_the_sequence() {
        let err = Dataset::from_records(&[
            rec("tea", &[("boil", 1.0)]),
            rec("coffee", &[("pour", 2.0), ("stir", 2.0)]),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sequence 1") && msg.contains("coffee"), "{msg}");
    }

    #[test]
    fn vocab_is_sorted_with_eos_last() {
        let d = Dataset::from_records(&[
            rec("tea", &[("boil", 1.0), ("pour", 2.0)]),
            rec("coffee", &[("pour", 1.0), ("stir", 2.0)]),
        ])
        .unwrap();
        assert_eq!(d.marks.names(), &["boil", "pour", "stir", EOS]);
        assert_eq!(d.goals.names(), &["coffee", "tea"]);
        assert_eq!(d.eos(), MarkId(3));
    }

    #[test]
    fn reserved_and_unknown_names_rejected() {
        assert!(Dataset::from_records(&[rec("g", &[(EOS, 1.0)])]).is_err());
        let d = Dataset::from_records(&[rec("g", &[("a", 1.0)])]).unwrap();
        let err = Dataset::from_records_with_vocab(
            &[rec("g", &[("b", 1.0)])],
            d.marks.clone(),
            d.goals.clone(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown mark"));
        let err =
            Dataset::from_records_with_vocab(&[rec("h", &[("a", 1.0)])], d.marks, d.goals).unwrap_err();
        assert!(err.to_string().contains("unknown goal"));
    }

    #[test]
    fn split_ceiling_rule() {
        let d = goal_corpus(&[("x", 10), ("y", 5), ("z", 1)]);
        let s = d.split_by_goal(0.8).unwrap();
        let count = |ds: &Dataset, g: &str| {
            let id = ds.goals.id(g).unwrap();
            ds.sequences.iter().filter(|s| s.goal().0 == id).count()
        };
        assert_eq!((count(&s.train, "x"), count(&s.test, "x")), (8, 2));
        assert_eq!((count(&s.train, "y"), count(&s.test, "y")), (4, 1));
        assert_eq!((count(&s.train, "z"), count(&s.test, "z")), (1, 0));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn split_takes_file_order_prefix() {
        let d = goal_corpus(&[("x", 5)]);
        let s = d.split_by_goal(0.8).unwrap();
        assert_eq!(s.test.sequences[0].events()[0].time, 5.0);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = goal_corpus(&[("x", 2)]);
        for f in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(d.split_by_goal(f), Err(DataError::Config(_))));
        }
    }

    #[test]
    fn append_eos_contract() {
        let d = Dataset::from_records(&[rec("g", &[("a", 1.0), ("b", 2.0)])]).unwrap();
        let s = d.sequences[0].append_eos(d.eos(), 1.0).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.last().mark, d.eos());
        assert_eq!(s.last().delta, 1.0);
        assert_eq!(s.last().time, 3.0);
        assert!(s.append_eos(d.eos(), 1.0).is_err());
    }

    #[test]
    fn median_and_scales() {
        let d = Dataset::from_records(&[
            rec("g", &[("a", 1.0), ("b", 3.0)]),
            rec("g", &[("a", 4.0)]),
        ])
        .unwrap();
        // deltas 1, 2, 4
        assert_eq!(d.median_delta(), 2.0);
        let (t, dl) = d.time_scales();
        assert!((t - 8.0 / 3.0).abs() < 1e-12);
        assert!((dl - 7.0 / 3.0).abs() < 1e-12);
    }
}
