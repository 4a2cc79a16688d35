use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// One corpus line: `{"goal": ..., "actions": [{"mark": ..., "time": ...}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub goal: String,
    pub actions: Vec<ActionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub mark: String,
    pub time: f64,
}

pub(crate) fn read_records(path: &Path) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub(crate) fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use proptest::prelude::*;

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"goal\":\"g\",\"actions\":[{\"mark\":\"a\",\"time\":1.0}]}\n\n{\"goal\": 3}\n",
        )
        .unwrap();
        match Dataset::load_jsonl(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn shared_marks_counted_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"goal\":\"coffee\",\"actions\":[{\"mark\":\"pour\",\"time\":1.0},{\"mark\":\"stir\",\"time\":3.5}]}\n",
                "{\"goal\":\"tea\",\"actions\":[{\"mark\":\"boil\",\"time\":0.5},{\"mark\":\"pour\",\"time\":2.0}]}\n",
            ),
        )
        .unwrap();
        let d = Dataset::load_jsonl(&path).unwrap();
        // boil, pour, stir + <EOS>
        assert_eq!(d.marks.len(), 4);
        assert_eq!(d.goals.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn serialize_load_roundtrip(
            seqs in proptest::collection::vec(
                (0usize..3, proptest::collection::vec((0usize..4, 1e-6f64..1e3), 1..6)),
                1..6,
            )
        ) {
            let records: Vec<SequenceRecord> = seqs
                .iter()
                .map(|(g, acts)| {
                    let mut t = 0.0;
                    SequenceRecord {
                        goal: format!("goal-{g}"),
                        actions: acts
                            .iter()
                            .map(|&(m, d)| {
                                t += d;
                                ActionRecord { mark: format!("m\u{e9}{m}"), time: t }
                            })
                            .collect(),
                    }
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_records(&path, &records).unwrap();
            let d = Dataset::load_jsonl(&path).unwrap();
            prop_assert_eq!(d.to_records(), records);
            for s in &d.sequences {
                let total: f64 = s.events().iter().map(|e| e.delta).sum();
                prop_assert!((total - s.last().time).abs() <= 1e-9 * s.last().time.max(1.0));
            }
        }
    }
}
