//! Round-trips a corpus through JSONL and splits it per goal.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::data::Dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.2), 40, 1)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.jsonl");
    data.write_jsonl(&path)?;
    let loaded = Dataset::load_jsonl(&path)?;
    println!("{} sequences, {} marks (with <EOS>), {} goals", loaded.len(), loaded.marks.len(), loaded.goals.len());
    let split = loaded.split_by_goal(0.8)?;
    println!("train {} / test {}", split.train.len(), split.test.len());
    println!("median gap {:.4}, longest sequence {}", split.train.median_delta(), split.train.max_len());
    for w in split.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
