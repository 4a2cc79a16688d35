//! Samples sequences from the built-in oracle and prints a few.

use ctas::data::synth::{fixtures, synth_generate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = fixtures::goal_chains(0.1);
    let data = synth_generate(&spec, 6, 42)?;
    for s in &data.sequences {
        let acts: Vec<String> = s
            .events()
            .iter()
            .map(|e| format!("{}@{:.2}", data.marks.name(e.mark.0), e.time))
            .collect();
        println!("{:>6}: {}", data.goals.name(s.goal().0), acts.join(" "));
    }
    Ok(())
}
