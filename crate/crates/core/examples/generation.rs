//! Generates goal-conditioned sequences from a trained model.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::data::{GoalId, MarkId};
use ctas::generation::{generate, GenerationConfig, GenerationMode};
use ctas::model::ModelConfig;
use ctas::training::{self, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::unit_chain(), 40, 0)?;
    let config = ModelConfig { dim: 8, clusters: 1, max_len: 8, ..Default::default() };
    let mut model = training::initialize(&data, config, 0)?;
    let set = TrainingSet::new(&data, model.eos_gap)?;
    training::train(&mut model, &set, &TrainConfig { epochs: 150, lr: 1e-2, ..Default::default() }, |_, _| Ok(()))?;

    let a = MarkId(model.marks.id("A").ok_or("missing mark A")?);
    for mode in [GenerationMode::Greedy, GenerationMode::Sample] {
        let cfg = GenerationConfig { max_len: 10, mode, seed: 1, ..Default::default() };
        let out = generate(&model, GoalId(0), (a, 1.0), &cfg)?;
        let acts: Vec<String> = out
            .events
            .iter()
            .map(|e| format!("{}@{:.3}", model.marks.name(e.mark.0), e.time))
            .collect();
        println!("{mode:?}: {} ({:?})", acts.join(" "), out.stop_reason);
    }
    Ok(())
}
