//! Tracks the goal distribution as a test sequence unfolds.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::encoder;
use ctas::eval::goal_eval;
use ctas::model::ModelConfig;
use ctas::training::{self, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.1), 200, 5)?;
    let split = data.split_by_goal(0.8)?;
    let config = ModelConfig { dim: 16, clusters: 3, max_len: 16, ..Default::default() };
    let mut model = training::initialize(&split.train, config, 5)?;
    let set = TrainingSet::new(&split.train, model.eos_gap)?;
    training::train(&mut model, &set, &TrainConfig { epochs: 20, lr: 5e-3, seed: 5, ..Default::default() }, |_, _| Ok(()))?;

    let seq = &split.test.sequences[0];
    println!("true goal: {}", model.goals.name(seq.goal().0));
    let hist = encoder::history(seq.events(), &model.scales, &model.params.encoder, &model.config)?;
    for (k, e) in seq.events().iter().enumerate() {
        let (_, _, goals) = model.predict(hist.row(k), model.cluster_of(e.mark)?)?;
        let probs: Vec<String> = goals.iter().enumerate().map(|(i, p)| format!("{}={p:.3}", model.goals.name(i))).collect();
        println!("after {}: {}", model.marks.name(e.mark.0), probs.join(" "));
    }
    for acc in goal_eval(&split.test, &model, &[0.3, 0.6, 1.0])? {
        println!("GPA@{:.0}% = {:.3}", acc.fraction * 100.0, acc.gpa);
    }
    Ok(())
}
