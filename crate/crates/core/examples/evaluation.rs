//! Trains with two seeds, evaluates both and prints mean and spread.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::eval::{evaluate, reference_table, summarize, EvalConfig, CSV_HEADER, csv_row};
use ctas::model::ModelConfig;
use ctas::training::{self, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.1), 200, 11)?;
    let split = data.split_by_goal(0.8)?;
    let mut reports = Vec::new();
    for seed in [1, 2] {
        let config = ModelConfig { dim: 16, clusters: 3, max_len: 16, ..Default::default() };
        let mut model = training::initialize(&split.train, config, seed)?;
        let set = TrainingSet::new(&split.train, model.eos_gap)?;
        training::train(&mut model, &set, &TrainConfig { epochs: 15, lr: 5e-3, seed, ..Default::default() }, |_, _| Ok(()))?;
        reports.push(evaluate(&split.test, &model, &EvalConfig::default(), "goal_chains", seed)?);
    }
    println!("{CSV_HEADER}");
    for r in &reports {
        println!("{}", csv_row(r));
    }
    for (metric, s) in summarize(&reports) {
        println!("{metric}: {:.4} ± {:.4}", s.mean, s.std);
    }
    println!("{}", reference_table(&reports[0]));
    Ok(())
}
