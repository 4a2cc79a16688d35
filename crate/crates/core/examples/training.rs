//! Fits a small model on synthetic chains and prints the loss per epoch.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::model::ModelConfig;
use ctas::training::{self, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.1), 200, 3)?;
    let split = data.split_by_goal(0.8)?;
    let config = ModelConfig { dim: 16, clusters: 3, max_len: 16, ..Default::default() };
    let mut model = training::initialize(&split.train, config, 3)?;
    let set = TrainingSet::new(&split.train, model.eos_gap)?;
    let cfg = TrainConfig { epochs: 15, lr: 5e-3, seed: 3, ..Default::default() };
    training::train(&mut model, &set, &cfg, |r, _| {
        println!(
            "epoch {:>2}: total {:.4}  nll {:.4}  goal margin {:.4}  action margin {:.4}  ce {:.4}",
            r.epoch, r.loss.total, r.loss.nll, r.loss.goal_margin, r.loss.action_margin, r.loss.discounted_ce
        );
        Ok(())
    })?;
    Ok(())
}
