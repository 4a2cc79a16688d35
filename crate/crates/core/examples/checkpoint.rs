//! Saves a model, reloads it, and confirms identical predictions.

use ctas::data::synth::{fixtures, synth_generate};
use ctas::encoder;
use ctas::model::{Model, ModelConfig};
use ctas::training;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.2), 30, 4)?;
    let model = training::initialize(&data, ModelConfig { dim: 8, clusters: 3, max_len: 16, ..Default::default() }, 4)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.json");
    model.save(&path)?;
    let back = Model::load(&path)?;
    let seq = &data.sequences[0];
    let a = encoder::history(seq.events(), &model.scales, &model.params.encoder, &model.config)?;
    let b = encoder::history(seq.events(), &back.scales, &back.params.encoder, &back.config)?;
    println!("{} bytes, {} parameters", std::fs::metadata(&path)?.len(), back.params.n_scalars());
    println!("reloaded model equal: {}", back == model);
    println!("history bit-identical: {}", a.s.values() == b.s.values());
    Ok(())
}
