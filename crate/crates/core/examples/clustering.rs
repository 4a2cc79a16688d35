//! Groups actions by their mean completion time.

use ctas::data::{cluster_actions, mean_completion_times};
use ctas::data::synth::{fixtures, synth_generate};
use ctas::data::MarkId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(&fixtures::goal_chains(0.2), 200, 2)?;
    let times = mean_completion_times(&data);
    let map = cluster_actions(&data, 3, 0)?;
    for c in 0..map.m {
        let names: Vec<String> = map
            .members(c)
            .iter()
            .map(|m| format!("{} ({:.2})", data.marks.name(m.0), times[m.0]))
            .collect();
        println!("cluster {c} centroid {:.3}: {}", map.centroids[c], names.join(", "));
    }
    println!("<EOS> cluster: {:?}", map.cluster_of(MarkId(data.marks.len() - 1)));
    Ok(())
}
