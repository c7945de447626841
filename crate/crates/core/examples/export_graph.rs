//! Trains briefly on a short scenario, checkpoints the model and exports the
//! learned causal graph as labelled JSON and CSV.

use cchmm::cli::LabeledGraph;
use cchmm::dataio::{synth_generate, ScenarioConfig};
use cchmm::optim::{fit, load_checkpoint, save_checkpoint, TrainConfig};

fn main() -> cchmm::Result<()> {
    let scenario = ScenarioConfig {
        timesteps: 400,
        ..ScenarioConfig::default()
    };
    let bundle = synth_generate(&scenario)?.bundle;
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let result = fit(&bundle, &config)?;

    let dir = std::env::temp_dir().join("cchmm-example-checkpoint");
    save_checkpoint(&dir, &result.final_params)?;
    let params = load_checkpoint(&dir)?;
    let graph = LabeledGraph::of(&params);
    println!("{}", serde_json::to_string_pretty(&graph).expect("graph serializes"));
    let csv = graph.to_csv();
    print!("{csv}");
    assert_eq!(LabeledGraph::from_csv(&csv)?, graph);
    Ok(())
}
