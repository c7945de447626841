//! Trains the full model and two ablations under the same seed and compares
//! their test MAE per modality.
//!
//! Usage: `cargo run --release --example ablation [epochs] [timesteps]`

use cchmm::dataio::{synth_generate, ScenarioConfig, Split};
use cchmm::evalkit::forecast_split;
use cchmm::graphops::RegionGraph;
use cchmm::model::Modality;
use cchmm::optim::{fit, TrainConfig, Variant};

fn main() -> cchmm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(5);
    let mut scenario = ScenarioConfig::default();
    if let Some(t) = args.next() {
        scenario.timesteps = t.parse().expect("timesteps");
    }
    let bundle = synth_generate(&scenario)?.bundle;
    let graph = RegionGraph::new(bundle.graph.clone())?;

    println!("{:<10} {}", "variant", Modality::ALL.map(|m| format!("{:>8}", m.name())).join(""));
    for variant in [Variant::Full, Variant::NoScm, Variant::Entangle] {
        let config = TrainConfig {
            epochs,
            variant: variant.flags(),
            ..TrainConfig::default()
        };
        let fit = fit(&bundle, &config)?;
        let data = fit.normalizer.normalize(&bundle)?;
        let test = forecast_split(
            &fit.best_params,
            &graph,
            &bundle,
            &fit.normalizer,
            &data,
            Split::Test,
            config.history,
            config.batch_size,
            config.lambda,
            config.mape_threshold,
        )?;
        let cells = Modality::ALL.map(|m| format!("{:>8.4}", test.metrics.mae(m)));
        println!("{:<10} {}", variant.name(), cells.join(""));
    }
    Ok(())
}
