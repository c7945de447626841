//! Generates the reference synthetic scenario, trains the full model and
//! compares its test forecasts with persistence and the recovered graph with
//! the true one.
//!
//! Usage: `cargo run --release --example train_synthetic [epochs] [variant] [lr]`

use std::time::Instant;

use cchmm::dataio::{synth_generate, windows, ScenarioConfig, Split};
use cchmm::evalkit::{baseline_persistence, forecast_split, graph_recovery, metrics, targets};
use cchmm::graphops::RegionGraph;
use cchmm::model::{Modality, CONCEPT_LABELS};
use cchmm::objective::acyclicity_value;
use cchmm::optim::{fit, learned_adjacency, TrainConfig, Variant};

fn main() -> cchmm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::default();
    if let Some(e) = args.next() {
        config.epochs = e.parse().expect("epochs must be an integer");
    }
    if let Some(v) = args.next() {
        config.variant = v.parse::<Variant>()?.flags();
    }
    if let Some(lr) = args.next() {
        config.lr = lr.parse().expect("lr must be a number");
    }

    let scenario = synth_generate(&ScenarioConfig::default())?;
    let bundle = &scenario.bundle;
    let start = Instant::now();
    let result = fit(bundle, &config)?;
    println!("trained {} epochs in {:.1}s, best epoch {}", config.epochs, start.elapsed().as_secs_f64(), result.best_epoch);

    let graph = RegionGraph::new(bundle.graph.clone())?;
    let data = result.normalizer.normalize(bundle)?;
    let test = forecast_split(
        &result.best_params,
        &graph,
        bundle,
        &result.normalizer,
        &data,
        Split::Test,
        config.history,
        config.batch_size,
        config.lambda,
        config.mape_threshold,
    )?;
    let ws = windows(&bundle.splits, Split::Test, config.history)?;
    let persistence = metrics(&baseline_persistence(bundle, &ws), &targets(bundle, &ws), config.mape_threshold)?;
    for m in Modality::ALL {
        let (a, b) = (test.metrics.mae(m), persistence.mae(m));
        println!("{:<6} MAE model {a:8.4}  persistence {b:8.4}  ratio {:.3}", m.name(), a / b);
    }
    if let (Some(a), Some(truth)) = (learned_adjacency(&result.final_params), &bundle.ground_truth_a) {
        let rec = graph_recovery(&a, truth)?;
        print_graph("learned graph", &a);
        print_graph("true graph", truth);
        println!("AUC {:?}, F1 {:.3}, SHD {}, acyclicity {:.2e}", rec.auc, rec.f1_at_threshold, rec.structural_hamming, acyclicity_value(&a)?);
    }
    Ok(())
}

fn print_graph(title: &str, a: &cchmm::diffcore::Tensor) {
    println!("{title}:");
    for (i, from) in CONCEPT_LABELS.iter().enumerate() {
        let row: Vec<String> = (0..CONCEPT_LABELS.len()).map(|j| format!("{:5.2}", a.at(&[i, j]))).collect();
        println!("  {from:<5} {}", row.join(" "));
    }
}
