//! Generates a synthetic scenario, writes it in the array-container format,
//! reads it back and prints a short summary.
//!
//! Usage: `cargo run --release --example generate_dataset [out_dir]`

use std::path::PathBuf;

use cchmm::dataio::{synth_generate, DatasetBundle, ScenarioConfig, Split};
use cchmm::model::{Modality, CONCEPT_LABELS};

fn main() -> cchmm::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cchmm-example-data"));
    let scenario = synth_generate(&ScenarioConfig::default())?;
    scenario.bundle.save(&out)?;
    let back = DatasetBundle::load(&out)?;
    assert_eq!(back.cond, scenario.bundle.cond);

    println!("{} steps, {} regions, {} condition channels -> {}", back.num_steps(), back.num_regions(), back.cond_dim(), out.display());
    for split in Split::ALL {
        println!("{:<5} steps {:?}", split.name(), back.splits.range(split));
    }
    for m in Modality::ALL {
        let x = back.obs_of(m).data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        println!("{:<6} mean {mean:8.3}  max {max:8.3}", m.name());
    }
    if let Some(a) = &back.ground_truth_a {
        println!("true causal graph (row -> column):");
        for (i, from) in CONCEPT_LABELS.iter().enumerate() {
            let row: Vec<String> = (0..CONCEPT_LABELS.len()).map(|j| format!("{:4.1}", a.at(&[i, j]))).collect();
            println!("  {from:<5} {}", row.join(" "));
        }
    }
    Ok(())
}
