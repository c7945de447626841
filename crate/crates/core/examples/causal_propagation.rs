//! Pushes exogenous noise through a hand-made causal graph and shows that an
//! intervention on one concept only reaches its descendants.

use cchmm::diffcore::{Tape, Tensor};
use cchmm::graphops::RegionGraph;
use cchmm::model::{ModelConfig, ModelParams, Session, CONCEPT_LABELS};

fn main() -> cchmm::Result<()> {
    let d = 2;
    let params = ModelParams::init(ModelConfig::new(3, d, 3.0), 0)?;
    let graph = RegionGraph::isolated(1);
    let tape = Tape::new();
    let session = Session::new(&tape, &params, &graph, false)?;

    // poi drives bike, taxi and bus; taxi drives speed.
    let mut a = Tensor::zeros(&[5, 5]);
    for (i, j, w) in [(0, 1, 0.8), (0, 2, 0.6), (0, 3, 0.7), (2, 4, 0.9)] {
        a.set(&[i, j], w);
    }
    let adjacency = Some(tape.constant(a)?);
    let eps = Tensor::new(&[1, 1, 5, d], (0..5 * d).map(|i| 0.1 * i as f64).collect())?;
    let base = tape.value(session.causal_propagate(adjacency, tape.constant(eps.clone())?)?);

    let intervened = 2;
    let mut shifted = eps;
    for k in 0..d {
        shifted.set(&[0, 0, intervened, k], 5.0);
    }
    let after = tape.value(session.causal_propagate(adjacency, tape.constant(shifted)?)?);
    println!("intervening on {}:", CONCEPT_LABELS[intervened]);
    for (i, label) in CONCEPT_LABELS.iter().enumerate() {
        let changed = (0..d).any(|k| base.at(&[0, 0, i, k]) != after.at(&[0, 0, i, k]));
        println!("  {label:<5} {}", if changed { "changed" } else { "unchanged" });
    }
    Ok(())
}
