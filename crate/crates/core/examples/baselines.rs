//! Scores the persistence and historical-average baselines on the test split
//! of the reference scenario.

use cchmm::dataio::{synth_generate, windows, ScenarioConfig, Split};
use cchmm::evalkit::{baseline_historical_average, baseline_persistence, metrics, targets, DEFAULT_MAPE_THRESHOLD};
use cchmm::model::Modality;

fn main() -> cchmm::Result<()> {
    let bundle = synth_generate(&ScenarioConfig::default())?.bundle;
    let ws = windows(&bundle.splits, Split::Test, 6)?;
    let truth = targets(&bundle, &ws);
    let persistence = metrics(&baseline_persistence(&bundle, &ws), &truth, DEFAULT_MAPE_THRESHOLD)?;
    let average = metrics(&baseline_historical_average(&bundle, &ws)?, &truth, DEFAULT_MAPE_THRESHOLD)?;
    println!("{} test windows", ws.len());
    println!("{:<6} {:>10} {:>10} {:>10} {:>10}", "", "pers MAE", "pers RMSE", "HA MAE", "HA RMSE");
    for m in Modality::ALL {
        let (p, h) = (persistence.get(m).unwrap(), average.get(m).unwrap());
        println!("{:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", m.name(), p.mae, p.rmse, h.mae, h.rmse);
    }
    Ok(())
}
