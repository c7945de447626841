//! Checks the analytic gradient of the full objective against central
//! differences for every parameter group of a tiny model.

use std::time::Instant;

use cchmm::model::Architecture;
use cchmm::optim::gradcheck::{check_model, tiny_instance};

fn main() -> cchmm::Result<()> {
    let start = Instant::now();
    let inst = tiny_instance(Architecture::default(), 3, 4, 2, 0)?;
    let report = check_model(&inst, false)?;
    for g in &report.groups {
        println!("{:<28} {:.3e}  ({})", g.group, g.max_rel_err, g.worst_param);
    }
    println!(
        "max relative error {:.3e} in {} -> {} ({:.1}s)",
        report.max_rel_err,
        report.worst_param,
        if report.passed { "pass" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
