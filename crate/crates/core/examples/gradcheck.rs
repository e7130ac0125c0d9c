//! Checks the hand-written backward pass against central differences.

use sasv::trainer::{grad_check, grad_check_config};
use sasv::Task;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = grad_check_config();
    for task in [Task::CmBce, Task::AsvAam] {
        for dsu in [false, true] {
            let r = grad_check(&cfg, task, 7, dsu)?;
            let (analytic, numeric) = r.worst_values;
            println!(
                "{task} dsu={dsu}: {} parameters, max rel error {:.2e} (analytic {analytic:+.6e}, numeric {numeric:+.6e})",
                r.checked, r.max_rel_error
            );
        }
    }
    Ok(())
}
