//! Multi-task ensemble pretraining and the diversity-weight search:
//! jointly attack rotation + jigsaw during pretraining, sweep the
//! lambda grid at toy budgets, and report the kept weight.
//!
//! ```text
//! cargo run --example lambda_search   (~2 minutes)
//! ```

use advpretrain::data::generate_synthetic_dataset;
use advpretrain::model::TaskId;
use advpretrain::ssl::TaskSpec;
use advpretrain::train::{
    lambda_grid_search, task_spec_for, FinetuneKind, PretrainKind, ScenarioConfig,
};
use advpretrain::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic_dataset(7, 192, 4, 16)?;
    let mut base = ScenarioConfig::desk(
        PretrainKind::Adversarial,
        FinetuneKind::FullAdversarial,
        vec![TaskId::Rotation, TaskId::Jigsaw],
        11,
    );
    base.pretrain_epochs = 1;
    base.finetune_epochs = 2;
    base.batch_size = 32;
    base.milestones = vec![1];
    base.probe_size = 20;
    base.attack.steps = 2;
    base.eval_attack.steps = 4;

    let specs: Vec<TaskSpec> = base
        .tasks
        .iter()
        .map(|&t| task_spec_for(&base, t))
        .collect::<Result<_>>()?;

    let grid = [0.0, 0.1];
    let res = lambda_grid_search(&base, &specs, &grid, &ds, &ds, None)?;
    println!("{:>8} {:>10} {:>10}", "lambda", "val RA (%)", "val TA (%)");
    for row in &res.rows {
        println!("{:>8} {:>10.2} {:>10.2}", row.lambda, row.val_ra, row.val_ta);
    }
    println!("kept lambda = {}", res.best_lambda);
    println!("(lambda = 0 decouples the joint attack into independent per-task attacks)");
    Ok(())
}
