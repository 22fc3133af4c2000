//! Self-supervised pretraining in its three regimes — clean (P2),
//! adversarial (P3), and Gaussian-smoothed (P3s) — on the rotation task,
//! at toy budgets, ending in a checkpoint round-trip.
//!
//! ```text
//! cargo run --example adversarial_pretraining
//! ```

use advpretrain::data::{generate_synthetic_dataset, load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use advpretrain::model::TaskId;
use advpretrain::train::{pretrain, task_spec_for, FinetuneKind, PretrainKind, ScenarioConfig};
use advpretrain::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic_dataset(7, 240, 4, 16)?;
    for kind in [
        PretrainKind::Standard,
        PretrainKind::Adversarial,
        PretrainKind::Smoothing,
    ] {
        let mut cfg = ScenarioConfig::desk(
            kind,
            FinetuneKind::FullAdversarial,
            vec![TaskId::Rotation],
            11,
        );
        cfg.pretrain_epochs = 2;
        cfg.batch_size = 32;
        cfg.attack.steps = 4; // adversarial pretraining budget (P3 only)
        let spec = task_spec_for(&cfg, TaskId::Rotation)?;
        let (params, rec) = pretrain(&cfg, &spec, &ds, None)?;
        let last = rec.epochs.last().expect("at least one epoch");
        println!(
            "{} pretraining ({:>12}): {} epochs, pretext val acc {:.2}%",
            kind.code(),
            format!("{kind:?}"),
            rec.epochs.len(),
            last.val_accuracy
        );

        if kind == PretrainKind::Adversarial {
            // The checkpoint file preserves encoder + pretext heads
            // exactly (f32-quantized storage, digest-verified).
            let dir = std::env::temp_dir().join("advpretrain_example_pre");
            std::fs::create_dir_all(&dir)
                .map_err(advpretrain::error::io_err(dir.display().to_string()))?;
            let path = dir.join("p3.ckpt");
            let ckpt = Checkpoint::from_model(
                &params,
                Provenance {
                    scenario: rec.scenario.clone(),
                    epoch: rec.best_epoch,
                    seed: cfg.seed,
                },
            );
            save_checkpoint(&path, &ckpt)?;
            let back = load_checkpoint(&path)?;
            assert_eq!(back, ckpt);
            println!("  checkpoint round-trip exact: {}", path.display());
        }
    }
    Ok(())
}
