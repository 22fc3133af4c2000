//! Attack transferability between models and prediction-averaging
//! ensembles: train three small models, fill the transfer matrix
//! (diagonal = self-attack), inspect success-set overlap, and measure
//! the ensemble against its own joint attack.
//!
//! ```text
//! cargo run --example transfer_and_ensemble   (~1 minute)
//! ```

use advpretrain::data::generate_synthetic_dataset;
use advpretrain::eval::{
    ensemble_robust_accuracy, overlap_stats, robust_accuracy, transfer_matrix, AsrDenominator,
};
use advpretrain::model::TaskId;
use advpretrain::train::{finetune, pretrain, task_spec_for, FinetuneKind, PretrainKind, ScenarioConfig};
use advpretrain::Result;

fn main() -> Result<()> {
    let train = generate_synthetic_dataset(7, 320, 4, 16)?;
    let test = generate_synthetic_dataset(901, 48, 4, 16)?;

    // Three models differing only in seed (fast stand-ins for the
    // per-pretext-task models of the full pipeline).
    let mut models = Vec::new();
    let mut ids = Vec::new();
    for seed in [11u64, 12, 13] {
        let mut cfg = ScenarioConfig::desk(
            PretrainKind::Adversarial,
            FinetuneKind::FullAdversarial,
            vec![TaskId::Rotation],
            seed,
        );
        cfg.pretrain_epochs = 1;
        cfg.finetune_epochs = 2;
        cfg.batch_size = 32;
        cfg.milestones = vec![2];
        cfg.probe_size = 16;
        cfg.attack.steps = 3;
        cfg.eval_attack.steps = 6;
        let spec = task_spec_for(&cfg, TaskId::Rotation)?;
        let (pre, _) = pretrain(&cfg, &spec, &train, None)?;
        let ckpt = advpretrain::data::Checkpoint::from_model(
            &pre,
            advpretrain::data::Provenance {
                scenario: cfg.scenario_id(),
                epoch: 0,
                seed,
            },
        );
        let (params, _) = finetune(&cfg, Some(&ckpt), &train, None)?;
        models.push(params);
        ids.push(format!("seed{seed}"));
    }
    let refs: Vec<&_> = models.iter().collect();
    let eval_atk = {
        let mut cfg = ScenarioConfig::desk(
            PretrainKind::None,
            FinetuneKind::FullStandard,
            vec![],
            11,
        );
        cfg.eval_attack.steps = 6;
        cfg.eval_attack
    };

    // Transfer matrix: row = source of adversarial examples, column =
    // victim. ASR denominator: the victim's clean-correct examples.
    let tm = transfer_matrix(&ids, &refs, &test, &eval_atk, AsrDenominator::CleanCorrect)?;
    println!("attack success rate (%):");
    print!("{:>10}", "src\\tgt");
    for id in &tm.model_ids {
        print!("{id:>9}");
    }
    println!();
    for (i, row) in tm.asr.iter().enumerate() {
        print!("{:>10}", tm.model_ids[i]);
        for v in row {
            print!("{v:>9.2}");
        }
        println!();
    }
    println!("diagonal identity: ASR[i][i] = 100 - RA|clean of model i (shared bitmaps)");

    // Success-set overlap between two sources against the same victim.
    let s01 = &tm.success[0][1];
    let s21 = &tm.success[2][1];
    let ov = overlap_stats(s01, s21)?;
    println!(
        "flips of seed12 by seed11-vs-seed13 examples: only-first {:.1}%, only-second {:.1}%, both {:.1}%",
        ov.pct_only_a, ov.pct_only_b, ov.pct_both
    );

    // Prediction-averaging ensemble, attacked through its own averaged
    // loss (no obfuscation: the attack sees the whole ensemble).
    let single_best = refs
        .iter()
        .zip(&ids)
        .map(|(m, id)| robust_accuracy(id, m, &test, &eval_atk).map(|r| (r.ra, id.clone())))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((f64::MIN, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let ens = ensemble_robust_accuracy("avg(3)", &refs, &test, &eval_atk)?;
    println!(
        "best single RA = {:.2}% ({}); ensemble RA = {:.2}%",
        single_best.0, single_best.1, ens.ra
    );
    Ok(())
}
