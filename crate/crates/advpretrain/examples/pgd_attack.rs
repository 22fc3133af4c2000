//! Projected gradient descent on the pixel ball: attack a quickly
//! trained classifier, verify the perturbation contract, and watch
//! robust accuracy fall while clean accuracy stands.
//!
//! ```text
//! cargo run --example pgd_attack
//! ```

use advpretrain::attack::{classifier_loss_grad, pgd_attack, AttackConfig, Norm};
use advpretrain::data::generate_synthetic_dataset;
use advpretrain::eval::robust_accuracy;
use advpretrain::model::FinetuneMode;
use advpretrain::train::{finetune, FinetuneKind, PretrainKind, ScenarioConfig};
use advpretrain::Result;

fn main() -> Result<()> {
    // A tiny standard-trained model (P1/F3 at toy budgets).
    let ds = generate_synthetic_dataset(7, 320, 4, 16)?;
    let mut cfg = ScenarioConfig::desk(PretrainKind::None, FinetuneKind::FullStandard, vec![], 11);
    cfg.finetune_epochs = 4;
    cfg.batch_size = 32;
    cfg.probe_size = 16;
    cfg.milestones = vec![2, 3];
    cfg.eval_attack.steps = 10;
    let (params, rec) = finetune(&cfg, None, &ds, None)?;
    println!("trained {} for {} epochs", rec.scenario, rec.epochs.len());
    assert_eq!(FinetuneKind::FullStandard.mode(), FinetuneMode::Full);

    // Attack one example and check the contract by hand.
    let test = generate_synthetic_dataset(8, 64, 4, 16)?;
    let (x, y) = (&test.images[0], test.labels.as_ref().unwrap()[0] as usize);
    let atk = AttackConfig {
        norm: Norm::Linf,
        epsilon: 8.0 / 255.0,
        alpha: 2.0 / 255.0,
        steps: 10,
        random_start: false,
        seed: 5,
    };
    let mut lg = classifier_loss_grad(&params, y)?;
    let (loss_before, _) = lg(x)?;
    let adv = pgd_attack(&mut lg, x, &atk)?;
    let (loss_after, _) = lg(&adv)?;
    let linf = x
        .data()
        .iter()
        .zip(adv.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let inside = adv.data().iter().all(|v| (0.0..=1.0).contains(v));
    println!("loss {loss_before:.4} -> {loss_after:.4} under {} steps", atk.steps);
    println!("|delta|_inf = {linf:.6} <= eps = {:.6}; pixels in [0,1]: {inside}", atk.epsilon);
    assert!(linf <= atk.epsilon + 1e-12 && inside);

    // Dataset-level robust accuracy: TA high, RA low for standard training.
    let report = robust_accuracy("P1/F3-demo", &params, &test, &atk)?;
    println!(
        "TA = {:.2}%  RA = {:.2}%  (ASR on clean-correct: {:.2}%)",
        report.ta,
        report.ra,
        100.0 - report.ra_cc
    );

    // eps = 0 returns the input bit-exactly: RA degenerates to TA.
    let zero = AttackConfig { epsilon: 0.0, ..atk };
    let same = pgd_attack(&mut classifier_loss_grad(&params, y)?, x, &zero)?;
    assert_eq!(&same, x);
    println!("eps = 0 attack returns the input unchanged (bit-exact)");
    Ok(())
}
