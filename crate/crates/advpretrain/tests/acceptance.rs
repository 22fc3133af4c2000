//! End-to-end acceptance battery: eight checks, one PASS/FAIL line each,
//! exit code 1 if any fails.
//!
//! ```text
//! cargo test --test acceptance              # all eight criteria
//! cargo test --test acceptance -- 1 3 4 8   # only the listed criteria
//! ```
//!
//! Criteria 1–4 and 8 are exact property suites and finish in about two
//! minutes combined. Criteria 5–7 share one expensive bundle — the full
//! scenario battery on the desk benchmark (4-class synthetic 16x16, 4K
//! train) across the fixed seed triple 11/12/13 — and dominate the
//! wall-clock (hours on one core; progress lines go to stderr).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use advpretrain::attack::{
    classifier_loss_grad, diversity_score, joint_ensemble_attack, pgd_attack, task_loss_grad,
    AttackConfig, GradientMatrix, GRAM_JITTER,
};
use advpretrain::data::{
    generate_synthetic_dataset, load_bitmap, load_checkpoint, load_dataset, read_metrics,
    save_bitmap, save_checkpoint, save_dataset, Checkpoint, Dataset, MetricRecord, MetricsWriter,
    Provenance,
};
use advpretrain::error::Error;
use advpretrain::eval::{
    ensemble_robust_accuracy, robust_accuracy, transfer_matrix, AsrDenominator,
};
use advpretrain::gradcheck::run_gradcheck;
use advpretrain::model::{init_model, Arch, ModelParams, TaskId};
use advpretrain::rng::{mix, Rng};
use advpretrain::ssl::TaskSpec;
use advpretrain::train::{
    finetune, pretrain, task_spec_for, FinetuneKind, FinetuneRecord, PretrainKind, ScenarioConfig,
};
use advpretrain::Result;

// ── desk benchmark budgets (single-core wall-clock is the constraint) ─
const SEEDS: [u64; 3] = [11, 12, 13];
const DATA_SEED: u64 = 7;
const TRAIN_N: usize = 4000;
const TEST_N: usize = 400;
const CLASSES: usize = 4;
const SIDE: usize = 16;
const PRETRAIN_EPOCHS: usize = 14;
const FINETUNE_EPOCHS: usize = 10;
const MILESTONES: [usize; 2] = [5, 8];
const PROBE: usize = 100;
/// Seed tag for the held-out test stream (matches the CLI's derivation).
const TEST_TAG: u64 = 0x7e57;

fn main() -> ExitCode {
    let filter: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let all: Vec<(u32, &str, fn(&mut Shared) -> Result<Outcome>)> = vec![
        (1, "gradient correctness", c1_gradients),
        (2, "attack feasibility", c2_attack_contract),
        (3, "diversity regularizer exactness", c3_diversity),
        (4, "lambda-zero decoupling", c4_decoupling),
        (5, "scenario-matrix trends", c5_trends),
        (6, "transfer diagonal dominance", c6_transfer),
        (7, "ensemble gain", c7_ensemble),
        (8, "round-trip fidelity", c8_roundtrip),
    ];
    let mut shared = Shared::default();
    let mut failed = false;
    for (num, name, run) in all {
        if !filter.is_empty() && !filter.contains(&num) {
            continue;
        }
        let t = Instant::now();
        let line = match run(&mut shared) {
            Ok(Outcome { pass, detail }) => {
                failed |= !pass;
                format!(
                    "criterion {num} {}  {name} — {detail} ({:.1}s)",
                    if pass { "PASS" } else { "FAIL" },
                    t.elapsed().as_secs_f64()
                )
            }
            Err(e) => {
                failed = true;
                format!(
                    "criterion {num} FAIL  {name} — error: {e} ({:.1}s)",
                    t.elapsed().as_secs_f64()
                )
            }
        };
        println!("{line}");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass(detail: String) -> Result<Outcome> {
    Ok(Outcome { pass: true, detail })
}

fn fail(detail: String) -> Result<Outcome> {
    Ok(Outcome {
        pass: false,
        detail,
    })
}

fn train_set() -> Result<Dataset> {
    generate_synthetic_dataset(DATA_SEED, TRAIN_N, CLASSES, SIDE)
}

fn test_set() -> Result<Dataset> {
    generate_synthetic_dataset(mix(DATA_SEED, TEST_TAG), TEST_N, CLASSES, SIDE)
}

fn desk_config(p: PretrainKind, f: FinetuneKind, tasks: Vec<TaskId>, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk(p, f, tasks, seed);
    cfg.pretrain_epochs = PRETRAIN_EPOCHS;
    cfg.finetune_epochs = FINETUNE_EPOCHS;
    cfg.milestones = MILESTONES.to_vec();
    cfg.probe_size = PROBE;
    cfg
}

// ── criterion 1: gradients ───────────────────────────────────────────

fn c1_gradients(_: &mut Shared) -> Result<Outcome> {
    let report = run_gradcheck(4242, 100)?;
    let worst = report
        .ops
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    let detail = format!(
        "{} ops x 100 cases, worst rel err {worst:.2e} (tol {:.0e}), {:.1}s (budget 60s)",
        report.ops.len(),
        report.tol,
        report.wall_secs
    );
    if report.passed && report.wall_secs < 60.0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ── criterion 2: attack contract ─────────────────────────────────────

fn c2_attack_contract(_: &mut Shared) -> Result<Outcome> {
    // A briefly trained model so input gradients are non-degenerate.
    let train = generate_synthetic_dataset(DATA_SEED, 256, CLASSES, SIDE)?;
    let mut cfg = desk_config(PretrainKind::None, FinetuneKind::FullStandard, vec![], 11);
    cfg.finetune_epochs = 1;
    cfg.milestones = vec![1];
    cfg.probe_size = 8;
    let (params, _) = finetune(&cfg, None, &train, None)?;
    let ds = generate_synthetic_dataset(mix(DATA_SEED, TEST_TAG), 1000, CLASSES, SIDE)?;
    let labels = ds.labels.clone().expect("generator labels its images");

    let eps = 8.0 / 255.0;
    let configs = [
        ("train 10-step random-start", AttackConfig::train_linf(90)),
        ("eval 20-step", AttackConfig::eval_linf(91)),
    ];
    let mut checked = 0usize;
    for (name, atk) in &configs {
        for (i, (x, &y)) in ds.images.iter().zip(&labels).enumerate() {
            let per = AttackConfig {
                seed: mix(atk.seed, i as u64),
                ..*atk
            };
            let mut lg = classifier_loss_grad(&params, y as usize)?;
            let adv = pgd_attack(&mut lg, x, &per)?;
            for (a, b) in x.data().iter().zip(adv.data()) {
                let d = (a - b).abs();
                if d > eps {
                    return fail(format!(
                        "{name}: example {i} violates |delta|_inf <= eps: {d:.17} > {eps:.17}"
                    ));
                }
                if !(0.0..=1.0).contains(b) {
                    return fail(format!("{name}: example {i} leaves [0,1]: {b:.17}"));
                }
            }
            checked += 1;
        }
    }
    // eps = 0 must return the inputs bit-exactly under both regimes.
    for (_, atk) in &configs {
        let zero = AttackConfig {
            epsilon: 0.0,
            ..*atk
        };
        for (i, (x, &y)) in ds.images.iter().zip(&labels).enumerate().take(100) {
            let mut lg = classifier_loss_grad(&params, y as usize)?;
            let adv = pgd_attack(&mut lg, x, &zero)?;
            let same = x
                .data()
                .iter()
                .zip(adv.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return fail(format!("eps=0 attack altered example {i}"));
            }
        }
    }
    pass(format!(
        "{checked} attacked examples (1000 per config): |delta|_inf <= 8/255 and pixels in [0,1] exact; eps=0 bit-exact"
    ))
}

// ── criterion 3: diversity regularizer ───────────────────────────────

/// Direct 2x2 oracle: ln det(G^T G + jitter·I) for unit columns at the
/// given cosine, straight from the closed 2x2 determinant.
fn det_oracle_2x2(cos: f64, jitter: f64) -> f64 {
    let a = 1.0 + jitter;
    (a * a - cos * cos).ln()
}

fn c3_diversity(_: &mut Shared) -> Result<Outcome> {
    let pair = |u: Vec<f64>, v: Vec<f64>| {
        GradientMatrix::from_raw(vec![TaskId::Rotation, TaskId::Jigsaw], vec![u, v])
    };
    let mut detail = String::new();

    // Orthonormal columns → 0 (±1e-9); checked for two and three tasks.
    let g2 = diversity_score(&pair(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0])?);
    let g3 = diversity_score(&GradientMatrix::from_raw(
        vec![TaskId::Rotation, TaskId::Jigsaw, TaskId::Selfie],
        vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ],
    )?);
    if g2.abs() > 1e-9 || g3.abs() > 1e-9 {
        return fail(format!(
            "orthonormal columns scored {g2:+.3e} (pair) / {g3:+.3e} (triple), want 0 (+-1e-9)"
        ));
    }
    let _ = write!(detail, "ortho {g2:+.1e}/{g3:+.1e}; ");

    // Duplicated columns → ≤ ln(1e-12) + 1.
    let dup = diversity_score(&pair(vec![3.0, -1.0, 2.0], vec![3.0, -1.0, 2.0])?);
    let bound = (1e-12f64).ln() + 1.0;
    if dup > bound {
        return fail(format!(
            "duplicated columns scored {dup:.3}, want <= ln(1e-12)+1 = {bound:.3}"
        ));
    }
    let _ = write!(detail, "dup {dup:.1} <= {bound:.1}; ");

    // Unit columns at angle theta → ln(1 − cos²θ) within 1e-9, checked
    // against the direct determinant oracle as well.
    for deg in [30.0f64, 45.0, 60.0, 90.0] {
        let th = deg.to_radians();
        let got = diversity_score(&pair(vec![1.0, 0.0], vec![th.cos(), th.sin()])?);
        let closed = (1.0 - th.cos().powi(2)).ln();
        let oracle = det_oracle_2x2(th.cos(), GRAM_JITTER);
        if (got - closed).abs() > 1e-9 || (got - oracle).abs() > 1e-9 {
            return fail(format!(
                "theta={deg}: got {got:.12}, closed form {closed:.12}, oracle {oracle:.12}"
            ));
        }
    }
    let _ = write!(
        detail,
        "angles 30/45/60/90 match ln(1-cos^2 theta) and the 2x2 oracle within 1e-9"
    );
    pass(detail)
}

// ── criterion 4: lambda = 0 decoupling ───────────────────────────────

fn c4_decoupling(_: &mut Shared) -> Result<Outcome> {
    let ds = generate_synthetic_dataset(DATA_SEED, 6, CLASSES, SIDE)?;
    let arch = Arch::by_id("desk16")?;
    let specs: Vec<TaskSpec> = [TaskId::Rotation, TaskId::Jigsaw, TaskId::Selfie]
        .into_iter()
        .map(|t| TaskSpec::default_for(t, arch.side, 5))
        .collect::<Result<_>>()?;
    let heads: Vec<(TaskId, usize)> = specs.iter().map(|s| (s.id(), s.head_width())).collect();
    let params = init_model(&arch, &heads, None, 4321)?;

    let mut rng = Rng::new(17);
    let mut compared = 0usize;
    for x in &ds.images {
        let samples: Vec<_> = specs
            .iter()
            .map(|s| s.make_sample(x, &mut rng))
            .collect::<Result<_>>()?;
        // Random start on and off: both seeded paths must decouple.
        for random_start in [false, true] {
            let atk = AttackConfig {
                random_start,
                seed: mix(99, compared as u64),
                ..AttackConfig::train_linf(0)
            };
            let joint = joint_ensemble_attack(&params, &samples, &atk, 0.0)?;
            for (i, s) in samples.iter().enumerate() {
                let solo_cfg = AttackConfig {
                    seed: mix(atk.seed, i as u64),
                    ..atk
                };
                let mut lg = task_loss_grad(&params, s)?;
                let adv = pgd_attack(&mut lg, &s.input, &solo_cfg)?;
                let bitwise = joint[i]
                    .data()
                    .iter()
                    .zip(s.input.data().iter().zip(adv.data()))
                    .all(|(d, (x0, xa))| d.to_bits() == (xa - x0).to_bits());
                if !bitwise {
                    return fail(format!(
                        "task {i} (random_start={random_start}) differs from independent PGD"
                    ));
                }
            }
            compared += 1;
        }
    }
    pass(format!(
        "{compared} joint attacks x 3 tasks bit-identical to independent per-task PGD (with and without random start)"
    ))
}

// ── criteria 5–7: the desk trend bundle ──────────────────────────────

/// Everything criteria 5–7 need from one seed's training runs:
/// (test TA, test RA) per scenario, the two F4 records for the
/// epochs-to-best-RA comparison, and the three task-pretrained F4
/// models for the transfer matrix and the prediction ensemble.
struct SeedRuns {
    seed: u64,
    p1f3: (f64, f64),
    p1f4: (f64, f64),
    p3f1: (f64, f64),
    p3f2: (f64, f64),
    p3f3: (f64, f64),
    p3f4: (f64, f64),
    p1f4_rec: FinetuneRecord,
    p3f4_rec: FinetuneRecord,
    task_models: Vec<(String, ModelParams)>,
}

#[derive(Default)]
struct Shared {
    runs: Option<Vec<SeedRuns>>,
}

impl Shared {
    fn runs(&mut self) -> Result<&[SeedRuns]> {
        if self.runs.is_none() {
            let mut out = Vec::new();
            for seed in SEEDS {
                out.push(run_seed(seed)?);
            }
            self.runs = Some(out);
        }
        Ok(self.runs.as_deref().expect("just filled"))
    }
}

fn eval_pair(
    scenario: &str,
    params: &ModelParams,
    test: &Dataset,
    cfg: &ScenarioConfig,
) -> Result<(f64, f64)> {
    let rep = robust_accuracy(scenario, params, test, &cfg.eval_attack)?;
    Ok((rep.ta, rep.ra))
}

fn adversarial_pretrain_checkpoint(
    task: TaskId,
    train: &Dataset,
    seed: u64,
) -> Result<Checkpoint> {
    let cfg = desk_config(
        PretrainKind::Adversarial,
        FinetuneKind::FullAdversarial,
        vec![task],
        seed,
    );
    let spec = task_spec_for(&cfg, task)?;
    let (pre, rec) = pretrain(&cfg, &spec, train, None)?;
    Ok(Checkpoint::from_model(
        &pre,
        Provenance {
            scenario: rec.scenario,
            epoch: rec.best_epoch,
            seed,
        },
    ))
}

fn run_seed(seed: u64) -> Result<SeedRuns> {
    let t0 = Instant::now();
    let train = train_set()?;
    let test = test_set()?;
    let progress = |what: &str| {
        eprintln!("  [seed {seed}] {what} ({:.0}s)", t0.elapsed().as_secs_f64());
    };

    // P1 cells: training from scratch.
    let cfg = desk_config(PretrainKind::None, FinetuneKind::FullStandard, vec![], seed);
    let (m, _) = finetune(&cfg, None, &train, None)?;
    let p1f3 = eval_pair("P1/F3", &m, &test, &cfg)?;
    progress("P1/F3 done");
    let cfg = desk_config(PretrainKind::None, FinetuneKind::FullAdversarial, vec![], seed);
    let (m, p1f4_rec) = finetune(&cfg, None, &train, None)?;
    let p1f4 = eval_pair("P1/F4", &m, &test, &cfg)?;
    progress("P1/F4 done");

    // Jigsaw P3 checkpoint feeds the four fine-tuning regimes. Jigsaw
    // is the matrix task because its pretext (layout/texture) aligns
    // best with family classification; rotation's orientation features
    // transfer measurably worse.
    let jig = adversarial_pretrain_checkpoint(TaskId::Jigsaw, &train, seed)?;
    progress("jigsaw P3 pretraining done");
    let cell = |kind: FinetuneKind| -> Result<((f64, f64), FinetuneRecord, ModelParams)> {
        let cfg = desk_config(
            PretrainKind::Adversarial,
            kind,
            vec![TaskId::Jigsaw],
            seed,
        );
        let (m, rec) = finetune(&cfg, Some(&jig), &train, None)?;
        let pair = eval_pair(&cfg.scenario_id(), &m, &test, &cfg)?;
        Ok((pair, rec, m))
    };
    let (p3f1, _, _) = cell(FinetuneKind::PartialStandard)?;
    progress("P3/F1 done");
    let (p3f2, _, _) = cell(FinetuneKind::PartialAdversarial)?;
    progress("P3/F2 done");
    let (p3f3, _, _) = cell(FinetuneKind::FullStandard)?;
    progress("P3/F3 done");
    let (p3f4, p3f4_rec, jig_f4) = cell(FinetuneKind::FullAdversarial)?;
    progress("P3/F4 done");

    // Rotation and selfie P3 checkpoints, each fine-tuned F4, complete
    // the transfer/ensemble triple.
    let mut task_models = vec![(format!("jigsaw/s{seed}"), jig_f4)];
    for task in [TaskId::Rotation, TaskId::Selfie] {
        let ckpt = adversarial_pretrain_checkpoint(task, &train, seed)?;
        let cfg = desk_config(
            PretrainKind::Adversarial,
            FinetuneKind::FullAdversarial,
            vec![task],
            seed,
        );
        let (m, _) = finetune(&cfg, Some(&ckpt), &train, None)?;
        task_models.push((format!("{}/s{seed}", task.name()), m));
        progress(&format!("{} P3 + F4 done", task.name()));
    }

    Ok(SeedRuns {
        seed,
        p1f3,
        p1f4,
        p3f1,
        p3f2,
        p3f3,
        p3f4,
        p1f4_rec,
        p3f4_rec,
        task_models,
    })
}

fn c5_trends(shared: &mut Shared) -> Result<Outcome> {
    let runs = shared.runs()?;
    let mut detail = String::new();
    let mut ok = true;
    let mut d_hits = 0;
    for r in runs {
        let a = r.p1f3.1 < 5.0 && r.p3f3.1 < 5.0 && r.p1f3.0 > 85.0 && r.p3f3.0 > 85.0;
        let b = r.p1f4.1 >= 25.0;
        let c = r.p3f2.1 - r.p3f1.1 >= 10.0;
        let d = r.p3f4.1 >= r.p1f4.1 - 1.0
            && r.p3f4_rec.epochs_to_best_ra <= r.p1f4_rec.epochs_to_best_ra;
        if d {
            d_hits += 1;
        }
        ok &= a && b && c;
        let _ = write!(
            detail,
            "[s{}] a:{} (F3 RA {:.1}/{:.1}, TA {:.1}/{:.1}) b:{} ({:.1}) c:{} ({:+.1}) d:{} (RA {:.1} vs {:.1}, epochs {} vs {}); ",
            r.seed,
            if a { "ok" } else { "FAIL" },
            r.p1f3.1,
            r.p3f3.1,
            r.p1f3.0,
            r.p3f3.0,
            if b { "ok" } else { "FAIL" },
            r.p1f4.1,
            if c { "ok" } else { "FAIL" },
            r.p3f2.1 - r.p3f1.1,
            if d { "ok" } else { "miss" },
            r.p3f4.1,
            r.p1f4.1,
            r.p3f4_rec.epochs_to_best_ra,
            r.p1f4_rec.epochs_to_best_ra,
        );
    }
    ok &= d_hits >= 2;
    let _ = write!(detail, "d holds in {d_hits}/3 seeds (need >= 2)");
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn c6_transfer(shared: &mut Shared) -> Result<Outcome> {
    let eval_attack = AttackConfig::eval_linf(mix(SEEDS[0], 0xe7a));
    let runs = shared.runs()?;
    let test = test_set()?;
    let mut dominant_seeds = 0;
    let mut detail = String::new();
    for r in runs {
        let ids: Vec<String> = r.task_models.iter().map(|(id, _)| id.clone()).collect();
        let models: Vec<&ModelParams> = r.task_models.iter().map(|(_, m)| m).collect();
        let tm = transfer_matrix(&ids, &models, &test, &eval_attack, AsrDenominator::CleanCorrect)?;
        // The complement identity must hold exactly in every run.
        for i in 0..models.len() {
            let want = 100.0 - tm.source_reports[i].ra_cc;
            if tm.asr[i][i].to_bits() != want.to_bits() {
                return fail(format!(
                    "seed {}: diagonal {i} is {} but 100 - RA|clean is {want}",
                    r.seed, tm.asr[i][i]
                ));
            }
        }
        let n = models.len();
        let dominant =
            (0..n).all(|col| (0..n).all(|row| row == col || tm.asr[row][col] < tm.asr[col][col]));
        if dominant {
            dominant_seeds += 1;
        }
        let _ = write!(
            detail,
            "[s{}] diag {:.1}/{:.1}/{:.1} {}; ",
            r.seed,
            tm.asr[0][0],
            tm.asr[1][1],
            tm.asr[2][2],
            if dominant { "strictly max" } else { "not max" },
        );
    }
    let _ = write!(
        detail,
        "diagonal strictly dominant in {dominant_seeds}/3 seeds (need >= 2); complement identity exact in all"
    );
    if dominant_seeds >= 2 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn c7_ensemble(shared: &mut Shared) -> Result<Outcome> {
    let eval_attack = AttackConfig::eval_linf(mix(SEEDS[0], 0xe7a));
    let runs = shared.runs()?;
    let test = test_set()?;
    let mut never_worse = true;
    let mut strictly_better = 0;
    let mut detail = String::new();
    for r in runs {
        let models: Vec<&ModelParams> = r.task_models.iter().map(|(_, m)| m).collect();
        let mut best_single = f64::MIN;
        for (id, m) in &r.task_models {
            let rep = robust_accuracy(id, m, &test, &eval_attack)?;
            best_single = best_single.max(rep.ra);
        }
        let ens = ensemble_robust_accuracy("prediction-average", &models, &test, &eval_attack)?;
        never_worse &= ens.ra >= best_single - 1.0;
        if ens.ra > best_single {
            strictly_better += 1;
        }
        let _ = write!(
            detail,
            "[s{}] ensemble RA {:.1} vs best single {:.1}; ",
            r.seed, ens.ra, best_single
        );
    }
    let ok = never_worse && strictly_better >= 2;
    let _ = write!(
        detail,
        "never below best-1: {never_worse}; strictly better in {strictly_better}/3 (need >= 2)"
    );
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ── criterion 8: persistence round-trips and snapshot rerun ──────────

fn c8_roundtrip(_: &mut Shared) -> Result<Outcome> {
    let dir = fresh_tempdir()?;
    let mut detail = String::new();

    // Dataset: exact round-trip, then structured corruption errors.
    let ds = generate_synthetic_dataset(3, 40, CLASSES, SIDE)?;
    let p = dir.join("a.ds");
    save_dataset(&p, &ds)?;
    let back = load_dataset(&p)?;
    if back.images != ds.images || back.labels != ds.labels || back.classes != ds.classes {
        return fail("dataset round-trip mismatch".into());
    }
    let bytes = std::fs::read(&p).expect("read saved dataset");
    let mut wrong = bytes.clone();
    wrong[0] ^= 0xff;
    std::fs::write(dir.join("m.ds"), &wrong).expect("write corrupted copy");
    if !matches!(load_dataset(dir.join("m.ds")), Err(Error::BadMagic { .. })) {
        return fail("wrong magic did not produce the BadMagic error".into());
    }
    std::fs::write(dir.join("t.ds"), &bytes[..bytes.len() - 7]).expect("write truncated copy");
    if !matches!(load_dataset(dir.join("t.ds")), Err(Error::Truncated { .. })) {
        return fail("short file did not produce the Truncated error".into());
    }
    let _ = write!(detail, "dataset ok; ");

    // Checkpoint: round-trip plus digest tamper detection.
    let arch = Arch::by_id("desk16")?;
    let params = init_model(&arch, &[(TaskId::Rotation, 4)], Some(CLASSES), 5)?;
    let ckpt = Checkpoint::from_model(
        &params,
        Provenance {
            scenario: "P3[rotation]/F4".into(),
            epoch: 2,
            seed: 5,
        },
    );
    let cp = dir.join("m.ckpt");
    save_checkpoint(&cp, &ckpt)?;
    if load_checkpoint(&cp)? != ckpt {
        return fail("checkpoint round-trip mismatch".into());
    }
    let mut cb = std::fs::read(&cp).expect("read checkpoint");
    let mid = cb.len() / 2;
    cb[mid] ^= 0x01;
    std::fs::write(dir.join("bad.ckpt"), &cb).expect("write tampered checkpoint");
    if !matches!(
        load_checkpoint(dir.join("bad.ckpt")),
        Err(Error::DigestMismatch { .. })
    ) {
        return fail("tampered checkpoint did not produce the DigestMismatch error".into());
    }
    let _ = write!(detail, "checkpoint ok; ");

    // Metrics: order-preserving line round-trip.
    let mp = dir.join("m.jsonl");
    {
        let mut w = MetricsWriter::create(&mp)?;
        for (i, v) in [0.1, 33.333333333333336, 100.0].iter().enumerate() {
            w.emit(&MetricRecord {
                scenario: "P1/F3".into(),
                epoch: i as u32 + 1,
                metric: "val_ta".into(),
                value: *v,
            })?;
        }
    }
    let recs = read_metrics(&mp)?;
    if recs.len() != 3 || recs[1].value.to_bits() != 33.333333333333336f64.to_bits() {
        return fail("metrics round-trip mismatch".into());
    }
    let _ = write!(detail, "metrics ok; ");

    // Bitmap: odd-length round-trip; nonzero padding bits rejected.
    let bits: Vec<bool> = (0..37).map(|i| i % 3 == 0).collect();
    let bp = dir.join("s.bm");
    save_bitmap(&bp, &bits)?;
    if load_bitmap(&bp)? != bits {
        return fail("bitmap round-trip mismatch".into());
    }
    let mut bb = std::fs::read(&bp).expect("read bitmap");
    let last = bb.len() - 1;
    bb[last] |= 0x80;
    std::fs::write(dir.join("pad.bm"), &bb).expect("write padded bitmap");
    if !matches!(load_bitmap(dir.join("pad.bm")), Err(Error::Corrupt { .. })) {
        return fail("nonzero padding did not produce the Corrupt error".into());
    }
    let _ = write!(detail, "bitmap ok; ");

    // Snapshot rerun: run a small fine-tune through the CLI twice —
    // once from flags, once from the recorded config.resolved — and
    // demand byte-identical artifacts.
    let out1 = dir.join("run1");
    let out2 = dir.join("run2");
    let first: Vec<String> = [
        "finetune",
        "--out",
        out1.to_str().expect("utf8 path"),
        "--data.n",
        "48",
        "--data.test_n",
        "24",
        "--scenario.pretrain",
        "P1",
        "--scenario.finetune",
        "F3",
        "--scenario.finetune_epochs",
        "3",
        "--scenario.batch_size",
        "16",
        "--scenario.probe_size",
        "4",
        "--scenario.milestones",
        "2",
        "--eval_attack.steps",
        "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut sink = Vec::new();
    advpretrain::cli::run(&first, &mut sink)?;
    let snap = out1.join("config.resolved");
    let rerun: Vec<String> = [
        "finetune",
        "--config",
        snap.to_str().expect("utf8 path"),
        "--out",
        out2.to_str().expect("utf8 path"),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    advpretrain::cli::run(&rerun, &mut sink)?;
    for f in ["metrics.jsonl", "model.ckpt", "finetune.json"] {
        let a = std::fs::read(out1.join(f)).expect("first run output");
        let b = std::fs::read(out2.join(f)).expect("rerun output");
        if a != b {
            return fail(format!("snapshot rerun differs in {f}"));
        }
    }
    let _ = write!(detail, "snapshot rerun byte-identical");
    pass(detail)
}

fn fresh_tempdir() -> Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("advpretrain-acceptance-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)
            .map_err(advpretrain::error::io_err(dir.display().to_string()))?;
    }
    std::fs::create_dir_all(&dir)
        .map_err(advpretrain::error::io_err(dir.display().to_string()))?;
    Ok(dir)
}
