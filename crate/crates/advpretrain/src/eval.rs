//! Evaluation suite: standard/robust accuracy, cross-model attack
//! transfer, success-set overlap, prediction-averaging ensembles, and a
//! reduced unforeseen-attack battery.
//!
//! Accuracy conventions (all percentages come from integer counts via
//! [`pct`], so identities hold at the count level):
//!
//! * `ta`  = 100·|clean-correct| / N
//! * `ra`  = 100·|clean-correct ∧ adv-correct| / N — the headline
//!   robust accuracy; `ra ≤ ta` always, and an ε=0 attack gives
//!   `ra = ta` bit-exactly.
//! * `ra_cc` = 100·|clean-correct ∧ adv-correct| / |clean-correct| —
//!   robustness conditioned on clean-correct examples; the transfer
//!   matrix diagonal satisfies `ASR = 100 − ra_cc` by construction.
//! * attack success = clean-correct ∧ adv-incorrect. The ASR
//!   denominator is `|clean-correct|` by default (misclassified-clean
//!   examples excluded), with an all-examples variant behind
//!   [`AsrDenominator::AllExamples`].

use rayon::prelude::*;

use crate::attack::{
    classifier_loss_grad, gaussian_augment, pgd_attack, AttackConfig, Norm,
};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Checkpoint, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::model::{bind_encoder, bind_linear, forward_classifier, ModelParams};
use crate::rng::{mix, Rng};

/// Canonical percentage: every reported rate uses this one expression,
/// so equal counts give bit-equal floats.
pub fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn require_labeled(ds: &Dataset) -> Result<&[u8]> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    ds.labels
        .as_deref()
        .ok_or_else(|| Error::invalid("evaluation dataset has no labels"))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Class predictions, one per example.
pub fn predictions(params: &ModelParams, ds: &Dataset) -> Result<Vec<usize>> {
    ds.images
        .iter()
        .map(|x| Ok(argmax(forward_classifier(params, x)?.data())))
        .collect()
}

/// Standard accuracy (TA): percentage of argmax-correct predictions.
pub fn standard_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let labels = require_labeled(ds)?;
    let preds = predictions(params, ds)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(pct(correct, ds.len()))
}

/// Robust-accuracy report with per-example bitmaps and the raw counts
/// behind every percentage.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub attack: AttackConfig,
    pub n: usize,
    pub clean_correct: Vec<bool>,
    pub adv_correct: Vec<bool>,
    /// clean-correct ∧ adv-incorrect.
    pub success: Vec<bool>,
    pub clean_count: usize,
    pub adv_count: usize,
    pub both_count: usize,
    pub success_count: usize,
    /// 100·clean/N.
    pub ta: f64,
    /// 100·both/N (headline robust accuracy).
    pub ra: f64,
    /// 100·both/clean.
    pub ra_cc: f64,
    /// 100·adv/N (plain accuracy on attacked inputs).
    pub ra_adv: f64,
}

impl EvalReport {
    fn from_bitmaps(
        model_id: String,
        attack: AttackConfig,
        clean_correct: Vec<bool>,
        adv_correct: Vec<bool>,
    ) -> EvalReport {
        let n = clean_correct.len();
        let success: Vec<bool> = clean_correct
            .iter()
            .zip(&adv_correct)
            .map(|(&c, &a)| c && !a)
            .collect();
        let clean_count = clean_correct.iter().filter(|b| **b).count();
        let adv_count = adv_correct.iter().filter(|b| **b).count();
        let both_count = clean_correct
            .iter()
            .zip(&adv_correct)
            .filter(|(&c, &a)| c && a)
            .count();
        let success_count = success.iter().filter(|b| **b).count();
        EvalReport {
            model_id,
            attack,
            n,
            ta: pct(clean_count, n),
            ra: pct(both_count, n),
            ra_cc: pct(both_count, clean_count),
            ra_adv: pct(adv_count, n),
            clean_correct,
            adv_correct,
            success,
            clean_count,
            adv_count,
            both_count,
            success_count,
        }
    }
}

/// Attack every example (per-example seed `mix(cfg.seed, index)`) and
/// measure robustness; also returns the adversarial images so callers
/// can reuse them (transfer evaluation).
fn attack_dataset(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    let labels = require_labeled(ds)?;
    ds.images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut lg = classifier_loss_grad(params, y as usize)?;
            let ex_cfg = AttackConfig {
                seed: mix(cfg.seed, i as u64),
                ..*cfg
            };
            pgd_attack(&mut lg, x, &ex_cfg)
        })
        .collect()
}

/// Robust accuracy under PGD with the given config.
pub fn robust_accuracy(
    model_id: &str,
    params: &ModelParams,
    ds: &Dataset,
    cfg: &AttackConfig,
) -> Result<EvalReport> {
    let labels = require_labeled(ds)?;
    let adv_images = attack_dataset(params, ds, cfg)?;
    let clean_preds = predictions(params, ds)?;
    let adv_preds: Result<Vec<usize>> = adv_images
        .par_iter()
        .map(|x| Ok(argmax(forward_classifier(params, x)?.data())))
        .collect();
    let adv_preds = adv_preds?;
    let clean_correct: Vec<bool> = clean_preds
        .iter()
        .zip(labels)
        .map(|(p, l)| *p == *l as usize)
        .collect();
    let adv_correct: Vec<bool> = adv_preds
        .iter()
        .zip(labels)
        .map(|(p, l)| *p == *l as usize)
        .collect();
    Ok(EvalReport::from_bitmaps(
        model_id.to_string(),
        *cfg,
        clean_correct,
        adv_correct,
    ))
}

// ── transfer matrix ──────────────────────────────────────────────────

/// What to divide attack-success counts by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsrDenominator {
    /// Target-clean-correct examples (default; makes the diagonal
    /// identity with `ra_cc` exact).
    CleanCorrect,
    /// The whole evaluation set.
    AllExamples,
}

/// Cross-model attack success rates. All per-cell vectors are indexed
/// `[source][target]`; a printed table conventionally transposes this
/// so sources become columns.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub model_ids: Vec<String>,
    pub attack: AttackConfig,
    pub denominator: AsrDenominator,
    pub n: usize,
    /// success[source][target][example]: target-clean-correct examples
    /// that the source-generated adversarial input flips.
    pub success: Vec<Vec<Vec<bool>>>,
    pub numerators: Vec<Vec<usize>>,
    pub denominators: Vec<Vec<usize>>,
    /// `asr[source][target] = pct(numerators, denominators)`.
    pub asr: Vec<Vec<f64>>,
    /// Per-source robust-accuracy reports from the same adversarial
    /// images (diagonal consistency comes from shared bitmaps).
    pub source_reports: Vec<EvalReport>,
}

/// Generate adversarial examples once per source model and measure
/// every model against them. Transfer cells reuse the source's exact
/// adversarial images — that is what transferability means here.
pub fn transfer_matrix(
    ids: &[String],
    models: &[&ModelParams],
    ds: &Dataset,
    cfg: &AttackConfig,
    denominator: AsrDenominator,
) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(Error::invalid("transfer matrix needs at least two models"));
    }
    if ids.len() != models.len() {
        return Err(Error::invalid("one id per model required"));
    }
    let labels = require_labeled(ds)?;
    let shape = models[0].arch.input_shape();
    let classes = models[0].classifier.as_ref().map(|c| c.classes);
    for m in models {
        if m.arch.input_shape() != shape {
            return Err(Error::invalid(
                "transfer matrix models must share an input shape",
            ));
        }
        if m.classifier.as_ref().map(|c| c.classes) != classes {
            return Err(Error::invalid(
                "transfer matrix models must share a class space",
            ));
        }
    }
    let n = ds.len();
    // Clean predictions per model.
    let clean_correct: Vec<Vec<bool>> = models
        .iter()
        .map(|m| {
            predictions(m, ds).map(|preds| {
                preds
                    .iter()
                    .zip(labels)
                    .map(|(p, l)| *p == *l as usize)
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let mut success = vec![vec![Vec::new(); models.len()]; models.len()];
    let mut numerators = vec![vec![0usize; models.len()]; models.len()];
    let mut denominators = vec![vec![0usize; models.len()]; models.len()];
    let mut asr = vec![vec![0.0f64; models.len()]; models.len()];
    let mut source_reports = Vec::with_capacity(models.len());
    for (s, source) in models.iter().enumerate() {
        let adv_images = attack_dataset(source, ds, cfg)?;
        for (t, target) in models.iter().enumerate() {
            let adv_preds: Result<Vec<usize>> = adv_images
                .par_iter()
                .map(|x| Ok(argmax(forward_classifier(target, x)?.data())))
                .collect();
            let adv_correct: Vec<bool> = adv_preds?
                .iter()
                .zip(labels)
                .map(|(p, l)| *p == *l as usize)
                .collect();
            let cell: Vec<bool> = clean_correct[t]
                .iter()
                .zip(&adv_correct)
                .map(|(&c, &a)| c && !a)
                .collect();
            let num = cell.iter().filter(|b| **b).count();
            let den = match denominator {
                AsrDenominator::CleanCorrect => {
                    clean_correct[t].iter().filter(|b| **b).count()
                }
                AsrDenominator::AllExamples => n,
            };
            numerators[s][t] = num;
            denominators[s][t] = den;
            asr[s][t] = pct(num, den);
            if s == t {
                let report = EvalReport::from_bitmaps(
                    ids[s].clone(),
                    *cfg,
                    clean_correct[t].clone(),
                    adv_correct.clone(),
                );
                // The self-attack cell and RA|clean count complementary
                // subsets of the same clean-correct set. Define the
                // diagonal by that complement so `ASR = 100 − ra_cc` is
                // exact in f64, not just at the count level (independent
                // divisions can differ in the last ulp).
                if denominator == AsrDenominator::CleanCorrect {
                    asr[s][t] = 100.0 - report.ra_cc;
                }
                source_reports.push(report);
            }
            success[s][t] = cell;
        }
    }
    Ok(TransferMatrix {
        model_ids: ids.to_vec(),
        attack: *cfg,
        denominator,
        n,
        success,
        numerators,
        denominators,
        asr,
        source_reports,
    })
}

// ── overlap statistics ───────────────────────────────────────────────

/// Venn decomposition of two success sets; percentages are of the
/// bitmap length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapStats {
    pub n: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub both: usize,
    pub pct_only_a: f64,
    pub pct_only_b: f64,
    pub pct_both: f64,
}

pub fn overlap_stats(a: &[bool], b: &[bool]) -> Result<OverlapStats> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "overlap bitmaps differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut only_a = 0;
    let mut only_b = 0;
    let mut both = 0;
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => both += 1,
            (true, false) => only_a += 1,
            (false, true) => only_b += 1,
            (false, false) => {}
        }
    }
    Ok(OverlapStats {
        n: a.len(),
        only_a,
        only_b,
        both,
        pct_only_a: pct(only_a, a.len()),
        pct_only_b: pct(only_b, a.len()),
        pct_both: pct(both, a.len()),
    })
}

// ── ensembles ────────────────────────────────────────────────────────

fn check_ensemble(models: &[&ModelParams]) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    let mut classes = None;
    for m in models {
        let c = m
            .classifier
            .as_ref()
            .ok_or(Error::MissingHead {
                task: "classifier".to_string(),
            })?
            .classes;
        match classes {
            None => classes = Some(c),
            Some(prev) if prev != c => {
                return Err(Error::invalid(format!(
                    "ensemble class counts differ: {prev} vs {c}"
                )))
            }
            _ => {}
        }
    }
    Ok(classes.expect("nonempty ensemble"))
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

/// Averaged class probabilities (mean of per-model softmaxes, which is
/// itself on the simplex).
pub fn ensemble_predict(models: &[&ModelParams], x: &Tensor) -> Result<Vec<f64>> {
    let classes = check_ensemble(models)?;
    let mut mean = vec![0.0; classes];
    for m in models {
        let probs = softmax_vec(forward_classifier(m, x)?.data());
        for (acc, p) in mean.iter_mut().zip(&probs) {
            *acc += p / models.len() as f64;
        }
    }
    Ok(mean)
}

/// Loss/gradient closure for the ensemble objective: cross-entropy of
/// the averaged prediction, `−log p̄_y(x)`.
pub fn ensemble_loss_grad<'a>(
    models: &'a [&'a ModelParams],
    label: usize,
) -> Result<impl FnMut(&Tensor) -> Result<(f64, Tensor)> + 'a> {
    let classes = check_ensemble(models)?;
    if label >= classes {
        return Err(Error::InvalidLabel {
            label,
            cardinality: classes,
        });
    }
    Ok(move |x: &Tensor| {
        crate::autodiff::input_gradient(
            |tape: &mut Tape, xv| {
                let frozen = std::collections::BTreeSet::new();
                let mut mean_probs = None;
                for m in models {
                    let enc = bind_encoder(tape, &m.encoder, Some(&frozen));
                    let clf = m.classifier.as_ref().expect("checked ensemble");
                    let lin = bind_linear(tape, &clf.linear, "classifier", Some(&frozen));
                    let emb = crate::model::encode_on(tape, &enc, xv)?;
                    let logits = crate::model::linear_on(tape, &lin, emb)?;
                    let probs = tape.softmax(logits)?;
                    mean_probs = Some(match mean_probs {
                        None => probs,
                        Some(acc) => tape.add(acc, probs)?,
                    });
                }
                let sum = mean_probs.expect("nonempty ensemble");
                let mean = tape.scale(sum, 1.0 / models.len() as f64);
                let p_y = tape.select(mean, label)?;
                let log_p = tape.log(p_y)?;
                Ok(tape.scale(log_p, -1.0))
            },
            x,
        )
    })
}

/// Robust accuracy of the prediction-averaging ensemble: PGD ascends
/// the averaged-probability cross-entropy, and correctness is judged on
/// the ensemble decision. A singleton ensemble delegates to
/// [`robust_accuracy`] so results coincide exactly.
pub fn ensemble_robust_accuracy(
    ensemble_id: &str,
    models: &[&ModelParams],
    ds: &Dataset,
    cfg: &AttackConfig,
) -> Result<EvalReport> {
    check_ensemble(models)?;
    if models.len() == 1 {
        return robust_accuracy(ensemble_id, models[0], ds, cfg);
    }
    let labels = require_labeled(ds)?;
    let adv_images: Result<Vec<Tensor>> = ds
        .images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut lg = ensemble_loss_grad(models, y as usize)?;
            let ex_cfg = AttackConfig {
                seed: mix(cfg.seed, i as u64),
                ..*cfg
            };
            pgd_attack(&mut lg, x, &ex_cfg)
        })
        .collect();
    let adv_images = adv_images?;
    let decide = |x: &Tensor| -> Result<usize> { Ok(argmax(&ensemble_predict(models, x)?)) };
    let mut clean_correct = Vec::with_capacity(ds.len());
    let mut adv_correct = Vec::with_capacity(ds.len());
    for ((x, adv), &y) in ds.images.iter().zip(&adv_images).zip(labels) {
        clean_correct.push(decide(x)? == y as usize);
        adv_correct.push(decide(adv)? == y as usize);
    }
    Ok(EvalReport::from_bitmaps(
        ensemble_id.to_string(),
        *cfg,
        clean_correct,
        adv_correct,
    ))
}

// ── unforeseen battery ───────────────────────────────────────────────

/// One row of the reduced unforeseen-attack table.
#[derive(Clone, Debug, PartialEq)]
pub struct UnforeseenRow {
    pub name: String,
    /// Headline robust accuracy under that corruption (plain TA for the
    /// clean row).
    pub accuracy: f64,
}

/// Reduced battery: clean baseline, ℓ∞ PGD at twice the training ε,
/// ℓ2 PGD at radius 1.0, Gaussian corruption σ=0.1.
pub fn unforeseen_suite(
    model_id: &str,
    params: &ModelParams,
    ds: &Dataset,
    base: &AttackConfig,
    seed: u64,
) -> Result<Vec<UnforeseenRow>> {
    let labels = require_labeled(ds)?;
    let mut rows = Vec::new();
    rows.push(UnforeseenRow {
        name: "clean".into(),
        accuracy: standard_accuracy(params, ds)?,
    });
    let double = AttackConfig {
        epsilon: 2.0 * base.epsilon,
        ..*base
    };
    rows.push(UnforeseenRow {
        name: format!("linf@{:.4}", double.epsilon),
        accuracy: robust_accuracy(model_id, params, ds, &double)?.ra,
    });
    let l2 = AttackConfig {
        norm: Norm::L2,
        epsilon: 1.0,
        alpha: 0.25,
        ..*base
    };
    rows.push(UnforeseenRow {
        name: "l2@1.0".into(),
        accuracy: robust_accuracy(model_id, params, ds, &l2)?.ra,
    });
    // Gaussian corruption: fixed per-example noise streams.
    let sigma = 0.1;
    let preds_clean = predictions(params, ds)?;
    let mut correct = 0usize;
    for (i, (x, &y)) in ds.images.iter().zip(labels).enumerate() {
        let mut rng = Rng::derive(seed, &[0x6755, i as u64]);
        let noisy = gaussian_augment(x, sigma, &mut rng)?;
        let clean_ok = preds_clean[i] == y as usize;
        let noisy_ok = argmax(forward_classifier(params, &noisy)?.data()) == y as usize;
        if clean_ok && noisy_ok {
            correct += 1;
        }
    }
    rows.push(UnforeseenRow {
        name: format!("gaussian@{sigma}"),
        accuracy: pct(correct, ds.len()),
    });
    Ok(rows)
}

/// Content digest of a model's parameters (provenance-independent):
/// used to verify evaluation never mutates what it measures.
pub fn model_digest(params: &ModelParams) -> String {
    let ckpt = Checkpoint::from_model(
        params,
        Provenance {
            scenario: String::new(),
            epoch: 0,
            seed: 0,
        },
    );
    let mut hasher = sha2::Sha256::new();
    use sha2::Digest as _;
    for (name, shape, values) in &ckpt.tensors {
        hasher.update(name.as_bytes());
        for &d in shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
