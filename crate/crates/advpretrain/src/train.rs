//! Training pipeline: learning-rate schedules, SGD with momentum,
//! pretext pretraining (standard / adversarial / Gaussian-smoothing,
//! single-task or multi-task ensemble), supervised fine-tuning in four
//! regimes, the pretraining × fine-tuning scenario matrix, and a λ grid
//! search for the ensemble diversity weight.
//!
//! Scenario vocabulary: pretraining kinds are P1 (none), P2 (standard),
//! P3 (adversarial) and P3s (Gaussian smoothing); fine-tuning kinds are
//! F1 (partial/standard), F2 (partial/adversarial), F3 (full/standard)
//! and F4 (full/adversarial). Partial fine-tuning freezes the encoder
//! and requires a pretrained checkpoint; pretext heads are never
//! updated during fine-tuning.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{
    classifier_loss_grad, gaussian_augment, joint_ensemble_attack, pgd_attack, AttackConfig,
};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Checkpoint, Dataset, MetricRecord, MetricsWriter, Provenance};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{
    bind_encoder, bind_linear, encoder_grads, init_model, linear_grads, pretrain_trainable_set,
    trainable_set, Arch, FinetuneMode, ModelParams, TaskId,
};
use crate::rng::{mix, Rng};
use crate::ssl::{task_loss_on, task_predict, TaskSample, TaskSpec};

// Stream tags for deriving independent RNG/seed lanes from one run seed.
const TAG_MODEL: u64 = 0x4d31;
const TAG_SPLIT: u64 = 0x5350;
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_SAMPLE: u64 = 0x5341;
const TAG_VAL_SAMPLE: u64 = 0x5641;
const TAG_SMOOTH: u64 = 0x534d;
const TAG_PERM: u64 = 0x504d;

// ── learning-rate schedules ──────────────────────────────────────────

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs total > 0"));
    }
    if t > total {
        return Err(Error::invalid(format!(
            "cosine schedule queried past its horizon: {t} > {total}"
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Piecewise-constant schedule: start at `base` and divide by `factor`
/// at each milestone epoch (0-indexed; the new rate applies from the
/// milestone epoch itself). Milestones must be strictly increasing.
pub fn multistep_lr(epoch: usize, milestones: &[usize], base: f64, factor: f64) -> Result<f64> {
    if factor <= 0.0 {
        return Err(Error::invalid("multistep factor must be positive"));
    }
    for w in milestones.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::invalid(format!(
                "milestones must be strictly increasing, got {milestones:?}"
            )));
        }
    }
    let drops = milestones.iter().filter(|&&m| epoch >= m).count();
    Ok(base / factor.powi(drops as i32))
}

// ── optimizer ────────────────────────────────────────────────────────

type GradMap = BTreeMap<String, Vec<f64>>;

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
/// Velocity is tracked per parameter name and persists across steps.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: GradMap,
}

impl Sgd {
    pub fn new(momentum: f64) -> Sgd {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update from (already batch-averaged) gradients. Only
    /// names present in `grads` are touched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradMap, lr: f64) -> Result<()> {
        let mut named = params.named_tensors_mut();
        for (name, g) in grads {
            let (_, tensor) = named
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown tensor {name}")))?;
            if tensor.numel() != g.len() {
                return Err(Error::invalid(format!(
                    "gradient length mismatch for {name}: {} vs {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}

fn add_grads(acc: &mut GradMap, pairs: Vec<(String, Option<Vec<f64>>)>) {
    for (name, g) in pairs {
        let Some(g) = g else { continue };
        match acc.get_mut(&name) {
            Some(slot) => {
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn scale_grads(acc: &mut GradMap, c: f64) {
    for g in acc.values_mut() {
        for v in g.iter_mut() {
            *v *= c;
        }
    }
}

/// Summed loss and summed gradients over pretext samples (one tape per
/// sample; each sample touches the encoder and its own task head).
fn pretext_batch_grads(
    params: &ModelParams,
    hot: &BTreeSet<String>,
    items: &[TaskSample],
) -> Result<(f64, GradMap)> {
    let mut total = 0.0;
    let mut grads = GradMap::new();
    for sample in items {
        let head = params.head(sample.task)?;
        let prefix = format!("head.{}", sample.task.name());
        let mut tape = Tape::new();
        let xv = tape.constant(&sample.input);
        let enc = bind_encoder(&mut tape, &params.encoder, Some(hot));
        let lin = bind_linear(&mut tape, &head.linear, &prefix, Some(hot));
        let loss = task_loss_on(&mut tape, &enc, &lin, sample, xv)?;
        total += tape.scalar(loss)?;
        tape.backward(loss)?;
        add_grads(&mut grads, encoder_grads(&tape, &enc));
        add_grads(&mut grads, linear_grads(&tape, &lin, &prefix));
    }
    Ok((total, grads))
}

/// Summed loss and summed gradients over labeled classifier examples.
fn classifier_batch_grads(
    params: &ModelParams,
    hot: &BTreeSet<String>,
    items: &[(Tensor, usize)],
) -> Result<(f64, GradMap)> {
    let clf = params.classifier.as_ref().ok_or(Error::MissingHead {
        task: "classifier".to_string(),
    })?;
    let mut total = 0.0;
    let mut grads = GradMap::new();
    for (x, label) in items {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let enc = bind_encoder(&mut tape, &params.encoder, Some(hot));
        let lin = bind_linear(&mut tape, &clf.linear, "classifier", Some(hot));
        let loss = crate::model::classifier_loss_on(&mut tape, &enc, &lin, xv, *label)?;
        total += tape.scalar(loss)?;
        tape.backward(loss)?;
        add_grads(&mut grads, encoder_grads(&tape, &enc));
        add_grads(&mut grads, linear_grads(&tape, &lin, "classifier"));
    }
    Ok((total, grads))
}

// ── scenario vocabulary ──────────────────────────────────────────────

/// Pretraining regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PretrainKind {
    /// P1: no pretraining at all.
    None,
    /// P2: standard pretext training on clean inputs.
    Standard,
    /// P3: adversarial pretext training (PGD on the pretext loss).
    Adversarial,
    /// P3s: pretext training on Gaussian-corrupted inputs.
    Smoothing,
}

impl PretrainKind {
    pub fn code(self) -> &'static str {
        match self {
            PretrainKind::None => "P1",
            PretrainKind::Standard => "P2",
            PretrainKind::Adversarial => "P3",
            PretrainKind::Smoothing => "P3s",
        }
    }

    pub fn parse(s: &str) -> Result<PretrainKind> {
        match s.to_ascii_lowercase().as_str() {
            "p1" | "none" => Ok(PretrainKind::None),
            "p2" | "standard" => Ok(PretrainKind::Standard),
            "p3" | "adversarial" => Ok(PretrainKind::Adversarial),
            "p3s" | "smoothing" => Ok(PretrainKind::Smoothing),
            _ => Err(Error::invalid(format!("unknown pretraining kind `{s}`"))),
        }
    }
}

/// Fine-tuning regime: partial freezes the encoder, full trains it;
/// adversarial kinds attack each batch with the training attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FinetuneKind {
    PartialStandard,
    PartialAdversarial,
    FullStandard,
    FullAdversarial,
}

impl FinetuneKind {
    pub fn code(self) -> &'static str {
        match self {
            FinetuneKind::PartialStandard => "F1",
            FinetuneKind::PartialAdversarial => "F2",
            FinetuneKind::FullStandard => "F3",
            FinetuneKind::FullAdversarial => "F4",
        }
    }

    pub fn parse(s: &str) -> Result<FinetuneKind> {
        match s.to_ascii_lowercase().as_str() {
            "f1" | "partial" => Ok(FinetuneKind::PartialStandard),
            "f2" | "partial-adv" => Ok(FinetuneKind::PartialAdversarial),
            "f3" | "full" => Ok(FinetuneKind::FullStandard),
            "f4" | "full-adv" => Ok(FinetuneKind::FullAdversarial),
            _ => Err(Error::invalid(format!("unknown fine-tuning kind `{s}`"))),
        }
    }

    pub fn mode(self) -> FinetuneMode {
        match self {
            FinetuneKind::PartialStandard | FinetuneKind::PartialAdversarial => {
                FinetuneMode::Partial
            }
            FinetuneKind::FullStandard | FinetuneKind::FullAdversarial => FinetuneMode::Full,
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(
            self,
            FinetuneKind::PartialAdversarial | FinetuneKind::FullAdversarial
        )
    }

    /// Partial kinds have no meaning without a pretrained encoder.
    pub fn requires_checkpoint(self) -> bool {
        self.mode() == FinetuneMode::Partial
    }
}

/// Full recipe for one (pretraining, fine-tuning) scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub arch_id: String,
    pub classes: usize,
    pub seed: u64,
    pub pretrain: PretrainKind,
    pub finetune: FinetuneKind,
    pub tasks: Vec<TaskId>,
    /// Ensemble gradient-diversity weight (needs ≥ 2 tasks when > 0).
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub pretrain_lr_max: f64,
    pub pretrain_lr_min: f64,
    pub finetune_lr: f64,
    /// Leading epochs of *adversarial* fine-tuning (F2/F4) run at
    /// `finetune_lr / lr_factor` before the multistep schedule takes
    /// over. Standard fine-tuning ignores it: the pathology warmup
    /// guards against — PGD steered by a freshly initialized head
    /// wrecking the network until it parks on the uniform-predictor
    /// saddle — only arises when the training batches are adversarial.
    pub warmup_epochs: usize,
    /// Multistep drop epochs for fine-tuning (0-indexed).
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Train share of the train/validation split.
    pub train_fraction: f64,
    /// Size of the fixed validation probe used for per-epoch RA.
    pub probe_size: usize,
    pub smoothing_sigma: f64,
    /// Training-time attack (used by P3 and F2/F4).
    pub attack: AttackConfig,
    /// Evaluation attack (RA probes and reported robustness).
    pub eval_attack: AttackConfig,
}

impl ScenarioConfig {
    /// Desk-scale defaults: 15 pretext epochs under cosine annealing,
    /// 30 fine-tuning epochs with drops at 9 and 15, batch 128, 9:1
    /// split, 200-example RA probe.
    ///
    /// The fine-tuning base rate is 0.05, and adversarial fine-tuning
    /// gets one warmup epoch at a tenth of that. Full-rate adversarial
    /// SGD steered by a freshly initialized head can overshoot on the
    /// first epoch and park the whole network on the uniform-predictor
    /// saddle (training loss pinned at ln C, never recovering); one
    /// reduced-rate epoch lets the head align first. Standard
    /// fine-tuning never exhibits the collapse and runs the plain
    /// schedule from epoch one.
    pub fn desk(
        pretrain: PretrainKind,
        finetune: FinetuneKind,
        tasks: Vec<TaskId>,
        seed: u64,
    ) -> ScenarioConfig {
        ScenarioConfig {
            arch_id: "desk16".to_string(),
            classes: 4,
            seed,
            pretrain,
            finetune,
            tasks,
            lambda: 0.0,
            pretrain_epochs: 15,
            finetune_epochs: 30,
            batch_size: 128,
            momentum: 0.9,
            pretrain_lr_max: 0.05,
            pretrain_lr_min: 0.001,
            finetune_lr: 0.05,
            warmup_epochs: 1,
            milestones: vec![9, 15],
            lr_factor: 10.0,
            train_fraction: 0.9,
            probe_size: 200,
            smoothing_sigma: 0.1,
            attack: AttackConfig::train_linf(mix(seed, 0xa77)),
            eval_attack: AttackConfig::eval_linf(mix(seed, 0xe7a)),
        }
    }

    /// Human/machine-readable scenario label, e.g. `P3[rotation]/F4`.
    pub fn scenario_id(&self) -> String {
        let pre = match self.pretrain {
            PretrainKind::None => "P1".to_string(),
            kind => {
                let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
                if self.tasks.len() > 1 {
                    format!("{}[{},l={}]", kind.code(), tasks.join("+"), self.lambda)
                } else {
                    format!("{}[{}]", kind.code(), tasks.join("+"))
                }
            }
        };
        format!("{pre}/{}", self.finetune.code())
    }

    /// Check every declared constraint, reporting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if Arch::by_id(&self.arch_id).is_err() {
            violations.push(format!("unknown architecture `{}`", self.arch_id));
        }
        if self.classes < 2 {
            violations.push("classifier needs at least 2 classes".to_string());
        }
        match self.pretrain {
            PretrainKind::None => {
                if !self.tasks.is_empty() {
                    violations.push("P1 (no pretraining) does not admit pretext tasks".to_string());
                }
                if self.finetune.requires_checkpoint() {
                    violations.push(format!(
                        "{} requires a pretrained encoder, but pretraining is P1",
                        self.finetune.code()
                    ));
                }
            }
            _ => {
                if self.tasks.is_empty() {
                    violations.push(format!(
                        "{} pretraining needs at least one pretext task",
                        self.pretrain.code()
                    ));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(*t) {
                violations.push(format!("duplicate pretext task `{}`", t.name()));
            }
        }
        if self.lambda < 0.0 {
            violations.push("lambda must be non-negative".to_string());
        }
        if self.lambda > 0.0 && self.tasks.len() < 2 {
            violations.push("diversity weight lambda > 0 needs at least 2 tasks".to_string());
        }
        if self.batch_size == 0 {
            violations.push("batch size must be positive".to_string());
        }
        if self.probe_size == 0 {
            violations.push("probe size must be positive".to_string());
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            violations.push(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        for (name, v) in [
            ("pretrain_lr_max", self.pretrain_lr_max),
            ("pretrain_lr_min", self.pretrain_lr_min),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                violations.push(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        if !(self.lr_factor > 0.0) {
            violations.push("lr_factor must be positive".to_string());
        }
        for w in self.milestones.windows(2) {
            if w[0] >= w[1] {
                violations.push(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                ));
                break;
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            violations.push(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            ));
        }
        if !(self.smoothing_sigma >= 0.0) {
            violations.push("smoothing sigma must be non-negative".to_string());
        }
        if let Err(e) = self.attack.validate() {
            violations.push(format!("training attack: {e}"));
        }
        if let Err(e) = self.eval_attack.validate() {
            violations.push(format!("evaluation attack: {e}"));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { violations })
        }
    }
}

// ── records ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct PretrainEpoch {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    /// Pretext validation accuracy (mean over tasks for ensembles).
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainRecord {
    pub scenario: String,
    pub epochs: Vec<PretrainEpoch>,
    /// 1-based epoch whose parameters were kept (0 when no epochs ran).
    pub best_epoch: u32,
    pub best_val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ta: f64,
    /// Robust accuracy of the fixed validation probe under the
    /// evaluation attack.
    pub probe_ra: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneRecord {
    pub scenario: String,
    pub epochs: Vec<FinetuneEpoch>,
    /// 1-based epoch of the kept parameters (earliest maximum of
    /// validation TA; 0 when no epochs ran).
    pub best_epoch: u32,
    pub best_val_ta: f64,
    /// Earliest 1-based epoch attaining the maximum probe RA.
    pub epochs_to_best_ra: u32,
    pub best_probe_ra: f64,
}

fn emit(
    metrics: &mut Option<&mut MetricsWriter>,
    scenario: &str,
    epoch: u32,
    metric: &str,
    value: f64,
) -> Result<()> {
    if let Some(w) = metrics.as_deref_mut() {
        w.emit(&MetricRecord {
            scenario: scenario.to_string(),
            epoch,
            metric: metric.to_string(),
            value,
        })?;
    }
    Ok(())
}

// ── pretraining ──────────────────────────────────────────────────────

fn model_for_pretraining(cfg: &ScenarioConfig, specs: &[TaskSpec]) -> Result<ModelParams> {
    let arch = Arch::by_id(&cfg.arch_id)?;
    let heads: Vec<(TaskId, usize)> = specs.iter().map(|s| (s.id(), s.head_width())).collect();
    init_model(&arch, &heads, None, mix(cfg.seed, TAG_MODEL))
}

/// Fixed validation pretext samples: the same transforms every epoch,
/// so per-epoch accuracies are comparable.
fn val_pretext_samples(
    cfg: &ScenarioConfig,
    specs: &[TaskSpec],
    val: &Dataset,
) -> Result<Vec<Vec<TaskSample>>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            val.images
                .iter()
                .enumerate()
                .map(|(idx, x)| {
                    let mut rng =
                        Rng::derive(cfg.seed, &[TAG_VAL_SAMPLE, i as u64, idx as u64]);
                    spec.make_sample(x, &mut rng)
                })
                .collect()
        })
        .collect()
}

fn pretext_val_accuracy(params: &ModelParams, samples: &[Vec<TaskSample>]) -> Result<f64> {
    let mut per_task = Vec::with_capacity(samples.len());
    for task_samples in samples {
        let correct: Result<Vec<bool>> = task_samples
            .par_iter()
            .map(|s| Ok(task_predict(params, s)? == s.label))
            .collect();
        let correct = correct?;
        per_task.push(eval::pct(
            correct.iter().filter(|b| **b).count(),
            task_samples.len(),
        ));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Draw this batch item's pretext samples, one per task, on derived
/// per-(task, epoch, example) streams.
fn draw_samples(
    cfg: &ScenarioConfig,
    specs: &[TaskSpec],
    x: &Tensor,
    epoch: usize,
    idx: usize,
) -> Result<Vec<TaskSample>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = Rng::derive(
                cfg.seed,
                &[TAG_SAMPLE, i as u64, epoch as u64, idx as u64],
            );
            spec.make_sample(x, &mut rng)
        })
        .collect()
}

fn add_delta(x: &Tensor, d: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-example training attack seed: one lane per (epoch, example).
fn example_attack_seed(base: u64, epoch: usize, idx: usize) -> u64 {
    mix(mix(base, epoch as u64), idx as u64)
}

fn pretrain_core(
    cfg: &ScenarioConfig,
    specs: &[TaskSpec],
    ds: &Dataset,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<(ModelParams, PretrainRecord)> {
    cfg.validate()?;
    if cfg.pretrain == PretrainKind::None {
        return Err(Error::invalid("P1 scenarios have no pretraining phase"));
    }
    let spec_ids: Vec<TaskId> = specs.iter().map(|s| s.id()).collect();
    if spec_ids != cfg.tasks {
        return Err(Error::invalid(format!(
            "task specs {spec_ids:?} do not match configured tasks {:?}",
            cfg.tasks
        )));
    }
    if ds.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    let scenario = format!("{}-pretrain", cfg.scenario_id());
    let mut params = model_for_pretraining(cfg, specs)?;
    let (train, val) = crate::data::split_train_val(ds, cfg.train_fraction, mix(cfg.seed, TAG_SPLIT))?;
    let val_samples = val_pretext_samples(cfg, specs, &val)?;
    let hot = pretrain_trainable_set(&params, &cfg.tasks);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut best: Option<(f64, u32, ModelParams)> = None;
    let mut epochs = Vec::with_capacity(cfg.pretrain_epochs);

    for epoch in 0..cfg.pretrain_epochs {
        let lr = cosine_lr(
            epoch,
            cfg.pretrain_epochs,
            cfg.pretrain_lr_max,
            cfg.pretrain_lr_min,
        )?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Build (and, per the pretraining kind, perturb) this
            // batch's pretext samples. Attacks run against the current
            // parameters, in parallel across examples.
            let items: Result<Vec<Vec<TaskSample>>> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut samples = draw_samples(cfg, specs, &train.images[idx], epoch, idx)?;
                    match cfg.pretrain {
                        PretrainKind::Standard => {}
                        PretrainKind::Adversarial => {
                            let ex_cfg = AttackConfig {
                                seed: example_attack_seed(cfg.attack.seed, epoch, idx),
                                ..cfg.attack
                            };
                            let deltas =
                                joint_ensemble_attack(&params, &samples, &ex_cfg, cfg.lambda)?;
                            for (s, d) in samples.iter_mut().zip(&deltas) {
                                s.input = add_delta(&s.input, d)?;
                            }
                        }
                        PretrainKind::Smoothing => {
                            for (i, s) in samples.iter_mut().enumerate() {
                                let mut rng = Rng::derive(
                                    cfg.seed,
                                    &[TAG_SMOOTH, i as u64, epoch as u64, idx as u64],
                                );
                                s.input =
                                    gaussian_augment(&s.input, cfg.smoothing_sigma, &mut rng)?;
                            }
                        }
                        PretrainKind::None => unreachable!("rejected above"),
                    }
                    Ok(samples)
                })
                .collect();
            let flat: Vec<TaskSample> = items?.into_iter().flatten().collect();
            let (total, mut grads) = pretext_batch_grads(&params, &hot, &flat)?;
            let batch_loss = total / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::invalid(format!(
                    "{scenario}: non-finite training loss at epoch {} step {}",
                    epoch + 1,
                    step + 1
                )));
            }
            loss_sum += total;
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd.step(&mut params, &grads, lr)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_accuracy = pretext_val_accuracy(&params, &val_samples)?;
        let e = (epoch + 1) as u32;
        emit(&mut metrics, &scenario, e, "lr", lr)?;
        emit(&mut metrics, &scenario, e, "pretext_train_loss", train_loss)?;
        emit(&mut metrics, &scenario, e, "pretext_val_acc", val_accuracy)?;
        epochs.push(PretrainEpoch {
            epoch: e,
            lr,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().map(|(b, _, _)| val_accuracy > *b).unwrap_or(true) {
            best = Some((val_accuracy, e, params.clone()));
        }
    }

    let (best_val_accuracy, best_epoch, best_params) = match best {
        Some((acc, e, p)) => (acc, e, p),
        // Zero epochs: the "trained" model is the initialization.
        None => (0.0, 0, params),
    };
    Ok((
        best_params,
        PretrainRecord {
            scenario,
            epochs,
            best_epoch,
            best_val_accuracy,
        },
    ))
}

/// Single-task pretraining (P2, P3, or P3s). Returns the parameters of
/// the epoch with the best validation pretext accuracy.
pub fn pretrain(
    cfg: &ScenarioConfig,
    spec: &TaskSpec,
    ds: &Dataset,
    metrics: Option<&mut MetricsWriter>,
) -> Result<(ModelParams, PretrainRecord)> {
    if cfg.tasks.len() != 1 {
        return Err(Error::invalid(
            "single-task pretraining takes exactly one task; use ensemble_pretrain for more",
        ));
    }
    pretrain_core(cfg, std::slice::from_ref(spec), ds, metrics)
}

/// Multi-task ensemble pretraining: every batch image is attacked
/// jointly across all pretext tasks (with diversity weight
/// `cfg.lambda`), and the encoder plus all task heads update on the
/// summed per-task adversarial losses. With `lambda = 0` the joint
/// attack decouples into independent per-task attacks.
pub fn ensemble_pretrain(
    cfg: &ScenarioConfig,
    specs: &[TaskSpec],
    ds: &Dataset,
    metrics: Option<&mut MetricsWriter>,
) -> Result<(ModelParams, PretrainRecord)> {
    if specs.len() < 2 {
        return Err(Error::invalid("ensemble pretraining needs at least 2 tasks"));
    }
    if cfg.pretrain != PretrainKind::Adversarial {
        return Err(Error::invalid(
            "ensemble pretraining is defined for the adversarial regime",
        ));
    }
    pretrain_core(cfg, specs, ds, metrics)
}

// ── fine-tuning ──────────────────────────────────────────────────────

/// Supervised fine-tuning. `checkpoint` carries the pretrained encoder
/// (mandatory for partial kinds F1/F2); the classifier head always
/// starts fresh. Keeps the earliest epoch with maximal validation TA
/// and monitors probe RA every epoch.
pub fn finetune(
    cfg: &ScenarioConfig,
    checkpoint: Option<&Checkpoint>,
    ds: &Dataset,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<(ModelParams, FinetuneRecord)> {
    cfg.validate()?;
    if cfg.finetune.requires_checkpoint() && checkpoint.is_none() {
        return Err(Error::invalid(format!(
            "{} fine-tuning requires a pretrained encoder checkpoint",
            cfg.finetune.code()
        )));
    }
    if ds.is_empty() {
        return Err(Error::invalid("fine-tuning dataset is empty"));
    }
    if ds.labels.is_none() {
        return Err(Error::invalid("fine-tuning dataset has no labels"));
    }
    let scenario = cfg.scenario_id();
    let arch = Arch::by_id(&cfg.arch_id)?;
    let mut params = init_model(&arch, &[], Some(cfg.classes), mix(cfg.seed, TAG_MODEL))?;
    if let Some(ck) = checkpoint {
        ck.load_into(&mut params)?;
    }
    let (train, val) = crate::data::split_train_val(ds, cfg.train_fraction, mix(cfg.seed, TAG_SPLIT))?;
    let train_labels = train.labels.clone().expect("checked labels");
    // Fixed validation probe for per-epoch robust accuracy.
    let probe_idx: Vec<usize> = (0..val.len().min(cfg.probe_size)).collect();
    let probe = val.take(&probe_idx);
    let hot = trainable_set(&params, cfg.finetune.mode());
    let mut sgd = Sgd::new(cfg.momentum);
    let mut best: Option<(f64, u32, ModelParams)> = None;
    let mut best_ra: Option<(f64, u32)> = None;
    let mut epochs = Vec::with_capacity(cfg.finetune_epochs);

    for epoch in 0..cfg.finetune_epochs {
        let lr = if cfg.finetune.adversarial() && epoch < cfg.warmup_epochs {
            cfg.finetune_lr / cfg.lr_factor
        } else {
            multistep_lr(epoch, &cfg.milestones, cfg.finetune_lr, cfg.lr_factor)?
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Result<Vec<(Tensor, usize)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let x = &train.images[idx];
                    let label = train_labels[idx] as usize;
                    let used = if cfg.finetune.adversarial() {
                        let mut lg = classifier_loss_grad(&params, label)?;
                        let ex_cfg = AttackConfig {
                            seed: example_attack_seed(cfg.attack.seed, epoch, idx),
                            ..cfg.attack
                        };
                        pgd_attack(&mut lg, x, &ex_cfg)?
                    } else {
                        x.clone()
                    };
                    Ok((used, label))
                })
                .collect();
            let items = items?;
            let (total, mut grads) = classifier_batch_grads(&params, &hot, &items)?;
            let batch_loss = total / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::invalid(format!(
                    "{scenario}: non-finite training loss at epoch {} step {}",
                    epoch + 1,
                    step + 1
                )));
            }
            loss_sum += total;
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd.step(&mut params, &grads, lr)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_ta = eval::standard_accuracy(&params, &val)?;
        let probe_ra = eval::robust_accuracy(&scenario, &params, &probe, &cfg.eval_attack)?.ra;
        let e = (epoch + 1) as u32;
        emit(&mut metrics, &scenario, e, "lr", lr)?;
        emit(&mut metrics, &scenario, e, "train_loss", train_loss)?;
        emit(&mut metrics, &scenario, e, "val_ta", val_ta)?;
        emit(&mut metrics, &scenario, e, "probe_ra", probe_ra)?;
        epochs.push(FinetuneEpoch {
            epoch: e,
            lr,
            train_loss,
            val_ta,
            probe_ra,
        });
        if best.as_ref().map(|(b, _, _)| val_ta > *b).unwrap_or(true) {
            best = Some((val_ta, e, params.clone()));
        }
        if best_ra.as_ref().map(|(b, _)| probe_ra > *b).unwrap_or(true) {
            best_ra = Some((probe_ra, e));
        }
    }

    let (best_val_ta, best_epoch, best_params) = match best {
        Some((ta, e, p)) => (ta, e, p),
        None => (0.0, 0, params),
    };
    let (best_probe_ra, epochs_to_best_ra) = best_ra.unwrap_or((0.0, 0));
    Ok((
        best_params,
        FinetuneRecord {
            scenario,
            epochs,
            best_epoch,
            best_val_ta,
            epochs_to_best_ra,
            best_probe_ra,
        },
    ))
}

// ── scenario matrix ──────────────────────────────────────────────────

/// The eight studied cells: unpretrained baselines can only fine-tune
/// fully, adversarial pretraining is also probed frozen (F1/F2).
pub fn default_cells() -> Vec<(PretrainKind, FinetuneKind)> {
    vec![
        (PretrainKind::None, FinetuneKind::FullStandard),
        (PretrainKind::None, FinetuneKind::FullAdversarial),
        (PretrainKind::Standard, FinetuneKind::FullStandard),
        (PretrainKind::Standard, FinetuneKind::FullAdversarial),
        (PretrainKind::Adversarial, FinetuneKind::PartialStandard),
        (PretrainKind::Adversarial, FinetuneKind::PartialAdversarial),
        (PretrainKind::Adversarial, FinetuneKind::FullStandard),
        (PretrainKind::Adversarial, FinetuneKind::FullAdversarial),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct CellRecord {
    pub scenario: String,
    /// Test-set standard accuracy of the kept model.
    pub ta: f64,
    /// Test-set headline robust accuracy under the evaluation attack.
    pub ra: f64,
    pub attack_steps: usize,
    pub epsilon: f64,
    pub best_epoch: u32,
    pub epochs_to_best_ra: u32,
    pub finetune: FinetuneRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellOutcome {
    pub scenario: String,
    /// Per-cell result; a failed cell records its error and leaves the
    /// rest of the matrix intact.
    pub result: std::result::Result<CellRecord, String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixReport {
    pub task: String,
    pub cells: Vec<CellOutcome>,
}

impl MatrixReport {
    pub fn cell(&self, scenario_prefix: &str) -> Option<&CellRecord> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().ok())
            .find(|r| r.scenario.starts_with(scenario_prefix))
    }
}

fn cell_config(base: &ScenarioConfig, task: TaskId, p: PretrainKind, f: FinetuneKind) -> ScenarioConfig {
    ScenarioConfig {
        pretrain: p,
        finetune: f,
        tasks: if p == PretrainKind::None {
            Vec::new()
        } else {
            vec![task]
        },
        ..base.clone()
    }
}

/// The task spec a scenario uses for `task`: library defaults at the
/// architecture's input side with the permutation lane derived from
/// the scenario seed. Single runs and matrix cells share this
/// derivation, so their pretraining is comparable run-for-run.
pub fn task_spec_for(cfg: &ScenarioConfig, task: TaskId) -> Result<TaskSpec> {
    let arch = Arch::by_id(&cfg.arch_id)?;
    TaskSpec::default_for(task, arch.side, mix(cfg.seed, TAG_PERM))
}

/// Run the pretraining × fine-tuning matrix for one pretext task.
/// Pretraining happens once per pretraining kind and its checkpoint is
/// shared by every fine-tuning cell of that kind.
pub fn run_scenario_matrix(
    base: &ScenarioConfig,
    task: TaskId,
    cells: &[(PretrainKind, FinetuneKind)],
    pretrain_ds: &Dataset,
    finetune_ds: &Dataset,
    test_ds: &Dataset,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<MatrixReport> {
    let spec = task_spec_for(base, task)?;
    let mut checkpoints: BTreeMap<&'static str, std::result::Result<Checkpoint, String>> =
        BTreeMap::new();
    let mut outcomes = Vec::with_capacity(cells.len());
    for &(p, f) in cells {
        let cfg = cell_config(base, task, p, f);
        let scenario = cfg.scenario_id();
        let ckpt: Option<std::result::Result<&Checkpoint, String>> = match p {
            PretrainKind::None => None,
            _ => {
                let entry = checkpoints.entry(p.code()).or_insert_with(|| {
                    pretrain(&cfg, &spec, pretrain_ds, metrics.as_deref_mut())
                        .map(|(params, rec)| {
                            Checkpoint::from_model(
                                &params,
                                Provenance {
                                    scenario: rec.scenario.clone(),
                                    epoch: rec.best_epoch,
                                    seed: cfg.seed,
                                },
                            )
                        })
                        .map_err(|e| e.to_string())
                });
                Some(entry.as_ref().map_err(|e| e.clone()))
            }
        };
        let result = (|| -> std::result::Result<CellRecord, String> {
            let ck = match ckpt {
                None => None,
                Some(Ok(c)) => Some(c),
                Some(Err(e)) => return Err(format!("pretraining failed: {e}")),
            };
            let (best, rec) = finetune(&cfg, ck, finetune_ds, metrics.as_deref_mut())
                .map_err(|e| e.to_string())?;
            let ta = eval::standard_accuracy(&best, test_ds).map_err(|e| e.to_string())?;
            let ra = eval::robust_accuracy(&scenario, &best, test_ds, &cfg.eval_attack)
                .map_err(|e| e.to_string())?
                .ra;
            Ok(CellRecord {
                scenario: scenario.clone(),
                ta,
                ra,
                attack_steps: cfg.eval_attack.steps,
                epsilon: cfg.eval_attack.epsilon,
                best_epoch: rec.best_epoch,
                epochs_to_best_ra: rec.epochs_to_best_ra,
                finetune: rec,
            })
        })();
        outcomes.push(CellOutcome { scenario, result });
    }
    Ok(MatrixReport {
        task: task.name().to_string(),
        cells: outcomes,
    })
}

// ── lambda grid search ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct LambdaRecord {
    pub lambda: f64,
    /// Probe RA of the kept model's epoch.
    pub val_ra: f64,
    pub val_ta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaSearchResult {
    pub best_lambda: f64,
    pub rows: Vec<LambdaRecord>,
}

/// Ensemble-pretrain + fine-tune once per λ on (typically shortened)
/// budgets and keep the λ with the best validation RA; ties break by
/// validation TA, then by the smaller λ.
pub fn lambda_grid_search(
    base: &ScenarioConfig,
    specs: &[TaskSpec],
    grid: &[f64],
    pretrain_ds: &Dataset,
    finetune_ds: &Dataset,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<LambdaSearchResult> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid must not be empty"));
    }
    if base.finetune_epochs == 0 {
        return Err(Error::invalid("lambda search needs at least one fine-tuning epoch"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = ScenarioConfig {
            lambda,
            ..base.clone()
        };
        let (pre, rec) = ensemble_pretrain(&cfg, specs, pretrain_ds, metrics.as_deref_mut())?;
        let ck = Checkpoint::from_model(
            &pre,
            Provenance {
                scenario: rec.scenario.clone(),
                epoch: rec.best_epoch,
                seed: cfg.seed,
            },
        );
        let (_, frec) = finetune(&cfg, Some(&ck), finetune_ds, metrics.as_deref_mut())?;
        let kept = frec
            .epochs
            .get(frec.best_epoch.saturating_sub(1) as usize)
            .ok_or_else(|| Error::invalid("fine-tuning produced no epochs"))?;
        rows.push(LambdaRecord {
            lambda,
            val_ra: kept.probe_ra,
            val_ta: kept.val_ta,
        });
    }
    let mut best = 0usize;
    for i in 1..rows.len() {
        let (a, b) = (&rows[i], &rows[best]);
        let better = a.val_ra > b.val_ra
            || (a.val_ra == b.val_ra && a.val_ta > b.val_ta)
            || (a.val_ra == b.val_ra && a.val_ta == b.val_ta && a.lambda < b.lambda);
        if better {
            best = i;
        }
    }
    Ok(LambdaSearchResult {
        best_lambda: rows[best].lambda,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::task_loss_grad;
    use crate::data::generate_synthetic_dataset;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn cosine_schedule_hits_its_endpoints_and_midpoint() {
        let (max, min) = (0.05, 0.001);
        approx(cosine_lr(0, 10, max, min).unwrap(), max, 1e-15);
        approx(cosine_lr(10, 10, max, min).unwrap(), min, 1e-15);
        approx(cosine_lr(5, 10, max, min).unwrap(), (max + min) / 2.0, 1e-12);
        // Constant when the endpoints agree; monotone otherwise.
        for t in 0..=6 {
            approx(cosine_lr(t, 6, 0.01, 0.01).unwrap(), 0.01, 1e-15);
        }
        let mut prev = f64::INFINITY;
        for t in 0..=10 {
            let lr = cosine_lr(t, 10, max, min).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(cosine_lr(11, 10, max, min).is_err());
        assert!(cosine_lr(0, 0, max, min).is_err());
    }

    #[test]
    fn multistep_schedule_matches_frozen_points() {
        let ms = [30, 50];
        approx(multistep_lr(0, &ms, 0.1, 10.0).unwrap(), 0.1, 1e-15);
        approx(multistep_lr(29, &ms, 0.1, 10.0).unwrap(), 0.1, 1e-15);
        approx(multistep_lr(30, &ms, 0.1, 10.0).unwrap(), 0.01, 1e-12);
        approx(multistep_lr(49, &ms, 0.1, 10.0).unwrap(), 0.01, 1e-12);
        approx(multistep_lr(50, &ms, 0.1, 10.0).unwrap(), 0.001, 1e-12);
        approx(multistep_lr(1000, &ms, 0.1, 10.0).unwrap(), 0.001, 1e-12);
        // No milestones → constant; disordered milestones → error.
        approx(multistep_lr(7, &[], 0.1, 10.0).unwrap(), 0.1, 1e-15);
        assert!(multistep_lr(0, &[50, 30], 0.1, 10.0).is_err());
        assert!(multistep_lr(0, &[30, 30], 0.1, 10.0).is_err());
    }

    fn tiny_cfg(pretrain: PretrainKind, finetune: FinetuneKind, tasks: Vec<TaskId>) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::desk(pretrain, finetune, tasks, 77);
        cfg.pretrain_epochs = 1;
        cfg.finetune_epochs = 1;
        cfg.batch_size = 4;
        cfg.probe_size = 4;
        cfg.attack.steps = 2;
        cfg.eval_attack.steps = 2;
        cfg
    }

    fn tiny_ds(seed: u64, n: usize) -> Dataset {
        generate_synthetic_dataset(seed, n, 4, 16).unwrap()
    }

    #[test]
    fn config_validation_collects_all_violations() {
        let mut cfg = tiny_cfg(
            PretrainKind::None,
            FinetuneKind::PartialStandard,
            vec![TaskId::Rotation],
        );
        cfg.batch_size = 0;
        cfg.lambda = -1.0;
        let err = cfg.validate().unwrap_err();
        match err {
            Error::InvalidConfig { violations } => {
                assert!(violations.len() >= 4, "{violations:?}");
                assert!(violations.iter().any(|v| v.contains("P1")));
                assert!(violations.iter().any(|v| v.contains("F1")));
                assert!(violations.iter().any(|v| v.contains("batch")));
                assert!(violations.iter().any(|v| v.contains("lambda")));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn zero_pretraining_epochs_returns_the_initialization() {
        let mut cfg = tiny_cfg(PretrainKind::Standard, FinetuneKind::FullStandard, vec![TaskId::Rotation]);
        cfg.pretrain_epochs = 0;
        let ds = tiny_ds(1, 8);
        let spec = TaskSpec::Rotation;
        let (params, rec) = pretrain(&cfg, &spec, &ds, None).unwrap();
        assert_eq!(rec.best_epoch, 0);
        assert!(rec.epochs.is_empty());
        let init = model_for_pretraining(&cfg, std::slice::from_ref(&spec)).unwrap();
        for ((na, a), (nb, b)) in params.named_tensors().iter().zip(init.named_tensors().iter()) {
            assert_eq!(na, nb);
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{na} changed despite zero epochs");
        }
    }

    #[test]
    fn pretraining_is_deterministic_for_a_fixed_seed() {
        let cfg = tiny_cfg(PretrainKind::Standard, FinetuneKind::FullStandard, vec![TaskId::Rotation]);
        let ds = tiny_ds(2, 8);
        let (a, ra) = pretrain(&cfg, &TaskSpec::Rotation, &ds, None).unwrap();
        let (b, rb) = pretrain(&cfg, &TaskSpec::Rotation, &ds, None).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(ra.epochs[0].train_loss.to_bits(), rb.epochs[0].train_loss.to_bits());
        assert_eq!(ra.best_epoch, rb.best_epoch);
    }

    #[test]
    fn partial_finetuning_requires_a_checkpoint() {
        let cfg = tiny_cfg(
            PretrainKind::Adversarial,
            FinetuneKind::PartialStandard,
            vec![TaskId::Rotation],
        );
        let ds = tiny_ds(3, 8);
        let err = finetune(&cfg, None, &ds, None).unwrap_err();
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }

    #[test]
    fn one_step_updates_respect_the_trainable_partition() {
        // A model with a pretext head and a classifier; single SGD steps
        // under partial and full modes must touch exactly the declared
        // tensors and never the pretext head.
        let arch = Arch::by_id("desk16").unwrap();
        let ds = tiny_ds(4, 4);
        let items: Vec<(Tensor, usize)> = ds
            .images
            .iter()
            .cloned()
            .zip(ds.labels.as_ref().unwrap().iter().map(|&l| l as usize))
            .collect();
        for (mode, expect_encoder) in [(FinetuneMode::Partial, false), (FinetuneMode::Full, true)] {
            let mut params =
                init_model(&arch, &[(TaskId::Rotation, 4)], Some(4), 9).unwrap();
            let before: Vec<(String, Vec<u64>)> = params
                .named_tensors()
                .iter()
                .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
                .collect();
            let hot = trainable_set(&params, mode);
            let (_, mut grads) = classifier_batch_grads(&params, &hot, &items).unwrap();
            scale_grads(&mut grads, 1.0 / items.len() as f64);
            Sgd::new(0.9).step(&mut params, &grads, 0.05).unwrap();
            for ((name, old), (_, new)) in before.iter().zip(params.named_tensors()) {
                let changed = old
                    .iter()
                    .zip(new.data())
                    .any(|(o, n)| *o != n.to_bits());
                let expected = if name.starts_with("classifier.") {
                    true
                } else if name.starts_with("encoder.") {
                    expect_encoder
                } else {
                    false // pretext heads never move during fine-tuning
                };
                assert_eq!(changed, expected, "{name} under {mode:?}");
            }
        }
    }

    #[test]
    fn frozen_encoder_finetuning_keeps_the_encoder_bit_exact() {
        let mut pcfg = tiny_cfg(
            PretrainKind::Standard,
            FinetuneKind::PartialStandard,
            vec![TaskId::Rotation],
        );
        pcfg.pretrain_epochs = 1;
        let ds = tiny_ds(5, 8);
        let (pre, prec) = pretrain(&pcfg, &TaskSpec::Rotation, &ds, None).unwrap();
        let ck = Checkpoint::from_model(
            &pre,
            Provenance {
                scenario: prec.scenario.clone(),
                epoch: prec.best_epoch,
                seed: pcfg.seed,
            },
        );
        let mut fcfg = pcfg.clone();
        fcfg.finetune_epochs = 2;
        let (tuned, _) = finetune(&fcfg, Some(&ck), &ds, None).unwrap();
        // The returned encoder must equal the checkpoint exactly as
        // loaded (f32-rounded), untouched by two epochs of training.
        let arch = Arch::by_id(&fcfg.arch_id).unwrap();
        let mut reference = init_model(&arch, &[], Some(4), mix(fcfg.seed, TAG_MODEL)).unwrap();
        ck.load_into(&mut reference).unwrap();
        for ((name, a), (_, b)) in tuned
            .named_tensors()
            .iter()
            .zip(reference.named_tensors().iter())
        {
            if name.starts_with("encoder.") {
                assert!(
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{name} drifted under frozen fine-tuning"
                );
            }
        }
    }

    #[test]
    fn finetune_records_are_internally_consistent() {
        let mut cfg = tiny_cfg(PretrainKind::None, FinetuneKind::FullStandard, vec![]);
        cfg.finetune_epochs = 3;
        let ds = tiny_ds(6, 12);
        let (_, rec) = finetune(&cfg, None, &ds, None).unwrap();
        assert_eq!(rec.epochs.len(), 3);
        for (i, e) in rec.epochs.iter().enumerate() {
            assert_eq!(e.epoch as usize, i + 1);
            assert!((0.0..=100.0).contains(&e.val_ta));
            assert!((0.0..=100.0).contains(&e.probe_ra));
            assert!(e.train_loss.is_finite());
        }
        // Earliest-argmax conventions.
        let best = rec
            .epochs
            .iter()
            .position(|e| e.val_ta == rec.best_val_ta)
            .unwrap();
        assert_eq!(rec.best_epoch as usize, best + 1);
        let best_ra = rec
            .epochs
            .iter()
            .position(|e| e.probe_ra == rec.best_probe_ra)
            .unwrap();
        assert_eq!(rec.epochs_to_best_ra as usize, best_ra + 1);
    }

    #[test]
    fn warmup_applies_to_adversarial_finetuning_only() {
        let mut cfg = tiny_cfg(PretrainKind::None, FinetuneKind::FullAdversarial, vec![]);
        cfg.finetune_epochs = 3;
        cfg.finetune_lr = 0.05;
        cfg.lr_factor = 10.0;
        cfg.warmup_epochs = 1;
        cfg.milestones = vec![2];
        let ds = tiny_ds(9, 8);
        let (_, rec) = finetune(&cfg, None, &ds, None).unwrap();
        let lrs: Vec<f64> = rec.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![0.005, 0.05, 0.005]);
        // Zero warmup restores the plain multistep schedule.
        cfg.warmup_epochs = 0;
        let (_, rec) = finetune(&cfg, None, &ds, None).unwrap();
        let lrs: Vec<f64> = rec.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![0.05, 0.05, 0.005]);
        // Standard fine-tuning ignores warmup entirely.
        cfg.finetune = FinetuneKind::FullStandard;
        cfg.warmup_epochs = 2;
        let (_, rec) = finetune(&cfg, None, &ds, None).unwrap();
        let lrs: Vec<f64> = rec.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![0.05, 0.05, 0.005]);
    }

    #[test]
    fn finetuning_emits_metrics_lines_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut cfg = tiny_cfg(PretrainKind::None, FinetuneKind::FullStandard, vec![]);
        cfg.finetune_epochs = 2;
        let ds = tiny_ds(7, 8);
        let mut w = MetricsWriter::create(&path).unwrap();
        finetune(&cfg, None, &ds, Some(&mut w)).unwrap();
        drop(w);
        let records = crate::data::read_metrics(&path).unwrap();
        assert_eq!(records.len(), 2 * 4); // lr, train_loss, val_ta, probe_ra
        assert!(records.iter().all(|r| r.scenario == cfg.scenario_id()));
        assert!(records.iter().any(|r| r.metric == "probe_ra" && r.epoch == 2));
    }

    #[test]
    fn diverging_loss_aborts_with_epoch_and_step_context() {
        let mut cfg = tiny_cfg(PretrainKind::None, FinetuneKind::FullStandard, vec![]);
        // Large enough that the second step's logits overflow f64.
        cfg.finetune_lr = 1e150;
        cfg.finetune_epochs = 2;
        cfg.batch_size = 2;
        let ds = tiny_ds(8, 6);
        let err = finetune(&cfg, None, &ds, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains("epoch"), "{msg}");
        assert!(msg.contains("step"), "{msg}");
    }

    #[test]
    fn ensemble_pretraining_rejects_single_task_configs() {
        let cfg = tiny_cfg(
            PretrainKind::Adversarial,
            FinetuneKind::FullStandard,
            vec![TaskId::Rotation],
        );
        let ds = tiny_ds(9, 4);
        assert!(ensemble_pretrain(&cfg, &[TaskSpec::Rotation], &ds, None).is_err());
    }

    #[test]
    fn lambda_zero_ensemble_training_matches_decoupled_attacks() {
        // One epoch of λ=0 ensemble pretraining must equal a manual run
        // whose adversarial inputs come from literal per-task PGD calls
        // (same derived seeds), batch by batch.
        let mut cfg = tiny_cfg(
            PretrainKind::Adversarial,
            FinetuneKind::FullStandard,
            vec![TaskId::Rotation, TaskId::Jigsaw],
        );
        cfg.batch_size = 2;
        cfg.train_fraction = 0.5;
        let ds = tiny_ds(10, 8);
        let specs = vec![
            TaskSpec::Rotation,
            TaskSpec::default_for(TaskId::Jigsaw, 16, 3).unwrap(),
        ];
        let (joint, _) = ensemble_pretrain(&cfg, &specs, &ds, None).unwrap();

        // Manual replica.
        let mut params = model_for_pretraining(&cfg, &specs).unwrap();
        let (train, _) =
            crate::data::split_train_val(&ds, cfg.train_fraction, mix(cfg.seed, TAG_SPLIT))
                .unwrap();
        let hot = pretrain_trainable_set(&params, &cfg.tasks);
        let mut sgd = Sgd::new(cfg.momentum);
        let epoch = 0usize;
        let lr = cosine_lr(
            epoch,
            cfg.pretrain_epochs,
            cfg.pretrain_lr_max,
            cfg.pretrain_lr_min,
        )
        .unwrap();
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut flat = Vec::new();
            for &idx in chunk {
                let mut samples =
                    draw_samples(&cfg, &specs, &train.images[idx], epoch, idx).unwrap();
                let ex_seed = example_attack_seed(cfg.attack.seed, epoch, idx);
                for (i, s) in samples.iter_mut().enumerate() {
                    let adv = {
                        let mut lg = task_loss_grad(&params, s).unwrap();
                        let per_task = AttackConfig {
                            seed: mix(ex_seed, i as u64),
                            ..cfg.attack
                        };
                        pgd_attack(&mut lg, &s.input, &per_task).unwrap()
                    };
                    s.input = adv;
                }
                flat.extend(samples);
            }
            let (_, mut grads) = pretext_batch_grads(&params, &hot, &flat).unwrap();
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd.step(&mut params, &grads, lr).unwrap();
        }
        for ((name, a), (_, b)) in joint.named_tensors().iter().zip(params.named_tensors()) {
            assert!(
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} differs between joint λ=0 and decoupled training"
            );
        }
    }

    #[test]
    fn scenario_matrix_isolates_failing_cells() {
        // Break one cell by making fine-tuning diverge only for F4
        // (huge lr is shared... instead: poison via empty test set is
        // global). Simplest honest isolation probe: run two cells where
        // one requires a checkpoint that pretraining cannot produce.
        let mut base = tiny_cfg(PretrainKind::None, FinetuneKind::FullStandard, vec![]);
        base.pretrain_epochs = 1;
        let pretrain_ds = tiny_ds(11, 4);
        let finetune_ds = tiny_ds(12, 8);
        let test_ds = tiny_ds(13, 4);
        // An empty pretraining dataset fails P-cells but not P1 cells.
        let empty = Dataset {
            images: Vec::new(),
            labels: Some(Vec::new()),
            classes: 4,
            provenance: String::new(),
        };
        let cells = vec![
            (PretrainKind::None, FinetuneKind::FullStandard),
            (PretrainKind::Standard, FinetuneKind::FullStandard),
        ];
        let report = run_scenario_matrix(
            &base,
            TaskId::Rotation,
            &cells,
            &empty,
            &finetune_ds,
            &test_ds,
            None,
        )
        .unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells[0].result.is_ok(), "{:?}", report.cells[0]);
        let err = report.cells[1].result.as_ref().unwrap_err();
        assert!(err.contains("pretraining failed"), "{err}");
        let _ = pretrain_ds; // silence: kept for symmetry with real runs
    }

    #[test]
    fn scenario_matrix_shares_pretraining_across_cells() {
        let base = tiny_cfg(PretrainKind::None, FinetuneKind::FullStandard, vec![]);
        let pretrain_ds = tiny_ds(14, 8);
        let finetune_ds = tiny_ds(15, 8);
        let test_ds = tiny_ds(16, 4);
        let cells = vec![
            (PretrainKind::Standard, FinetuneKind::PartialStandard),
            (PretrainKind::Standard, FinetuneKind::FullStandard),
        ];
        let report = run_scenario_matrix(
            &base,
            TaskId::Rotation,
            &cells,
            &pretrain_ds,
            &finetune_ds,
            &test_ds,
            None,
        )
        .unwrap();
        for c in &report.cells {
            assert!(c.result.is_ok(), "{c:?}");
        }
        // Frozen fine-tuning of the shared checkpoint keeps the encoder;
        // full fine-tuning trains it. Both cells must exist and differ.
        let f1 = report.cell("P2[rotation]/F1").unwrap();
        let f3 = report.cell("P2[rotation]/F3").unwrap();
        assert_ne!(f1.scenario, f3.scenario);
    }

    #[test]
    fn lambda_search_prefers_higher_ra_then_ta_then_smaller_lambda() {
        // Pure selection-logic check on synthetic rows via the public
        // tie-break rules (mirrors the implementation's comparator).
        let rows = [
            LambdaRecord { lambda: 0.0, val_ra: 10.0, val_ta: 80.0 },
            LambdaRecord { lambda: 0.1, val_ra: 12.0, val_ta: 70.0 },
            LambdaRecord { lambda: 0.2, val_ra: 12.0, val_ta: 75.0 },
            LambdaRecord { lambda: 0.3, val_ra: 12.0, val_ta: 75.0 },
        ];
        let mut best = 0usize;
        for i in 1..rows.len() {
            let (a, b) = (&rows[i], &rows[best]);
            if a.val_ra > b.val_ra
                || (a.val_ra == b.val_ra && a.val_ta > b.val_ta)
                || (a.val_ra == b.val_ra && a.val_ta == b.val_ta && a.lambda < b.lambda)
            {
                best = i;
            }
        }
        assert_eq!(rows[best].lambda, 0.2);
    }

    #[test]
    fn lambda_grid_search_runs_end_to_end_on_a_tiny_budget() {
        let mut cfg = tiny_cfg(
            PretrainKind::Adversarial,
            FinetuneKind::FullAdversarial,
            vec![TaskId::Rotation, TaskId::Jigsaw],
        );
        cfg.batch_size = 4;
        let specs = vec![
            TaskSpec::Rotation,
            TaskSpec::default_for(TaskId::Jigsaw, 16, 3).unwrap(),
        ];
        let pretrain_ds = tiny_ds(17, 6);
        let finetune_ds = tiny_ds(18, 8);
        let res =
            lambda_grid_search(&cfg, &specs, &[0.0, 0.1], &pretrain_ds, &finetune_ds, None)
                .unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(res.rows.iter().any(|r| r.lambda == res.best_lambda));
        assert!(lambda_grid_search(&cfg, &specs, &[], &pretrain_ds, &finetune_ds, None).is_err());
    }
}
