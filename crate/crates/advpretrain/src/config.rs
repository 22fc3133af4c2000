//! Run configuration: a flat, typed key-value text format.
//!
//! ```text
//! # comment (also `;`)
//! [scenario]
//! pretrain = P3
//! tasks = rotation,jigsaw
//! ```
//!
//! One section level, `key = value` lines, nothing nested. Every key
//! the format accepts is listed in [`SCHEMA`]; anything else is
//! rejected. Resolution layers three sources — built-in defaults, then
//! the config file, then explicit flag overrides (flags win) — and
//! reports *all* violations in one error instead of stopping at the
//! first.
//!
//! [`RunConfig::snapshot`] renders the fully resolved configuration
//! back into the same format with every value explicit. Parsing a
//! snapshot therefore reconstructs the identical configuration, which
//! is what makes re-running from a snapshot bit-exact: no default can
//! drift underneath it.

use std::collections::BTreeMap;

use crate::attack::Norm;
use crate::error::{Error, Result};
use crate::eval::AsrDenominator;
use crate::model::{Arch, TaskId};
use crate::train::{FinetuneKind, PretrainKind, ScenarioConfig};

/// Every `(section, key, description)` the format accepts.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "command", "subcommand that produced this snapshot (provenance only)"),
    ("data", "source", "dataset source: synthetic | file"),
    ("data", "train_path", "training dataset file (source = file)"),
    ("data", "test_path", "test dataset file (source = file)"),
    ("data", "seed", "synthetic generator seed (test split derives from it)"),
    ("data", "n", "synthetic training-set size"),
    ("data", "test_n", "synthetic test-set size"),
    ("data", "classes", "synthetic class count (2..=4)"),
    ("data", "side", "synthetic image side (positive multiple of 4)"),
    ("scenario", "arch", "architecture id (desk16, desk32)"),
    ("scenario", "seed", "scenario seed; attack seeds derive from it unless set"),
    ("scenario", "pretrain", "pretraining kind: P1 | P2 | P3 | P3s"),
    ("scenario", "finetune", "fine-tuning kind: F1 | F2 | F3 | F4"),
    ("scenario", "tasks", "comma-separated pretext tasks (rotation, jigsaw, selfie)"),
    ("scenario", "lambda", "gradient-diversity weight for joint ensemble attacks"),
    ("scenario", "pretrain_epochs", "pretext training epochs"),
    ("scenario", "finetune_epochs", "fine-tuning epochs"),
    ("scenario", "batch_size", "SGD minibatch size"),
    ("scenario", "momentum", "SGD momentum in [0,1)"),
    ("scenario", "pretrain_lr_max", "cosine schedule peak learning rate"),
    ("scenario", "pretrain_lr_min", "cosine schedule floor learning rate"),
    ("scenario", "finetune_lr", "fine-tuning base learning rate"),
    ("scenario", "warmup_epochs", "leading adversarial fine-tuning epochs at finetune_lr / lr_factor"),
    ("scenario", "milestones", "comma-separated epochs where the fine-tuning lr drops"),
    ("scenario", "lr_factor", "multiplicative lr drop at each milestone"),
    ("scenario", "train_fraction", "train share of the train/validation split, in (0,1)"),
    ("scenario", "probe_size", "fixed validation probe size for per-epoch RA"),
    ("scenario", "smoothing_sigma", "Gaussian sigma for P3s smoothing pretraining"),
    ("attack", "norm", "training attack norm: linf | l2"),
    ("attack", "epsilon", "training attack radius (rational like 8/255, or decimal)"),
    ("attack", "alpha", "training attack step size (rational or decimal)"),
    ("attack", "steps", "training attack iterations"),
    ("attack", "random_start", "start the training attack from a random point: true | false"),
    ("attack", "seed", "training attack seed (derived from scenario seed unless set)"),
    ("eval_attack", "norm", "evaluation attack norm: linf | l2"),
    ("eval_attack", "epsilon", "evaluation attack radius (rational or decimal)"),
    ("eval_attack", "alpha", "evaluation attack step size (rational or decimal)"),
    ("eval_attack", "steps", "evaluation attack iterations"),
    ("eval_attack", "random_start", "random evaluation attack start: true | false"),
    ("eval_attack", "seed", "evaluation attack seed (derived from scenario seed unless set)"),
    ("eval", "max_examples", "cap on evaluated test examples (0 = all)"),
    ("eval", "asr_denominator", "transfer ASR denominator: clean_correct | all"),
    ("eval", "unforeseen", "also run the unforeseen-attack battery: true | false"),
    ("ensemble", "lambda_grid", "comma-separated lambda values for lambda-search"),
    ("io", "checkpoint", "pretrained encoder checkpoint (fine-tuning input)"),
    ("io", "models", "comma-separated model checkpoints to evaluate"),
    ("output", "dir", "directory all outputs are written under"),
];

/// Seed tag separating the synthetic test split from the train split.
pub const TEST_SEED_TAG: u64 = 0x7e57;

/// Where datasets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::File => "file",
        }
    }
}

/// `[data]` section: where train/test sets come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_path: Option<String>,
    pub test_path: Option<String>,
    pub seed: u64,
    pub n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub side: usize,
}

/// `[eval]` section: evaluation-set shaping shared by the reporting
/// subcommands.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// 0 means the whole test set.
    pub max_examples: usize,
    pub asr_denominator: AsrDenominator,
    pub unforeseen: bool,
}

/// `[io]` section: file inputs naming models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IoConfig {
    pub checkpoint: Option<String>,
    pub models: Vec<String>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `[run] command` as read back from a snapshot; provenance only,
    /// never validated against the invoked subcommand.
    pub command: Option<String>,
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub eval: EvalConfig,
    pub lambda_grid: Vec<f64>,
    pub io: IoConfig,
    pub out_dir: Option<String>,
}

type Entries = BTreeMap<(String, String), String>;

/// Parse config text into `(section, key) → value`, collecting syntax
/// violations (malformed lines, duplicate keys) without stopping.
pub fn parse_config_text(text: &str) -> (Entries, Vec<String>) {
    let mut entries = Entries::new();
    let mut violations = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let n = i + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') {
            match line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                Some(name) if !name.trim().is_empty() => section = Some(name.trim().to_string()),
                _ => {
                    violations.push(format!("line {n}: malformed section header `{line}`"));
                    section = None;
                }
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            violations.push(format!("line {n}: expected `key = value`, got `{line}`"));
            continue;
        };
        let key = k.trim();
        if key.is_empty() {
            violations.push(format!("line {n}: empty key"));
            continue;
        }
        match &section {
            None => violations.push(format!("line {n}: key `{key}` before any [section]")),
            Some(s) => {
                let prev = entries.insert((s.clone(), key.to_string()), v.trim().to_string());
                if prev.is_some() {
                    violations.push(format!("line {n}: duplicate key `{s}.{key}`"));
                }
            }
        }
    }
    (entries, violations)
}

// ── value parsers (error messages only; the key is prepended later) ──

fn p_u64(s: &str) -> std::result::Result<u64, String> {
    s.parse().map_err(|_| format!("expected an unsigned integer, got `{s}`"))
}

fn p_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("expected an unsigned integer, got `{s}`"))
}

fn p_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite number, got `{s}`")),
    }
}

fn p_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{s}`")),
    }
}

/// Pixel quantities (ε, α) accept `a/b` rationals or plain decimals.
/// `8/255` and the decimal rendering of `8.0/255.0` parse to the same
/// f64 because IEEE division is correctly rounded and decimal output
/// round-trips.
fn p_pixel(s: &str) -> std::result::Result<f64, String> {
    if let Some((num, den)) = s.split_once('/') {
        let n = p_f64(num.trim())?;
        let d = p_f64(den.trim())?;
        if d == 0.0 {
            return Err(format!("zero denominator in `{s}`"));
        }
        let v = n / d;
        if !v.is_finite() {
            return Err(format!("`{s}` does not evaluate to a finite number"));
        }
        Ok(v)
    } else {
        p_f64(s)
    }
}

/// Public entry point for pixel-quantity parsing (used by flag help
/// and tests): rational strings and decimals, identical values.
pub fn parse_pixel(s: &str) -> Result<f64> {
    p_pixel(s).map_err(Error::invalid)
}

fn split_list(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        Vec::new()
    } else {
        s.split(',').map(str::trim).collect()
    }
}

fn p_tasks(s: &str) -> std::result::Result<Vec<TaskId>, String> {
    split_list(s)
        .into_iter()
        .map(|t| TaskId::parse(t).map_err(|e| e.to_string()))
        .collect()
}

fn p_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    split_list(s).into_iter().map(p_usize).collect()
}

fn p_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    split_list(s).into_iter().map(p_f64).collect()
}

fn p_string_list(s: &str) -> std::result::Result<Vec<String>, String> {
    Ok(split_list(s).into_iter().map(str::to_string).collect())
}

fn p_string(s: &str) -> std::result::Result<String, String> {
    Ok(s.to_string())
}

fn p_source(s: &str) -> std::result::Result<DataSource, String> {
    match s {
        "synthetic" => Ok(DataSource::Synthetic),
        "file" => Ok(DataSource::File),
        _ => Err(format!("expected `synthetic` or `file`, got `{s}`")),
    }
}

fn p_norm(s: &str) -> std::result::Result<Norm, String> {
    Norm::parse(s).map_err(|e| e.to_string())
}

fn p_pretrain(s: &str) -> std::result::Result<PretrainKind, String> {
    PretrainKind::parse(s).map_err(|e| e.to_string())
}

fn p_finetune(s: &str) -> std::result::Result<FinetuneKind, String> {
    FinetuneKind::parse(s).map_err(|e| e.to_string())
}

fn p_denominator(s: &str) -> std::result::Result<AsrDenominator, String> {
    match s {
        "clean_correct" => Ok(AsrDenominator::CleanCorrect),
        "all" => Ok(AsrDenominator::AllExamples),
        _ => Err(format!("expected `clean_correct` or `all`, got `{s}`")),
    }
}

/// Typed view over raw entries that records parse failures instead of
/// aborting, so the final error lists everything at once.
struct Ctx<'a> {
    entries: &'a Entries,
    violations: Vec<String>,
}

impl Ctx<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    fn get<T>(
        &mut self,
        section: &str,
        key: &str,
        parse: fn(&str) -> std::result::Result<T, String>,
    ) -> Option<T> {
        let value = self.raw(section, key)?;
        match parse(value) {
            Ok(t) => Some(t),
            Err(msg) => {
                self.violations.push(format!("{section}.{key}: {msg}"));
                None
            }
        }
    }
}

/// Merge config-file text and `section.key = value` flag overrides
/// into a fully resolved, validated [`RunConfig`].
pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut entries = Entries::new();
    let mut violations = Vec::new();
    if let Some(text) = file_text {
        let (e, v) = parse_config_text(text);
        entries = e;
        violations = v;
    }
    for (key, value) in overrides {
        match key.split_once('.') {
            Some((s, k)) if !s.is_empty() && !k.is_empty() => {
                entries.insert((s.to_string(), k.to_string()), value.clone());
            }
            _ => violations.push(format!("override `{key}` is not of the form section.key")),
        }
    }
    for (s, k) in entries.keys() {
        if !SCHEMA.iter().any(|(ss, kk, _)| ss == s && kk == k) {
            violations.push(format!("unknown key `{s}.{k}`"));
        }
    }
    let mut ctx = Ctx {
        entries: &entries,
        violations: Vec::new(),
    };

    let command = ctx.get("run", "command", p_string);

    let data = DataConfig {
        source: ctx.get("data", "source", p_source).unwrap_or(DataSource::Synthetic),
        train_path: ctx.get("data", "train_path", p_string),
        test_path: ctx.get("data", "test_path", p_string),
        seed: ctx.get("data", "seed", p_u64).unwrap_or(7),
        n: ctx.get("data", "n", p_usize).unwrap_or(4000),
        test_n: ctx.get("data", "test_n", p_usize).unwrap_or(1000),
        classes: ctx.get("data", "classes", p_usize).unwrap_or(4),
        side: ctx.get("data", "side", p_usize).unwrap_or(16),
    };

    let pretrain = ctx
        .get("scenario", "pretrain", p_pretrain)
        .unwrap_or(PretrainKind::Adversarial);
    let finetune = ctx
        .get("scenario", "finetune", p_finetune)
        .unwrap_or(FinetuneKind::FullAdversarial);
    let tasks = match ctx.raw("scenario", "tasks") {
        Some(_) => ctx.get("scenario", "tasks", p_tasks).unwrap_or_default(),
        // P1 has no pretext phase, so the rotation default only applies
        // when some pretraining kind will actually use it.
        None if pretrain == PretrainKind::None => Vec::new(),
        None => vec![TaskId::Rotation],
    };
    let seed = ctx.get("scenario", "seed", p_u64).unwrap_or(11);

    let mut sc = ScenarioConfig::desk(pretrain, finetune, tasks, seed);
    sc.classes = data.classes;
    if let Some(v) = ctx.get("scenario", "arch", p_string) {
        sc.arch_id = v;
    }
    if let Some(v) = ctx.get("scenario", "lambda", p_f64) {
        sc.lambda = v;
    }
    if let Some(v) = ctx.get("scenario", "pretrain_epochs", p_usize) {
        sc.pretrain_epochs = v;
    }
    if let Some(v) = ctx.get("scenario", "finetune_epochs", p_usize) {
        sc.finetune_epochs = v;
    }
    if let Some(v) = ctx.get("scenario", "batch_size", p_usize) {
        sc.batch_size = v;
    }
    if let Some(v) = ctx.get("scenario", "momentum", p_f64) {
        sc.momentum = v;
    }
    if let Some(v) = ctx.get("scenario", "pretrain_lr_max", p_f64) {
        sc.pretrain_lr_max = v;
    }
    if let Some(v) = ctx.get("scenario", "pretrain_lr_min", p_f64) {
        sc.pretrain_lr_min = v;
    }
    if let Some(v) = ctx.get("scenario", "finetune_lr", p_f64) {
        sc.finetune_lr = v;
    }
    if let Some(v) = ctx.get("scenario", "warmup_epochs", p_usize) {
        sc.warmup_epochs = v;
    }
    if let Some(v) = ctx.get("scenario", "milestones", p_usize_list) {
        sc.milestones = v;
    }
    if let Some(v) = ctx.get("scenario", "lr_factor", p_f64) {
        sc.lr_factor = v;
    }
    if let Some(v) = ctx.get("scenario", "train_fraction", p_f64) {
        sc.train_fraction = v;
    }
    if let Some(v) = ctx.get("scenario", "probe_size", p_usize) {
        sc.probe_size = v;
    }
    if let Some(v) = ctx.get("scenario", "smoothing_sigma", p_f64) {
        sc.smoothing_sigma = v;
    }
    for (section, cfg) in [("attack", &mut sc.attack), ("eval_attack", &mut sc.eval_attack)] {
        if let Some(v) = ctx.get(section, "norm", p_norm) {
            cfg.norm = v;
        }
        if let Some(v) = ctx.get(section, "epsilon", p_pixel) {
            cfg.epsilon = v;
        }
        if let Some(v) = ctx.get(section, "alpha", p_pixel) {
            cfg.alpha = v;
        }
        if let Some(v) = ctx.get(section, "steps", p_usize) {
            cfg.steps = v;
        }
        if let Some(v) = ctx.get(section, "random_start", p_bool) {
            cfg.random_start = v;
        }
        if let Some(v) = ctx.get(section, "seed", p_u64) {
            cfg.seed = v;
        }
    }

    let eval = EvalConfig {
        max_examples: ctx.get("eval", "max_examples", p_usize).unwrap_or(0),
        asr_denominator: ctx
            .get("eval", "asr_denominator", p_denominator)
            .unwrap_or(AsrDenominator::CleanCorrect),
        unforeseen: ctx.get("eval", "unforeseen", p_bool).unwrap_or(false),
    };
    let lambda_grid = ctx
        .get("ensemble", "lambda_grid", p_f64_list)
        .unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.2]);
    let io = IoConfig {
        checkpoint: ctx.get("io", "checkpoint", p_string),
        models: ctx.get("io", "models", p_string_list).unwrap_or_default(),
    };
    let out_dir = ctx.get("output", "dir", p_string);

    violations.extend(ctx.violations);

    if data.source == DataSource::Synthetic {
        // Mirror the synthetic generator's domain so misconfiguration
        // surfaces before any compute.
        if data.n == 0 {
            violations.push("data.n: synthetic training-set size must be > 0".to_string());
        }
        if data.test_n == 0 {
            violations.push("data.test_n: synthetic test-set size must be > 0".to_string());
        }
        if !(2..=4).contains(&data.classes) {
            violations.push(format!(
                "data.classes: synthetic generator supports 2..=4 classes, got {}",
                data.classes
            ));
        }
        if data.side == 0 || data.side % 4 != 0 {
            violations.push(format!(
                "data.side: must be a positive multiple of 4, got {}",
                data.side
            ));
        }
        if let Ok(arch) = Arch::by_id(&sc.arch_id) {
            if arch.side != data.side {
                violations.push(format!(
                    "data.side: {} does not match architecture `{}` (input side {})",
                    data.side, sc.arch_id, arch.side
                ));
            }
        }
    }
    if let Err(Error::InvalidConfig { violations: v }) = sc.validate() {
        violations.extend(v);
    }

    if violations.is_empty() {
        Ok(RunConfig {
            command,
            data,
            scenario: sc,
            eval,
            lambda_grid,
            io,
            out_dir,
        })
    } else {
        Err(Error::InvalidConfig { violations })
    }
}

impl RunConfig {
    /// Render every resolved value back into config-file text. The
    /// output parses to this exact configuration (floats print in
    /// round-trip form), so a rerun from the snapshot can never pick
    /// up drifted defaults.
    pub fn snapshot(&self, command: &str) -> String {
        use std::fmt::Write as _;
        let sc = &self.scenario;
        let mut s = String::new();
        let _ = writeln!(s, "# resolved configuration; reruns reproduce this run bit-exactly");
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "source = {}", self.data.source.name());
        if let Some(p) = &self.data.train_path {
            let _ = writeln!(s, "train_path = {p}");
        }
        if let Some(p) = &self.data.test_path {
            let _ = writeln!(s, "test_path = {p}");
        }
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "n = {}", self.data.n);
        let _ = writeln!(s, "test_n = {}", self.data.test_n);
        let _ = writeln!(s, "classes = {}", self.data.classes);
        let _ = writeln!(s, "side = {}", self.data.side);
        let _ = writeln!(s, "\n[scenario]");
        let _ = writeln!(s, "arch = {}", sc.arch_id);
        let _ = writeln!(s, "seed = {}", sc.seed);
        let _ = writeln!(s, "pretrain = {}", sc.pretrain.code());
        let _ = writeln!(s, "finetune = {}", sc.finetune.code());
        let tasks: Vec<&str> = sc.tasks.iter().map(|t| t.name()).collect();
        let _ = writeln!(s, "tasks = {}", tasks.join(","));
        let _ = writeln!(s, "lambda = {}", sc.lambda);
        let _ = writeln!(s, "pretrain_epochs = {}", sc.pretrain_epochs);
        let _ = writeln!(s, "finetune_epochs = {}", sc.finetune_epochs);
        let _ = writeln!(s, "batch_size = {}", sc.batch_size);
        let _ = writeln!(s, "momentum = {}", sc.momentum);
        let _ = writeln!(s, "pretrain_lr_max = {}", sc.pretrain_lr_max);
        let _ = writeln!(s, "pretrain_lr_min = {}", sc.pretrain_lr_min);
        let _ = writeln!(s, "finetune_lr = {}", sc.finetune_lr);
        let _ = writeln!(s, "warmup_epochs = {}", sc.warmup_epochs);
        let milestones: Vec<String> = sc.milestones.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "milestones = {}", milestones.join(","));
        let _ = writeln!(s, "lr_factor = {}", sc.lr_factor);
        let _ = writeln!(s, "train_fraction = {}", sc.train_fraction);
        let _ = writeln!(s, "probe_size = {}", sc.probe_size);
        let _ = writeln!(s, "smoothing_sigma = {}", sc.smoothing_sigma);
        for (name, a) in [("attack", &sc.attack), ("eval_attack", &sc.eval_attack)] {
            let _ = writeln!(s, "\n[{name}]");
            let _ = writeln!(s, "norm = {}", a.norm.name());
            let _ = writeln!(s, "epsilon = {}", a.epsilon);
            let _ = writeln!(s, "alpha = {}", a.alpha);
            let _ = writeln!(s, "steps = {}", a.steps);
            let _ = writeln!(s, "random_start = {}", a.random_start);
            let _ = writeln!(s, "seed = {}", a.seed);
        }
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "max_examples = {}", self.eval.max_examples);
        let denom = match self.eval.asr_denominator {
            AsrDenominator::CleanCorrect => "clean_correct",
            AsrDenominator::AllExamples => "all",
        };
        let _ = writeln!(s, "asr_denominator = {denom}");
        let _ = writeln!(s, "unforeseen = {}", self.eval.unforeseen);
        let _ = writeln!(s, "\n[ensemble]");
        let grid: Vec<String> = self.lambda_grid.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "lambda_grid = {}", grid.join(","));
        if self.io.checkpoint.is_some() || !self.io.models.is_empty() {
            let _ = writeln!(s, "\n[io]");
            if let Some(c) = &self.io.checkpoint {
                let _ = writeln!(s, "checkpoint = {c}");
            }
            if !self.io.models.is_empty() {
                let _ = writeln!(s, "models = {}", self.io.models.join(","));
            }
        }
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "\n[output]");
            let _ = writeln!(s, "dir = {dir}");
        }
        s
    }
}
