//! Subcommand implementations behind the `advpretrain` binary.
//!
//! The binary itself is a thin shell around [`run`]; everything here is
//! ordinary library code so integration tests can drive the exact CLI
//! paths in-process. The contract:
//!
//! * `advpretrain <command> [--config FILE] [--out DIR]
//!   [--SECTION.KEY VALUE]...` — flag overrides win over file values.
//! * Configuration is validated before any compute; the error lists
//!   every violation.
//! * Every run writes `config.resolved` next to its outputs. Re-running
//!   the same command from that snapshot reproduces the outputs
//!   bit-exactly.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{self, DataSource, RunConfig, SCHEMA, TEST_SEED_TAG};
use crate::data::{
    generate_synthetic_dataset, load_checkpoint, load_dataset, save_bitmap, save_checkpoint,
    save_dataset, Checkpoint, Dataset, MetricsWriter, Provenance,
};
use crate::error::{io_err, Error, Result};
use crate::eval::{self, EvalReport};
use crate::gradcheck::run_gradcheck;
use crate::model::{Arch, ModelParams};
use crate::rng::mix;
use crate::train::{self, task_spec_for, PretrainKind};
use crate::ssl::TaskSpec;

/// Subcommand names and one-line descriptions, in help order.
pub const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate a synthetic train/test dataset pair"),
    ("pretrain", "single-task self-supervised pretraining"),
    ("ensemble-pretrain", "multi-task joint adversarial pretraining"),
    ("finetune", "train a classifier, optionally from a pretrained encoder"),
    ("scenario-matrix", "run the pretraining x fine-tuning grid"),
    ("evaluate", "standard + robust accuracy of one model"),
    ("transfer-matrix", "cross-model adversarial transfer (ASR table)"),
    ("ensemble-eval", "prediction-averaging ensemble robustness"),
    ("lambda-search", "grid-search the gradient-diversity weight"),
    ("gradcheck", "finite-difference verification of every gradient"),
];

/// Config sections each command reads (drives per-command help).
fn sections_for(command: &str) -> &'static [&'static str] {
    match command {
        "gen-data" => &["data", "output"],
        "pretrain" | "ensemble-pretrain" => &["data", "scenario", "attack", "output"],
        "finetune" => &["data", "scenario", "attack", "eval_attack", "eval", "io", "output"],
        "scenario-matrix" => &["data", "scenario", "attack", "eval_attack", "eval", "output"],
        "evaluate" | "transfer-matrix" | "ensemble-eval" => {
            &["data", "eval_attack", "eval", "io", "output"]
        }
        "lambda-search" => &["data", "scenario", "attack", "eval_attack", "ensemble", "output"],
        "gradcheck" => &["scenario", "output"],
        _ => &[],
    }
}

struct Flags {
    config_path: Option<String>,
    overrides: Vec<(String, String)>,
    help: bool,
}

fn parse_flags(args: &[String]) -> std::result::Result<Flags, Vec<String>> {
    let mut flags = Flags {
        config_path: None,
        overrides: Vec::new(),
        help: false,
    };
    let mut violations = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(name) = arg.strip_prefix("--") else {
            violations.push(format!("unexpected argument `{arg}` (flags start with --)"));
            i += 1;
            continue;
        };
        if name == "help" {
            flags.help = true;
            i += 1;
            continue;
        }
        let Some(value) = args.get(i + 1) else {
            violations.push(format!("flag --{name} is missing its value"));
            break;
        };
        match name {
            "config" => {
                if flags.config_path.replace(value.clone()).is_some() {
                    violations.push("--config given more than once".to_string());
                }
            }
            "out" => flags.overrides.push(("output.dir".to_string(), value.clone())),
            _ if name.contains('.') => {
                flags.overrides.push((name.to_string(), value.clone()));
            }
            _ => violations.push(format!(
                "unknown flag --{name} (overrides are --SECTION.KEY VALUE)"
            )),
        }
        i += 2;
    }
    if violations.is_empty() {
        Ok(flags)
    } else {
        Err(violations)
    }
}

/// Entry point: parse arguments, resolve configuration, dispatch.
/// Human-readable results go to `out`; errors come back as values so
/// the binary can print them and exit nonzero.
pub fn run(args: &[String], out: &mut dyn Write) -> Result<()> {
    let Some(first) = args.first().map(String::as_str) else {
        help(out);
        return Ok(());
    };
    if matches!(first, "--help" | "-h" | "help") {
        help(out);
        return Ok(());
    }
    if !COMMANDS.iter().any(|(c, _)| *c == first) {
        return Err(Error::invalid(format!(
            "unknown command `{first}`; run `advpretrain --help`"
        )));
    }
    let flags = parse_flags(&args[1..]).map_err(|violations| Error::InvalidConfig { violations })?;
    if flags.help {
        command_help(first, out);
        return Ok(());
    }
    let file_text = match &flags.config_path {
        Some(path) => Some(fs::read_to_string(path).map_err(io_err(path.clone()))?),
        None => None,
    };
    let cfg = config::resolve(file_text.as_deref(), &flags.overrides)?;
    validate_for(first, &cfg)?;
    match first {
        "gen-data" => cmd_gen_data(&cfg, out),
        "pretrain" => cmd_pretrain(&cfg, out),
        "ensemble-pretrain" => cmd_ensemble_pretrain(&cfg, out),
        "finetune" => cmd_finetune(&cfg, out),
        "scenario-matrix" => cmd_scenario_matrix(&cfg, out),
        "evaluate" => cmd_evaluate(&cfg, out),
        "transfer-matrix" => cmd_transfer_matrix(&cfg, out),
        "ensemble-eval" => cmd_ensemble_eval(&cfg, out),
        "lambda-search" => cmd_lambda_search(&cfg, out),
        "gradcheck" => cmd_gradcheck(&cfg, out),
        _ => unreachable!("command membership checked above"),
    }
}

fn help(out: &mut dyn Write) {
    let _ = writeln!(out, "advpretrain -- adversarially robust pretraining at desk scale");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "usage: advpretrain <command> [--config FILE] [--out DIR] [--SECTION.KEY VALUE]..."
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "commands:");
    for (name, desc) in COMMANDS {
        let _ = writeln!(out, "  {name:<18} {desc}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "flags:");
    let _ = writeln!(out, "  --config FILE      read a key-value config file");
    let _ = writeln!(out, "  --out DIR          shorthand for --output.dir DIR");
    let _ = writeln!(
        out,
        "  --SECTION.KEY V    override any config key (e.g. --scenario.seed 12,"
    );
    let _ = writeln!(
        out,
        "                     --attack.epsilon 8/255); flags win over the file"
    );
    let _ = writeln!(out, "  --help             this help, or key listing after a command");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Every run writes the fully resolved configuration to DIR/config.resolved;"
    );
    let _ = writeln!(
        out,
        "re-running the same command from that snapshot reproduces its outputs"
    );
    let _ = writeln!(out, "bit-exactly.");
}

fn command_help(command: &str, out: &mut dyn Write) {
    let desc = COMMANDS
        .iter()
        .find(|(c, _)| *c == command)
        .map(|(_, d)| *d)
        .unwrap_or("");
    let _ = writeln!(out, "advpretrain {command} -- {desc}");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "usage: advpretrain {command} [--config FILE] [--out DIR] [--SECTION.KEY VALUE]..."
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "configuration keys this command reads:");
    for section in sections_for(command) {
        for (s, k, d) in SCHEMA {
            if s == section {
                let key = format!("{s}.{k}");
                let _ = writeln!(out, "  {key:<26} {d}");
            }
        }
    }
}

/// Per-command requirements, checked before any compute so every
/// violation is listed alongside the config-level ones.
fn validate_for(command: &str, cfg: &RunConfig) -> Result<()> {
    let mut v = Vec::new();
    if command != "gradcheck" && cfg.out_dir.is_none() {
        v.push(format!("output.dir is required for {command} (use --out DIR)"));
    }
    let needs_train = matches!(
        command,
        "pretrain" | "ensemble-pretrain" | "finetune" | "scenario-matrix" | "lambda-search"
    );
    let needs_test = matches!(
        command,
        "finetune" | "scenario-matrix" | "evaluate" | "transfer-matrix" | "ensemble-eval"
    );
    if cfg.data.source == DataSource::File {
        if needs_train && cfg.data.train_path.is_none() {
            v.push("data.train_path is required when data.source = file".to_string());
        }
        if needs_test && cfg.data.test_path.is_none() {
            v.push("data.test_path is required when data.source = file".to_string());
        }
    }
    match command {
        "gen-data" => {
            if cfg.data.source != DataSource::Synthetic {
                v.push("gen-data generates synthetic data; data.source must be synthetic".into());
            }
        }
        "pretrain" => {
            if cfg.scenario.pretrain == PretrainKind::None {
                v.push("pretrain needs a pretraining kind other than P1 (scenario.pretrain)".into());
            }
            if cfg.scenario.tasks.len() != 1 {
                v.push(format!(
                    "pretrain takes exactly one task (scenario.tasks), got {}",
                    cfg.scenario.tasks.len()
                ));
            }
        }
        "ensemble-pretrain" | "lambda-search" => {
            if cfg.scenario.tasks.len() < 2 {
                v.push(format!(
                    "{command} needs at least 2 tasks (scenario.tasks), got {}",
                    cfg.scenario.tasks.len()
                ));
            }
            if cfg.scenario.pretrain != PretrainKind::Adversarial {
                v.push(format!(
                    "{command} is defined for adversarial (P3) pretraining, got {}",
                    cfg.scenario.pretrain.code()
                ));
            }
            if command == "lambda-search" && cfg.lambda_grid.is_empty() {
                v.push("ensemble.lambda_grid must not be empty".into());
            }
        }
        "finetune" => {
            if cfg.scenario.finetune.requires_checkpoint() && cfg.io.checkpoint.is_none() {
                v.push(format!(
                    "{} fine-tuning requires a pretrained encoder (io.checkpoint)",
                    cfg.scenario.finetune.code()
                ));
            }
        }
        "scenario-matrix" => {
            if cfg.scenario.tasks.len() != 1 {
                v.push(format!(
                    "scenario-matrix takes exactly one task (scenario.tasks), got {}",
                    cfg.scenario.tasks.len()
                ));
            }
        }
        "evaluate" => {
            if cfg.io.models.len() != 1 {
                v.push(format!(
                    "evaluate takes exactly one model (io.models), got {}",
                    cfg.io.models.len()
                ));
            }
        }
        "transfer-matrix" => {
            if cfg.io.models.len() < 2 {
                v.push(format!(
                    "transfer-matrix needs at least 2 models (io.models), got {}",
                    cfg.io.models.len()
                ));
            }
        }
        "ensemble-eval" => {
            if cfg.io.models.is_empty() {
                v.push("ensemble-eval needs at least one model (io.models)".into());
            }
        }
        _ => {}
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig { violations: v })
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

/// Create the output directory and write the resolved-config snapshot.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.out_dir.as_deref().expect("out_dir validated"));
    fs::create_dir_all(&dir).map_err(io_err(dir.display().to_string()))?;
    let snap = dir.join("config.resolved");
    fs::write(&snap, cfg.snapshot(command)).map_err(io_err(snap.display().to_string()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(io_err(path.display().to_string()))
}

fn to_json<T: serde::Serialize>(value: &T, what: &str) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::invalid(format!("{what}: {e}")))
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset, path: &str) -> Result<()> {
    if ds.classes as usize != cfg.scenario.classes {
        return Err(Error::invalid(format!(
            "{path}: dataset declares {} classes but data.classes is {}",
            ds.classes, cfg.scenario.classes
        )));
    }
    let arch = Arch::by_id(&cfg.scenario.arch_id)?;
    let want = [arch.in_ch, arch.side, arch.side];
    if ds.image_shape() != want {
        return Err(Error::invalid(format!(
            "{path}: image shape {:?} does not fit architecture `{}` (expects {:?})",
            ds.image_shape(),
            cfg.scenario.arch_id,
            want
        )));
    }
    Ok(())
}

fn load_train(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_dataset(
            cfg.data.seed,
            cfg.data.n,
            cfg.data.classes,
            cfg.data.side,
        ),
        DataSource::File => {
            let path = cfg.data.train_path.as_deref().expect("train_path validated");
            let ds = load_dataset(path)?;
            check_dataset(cfg, &ds, path)?;
            Ok(ds)
        }
    }
}

fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_dataset(
            mix(cfg.data.seed, TEST_SEED_TAG),
            cfg.data.test_n,
            cfg.data.classes,
            cfg.data.side,
        ),
        DataSource::File => {
            let path = cfg.data.test_path.as_deref().expect("test_path validated");
            let ds = load_dataset(path)?;
            check_dataset(cfg, &ds, path)?;
            Ok(ds)
        }
    }
}

/// Apply `eval.max_examples` (0 = keep everything).
fn capped(ds: Dataset, max: usize) -> Dataset {
    if max == 0 || max >= ds.len() {
        ds
    } else {
        let idx: Vec<usize> = (0..max).collect();
        ds.take(&idx)
    }
}

/// Table labels for model files: file stems, falling back to full
/// paths when stems collide.
fn model_ids(paths: &[String]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            Path::new(p)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.clone())
        })
        .collect();
    let unique: BTreeSet<&String> = stems.iter().collect();
    if unique.len() == stems.len() {
        stems
    } else {
        paths.to_vec()
    }
}

fn load_models(cfg: &RunConfig) -> Result<Vec<(String, ModelParams)>> {
    let ids = model_ids(&cfg.io.models);
    cfg.io
        .models
        .iter()
        .zip(ids)
        .map(|(path, id)| {
            let params = load_checkpoint(path)?.to_model()?;
            if params.classifier.is_none() {
                return Err(Error::invalid(format!(
                    "{path}: checkpoint has no classifier head, nothing to evaluate"
                )));
            }
            Ok((id, params))
        })
        .collect()
}

fn task_specs(cfg: &RunConfig) -> Result<Vec<TaskSpec>> {
    cfg.scenario
        .tasks
        .iter()
        .map(|&t| task_spec_for(&cfg.scenario, t))
        .collect()
}

fn attack_json(a: &crate::attack::AttackConfig) -> serde_json::Value {
    json!({
        "norm": a.norm.name(),
        "epsilon": a.epsilon,
        "alpha": a.alpha,
        "steps": a.steps,
        "random_start": a.random_start,
        "seed": a.seed,
    })
}

fn report_json(r: &EvalReport) -> serde_json::Value {
    json!({
        "model": r.model_id,
        "n": r.n,
        "ta": r.ta,
        "ra": r.ra,
        "ra_cc": r.ra_cc,
        "ra_adv": r.ra_adv,
        "clean_count": r.clean_count,
        "adv_count": r.adv_count,
        "both_count": r.both_count,
        "success_count": r.success_count,
        "attack": attack_json(&r.attack),
    })
}

fn print_report(out: &mut dyn Write, r: &EvalReport) {
    let _ = writeln!(out, "model {}: n = {}", r.model_id, r.n);
    let _ = writeln!(
        out,
        "TA = {:.2}%   RA = {:.2}%   RA|clean = {:.2}%",
        r.ta, r.ra, r.ra_cc
    );
    let a = &r.attack;
    let _ = writeln!(
        out,
        "attack: {} eps = {} alpha = {} steps = {} random_start = {}",
        a.norm.name(),
        a.epsilon,
        a.alpha,
        a.steps,
        a.random_start
    );
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "gen-data")?;
    let train = generate_synthetic_dataset(
        cfg.data.seed,
        cfg.data.n,
        cfg.data.classes,
        cfg.data.side,
    )?;
    let test = generate_synthetic_dataset(
        mix(cfg.data.seed, TEST_SEED_TAG),
        cfg.data.test_n,
        cfg.data.classes,
        cfg.data.side,
    )?;
    for (name, ds) in [("train.ds", &train), ("test.ds", &test)] {
        let path = dir.join(name);
        save_dataset(&path, ds)?;
        let shape = ds.image_shape();
        let _ = writeln!(
            out,
            "wrote {} ({} examples, {} classes, {}x{}x{}, per-class {:?})",
            path.display(),
            ds.len(),
            ds.classes,
            shape[0],
            shape[1],
            shape[2],
            ds.class_histogram()
        );
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "pretrain")?;
    let train_ds = load_train(cfg)?;
    let spec = task_spec_for(&cfg.scenario, cfg.scenario.tasks[0])?;
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let (params, rec) = train::pretrain(&cfg.scenario, &spec, &train_ds, Some(&mut metrics))?;
    finish_pretrain(cfg, &dir, &params, &rec, out)
}

fn cmd_ensemble_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "ensemble-pretrain")?;
    let train_ds = load_train(cfg)?;
    let specs = task_specs(cfg)?;
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let (params, rec) =
        train::ensemble_pretrain(&cfg.scenario, &specs, &train_ds, Some(&mut metrics))?;
    finish_pretrain(cfg, &dir, &params, &rec, out)
}

fn finish_pretrain(
    cfg: &RunConfig,
    dir: &Path,
    params: &ModelParams,
    rec: &train::PretrainRecord,
    out: &mut dyn Write,
) -> Result<()> {
    let ckpt_path = dir.join("pretrain.ckpt");
    let ckpt = Checkpoint::from_model(
        params,
        Provenance {
            scenario: rec.scenario.clone(),
            epoch: rec.best_epoch,
            seed: cfg.scenario.seed,
        },
    );
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_json(&dir.join("pretrain.json"), &to_json(rec, "pretrain record")?)?;
    let _ = writeln!(
        out,
        "{}: best epoch {} of {} (pretext val acc {:.2}%)",
        rec.scenario,
        rec.best_epoch,
        rec.epochs.len(),
        rec.best_val_accuracy
    );
    let _ = writeln!(out, "wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "finetune")?;
    let train_ds = load_train(cfg)?;
    let test_ds = capped(load_test(cfg)?, cfg.eval.max_examples);
    let ckpt = match &cfg.io.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let (params, rec) =
        train::finetune(&cfg.scenario, ckpt.as_ref(), &train_ds, Some(&mut metrics))?;
    let model_path = dir.join("model.ckpt");
    save_checkpoint(
        &model_path,
        &Checkpoint::from_model(
            &params,
            Provenance {
                scenario: rec.scenario.clone(),
                epoch: rec.best_epoch,
                seed: cfg.scenario.seed,
            },
        ),
    )?;
    let report = eval::robust_accuracy(&rec.scenario, &params, &test_ds, &cfg.scenario.eval_attack)?;
    write_json(
        &dir.join("finetune.json"),
        &json!({
            "record": to_json(&rec, "finetune record")?,
            "test": report_json(&report),
        }),
    )?;
    let _ = writeln!(
        out,
        "{}: best epoch {} of {}, epochs-to-best-RA {}",
        rec.scenario,
        rec.best_epoch,
        rec.epochs.len(),
        rec.epochs_to_best_ra
    );
    print_report(out, &report);
    let _ = writeln!(out, "wrote {}", model_path.display());
    Ok(())
}

fn cmd_scenario_matrix(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "scenario-matrix")?;
    let train_ds = load_train(cfg)?;
    let test_ds = capped(load_test(cfg)?, cfg.eval.max_examples);
    let cells = train::default_cells();
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let report = train::run_scenario_matrix(
        &cfg.scenario,
        cfg.scenario.tasks[0],
        &cells,
        &train_ds,
        &train_ds,
        &test_ds,
        Some(&mut metrics),
    )?;
    write_json(&dir.join("matrix.json"), &to_json(&report, "matrix report")?)?;
    let _ = writeln!(out, "pretext task: {}", report.task);
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>8} {:>8}",
        "scenario", "TA (%)", "RA (%)", "epochs"
    );
    for (cell, (_, f)) in report.cells.iter().zip(&cells) {
        match &cell.result {
            Ok(r) => {
                // "epochs" follows the reporting convention of robust
                // training: time-to-best-RA for adversarial fine-tuning,
                // time-to-best-TA otherwise.
                let epochs = if f.adversarial() {
                    r.epochs_to_best_ra
                } else {
                    r.best_epoch
                };
                let _ = writeln!(
                    out,
                    "{:<22} {:>8.2} {:>8.2} {:>8}",
                    r.scenario, r.ta, r.ra, epochs
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{:<22} FAILED: {e}", cell.scenario);
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "evaluate")?;
    let test_ds = capped(load_test(cfg)?, cfg.eval.max_examples);
    let (id, params) = load_models(cfg)?.pop().expect("exactly one model validated");
    let report = eval::robust_accuracy(&id, &params, &test_ds, &cfg.scenario.eval_attack)?;
    print_report(out, &report);
    save_bitmap(dir.join(format!("{id}.clean.bm")), &report.clean_correct)?;
    save_bitmap(dir.join(format!("{id}.adv.bm")), &report.adv_correct)?;
    let mut value = report_json(&report);
    if cfg.eval.unforeseen {
        let rows = eval::unforeseen_suite(
            &id,
            &params,
            &test_ds,
            &cfg.scenario.eval_attack,
            cfg.scenario.eval_attack.seed,
        )?;
        let _ = writeln!(out, "unforeseen battery:");
        for row in &rows {
            let _ = writeln!(out, "  {:<18} {:>8.2}%", row.name, row.accuracy);
        }
        value["unforeseen"] = json!(rows
            .iter()
            .map(|r| json!({"name": r.name, "accuracy": r.accuracy}))
            .collect::<Vec<_>>());
    }
    write_json(&dir.join("eval.json"), &value)?;
    Ok(())
}

fn cmd_transfer_matrix(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "transfer-matrix")?;
    let test_ds = capped(load_test(cfg)?, cfg.eval.max_examples);
    let models = load_models(cfg)?;
    let ids: Vec<String> = models.iter().map(|(id, _)| id.clone()).collect();
    let refs: Vec<&ModelParams> = models.iter().map(|(_, p)| p).collect();
    let tm = eval::transfer_matrix(
        &ids,
        &refs,
        &test_ds,
        &cfg.scenario.eval_attack,
        cfg.eval.asr_denominator,
    )?;
    let denom = match cfg.eval.asr_denominator {
        eval::AsrDenominator::CleanCorrect => "clean_correct",
        eval::AsrDenominator::AllExamples => "all",
    };
    let _ = writeln!(out, "ASR (%) with denominator {denom}; rows attack, columns defend");
    let _ = write!(out, "{:<16}", "source \\ target");
    for id in &ids {
        let _ = write!(out, " {id:>12}");
    }
    let _ = writeln!(out);
    for (i, id) in ids.iter().enumerate() {
        let _ = write!(out, "{id:<16}");
        for j in 0..ids.len() {
            let _ = write!(out, " {:>12.2}", tm.asr[i][j]);
        }
        let _ = writeln!(out);
    }
    for r in &tm.source_reports {
        let _ = writeln!(
            out,
            "{}: TA = {:.2}%  RA = {:.2}%  RA|clean = {:.2}%",
            r.model_id, r.ta, r.ra, r.ra_cc
        );
    }
    let _ = writeln!(
        out,
        "diagonal identity: ASR[i][i] = 100 - RA|clean[i] (exact by construction)"
    );
    write_json(
        &dir.join("transfer.json"),
        &json!({
            "models": ids,
            "denominator": denom,
            "n": tm.n,
            "asr": tm.asr,
            "numerators": tm.numerators,
            "denominators": tm.denominators,
            "attack": attack_json(&tm.attack),
            "reports": tm.source_reports.iter().map(report_json).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn cmd_ensemble_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "ensemble-eval")?;
    let test_ds = capped(load_test(cfg)?, cfg.eval.max_examples);
    let models = load_models(cfg)?;
    let ids: Vec<String> = models.iter().map(|(id, _)| id.clone()).collect();
    let refs: Vec<&ModelParams> = models.iter().map(|(_, p)| p).collect();
    let mut singles = Vec::with_capacity(models.len());
    for (id, params) in &models {
        singles.push(eval::robust_accuracy(
            id,
            params,
            &test_ds,
            &cfg.scenario.eval_attack,
        )?);
    }
    let ensemble_id = format!("ensemble({})", ids.join("+"));
    let ensemble =
        eval::ensemble_robust_accuracy(&ensemble_id, &refs, &test_ds, &cfg.scenario.eval_attack)?;
    let _ = writeln!(out, "{:<28} {:>8} {:>8}", "member", "TA (%)", "RA (%)");
    for r in &singles {
        let _ = writeln!(out, "{:<28} {:>8.2} {:>8.2}", r.model_id, r.ta, r.ra);
    }
    let _ = writeln!(out, "{:<28} {:>8.2} {:>8.2}", ensemble.model_id, ensemble.ta, ensemble.ra);
    let best_single = singles.iter().map(|r| r.ra).fold(f64::NEG_INFINITY, f64::max);
    let _ = writeln!(
        out,
        "ensemble RA - best single RA = {:+.2} points",
        ensemble.ra - best_single
    );
    write_json(
        &dir.join("ensemble.json"),
        &json!({
            "members": singles.iter().map(report_json).collect::<Vec<_>>(),
            "ensemble": report_json(&ensemble),
            "gain_over_best_single": ensemble.ra - best_single,
        }),
    )?;
    Ok(())
}

fn cmd_lambda_search(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_out(cfg, "lambda-search")?;
    let train_ds = load_train(cfg)?;
    let specs = task_specs(cfg)?;
    let mut metrics = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let result = train::lambda_grid_search(
        &cfg.scenario,
        &specs,
        &cfg.lambda_grid,
        &train_ds,
        &train_ds,
        Some(&mut metrics),
    )?;
    let _ = writeln!(out, "{:>10} {:>10} {:>10}", "lambda", "val RA", "val TA");
    for row in &result.rows {
        let _ = writeln!(
            out,
            "{:>10} {:>10.2} {:>10.2}",
            row.lambda, row.val_ra, row.val_ta
        );
    }
    let _ = writeln!(out, "best lambda = {}", result.best_lambda);
    write_json(&dir.join("lambda.json"), &to_json(&result, "lambda search")?)?;
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let report = run_gradcheck(cfg.scenario.seed, 100)?;
    let rendered = report.render();
    let _ = write!(out, "{rendered}");
    if cfg.out_dir.is_some() {
        let dir = prepare_out(cfg, "gradcheck")?;
        let path = dir.join("gradcheck.txt");
        fs::write(&path, &rendered).map_err(io_err(path.display().to_string()))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::invalid(
            "gradient check failed: at least one op exceeded tolerance (table above)",
        ))
    }
}
