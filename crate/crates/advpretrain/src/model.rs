//! Small CNN model zoo with an encoder / task-head / classifier split.
//!
//! One shared convolutional encoder maps an image to a 64-dim embedding;
//! every head (pretext task heads, the downstream classifier) is a
//! single linear layer on top of it. Pretraining owns `encoder + task
//! heads`; fine-tuning owns `classifier` (partial) or `encoder +
//! classifier` (full). Pretext heads are never fine-tuned.
//!
//! Desk architectures:
//!
//! * `desk16` — 3x16x16 input: conv(3->16, 3x3, pad 1) + relu + pool,
//!   conv(16->32, 3x3, pad 1) + relu + pool, linear(512 -> 64).
//! * `desk32` — same stack on 3x32x32 (linear 2048 -> 64).

use std::collections::BTreeSet;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Embedding width shared by all desk architectures.
pub const EMBED_DIM: usize = 64;

/// Pretext task identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    Rotation,
    Jigsaw,
    Selfie,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Rotation, TaskId::Jigsaw, TaskId::Selfie];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Rotation => "rotation",
            TaskId::Jigsaw => "jigsaw",
            TaskId::Selfie => "selfie",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "rotation" => Ok(TaskId::Rotation),
            "jigsaw" => Ok(TaskId::Jigsaw),
            "selfie" => Ok(TaskId::Selfie),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Static geometry of one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub id: String,
    pub in_ch: usize,
    pub side: usize,
    pub c1: usize,
    pub c2: usize,
    pub embed_dim: usize,
}

impl Arch {
    /// Look up an architecture id (`desk16`, `desk32`).
    pub fn by_id(id: &str) -> Result<Arch> {
        let side = match id {
            "desk16" => 16,
            "desk32" => 32,
            _ => {
                return Err(Error::UnknownArch {
                    arch: id.to_string(),
                })
            }
        };
        Ok(Arch {
            id: id.to_string(),
            in_ch: 3,
            side,
            c1: 16,
            c2: 32,
            embed_dim: EMBED_DIM,
        })
    }

    /// Flattened feature count after the two conv+pool stages.
    pub fn flat_dim(&self) -> usize {
        self.c2 * (self.side / 4) * (self.side / 4)
    }

    /// Expected input shape `[C, S, S]`.
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.in_ch, self.side, self.side]
    }
}

/// One linear layer: `w: [out, in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// One conv layer: `w: [oc, ic, kh, kw]`, `b: [oc]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// The shared encoder `theta_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub proj: LinearParams,
}

/// One pretext head `theta_pc^(i)`; output width equals the task's
/// label cardinality.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeadParams {
    pub task: TaskId,
    pub linear: LinearParams,
}

/// The downstream classifier `theta_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHeadParams {
    pub classes: usize,
    pub linear: LinearParams,
}

/// Full parameter set for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub encoder: EncoderParams,
    /// Pretext heads, kept sorted by task id.
    pub heads: Vec<TaskHeadParams>,
    pub classifier: Option<ClassifierHeadParams>,
}

/// Which parameter groups fine-tuning may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Classifier only; encoder frozen.
    Partial,
    /// Encoder and classifier.
    Full,
}

// ── initialization ───────────────────────────────────────────────────

/// Stable per-tensor stream tags so a tensor's init never depends on
/// which other heads exist.
fn init_tag(name: &str) -> u64 {
    match name {
        "encoder.conv1.w" => 0,
        "encoder.conv1.b" => 1,
        "encoder.conv2.w" => 2,
        "encoder.conv2.b" => 3,
        "encoder.proj.w" => 4,
        "encoder.proj.b" => 5,
        "head.rotation.w" => 10,
        "head.rotation.b" => 11,
        "head.jigsaw.w" => 12,
        "head.jigsaw.b" => 13,
        "head.selfie.w" => 14,
        "head.selfie.b" => 15,
        "classifier.w" => 20,
        "classifier.b" => 21,
        other => panic!("unknown parameter name {other}"),
    }
}

/// Kaiming fan-in normal: std = sqrt(2 / fan_in), biases zero.
fn kaiming(shape: Vec<usize>, fan_in: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = Rng::derive(seed, &[init_tag(name)]);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.gaussian()).collect();
    let mut t = Tensor::new(shape, data).expect("shape/data consistent");
    t.requires_grad = true;
    t
}

fn zero_bias(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n]);
    t.requires_grad = true;
    t
}

fn init_linear(out_dim: usize, in_dim: usize, seed: u64, name: &str) -> LinearParams {
    LinearParams {
        w: kaiming(vec![out_dim, in_dim], in_dim, seed, &format!("{name}.w")),
        b: zero_bias(out_dim),
    }
}

/// Fresh model: seeded Kaiming weights, zero biases. `heads` lists the
/// pretext heads to create with their label cardinalities; `classes`
/// adds a classifier head.
pub fn init_model(
    arch: &Arch,
    heads: &[(TaskId, usize)],
    classes: Option<usize>,
    seed: u64,
) -> Result<ModelParams> {
    let mut sorted: Vec<(TaskId, usize)> = heads.to_vec();
    sorted.sort_by_key(|(t, _)| *t);
    sorted.dedup_by_key(|(t, _)| *t);
    if sorted.len() != heads.len() {
        return Err(Error::invalid("duplicate task head requested"));
    }
    for &(_, width) in &sorted {
        if width == 0 {
            return Err(Error::invalid("task head with zero label cardinality"));
        }
    }
    let encoder = EncoderParams {
        conv1: Conv2dParams {
            w: kaiming(
                vec![arch.c1, arch.in_ch, 3, 3],
                arch.in_ch * 9,
                seed,
                "encoder.conv1.w",
            ),
            b: zero_bias(arch.c1),
        },
        conv2: Conv2dParams {
            w: kaiming(
                vec![arch.c2, arch.c1, 3, 3],
                arch.c1 * 9,
                seed,
                "encoder.conv2.w",
            ),
            b: zero_bias(arch.c2),
        },
        proj: init_linear(arch.embed_dim, arch.flat_dim(), seed, "encoder.proj"),
    };
    let heads = sorted
        .into_iter()
        .map(|(task, width)| TaskHeadParams {
            task,
            linear: init_linear(
                width,
                arch.embed_dim,
                seed,
                &format!("head.{}", task.name()),
            ),
        })
        .collect();
    let classifier = match classes {
        Some(k) if k >= 2 => Some(ClassifierHeadParams {
            classes: k,
            linear: init_linear(k, arch.embed_dim, seed, "classifier"),
        }),
        Some(k) => return Err(Error::invalid(format!("classifier needs >= 2 classes, got {k}"))),
        None => None,
    };
    Ok(ModelParams {
        arch: arch.clone(),
        encoder,
        heads,
        classifier,
    })
}

// ── named parameter traversal ────────────────────────────────────────

impl ModelParams {
    /// Pretext head for a task, if present.
    pub fn head(&self, task: TaskId) -> Result<&TaskHeadParams> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or(Error::MissingHead {
                task: task.name().to_string(),
            })
    }

    /// Deterministically ordered `(name, tensor)` pairs.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.conv1.w".into(), &self.encoder.conv1.w),
            ("encoder.conv1.b".into(), &self.encoder.conv1.b),
            ("encoder.conv2.w".into(), &self.encoder.conv2.w),
            ("encoder.conv2.b".into(), &self.encoder.conv2.b),
            ("encoder.proj.w".into(), &self.encoder.proj.w),
            ("encoder.proj.b".into(), &self.encoder.proj.b),
        ];
        for h in &self.heads {
            out.push((format!("head.{}.w", h.task.name()), &h.linear.w));
            out.push((format!("head.{}.b", h.task.name()), &h.linear.b));
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier.w".into(), &c.linear.w));
            out.push(("classifier.b".into(), &c.linear.b));
        }
        out
    }

    /// Mutable variant of [`ModelParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("encoder.conv1.w".into(), &mut self.encoder.conv1.w),
            ("encoder.conv1.b".into(), &mut self.encoder.conv1.b),
            ("encoder.conv2.w".into(), &mut self.encoder.conv2.w),
            ("encoder.conv2.b".into(), &mut self.encoder.conv2.b),
            ("encoder.proj.w".into(), &mut self.encoder.proj.w),
            ("encoder.proj.b".into(), &mut self.encoder.proj.b),
        ];
        for h in &mut self.heads {
            out.push((format!("head.{}.w", h.task.name()), &mut h.linear.w));
            out.push((format!("head.{}.b", h.task.name()), &mut h.linear.b));
        }
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.w".into(), &mut c.linear.w));
            out.push(("classifier.b".into(), &mut c.linear.b));
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.arch.input_shape().as_slice() {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: x.shape().to_vec(),
                reason: format!("expected {:?}", self.arch.input_shape()),
            });
        }
        Ok(())
    }
}

/// Parameter names fine-tuning may update under `mode`. Pretext heads
/// are never included.
pub fn trainable_set(params: &ModelParams, mode: FinetuneMode) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    set.insert("classifier.w".to_string());
    set.insert("classifier.b".to_string());
    if mode == FinetuneMode::Full {
        for (name, _) in params.named_tensors() {
            if name.starts_with("encoder.") {
                set.insert(name);
            }
        }
    }
    set
}

/// Parameter names pretraining updates: encoder plus the given heads.
pub fn pretrain_trainable_set(params: &ModelParams, tasks: &[TaskId]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for (name, _) in params.named_tensors() {
        if name.starts_with("encoder.") {
            set.insert(name);
        }
    }
    for t in tasks {
        set.insert(format!("head.{}.w", t.name()));
        set.insert(format!("head.{}.b", t.name()));
    }
    set
}

// ── tape binding and forward passes ──────────────────────────────────

/// Encoder parameters bound onto a tape.
#[derive(Clone, Copy)]
pub struct BoundEncoder {
    c1w: Var,
    c1b: Var,
    c2w: Var,
    c2b: Var,
    pw: Var,
    pb: Var,
}

/// A linear head bound onto a tape.
#[derive(Clone, Copy)]
pub struct BoundLinear {
    w: Var,
    b: Var,
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, name: &str, hot: Option<&BTreeSet<String>>) -> Var {
    let requires = match hot {
        Some(set) => set.contains(name),
        None => false,
    };
    tape.leaf_parts(t.shape().to_vec(), t.data().to_vec(), requires)
}

/// Bind the encoder; `hot` names the tensors that should track
/// gradients (None = frozen forward-only binding).
pub fn bind_encoder(
    tape: &mut Tape,
    enc: &EncoderParams,
    hot: Option<&BTreeSet<String>>,
) -> BoundEncoder {
    BoundEncoder {
        c1w: bind_tensor(tape, &enc.conv1.w, "encoder.conv1.w", hot),
        c1b: bind_tensor(tape, &enc.conv1.b, "encoder.conv1.b", hot),
        c2w: bind_tensor(tape, &enc.conv2.w, "encoder.conv2.w", hot),
        c2b: bind_tensor(tape, &enc.conv2.b, "encoder.conv2.b", hot),
        pw: bind_tensor(tape, &enc.proj.w, "encoder.proj.w", hot),
        pb: bind_tensor(tape, &enc.proj.b, "encoder.proj.b", hot),
    }
}

/// Bind one linear head under its parameter name prefix.
pub fn bind_linear(
    tape: &mut Tape,
    lin: &LinearParams,
    prefix: &str,
    hot: Option<&BTreeSet<String>>,
) -> BoundLinear {
    BoundLinear {
        w: bind_tensor(tape, &lin.w, &format!("{prefix}.w"), hot),
        b: bind_tensor(tape, &lin.b, &format!("{prefix}.b"), hot),
    }
}

/// Gradient of a bound encoder tensor after `backward`, keyed by name.
pub fn encoder_grads(tape: &Tape, enc: &BoundEncoder) -> Vec<(String, Option<Vec<f64>>)> {
    [
        ("encoder.conv1.w", enc.c1w),
        ("encoder.conv1.b", enc.c1b),
        ("encoder.conv2.w", enc.c2w),
        ("encoder.conv2.b", enc.c2b),
        ("encoder.proj.w", enc.pw),
        ("encoder.proj.b", enc.pb),
    ]
    .into_iter()
    .map(|(n, v)| (n.to_string(), tape.grad(v).map(|g| g.to_vec())))
    .collect()
}

/// Gradients of a bound linear head after `backward`.
pub fn linear_grads(
    tape: &Tape,
    lin: &BoundLinear,
    prefix: &str,
) -> Vec<(String, Option<Vec<f64>>)> {
    vec![
        (format!("{prefix}.w"), tape.grad(lin.w).map(|g| g.to_vec())),
        (format!("{prefix}.b"), tape.grad(lin.b).map(|g| g.to_vec())),
    ]
}

/// Linear layer on the tape: `w x + b` for 1-D `x`.
pub fn linear_on(tape: &mut Tape, lin: &BoundLinear, x: Var) -> Result<Var> {
    let in_dim = tape.shape(x).iter().product::<usize>();
    let out_dim = tape.shape(lin.w)[0];
    let col = tape.reshape(x, vec![in_dim, 1])?;
    let prod = tape.matmul(lin.w, col)?;
    let flat = tape.reshape(prod, vec![out_dim])?;
    tape.add(flat, lin.b)
}

/// Encoder forward on the tape: image `[C,S,S]` -> embedding `[64]`.
pub fn encode_on(tape: &mut Tape, enc: &BoundEncoder, x: Var) -> Result<Var> {
    let c1 = tape.conv2d(x, enc.c1w, enc.c1b, 1)?;
    let r1 = tape.relu(c1);
    let p1 = tape.avg_pool2(r1)?;
    let c2 = tape.conv2d(p1, enc.c2w, enc.c2b, 1)?;
    let r2 = tape.relu(c2);
    let p2 = tape.avg_pool2(r2)?;
    let lin = BoundLinear {
        w: enc.pw,
        b: enc.pb,
    };
    linear_on(tape, &lin, p2)
}

// ── value-level forward passes ───────────────────────────────────────

/// Embedding of an image (no gradient tracking).
pub fn encode(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.check_input(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let enc = bind_encoder(&mut tape, &params.encoder, None);
    let emb = encode_on(&mut tape, &enc, xv)?;
    Ok(tape.tensor(emb))
}

/// Pretext-head logits for a task.
pub fn forward_task(params: &ModelParams, task: TaskId, x: &Tensor) -> Result<Tensor> {
    params.check_input(x)?;
    let head = params.head(task)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let enc = bind_encoder(&mut tape, &params.encoder, None);
    let emb = encode_on(&mut tape, &enc, xv)?;
    let lin = bind_linear(&mut tape, &head.linear, "head", None);
    let logits = linear_on(&mut tape, &lin, emb)?;
    Ok(tape.tensor(logits))
}

/// Classifier logits.
pub fn forward_classifier(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.check_input(x)?;
    let clf = params.classifier.as_ref().ok_or(Error::MissingHead {
        task: "classifier".to_string(),
    })?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let enc = bind_encoder(&mut tape, &params.encoder, None);
    let emb = encode_on(&mut tape, &enc, xv)?;
    let lin = bind_linear(&mut tape, &clf.linear, "classifier", None);
    let logits = linear_on(&mut tape, &lin, emb)?;
    Ok(tape.tensor(logits))
}

/// Classifier cross-entropy built on a caller's tape (the downstream
/// loss `l_f`).
pub fn classifier_loss_on(
    tape: &mut Tape,
    enc: &BoundEncoder,
    clf: &BoundLinear,
    x: Var,
    label: usize,
) -> Result<Var> {
    let emb = encode_on(tape, enc, x)?;
    let logits = linear_on(tape, clf, emb)?;
    tape.softmax_cross_entropy(logits, label)
}
