//! Self-supervised pretext tasks: rotation, jigsaw, simplified selfie.
//!
//! Each task turns an unlabeled image into a [`TaskSample`] — a
//! transformed input plus a pretext label — whose loss is ordinary
//! cross-entropy through the shared encoder and the task's linear head.
//! Every head reads an ℓ2-normalized embedding (rescaled to unit RMS):
//! pretext objectives reward confident score gaps, and without the
//! normalization that pressure inflates the encoder's feature scale
//! until a fresh classifier head cannot train on the features at any
//! usable rate. Ranking objectives like selfie's never saturate and are
//! the worst offenders, but every task benefits from handing
//! fine-tuning a scale-controlled encoder.
//!
//! * **Rotation**: predict which of four 90-degree counter-clockwise
//!   rotations was applied. One quarter turn is transpose followed by a
//!   vertical flip.
//! * **Jigsaw**: the image is cut into a k x k grid, patches are
//!   permuted by one of |P| fixed permutations, and the model predicts
//!   which one. P is grown greedily to maximize the minimum pairwise
//!   Hamming distance, starting from the identity.
//! * **Selfie (simplified)**: several grid patches are zero-masked; the
//!   model must recognize, among the original contents of the masked
//!   patches (shuffled), which one belongs at a designated target
//!   position. Each candidate is scored by pasting it into the target
//!   slot and reading the position head's logit for that slot; the loss
//!   is cross-entropy over candidate scores. This keeps the
//!   mask-and-identify objective without an attention pooling network.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{encode_on, linear_on, BoundEncoder, BoundLinear, TaskId};
use crate::rng::Rng;

/// Task-specific payload carried by a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskAux {
    /// Rotation and jigsaw need nothing beyond the label.
    None,
    /// Selfie bookkeeping: the masked grid positions (sorted), the
    /// target position, and the shuffled candidate patch contents
    /// (each `[C * p * p]` raw pixels). `label` indexes `candidates`.
    Selfie {
        grid: usize,
        masked: Vec<usize>,
        target: usize,
        candidates: Vec<Vec<f64>>,
    },
}

/// One pretext example.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub task: TaskId,
    /// Transformed image, same shape as the source image.
    pub input: Tensor,
    /// Pretext label, `< label cardinality` of the task.
    pub label: usize,
    pub aux: TaskAux,
}

// ── rotation ─────────────────────────────────────────────────────────

/// Rotate a square `[C,S,S]` image by `quarter_turns` x 90 degrees
/// counter-clockwise (transpose, then vertical flip).
pub fn rotate90(x: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape {
            op: "rotate90",
            shape: s.to_vec(),
            reason: "expected square [C,S,S] image".into(),
        });
    }
    let (c, n) = (s[0], s[1]);
    let mut cur = x.data().to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for ci in 0..c {
            for i in 0..n {
                for j in 0..n {
                    // out[i][j] = in[j][n-1-i]
                    next[(ci * n + i) * n + j] = cur[(ci * n + j) * n + (n - 1 - i)];
                }
            }
        }
        cur = next;
    }
    Tensor::new(s.to_vec(), cur)
}

/// Draw a rotation sample: label r in {0,1,2,3}, input rotated by r.
pub fn make_rotation_sample(x: &Tensor, rng: &mut Rng) -> Result<TaskSample> {
    let r = rng.below(4);
    Ok(TaskSample {
        task: TaskId::Rotation,
        input: rotate90(x, r)?,
        label: r,
        aux: TaskAux::None,
    })
}

// ── jigsaw ───────────────────────────────────────────────────────────

/// Fixed permutation vocabulary for the jigsaw task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    pub k: usize,
    /// `perms[label][dest] = source patch index`. `perms[0]` is the
    /// identity.
    pub perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    /// Minimum pairwise Hamming distance (0 for sets of size < 2).
    pub fn min_pairwise_hamming(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.perms.len() {
            for j in i + 1..self.perms.len() {
                best = best.min(hamming(&self.perms[i], &self.perms[j]));
            }
        }
        if best == usize::MAX {
            0
        } else {
            best
        }
    }
}

/// Positions where two permutations disagree.
pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn factorial_saturating(n: usize) -> usize {
    let mut acc: usize = 1;
    for i in 2..=n {
        acc = match acc.checked_mul(i) {
            Some(v) => v,
            None => return usize::MAX,
        };
    }
    acc
}

/// All permutations of 0..n in lexicographic order (for small n).
fn enumerate_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next_permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Build `size` permutations of the k x k patch grid by greedy
/// max-min-Hamming selection starting from the identity.
///
/// For grids up to 3x3 the candidate pool is the full (lexicographic)
/// enumeration, so the result is independent of `seed`; for larger
/// grids a seeded random pool is used. Ties break toward the
/// lexicographically smallest candidate.
pub fn build_permutation_set(k: usize, size: usize, seed: u64) -> Result<PermutationSet> {
    if k == 0 {
        return Err(Error::invalid("jigsaw grid k must be >= 1"));
    }
    let n = k * k;
    let max = factorial_saturating(n);
    if size == 0 || size > max {
        return Err(Error::PermSetTooLarge {
            requested: size,
            max,
        });
    }
    let pool: Vec<Vec<usize>> = if n <= 9 {
        enumerate_permutations(n)
    } else {
        // Seeded random pool, deduplicated, identity guaranteed present.
        let mut rng = Rng::derive(seed, &[n as u64]);
        let mut pool: Vec<Vec<usize>> = vec![(0..n).collect()];
        let want = (size * 64).max(2048);
        while pool.len() < want {
            let mut p: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut p);
            if !pool.contains(&p) {
                pool.push(p);
            }
        }
        pool.sort();
        pool
    };
    let identity: Vec<usize> = (0..n).collect();
    let mut selected = vec![identity];
    while selected.len() < size {
        let mut best: Option<(&Vec<usize>, usize)> = None;
        for cand in &pool {
            if selected.contains(cand) {
                continue;
            }
            let d = selected.iter().map(|s| hamming(s, cand)).min().unwrap();
            // Strictly-greater keeps the lexicographically smallest
            // candidate on ties (pool is sorted).
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((cand, d));
            }
        }
        match best {
            Some((cand, _)) => selected.push(cand.clone()),
            None => {
                return Err(Error::PermSetTooLarge {
                    requested: size,
                    max: pool.len(),
                })
            }
        }
    }
    Ok(PermutationSet { k, perms: selected })
}

/// Rearrange the k x k patch grid: output patch `q` takes input patch
/// `perm[q]`.
pub fn apply_permutation(x: &Tensor, k: usize, perm: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape {
            op: "apply_permutation",
            shape: s.to_vec(),
            reason: "expected square [C,S,S] image".into(),
        });
    }
    if s[1] % k != 0 {
        return Err(Error::GridMismatch { side: s[1], grid: k });
    }
    if perm.len() != k * k {
        return Err(Error::invalid(format!(
            "permutation length {} != {}",
            perm.len(),
            k * k
        )));
    }
    let mut out = Tensor::zeros(s.to_vec());
    for (dest, &src) in perm.iter().enumerate() {
        copy_patch(x.data(), out.data_mut(), s, k, src, dest);
    }
    Ok(out)
}

/// Inverse permutation: `inv[perm[q]] = q`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Draw a jigsaw sample: uniform label into the permutation set.
pub fn make_jigsaw_sample(
    x: &Tensor,
    pset: &PermutationSet,
    rng: &mut Rng,
) -> Result<TaskSample> {
    let label = rng.below(pset.len());
    Ok(TaskSample {
        task: TaskId::Jigsaw,
        input: apply_permutation(x, pset.k, &pset.perms[label])?,
        label,
        aux: TaskAux::None,
    })
}

// ── selfie ───────────────────────────────────────────────────────────

/// Geometry of the simplified selfie task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfieConfig {
    /// Patches per side; the image is a `grid x grid` patch lattice.
    pub grid: usize,
    /// How many patches are masked (1 <= num_masked <= grid^2).
    pub num_masked: usize,
}

/// Patch bounds helper: copy patch `src_pos` of `src` into patch
/// `dst_pos` of `dst` (same geometry).
fn copy_patch(src: &[f64], dst: &mut [f64], shape: &[usize], k: usize, src_pos: usize, dst_pos: usize) {
    let (c, s) = (shape[0], shape[1]);
    let p = s / k;
    let (sr, sc) = (src_pos / k, src_pos % k);
    let (dr, dc) = (dst_pos / k, dst_pos % k);
    for ci in 0..c {
        for i in 0..p {
            let srow = (ci * s + sr * p + i) * s + sc * p;
            let drow = (ci * s + dr * p + i) * s + dc * p;
            dst[drow..drow + p].copy_from_slice(&src[srow..srow + p]);
        }
    }
}

/// Raw pixels of grid patch `pos` (`[C * p * p]`, channel-major).
pub fn extract_patch(x: &Tensor, grid: usize, pos: usize) -> Result<Vec<f64>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape {
            op: "extract_patch",
            shape: s.to_vec(),
            reason: "expected square [C,S,S] image".into(),
        });
    }
    if s[1] % grid != 0 {
        return Err(Error::GridMismatch {
            side: s[1],
            grid,
        });
    }
    if pos >= grid * grid {
        return Err(Error::IndexOutOfRange {
            op: "extract_patch",
            index: pos,
            len: grid * grid,
        });
    }
    let (c, side) = (s[0], s[1]);
    let p = side / grid;
    let (r, col) = (pos / grid, pos % grid);
    let mut out = Vec::with_capacity(c * p * p);
    for ci in 0..c {
        for i in 0..p {
            let row = (ci * side + r * p + i) * side + col * p;
            out.extend_from_slice(&x.data()[row..row + p]);
        }
    }
    Ok(out)
}

/// Draw a selfie sample: mask `num_masked` random patches, pick one
/// masked position as the target, and list the masked patches' original
/// contents (shuffled) as candidates. The label is the index of the
/// target's true content among the candidates.
pub fn make_selfie_sample(
    x: &Tensor,
    cfg: &SelfieConfig,
    rng: &mut Rng,
) -> Result<TaskSample> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape {
            op: "make_selfie_sample",
            shape: s.to_vec(),
            reason: "expected square [C,S,S] image".into(),
        });
    }
    let side = s[1];
    if side % cfg.grid != 0 {
        return Err(Error::GridMismatch {
            side,
            grid: cfg.grid,
        });
    }
    let cells = cfg.grid * cfg.grid;
    if cfg.num_masked == 0 || cfg.num_masked > cells {
        return Err(Error::invalid(format!(
            "num_masked {} outside 1..={cells}",
            cfg.num_masked
        )));
    }
    // Masked positions: partial Fisher-Yates, then sorted for stable aux.
    let mut all: Vec<usize> = (0..cells).collect();
    rng.shuffle(&mut all);
    let mut masked: Vec<usize> = all[..cfg.num_masked].to_vec();
    masked.sort_unstable();
    let target = masked[rng.below(masked.len())];

    // Candidates: the target's true patch plus the other masked
    // patches' contents, shuffled; track where the true one lands.
    let mut order: Vec<usize> = std::iter::once(target)
        .chain(masked.iter().copied().filter(|&q| q != target))
        .collect();
    rng.shuffle(&mut order);
    let label = order.iter().position(|&q| q == target).expect("target in order");
    let mut candidates = Vec::with_capacity(order.len());
    for &q in &order {
        candidates.push(extract_patch(x, cfg.grid, q)?);
    }

    // Zero every masked patch in the input.
    let mut input = x.clone();
    let p = side / cfg.grid;
    for &q in &masked {
        let (r, c0) = (q / cfg.grid, q % cfg.grid);
        for ci in 0..s[0] {
            for i in 0..p {
                let row = (ci * side + r * p + i) * side + c0 * p;
                input.data_mut()[row..row + p].fill(0.0);
            }
        }
    }
    Ok(TaskSample {
        task: TaskId::Selfie,
        input,
        label,
        aux: TaskAux::Selfie {
            grid: cfg.grid,
            masked,
            target,
            candidates,
        },
    })
}

// ── task loss ────────────────────────────────────────────────────────

/// Pretext loss built on the caller's tape, differentiable w.r.t. the
/// bound encoder/head parameters and `input`.
///
/// Rotation and jigsaw are plain cross-entropy of the head applied to
/// the normalized embedding of the transformed input. Selfie scores
/// each candidate by pasting it into the target slot and reading the
/// position head's logit for the target position, then takes
/// cross-entropy over those scores.
pub fn task_loss_on(
    tape: &mut Tape,
    enc: &BoundEncoder,
    head: &BoundLinear,
    sample: &TaskSample,
    input: Var,
) -> Result<Var> {
    match (&sample.task, &sample.aux) {
        (TaskId::Selfie, TaskAux::Selfie { candidates, .. }) => {
            if sample.label >= candidates.len() {
                return Err(Error::InvalidLabel {
                    label: sample.label,
                    cardinality: candidates.len(),
                });
            }
            let scores = selfie_scores_on(tape, enc, head, sample, input)?;
            tape.softmax_cross_entropy(scores, sample.label)
        }
        (TaskId::Selfie, _) => Err(Error::invalid("selfie sample missing aux payload")),
        (_, _) => {
            let emb = pretext_embedding_on(tape, enc, input)?;
            let logits = linear_on(tape, head, emb)?;
            tape.softmax_cross_entropy(logits, sample.label)
        }
    }
}

/// Encoder embedding as pretext heads consume it: ℓ2-normalized over
/// the flat feature vector, then rescaled to unit RMS so head inits
/// tuned for O(1) inputs behave. Cross-entropy rewards confident score
/// gaps, and with a linear head that reward has a radial shortcut —
/// grow the features. Normalizing projects the radial component out of
/// the encoder gradient entirely; whatever scale a task wants lives in
/// its head, which is discarded after pretraining. The classifier path
/// reads raw features: fine-tuning owns that geometry.
fn pretext_embedding_on(tape: &mut Tape, enc: &BoundEncoder, input: Var) -> Result<Var> {
    let emb = encode_on(tape, enc, input)?;
    let unit = tape.l2_normalize(emb)?;
    let dim: usize = tape.shape(unit).iter().product();
    Ok(tape.scale(unit, (dim as f64).sqrt()))
}

/// Pretext prediction for accuracy bookkeeping: argmax over the task's
/// label space for this sample (candidate scores for selfie, head
/// logits otherwise).
pub fn task_predict(
    params: &crate::model::ModelParams,
    sample: &TaskSample,
) -> Result<usize> {
    let head = params.head(sample.task)?;
    let mut tape = Tape::new();
    let xv = tape.constant(&sample.input);
    let enc = crate::model::bind_encoder(&mut tape, &params.encoder, None);
    let lin = crate::model::bind_linear(&mut tape, &head.linear, "head", None);
    match (&sample.task, &sample.aux) {
        (TaskId::Selfie, TaskAux::Selfie { .. }) => {
            let scores = selfie_scores_on(&mut tape, &enc, &lin, sample, xv)?;
            Ok(argmax(tape.value(scores)))
        }
        _ => {
            let emb = pretext_embedding_on(&mut tape, &enc, xv)?;
            let logits = linear_on(&mut tape, &lin, emb)?;
            Ok(argmax(tape.value(logits)))
        }
    }
}

/// Candidate-score vector for a selfie sample (shared by loss and
/// prediction paths): each candidate is pasted into the target slot and
/// scored by the position head's logit for that slot, over the
/// normalized embedding like every pretext head. Selfie is the task
/// that makes the normalization load-bearing: its ranking loss never
/// saturates, so unnormalized scores inflate encoder features an order
/// of magnitude past what a fresh classifier head can absorb.
fn selfie_scores_on(
    tape: &mut Tape,
    enc: &BoundEncoder,
    head: &BoundLinear,
    sample: &TaskSample,
    input: Var,
) -> Result<Var> {
    let TaskAux::Selfie { grid, target, candidates, .. } = &sample.aux else {
        return Err(Error::invalid("selfie sample missing aux payload"));
    };
    let shape = tape.shape(input).to_vec();
    let side = shape[1];
    let p = side / grid;
    let (tr, tc) = (target / grid, target % grid);
    let mut mask = vec![1.0; shape.iter().product()];
    for ci in 0..shape[0] {
        for i in 0..p {
            let row = (ci * side + tr * p + i) * side + tc * p;
            mask[row..row + p].fill(0.0);
        }
    }
    let mask_t = Tensor::new(shape.clone(), mask)?;
    let mask_v = tape.constant(&mask_t);
    let mut scores: Option<Var> = None;
    for cand in candidates {
        let mut patch = vec![0.0; shape.iter().product()];
        let mut it = cand.iter();
        for ci in 0..shape[0] {
            for i in 0..p {
                let row = (ci * side + tr * p + i) * side + tc * p;
                for v in patch[row..row + p].iter_mut() {
                    *v = *it
                        .next()
                        .ok_or_else(|| Error::invalid("selfie candidate patch too short"))?;
                }
            }
        }
        let patch_t = Tensor::new(shape.clone(), patch)?;
        let patch_v = tape.constant(&patch_t);
        let holed = tape.mul(input, mask_v)?;
        let pasted = tape.add(holed, patch_v)?;
        let emb = pretext_embedding_on(tape, enc, pasted)?;
        let logits = linear_on(tape, head, emb)?;
        if tape.shape(logits)[0] != grid * grid {
            return Err(Error::InvalidShape {
                op: "selfie_scores",
                shape: tape.shape(logits).to_vec(),
                reason: format!("selfie head width must be {}", grid * grid),
            });
        }
        let score = tape.select(logits, *target)?;
        let score1 = tape.reshape(score, vec![1])?;
        scores = Some(match scores {
            Some(acc) => tape.concat(acc, score1)?,
            None => score1,
        });
    }
    scores.ok_or_else(|| Error::invalid("selfie sample with no candidates"))
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

// ── task specification (config-level description of one task) ───────

/// Everything needed to draw samples for one pretext task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    Rotation,
    Jigsaw(PermutationSet),
    Selfie(SelfieConfig),
}

impl TaskSpec {
    pub fn id(&self) -> TaskId {
        match self {
            TaskSpec::Rotation => TaskId::Rotation,
            TaskSpec::Jigsaw(_) => TaskId::Jigsaw,
            TaskSpec::Selfie(_) => TaskId::Selfie,
        }
    }

    /// Width of the task head (= label cardinality; for selfie, the
    /// number of maskable positions).
    pub fn head_width(&self) -> usize {
        match self {
            TaskSpec::Rotation => 4,
            TaskSpec::Jigsaw(pset) => pset.len(),
            TaskSpec::Selfie(cfg) => cfg.grid * cfg.grid,
        }
    }

    /// Draw one sample for this task.
    pub fn make_sample(&self, x: &Tensor, rng: &mut Rng) -> Result<TaskSample> {
        match self {
            TaskSpec::Rotation => make_rotation_sample(x, rng),
            TaskSpec::Jigsaw(pset) => make_jigsaw_sample(x, pset, rng),
            TaskSpec::Selfie(cfg) => make_selfie_sample(x, cfg, rng),
        }
    }

    /// Desk default for an architecture: jigsaw 2x2 with all 24
    /// permutations on 16px images, 4x4 with 30 on 32px; selfie 4x4
    /// grid with 2 masked patches.
    pub fn default_for(task: TaskId, side: usize, seed: u64) -> Result<TaskSpec> {
        Ok(match task {
            TaskId::Rotation => TaskSpec::Rotation,
            TaskId::Jigsaw => {
                let (k, size) = if side <= 16 { (2, 24) } else { (4, 30) };
                TaskSpec::Jigsaw(build_permutation_set(k, size, seed)?)
            }
            TaskId::Selfie => TaskSpec::Selfie(SelfieConfig {
                grid: 4,
                num_masked: 2,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_encoder, bind_linear, init_model, Arch};

    fn image(side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..3 * side * side).map(|_| rng.uniform()).collect();
        Tensor::new(vec![3, side, side], data).unwrap()
    }

    #[test]
    fn rotation_2x2_known_example() {
        // [[a,b],[c,d]] rotated one quarter turn CCW -> [[b,d],[a,c]].
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate90(&x, 1).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn four_rotations_compose_to_identity() {
        let x = image(8, 3);
        let r = rotate90(&x, 4).unwrap();
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn rotation_label_is_recoverable_by_brute_force() {
        let x = image(8, 5);
        for trial in 0..32 {
            let mut rng = Rng::derive(11, &[trial]);
            let s = make_rotation_sample(&x, &mut rng).unwrap();
            let recovered: Vec<usize> = (0..4)
                .filter(|&r| rotate90(&x, r).unwrap().data() == s.input.data())
                .collect();
            assert_eq!(recovered, vec![s.label]);
        }
    }

    #[test]
    fn permutation_set_starts_with_identity_and_spreads() {
        let pset = build_permutation_set(2, 4, 9).unwrap();
        assert_eq!(pset.perms[0], vec![0, 1, 2, 3]);
        assert_eq!(pset.len(), 4);
        // Brute-force greedy oracle over all 24 permutations of 4
        // elements, same tie-break (lexicographically smallest).
        let pool = enumerate_permutations(4);
        let mut oracle = vec![vec![0, 1, 2, 3]];
        while oracle.len() < 4 {
            let mut best: Option<(&Vec<usize>, usize)> = None;
            for cand in &pool {
                if oracle.contains(cand) {
                    continue;
                }
                let d = oracle.iter().map(|s| hamming(s, cand)).min().unwrap();
                if best.map_or(true, |(_, bd)| d > bd) {
                    best = Some((cand, d));
                }
            }
            oracle.push(best.unwrap().0.clone());
        }
        assert_eq!(pset.perms, oracle);
        let oracle_min = PermutationSet { k: 2, perms: oracle }.min_pairwise_hamming();
        assert_eq!(pset.min_pairwise_hamming(), oracle_min);
        assert_eq!(oracle_min, 4); // 4-element perms can disagree everywhere
    }

    #[test]
    fn distinct_permutations_differ_in_at_least_two_slots() {
        let pset = build_permutation_set(2, 24, 1).unwrap();
        assert_eq!(pset.len(), 24);
        assert!(pset.min_pairwise_hamming() >= 2);
    }

    #[test]
    fn oversized_permutation_request_is_an_error() {
        assert!(matches!(
            build_permutation_set(2, 25, 1),
            Err(Error::PermSetTooLarge { requested: 25, max: 24 })
        ));
    }

    #[test]
    fn large_grid_pool_is_seeded_and_deterministic() {
        let a = build_permutation_set(4, 8, 3).unwrap();
        let b = build_permutation_set(4, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.perms[0], (0..16).collect::<Vec<_>>());
        assert!(a.min_pairwise_hamming() >= 2);
    }

    #[test]
    fn permuting_back_restores_the_image() {
        let x = image(8, 7);
        let pset = build_permutation_set(2, 24, 1).unwrap();
        for perm in &pset.perms {
            let scrambled = apply_permutation(&x, 2, perm).unwrap();
            let restored =
                apply_permutation(&scrambled, 2, &invert_permutation(perm)).unwrap();
            assert_eq!(restored.data(), x.data());
        }
    }

    #[test]
    fn jigsaw_label_is_recoverable_by_brute_force() {
        let x = image(8, 13);
        let pset = build_permutation_set(2, 24, 1).unwrap();
        for trial in 0..16 {
            let mut rng = Rng::derive(17, &[trial]);
            let s = make_jigsaw_sample(&x, &pset, &mut rng).unwrap();
            let recovered: Vec<usize> = (0..pset.len())
                .filter(|&i| {
                    apply_permutation(&x, 2, &pset.perms[i]).unwrap().data()
                        == s.input.data()
                })
                .collect();
            assert_eq!(recovered, vec![s.label]);
        }
    }

    #[test]
    fn indivisible_grid_is_an_error() {
        let x = image(9, 1); // 9 not divisible by 2
        assert!(matches!(
            apply_permutation(&x, 2, &[0, 1, 2, 3]),
            Err(Error::GridMismatch { side: 9, grid: 2 })
        ));
        let cfg = SelfieConfig {
            grid: 5,
            num_masked: 1,
        };
        let x16 = image(16, 1);
        let mut rng = Rng::new(1);
        assert!(matches!(
            make_selfie_sample(&x16, &cfg, &mut rng),
            Err(Error::GridMismatch { side: 16, grid: 5 })
        ));
    }

    #[test]
    fn selfie_masks_are_zero_and_rest_is_untouched() {
        let x = image(16, 21);
        let cfg = SelfieConfig {
            grid: 4,
            num_masked: 3,
        };
        let mut rng = Rng::new(2);
        let s = make_selfie_sample(&x, &cfg, &mut rng).unwrap();
        let TaskAux::Selfie { masked, target, candidates, .. } = &s.aux else {
            panic!("selfie aux missing");
        };
        assert_eq!(masked.len(), 3);
        assert_eq!(candidates.len(), 3);
        assert!(masked.contains(target));
        // Masked patches zero, everything else equal to x.
        for pos in 0..16 {
            let patch = extract_patch(&s.input, 4, pos).unwrap();
            let orig = extract_patch(&x, 4, pos).unwrap();
            if masked.contains(&pos) {
                assert!(patch.iter().all(|v| *v == 0.0), "patch {pos} not zeroed");
            } else {
                assert_eq!(patch, orig, "patch {pos} modified");
            }
        }
        // Candidate at the label index is the target's original patch.
        assert_eq!(candidates[s.label], extract_patch(&x, 4, *target).unwrap());
    }

    #[test]
    fn selfie_single_mask_is_degenerate() {
        let x = image(16, 23);
        let cfg = SelfieConfig {
            grid: 4,
            num_masked: 1,
        };
        let mut rng = Rng::new(3);
        let s = make_selfie_sample(&x, &cfg, &mut rng).unwrap();
        let TaskAux::Selfie { candidates, .. } = &s.aux else {
            panic!()
        };
        assert_eq!(candidates.len(), 1);
        assert_eq!(s.label, 0);
    }

    #[test]
    fn selfie_label_is_recoverable_from_aux() {
        let x = image(8, 29);
        let cfg = SelfieConfig {
            grid: 2,
            num_masked: 3,
        };
        for trial in 0..16 {
            let mut rng = Rng::derive(31, &[trial]);
            let s = make_selfie_sample(&x, &cfg, &mut rng).unwrap();
            let TaskAux::Selfie { target, candidates, .. } = &s.aux else {
                panic!()
            };
            let truth = extract_patch(&x, 2, *target).unwrap();
            let recovered: Vec<usize> = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| **c == truth)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(recovered, vec![s.label]);
        }
    }

    #[test]
    fn pretext_labels_are_uniform_within_3_sigma() {
        let x = image(16, 37);
        let arch_side = 16;
        let specs: Vec<(TaskSpec, usize)> = vec![
            (TaskSpec::Rotation, 4),
            (
                TaskSpec::default_for(TaskId::Jigsaw, arch_side, 1).unwrap(),
                24,
            ),
            (
                TaskSpec::Selfie(SelfieConfig {
                    grid: 4,
                    num_masked: 3,
                }),
                3,
            ),
        ];
        let n = 10_000;
        for (spec, card) in specs {
            let mut counts = vec![0usize; card];
            for i in 0..n {
                let mut rng = Rng::derive(41, &[spec.id() as u64, i as u64]);
                let s = spec.make_sample(&x, &mut rng).unwrap();
                counts[s.label] += 1;
            }
            let p = 1.0 / card as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            for (lbl, &c) in counts.iter().enumerate() {
                let dev = (c as f64 - n as f64 * p).abs();
                assert!(
                    dev <= 3.0 * sigma,
                    "{}: label {lbl} count {c} deviates {dev:.1} > 3 sigma {sigma:.1}",
                    spec.id()
                );
            }
        }
    }

    #[test]
    fn task_losses_are_finite_and_attackable() {
        let arch = Arch::by_id("desk16").unwrap();
        let specs = vec![
            TaskSpec::Rotation,
            TaskSpec::default_for(TaskId::Jigsaw, 16, 1).unwrap(),
            TaskSpec::Selfie(SelfieConfig {
                grid: 4,
                num_masked: 2,
            }),
        ];
        let heads: Vec<(TaskId, usize)> =
            specs.iter().map(|s| (s.id(), s.head_width())).collect();
        let params = init_model(&arch, &heads, None, 3).unwrap();
        let x = image(16, 43);
        for spec in &specs {
            let mut rng = Rng::new(5);
            let sample = spec.make_sample(&x, &mut rng).unwrap();
            let head = params.head(spec.id()).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf_parts(
                sample.input.shape().to_vec(),
                sample.input.data().to_vec(),
                true,
            );
            let enc = bind_encoder(&mut tape, &params.encoder, None);
            let lin = bind_linear(&mut tape, &head.linear, "head", None);
            let loss = task_loss_on(&mut tape, &enc, &lin, &sample, xv).unwrap();
            assert!(tape.scalar(loss).unwrap().is_finite());
            tape.backward(loss).unwrap();
            let g = tape.grad(xv).expect("input gradient");
            assert!(g.iter().any(|v| *v != 0.0), "{}: zero input grad", spec.id());
        }
    }

    #[test]
    fn wrong_label_cardinality_is_an_error() {
        let arch = Arch::by_id("desk16").unwrap();
        let params = init_model(&arch, &[(TaskId::Rotation, 4)], None, 3).unwrap();
        let x = image(16, 47);
        let sample = TaskSample {
            task: TaskId::Rotation,
            input: x.clone(),
            label: 7, // out of range for the 4-way head
            aux: TaskAux::None,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(&sample.input);
        let enc = bind_encoder(&mut tape, &params.encoder, None);
        let head = params.head(TaskId::Rotation).unwrap();
        let lin = bind_linear(&mut tape, &head.linear, "head", None);
        assert!(matches!(
            task_loss_on(&mut tape, &enc, &lin, &sample, xv),
            Err(Error::InvalidLabel { label: 7, cardinality: 4 })
        ));
    }

    #[test]
    fn task_predict_matches_manual_argmax_for_rotation() {
        let arch = Arch::by_id("desk16").unwrap();
        let params = init_model(&arch, &[(TaskId::Rotation, 4)], None, 3).unwrap();
        let x = image(16, 53);
        let mut rng = Rng::new(6);
        let s = make_rotation_sample(&x, &mut rng).unwrap();
        let logits = crate::model::forward_task(&params, TaskId::Rotation, &s.input).unwrap();
        let manual = argmax(logits.data());
        assert_eq!(task_predict(&params, &s).unwrap(), manual);
    }
}
