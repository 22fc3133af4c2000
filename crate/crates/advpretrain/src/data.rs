//! Synthetic datasets and binary artifact formats.
//!
//! The generator draws four parametric shape families — bars, discs,
//! crosses, checkers — over a noisy ramp background, quantized to the
//! u8/255 pixel grid so files round-trip exactly. Every persisted
//! artifact (dataset, checkpoint, metrics, success bitmaps) has a
//! fixed-endianness format documented in `FORMATS.md`:
//!
//! * dataset `ASSP`: header + u8 pixels (0–255) + u8 labels
//! * checkpoint `ASCK`: named f32 tensors + provenance + SHA-256 digest
//! * metrics: JSON lines, one record per line, flushed per write
//! * bitmap `ASBM`: u64 bit count + LSB-first packed bytes

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{init_model, Arch, ModelParams, TaskId};
use crate::rng::Rng;

pub const DATASET_MAGIC: [u8; 4] = *b"ASSP";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASCK";
pub const BITMAP_MAGIC: [u8; 4] = *b"ASBM";
pub const DATASET_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

/// Labeled (or unlabeled) image collection; pixels live on the u8/255
/// grid in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<u8>>,
    pub classes: u16,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-class example counts (empty when unlabeled).
    pub fn class_histogram(&self) -> Vec<usize> {
        let Some(labels) = &self.labels else {
            return Vec::new();
        };
        let mut h = vec![0usize; self.classes as usize];
        for &l in labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Subset by index order (used by splits and probes).
    pub fn take(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            provenance: format!("{}#subset", self.provenance),
        }
    }
}

// ── synthetic generator ──────────────────────────────────────────────

const SHAPE_FAMILIES: usize = 4; // bars, discs, crosses, checkers

// Every image carries two label cues of very different scales:
//
//  1. A shape cue: one family drawn at contrast ≈ 0.5, far outside any
//     pixel budget used for robustness work on this corpus. It is
//     deliberately imperfect — with probability `SHAPE_MISMATCH` the drawn
//     family is that of a *different* class than the label.
//  2. A watermark cue: a fixed per-class sign pattern of amplitude
//     `WATERMARK_AMP` added to every pixel. It is block-structured (a
//     `WATERMARK_GRID`² grid of constant-sign cells per channel) so that
//     weight-shared convolution/pooling stacks read it easily — a
//     per-pixel i.i.d. pattern would be nearly invisible to them. It is
//     perfectly label-correlated and shared by all datasets of a given
//     image size (it depends on the class and the size only, never on
//     the dataset seed), so train and test sets agree on it.
//
// A learner free to choose leans on the watermark — it never disagrees
// with the label — but the watermark sits inside the usual perturbation
// budget, so whatever reads it can be rewritten by an attacker. Models
// forced off the watermark fall back on the shapes, giving up roughly the
// mismatch rate in clean accuracy and keeping the rest under attack. This
// is what makes the corpus a faithful miniature of natural-image
// robustness: accuracy and robustness come from different features.
const SHAPE_MISMATCH: f64 = 0.10;
// 7/255 sits just inside the 8/255 budget. The margin matters twice
// over: an attacker can still overpower the watermark (8 > 7), and the
// amplitude sets how fast gradient descent trades pretrained shape
// features for the watermark during standard fine-tuning — the latch
// rate scales roughly with the squared amplitude, and weaker marks
// leave fine-tuned models stuck halfway between the two cues.
const WATERMARK_AMP: f64 = 7.0 / 255.0;
const WATERMARK_GRID: usize = 4; // constant-sign cells per image side
const WATERMARK_TAG: u64 = 0x57_4d; // "WM"

/// The fixed watermark field for one class: `[3,size,size]` signs scaled
/// to `WATERMARK_AMP`, constant over each of the `3·WATERMARK_GRID²`
/// cells. Identical for every dataset of this image size.
fn watermark(class: usize, size: usize) -> Vec<f64> {
    let cell = size / WATERMARK_GRID; // size is a validated multiple of 4
    let mut rng = Rng::derive(WATERMARK_TAG, &[class as u64, size as u64]);
    let signs: Vec<f64> = (0..3 * WATERMARK_GRID * WATERMARK_GRID)
        .map(|_| {
            if rng.uniform() < 0.5 {
                -WATERMARK_AMP
            } else {
                WATERMARK_AMP
            }
        })
        .collect();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for i in 0..size {
            for j in 0..size {
                let b = (c * WATERMARK_GRID + i / cell) * WATERMARK_GRID + j / cell;
                out[(c * size + i) * size + j] = signs[b];
            }
        }
    }
    out
}

/// Deterministic parametric shape dataset: class i draws family i (with a
/// small mismatch rate) plus the class watermark, with randomized position,
/// scale, intensity, stripe phase, and a ramped, noisy background. Labels
/// are assigned round-robin, so any prefix is (near-)balanced and
/// `classes | n` gives an exactly balanced set.
pub fn generate_synthetic_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    size: usize,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be > 0"));
    }
    if !(2..=SHAPE_FAMILIES).contains(&classes) {
        return Err(Error::invalid(format!(
            "classes must be within 2..={SHAPE_FAMILIES} (got {classes})"
        )));
    }
    if size % 4 != 0 || size == 0 {
        return Err(Error::invalid(format!(
            "image size must be a positive multiple of 4 (got {size})"
        )));
    }
    let marks: Vec<Vec<f64>> = (0..classes).map(|c| watermark(c, size)).collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut rng = Rng::derive(seed, &[i as u64]);
        let family = if rng.uniform() < SHAPE_MISMATCH {
            (label + 1 + rng.below(classes - 1)) % classes
        } else {
            label
        };
        images.push(draw_shape_image(family, &marks[label], size, &mut rng));
        labels.push(label as u8);
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        classes: classes as u16,
        provenance: format!("synthetic:seed={seed},n={n},classes={classes},size={size}"),
    })
}

/// One [3,size,size] image — shape family `class` plus the watermark field
/// `wm` — quantized to the u8 grid.
fn draw_shape_image(class: usize, wm: &[f64], size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    // Background: base level plus a fixed-sign vertical ramp (the
    // orientation cue that makes rotation prediction well-posed) and a
    // small horizontal ramp, plus per-pixel noise.
    let base = 0.08 + 0.10 * rng.uniform();
    let ramp_v = 0.12 + 0.10 * rng.uniform();
    let ramp_h = -0.04 + 0.08 * rng.uniform();
    let noise_amp = 0.02 + 0.02 * rng.uniform();
    let fg = 0.70 + 0.20 * rng.uniform();
    let tint = [
        0.85 + 0.15 * rng.uniform(),
        0.85 + 0.15 * rng.uniform(),
        0.85 + 0.15 * rng.uniform(),
    ];
    // Geometry: jittered center, randomized scale.
    let cy = s / 2.0 + (rng.uniform() - 0.5) * s / 4.0;
    let cx = s / 2.0 + (rng.uniform() - 0.5) * s / 4.0;
    let r = s * (0.22 + 0.10 * rng.uniform());
    let thickness = (s / 8.0 * (0.7 + 0.6 * rng.uniform())).round().max(1.0);
    let phase = rng.below(2 * thickness as usize) as f64;
    let cell = (s / 8.0 * (0.8 + 0.4 * rng.uniform())).round().max(2.0);
    let (phase_i, phase_j) = (rng.below(cell as usize * 2), rng.below(cell as usize * 2));
    let arm = (s / 10.0).round().max(1.0);

    let mut mono = vec![0.0f64; size * size];
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let inside = match class {
                // Horizontal bars within the scale box.
                0 => {
                    (y - cy).abs() <= r
                        && (x - cx).abs() <= r
                        && ((i as f64 + phase) / thickness) as usize % 2 == 0
                }
                // Filled disc.
                1 => (y - cy).powi(2) + (x - cx).powi(2) <= (0.85 * r).powi(2),
                // Plus sign: two crossing arms.
                2 => {
                    ((y - cy).abs() <= arm && (x - cx).abs() <= r)
                        || ((x - cx).abs() <= arm && (y - cy).abs() <= r)
                }
                // Checkerboard within the scale box.
                _ => {
                    (y - cy).abs() <= r
                        && (x - cx).abs() <= r
                        && ((i + phase_i) / cell as usize + (j + phase_j) / cell as usize) % 2
                            == 0
                }
            };
            let bg = base + ramp_v * (i as f64 / (s - 1.0)) + ramp_h * (j as f64 / (s - 1.0));
            let noise = noise_amp * (rng.uniform() - 0.5);
            mono[i * size + j] = if inside { fg + noise } else { bg + noise };
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for (c, t) in tint.into_iter().enumerate() {
        let plane = &wm[c * size * size..(c + 1) * size * size];
        data.extend(mono.iter().zip(plane).map(|(v, w)| quantize(v * t + w)));
    }
    Tensor::new(vec![3, size, size], data).expect("generator shape is consistent")
}

/// Snap to the u8/255 grid (the representable set of the file format).
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic shuffled split into `ratio : 1-ratio` train/val parts.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let n = ds.len();
    let n_train = (n as f64 * ratio).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split of {n} examples at ratio {ratio} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed, &[0x5351]); // "SQ" split stream tag
    rng.shuffle(&mut idx);
    Ok((ds.take(&idx[..n_train]), ds.take(&idx[n_train..])))
}

// ── little-endian readers/writers ────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            Err(Error::Truncated {
                path: self.path.to_string(),
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            })
        } else {
            Ok(())
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt {
            path: self.path.to_string(),
            detail: "string field is not valid UTF-8".into(),
        })
    }

    fn expect_magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let raw = self.bytes(4)?;
        let found: [u8; 4] = raw.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_string(),
                detail: format!(
                    "{} trailing bytes after the payload",
                    self.buf.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u16).to_le_bytes());
    out.extend(s.as_bytes());
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

// ── dataset format (ASSP) ────────────────────────────────────────────

const FLAG_LABELS: u16 = 1;

/// Serialize: magic, version u16, N/C/H/W u32, flags u16 (bit 0 =
/// labels present, bits 8–15 = class count), u8 pixels, u8 labels.
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let shape = ds.image_shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(24 + ds.len() * c * h * w);
    out.extend(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    out.extend((ds.len() as u32).to_le_bytes());
    out.extend((c as u32).to_le_bytes());
    out.extend((h as u32).to_le_bytes());
    out.extend((w as u32).to_le_bytes());
    let mut flags: u16 = 0;
    if ds.labels.is_some() {
        flags |= FLAG_LABELS;
        flags |= (ds.classes.min(255)) << 8;
    }
    out.extend(flags.to_le_bytes());
    for img in &ds.images {
        if img.shape() != shape.as_slice() {
            return Err(Error::invalid("dataset images must share one shape"));
        }
        out.extend(
            img.data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    if let Some(labels) = &ds.labels {
        out.extend(labels.iter().copied());
    }
    write_file(path, &out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let path_s = path.display().to_string();
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: &path_s,
    };
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path_s,
            found: version,
        });
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let flags = r.u16()?;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Corrupt {
            path: path_s,
            detail: format!("degenerate dimensions N={n} C={c} H={h} W={w}"),
        });
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let classes = (flags >> 8) & 0xff;
    // Header fully determines the file size; report the total on
    // truncation rather than the first short read.
    let expected_len =
        24u64 + (n as u64) * (c as u64) * (h as u64) * (w as u64) + if has_labels { n as u64 } else { 0 };
    if (buf.len() as u64) < expected_len {
        return Err(Error::Truncated {
            path: path_s,
            expected: expected_len,
            found: buf.len() as u64,
        });
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = r.bytes(c * h * w)?;
        let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![c, h, w], data)?);
    }
    let labels = if has_labels {
        let raw = r.bytes(n)?.to_vec();
        if let Some(&bad) = raw.iter().find(|&&l| u16::from(l) >= classes) {
            return Err(Error::Corrupt {
                path: path_s,
                detail: format!("label {bad} outside class count {classes}"),
            });
        }
        Some(raw)
    } else {
        None
    };
    r.finish()?;
    Ok(Dataset {
        images,
        labels,
        classes,
        provenance: path_s,
    })
}

// ── checkpoint format (ASCK) ─────────────────────────────────────────

/// Training provenance carried inside a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: String,
    pub epoch: u32,
    pub seed: u64,
}

/// Named f32 tensors plus provenance; the on-disk form appends a
/// SHA-256 digest over everything before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_id: String,
    pub provenance: Provenance,
    /// (name, shape, values), in model iteration order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Names present in the model but absent from a loaded checkpoint (left
/// at their prior values), and vice versa.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub missing_in_checkpoint: Vec<String>,
    pub unused_in_checkpoint: Vec<String>,
}

impl Checkpoint {
    /// Snapshot a model's parameters at 32-bit precision.
    pub fn from_model(params: &ModelParams, provenance: Provenance) -> Checkpoint {
        Checkpoint {
            arch_id: params.arch.id.to_string(),
            provenance,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| {
                    (
                        name,
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| v as f32).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Overwrite matching named tensors in `params`; returns which
    /// names were left untouched on either side. Architecture ids must
    /// match exactly.
    pub fn load_into(&self, params: &mut ModelParams) -> Result<LoadReport> {
        if params.arch.id != self.arch_id {
            return Err(Error::ArchMismatch {
                expected: params.arch.id.to_string(),
                found: self.arch_id.clone(),
            });
        }
        let mut report = LoadReport::default();
        let mut used = vec![false; self.tensors.len()];
        for (name, tensor) in params.named_tensors_mut() {
            match self.tensors.iter().position(|(n, _, _)| *n == name) {
                Some(i) => {
                    let (_, shape, values) = &self.tensors[i];
                    if shape != tensor.shape() {
                        return Err(Error::invalid(format!(
                            "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                            tensor.shape()
                        )));
                    }
                    tensor
                        .data_mut()
                        .iter_mut()
                        .zip(values)
                        .for_each(|(d, &v)| *d = v as f64);
                    used[i] = true;
                }
                None => report.missing_in_checkpoint.push(name),
            }
        }
        for (i, u) in used.iter().enumerate() {
            if !u {
                report.unused_in_checkpoint.push(self.tensors[i].0.clone());
            }
        }
        Ok(report)
    }

    /// Rebuild a standalone model from the checkpoint alone: the
    /// architecture, head set and classifier width are recovered from
    /// the stored tensor names/shapes, then every tensor is loaded.
    /// Fails if any model parameter is missing from the checkpoint.
    pub fn to_model(&self) -> Result<ModelParams> {
        let arch = Arch::by_id(&self.arch_id)?;
        let mut heads = Vec::new();
        let mut classes = None;
        for (name, shape, _) in &self.tensors {
            let two_dim = |what: &str| {
                if shape.len() == 2 {
                    Ok(shape[0])
                } else {
                    Err(Error::invalid(format!(
                        "checkpoint tensor {what} must be 2-d, got shape {shape:?}"
                    )))
                }
            };
            if let Some(task) = name.strip_prefix("head.").and_then(|r| r.strip_suffix(".w")) {
                heads.push((TaskId::parse(task)?, two_dim(name)?));
            } else if name == "classifier.w" {
                classes = Some(two_dim(name)?);
            }
        }
        let mut params = init_model(&arch, &heads, classes, self.provenance.seed)?;
        let report = self.load_into(&mut params)?;
        if !report.missing_in_checkpoint.is_empty() {
            return Err(Error::invalid(format!(
                "checkpoint does not determine the full model; missing tensors: {}",
                report.missing_in_checkpoint.join(", ")
            )));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    push_string(&mut out, &ckpt.arch_id);
    push_string(&mut out, &ckpt.provenance.scenario);
    out.extend(ckpt.provenance.epoch.to_le_bytes());
    out.extend(ckpt.provenance.seed.to_le_bytes());
    out.extend((ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in &ckpt.tensors {
        push_string(&mut out, name);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        out.extend((values.len() as u32).to_le_bytes());
        for v in values {
            out.extend(v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    write_file(path.as_ref(), &out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let path_s = path.display().to_string();
    if buf.len() < 32 {
        return Err(Error::Truncated {
            path: path_s,
            expected: 32,
            found: buf.len() as u64,
        });
    }
    let (payload, stored) = buf.split_at(buf.len() - 32);
    let computed = Sha256::digest(payload);
    if computed.as_slice() != stored {
        return Err(Error::DigestMismatch {
            path: path_s,
            expected: hex(stored),
            found: hex(&computed),
        });
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
        path: &path_s,
    };
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path_s,
            found: version,
        });
    }
    let arch_id = r.string()?;
    let scenario = r.string()?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.bytes(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = r.u32()? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(Error::Corrupt {
                path: path_s,
                detail: format!(
                    "tensor {name}: {numel} values for shape {shape:?}"
                ),
            });
        }
        let raw = r.bytes(4 * numel)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, values));
    }
    r.finish()?;
    Ok(Checkpoint {
        arch_id,
        provenance: Provenance {
            scenario,
            epoch,
            seed,
        },
        tensors,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── metrics (JSON lines) ─────────────────────────────────────────────

/// One metric observation; serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub epoch: u32,
    pub metric: String,
    pub value: f64,
}

/// Append-only metrics sink, flushed after every record so interrupted
/// runs keep their history.
pub struct MetricsWriter {
    file: fs::File,
    path: String,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<MetricsWriter> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(MetricsWriter {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn emit(&mut self, record: &MetricRecord) -> Result<()> {
        let io_err = |source| Error::Io {
            path: self.path.clone(),
            source,
        };
        let line = serde_json::to_string(record).expect("record serializes");
        self.file.write_all(line.as_bytes()).map_err(io_err)?;
        self.file.write_all(b"\n").map_err(io_err)?;
        self.file.flush().map_err(io_err)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| Error::Corrupt {
                path: path.display().to_string(),
                detail: format!("metrics line {}: {e}", i + 1),
            })?,
        );
    }
    Ok(out)
}

// ── success bitmaps (ASBM) ───────────────────────────────────────────

/// Persist a success bitmap: magic, u64 bit count, LSB-first packed
/// bytes with zero padding.
pub fn save_bitmap(path: impl AsRef<Path>, bits: &[bool]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + bits.len() / 8 + 1);
    out.extend(BITMAP_MAGIC);
    out.extend((bits.len() as u64).to_le_bytes());
    let mut byte = 0u8;
    for (i, &b) in bits.iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if bits.len() % 8 != 0 {
        out.push(byte);
    }
    write_file(path.as_ref(), &out)
}

pub fn load_bitmap(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let path_s = path.display().to_string();
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: &path_s,
    };
    r.expect_magic(BITMAP_MAGIC)?;
    let n = r.u64()? as usize;
    let bytes = r.bytes(n.div_ceil(8))?;
    r.finish()?;
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        bits.push(bytes[i / 8] >> (i % 8) & 1 == 1);
    }
    // Padding bits must be zero, or the file was not written by us.
    if n % 8 != 0 {
        let pad = bytes[n / 8] >> (n % 8);
        if pad != 0 {
            return Err(Error::Corrupt {
                path: path_s,
                detail: "nonzero padding bits in final byte".into(),
            });
        }
    }
    Ok(bits)
}
