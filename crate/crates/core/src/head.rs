//! Descriptor fusion, training losses and the descriptor database format.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numkit::io::Reader;
use crate::numkit::{Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer MLP mapping concatenated aggregated features to the descriptor.
#[derive(Clone, Debug)]
pub struct FuseMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FuseMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(FuseMlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, 2f64.sqrt(), true, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, 1.0, true, seed)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }
}

/// Concatenates `parts` (each `1 × d_i`, in the given order) and maps them
/// through affine → relu → affine to the unnormalized descriptor.
pub fn fuse_descriptor(tape: &mut Tape, parts: &[Var], mlp: &FuseMlp) -> Result<Var> {
    let joined = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(parts, 1)?
    };
    let s = tape.shape(joined).to_vec();
    if s.len() != 2 || s[1] != mlp.in_dim() {
        return Err(Error::shape("fuse_descriptor", &s, &[1, mlp.in_dim()]));
    }
    let h = mlp.fc1.forward(tape, joined)?;
    let h = tape.relu(h)?;
    mlp.fc2.forward(tape, h)
}

/// Additive angular margin classifier.
#[derive(Clone, Debug)]
pub struct ArcFaceHead {
    /// `D × K`; columns are L2-normalized on every use.
    pub weight: ParamId,
    pub margin: f64,
    pub scale: f64,
    pub classes: usize,
}

impl ArcFaceHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        classes: usize,
        margin: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..FRAC_PI_2).contains(&margin) {
            return Err(Error::config(format!("arcface margin {margin} outside [0, π/2)")));
        }
        if scale <= 0.0 || !scale.is_finite() {
            return Err(Error::config(format!("arcface scale {scale} must be positive")));
        }
        let weight = store.init(
            &format!("{name}.weight"),
            &[dim, classes],
            Init::Gaussian(1.0 / (dim as f64).sqrt()),
            seed,
        )?;
        Ok(ArcFaceHead {
            weight,
            margin,
            scale,
            classes,
        })
    }
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", &[rows], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize, on: f64) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = on;
    }
    Tensor::from_raw(vec![labels.len(), classes], data)
}

/// Mean negative log-softmax of `logits` (`N × K`) at the true labels.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("cross_entropy", &s, &[0, 0]));
    }
    check_labels(labels, s[1], s[0])?;
    let ls = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(one_hot(labels, s[1], 1.0));
    let picked = tape.mul(ls, mask)?;
    let per_row = tape.sum(picked, 1)?;
    let total = tape.sum(per_row, 0)?;
    tape.scale(total, -1.0 / s[0] as f64)
}

/// ArcFace loss over unit-norm descriptors (`N × D`).
///
/// `θ_k = arccos(W_kᵀ f̂)`; the true class logit is `s·cos(θ_y + m)` and the
/// others `s·cos θ_k`. The loss is the batch mean of the negative log-softmax
/// at the true class.
pub fn arcface_loss(tape: &mut Tape, descriptors: Var, labels: &[usize], head: &ArcFaceHead) -> Result<Var> {
    let s = tape.shape(descriptors).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("arcface_loss", &s, &[0, 0]));
    }
    let w_shape = tape.store().value(head.weight).shape().to_vec();
    if w_shape[0] != s[1] {
        return Err(Error::shape("arcface_loss", &s, &w_shape));
    }
    check_labels(labels, head.classes, s[0])?;
    {
        let d = tape.value(descriptors);
        for i in 0..s[0] {
            let norm = d.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "arcface_loss: descriptor {i} has norm {norm}, expected 1"
                )));
            }
        }
    }
    let w = tape.param(head.weight);
    let w_unit = tape.l2_normalize(w, 0)?;
    let cosines = tape.matmul(descriptors, w_unit)?;
    let theta = tape.acos(cosines)?;
    let margin = tape.constant(one_hot(labels, head.classes, head.margin));
    let theta = tape.add(theta, margin)?;
    let logits = tape.cos(theta)?;
    let logits = tape.scale(logits, head.scale)?;
    softmax_cross_entropy(tape, logits, labels)
}

/// Affine classifier to `K` logits followed by softmax cross-entropy.
pub fn cross_entropy_head(tape: &mut Tape, features: Var, labels: &[usize], classifier: &Linear) -> Result<Var> {
    let logits = classifier.forward(tape, features)?;
    softmax_cross_entropy(tape, logits, labels)
}

/// A unit-norm retrieval descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorRecord {
    pub object_id: String,
    pub label: u32,
    pub vector: Vec<f64>,
}

pub const UNIT_NORM_TOL: f64 = 1e-9;

impl DescriptorRecord {
    /// Validates that `vector` has unit norm within [`UNIT_NORM_TOL`].
    pub fn new(object_id: impl Into<String>, label: u32, vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!("descriptor norm {norm} is not 1")));
        }
        Ok(DescriptorRecord {
            object_id: object_id.into(),
            label,
            vector,
        })
    }

    /// Normalizes `raw` to unit length.
    pub fn from_raw(object_id: impl Into<String>, label: u32, raw: &[f64]) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite { op: "descriptor normalization" });
        }
        DescriptorRecord::new(object_id, label, raw.iter().map(|v| v / norm).collect())
    }
}

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"PVD1";

/// PVD1: magic, `u32` count, `u32` width, then per record a `u16` id length,
/// the UTF-8 id, a `u32` label and `width` fp64 values, all little-endian.
pub fn encode_descriptors(records: &[DescriptorRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut out = Vec::new();
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::shape("descriptor database", &[dim], &[r.vector.len()]));
        }
        let id = r.object_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::contract(format!("object id `{}` too long", r.object_id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8], path: &Path) -> Result<Vec<DescriptorRecord>> {
    let mut r = Reader::new(bytes, path, "PVD1");
    r.magic(DESCRIPTOR_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|e| r.fail(format!("object id is not UTF-8: {e}")))?
            .to_string();
        let label = r.u32()?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(r.f64()?);
        }
        out.push(DescriptorRecord {
            object_id: id,
            label,
            vector,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_descriptors(path: impl AsRef<Path>, records: &[DescriptorRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_descriptors(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<Vec<DescriptorRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes, path)
}
