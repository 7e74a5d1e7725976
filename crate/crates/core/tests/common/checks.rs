//! Structural invariant checks. Each returns the largest deviation observed,
//! or an error string for a broken exact identity.

use pvfuse::aggregate::{cross_attention, multihead_self_attention, AttentionWeights, Cmam, EncoderBlock, Imam, ImamConfig};
use pvfuse::head::{arcface_loss, ArcFaceHead};
use pvfuse::numkit::{ParamStore, Tape, Tensor, LN_EPS};
use pvfuse::pointbranch::{PointBranch, PointBranchConfig, PointCloud};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{cosine_cross_entropy_oracle, gaussian, jitter_params, layer_norm_oracle, random_cloud, rng};

fn zero_params(store: &mut ParamStore, prefix: &str, keep: &[&str]) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && !keep.iter().any(|k| p.name.contains(k)))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
}

/// A block whose attention and MLP weights are all zero returns LN(input)
/// bit-for-bit; also within 1e-12 of a scalar layer norm.
pub fn zero_block_is_layer_norm(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let heads = r.random_range(1..4);
    let dim = heads * r.random_range(1..5);
    let l = r.random_range(1..8);
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "b", dim, r.random_range(1..9), heads, seed).map_err(|e| e.to_string())?;
    zero_params(&mut store, "b.attn", &[]);
    zero_params(&mut store, "b.mlp", &[]);
    let x = gaussian(&mut r, &[l, dim], 2.0);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let out = block.forward(&mut tape, xv).map_err(|e| e.to_string())?.output;
    let reference = tape.layer_norm(xv, 1, LN_EPS).map_err(|e| e.to_string())?;
    if tape.value(out).data() != tape.value(reference).data() {
        return Err("zero-weight block differs from LN(input)".into());
    }
    let scalar = layer_norm_oracle(&x, LN_EPS);
    Ok(tape.value(out).data().iter().zip(&scalar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// With zero cross-attention weights the cross-modality output is exactly
/// the aligned point feature.
pub fn cmam_residual_identity(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let dim = heads * r.random_range(1..5);
    let cfg = ImamConfig {
        input_dim: r.random_range(1..6),
        dim,
        heads,
        mlp_hidden: r.random_range(1..8),
        blocks: r.random_range(1..3),
        max_tokens: 8,
    };
    let dp = r.random_range(1..10);
    let mut store = ParamStore::new();
    let cmam = Cmam::new(&mut store, "c", &cfg, dp, seed).map_err(|e| e.to_string())?;
    jitter_params(&mut store, seed + 7, 0.3);
    zero_params(&mut store, "c.cross", &[]);
    let nt = r.random_range(1..9);
    let tokens = gaussian(&mut r, &[nt, cfg.input_dim], 1.0);
    let f = gaussian(&mut r, &[1, dp], 1.0);
    let mut tape = Tape::new(&store);
    let (t, fv) = (tape.constant(tokens), tape.constant(f));
    let trace = cmam.trace(&mut tape, t, fv).map_err(|e| e.to_string())?;
    let g = cmam.align.forward(&mut tape, fv).map_err(|e| e.to_string())?;
    if tape.value(trace.output).data() != tape.value(g).data() {
        return Err("zero cross-attention output differs from g(f_point)".into());
    }
    Ok(0.0)
}

/// Largest |row sum − 1| over every attention matrix of self-attention,
/// cross-attention, the class-token aggregator and the cross-modality module.
pub fn attention_rows_sum_to_one(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let heads = r.random_range(1..4);
    let dim = heads * r.random_range(1..5);
    let l = r.random_range(1..10);
    let mut store = ParamStore::new();
    let w = AttentionWeights::new(&mut store, "a", dim, seed).map_err(|e| e.to_string())?;
    let cfg = ImamConfig {
        input_dim: dim,
        dim,
        heads,
        mlp_hidden: 4,
        blocks: 2,
        max_tokens: 10,
    };
    let imam = Imam::new(&mut store, "i", &cfg, seed).map_err(|e| e.to_string())?;
    let cmam = Cmam::new(&mut store, "c", &cfg, 3, seed).map_err(|e| e.to_string())?;
    jitter_params(&mut store, seed + 3, 1.0);
    let x = gaussian(&mut r, &[l, dim], 3.0);
    let q = gaussian(&mut r, &[1, dim], 3.0);
    let f = gaussian(&mut r, &[1, 3], 3.0);
    let mut tape = Tape::new(&store);
    let (xv, qv, fv) = (tape.constant(x), tape.constant(q), tape.constant(f));
    let e = |e: pvfuse::Error| e.to_string();
    let mut mats = multihead_self_attention(&mut tape, xv, &w, heads).map_err(e)?.attention;
    mats.extend(cross_attention(&mut tape, qv, xv, &w, heads).map_err(e)?.attention);
    mats.extend(imam.encode(&mut tape, xv).map_err(e)?.attention);
    let tr = cmam.trace(&mut tape, xv, fv).map_err(e)?;
    mats.extend(tr.cross_attention);
    mats.extend(tr.self_attention);
    let mut worst: f64 = 0.0;
    for m in mats {
        let t = tape.value(m);
        let cols = *t.shape().last().unwrap();
        for row in t.data().chunks(cols) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Largest deviation of the global point feature under a random permutation
/// of a general-position cloud.
pub fn point_permutation_invariance(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let n = r.random_range(12..64);
    let cfg = PointBranchConfig {
        edge_widths: vec![8, 8, 16],
        knn_k: r.random_range(2..8),
        out_dim: 24,
    };
    let mut store = ParamStore::new();
    let branch = PointBranch::new(&mut store, "point", &cfg, seed).map_err(|e| e.to_string())?;
    jitter_params(&mut store, seed + 5, 0.1);
    let pts = random_cloud(&mut r, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let a = PointCloud::new("a", pts.clone()).unwrap();
    let b = PointCloud::new("b", perm.iter().map(|&i| pts[i]).collect()).unwrap();
    let feature = |c: &PointCloud| -> Result<Vec<f64>, String> {
        let mut tape = Tape::new(&store);
        let v = branch.forward(&mut tape, c).map_err(|e| e.to_string())?;
        Ok(tape.value(v).data().to_vec())
    };
    let (fa, fb) = (feature(&a)?, feature(&b)?);
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// |ArcFace(m = 0, s = 1) − cosine cross-entropy| on a random batch.
pub fn arcface_without_margin_is_cosine_ce(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let (n, d, k) = (r.random_range(1..6), r.random_range(2..8), r.random_range(2..6));
    let mut store = ParamStore::new();
    let head = ArcFaceHead::new(&mut store, "arc", d, k, 0.0, 1.0, seed).map_err(|e| e.to_string())?;
    let raw = gaussian(&mut r, &[n, d], 1.0);
    let unit: Vec<Vec<f64>> = raw
        .data()
        .chunks(d)
        .map(|f| {
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.iter().map(|x| x / norm).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let mut tape = Tape::new(&store);
    let f = tape.constant(Tensor::new(vec![n, d], unit.concat()).unwrap());
    let loss = arcface_loss(&mut tape, f, &labels, &head).map_err(|e| e.to_string())?;
    let got = tape.value(loss).item().map_err(|e| e.to_string())?;
    let want = cosine_cross_entropy_oracle(&unit, store.value(head.weight), &labels);
    Ok((got - want).abs())
}
