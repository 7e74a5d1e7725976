//! Independent reference implementations and random instance builders shared
//! by the integration tests and the acceptance run.

#![allow(dead_code)]

pub mod checks;

use pvfuse::aggregate::{cross_attention, multihead_self_attention, AttentionWeights, EncoderBlock};
use pvfuse::head::{arcface_loss, fuse_descriptor, ArcFaceHead, DescriptorRecord, FuseMlp};
use pvfuse::nn::Linear;
use pvfuse::numkit::gradcheck::{check_inputs, check_params, GradCheck, GradCheckReport};
use pvfuse::numkit::{ParamStore, Tape, Tensor, Var};
use pvfuse::pointbranch::{knn_graph, EdgeConv};
use pvfuse::viewbranch::{ViewCnn, ViewCnnConfig, ViewStack};
use pvfuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

// ---------------------------------------------------------------- oracles

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

/// Greedy farthest-point selection recomputing every distance to the whole
/// selected set at each step.
pub fn fps_oracle(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| sq(p, &points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Neighbours of every row by a full sort on (distance, index), self excluded.
pub fn knn_oracle(features: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let row = |i: usize| &features.data()[i * d..(i + 1) * d];
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Ranking by repeated selection of the most similar remaining record,
/// smallest id on ties.
pub fn ranking_oracle(db: &[DescriptorRecord], q: usize) -> Vec<usize> {
    let sim = |i: usize| -> f64 {
        db[q].vector.iter().zip(&db[i].vector).map(|(a, b)| a * b).sum()
    };
    let mut left: Vec<usize> = (0..db.len()).filter(|&i| i != q).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for c in 1..left.len() {
            let (a, b) = (left[c], left[best]);
            if sim(a) > sim(b) || (sim(a) == sim(b) && db[a].object_id < db[b].object_id) {
                best = c;
            }
        }
        out.push(left.remove(best));
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleMetrics {
    pub f1: f64,
    pub map: f64,
    pub ndcg: f64,
}

/// Per-query metrics from the definitions; `rel` is the ranked relevance and
/// `r` the class size without the query.
pub fn query_metrics_oracle(rel: &[bool], r: usize) -> OracleMetrics {
    if r == 0 {
        return OracleMetrics::default();
    }
    let mut ap = 0.0;
    for k in 1..=rel.len() {
        if rel[k - 1] {
            let hits = rel[..k].iter().filter(|&&x| x).count();
            ap += hits as f64 / k as f64;
        }
    }
    ap /= r as f64;
    let top = rel[..r].iter().filter(|&&x| x).count() as f64;
    let precision = top / r as f64;
    let recall = top / r as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mut dcg = 0.0;
    let mut idcg = 0.0;
    for i in 1..=r {
        let disc = 2f64.ln() / ((i + 1) as f64).ln();
        if rel[i - 1] {
            dcg += disc;
        }
        idcg += disc;
    }
    OracleMetrics { f1, map: ap, ndcg: dcg / idcg }
}

/// Micro, macro and micro+macro metrics computed from scratch.
pub fn corpus_metrics_oracle(db: &[DescriptorRecord]) -> [OracleMetrics; 3] {
    let mut per_query = Vec::new();
    for q in 0..db.len() {
        let order = ranking_oracle(db, q);
        let rel: Vec<bool> = order.iter().map(|&i| db[i].label == db[q].label).collect();
        let r = db.iter().enumerate().filter(|&(i, d)| i != q && d.label == db[q].label).count();
        per_query.push((db[q].label, query_metrics_oracle(&rel, r)));
    }
    let mean = |xs: &[OracleMetrics]| {
        let n = xs.len() as f64;
        OracleMetrics {
            f1: xs.iter().map(|m| m.f1).sum::<f64>() / n,
            map: xs.iter().map(|m| m.map).sum::<f64>() / n,
            ndcg: xs.iter().map(|m| m.ndcg).sum::<f64>() / n,
        }
    };
    let all: Vec<OracleMetrics> = per_query.iter().map(|p| p.1).collect();
    let micro = mean(&all);
    let mut labels: Vec<u32> = per_query.iter().map(|p| p.0).collect();
    labels.sort();
    labels.dedup();
    let class_means: Vec<OracleMetrics> = labels
        .iter()
        .map(|&l| {
            let xs: Vec<OracleMetrics> = per_query.iter().filter(|p| p.0 == l).map(|p| p.1).collect();
            mean(&xs)
        })
        .collect();
    let macro_ = mean(&class_means);
    let both = OracleMetrics {
        f1: (micro.f1 + macro_.f1) / 2.0,
        map: (micro.map + macro_.map) / 2.0,
        ndcg: (micro.ndcg + macro_.ndcg) / 2.0,
    };
    [micro, macro_, both]
}

/// Random corpus of unit vectors; a few exact duplicates exercise tie-breaking.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_items: usize, max_classes: u32) -> Vec<DescriptorRecord> {
    let n = rng.random_range(2..=max_items);
    let k = rng.random_range(1..=max_classes);
    let dim = rng.random_range(2..=6);
    let mut db: Vec<DescriptorRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.random_range(0..k);
        let v: Vec<f64> = if i > 0 && rng.random_bool(0.1) {
            db[rng.random_range(0..i)].vector.clone()
        } else {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    break v;
                }
            }
        };
        db.push(DescriptorRecord::from_raw(format!("obj{:03}", rng.random_range(0..1000) * 100 + i), label, &v).unwrap());
    }
    db
}

/// Softmax cross-entropy over cosine logits, evaluated scalar by scalar.
pub fn cosine_cross_entropy_oracle(desc: &[Vec<f64>], w: &Tensor, labels: &[usize]) -> f64 {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let mut total = 0.0;
    for (f, &y) in desc.iter().zip(labels) {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let col: Vec<f64> = (0..d).map(|r| w.data()[r * k + j]).collect();
                let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                col.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / norm
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / desc.len() as f64
}

pub fn layer_norm_oracle(x: &Tensor, eps: f64) -> Vec<f64> {
    let d = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + eps).sqrt()));
    }
    out
}

// ------------------------------------------------------- gradient suite

/// Scalar loss `Σ out ⊙ R` with a fixed random `R`, so every output entry
/// carries a distinct weight.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = gaussian(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    let n = shape.iter().product();
    let flat = tape.reshape(prod, &[n])?;
    tape.sum(flat, 0)
}

/// Randomizes every parameter so zero-initialized biases and unit norms do
/// not hide gradient errors.
pub fn jitter_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            *v += scale * r.sample::<f64, _>(StandardNormal);
        }
    }
}

fn both(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    let cfg = GradCheck::default();
    let mut report = check_inputs(store, inputs, &cfg, &f)?;
    let fixed: Vec<Tensor> = inputs.to_vec();
    report.merge(check_params(store, &cfg, |tape| {
        let vars: Vec<Var> = fixed.iter().map(|t| tape.constant(t.clone())).collect();
        f(tape, &vars)
    })?);
    Ok(report)
}

pub fn grad_edgeconv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(6..12);
    let (din, dout) = (r.random_range(2..5), r.random_range(2..6));
    let k = r.random_range(2..5);
    let mut store = ParamStore::new();
    let layer = EdgeConv::new(&mut store, "edge", din, dout, seed)?;
    jitter_params(&mut store, seed + 1, 0.3);
    let x = gaussian(&mut r, &[n, din], 1.0);
    let graph = knn_graph(&x, k)?;
    both(&store, &[x], |tape, v| {
        let y = layer.forward(tape, v[0], &graph)?;
        project(tape, y, seed)
    })
}

pub fn grad_view_cnn(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = r.random_range(1..4);
    let mut store = ParamStore::new();
    let cfg = ViewCnnConfig {
        widths: vec![3, 4],
        input_size: 8,
    };
    let cnn = ViewCnn::new(&mut store, "view", &cfg, seed)?;
    jitter_params(&mut store, seed + 1, 0.2);
    let images = gaussian(&mut r, &[m, 1, 8, 8], 1.0);
    let stack = ViewStack::new(images)?;
    let report = check_params(&store, &GradCheck::default(), |tape| {
        let y = cnn.forward(tape, &stack)?;
        project(tape, y, seed)
    })?;
    Ok(report)
}

fn attention_store(seed: u64, dim: usize) -> Result<(ParamStore, AttentionWeights)> {
    let mut store = ParamStore::new();
    let w = AttentionWeights::new(&mut store, "attn", dim, seed)?;
    jitter_params(&mut store, seed + 1, 0.2);
    Ok((store, w))
}

pub fn grad_msa(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let dim = heads * r.random_range(2..4);
    let l = r.random_range(2..6);
    let (store, w) = attention_store(seed, dim)?;
    let x = gaussian(&mut r, &[l, dim], 1.0);
    both(&store, &[x], |tape, v| {
        let y = multihead_self_attention(tape, v[0], &w, heads)?.output;
        project(tape, y, seed)
    })
}

pub fn grad_encoder_block(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let dim = heads * r.random_range(2..4);
    let l = r.random_range(2..5);
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "block", dim, r.random_range(3..7), heads, seed)?;
    jitter_params(&mut store, seed + 1, 0.2);
    let x = gaussian(&mut r, &[l, dim], 1.0);
    both(&store, &[x], |tape, v| {
        let y = block.forward(tape, v[0])?.output;
        project(tape, y, seed)
    })
}

pub fn grad_cross_attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let dim = heads * r.random_range(2..4);
    let l = r.random_range(2..6);
    let (store, w) = attention_store(seed, dim)?;
    let q = gaussian(&mut r, &[1, dim], 1.0);
    let kv = gaussian(&mut r, &[l, dim], 1.0);
    both(&store, &[q, kv], |tape, v| {
        let y = cross_attention(tape, v[0], v[1], &w, heads)?.output;
        project(tape, y, seed)
    })
}

pub fn grad_alignment(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (dp, d) = (r.random_range(2..8), r.random_range(2..8));
    let mut store = ParamStore::new();
    let g = Linear::new(&mut store, "align", dp, d, 1.0, true, seed)?;
    jitter_params(&mut store, seed + 1, 0.2);
    let f = gaussian(&mut r, &[1, dp], 1.0);
    both(&store, &[f], |tape, v| {
        let y = g.forward(tape, v[0])?;
        project(tape, y, seed)
    })
}

pub fn grad_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let w = r.random_range(1..4);
    let mut store = ParamStore::new();
    let mlp = FuseMlp::new(&mut store, "fuse", 4 * w, r.random_range(3..8), r.random_range(2..6), seed)?;
    jitter_params(&mut store, seed + 1, 0.2);
    let parts: Vec<Tensor> = (0..4).map(|_| gaussian(&mut r, &[1, w], 1.0)).collect();
    both(&store, &parts, |tape, v| {
        let y = fuse_descriptor(tape, v, &mlp)?;
        project(tape, y, seed)
    })
}

/// ArcFace through an L2 normalization of raw descriptors, resampled until
/// every cosine is at most 0.99 in magnitude.
pub fn grad_arcface(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..4);
    let d = r.random_range(2..6);
    let k = r.random_range(2..5);
    let margin = r.random_range(0.0..0.6);
    let scale = r.random_range(1.0..64.0);
    loop {
        let mut store = ParamStore::new();
        let head = ArcFaceHead::new(&mut store, "arc", d, k, margin, scale, seed)?;
        jitter_params(&mut store, r.random(), 0.5);
        let raw = gaussian(&mut r, &[n, d], 1.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let w = store.value(head.weight).clone();
        let cos_ok = raw.data().chunks(d).all(|f| {
            let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            (0..k).all(|j| {
                let col: Vec<f64> = (0..d).map(|i| w.data()[i * k + j]).collect();
                let cn = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                (col.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / (cn * fnorm)).abs() <= 0.99
            })
        });
        if !cos_ok {
            continue;
        }
        return both(&store, &[raw], |tape, v| {
            let unit = tape.l2_normalize(v[0], 1)?;
            arcface_loss(tape, unit, &labels, &head)
        });
    }
}

pub type GradCase = (&'static str, fn(u64) -> Result<GradCheckReport>);

pub const GRAD_CASES: &[GradCase] = &[
    ("EdgeConv", grad_edgeconv),
    ("view CNN", grad_view_cnn),
    ("multi-head self-attention", grad_msa),
    ("encoder block", grad_encoder_block),
    ("cross-attention", grad_cross_attention),
    ("point alignment g", grad_alignment),
    ("fusion MLP", grad_fusion),
    ("ArcFace", grad_arcface),
];

/// Runs `instances` random cases of one operation; returns the merged report.
pub fn run_grad_case(case: &GradCase, instances: u64) -> GradCheckReport {
    let mut total = GradCheckReport::default();
    for i in 0..instances {
        match (case.1)(1000 + i) {
            Ok(rep) => total.merge(rep),
            Err(e) => total.failures.push(format!("instance {i}: {e}")),
        }
    }
    total
}
