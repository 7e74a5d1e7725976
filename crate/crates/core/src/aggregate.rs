//! Token aggregation.
//!
//! [`Imam`] prepends a learnable class token to a token set, adds learned
//! position embeddings and runs transformer encoder blocks; the class-token
//! row summarizes the set. [`Cmam`] self-attends a token set with its own
//! [`Imam`], prepends the aligned point feature `g(f_point)` as row 0, lets
//! `g(f_point)` query that hybrid set through cross-attention, and adds the
//! result back onto `g(f_point)`.

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numkit::{Init, ParamId, ParamStore, Tape, Var};

/// Standard deviation for class tokens and position embeddings.
pub const TOKEN_INIT_STD: f64 = 0.02;

/// Query/key/value maps (`D × D`, no bias) plus an output projection.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub dim: usize,
}

impl AttentionWeights {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Result<Self> {
        let sigma = 1.0 / (dim as f64).sqrt();
        Ok(AttentionWeights {
            wq: store.init(&format!("{name}.wq"), &[dim, dim], Init::Gaussian(sigma), seed)?,
            wk: store.init(&format!("{name}.wk"), &[dim, dim], Init::Gaussian(sigma), seed)?,
            wv: store.init(&format!("{name}.wv"), &[dim, dim], Init::Gaussian(sigma), seed)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0, true, seed)?,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.wk, self.wv];
        ids.extend(self.out.param_ids());
        ids
    }
}

/// Output of an attention layer with its per-head attention matrices.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub attention: Vec<Var>,
}

fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::contract(format!(
            "head count {heads} must divide width {dim}"
        )));
    }
    Ok(dim / heads)
}

/// Multi-head attention of `queries` (`Lq × D`) over `context` (`L × D`).
fn attend(tape: &mut Tape, queries: Var, context: Var, w: &AttentionWeights, heads: usize) -> Result<Attended> {
    let d = w.dim;
    let head_dim = check_heads(d, heads)?;
    for v in [queries, context] {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape("attention", s, &[0, d]));
        }
    }
    let wq = tape.param(w.wq);
    let wk = tape.param(w.wk);
    let wv = tape.param(w.wv);
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(context, wk)?;
    let v = tape.matmul(context, wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * head_dim, head_dim)?;
        let kh = tape.narrow(k, 1, h * head_dim, head_dim)?;
        let vh = tape.narrow(v, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, vh)?);
        attention.push(a);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let output = w.out.forward(tape, joined)?;
    Ok(Attended { output, attention })
}

/// Self-attention over the rows of `tokens` (`L × D`); softmax scores are
/// scaled by `1/√(D/h)`.
pub fn multihead_self_attention(tape: &mut Tape, tokens: Var, w: &AttentionWeights, heads: usize) -> Result<Attended> {
    attend(tape, tokens, tokens, w, heads)
}

/// A single query row (`1 × D`) attending over `kv_tokens` (`L × D`).
pub fn cross_attention(
    tape: &mut Tape,
    query: Var,
    kv_tokens: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Attended> {
    let s = tape.shape(query);
    if s.len() != 2 || s[0] != 1 {
        return Err(Error::shape("cross_attention", s, &[1, w.dim]));
    }
    attend(tape, query, kv_tokens, w, heads)
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionWeights,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm_out: LayerNorm,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, heads: usize, seed: u64) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim, seed)?,
            attn: AttentionWeights::new(store, &format!("{name}.attn"), dim, seed)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim, seed)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, 2f64.sqrt(), true, seed)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, 1.0, true, seed)?,
            norm_out: LayerNorm::new(store, &format!("{name}.ln3"), dim, seed)?,
            heads,
        })
    }

    /// `Z' = MSA(LN(Z)) + Z`, then `Z* = LN(MLP(LN(Z')) + Z')`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Attended> {
        let n1 = self.norm1.forward(tape, z)?;
        let msa = multihead_self_attention(tape, n1, &self.attn, self.heads)?;
        let z1 = tape.add(msa.output, z)?;
        let n2 = self.norm2.forward(tape, z1)?;
        let h = self.fc1.forward(tape, n2)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let z2 = tape.add(h, z1)?;
        let output = self.norm_out.forward(tape, z2)?;
        Ok(Attended {
            output,
            attention: msa.attention,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImamConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    /// Largest number of content tokens the position table covers.
    pub max_tokens: usize,
}

/// Class-token transformer aggregator.
#[derive(Clone, Debug)]
pub struct Imam {
    pub config: ImamConfig,
    pub input: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl Imam {
    pub fn new(store: &mut ParamStore, name: &str, config: &ImamConfig, seed: u64) -> Result<Self> {
        check_heads(config.dim, config.heads)?;
        if config.blocks == 0 || config.max_tokens == 0 {
            return Err(Error::config("aggregator needs at least one block and one token"));
        }
        let input = Linear::new(store, &format!("{name}.input"), config.input_dim, config.dim, 1.0, true, seed)?;
        let class_token = store.init(
            &format!("{name}.class_token"),
            &[1, config.dim],
            Init::Gaussian(TOKEN_INIT_STD),
            seed,
        )?;
        let positions = store.init(
            &format!("{name}.pos_embed"),
            &[config.max_tokens + 1, config.dim],
            Init::Gaussian(TOKEN_INIT_STD),
            seed,
        )?;
        let blocks = (0..config.blocks)
            .map(|b| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{b}"),
                    config.dim,
                    config.mlp_hidden,
                    config.heads,
                    seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Imam {
            config: config.clone(),
            input,
            class_token,
            positions,
            blocks,
        })
    }

    /// Runs the encoder over `content` (`L × input_dim`), returning the full
    /// `(L+1) × D` sequence (class token first) and every attention matrix.
    pub fn encode(&self, tape: &mut Tape, content: Var) -> Result<Attended> {
        let s = tape.shape(content).to_vec();
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::shape("imam", &s, &[0, self.config.input_dim]));
        }
        let l = s[0];
        if l > self.config.max_tokens {
            return Err(Error::contract(format!(
                "{l} tokens exceed the position table of {}",
                self.config.max_tokens
            )));
        }
        let x = self.input.forward(tape, content)?;
        let cls = tape.param(self.class_token);
        let z = tape.concat(&[cls, x], 0)?;
        let pos = tape.param(self.positions);
        let pos = tape.narrow(pos, 0, 0, l + 1)?;
        let mut z = tape.add(z, pos)?;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, z)?;
            z = out.output;
            attention.extend(out.attention);
        }
        Ok(Attended { output: z, attention })
    }

    /// Aggregated feature: the class-token row (`1 × D`) or, with
    /// `return_sequence`, the whole encoded sequence.
    pub fn forward(&self, tape: &mut Tape, content: Var, return_sequence: bool) -> Result<Var> {
        let z = self.encode(tape, content)?.output;
        if return_sequence {
            Ok(z)
        } else {
            tape.narrow(z, 0, 0, 1)
        }
    }
}

/// Point-queried cross-attention aggregator.
#[derive(Clone, Debug)]
pub struct Cmam {
    pub imam: Imam,
    pub align: Linear,
    pub cross: AttentionWeights,
    pub heads: usize,
}

/// Intermediate values of a [`Cmam`] pass.
#[derive(Clone, Debug)]
pub struct CmamTrace {
    pub output: Var,
    pub aligned_point: Var,
    pub hybrid: Var,
    pub cross_attention: Vec<Var>,
    pub self_attention: Vec<Var>,
}

impl Cmam {
    /// Builds a CMAM with its own internal aggregator.
    pub fn new(store: &mut ParamStore, name: &str, config: &ImamConfig, point_dim: usize, seed: u64) -> Result<Self> {
        let imam = Imam::new(store, &format!("{name}.imam"), config, seed)?;
        Self::with_imam(store, name, imam, point_dim, seed)
    }

    /// Builds a CMAM around an existing aggregator, sharing its parameters.
    pub fn with_imam(store: &mut ParamStore, name: &str, imam: Imam, point_dim: usize, seed: u64) -> Result<Self> {
        let dim = imam.config.dim;
        let heads = imam.config.heads;
        let align = Linear::new(store, &format!("{name}.align"), point_dim, dim, 1.0, true, seed)?;
        let cross = AttentionWeights::new(store, &format!("{name}.cross"), dim, seed)?;
        Ok(Cmam {
            imam,
            align,
            cross,
            heads,
        })
    }

    pub fn trace(&self, tape: &mut Tape, content: Var, f_point: Var) -> Result<CmamTrace> {
        let s = tape.shape(f_point).to_vec();
        if s != [1, self.align.in_dim] {
            return Err(Error::shape("cmam point feature", &s, &[1, self.align.in_dim]));
        }
        let encoded = self.imam.encode(tape, content)?;
        let aligned_point = self.align.forward(tape, f_point)?;
        let hybrid = tape.concat(&[aligned_point, encoded.output], 0)?;
        let cross = cross_attention(tape, aligned_point, hybrid, &self.cross, self.heads)?;
        let output = tape.add(aligned_point, cross.output)?;
        Ok(CmamTrace {
            output,
            aligned_point,
            hybrid,
            cross_attention: cross.attention,
            self_attention: encoded.attention,
        })
    }

    /// Cross-modality feature `g(f_point) + Z^C` (`1 × D`).
    pub fn forward(&self, tape: &mut Tape, content: Var, f_point: Var) -> Result<Var> {
        Ok(self.trace(tape, content, f_point)?.output)
    }
}
