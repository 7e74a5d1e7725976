//! Small reusable layers built on the tape.

use crate::error::Result;
use crate::numkit::{Init, ParamId, ParamStore, Tape, Var, LN_EPS};

/// Affine map `x·W + b` with `W` of shape `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain / sqrt(in_dim)`; zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let sigma = gain / (in_dim as f64).sqrt();
        let weight = store.init(&format!("{name}.weight"), &[in_dim, out_dim], Init::Gaussian(sigma), seed)?;
        let bias = if bias {
            Some(store.init(&format!("{name}.bias"), &[out_dim], Init::Zeros, seed)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Layer normalization over the last axis with a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.init(&format!("{name}.gamma"), &[dim], Init::Ones, seed)?,
            beta: store.init(&format!("{name}.beta"), &[dim], Init::Zeros, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis, LN_EPS)?;
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}
