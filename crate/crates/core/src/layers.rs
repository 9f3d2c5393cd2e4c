//! Parameterised building blocks shared by the backbone, proxy generator and
//! classifier heads.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gain)?;
        let b = s.param(self.bias)?;
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention and a GELU
/// MLP, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            heads,
            dim,
        }
    }

    fn attention(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(s, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = s.graph.slice_cols(qkv, h * dh, dh)?;
            let k = s.graph.slice_cols(qkv, self.dim + h * dh, dh)?;
            let v = s.graph.slice_cols(qkv, 2 * self.dim + h * dh, dh)?;
            let kt = s.graph.transpose(k)?;
            let logits = s.graph.matmul(q, kt)?;
            let logits = s.graph.scale(logits, scale)?;
            let att = s.graph.softmax_rows(logits)?;
            outs.push(s.graph.matmul(att, v)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        self.proj.forward(s, merged)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attention(s, h)?;
        let x = s.graph.add(x, a)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.graph.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.graph.add(x, h)
    }
}
