//! Transformer building blocks on top of the autograd tape.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{trunc_normal, ParamId, ParamStore};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, fan_in, fan_out, std), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)), false));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, width)), false),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, width)), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm residual block: attention then a 4x GELU MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let attn_std = (width as f64).powf(-0.5);
        let mlp_std = (4.0 * width as f64).powf(-0.5);
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, true, attn_std, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, true, attn_std, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, true, attn_std, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, true, attn_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, 4 * width, true, attn_std, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * width, width, true, mlp_std, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, seq_len: usize, causal: bool) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let a = g.attention(q, k, v, seq_len, self.heads, causal);
        let a = self.out.forward(g, store, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }
}

/// A stack of [`Block`]s sharing one sequence length per call.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.{i}"), width, heads, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, seq_len: usize, causal: bool) -> Var {
        for block in &self.blocks {
            x = block.forward(g, store, x, seq_len, causal);
        }
        x
    }

    /// Scalar parameter count of a block stack, computed from the shapes alone.
    pub fn param_count(width: usize, layers: usize) -> usize {
        let attn = 4 * (width * width + width);
        let mlp = width * 4 * width + 4 * width + 4 * width * width + width;
        let norms = 4 * width;
        layers * (attn + mlp + norms)
    }
}
