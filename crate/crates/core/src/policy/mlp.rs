//! Two-layer MLP over a fixed context window.
//!
//! Input is the concatenation of the embeddings of the last W tokens
//! (left-padded with a dedicated padding id), followed by one tanh hidden
//! layer and a linear head. The same trunk is reused by the value network
//! with a scalar head. Backprop is hand-derived; finite-difference tests
//! pin it down.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub vocab_size: usize,
    pub window: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl MlpDims {
    pub fn input_len(&self) -> usize {
        self.window * self.d_emb
    }

    /// Embedding rows: one per vocabulary token plus the padding id.
    pub fn embed_rows(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn trunk_params(&self) -> usize {
        self.embed_rows() * self.d_emb + self.d_hidden * self.input_len() + self.d_hidden
    }
}

/// Embedding table plus the hidden layer; shared between policy and value
/// heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTrunk {
    pub dims: MlpDims,
    /// (vocab_size + 1) x d_emb, row-major.
    pub embed: Vec<f64>,
    /// d_hidden x (window * d_emb), row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

/// Forward activations needed to run backprop for one context.
pub struct TrunkCache {
    ctx: Vec<u32>,
    x: Vec<f64>,
    pub h: Vec<f64>,
}

pub const INIT_SCALE: f64 = 0.05;

fn init_uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect()
}

impl MlpTrunk {
    pub fn init(dims: MlpDims, rng: &mut impl Rng) -> Self {
        Self {
            dims,
            embed: init_uniform(rng, dims.embed_rows() * dims.d_emb),
            w1: init_uniform(rng, dims.d_hidden * dims.input_len()),
            b1: vec![0.0; dims.d_hidden],
        }
    }

    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            dims,
            embed: vec![0.0; dims.embed_rows() * dims.d_emb],
            w1: vec![0.0; dims.d_hidden * dims.input_len()],
            b1: vec![0.0; dims.d_hidden],
        }
    }

    pub fn forward(&self, ctx: &[u32]) -> TrunkCache {
        let d = &self.dims;
        debug_assert_eq!(ctx.len(), d.window);
        let mut x = vec![0.0; d.input_len()];
        for (k, &tok) in ctx.iter().enumerate() {
            let row = tok as usize * d.d_emb;
            x[k * d.d_emb..(k + 1) * d.d_emb].copy_from_slice(&self.embed[row..row + d.d_emb]);
        }
        let mut h = vec![0.0; d.d_hidden];
        let cols = d.input_len();
        for r in 0..d.d_hidden {
            let w = &self.w1[r * cols..(r + 1) * cols];
            let mut acc = self.b1[r];
            for (wi, xi) in w.iter().zip(&x) {
                acc += wi * xi;
            }
            h[r] = acc.tanh();
        }
        TrunkCache {
            ctx: ctx.to_vec(),
            x,
            h,
        }
    }

    /// Accumulates gradients for a hidden-activation gradient `dh` into the
    /// `[embed | w1 | b1]` regions of `grad` (which must cover exactly
    /// `trunk_params()` entries).
    pub fn backward(&self, cache: &TrunkCache, dh: &[f64], grad: &mut [f64]) {
        let d = &self.dims;
        debug_assert_eq!(grad.len(), d.trunk_params());
        let cols = d.input_len();
        let (g_embed, rest) = grad.split_at_mut(d.embed_rows() * d.d_emb);
        let (g_w1, g_b1) = rest.split_at_mut(d.d_hidden * cols);

        let mut dx = vec![0.0; cols];
        for r in 0..d.d_hidden {
            let dpre = dh[r] * (1.0 - cache.h[r] * cache.h[r]);
            if dpre == 0.0 {
                continue;
            }
            g_b1[r] += dpre;
            let w_row = &self.w1[r * cols..(r + 1) * cols];
            let g_row = &mut g_w1[r * cols..(r + 1) * cols];
            for c in 0..cols {
                g_row[c] += dpre * cache.x[c];
                dx[c] += dpre * w_row[c];
            }
        }
        for (k, &tok) in cache.ctx.iter().enumerate() {
            let row = tok as usize * d.d_emb;
            for j in 0..d.d_emb {
                g_embed[row + j] += dx[k * d.d_emb + j];
            }
        }
    }
}

/// Policy head on top of the trunk: logits over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub trunk: MlpTrunk,
    /// vocab_size x d_hidden, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn init(dims: MlpDims, rng: &mut impl Rng) -> Self {
        Self {
            trunk: MlpTrunk::init(dims, rng),
            w2: init_uniform(rng, dims.vocab_size * dims.d_hidden),
            b2: vec![0.0; dims.vocab_size],
        }
    }

    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            trunk: MlpTrunk::zeros(dims),
            w2: vec![0.0; dims.vocab_size * dims.d_hidden],
            b2: vec![0.0; dims.vocab_size],
        }
    }

    pub fn dims(&self) -> &MlpDims {
        &self.trunk.dims
    }

    pub fn n_params(&self) -> usize {
        let d = self.dims();
        d.trunk_params() + d.vocab_size * d.d_hidden + d.vocab_size
    }

    pub fn forward(&self, ctx: &[u32]) -> (Vec<f64>, TrunkCache) {
        let d = *self.dims();
        let cache = self.trunk.forward(ctx);
        let mut logits = vec![0.0; d.vocab_size];
        for a in 0..d.vocab_size {
            let w = &self.w2[a * d.d_hidden..(a + 1) * d.d_hidden];
            let mut acc = self.b2[a];
            for (wi, hi) in w.iter().zip(&cache.h) {
                acc += wi * hi;
            }
            logits[a] = acc;
        }
        (logits, cache)
    }

    pub fn logits(&self, ctx: &[u32]) -> Vec<f64> {
        self.forward(ctx).0
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits),
    /// laid out as `[embed | w1 | b1 | w2 | b2]`.
    pub fn backward_logits(&self, cache: &TrunkCache, dlogits: &[f64], grad: &mut [f64]) {
        let d = *self.dims();
        debug_assert_eq!(grad.len(), self.n_params());
        let (g_trunk, rest) = grad.split_at_mut(d.trunk_params());
        let (g_w2, g_b2) = rest.split_at_mut(d.vocab_size * d.d_hidden);

        let mut dh = vec![0.0; d.d_hidden];
        for a in 0..d.vocab_size {
            let dl = dlogits[a];
            if dl == 0.0 {
                continue;
            }
            g_b2[a] += dl;
            let w_row = &self.w2[a * d.d_hidden..(a + 1) * d.d_hidden];
            let g_row = &mut g_w2[a * d.d_hidden..(a + 1) * d.d_hidden];
            for j in 0..d.d_hidden {
                g_row[j] += dl * cache.h[j];
                dh[j] += dl * w_row[j];
            }
        }
        self.trunk.backward(cache, &dh, g_trunk);
    }

    pub fn flat_get(&self, i: usize) -> f64 {
        let d = *self.dims();
        let mut i = i;
        let sizes = [
            d.embed_rows() * d.d_emb,
            d.d_hidden * d.input_len(),
            d.d_hidden,
            d.vocab_size * d.d_hidden,
            d.vocab_size,
        ];
        let parts: [&[f64]; 5] = [
            &self.trunk.embed,
            &self.trunk.w1,
            &self.trunk.b1,
            &self.w2,
            &self.b2,
        ];
        for (size, part) in sizes.iter().zip(parts) {
            if i < *size {
                return part[i];
            }
            i -= size;
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, i: usize, v: f64) {
        let d = *self.dims();
        let mut i = i;
        let sizes = [
            d.embed_rows() * d.d_emb,
            d.d_hidden * d.input_len(),
            d.d_hidden,
            d.vocab_size * d.d_hidden,
            d.vocab_size,
        ];
        let parts: [&mut Vec<f64>; 5] = [
            &mut self.trunk.embed,
            &mut self.trunk.w1,
            &mut self.trunk.b1,
            &mut self.w2,
            &mut self.b2,
        ];
        for (size, part) in sizes.iter().zip(parts) {
            if i < *size {
                part[i] = v;
                return;
            }
            i -= size;
        }
        panic!("flat index out of range");
    }
}
