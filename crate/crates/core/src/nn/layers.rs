//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Activations are row-major `[rows, features]` slices. Every `backward`
//! accumulates into the parameter gradients held by the [`ParamStore`].

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::real::{matmul, Real};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), &[din, dout], Init::TruncNormal(INIT_STD), rng);
        let b = store.add(format!("{name}.bias"), &[dout], Init::Zeros, rng);
        Self { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.din);
        let bias = store.value(self.b);
        let mut y: Vec<T> = Vec::with_capacity(rows * self.dout);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        matmul(x, store.value(self.w), &mut y, rows, self.din, self.dout, false, false, true);
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        {
            let gw = &mut store.grads[self.w.0];
            matmul(x, dy, gw, self.din, rows, self.dout, true, false, true);
        }
        {
            let gb = &mut store.grads[self.b.0];
            for row in dy.chunks_exact(self.dout) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.din];
            matmul(dy, &store.values[self.w.0], &mut dx, rows, self.dout, self.din, false, true, false);
            dx
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let n = T::of(d as f64);
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gamma[j] + beta[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim;
        let n = T::of(d as f64);
        let rows = dy.len() / d;
        let mut dx = vec![T::zero(); dy.len()];
        {
            let gg = &mut store.grads[self.gamma.0];
            for r in 0..rows {
                for j in 0..d {
                    gg[j] += dy[r * d + j] * cache.xhat[r * d + j];
                }
            }
        }
        {
            let gb = &mut store.grads[self.beta.0];
            for row in dy.chunks_exact(d) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let gamma = &store.values[self.gamma.0];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                dxhat[j] = dy[r * d + j] * gamma[j];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            for j in 0..d {
                dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

/// Multi-head self-attention over `batch` independent sequences of length
/// `seq` (no masking inside a sequence).
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T> {
    x: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, rng);
        Self { qkv, proj, heads, dim }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        seq: usize,
    ) -> (Vec<T>, AttentionCache<T>) {
        let rows = batch * seq;
        let c = self.dim;
        let dh = c / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(store, x, rows);
        let mut probs = vec![T::zero(); batch * self.heads * seq * seq];
        let mut ctx = vec![T::zero(); rows * c];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &mut probs[(b * self.heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qkv[(b * seq + i) * 3 * c + h * dh..][..dh];
                    let mut maxv = T::neg_infinity();
                    for j in 0..seq {
                        let kj = &qkv[(b * seq + j) * 3 * c + c + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        p[i * seq + j] = s;
                        maxv = maxv.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..seq {
                        let e = (p[i * seq + j] - maxv).exp();
                        p[i * seq + j] = e;
                        z += e;
                    }
                    for j in 0..seq {
                        p[i * seq + j] = p[i * seq + j] / z;
                    }
                    let out = &mut ctx[(b * seq + i) * c + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &qkv[(b * seq + j) * 3 * c + 2 * c + h * dh..][..dh];
                        let pij = p[i * seq + j];
                        for (o, &v) in out.iter_mut().zip(vj) {
                            *o += pij * v;
                        }
                    }
                }
            }
        }
        let y = self.proj.forward(store, &ctx, rows);
        (y, AttentionCache { x: x.to_vec(), qkv, probs, ctx })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &AttentionCache<T>,
        dy: &[T],
        batch: usize,
        seq: usize,
    ) -> Vec<T> {
        let rows = batch * seq;
        let c = self.dim;
        let dh = c / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.proj.backward(store, &cache.ctx, dy, rows, true).expect("dx requested");
        let qkv = &cache.qkv;
        let mut dqkv = vec![T::zero(); rows * 3 * c];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &cache.probs[(b * self.heads + h) * seq * seq..][..seq * seq];
                // dP and dV
                for i in 0..seq {
                    let dout = &dctx[(b * seq + i) * c + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &qkv[(b * seq + j) * 3 * c + 2 * c + h * dh..][..dh];
                        dp[i * seq + j] = dout.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let pij = p[i * seq + j];
                        let dv = &mut dqkv[(b * seq + j) * 3 * c + 2 * c + h * dh..][..dh];
                        for (g, &d) in dv.iter_mut().zip(dout) {
                            *g += pij * d;
                        }
                    }
                }
                // softmax backward, then scores -> q, k
                for i in 0..seq {
                    let row_dot: T = (0..seq).map(|j| dp[i * seq + j] * p[i * seq + j]).sum();
                    for j in 0..seq {
                        let ds = p[i * seq + j] * (dp[i * seq + j] - row_dot) * scale;
                        let qo = (b * seq + i) * 3 * c + h * dh;
                        let ko = (b * seq + j) * 3 * c + c + h * dh;
                        for t in 0..dh {
                            let q = qkv[qo + t];
                            let k = qkv[ko + t];
                            dqkv[qo + t] += ds * k;
                            dqkv[ko + t] += ds * q;
                        }
                    }
                }
            }
        }
        self.qkv.backward(store, &cache.x, &dqkv, rows, true).expect("dx requested")
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], batch: usize, seq: usize) -> (Vec<T>, BlockCache<T>) {
        let rows = batch * seq;
        let (h1, ln1) = self.ln1.forward(store, x);
        let (a, attn) = self.attn.forward(store, &h1, batch, seq);
        let x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(store, &x1);
        let f1 = self.fc1.forward(store, &h2, rows);
        let g = gelu(&f1);
        let m = self.fc2.forward(store, &g, rows);
        let out = x1.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        (out, BlockCache { ln1, attn, ln2, h2, f1, g })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &[T],
        batch: usize,
        seq: usize,
    ) -> Vec<T> {
        let rows = batch * seq;
        let dg = self.fc2.backward(store, &cache.g, dy, rows, true).expect("dx requested");
        let df1 = gelu_backward(&cache.f1, &dg);
        let dh2 = self.fc1.backward(store, &cache.h2, &df1, rows, true).expect("dx requested");
        let dx1_mlp = self.ln2.backward(store, &cache.ln2, &dh2);
        let dx1: Vec<T> = dy.iter().zip(&dx1_mlp).map(|(&a, &b)| a + b).collect();
        let dh1 = self.attn.backward(store, &cache.attn, &dx1, batch, seq);
        let dx_attn = self.ln1.backward(store, &cache.ln1, &dh1);
        dx1.iter().zip(&dx_attn).map(|(&a, &b)| a + b).collect()
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct TransformerCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl Transformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim, rng);
        Self { blocks, norm }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        seq: usize,
    ) -> (Vec<T>, TransformerCache<T>) {
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(store, &h, batch, seq);
            caches.push(cache);
            h = next;
        }
        let (y, norm) = self.norm.forward(store, &h);
        (y, TransformerCache { blocks: caches, norm })
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &TransformerCache<T>,
        dy: &[T],
        batch: usize,
        seq: usize,
    ) -> Vec<T> {
        let mut d = self.norm.backward(store, &cache.norm, dy);
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(store, c, &d, batch, seq);
        }
        d
    }
}
