//! Layers built from graph primitives. Parameters live in a [`ParamStore`]
//! under dotted names (`<prefix>.w`, `<prefix>.gamma`, ...).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Stream) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[1, d], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, d]));
}

pub fn init_msa(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Stream) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
}

pub fn init_mlp(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Stream) {
    init_linear(store, &format!("{prefix}.fc1"), d_in, hidden, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, d_out, rng);
}

fn p(g: &mut Graph, store: &ParamStore, name: String) -> Result<Var> {
    g.param(store, &name)
}

/// `x W + b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = p(g, store, format!("{prefix}.w"))?;
    let b = p(g, store, format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Row-wise layer normalization with learnable scale and shift.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p(g, store, format!("{prefix}.gamma"))?;
    let beta = p(g, store, format!("{prefix}.beta"))?;
    let n = g.layer_norm(x)?;
    let s = g.mul(n, gamma)?;
    g.add(s, beta)
}

/// Two linear layers with GELU in between.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, store, &format!("{prefix}.fc2"), h)
}

pub struct Attention {
    pub out: Var,
    /// Attention probabilities per head, each `n x n`, rows summing to 1.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention with per-head slices of
/// shared query/key/value projections and an output projection.
pub fn multi_head_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Attention> {
    let d = g.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(format!("{d} channels across {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let k = linear(g, store, &format!("{prefix}.k"), x)?;
    let v = linear(g, store, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, vh)?);
        probs.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, store, &format!("{prefix}.o"), cat)?;
    Ok(Attention { out, probs })
}

/// Mean cross-entropy of row logits against integer targets.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (r, c) = (g.value(logits).rows(), g.value(logits).cols());
    if targets.len() != r || targets.iter().any(|&t| t >= c) {
        return Err(Error::ShapeMismatch("cross-entropy targets".into()));
    }
    let mut onehot = vec![0.0; r * c];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * c + t] = -1.0 / r as f64;
    }
    let ls = g.log_softmax_rows(logits)?;
    let w = g.constant(Tensor::matrix(r, c, onehot)?)?;
    let picked = g.mul(ls, w)?;
    g.sum(picked)
}

/// Mean Shannon entropy (nats) of the row softmax of `logits`.
pub fn softmax_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let r = g.value(logits).rows();
    let ls = g.log_softmax_rows(logits)?;
    let p = g.exp(ls)?;
    let pl = g.mul(p, ls)?;
    let s = g.sum(pl)?;
    g.scale(s, -1.0 / r as f64)
}
