//! Graph-building helpers shared by the encoder-style transformers (the
//! query-pooling mapper and the tiny audio encoder).

use rand::Rng;

use crate::autograd::{AttnMask, Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Var {
    let y = g.matmul_t(x, weight);
    match bias {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Uniform fan-in initialisation for an `out × in` weight.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
    bias: bool,
    rng: &mut R,
) {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::uniform(d_out, d_in, bound, rng));
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(1, d_out));
    }
}

pub fn init_encoder_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut R) {
    store.insert(format!("{prefix}.norm1"), Tensor::full(1, d, 1.0));
    store.insert(format!("{prefix}.norm2"), Tensor::full(1, d, 1.0));
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, true, rng);
    }
    init_linear(store, &format!("{prefix}.ff1"), ff, d, true, rng);
    init_linear(store, &format!("{prefix}.ff2"), d, ff, true, rng);
}

fn lin(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    linear(g, x, w, b)
}

/// Pre-norm bidirectional transformer block.
pub fn encoder_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    let n1 = g.rms_norm(x, p.var(&format!("{prefix}.norm1")), NORM_EPS);
    let q = lin(g, p, &format!("{prefix}.q"), n1);
    let k = lin(g, p, &format!("{prefix}.k"), n1);
    let v = lin(g, p, &format!("{prefix}.v"), n1);
    let a = g.attention(q, k, v, heads, AttnMask::Full);
    let o = lin(g, p, &format!("{prefix}.o"), a);
    let x = g.add(x, o);
    let n2 = g.rms_norm(x, p.var(&format!("{prefix}.norm2")), NORM_EPS);
    let h = lin(g, p, &format!("{prefix}.ff1"), n2);
    let h = g.silu(h);
    let h = lin(g, p, &format!("{prefix}.ff2"), h);
    g.add(x, h)
}
