//! Layer building blocks. Each layer owns [`ParamId`]s into a shared
//! [`Params`] store and builds graph nodes on demand, so the same layer
//! definition runs trainable or frozen depending on how the store was
//! bound.

use ndarray::{Array3, ArrayD, IxDyn};

use super::{Bound, Init, ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Affine map over the last input axis.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Fan-in scaled init: `std = sqrt(1 / d_in)`.
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self::with_std(p, name, d_in, d_out, std)
    }

    /// Zero-initialised weights and bias — an identity-preserving output
    /// projection for residual branches.
    pub fn new_zeroed<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: p.add(&format!("{name}.w"), &[d_out, d_in], Init::Zeros),
            b: p.add(&format!("{name}.b"), &[d_out], Init::Zeros),
        }
    }

    pub fn with_std<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        Linear {
            w: p.add(&format!("{name}.w"), &[d_out, d_in], Init::Normal { std }),
            b: p.add(&format!("{name}.b"), &[d_out], Init::Zeros),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound.var(self.w), bound.var(self.b))
    }
}

/// 2-D convolution with square kernel.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-style init on the fan-in `c_in * k * k`.
    pub fn new<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            w: p.add(&format!("{name}.w"), &[c_out, c_in, k, k], Init::Normal { std }),
            b: p.add(&format!("{name}.b"), &[c_out], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn new_zeroed<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: p.add(&format!("{name}.w"), &[c_out, c_in, k, k], Init::Zeros),
            b: p.add(&format!("{name}.b"), &[c_out], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        g.conv2d(x, bound.var(self.w), bound.var(self.b), self.stride, self.pad)
    }
}

/// Group normalisation over `[N,C,H,W]`.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: p.add(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: p.add(&format!("{name}.beta"), &[channels], Init::Zeros),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        g.group_norm(x, bound.var(self.gamma), bound.var(self.beta), self.groups, self.eps)
    }
}

/// Layer normalisation over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: p.add(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: p.add(&format!("{name}.beta"), &[dim], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        g.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), self.eps)
    }
}

/// Two-layer feed-forward with SiLU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(p, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(p, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, bound, x);
        let h = g.silu(h);
        self.fc2.forward(g, bound, h)
    }
}

/// Learned row-embedding table.
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, count: usize, dim: usize) -> Self {
        Embedding {
            table: p.add(name, &[count, dim], Init::Normal { std: 0.02 }),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, idx: &[usize]) -> Var {
        g.gather_rows(bound.var(self.table), idx)
    }
}

/// Multi-head scaled-dot-product attention over `[B, T, D]` tokens.
///
/// `zero_out` zero-initialises the output projection so the block is an
/// exact no-op behind a residual connection at init.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim must divide heads");
        let wo = if zero_out {
            Linear::new_zeroed(p, &format!("{name}.wo"), dim, dim)
        } else {
            Linear::new(p, &format!("{name}.wo"), dim, dim)
        };
        MultiHeadAttention {
            wq: Linear::new(p, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(p, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(p, &format!("{name}.wv"), dim, dim),
            wo,
            heads,
            dim,
        }
    }

    /// `q_in: [B, Tq, D]`, `kv_in: [B, Tk, D]`; optional additive mask
    /// `[B, Tq, Tk]` applied to the pre-softmax scores of every head.
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Array3<E>>,
    ) -> Var {
        let (b, tq) = (g.shape(q_in)[0], g.shape(q_in)[1]);
        let tk = g.shape(kv_in)[1];
        let (h, d) = (self.heads, self.dim);
        let dh = d / h;

        let split = |g: &mut Graph<E>, x: Var, t: usize| {
            let x = g.reshape(x, &[b, t, h, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, dh])
        };

        let q = self.wq.forward(g, bound, q_in);
        let k = self.wk.forward(g, bound, kv_in);
        let v = self.wv.forward(g, bound, kv_in);
        let q = split(g, q, tq);
        let k = split(g, k, tk);
        let v = split(g, v, tk);

        let scores = g.batch_matmul(q, k, true);
        let mut scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            assert_eq!(m.shape(), &[b, tq, tk], "attention mask shape");
            let mut tiled = ArrayD::<E>::zeros(IxDyn(&[b * h, tq, tk]));
            for bi in 0..b {
                for hi in 0..h {
                    tiled
                        .index_axis_mut(ndarray::Axis(0), bi * h + hi)
                        .assign(&m.index_axis(ndarray::Axis(0), bi));
                }
            }
            let mvar = g.constant(tiled);
            scaled = g.add(scaled, mvar);
        }
        let attn = g.softmax_last(scaled);
        let ctx = g.batch_matmul(attn, v, false);
        let ctx = g.reshape(ctx, &[b, h, tq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, tq, d]);
        self.wo.forward(g, bound, ctx)
    }
}
