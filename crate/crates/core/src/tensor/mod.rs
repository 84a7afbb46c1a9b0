//! Reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is a define-by-run tape: every op builder evaluates its
//! result eagerly, records an [`Op`] node, and returns a [`Var`] handle
//! (an index into the tape). [`Graph::backward`] walks the tape in
//! reverse creation order, which makes gradient accumulation order —
//! and therefore floating-point results — deterministic.
//!
//! Shape violations are programming errors and panic, mirroring
//! `ndarray`'s own convention; fallible-by-design APIs live in the
//! higher-level modules and return [`crate::Result`].
//!
//! The graph is generic over [`Scalar`] so the exact same model code can
//! run in `f32` for training and `f64` for the finite-difference oracle
//! (see [`gradcheck`]).

pub mod gradcheck;
pub mod kernels;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    /// `b`'s shape is a suffix of `a`'s shape; `b` broadcasts over the rest.
    AddSuffix(Var, Var),
    /// `x: [N,C,H,W]` plus per-sample channel bias `b: [N,C]`.
    AddHwBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    /// `x: [.., in] @ w[out, in]^T + b[out]`.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Array2<E>,
        rstd: Array2<E>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    SoftmaxLast(Var),
    LogSumExpLast(Var),
    TakeDiag(Var),
    L2NormRows {
        x: Var,
        denom: Vec<E>,
        clamped: Vec<bool>,
    },
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
        from: Vec<usize>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<E: Scalar> {
    value: ArrayD<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct GradStore<E: Scalar> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Scalar> GradStore<E> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<E>> {
        self.grads[v.0].take()
    }
}

/// Reverse-mode tape. See the module docs.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn reshaped<E: Scalar>(a: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let std = if a.is_standard_layout() {
        a.to_owned()
    } else {
        a.as_standard_layout().to_owned()
    };
    std.into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

/// 2-D matmul with optional transposes, returning a dynamic-dim array.
fn gemm2<E: Scalar>(a: &ArrayD<E>, ta: bool, b: &ArrayD<E>, tb: bool) -> ArrayD<E> {
    let a2 = a
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("gemm2: lhs must be 2-D");
    let b2 = b
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("gemm2: rhs must be 2-D");
    let a2 = if ta { a2.reversed_axes() } else { a2 };
    let b2 = if tb { b2.reversed_axes() } else { b2 };
    assert_eq!(a2.shape()[1], b2.shape()[0], "gemm2: inner dim mismatch");
    let mut c = Array2::<E>::zeros((a2.shape()[0], b2.shape()[1]));
    E::gemm(E::one(), a2, b2, E::zero(), c.view_mut());
    c.into_dyn()
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extract the value of a scalar (single-element) node.
    pub fn scalar_value(&self, v: Var) -> E {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().expect("length checked above")
    }

    fn push(&mut self, value: ArrayD<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor. `trainable` marks it as a gradient sink.
    pub fn leaf(&mut self, value: ArrayD<E>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<E>) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    /// `a + b` where `b.shape()` equals a suffix of `a.shape()`.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_suffix: {sb:?} is not a suffix of {sa:?}"
        );
        let bv = self.nodes[b.0]
            .value
            .broadcast(IxDyn(sa))
            .expect("suffix shapes broadcast");
        let v = &self.nodes[a.0].value + &bv;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::AddSuffix(a, b), g)
    }

    /// `x[n,c,h,w] + b[n,c]` broadcast over spatial dims.
    pub fn add_hw_bias(&mut self, x: Var, b: Var) -> Var {
        let (sx, sb) = (self.shape(x), self.shape(b));
        assert_eq!(sx.len(), 4, "add_hw_bias: x must be [N,C,H,W]");
        assert_eq!(sb, &sx[..2], "add_hw_bias: b must be [N,C]");
        let mut v = self.nodes[x.0].value.to_owned();
        let bval = &self.nodes[b.0].value;
        for n in 0..sx[0] {
            for c in 0..sx[1] {
                let bias = bval[[n, c]];
                v.index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|t| t + bias);
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(v, Op::AddHwBias(x, b), g)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a @ b^T` — the attention-score shape.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = gemm2(&self.nodes[a.0].value, ta, &self.nodes[b.0].value, tb);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul { a, b, ta, tb }, g)
    }

    /// `[B,m,k] @ [B,k,n]` (or `[B,n,k]` when `tb`), batched over axis 0.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "batch_matmul: lhs must be 3-D");
        assert_eq!(sb.len(), 3, "batch_matmul: rhs must be 3-D");
        assert_eq!(sa[0], sb[0], "batch_matmul: batch mismatch");
        let (m, k) = (sa[1], sa[2]);
        let n = if tb { sb[1] } else { sb[2] };
        let k2 = if tb { sb[2] } else { sb[1] };
        assert_eq!(k, k2, "batch_matmul: inner dim mismatch");
        let mut v = ArrayD::<E>::zeros(IxDyn(&[sa[0], m, n]));
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..sa[0] {
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                let ai = ai.into_dimensionality::<ndarray::Ix2>().expect("3-D lhs");
                let bi = bi.into_dimensionality::<ndarray::Ix2>().expect("3-D rhs");
                let bi = if tb { bi.reversed_axes() } else { bi };
                let mut ci = v.index_axis_mut(Axis(0), i);
                let ci = ci
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("3-D out");
                E::gemm(E::one(), ai, bi, E::zero(), ci);
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::BatchMatMul { a, b, tb }, g)
    }

    /// Affine map over the last axis: `x[.., in] -> [.., out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let (sw, sb) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        assert_eq!(sw.len(), 2, "linear: w must be [out, in]");
        assert_eq!(sb, [sw[0]], "linear: b must be [out]");
        let d_in = *sx.last().expect("linear: x must have rank >= 1");
        assert_eq!(d_in, sw[1], "linear: input dim mismatch");
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = reshaped(&self.nodes[x.0].value, &[rows, d_in]);
        let mut y = gemm2(&x2, false, &self.nodes[w.0].value, true);
        {
            let bv = &self.nodes[b.0].value;
            let bview = bv.broadcast(y.raw_dim()).expect("bias row-broadcasts");
            y += &bview;
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().expect("rank >= 1") = sw[0];
        let y = reshaped(&y, &out_shape);
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(y, Op::Linear { x, w, b }, g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        assert_eq!(self.shape(x).len(), 4, "conv2d: x must be [N,C,H,W]");
        assert_eq!(self.shape(w).len(), 4, "conv2d: w must be [O,I,kh,kw]");
        let v = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    // ---- normalisation ----

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "group_norm: x must be [N,C,H,W]");
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(groups > 0 && c % groups == 0, "group_norm: C not divisible by groups");
        assert_eq!(self.shape(gamma), &[c], "group_norm: gamma must be [C]");
        assert_eq!(self.shape(beta), &[c], "group_norm: beta must be [C]");
        let cg = c / groups;
        let m = E::from_f64((cg * h * w) as f64);
        let eps = E::from_f64(eps);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut y = ArrayD::<E>::zeros(IxDyn(&sx));
        let mut mean = Array2::<E>::zeros((n, groups));
        let mut rstd = Array2::<E>::zeros((n, groups));
        for ni in 0..n {
            for g in 0..groups {
                let sl = xv
                    .index_axis(Axis(0), ni)
                    .slice_axis(Axis(0), Slice::from(g * cg..(g + 1) * cg))
                    .to_owned();
                let mu = sl.iter().copied().sum::<E>() / m;
                let var = sl.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() / m;
                let r = (var + eps).sqrt().recip();
                mean[[ni, g]] = mu;
                rstd[[ni, g]] = r;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[[ch]], bv[[ch]]);
                    for iy in 0..h {
                        for ix in 0..w {
                            let xh = (xv[[ni, ch, iy, ix]] - mu) * r;
                            y[[ni, ch, iy, ix]] = ga * xh + be;
                        }
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            needs,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("layer_norm: rank >= 1");
        assert_eq!(self.shape(gamma), &[d], "layer_norm: gamma must be [D]");
        assert_eq!(self.shape(beta), &[d], "layer_norm: beta must be [D]");
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let eps = E::from_f64(eps);
        let md = E::from_f64(d as f64);
        let xv = reshaped(&self.nodes[x.0].value, &[rows, d]);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut y = Array2::<E>::zeros((rows, d));
        let mut mean = vec![E::zero(); rows];
        let mut rstd = vec![E::zero(); rows];
        for r in 0..rows {
            let row = xv.index_axis(Axis(0), r);
            let mu = row.iter().copied().sum::<E>() / md;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() / md;
            let rs = (var + eps).sqrt().recip();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..d {
                y[[r, j]] = gv[[j]] * (row[j] - mu) * rs + bv[[j]];
            }
        }
        let y = reshaped(&y.into_dyn(), &sx);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            needs,
        )
    }

    // ---- row-wise nonlinear reductions ----

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut v = self.nodes[x.0].value.to_owned();
        let last = Axis(v.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            let mx = lane.iter().copied().fold(E::neg_infinity(), E::max);
            let mut s = E::zero();
            for t in lane.iter_mut() {
                *t = (*t - mx).exp();
                s += *t;
            }
            let r = s.recip();
            for t in lane.iter_mut() {
                *t = *t * r;
            }
        }
        let g = self.ng(x);
        self.push(v, Op::SoftmaxLast(x), g)
    }

    /// Per-lane `log(sum(exp(x)))` over the last axis; output drops that axis.
    pub fn log_sum_exp_last(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let last = Axis(xv.ndim() - 1);
        let out_shape: Vec<usize> = xv.shape()[..xv.ndim() - 1].to_vec();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for lane in xv.lanes(last) {
            let mx = lane.iter().copied().fold(E::neg_infinity(), E::max);
            let s: E = lane.iter().map(|&v| (v - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("lane count matches");
        let g = self.ng(x);
        self.push(v, Op::LogSumExpLast(x), g)
    }

    /// Diagonal of a square matrix `[n, n] -> [n]`.
    pub fn take_diag(&mut self, x: Var) -> Var {
        let sx = self.shape(x);
        assert!(sx.len() == 2 && sx[0] == sx[1], "take_diag: x must be square");
        let n = sx[0];
        let xv = &self.nodes[x.0].value;
        let v = Array1::from_iter((0..n).map(|i| xv[[i, i]])).into_dyn();
        let g = self.ng(x);
        self.push(v, Op::TakeDiag(x), g)
    }

    /// Unit-normalise each row (last axis); denominators are clamped to
    /// `eps` from below so zero rows stay finite.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("l2_normalize_rows: rank >= 1");
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let eps = E::from_f64(eps);
        let xv = reshaped(&self.nodes[x.0].value, &[rows, d]);
        let mut y = Array2::<E>::zeros((rows, d));
        let mut denom = vec![E::zero(); rows];
        let mut clamped = vec![false; rows];
        for r in 0..rows {
            let row = xv.index_axis(Axis(0), r);
            let n2: E = row.iter().map(|&v| v * v).sum();
            let nrm = n2.sqrt();
            let (dn, cl) = if nrm < eps { (eps, true) } else { (nrm, false) };
            denom[r] = dn;
            clamped[r] = cl;
            let inv = dn.recip();
            for j in 0..d {
                y[[r, j]] = row[j] * inv;
            }
        }
        let y = reshaped(&y.into_dyn(), &sx);
        let g = self.ng(x);
        self.push(y, Op::L2NormRows { x, denom, clamped }, g)
    }

    // ---- activations ----

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| t * (E::one() + (-t).exp()).recip());
        let g = self.ng(x);
        self.push(v, Op::Silu(x), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(E::zero()));
        let g = self.ng(x);
        self.push(v, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| (E::one() + (-t).exp()).recip());
        let g = self.ng(x);
        self.push(v, Op::Sigmoid(x), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(E::exp);
        let g = self.ng(x);
        self.push(v, Op::Exp(x), g)
    }

    // ---- structure ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat: empty input list");
        let v = {
            let views: Vec<_> = inputs.iter().map(|v| self.nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes")
        };
        let g = inputs.iter().any(|&i| self.ng(i));
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            g,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.shape(x).to_vec();
        let v = reshaped(&self.nodes[x.0].value, shape);
        let g = self.ng(x);
        self.push(v, Op::Reshape { x, from }, g)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let g = self.ng(x);
        self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            g,
        )
    }

    /// `x[v, d] -> out[idx.len(), d]`; duplicate indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "gather_rows: x must be [V, D]");
        let (vcount, d) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::<E>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < vcount, "gather_rows: index {i} out of range {vcount}");
            for j in 0..d {
                v[[r, j]] = xv[[i, j]];
            }
        }
        let g = self.ng(x);
        self.push(
            v.into_dyn(),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            g,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 4, "upsample2x: x must be [N,C,H,W]");
        let v = kernels::upsample2x_forward(&self.nodes[x.0].value);
        let g = self.ng(x);
        self.push(v, Op::Upsample2x(x), g)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 4, "global_avg_pool: x must be [N,C,H,W]");
        let inv = E::from_f64(1.0 / (sx[2] * sx[3]) as f64);
        let v = self.nodes[x.0]
            .value
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|t| t * inv);
        let g = self.ng(x);
        self.push(v, Op::GlobalAvgPool(x), g)
    }

    // ---- reductions to scalar ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: E = self.nodes[x.0].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let g = self.ng(x);
        self.push(v, Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s: E = self.nodes[x.0].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s / E::from_f64(n as f64));
        let g = self.ng(x);
        self.push(v, Op::MeanAll(x), g)
    }

    // ---- compound conveniences ----

    /// `mean((a - b)^2)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// only nodes on a path to a trainable leaf are populated.
    pub fn backward(&self, loss: Var) -> GradStore<E> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be a single element"
        );
        let mut grads: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            E::one(),
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            // Re-seat the gradient so callers can read interior grads too.
            grads[i] = Some(gy);
        }
        GradStore { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<E>>], v: Var, delta: ArrayD<E>) {
        if !self.ng(v) {
            return;
        }
        if let Some(g) = &mut grads[v.0] {
            *g += &delta;
        } else {
            grads[v.0] = Some(delta);
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, gy: &ArrayD<E>, grads: &mut [Option<ArrayD<E>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.to_owned());
                self.accum(grads, *b, gy.to_owned());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.to_owned());
                self.accum(grads, *b, gy.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, gy * &self.nodes[b.0].value);
                self.accum(grads, *b, gy * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, gy.mapv(|t| t * c));
            }
            Op::AddScalar(a) => {
                self.accum(grads, *a, gy.to_owned());
            }
            Op::AddSuffix(a, b) => {
                self.accum(grads, *a, gy.to_owned());
                if self.ng(*b) {
                    let sb = self.shape(*b).to_vec();
                    let suffix: usize = sb.iter().product();
                    let lead = gy.len() / suffix.max(1);
                    let flat = reshaped(gy, &[lead, suffix]);
                    let summed = flat.sum_axis(Axis(0));
                    self.accum(grads, *b, reshaped(&summed.into_dyn(), &sb));
                }
            }
            Op::AddHwBias(x, b) => {
                self.accum(grads, *x, gy.to_owned());
                if self.ng(*b) {
                    let gb = gy.sum_axis(Axis(3)).sum_axis(Axis(2));
                    self.accum(grads, *b, gb.into_dyn());
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (ta, tb) = (*ta, *tb);
                if self.ng(*a) {
                    let ga = match (ta, tb) {
                        (false, false) => gemm2(gy, false, bv, true),
                        (false, true) => gemm2(gy, false, bv, false),
                        (true, false) => gemm2(bv, false, gy, true),
                        (true, true) => gemm2(bv, true, gy, true),
                    };
                    self.accum(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = match (ta, tb) {
                        (false, false) => gemm2(av, true, gy, false),
                        (false, true) => gemm2(gy, true, av, false),
                        (true, false) => gemm2(av, false, gy, false),
                        (true, true) => gemm2(gy, true, av, true),
                    };
                    self.accum(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let tb = *tb;
                let batch = av.shape()[0];
                if self.ng(*a) {
                    let mut ga = ArrayD::<E>::zeros(av.raw_dim());
                    for i in 0..batch {
                        let gyi = gy.index_axis(Axis(0), i).to_owned().into_dyn();
                        let bvi = bv.index_axis(Axis(0), i).to_owned().into_dyn();
                        // y = a @ op(b) => da = gy @ op(b)^T
                        let gai = gemm2(&gyi, false, &bvi, !tb);
                        ga.index_axis_mut(Axis(0), i).assign(&gai);
                    }
                    self.accum(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = ArrayD::<E>::zeros(bv.raw_dim());
                    for i in 0..batch {
                        let gyi = gy.index_axis(Axis(0), i).to_owned().into_dyn();
                        let avi = av.index_axis(Axis(0), i).to_owned().into_dyn();
                        // tb=false: db = a^T @ gy ; tb=true: db = gy^T @ a
                        let gbi = if tb {
                            gemm2(&gyi, true, &avi, false)
                        } else {
                            gemm2(&avi, true, &gyi, false)
                        };
                        gb.index_axis_mut(Axis(0), i).assign(&gbi);
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let d_in = *sx.last().expect("rank >= 1");
                let rows: usize = sx[..sx.len() - 1].iter().product();
                let d_out = self.shape(*w)[0];
                let gy2 = reshaped(gy, &[rows, d_out]);
                if self.ng(*x) {
                    let gx2 = gemm2(&gy2, false, &self.nodes[w.0].value, false);
                    self.accum(grads, *x, reshaped(&gx2, &sx));
                }
                if self.ng(*w) {
                    let x2 = reshaped(&self.nodes[x.0].value, &[rows, d_in]);
                    let gw = gemm2(&gy2, true, &x2, false);
                    self.accum(grads, *w, gw);
                }
                if self.ng(*b) {
                    let gb = gy2
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-D by construction")
                        .sum_axis(Axis(0));
                    self.accum(grads, *b, gb.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    *stride,
                    *pad,
                    gy,
                );
                self.accum(grads, *x, gx);
                self.accum(grads, *w, gw);
                self.accum(grads, *b, gb);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let s = xv.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let cg = c / groups;
                let m = E::from_f64((cg * h * w) as f64);
                let mut gx = ArrayD::<E>::zeros(xv.raw_dim());
                let mut gg = ArrayD::<E>::zeros(IxDyn(&[c]));
                let mut gb = ArrayD::<E>::zeros(IxDyn(&[c]));
                for ni in 0..n {
                    for g in 0..*groups {
                        let (mu, r) = (mean[[ni, g]], rstd[[ni, g]]);
                        // First pass: means of dxhat and dxhat*xhat over the group.
                        let mut s1 = E::zero();
                        let mut s2 = E::zero();
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let ga = gv[[ch]];
                            for iy in 0..h {
                                for ix in 0..w {
                                    let xh = (xv[[ni, ch, iy, ix]] - mu) * r;
                                    let dxh = gy[[ni, ch, iy, ix]] * ga;
                                    s1 += dxh;
                                    s2 += dxh * xh;
                                }
                            }
                        }
                        let (m1, m2) = (s1 / m, s2 / m);
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let ga = gv[[ch]];
                            for iy in 0..h {
                                for ix in 0..w {
                                    let xh = (xv[[ni, ch, iy, ix]] - mu) * r;
                                    let dy = gy[[ni, ch, iy, ix]];
                                    let dxh = dy * ga;
                                    gx[[ni, ch, iy, ix]] = r * (dxh - m1 - xh * m2);
                                    gg[[ch]] += dy * xh;
                                    gb[[ch]] += dy;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, gg);
                self.accum(grads, *beta, gb);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let sx = self.shape(*x).to_vec();
                let d = *sx.last().expect("rank >= 1");
                let rows: usize = sx[..sx.len() - 1].iter().product();
                let md = E::from_f64(d as f64);
                let xv = reshaped(&self.nodes[x.0].value, &[rows, d]);
                let gy2 = reshaped(gy, &[rows, d]);
                let gv = &self.nodes[gamma.0].value;
                let mut gx = Array2::<E>::zeros((rows, d));
                let mut gg = ArrayD::<E>::zeros(IxDyn(&[d]));
                let mut gb = ArrayD::<E>::zeros(IxDyn(&[d]));
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = E::zero();
                    let mut s2 = E::zero();
                    for j in 0..d {
                        let xh = (xv[[r, j]] - mu) * rs;
                        let dxh = gy2[[r, j]] * gv[[j]];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    let (m1, m2) = (s1 / md, s2 / md);
                    for j in 0..d {
                        let xh = (xv[[r, j]] - mu) * rs;
                        let dy = gy2[[r, j]];
                        let dxh = dy * gv[[j]];
                        gx[[r, j]] = rs * (dxh - m1 - xh * m2);
                        gg[[j]] += dy * xh;
                        gb[[j]] += dy;
                    }
                }
                self.accum(grads, *x, reshaped(&gx.into_dyn(), &sx));
                self.accum(grads, *gamma, gg);
                self.accum(grads, *beta, gb);
            }
            Op::SoftmaxLast(x) => {
                let yv = &self.nodes[i].value;
                let mut gx = gy * yv;
                let last = Axis(gx.ndim() - 1);
                // dx = y * (dy - sum(dy*y)) per lane.
                let sums = gx.sum_axis(last);
                let mut gx2 = gy.to_owned();
                for (mut lane, &s) in gx2.lanes_mut(last).into_iter().zip(sums.iter()) {
                    for t in lane.iter_mut() {
                        *t = *t - s;
                    }
                }
                gx = gx2 * yv;
                self.accum(grads, *x, gx);
            }
            Op::LogSumExpLast(x) => {
                let xv = &self.nodes[x.0].value;
                let lse = &self.nodes[i].value;
                let last = Axis(xv.ndim() - 1);
                let mut gx = xv.to_owned();
                for ((mut lane, &l), &g) in gx
                    .lanes_mut(last)
                    .into_iter()
                    .zip(lse.iter())
                    .zip(gy.iter())
                {
                    for t in lane.iter_mut() {
                        *t = (*t - l).exp() * g;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::TakeDiag(x) => {
                let n = self.shape(*x)[0];
                let mut gx = ArrayD::<E>::zeros(IxDyn(&[n, n]));
                for j in 0..n {
                    gx[[j, j]] = gy[[j]];
                }
                self.accum(grads, *x, gx);
            }
            Op::L2NormRows { x, denom, clamped } => {
                let sx = self.shape(*x).to_vec();
                let d = *sx.last().expect("rank >= 1");
                let rows: usize = sx[..sx.len() - 1].iter().product();
                let yv = reshaped(&self.nodes[i].value, &[rows, d]);
                let gy2 = reshaped(gy, &[rows, d]);
                let mut gx = Array2::<E>::zeros((rows, d));
                for r in 0..rows {
                    let inv = denom[r].recip();
                    if clamped[r] {
                        for j in 0..d {
                            gx[[r, j]] = gy2[[r, j]] * inv;
                        }
                    } else {
                        let mut dot = E::zero();
                        for j in 0..d {
                            dot += gy2[[r, j]] * yv[[r, j]];
                        }
                        for j in 0..d {
                            gx[[r, j]] = (gy2[[r, j]] - yv[[r, j]] * dot) * inv;
                        }
                    }
                }
                self.accum(grads, *x, reshaped(&gx.into_dyn(), &sx));
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = xv.to_owned();
                ndarray::Zip::from(&mut gx).and(gy).for_each(|t, &g| {
                    let s = (E::one() + (-*t).exp()).recip();
                    *t = g * (s * (E::one() + *t * (E::one() - s)));
                });
                self.accum(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = gy.to_owned();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|g, &t| {
                    if t <= E::zero() {
                        *g = E::zero();
                    }
                });
                self.accum(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[i].value;
                let mut gx = gy.to_owned();
                ndarray::Zip::from(&mut gx).and(yv).for_each(|g, &y| {
                    *g = *g * y * (E::one() - y);
                });
                self.accum(grads, *x, gx);
            }
            Op::Exp(x) => {
                self.accum(grads, *x, gy * &self.nodes[i].value);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0usize;
                for &inp in inputs {
                    let len = self.shape(inp)[*axis];
                    let slice = gy
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    self.accum(grads, inp, slice);
                    start += len;
                }
            }
            Op::Reshape { x, from } => {
                self.accum(grads, *x, reshaped(gy, from));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inv[a] = k;
                }
                let gx = gy
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.accum(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let sx = self.shape(*x);
                let d = sx[1];
                let mut gx = ArrayD::<E>::zeros(IxDyn(&[sx[0], d]));
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[[src, j]] += gy[[r, j]];
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Upsample2x(x) => {
                self.accum(grads, *x, kernels::upsample2x_backward(gy));
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.shape(*x).to_vec();
                let inv = E::from_f64(1.0 / (sx[2] * sx[3]) as f64);
                let mut gx = ArrayD::<E>::zeros(IxDyn(&sx));
                for n in 0..sx[0] {
                    for c in 0..sx[1] {
                        let g = gy[[n, c]] * inv;
                        gx.index_axis_mut(Axis(0), n)
                            .index_axis_mut(Axis(0), c)
                            .fill(g);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let g = *gy.iter().next().expect("scalar gradient");
                let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), g);
                self.accum(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                let g = *gy.iter().next().expect("scalar gradient") / E::from_f64(n as f64);
                let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), g);
                self.accum(grads, *x, gx);
            }
        }
    }
}
