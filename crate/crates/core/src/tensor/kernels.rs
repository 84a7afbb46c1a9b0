//! Dense numeric kernels used by the autodiff ops.
//!
//! Convolution is im2col + gemm. Anything batched parallelises over the
//! sample axis only — each sample owns a disjoint chunk of the output
//! buffer, so the rayon and sequential paths agree bitwise. Reductions
//! across samples (weight gradients) stay sequential by design.

use ndarray::{Array2, ArrayD, ArrayView3, ArrayViewMut2, Axis, IxDyn};

use crate::par;
use crate::scalar::Scalar;

/// Output spatial size for a conv along one axis.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one sample `[C, H, W]` into `[C*kh*kw, ho*wo]`.
fn im2col<E: Scalar>(
    x: ArrayView3<'_, E>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<E> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<E>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy, ix - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Fold `[C*kh*kw, ho*wo]` gradient columns back onto one `[C, H, W]` sample.
fn col2im<E: Scalar>(
    col: &Array2<E>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [E],
) {
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        out[(c * h + iy) * w + (ix - pad)] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// 2-D convolution, NCHW, weight `[Cout, Cin, kh, kw]`, bias `[Cout]`.
pub fn conv2d_forward<E: Scalar>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    b: &ArrayD<E>,
    stride: usize,
    pad: usize,
) -> ArrayD<E> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], c_in, "conv2d: channel mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("conv weight is standard layout");
    let mut y = ArrayD::<E>::zeros(IxDyn(&[n, c_out, ho, wo]));
    let sample_len = c_out * ho * wo;
    let ys = y.as_slice_mut().expect("freshly allocated output");
    par::for_each_chunk(ys, sample_len, |i, chunk| {
        let xs = x.index_axis(Axis(0), i);
        let xs = xs.into_dimensionality().expect("x is [N,C,H,W]");
        let col = im2col(xs, kh, kw, stride, pad, ho, wo);
        let mut yv = ArrayViewMut2::from_shape((c_out, ho * wo), chunk)
            .expect("chunk matches sample size");
        E::gemm(E::one(), w2.view(), col.view(), E::zero(), yv.view_mut());
        for (c, mut row) in yv.rows_mut().into_iter().enumerate() {
            let bias = b[[c]];
            row.mapv_inplace(|v| v + bias);
        }
    });
    y
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<E: Scalar>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    stride: usize,
    pad: usize,
    gy: &ArrayD<E>,
) -> (ArrayD<E>, ArrayD<E>, ArrayD<E>) {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
    let w2 = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("conv weight is standard layout");
    let gy_std;
    let gy = if gy.is_standard_layout() {
        gy
    } else {
        gy_std = gy.as_standard_layout().to_owned();
        &gy_std
    };

    // dX: per-sample, disjoint outputs -> parallel.
    let mut gx = ArrayD::<E>::zeros(IxDyn(&[n, c_in, h, wd]));
    let in_len = c_in * h * wd;
    let gxs = gx.as_slice_mut().expect("freshly allocated output");
    par::for_each_chunk(gxs, in_len, |i, chunk| {
        let gys = gy.index_axis(Axis(0), i);
        let gy2 = gys
            .into_shape_with_order((c_out, ho * wo))
            .expect("gy sample is contiguous");
        let mut gcol = Array2::<E>::zeros((c_in * kh * kw, ho * wo));
        E::gemm(E::one(), w2.t(), gy2.view(), E::zero(), gcol.view_mut());
        col2im(&gcol, c_in, h, wd, kh, kw, stride, pad, ho, wo, chunk);
    });

    // dW and db: reductions over samples, kept sequential for determinism.
    let mut gw2 = Array2::<E>::zeros((c_out, c_in * kh * kw));
    let mut gb = ArrayD::<E>::zeros(IxDyn(&[c_out]));
    for i in 0..n {
        let xs = x.index_axis(Axis(0), i);
        let xs = xs.into_dimensionality().expect("x is [N,C,H,W]");
        let col = im2col(xs, kh, kw, stride, pad, ho, wo);
        let gys = gy.index_axis(Axis(0), i);
        let gy2 = gys
            .into_shape_with_order((c_out, ho * wo))
            .expect("gy sample is contiguous");
        E::gemm(E::one(), gy2.view(), col.t(), E::one(), gw2.view_mut());
        for c in 0..c_out {
            gb[[c]] += gy2.row(c).iter().copied().sum::<E>();
        }
    }
    let gw = gw2
        .into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
        .expect("same element count");
    (gx, gw, gb)
}

/// Nearest-neighbour 2x upsample, NCHW.
pub fn upsample2x_forward<E: Scalar>(x: &ArrayD<E>) -> ArrayD<E> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = ArrayD::<E>::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    let plane = 4 * h * w;
    let ys = y.as_slice_mut().expect("freshly allocated output");
    par::for_each_chunk(ys, plane, |i, chunk| {
        let (ni, ci) = (i / c, i % c);
        for iy in 0..h {
            for ix in 0..w {
                let v = x[[ni, ci, iy, ix]];
                for dy in 0..2 {
                    for dx in 0..2 {
                        chunk[(2 * iy + dy) * 2 * w + 2 * ix + dx] = v;
                    }
                }
            }
        }
    });
    y
}

/// Gradient of [`upsample2x_forward`]: sum each 2x2 block.
pub fn upsample2x_backward<E: Scalar>(gy: &ArrayD<E>) -> ArrayD<E> {
    let (n, c, h2, w2) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = ArrayD::<E>::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let mut s = E::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += gy[[ni, ci, 2 * iy + dy, 2 * ix + dx]];
                        }
                    }
                    gx[[ni, ci, iy, ix]] = s;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Direct-convolution oracle: plain quadruple loop, no im2col.
    fn conv2d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = conv_out_len(h, kh, stride, pad);
        let wo = conv_out_len(wd, kw, stride, pad);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, c_out, ho, wo]));
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[co]];
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = oy * stride + ki;
                                    let ix = ox * stride + kj;
                                    if iy < pad || ix < pad {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - pad, ix - pad);
                                    if iy >= h || ix >= wd {
                                        continue;
                                    }
                                    acc += x[[ni, ci, iy, ix]] * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                        y[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], scale: f64, offset: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| ((i * 37 + 11) % 23) as f64 * scale + offset).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        // [DERIVED] im2col+gemm vs an independent direct convolution.
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = ramp(&[2, 3, 7, 6], 0.05, -0.4);
            let w = ramp(&[4, 3, 3, 3], 0.03, -0.2);
            let b = ramp(&[4], 0.1, -0.5);
            let got = conv2d_forward(&x, &w, &b, stride, pad);
            let want = conv2d_naive(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-12, "stride={stride} pad={pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_1x1_is_channel_mixing() {
        // [DERIVED] 1x1 conv equals a per-pixel matrix multiply.
        let x = ramp(&[1, 2, 3, 3], 0.1, 0.0);
        let w = ramp(&[3, 2, 1, 1], 0.2, -0.3);
        let b = ArrayD::zeros(IxDyn(&[3]));
        let y = conv2d_forward(&x, &w, &b, 1, 0);
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let want = x[[0, 0, oy, ox]] * w[[co, 0, 0, 0]]
                        + x[[0, 1, oy, ox]] * w[[co, 1, 0, 0]];
                    assert!((y[[0, co, oy, ox]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_round_trip_shapes_and_values() {
        // [TRIVIAL] each source pixel fills its 2x2 block.
        let x = ramp(&[1, 2, 2, 3], 1.0, 0.0);
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), &[1, 2, 4, 6]);
        for c in 0..2 {
            for iy in 0..2 {
                for ix in 0..3 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            assert_eq!(y[[0, c, 2 * iy + dy, 2 * ix + dx]], x[[0, c, iy, ix]]);
                        }
                    }
                }
            }
        }
        // Backward sums the block: ones gradient -> 4 everywhere.
        let g = upsample2x_backward(&ArrayD::from_elem(IxDyn(&[1, 2, 4, 6]), 1.0));
        assert!(g.iter().all(|&v| v == 4.0));
    }
}
