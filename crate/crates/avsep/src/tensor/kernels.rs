//! Plain array math used by both forward evaluation and backward passes.

use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayView4};

/// Zero-pad a [C, H, W] block spatially.
pub fn pad2d(x: &ArrayView3<f64>, pad: usize) -> Array3<f64> {
    if pad == 0 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(ndarray::s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Output spatial size of a convolution.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// im2col: unfold [C, H, W] into [C*kh*kw, Hout*Wout] for a given
/// stride/padding, so convolution becomes one matrix product.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let padded = pad2d(x, pad);
    let mut col = Array2::zeros((c * kh * kw, hout * wout));

    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_row = col.row_mut(row);
                let col_slice = col_row.as_slice_mut().expect("standard layout");
                for oh in 0..hout {
                    let src_row = padded.slice(ndarray::s![ci, oh * stride + ki, ..]);
                    let src = src_row.as_slice().expect("standard layout");
                    let dst = &mut col_slice[oh * wout..(oh + 1) * wout];
                    if stride == 1 {
                        dst.copy_from_slice(&src[kj..kj + wout]);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            *d = src[ow * stride + kj];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a [C*kh*kw, Hout*Wout] gradient back
/// to [C, H, W].
pub fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(w, kw, stride, pad);
    let mut padded = Array3::zeros((c, h + 2 * pad, w + 2 * pad));

    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dcol_row = dcol.row(row);
                let src = dcol_row.as_slice().expect("standard layout");
                for oh in 0..hout {
                    let mut dst_row = padded.slice_mut(ndarray::s![ci, oh * stride + ki, ..]);
                    let dst = dst_row.as_slice_mut().expect("standard layout");
                    let s = &src[oh * wout..(oh + 1) * wout];
                    if stride == 1 {
                        for (d, v) in dst[kj..kj + wout].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (ow, v) in s.iter().enumerate() {
                            dst[ow * stride + kj] += v;
                        }
                    }
                }
            }
        }
    }

    if pad == 0 {
        padded
    } else {
        padded.slice(ndarray::s![.., pad..pad + h, pad..pad + w]).to_owned()
    }
}

/// Convolution forward: x [Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout] ->
/// [Cout,Hout,Wout].
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cout, cin, kh, kw) = w.dim();
    let (xc, h, wd) = x.dim();
    assert_eq!(cin, xc, "conv2d: input channels {xc} != weight cin {cin}");
    let hout = conv_out_len(h, kh, stride, pad);
    let wout = conv_out_len(wd, kw, stride, pad);

    let col = im2col(x, kh, kw, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight standard layout")
        .to_owned();
    let mut out = w_mat.dot(&col);
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
        row += bias;
    }
    out.into_shape_with_order((cout, hout, wout)).expect("conv output shape")
}

/// Convolution backward: gradients for input, weight, and bias.
/// Recomputes im2col rather than saving it.
pub fn conv2d_backward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>) {
    let (cout, cin, kh, kw) = w.dim();
    let (_, h, wd) = x.dim();
    let (dyc, hout, wout) = dy.dim();
    assert_eq!(dyc, cout);

    let dy_mat = dy
        .to_shape((cout, hout * wout))
        .expect("dy standard layout")
        .to_owned();

    let col = im2col(x, kh, kw, stride, pad);
    let dw_mat = dy_mat.dot(&col.t());
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("dw shape");

    let db = Array1::from_iter(dy_mat.rows().into_iter().map(|r| r.sum()));

    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight standard layout")
        .to_owned();
    let dcol = w_mat.t().dot(&dy_mat);
    let dx = col2im(&dcol, cin, h, wd, kh, kw, stride, pad);

    (dx, dw, db)
}

/// Numerically stable softmax over the last axis of a [rows, n] matrix,
/// in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};

    #[test]
    fn conv_identity_kernel() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        // 1x1 kernel selecting channel 1.
        let mut w = Array4::zeros((1, 2, 1, 1));
        w[[0, 1, 0, 0]] = 1.0;
        let b = Array1::zeros(1);
        let y = conv2d_forward(&x.view(), &w.view(), &b, 1, 0);
        assert_eq!(y.dim(), (1, 5, 5));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(y[[0, i, j]], x[[1, i, j]]);
            }
        }
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((3, 6, 7), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let y = conv2d_forward(&x.view(), &w.view(), &b, stride, pad);
            let hout = conv_out_len(6, 3, stride, pad);
            let wout = conv_out_len(7, 3, stride, pad);
            assert_eq!(y.dim(), (4, hout, wout));
            for co in 0..4 {
                for oh in 0..hout {
                    for ow in 0..wout {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < 6 && (iw as usize) < 7 {
                                        acc += x[[ci, ih as usize, iw as usize]] * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        assert!(
                            (y[[co, oh, ow]] - acc).abs() < 1e-12,
                            "stride {stride} pad {pad} at ({co},{oh},{ow})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)> for random g: the linear maps
        // are transposes of each other.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let x = Array3::from_shape_fn((2, 5, 6), |_| rng.gen_range(-1.0..1.0));
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let col = im2col(&x.view(), 3, 3, stride, pad);
            let g = Array2::from_shape_fn(col.dim(), |_| rng.gen_range(-1.0..1.0));
            let lhs: f64 = (&col * &g).sum();
            let back = col2im(&g, 2, 5, 6, 3, 3, stride, pad);
            let rhs: f64 = (&x * &back).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }
}
