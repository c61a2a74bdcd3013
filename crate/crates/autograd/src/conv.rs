//! 2-D convolution and transposed convolution via im2col.
//!
//! Layout is NCHW throughout. Kernels are square. A transposed convolution is
//! implemented as the adjoint of the matching forward convolution, so both
//! share the same `im2col`/`col2im` pair.

use ndarray::{Array2, Ix4, IxDyn};
#[cfg(test)]
use ndarray::ArrayD;

use crate::tape::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output spatial size of a forward convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(input + 2 * padding >= kernel, "kernel larger than padded input");
    (input + 2 * padding - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input - 1) * stride + kernel - 2 * padding
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// `[N, C, H, W]` image to `[N*oh*ow, C*k*k]` patch matrix.
fn im2col(img: &Tensor, geom: &ConvGeometry, oh: usize, ow: usize) -> Array2<f64> {
    let [n, c, h, w] = dims4(img);
    let k = geom.kernel;
    let img = img.view().into_dimensionality::<Ix4>().unwrap();
    let mut cols = Array2::zeros((n * oh * ow, c * k * k));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let mut out_row = cols.row_mut(row);
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[(ch * k + ky) * k + kx] =
                                img[[b, ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patches back into an `[n, c, h, w]` image, summing overlaps.
fn col2im(
    cols: &Array2<f64>,
    shape: [usize; 4],
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Tensor {
    let [n, c, h, w] = shape;
    let k = geom.kernel;
    let mut img = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row((b * oh + oy) * ow + ox);
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[[b, ch, iy as usize, ix as usize]] += row[(ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    img.into_dyn()
}

/// `[N*h*w, C]` rows back to `[N, C, h, w]`.
fn rows_to_nchw(rows: Array2<f64>, n: usize, h: usize, w: usize) -> Tensor {
    let c = rows.ncols();
    rows.into_shape_with_order((n, h, w, c))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// `[N, C, h, w]` to `[N*h*w, C]` rows.
fn nchw_to_rows(t: &Tensor) -> Array2<f64> {
    let [n, c, h, w] = dims4(t);
    t.view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap()
}

fn kernel_matrix(w: &Tensor) -> Array2<f64> {
    let [a, b, k1, k2] = dims4(w);
    assert_eq!(k1, k2, "only square kernels are supported");
    w.as_standard_layout()
        .into_owned()
        .into_shape_with_order((a, b * k1 * k2))
        .unwrap()
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, ConvGeometry) {
    let [n, c, h, wd] = dims4(x);
    let [o, wc, k, _] = dims4(w);
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    let geom = ConvGeometry { kernel: k, stride, padding };
    let oh = conv_out_size(h, k, stride, padding);
    let ow = conv_out_size(wd, k, stride, padding);
    let cols = im2col(x, &geom, oh, ow);
    let out = cols.dot(&kernel_matrix(w).t());
    debug_assert_eq!(out.ncols(), o);
    (rows_to_nchw(out, n, oh, ow), geom)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: &ConvGeometry,
) -> (Tensor, Tensor) {
    let [n, c, h, wd] = dims4(x);
    let [_, _, oh, ow] = dims4(g);
    let cols = im2col(x, geom, oh, ow);
    let g_rows = nchw_to_rows(g);
    let wmat = kernel_matrix(w);
    let gw = g_rows
        .t()
        .dot(&cols)
        .into_shape_with_order(IxDyn(w.shape()))
        .unwrap();
    let gcols = g_rows.dot(&wmat);
    let gx = col2im(&gcols, [n, c, h, wd], geom, oh, ow);
    (gx, gw)
}

pub(crate) fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, ConvGeometry) {
    let [n, ci, h, wd] = dims4(x);
    let [wci, co, k, _] = dims4(w);
    assert_eq!(ci, wci, "conv_transpose2d: input has {ci} channels, kernel expects {wci}");
    let geom = ConvGeometry { kernel: k, stride, padding };
    let oh = conv_transpose_out_size(h, k, stride, padding);
    let ow = conv_transpose_out_size(wd, k, stride, padding);
    let cols = nchw_to_rows(x).dot(&kernel_matrix(w));
    (col2im(&cols, [n, co, oh, ow], &geom, h, wd), geom)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: &ConvGeometry,
) -> (Tensor, Tensor) {
    let [n, _, h, wd] = dims4(x);
    let gcols = im2col(g, geom, h, wd);
    let wmat = kernel_matrix(w);
    let gx = rows_to_nchw(gcols.dot(&wmat.t()), n, h, wd);
    let gw = nchw_to_rows(x)
        .t()
        .dot(&gcols)
        .into_shape_with_order(IxDyn(w.shape()))
        .unwrap();
    (gx, gw)
}

/// Direct (loop) convolution, used to cross-check the im2col path.
#[cfg(test)]
fn conv2d_naive(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let [n, c, h, wd] = dims4(x);
    let [o, _, k, _] = dims4(w);
    let oh = conv_out_size(h, k, stride, padding);
    let ow = conv_out_size(wd, k, stride, padding);
    let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[[b, ic, iy as usize, ix as usize]] * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[b, oc, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|i| ((i * 7919) % 13) as f64 * scale - 0.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = ramp(&[2, 3, 8, 8], 0.1);
        let w = ramp(&[4, 3, 4, 4], 0.05);
        let (fast, _) = conv2d_forward(&x, &w, 2, 1);
        let slow = conv2d_naive(&x, &w, 2, 1);
        assert_eq!(fast.shape(), &[2, 4, 4, 4]);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(u), y> == <u, conv_t(y)> for the same kernel.
        let u = ramp(&[1, 2, 8, 8], 0.1);
        let w = ramp(&[3, 2, 4, 4], 0.07);
        let y = ramp(&[1, 3, 4, 4], 0.11);
        let (cu, _) = conv2d_forward(&u, &w, 2, 1);
        let (ty, _) = conv_transpose2d_forward(&y, &w, 2, 1);
        assert_eq!(ty.shape(), u.shape());
        let lhs: f64 = cu.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(ty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn output_sizes_for_stride_two_k4_p1() {
        assert_eq!(conv_out_size(64, 4, 2, 1), 32);
        assert_eq!(conv_transpose_out_size(4, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out_size(32, 4, 2, 1), 64);
    }
}
