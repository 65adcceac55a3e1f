//! im2col/col2im lowering for 2D and 3D convolutions.
//!
//! All convolutions route through matrix multiplication so the heavy work
//! lands in the BLAS-style f64 gemm inside ndarray.

use ndarray::{Array2, ArrayD, IxDyn};

/// Output extent for a strided convolution along one axis.
pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// x: [N, C, H, W] -> cols: [C*kh*kw, N*Ho*Wo]
pub fn im2col2d(
    x: &ArrayD<f64>,
    k: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = conv_out(h, k[0], stride[0], pad[0]);
    let wo = conv_out(w, k[1], stride[1], pad[1]);
    let mut cols = Array2::<f64>::zeros((c * k[0] * k[1], n * ho * wo));
    for ci in 0..c {
        for ki in 0..k[0] {
            for kj in 0..k[1] {
                let row = (ci * k[0] + ki) * k[1] + kj;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = (oh * stride[0] + ki) as isize - pad[0] as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride[1] + kj) as isize - pad[1] as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * ho + oh) * wo + ow]] =
                                x[[ni, ci, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col2d`]: scatter-adds columns back into an [N, C, H, W] array.
pub fn col2im2d(
    cols: &Array2<f64>,
    xshape: &[usize],
    k: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
) -> ArrayD<f64> {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let ho = conv_out(h, k[0], stride[0], pad[0]);
    let wo = conv_out(w, k[1], stride[1], pad[1]);
    let mut x = ArrayD::<f64>::zeros(IxDyn(xshape));
    for ci in 0..c {
        for ki in 0..k[0] {
            for kj in 0..k[1] {
                let row = (ci * k[0] + ki) * k[1] + kj;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = (oh * stride[0] + ki) as isize - pad[0] as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * stride[1] + kj) as isize - pad[1] as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            x[[ni, ci, ih as usize, iw as usize]] +=
                                cols[[row, (ni * ho + oh) * wo + ow]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// x: [N, C, D, H, W] -> cols: [C*kd*kh*kw, N*Do*Ho*Wo]
pub fn im2col3d(
    x: &ArrayD<f64>,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array2<f64> {
    let s = x.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let d_o = conv_out(d, k[0], stride[0], pad[0]);
    let ho = conv_out(h, k[1], stride[1], pad[1]);
    let wo = conv_out(w, k[2], stride[2], pad[2]);
    let mut cols = Array2::<f64>::zeros((c * k[0] * k[1] * k[2], n * d_o * ho * wo));
    for ci in 0..c {
        for kd in 0..k[0] {
            for kh in 0..k[1] {
                for kw in 0..k[2] {
                    let row = ((ci * k[0] + kd) * k[1] + kh) * k[2] + kw;
                    for ni in 0..n {
                        for od in 0..d_o {
                            let id = (od * stride[0] + kd) as isize - pad[0] as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    cols[[row, ((ni * d_o + od) * ho + oh) * wo + ow]] =
                                        x[[ni, ci, id as usize, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3d`].
pub fn col2im3d(
    cols: &Array2<f64>,
    xshape: &[usize],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> ArrayD<f64> {
    let (n, c, d, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3], xshape[4]);
    let d_o = conv_out(d, k[0], stride[0], pad[0]);
    let ho = conv_out(h, k[1], stride[1], pad[1]);
    let wo = conv_out(w, k[2], stride[2], pad[2]);
    let mut x = ArrayD::<f64>::zeros(IxDyn(xshape));
    for ci in 0..c {
        for kd in 0..k[0] {
            for kh in 0..k[1] {
                for kw in 0..k[2] {
                    let row = ((ci * k[0] + kd) * k[1] + kh) * k[2] + kw;
                    for ni in 0..n {
                        for od in 0..d_o {
                            let id = (od * stride[0] + kd) as isize - pad[0] as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    x[[ni, ci, id as usize, ih as usize, iw as usize]] +=
                                        cols[[row, ((ni * d_o + od) * ho + oh) * wo + ow]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
