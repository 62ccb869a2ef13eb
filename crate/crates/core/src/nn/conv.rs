//! Convolution via im2col + GEMM.

use ndarray::{Array2, Array4};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds `x` (N, C, H, W) into a (N*Ho*Wo, C*k*k) patch matrix.
pub fn im2col(x: &Array4<f64>, geo: ConvGeometry) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (geo.out_size(h), geo.out_size(w));
    let k = geo.kernel;
    let row_len = c * k * k;
    let mut cols = vec![0.0; n * ho * wo * row_len];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * row_len;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane + iy as usize * w;
                        let dst = row + (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + kx] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * ho * wo, row_len), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), geo: ConvGeometry) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let (ho, wo) = (geo.out_size(h), geo.out_size(w));
    let k = geo.kernel;
    let row_len = c * k * k;
    let mut out = vec![0.0; n * c * h * w];
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * row_len;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = plane + iy as usize * w;
                        let src = row + (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst + ix as usize] += cs[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(shape, out).expect("col2im shape")
}

/// Reorders a (N*Ho*Wo, Cout) GEMM result into (N, Cout, Ho, Wo).
pub fn rows_to_nchw(mat: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
    let cout = mat.ncols();
    let mut out = Array4::zeros((n, cout, ho, wo));
    let spatial = ho * wo;
    {
        let dst = out.as_slice_mut().expect("fresh array");
        for (r, row) in mat.outer_iter().enumerate() {
            let b = r / spatial;
            let s = r % spatial;
            for (co, v) in row.iter().enumerate() {
                dst[(b * cout + co) * spatial + s] = *v;
            }
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let spatial = h * w;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * spatial * c];
    for b in 0..n {
        for ch in 0..c {
            let src = (b * c + ch) * spatial;
            for s in 0..spatial {
                out[(b * spatial + s) * c + ch] = xs[src + s];
            }
        }
    }
    Array2::from_shape_vec((n * spatial, c), out).expect("rows shape")
}
