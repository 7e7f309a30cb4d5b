//! Plain slice kernels shared by forward and backward passes.
//!
//! All loops run single-threaded in a fixed order, so results are
//! bit-reproducible on a given platform.

use alloc::vec;
use alloc::vec::Vec;

/// `C = A · B` with `A: m×k`, `B: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `C = A · Bᵀ` with `A: m×k`, `B: n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `C = Aᵀ · B` with `A: k×m`, `B: k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·KH·KW) × (OH·OW)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.width as isize {
                            continue;
                        }
                        dst[oh * g.out_w + ow] = x[(c * g.height + ih as usize) * g.width + iw as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub fn col2im_add(cols_data: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let cols = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.width as isize {
                            continue;
                        }
                        dx[(c * g.height + ih as usize) * g.width + iw as usize] += src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        let bt = transpose(&b, 3, 2);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn im2col_identity_kernel() {
        let g = ConvGeometry {
            channels: 1,
            height: 2,
            width: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            out_h: 2,
            out_w: 2,
        };
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(im2col(&x, &g), x.to_vec());
        let mut dx = [0.0; 4];
        col2im_add(&x, &g, &mut dx);
        assert_eq!(dx, x);
    }
}
