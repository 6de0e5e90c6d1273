//! Raw forward/backward kernels shared by the tape ops.

use crate::real::Real;

/// `[c, h, w]` image to `[c*9, h*w]` patch matrix for a 3x3 same-padded
/// convolution.
pub fn im2col3x3<R: Real>(x: &[R], c: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let mut cols = vec![R::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatter-add patch gradients back to the image.
pub fn col2im3x3<R: Real>(cols: &[R], c: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let mut x = vec![R::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Row-major `[m,k] x [k,n]`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    R::gemm(
        m,
        k,
        n,
        R::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        R::zero(),
        &mut c,
        (n as isize, 1),
    );
    c
}

/// `a^T b` with `a: [k,m]`, `b: [k,n]`.
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    R::gemm(
        m,
        k,
        n,
        R::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        R::zero(),
        &mut c,
        (n as isize, 1),
    );
    c
}

/// `a b^T` with `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    R::gemm(
        m,
        k,
        n,
        R::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        R::zero(),
        &mut c,
        (n as isize, 1),
    );
    c
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wgt: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wgt[co * cin * 9 + ci * 9 + ky * 3 + kx]
                                    * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wgt: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let cols = im2col3x3(&x, cin, h, w);
        let out = matmul(&wgt, &cols, cout, cin * 9, h * w);
        assert_eq!(out, naive_conv(&x, &wgt, cin, cout, h, w));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col3x3(&x, c, h, w).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im3x3(&y, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn transposed_products() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0f64, 0.0, 2.0, 1.0, 0.0, 3.0]; // [2,3]
        // a^T b : [3,3]
        let tn = matmul_tn(&a, &b, 3, 2, 3);
        assert_eq!(tn, vec![5.0, 0.0, 14.0, 7.0, 0.0, 19.0, 9.0, 0.0, 24.0]);
        // a b^T : [2,2]
        let nt = matmul_nt(&a, &b, 2, 3, 2);
        assert_eq!(nt, vec![7.0, 10.0, 16.0, 22.0]);
    }
}
