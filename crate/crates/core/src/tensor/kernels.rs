//! Raw numeric kernels. Pure functions on slices; no tape involvement.

use crate::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * *bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            *cv += acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == S::ZERO {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * *bv;
            }
        }
    }
}

/// Output spatial extent of a convolution: floor((in + 2*pad - k)/stride) + 1.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one [C,H,W] sample into columns [C*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad).unwrap();
    let ow = conv_out_dim(w, kw, stride, pad).unwrap();
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let hw_out = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = S::ZERO;
                        }
                        continue;
                    }
                    let src_row = &plane[(iy as usize) * w..(iy as usize + 1) * w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back, accumulating into one [C,H,W] sample. Adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad).unwrap();
    let ow = conv_out_dim(w, kw, stride, pad).unwrap();
    let hw_out = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[(iy as usize) * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample, per-group standardization statistics. Returns (mean, rstd),
/// each of length n_samples * groups. `rstd = 1/sqrt(var + eps)` with the
/// biased variance over the group's `group_size` elements.
pub fn group_stats<S: Scalar>(
    x: &[S],
    n: usize,
    groups: usize,
    group_size: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>) {
    let mut mean = vec![S::ZERO; n * groups];
    let mut rstd = vec![S::ZERO; n * groups];
    let inv_m = S::from_f64(1.0 / group_size as f64);
    for i in 0..n * groups {
        let seg = &x[i * group_size..(i + 1) * group_size];
        let mut s = S::ZERO;
        for &v in seg {
            s += v;
        }
        let mu = s * inv_m;
        let mut var = S::ZERO;
        for &v in seg {
            let d = v - mu;
            var += d * d;
        }
        var *= inv_m;
        mean[i] = mu;
        rstd[i] = S::ONE / (var + S::from_f64(eps)).sqrt();
    }
    (mean, rstd)
}

/// Row-wise softmax over the last axis (row length `k`), stabilized by
/// max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, k: usize, out: &mut [S]) {
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let dst = &mut out[r * k..(r + 1) * k];
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.max_s(v);
        }
        let mut z = S::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - m).exp();
            *d = e;
            z += e;
        }
        let inv = S::ONE / z;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_identity() {
        // I3 * A == A for any 3x3 A.
        let eye = vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut c = vec![0.0; 9];
        gemm_nn(&eye, &a, &mut c, 3, 3, 3);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c_nn = vec![0.0; 4];
        gemm_nn(&a, &b, &mut c_nn, 2, 3, 2);
        // B^T is 2x3; A * (B^T)^T via gemm_nt.
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = vec![0.0; 4];
        gemm_nt(&a, &bt, &mut c_nt, 2, 3, 2);
        assert_eq!(c_nn, c_nt);
        // A^T is 3x2; (A^T)^T * B via gemm_tn.
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = vec![0.0; 4];
        gemm_tn(&at, &b, &mut c_tn, 2, 3, 2);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let (c, h, w, kh, kw, stride, pad) =
            (2usize, 5usize, 4usize, 3usize, 3usize, 2usize, 1usize);
        let oh = conv_out_dim(h, kh, stride, pad).unwrap();
        let ow = conv_out_dim(w, kw, stride, pad).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..c * kh * kw * oh * ow)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xt = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, kh, kw, stride, pad, &mut xt);
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = vec![0.3f64; 10];
        let mut out = vec![0.0; 10];
        softmax_rows(&x, 1, 10, &mut out);
        for v in out {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }
}
