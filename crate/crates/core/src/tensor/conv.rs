//! im2col-based 2D convolution kernels.
//!
//! The forward pass lowers each batch item to a column matrix and runs one
//! GEMM per item; the backward pass reuses the cached columns for the
//! weight gradient and scatters `W^T * dOut` back through col2im for the
//! input gradient.

use super::Scalar;

/// Output spatial extent: floor((in + 2*pad - k) / stride) + 1.
pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Fill `col` (shape [cin*k*k, oh*ow]) from one input image [cin, h, w].
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    debug_assert_eq!(col.len(), cin * k * k * oh * ow);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        dst[base..base + ow].fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[base + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add `col` (shape [cin*k*k, oh*ow]) back into one image gradient.
pub fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    debug_assert_eq!(dx.len(), cin * h * w);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    let drow = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[drow + ix as usize] += src[base + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n], all row-major contiguous.
pub fn gemm_rowmajor<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}

/// out[m,n] = a[m,k] * b'[k,n] where b' is the transpose of row-major b[n,k].
pub fn gemm_b_transposed<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        out,
        n as isize,
        1,
    );
}

/// out[m,n] = a'[m,k] * b[k,n] where a' is the transpose of row-major a[k,m].
pub fn gemm_a_transposed<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, no pad: columns are the image itself.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut col = vec![0.0; 12];
        im2col(&x, 1, 3, 4, 1, 1, 0, &mut col);
        assert_eq!(col, x);
    }

    #[test]
    fn col2im_inverts_im2col_for_disjoint_windows() {
        // stride == k: every input pixel lands in exactly one column slot.
        let x: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let mut col = vec![0.0; 16];
        im2col(&x, 1, 4, 4, 2, 2, 0, &mut col);
        let mut back = vec![0.0; 16];
        col2im_add(&col, 1, 4, 4, 2, 2, 0, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn gemm_transposed_views_agree_with_materialized_transpose() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = vec![1.0f64, 0.5, -1.0, 2.0, 0.0, 3.0]; // [2,3] -> b^T is [3,2]
        let mut out = vec![0.0; 4];
        gemm_b_transposed(2, 3, 2, &a, &b, 0.0, &mut out);
        // a[2,3] * b^T[3,2]
        let bt = [1.0, 2.0, 0.5, 0.0, -1.0, 3.0];
        let mut want = vec![0.0; 4];
        gemm_rowmajor(2, 3, 2, &a, &bt, 0.0, &mut want);
        assert_eq!(out, want);
    }
}
