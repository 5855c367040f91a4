//! Dense f64 compute kernels used by the graph primitives.
//!
//! All matrices are row-major flat slices. The loop orders are chosen so the
//! inner loop strides contiguously and autovectorizes; that is what keeps
//! single-core pretraining runs tractable.

/// `c = a @ b` where `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c = a^T @ b` where `a: [k,m]`, `b: [k,n]`, `c: [m,n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c = a @ b^T` where `a: [m,k]`, `b: [n,k]`, `c: [m,n]`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Spatial output size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold `x: [b, c, h, w]` into patch columns `[c*kh*kw, b*ho*wo]`.
///
/// Out-of-bounds taps (zero padding) contribute zeros.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = conv_out_len(h, kh, stride, padding).expect("validated by caller");
    let wo = conv_out_len(w, kw, stride, padding).expect("validated by caller");
    let ncols = b * ho * wo;
    let mut cols = vec![0.0; c * kh * kw * ncols];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * ncols + bi * ho * wo;
                    for oi in 0..ho {
                        let yi = (oi * stride + ki) as isize - padding as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let src_row = yi as usize * w;
                        let dst_row = row + oi * wo;
                        for oj in 0..wo {
                            let xj = (oj * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            cols[dst_row + oj] = plane[src_row + xj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch columns back onto the input grid (adjoint of [`im2col`]):
/// overlapping taps accumulate.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = conv_out_len(h, kh, stride, padding).expect("validated by caller");
    let wo = conv_out_len(w, kw, stride, padding).expect("validated by caller");
    let ncols = b * ho * wo;
    let mut x = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * ncols + bi * ho * wo;
                    for oi in 0..ho {
                        let yi = (oi * stride + ki) as isize - padding as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let dst_row = yi as usize * w;
                        let src_row = row + oi * wo;
                        for oj in 0..wo {
                            let xj = (oj * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            plane[dst_row + xj as usize] += cols[src_row + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Transpose a row-major `[rows, cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
