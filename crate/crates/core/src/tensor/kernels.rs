//! Raw float kernels shared by the tape ops. One axpy-shaped matmul kernel
//! (the inner loop vectorizes; dot-product reductions would not without
//! reassociation) plus a 2-d transpose, so every matmul flavor in backward
//! is "transpose then accumulate".

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n], row-major.
pub fn matmul_acc<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// out[j,i] = x[i,j] for x of shape [rows, cols].
pub fn transpose2d<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Iterate the 1-d lanes of `shape` along `axis`: yields (base, stride, len).
pub fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| {
        (0..inner).map(move |i| (o * len * inner + i, inner, len))
    })
}

/// Gather a lane into a contiguous scratch buffer.
pub fn read_lane<S: Scalar>(x: &[S], base: usize, stride: usize, len: usize, buf: &mut Vec<S>) {
    buf.clear();
    buf.extend((0..len).map(|t| x[base + t * stride]));
}
