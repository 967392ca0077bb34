//! Dense complex kernels shared by the tensor code.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// c = alpha * a * b + beta * c with explicit strides (row, column).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: C64,
    a: &[C64],
    rsa: usize,
    csa: usize,
    b: &[C64],
    rsb: usize,
    csb: usize,
    beta: C64,
    c: &mut [C64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: bounds checked above; Complex<f64> is repr(C) with layout [f64; 2].
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            rsa as isize,
            csa as isize,
            b.as_ptr() as *const [f64; 2],
            rsb as isize,
            csb as isize,
            [beta.re, beta.im],
            c.as_mut_ptr() as *mut [f64; 2],
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major product of an (m x k) and a (k x n) matrix.
pub fn matmul(m: usize, k: usize, n: usize, a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut c = vec![ZERO; m * n];
    gemm(m, k, n, ONE, a, k, 1, b, n, 1, ZERO, &mut c, n, 1);
    c
}

pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[C64], dims: &[usize], perm: &[usize]) -> Vec<C64> {
    let nd = dims.len();
    assert_eq!(perm.len(), nd);
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total);
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let ist = strides(dims);
    let odims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let ost: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let last = nd - 1;
    let (ln, ls) = (odims[last], ost[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for i in 0..ln {
            out.push(data[base + i * ls]);
        }
        // odometer over the leading axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += ost[ax];
            if idx[ax] < odims[ax] {
                break;
            }
            base -= ost[ax] * odims[ax];
            idx[ax] = 0;
        }
    }
}

/// Multiply axis `axis` of a row-major tensor by `mat` (rows x dims[axis]).
pub fn mode_mul(data: &[C64], dims: &[usize], axis: usize, mat: &[C64], rows: usize) -> Vec<C64> {
    let inn = dims[axis];
    assert_eq!(mat.len(), rows * inn);
    let pre: usize = dims[..axis].iter().product();
    let post: usize = dims[axis + 1..].iter().product();
    let mut out = vec![ZERO; pre * rows * post];
    if pre <= post {
        for p in 0..pre {
            let src = &data[p * inn * post..(p + 1) * inn * post];
            let dst = &mut out[p * rows * post..(p + 1) * rows * post];
            gemm(
                rows, inn, post, ONE, mat, inn, 1, src, post, 1, ZERO, dst, post, 1,
            );
        }
    } else {
        for t in 0..post {
            gemm(
                pre,
                inn,
                rows,
                ONE,
                &data[t..],
                inn * post,
                post,
                mat,
                1,
                inn,
                ZERO,
                &mut out[t..],
                rows * post,
                post,
            );
        }
    }
    out
}

/// Multiply every axis of a cubical tensor (side r) by its own r x r matrix.
pub fn mode_mul_all(data: &[C64], r: usize, mats: &[&[C64]]) -> Vec<C64> {
    let dims = vec![r; mats.len()];
    let mut cur = data.to_vec();
    for (ax, m) in mats.iter().enumerate() {
        cur = mode_mul(&cur, &dims, ax, m, r);
    }
    cur
}

pub fn to_na(rows: usize, cols: usize, data: &[C64]) -> DMatrix<C64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn from_na(m: &DMatrix<C64>) -> Vec<C64> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Eigen-decomposition of a hermitian matrix (row-major). Eigenvalues ascending,
/// eigenvectors returned as rows.
pub fn herm_eig(n: usize, a: &[C64]) -> (Vec<f64>, Vec<Vec<C64>>) {
    let m = to_na(n, n, a);
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (vals, vecs)
}

pub fn singular_values(rows: usize, cols: usize, a: &[C64]) -> Vec<f64> {
    let m = to_na(rows, cols, a);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn frob(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dist(a: &[C64], b: &[C64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

pub fn axpy(y: &mut [C64], a: C64, x: &[C64]) {
    assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}
