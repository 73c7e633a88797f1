//! Deterministic dense helpers shared by the whitening and CCA code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Row means of a d×n matrix (mean over samples).
pub fn row_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    DVector::from_fn(x.nrows(), |i, _| x.row(i).iter().sum::<f64>() / n)
}

/// `x` with `mean` subtracted from every column.
pub fn center(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    c
}

/// Sample covariance `C Cᵀ / (n - 1)` of an already centered matrix.
pub fn covariance(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let n = centered.ncols();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut c = centered * centered.transpose() / denom;
    symmetrize(&mut c);
    c
}

/// Sample cross-covariance `A Bᵀ / (n - 1)` of centered matrices.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    a * b.transpose() / denom
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Flips `v` so that its largest-magnitude entry is positive (first such
/// entry on ties).
pub fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (stable on ties) and oriented eigenvectors.
///
/// Returns `(values, vectors)` where column `i` of `vectors` pairs with
/// `values[i]`.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let d = m.nrows();
    let mut vecs = DMatrix::zeros(d, order.len());
    let mut vals = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        orient(&mut v);
        vecs.set_column(k, &DVector::from_vec(v));
        vals.push(eig.eigenvalues[i]);
    }
    (vals, vecs)
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sorted_symmetric_eigen(m);
    if vals.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v.sqrt())));
    Some(&vecs * scale * vecs.transpose())
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Vertical concatenation; every block must have `cols` columns.
pub fn vstack(blocks: &[&DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Horizontal concatenation; every block must have `rows` rows.
pub fn hstack(blocks: &[&DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}
