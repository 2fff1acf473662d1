//! Dense and sparse helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::convert::serial::convert_csr_dense;
use nalgebra_sparse::CsrMatrix;

use crate::Scalar;

/// Builds a CSR matrix from triplets, summing duplicates.
///
/// Panics if an index is out of range.
pub fn csr_from_triplets<T: Scalar>(
    nrows: usize,
    ncols: usize,
    triplets: impl IntoIterator<Item = (usize, usize, T)>,
) -> CsrMatrix<T> {
    let triplets: Vec<_> = triplets.into_iter().collect();
    let mut counts = vec![0usize; nrows + 1];
    for &(i, j, _) in &triplets {
        assert!(i < nrows && j < ncols, "triplet ({i}, {j}) outside {nrows}x{ncols}");
        counts[i + 1] += 1;
    }
    for i in 0..nrows {
        counts[i + 1] += counts[i];
    }
    let mut slots = counts.clone();
    let mut by_row = vec![(0usize, T::zero()); triplets.len()];
    for (i, j, v) in triplets {
        by_row[slots[i]] = (j, v);
        slots[i] += 1;
    }
    let mut offsets = Vec::with_capacity(nrows + 1);
    let mut cols = Vec::with_capacity(by_row.len());
    let mut vals = Vec::with_capacity(by_row.len());
    offsets.push(0);
    for i in 0..nrows {
        let row = &mut by_row[counts[i]..counts[i + 1]];
        row.sort_unstable_by_key(|e| e.0);
        for &(j, v) in row.iter() {
            if cols.len() > offsets[i] && cols.last() == Some(&j) {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                cols.push(j);
                vals.push(v);
            }
        }
        offsets.push(cols.len());
    }
    CsrMatrix::try_from_csr_data(nrows, ncols, offsets, cols, vals).expect("sorted CSR data is valid")
}

pub fn csr_to_dense<T: Scalar>(m: &CsrMatrix<T>) -> DMatrix<T> {
    convert_csr_dense(m)
}

/// `out = m * x`
pub fn spmv<T: Scalar>(m: &CsrMatrix<T>, x: &DVector<T>, out: &mut DVector<T>) {
    let (offsets, cols, vals) = m.csr_data();
    let x = x.as_slice();
    for (o, w) in out.as_mut_slice().iter_mut().zip(offsets.windows(2)) {
        let (c, v) = (&cols[w[0]..w[1]], &vals[w[0]..w[1]]);
        *o = c.iter().zip(v).fold(T::zero(), |acc, (&j, &a)| acc + a * x[j]);
    }
}

/// `I + alpha * g` for sparse square `g`.
pub fn identity_plus_scaled<T: Scalar>(g: &CsrMatrix<T>, alpha: T) -> CsrMatrix<T> {
    let n = g.nrows();
    let diag = (0..n).map(|i| (i, i, T::one()));
    let off = g.triplet_iter().map(|(i, j, v)| (i, j, alpha * *v));
    csr_from_triplets(n, n, diag.chain(off))
}

pub fn max_abs_entry<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric<T: Scalar>(m: &DMatrix<T>, tol: T) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest singular value. Symmetric inputs use the symmetric eigensolver,
/// everything else a dense SVD.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    if is_symmetric(m, T::zero()) {
        m.clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    } else {
        m.singular_values().iter().fold(T::zero(), |acc, v| acc.max(*v))
    }
}

pub fn spectral_norm_sparse<T: Scalar>(m: &CsrMatrix<T>) -> T {
    spectral_norm(&csr_to_dense(m))
}

/// Largest eigenvalue of the symmetric part `(m + mᵀ)/2`.
pub fn max_symmetric_part_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let sym = (m + m.transpose()) * T::lit(0.5);
    sym.symmetric_eigenvalues()
        .iter()
        .fold(T::min_value().unwrap_or(-T::one() / T::eps()), |acc, v| acc.max(*v))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(T::max_value().unwrap_or(T::one() / T::eps()), |acc, v| acc.min(*v))
}

/// Largest real part over the (complex) spectrum of a square matrix.
pub fn max_real_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    m.complex_eigenvalues()
        .iter()
        .fold(T::min_value().unwrap_or(-T::one() / T::eps()), |acc, v| acc.max(v.re))
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_identity() {
        let i5 = DMatrix::<f64>::identity(5, 5);
        assert!((spectral_norm(&i5) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_norm_diagonal_negative_entry() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0f64, 0.0, 0.0, -4.0]);
        assert!((spectral_norm(&d) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_norm_nilpotent() {
        // singular values of [[0,2],[0,0]] are 2 and 0
        let m = DMatrix::from_row_slice(2, 2, &[0.0f64, 2.0, 0.0, 0.0]);
        assert!((spectral_norm(&m) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_f32() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0f32, 0.0, 0.0, -4.0]);
        assert!((spectral_norm(&d) - 4.0).abs() < 1e-5);
    }

    #[test]
    fn spmv_matches_dense() {
        let m = csr_from_triplets(3, 3, [(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0), (2, 0, 4.0), (2, 0, 1.0)]);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut y = DVector::zeros(3);
        spmv(&m, &x, &mut y);
        let dense = csr_to_dense(&m) * &x;
        assert_eq!(y, dense);
        assert_eq!(y[2], 5.0);
    }
}
