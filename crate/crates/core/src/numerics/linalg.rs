//! Dense decompositions backed by `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{Prng, Tensor};

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("consistent dims")
}

/// A `rows x cols` matrix with orthonormal rows (when `rows <= cols`) or
/// orthonormal columns (otherwise), from the QR factor of a seeded Gaussian.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Prng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = Tensor::randn(&[tall, short], 1.0, rng);
    let qr = to_dmatrix(&g).qr();
    let mut q = qr.q();
    // Fix the sign ambiguity so the draw is a deterministic function of `g`.
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            for i in 0..tall {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let q = from_dmatrix(&q);
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
/// Returns `(values, vectors)` with eigenvectors as the columns of `vectors`.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::shape("symmetric_eigen", m.shape(), m.shape()));
    }
    let n = m.rows();
    let eig = to_dmatrix(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vecs[row * n + col] = eig.eigenvectors[(row, src)];
        }
    }
    Ok((values, Tensor::matrix(n, n, vecs)?))
}

/// Largest singular value via a full SVD.
pub fn spectral_norm_exact(m: &Tensor) -> f64 {
    to_dmatrix(m)
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}
