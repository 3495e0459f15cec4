//! Dense row-major `f64` tensors and the handful of kernels the model needs.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Prng;

const VLAT_MAGIC: &[u8; 4] = b"VLAT";
const VLAT_VERSION: u32 = 1;

/// A dense n-dimensional array of `f64` in row-major order.
///
/// Rank-2 views are used almost everywhere: a rank-1 tensor of length `n`
/// behaves as a `1 x n` row, and higher ranks collapse trailing dimensions
/// into columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Input(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Prng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from `U(lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of the rank-2 view.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count of the rank-2 view.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| s * x)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or Inf")))
        }
    }

    /// Rows `start..start + len` of the rank-2 view.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() {
            return Err(Error::Input(format!(
                "row range {start}..{} out of bounds for {} rows",
                start + len,
                self.rows()
            )));
        }
        let c = self.cols();
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    /// Column means of the rank-2 view, as a vector.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        if r > 0 {
            for o in &mut out {
                *o /= r as f64;
            }
        }
        Tensor::vector(out)
    }

    pub fn to_vlat_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_vlat(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_vlat<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(VLAT_MAGIC)?;
        w.write_all(&VLAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_vlat_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Self::read_vlat(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                cursor.len()
            )));
        }
        Ok(t)
    }

    pub fn read_vlat<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != VLAT_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VLAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        let mut word = [0u8; 8];
        for _ in 0..n {
            read_exact(r, &mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Tensor { shape, data })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

// Raw kernels over row-major slices.

/// `c[m x q] = a[m x p] . b[p x q]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for i in 0..m {
        let crow = &mut c[i * q..(i + 1) * q];
        for l in 0..p {
            let x = a[i * p + l];
            if x == 0.0 {
                continue;
            }
            let brow = &b[l * q..(l + 1) * q];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
    c
}

/// `c[m x q] = a[m x p] . b[q x p]^T`
pub(crate) fn mm_t(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            c[i * q + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[m x q] = a[p x m]^T . b[p x q]`
pub(crate) fn t_mm(a: &[f64], b: &[f64], p: usize, m: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for l in 0..p {
        let brow = &b[l * q..(l + 1) * q];
        for i in 0..m {
            let x = a[l * m + i];
            if x == 0.0 {
                continue;
            }
            let crow = &mut c[i * q..(i + 1) * q];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
    c
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
    Ok(Tensor {
        shape: vec![m, q],
        data: mm(&a.data, &b.data, m, p, q),
    })
}

/// Row-wise softmax of the rank-2 view, stabilised by subtracting each row max.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation of a single vector: `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.len();
    if d == 0 {
        return Err(Error::Input("layer_norm needs d >= 1".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mean = x.data.iter().sum::<f64>() / d as f64;
    let var = x.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + eps).sqrt();
    let data = x
        .data
        .iter()
        .zip(&gain.data)
        .zip(&bias.data)
        .map(|((v, g), b)| g * (v - mean) * inv + b)
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_scalar() {
        let id = Tensor::identity(2);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let two = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let three = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Prng::new(3, 0);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += a.at(i, l) * b.at(l, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::vector(vec![0.0, 2f64.ln()]));
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&Tensor::vector(vec![1000.0, 1000.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::filled(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::filled(&[4], 3.5), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one = Tensor::filled(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = Prng::new(11, 2);
        let x = Tensor::randn(&[8], 2.0, &mut rng);
        let g = Tensor::randn(&[8], 1.0, &mut rng);
        let b = Tensor::randn(&[8], 1.0, &mut rng);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let xs = x.data();
        let mean: f64 = xs.iter().sum::<f64>() / 8.0;
        let var: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for i in 0..8 {
            let expect = g.data()[i] * (xs[i] - mean) / (var + 1e-5).sqrt() + b.data()[i];
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vlat_round_trip_and_truncation() {
        let mut rng = Prng::new(1, 1);
        let t = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let bytes = t.to_vlat_bytes();
        assert_eq!(&bytes[..4], b"VLAT");
        assert_eq!(Tensor::from_vlat_bytes(&bytes).unwrap(), t);
        assert!(matches!(
            Tensor::from_vlat_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
