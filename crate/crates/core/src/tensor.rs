//! Dense row-major tensors and the numeric kernels shared by the graph
//! engine and the value-level model paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numeric precision of a computation.
///
/// Storage is always `f64`; in [`Precision::F32`] mode every produced value
/// is rounded through `f32`, emulating single-precision arithmetic while
/// keeping a single code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }

    pub fn round_tensor(self, t: Tensor) -> Tensor {
        match self {
            Precision::F64 => t,
            Precision::F32 => {
                let data = t.data.into_iter().map(|x| x as f32 as f64).collect();
                Tensor {
                    shape: t.shape,
                    data,
                }
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// Dense multi-dimensional array of real scalars in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-2 constructor; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], x: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; shape.iter().product()],
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

    /// `(rows, cols)` if this tensor is rank-2.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// True when every extent is 1 (a single stored scalar).
    pub fn is_scalar_shaped(&self) -> bool {
        self.data.len() == 1
    }

    /// The single stored value; panics unless scalar-shaped.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar_shaped(), "tensor is not scalar-shaped");
        self.data[0]
    }

    /// True iff every stored scalar is finite. NaN/Inf never error silently
    /// elsewhere; this is the explicit detection point.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = self.dims2().expect("row() needs a rank-2 tensor");
        assert!(i < r, "row index out of range");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Vertical stack of rank-2 tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let cols = parts[0].dims2().expect("vstack needs rank-2 tensors").1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2().expect("vstack needs rank-2 tensors");
            assert_eq!(c, cols, "vstack column mismatch");
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Rank-2 tensor from the given rows of `src` (row-major gather).
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let (_, c) = self.dims2().expect("gather_rows needs a rank-2 tensor");
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), c, data)
    }
}

/// Shared numeric kernels. The graph ops and the value-level forward paths
/// both call these, so the two routes are bitwise identical.
pub mod kernels {
    use super::Tensor;

    #[cfg(feature = "parallel")]
    use rayon::prelude::*;

    /// Below this many multiply-adds a parallel matmul is not worth the
    /// scheduling overhead (crossover measured with benches/parallel.rs).
    pub const PARALLEL_FLOP_THRESHOLD: usize = 2_000_000;

    fn mm_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> (usize, usize, usize) {
        let (ar, ac) = a.dims2().expect("matmul lhs must be rank-2");
        let (br, bc) = b.dims2().expect("matmul rhs must be rank-2");
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dimension mismatch");
        (m, ka, n)
    }

    /// One output row of `op(a) * op(b)`. Both the sequential and parallel
    /// drivers call this, so results are bitwise identical across backends
    /// and thread counts.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn mm_row(
        i: usize,
        out_row: &mut [f64],
        ad: &[f64],
        bd: &[f64],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) {
        match (ta, tb) {
            (false, false) => {
                let a_row = &ad[i * k..(i + 1) * k];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &bd[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            (false, true) => {
                let a_row = &ad[i * k..(i + 1) * k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in a_row.iter().zip(b_row) {
                        s += x * y;
                    }
                    *o = s;
                }
            }
            (true, false) => {
                for kk in 0..k {
                    let av = ad[kk * m + i];
                    let b_row = &bd[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += ad[kk * m + i] * bd[j * k + kk];
                    }
                    *o = s;
                }
            }
        }
    }

    /// Sequential matrix product with optional operand transposes.
    pub fn matmul_seq(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (m, k, n) = mm_dims(a, b, ta, tb);
        let mut out = vec![0.0; m * n];
        for (i, out_row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
            mm_row(i, out_row, a.data(), b.data(), m, k, n, ta, tb);
        }
        Tensor::matrix(m, n, out)
    }

    /// Row-parallel matrix product; bitwise identical to [`matmul_seq`].
    #[cfg(feature = "parallel")]
    pub fn matmul_par(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (m, k, n) = mm_dims(a, b, ta, tb);
        let mut out = vec![0.0; m * n];
        if n > 0 {
            let (ad, bd) = (a.data(), b.data());
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| mm_row(i, out_row, ad, bd, m, k, n, ta, tb));
        }
        Tensor::matrix(m, n, out)
    }

    /// Matrix product, dispatched to the parallel kernel for large shapes
    /// when the `parallel` feature is enabled.
    pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        #[cfg(feature = "parallel")]
        {
            let (m, k, n) = mm_dims(a, b, ta, tb);
            if m * k * n >= PARALLEL_FLOP_THRESHOLD {
                return matmul_par(a, b, ta, tb);
            }
        }
        matmul_seq(a, b, ta, tb)
    }

    /// Repeat a `[1, n]` row `rows` times into `[rows, n]`.
    pub fn broadcast_row(row: &Tensor, rows: usize) -> Tensor {
        let (r, n) = row.dims2().expect("broadcast_row needs a rank-2 row");
        assert_eq!(r, 1, "broadcast_row input must have one row");
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(row.data());
        }
        Tensor::matrix(rows, n, data)
    }

    /// Column-axis concatenation of two rank-2 tensors with equal rows.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
        let (ra, ca) = a.dims2().expect("concat needs rank-2 tensors");
        let (rb, cb) = b.dims2().expect("concat needs rank-2 tensors");
        assert_eq!(ra, rb, "concat row mismatch");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Tensor::matrix(ra, ca + cb, data)
    }

    /// Column-axis slice `[.., start..start+len]` of a rank-2 tensor.
    pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
        let (r, c) = x.dims2().expect("slice needs a rank-2 tensor");
        assert!(start + len <= c, "slice out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Tensor::matrix(r, len, data)
    }

    /// Euclidean norm of each row: `[m, n] -> [m, 1]`.
    pub fn l2_norm_rows(x: &Tensor) -> Tensor {
        let (r, _) = x.dims2().expect("l2_norm_rows needs a rank-2 tensor");
        let data = (0..r)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Tensor::matrix(r, 1, data)
    }

    #[inline]
    pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            slope * x
        }
    }

    /// Derivative convention: slope at exactly zero, so a zero-slope hinge
    /// has subgradient 0 at the kink.
    #[inline]
    pub fn leaky_relu_grad_scalar(x: f64, slope: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            slope
        }
    }

    /// Logistic function, written as the exp/log composition the graph
    /// engine uses so both paths agree bitwise.
    #[inline]
    pub fn sigmoid_scalar(x: f64) -> f64 {
        (-(1.0 + (-x).exp()).ln()).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    #[test]
    fn new_rejects_inconsistent_shape() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn finite_detection() {
        assert!(Tensor::vector(vec![1.0, 2.0]).is_finite());
        assert!(!Tensor::vector(vec![1.0, f64::NAN]).is_finite());
        assert!(!Tensor::scalar(1000.0f64.exp()).is_finite());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.7 - 2.0).collect());
        assert_eq!(matmul(&eye, &m, false, false), m);
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b, false, false);
        // same product written through both transposes
        let at = Tensor::matrix(3, 2, vec![1., 4., 2., 5., 3., 6.]);
        let bt = Tensor::matrix(2, 3, vec![7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul(&at, &b, true, false), c);
        assert_eq!(matmul(&a, &bt, false, true), c);
        assert_eq!(matmul(&at, &bt, true, true), c);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_matches_sequential_bitwise() {
        let mut v = 0.3f64;
        let mut next = || {
            v = (v * 997.0 + 0.123).fract();
            v * 2.0 - 1.0
        };
        let a = Tensor::matrix(33, 47, (0..33 * 47).map(|_| next()).collect());
        let b = Tensor::matrix(47, 29, (0..47 * 29).map(|_| next()).collect());
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let (x, y) = match (ta, tb) {
                (false, false) => (a.clone(), b.clone()),
                (false, true) => (
                    a.clone(),
                    Tensor::matrix(29, 47, (0..29 * 47).map(|_| next()).collect()),
                ),
                (true, false) => (
                    Tensor::matrix(47, 33, (0..47 * 33).map(|_| next()).collect()),
                    b.clone(),
                ),
                (true, true) => (
                    Tensor::matrix(47, 33, (0..47 * 33).map(|_| next()).collect()),
                    Tensor::matrix(29, 47, (0..29 * 47).map(|_| next()).collect()),
                ),
            };
            let s = matmul_seq(&x, &y, ta, tb);
            let p = matmul_par(&x, &y, ta, tb);
            assert_eq!(s.data(), p.data());
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]);
        let b = Tensor::matrix(2, 3, vec![5., 6., 7., 8., 9., 10.]);
        let c = concat_cols(&a, &b);
        assert_eq!(slice_cols(&c, 0, 2), a);
        assert_eq!(slice_cols(&c, 2, 3), b);
    }

    #[test]
    fn precision_f32_rounds() {
        let t = Tensor::scalar(0.1);
        let r = Precision::F32.round_tensor(t.clone());
        assert_eq!(r.scalar_value(), 0.1f32 as f64);
        assert_eq!(Precision::F64.round_tensor(t.clone()), t);
    }

    #[test]
    fn row_norms() {
        let x = Tensor::matrix(2, 2, vec![3., 4., 0., 0.]);
        let n = l2_norm_rows(&x);
        assert_eq!(n.data(), &[5.0, 0.0]);
    }
}
