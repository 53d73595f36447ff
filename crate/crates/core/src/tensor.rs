//! Dense row-major tensors and the primitive numeric operations that every
//! graph node reduces to.
//!
//! Training math runs on `Tensor<f64>`; the inference executor and the
//! serialized model format use `Tensor<f32>`. There is no implicit
//! broadcasting: the only row-vector broadcast is [`Tensor::add_bias`].

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Float + Default + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: cannot reshape {from:?} into {to:?}")]
    Reshape {
        op: &'static str,
        from: Vec<usize>,
        to: Vec<usize>,
    },
    #[error("{op}: mean over an empty set of rows")]
    EmptyAggregation { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array. Immutable once built; every operation returns a
/// fresh tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn ensure_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting element-count mismatches and NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        ensure_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Caller guarantees `product(shape) == data.len()` and finite data.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// tests and small literals.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let m = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == p), "ragged rows");
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(vec![m, p], data).expect("from_rows: non-finite literal")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, p] => Ok((m, p)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
        }
    }

    /// Standard matrix product. A left operand of rank > 2 is treated as a
    /// stack of rows `[prod(leading), p]`, so `[B, m, p] x [p, q]` yields
    /// `[B, m, q]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (p2, q) = rhs.dims2("matmul")?;
        if self.rank() < 2 || *self.shape.last().unwrap() != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let p = p2;
        let m = if p == 0 {
            self.shape[..self.rank() - 1].iter().product()
        } else {
            self.len() / p
        };
        let mut out = vec![T::zero(); m * q];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            let o_row = &mut out[i * q..(i + 1) * q];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * q..(kk + 1) * q];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        ensure_finite("matmul", &out)?;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = q;
        Ok(Tensor::from_parts(shape, out))
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("t_matmul")?;
        let (m2, q) = rhs.dims2("t_matmul")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); p * q];
        for r in 0..m {
            let a_row = &self.data[r * p..(r + 1) * p];
            let b_row = &rhs.data[r * q..(r + 1) * q];
            for (i, &a) in a_row.iter().enumerate() {
                for (o, &b) in out[i * q..(i + 1) * q].iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        ensure_finite("t_matmul", &out)?;
        Ok(Tensor::from_parts(vec![p, q], out))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("matmul_t")?;
        let (q, p2) = rhs.dims2("matmul_t")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * q);
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            for j in 0..q {
                let b_row = &rhs.data[j * p..(j + 1) * p];
                out.push(a_row.iter().zip(b_row).fold(T::zero(), |acc, (&a, &b)| acc + a * b));
            }
        }
        ensure_finite("matmul_t", &out)?;
        Ok(Tensor::from_parts(vec![m, q], out))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            for j in 0..p {
                out[j * m + i] = self.data[i * p + j];
            }
        }
        Ok(Tensor::from_parts(vec![p, m], out))
    }

    fn zip_with(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data: Vec<T> = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        ensure_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data.iter().map(|&v| v * factor).collect();
        ensure_finite("scale", &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Adds a `[1, p]` row vector to every row of a tensor whose last
    /// dimension is `p`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (one, p) = bias.dims2("add_bias")?;
        if one != 1 || self.shape.last() != Some(&p) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let data: Vec<T> = if p == 0 {
            Vec::new()
        } else {
            self.data
                .chunks_exact(p)
                .flat_map(|row| row.iter().zip(&bias.data).map(|(&a, &b)| a + b))
                .collect()
        };
        ensure_finite("add_bias", &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Concatenates two matrices side by side: `[m, p] ++ [m, q] -> [m, p+q]`.
    pub fn concat_cols(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        Tensor::concat(&[self, rhs], 1)
    }

    /// Concatenates same-rank tensors along `axis`; every other dimension
    /// must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat",
            expected: 1,
            shape: Vec::new(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Rank {
                op: "concat",
                expected: axis + 1,
                shape: first.shape.clone(),
            });
        }
        for part in &parts[1..] {
            let compatible = part.rank() == rank
                && part
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: part.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for part in parts {
                let chunk = part.shape[axis] * inner;
                data.extend_from_slice(&part.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("slice_cols")?;
        if start > end || end > p {
            return Err(TensorError::ColumnRange {
                op: "slice_cols",
                start,
                end,
                cols: p,
            });
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * p + start..i * p + end]);
        }
        Ok(Tensor::from_parts(vec![m, end - start], data))
    }

    /// Slices `[start, end)` along the leading dimension.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let lead = *self.shape.first().unwrap_or(&0);
        if self.rank() == 0 || start > end || end > lead {
            return Err(TensorError::ColumnRange {
                op: "slice_outer",
                start,
                end,
                cols: lead,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    /// Reinterprets the flat data under a new shape of equal element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        if new_shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::Reshape {
                op: "reshape",
                from: self.shape.clone(),
                to: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(new_shape.to_vec(), self.data.clone()))
    }

    pub fn into_reshaped(self, new_shape: &[usize]) -> Result<Tensor<T>> {
        if new_shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::Reshape {
                op: "reshape",
                from: self.shape,
                to: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(new_shape.to_vec(), self.data))
    }

    /// Column-wise arithmetic mean: `[m, p] -> [1, p]`.
    pub fn row_mean(&self) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("row_mean")?;
        if m == 0 {
            return Err(TensorError::EmptyAggregation { op: "row_mean" });
        }
        let mut acc = vec![T::zero(); p];
        for i in 0..m {
            for (a, &v) in acc.iter_mut().zip(&self.data[i * p..(i + 1) * p]) {
                *a = *a + v;
            }
        }
        let count = T::from(m).unwrap();
        let data: Vec<T> = acc.into_iter().map(|v| v / count).collect();
        ensure_finite("row_mean", &data)?;
        Ok(Tensor::from_parts(vec![1, p], data))
    }

    /// Sum over rows: `[m, p] -> [1, p]`. Used for bias gradients.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (m, p) = self.dims2("sum_rows")?;
        let mut acc = vec![T::zero(); p];
        for i in 0..m {
            for (a, &v) in acc.iter_mut().zip(&self.data[i * p..(i + 1) * p]) {
                *a = *a + v;
            }
        }
        ensure_finite("sum_rows", &acc)?;
        Ok(Tensor::from_parts(vec![1, p], acc))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let out = Tensor::eye(2).matmul(&m(&[&[3., 4.], &[5., 6.]])).unwrap();
        assert_eq!(out, m(&[&[3., 4.], &[5., 6.]]));
    }

    #[test]
    fn matmul_row_by_column() {
        let out = m(&[&[1., 2.]]).matmul(&m(&[&[3.], &[4.]])).unwrap();
        // 1*3 + 2*4
        assert_eq!(out.data(), &[11.0]);
        assert_eq!(out.shape(), &[1, 1]);
    }

    #[test]
    fn matmul_zero_rows() {
        let a = Tensor::<f64>::zeros(&[0, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[0, 2]);
        assert!(out.is_empty());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = Tensor::<f64>::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 2])).unwrap_err();
        match &err {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, &[2, 3]);
                assert_eq!(right, &[2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_sign_cases() {
        let out = m(&[&[-1., 2.], &[0., -3.]]).relu();
        assert_eq!(out, m(&[&[0., 2.], &[0., 0.]]));
    }

    #[test]
    fn concat_cols_definition() {
        let out = m(&[&[1.], &[2.]]).concat_cols(&m(&[&[3.], &[4.]])).unwrap();
        assert_eq!(out, m(&[&[1., 3.], &[2., 4.]]));
    }

    #[test]
    fn row_mean_arithmetic() {
        let out = m(&[&[1., 3.], &[3., 5.]]).row_mean().unwrap();
        assert_eq!(out, m(&[&[2., 4.]]));
    }

    #[test]
    fn row_mean_empty_is_error() {
        let err = Tensor::<f64>::zeros(&[0, 2]).row_mean().unwrap_err();
        assert!(matches!(err, TensorError::EmptyAggregation { .. }));
    }

    #[test]
    fn add_requires_identical_shapes() {
        let err = m(&[&[1., 2.]]).add(&m(&[&[1.], &[2.]])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
        let bias = m(&[&[10., 20.]]);
        let out = m(&[&[1., 2.], &[3., 4.]]).add_bias(&bias).unwrap();
        assert_eq!(out, m(&[&[11., 22.], &[13., 24.]]));
    }

    #[test]
    fn non_finite_is_surfaced() {
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        let big = m(&[&[f64::MAX]]);
        assert!(matches!(big.add(&big), Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn reshape_count_mismatch() {
        assert!(m(&[&[1., 2., 3.]]).reshape(&[2, 2]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
                .prop_flat_map(|(m, p, q, r)| (matrix(m, p), matrix(p, q), matrix(q, r)))
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9);
        }

        #[test]
        fn transposed_products_match_explicit_transpose(
            (a, b, c) in (1usize..5, 1usize..5, 1usize..5)
                .prop_flat_map(|(m, p, q)| (matrix(m, p), matrix(m, q), matrix(q, p)))
        ) {
            let expected = a.transpose().unwrap().matmul(&b).unwrap();
            prop_assert!(a.t_matmul(&b).unwrap().max_abs_diff(&expected).unwrap() <= 1e-12);
            let expected = a.matmul(&c.transpose().unwrap()).unwrap();
            prop_assert!(a.matmul_t(&c).unwrap().max_abs_diff(&expected).unwrap() <= 1e-12);
        }

        #[test]
        fn relu_is_idempotent(a in matrix(3, 4)) {
            let once = a.relu();
            prop_assert_eq!(once.relu(), once);
        }

        #[test]
        fn reshape_preserves_flat_data(a in matrix(4, 6)) {
            let r = a.reshape(&[2, 3, 4]).unwrap();
            prop_assert!(r.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn concat_then_slice_recovers_inputs(
            (a, b) in (1usize..5, 1usize..4, 1usize..4)
                .prop_flat_map(|(m, p, q)| (matrix(m, p), matrix(m, q)))
        ) {
            let p = a.shape()[1];
            let joined = a.concat_cols(&b).unwrap();
            prop_assert_eq!(joined.slice_cols(0, p).unwrap(), a);
            prop_assert_eq!(joined.slice_cols(p, joined.shape()[1]).unwrap(), b);
        }
    }
}
