//! Dense row-major tensors and the multilinear kernels the polynomial models
//! are built from: Hadamard and Khatri-Rao products, mode-m vector products,
//! CP reconstruction and mode-1 (un)folding.
//!
//! Mode indices are 1-based throughout this module (`mode_m_product(t, u, 1)`
//! contracts the first mode), matching the usual multilinear-algebra notation.
//!
//! # Unfolding convention
//!
//! The mode-1 unfolding of a tensor with extents `I1 x I2 x ... x IM` is the
//! `I1 x (I2 * ... * IM)` matrix whose column index is
//! `i2 + I2 * (i3 + I3 * (i4 + ...))`: mode 2 varies fastest and the last mode
//! slowest. With this layout a CP tensor with factors `U1..UM` satisfies
//! `X_(1) = U1 * (UM ⊙ ... ⊙ U2)^T`, where `⊙` is [`khatri_rao`] with the left
//! operand's row index varying slowest.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid shape {shape:?} for {len} data values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange {
        op: &'static str,
        mode: usize,
        order: usize,
    },
    #[error("{op}: expected an order-{expected} tensor, found order {found}")]
    WrongOrder {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: identity check failed, deviation {deviation:e} exceeds {tol:e}")]
    IdentityViolated {
        op: &'static str,
        deviation: f64,
        tol: f64,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, expected: impl fmt::Debug, found: impl fmt::Debug) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}

/// An arbitrary-order dense array of `f64` values stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl DenseTensor {
    /// Builds a tensor, rejecting zero extents and length mismatches. An empty
    /// shape denotes a scalar and must carry exactly one value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(mismatch("from_rows", cols, rows.iter().map(|r| r.len()).collect::<Vec<_>>()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            advance_index(&mut idx, shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn scalar_value(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index order");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                assert!(i < e, "index {i} out of bounds for extent {e}");
                acc * e + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    pub fn expect_order(&self, op: &'static str, order: usize) -> Result<()> {
        if self.order() != order {
            return Err(TensorError::WrongOrder {
                op,
                expected: order,
                found: self.order(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_order("transpose", 2)?;
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.at(i, j));
            }
        }
        Self::new(vec![c, r], data)
    }

    /// `self * v` for a matrix `self`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.expect_order("matvec", 2)?;
        if self.cols() != v.len() {
            return Err(mismatch("matvec", self.cols(), v.len()));
        }
        Ok((0..self.rows())
            .map(|i| {
                let mut s = 0.0;
                for (a, b) in self.row(i).iter().zip(v) {
                    s += a * b;
                }
                s
            })
            .collect())
    }

    /// `self^T * v` for a matrix `self`; entry `j` is `Σ_i self[i,j] v[i]`
    /// accumulated in ascending `i`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.expect_order("t_matvec", 2)?;
        if self.rows() != v.len() {
            return Err(mismatch("t_matvec", self.rows(), v.len()));
        }
        let c = self.cols();
        let mut out = vec![0.0; c];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.expect_order("matmul", 2)?;
        other.expect_order("matmul", 2)?;
        if self.cols() != other.rows() {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let (m, p, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..p {
                let a = self.data[i * p + l];
                for (o, &b) in orow.iter_mut().zip(other.row(l)) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch("add", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major increment of a multi-index; wraps to all zeros after the last.
pub(crate) fn advance_index(idx: &mut [usize], shape: &[usize]) {
    for m in (0..shape.len()).rev() {
        idx[m] += 1;
        if idx[m] < shape[m] {
            return;
        }
        idx[m] = 0;
    }
}

/// Elementwise product of two equally shaped tensors.
pub fn hadamard(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape != b.shape {
        return Err(mismatch("hadamard", &a.shape, &b.shape));
    }
    Ok(DenseTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Elementwise product of two vectors.
pub fn hadamard_vec(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(mismatch("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Column-wise Kronecker product: `(I x N) ⊙ (J x N) -> (I*J) x N`, with row
/// `i * J + j` of the result equal to `a[i, :] * b[j, :]`.
pub fn khatri_rao(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_order("khatri_rao", 2)?;
    b.expect_order("khatri_rao", 2)?;
    if a.cols() != b.cols() {
        return Err(mismatch("khatri_rao", a.cols(), b.cols()));
    }
    let (i_ext, j_ext, n) = (a.rows(), b.rows(), a.cols());
    let mut data = Vec::with_capacity(i_ext * j_ext * n);
    for i in 0..i_ext {
        let ar = a.row(i);
        for j in 0..j_ext {
            data.extend(ar.iter().zip(b.row(j)).map(|(x, y)| x * y));
        }
    }
    DenseTensor::new(vec![i_ext * j_ext, n], data)
}

/// Khatri-Rao chain `m[0] ⊙ m[1] ⊙ ... ⊙ m[last]`, associated left to right.
pub fn khatri_rao_chain(mats: &[&DenseTensor]) -> Result<DenseTensor> {
    let (first, rest) = mats.split_first().ok_or_else(|| mismatch("khatri_rao_chain", "≥1 matrix", 0))?;
    rest.iter().try_fold((*first).clone(), |acc, m| khatri_rao(&acc, m))
}

/// Kronecker product of two vectors, `x ⊙ y` in the Khatri-Rao sense.
pub fn kron_vec(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|a| y.iter().map(move |b| a * b)).collect()
}

/// Contracts mode `mode` (1-based) of `t` against `u`, dropping that mode.
pub fn mode_m_product(t: &DenseTensor, u: &[f64], mode: usize) -> Result<DenseTensor> {
    let order = t.order();
    if mode == 0 || mode > order {
        return Err(TensorError::ModeOutOfRange {
            op: "mode_m_product",
            mode,
            order,
        });
    }
    let ext = t.shape[mode - 1];
    if ext != u.len() {
        return Err(mismatch("mode_m_product", ext, u.len()));
    }
    let outer: usize = t.shape[..mode - 1].iter().product();
    let inner: usize = t.shape[mode..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for (i, &ui) in u.iter().enumerate() {
            let src = &t.data[(o * ext + i) * inner..(o * ext + i + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * ui;
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(mode - 1);
    Ok(DenseTensor { shape, data })
}

/// Contracts consecutive modes `first_mode, first_mode + 1, ...` of `t` with
/// `vectors[0], vectors[1], ...`, i.e. `t ×_{first} u0 ×_{first+1} u1 ...`.
///
/// Contraction runs from the highest mode down so mode numbering of the
/// remaining modes stays fixed.
pub fn multi_mode_product(t: &DenseTensor, first_mode: usize, vectors: &[&[f64]]) -> Result<DenseTensor> {
    if first_mode == 0 || first_mode + vectors.len() > t.order() + 1 {
        return Err(TensorError::ModeOutOfRange {
            op: "multi_mode_product",
            mode: first_mode + vectors.len().saturating_sub(1),
            order: t.order(),
        });
    }
    let mut acc = t.clone();
    for (offset, v) in vectors.iter().enumerate().rev() {
        acc = mode_m_product(&acc, v, first_mode + offset)?;
    }
    Ok(acc)
}

/// Reconstructs the full tensor `Σ_r U1[:,r] ∘ U2[:,r] ∘ ... ∘ UM[:,r]` from
/// CP factors sharing a column count.
pub fn cp_to_full(factors: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = factors.first().ok_or_else(|| mismatch("cp_to_full", "≥1 factor", 0))?;
    for f in factors {
        f.expect_order("cp_to_full", 2)?;
    }
    let rank = first.cols();
    if let Some(bad) = factors.iter().find(|f| f.cols() != rank) {
        return Err(mismatch("cp_to_full", rank, bad.cols()));
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.rows()).collect();
    Ok(DenseTensor::from_fn(&shape, |idx| {
        (0..rank)
            .map(|r| idx.iter().zip(factors).map(|(&i, f)| f.at(i, r)).product::<f64>())
            .sum()
    }))
}

/// Mode-1 unfolding; see the module docs for the column ordering.
pub fn unfold_mode1(t: &DenseTensor) -> Result<DenseTensor> {
    if t.order() < 2 {
        return Err(TensorError::WrongOrder {
            op: "unfold_mode1",
            expected: 2,
            found: t.order(),
        });
    }
    let rows = t.shape[0];
    let rest = &t.shape[1..];
    let cols: usize = rest.iter().product();
    let mut out = vec![0.0; rows * cols];
    let mut idx = vec![0usize; t.order()];
    for &v in &t.data {
        let col = unfold_column(&idx[1..], rest);
        out[idx[0] * cols + col] = v;
        advance_index(&mut idx, &t.shape);
    }
    DenseTensor::new(vec![rows, cols], out)
}

/// Inverse of [`unfold_mode1`]: refolds an `I1 x (I2*...*IM)` matrix.
pub fn fold_mode1(m: &DenseTensor, shape: &[usize]) -> Result<DenseTensor> {
    m.expect_order("fold_mode1", 2)?;
    let rest: usize = shape.get(1..).map_or(0, |r| r.iter().product());
    if shape.len() < 2 || m.rows() != shape[0] || m.cols() != rest {
        return Err(mismatch("fold_mode1", shape, m.shape()));
    }
    Ok(DenseTensor::from_fn(shape, |idx| {
        m.at(idx[0], unfold_column(&idx[1..], &shape[1..]))
    }))
}

fn unfold_column(idx: &[usize], ext: &[usize]) -> usize {
    idx.iter().zip(ext).rev().fold(0, |acc, (&i, &e)| acc * e + i)
}

/// `(a^T x) * (b^T y)`: the Khatri-Rao-free evaluation of `(a ⊙ b)^T (x ⊙ y)`.
pub fn fused_mixed_product(a: &DenseTensor, b: &DenseTensor, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    a.expect_order("fused_mixed_product", 2)?;
    b.expect_order("fused_mixed_product", 2)?;
    if a.cols() != b.cols() {
        return Err(mismatch("fused_mixed_product", a.cols(), b.cols()));
    }
    let ax = a.t_matvec(x)?;
    let by = b.t_matvec(y)?;
    hadamard_vec(&ax, &by)
}

/// Evaluates `(a ⊙ b)^T (x ⊙ y)` literally by materializing the Khatri-Rao
/// matrix and the Kronecker vector.
pub fn mixed_product_literal(a: &DenseTensor, b: &DenseTensor, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    khatri_rao(a, b)?.t_matvec(&kron_vec(x, y))
}

/// [`fused_mixed_product`] that also evaluates the literal form and fails if
/// the two disagree by more than `rel_tol` times the magnitude scale
/// `max(1, ‖a‖·‖b‖·‖x‖·‖y‖)` in the max norm.
pub fn fused_mixed_product_verified(
    a: &DenseTensor,
    b: &DenseTensor,
    x: &[f64],
    y: &[f64],
    rel_tol: f64,
) -> Result<Vec<f64>> {
    let fast = fused_mixed_product(a, b, x, y)?;
    let literal = mixed_product_literal(a, b, x, y)?;
    let deviation = max_abs_diff(&fast, &literal);
    let scale = mixed_product_scale(a, b, x, y);
    if deviation > rel_tol * scale {
        return Err(TensorError::IdentityViolated {
            op: "fused_mixed_product",
            deviation,
            tol: rel_tol * scale,
        });
    }
    Ok(fast)
}

/// Magnitude scale used to judge the mixed-product identity.
pub fn mixed_product_scale(a: &DenseTensor, b: &DenseTensor, x: &[f64], y: &[f64]) -> f64 {
    let n2 = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    (a.frobenius_norm() * b.frobenius_norm() * n2(x) * n2(y)).max(1.0)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseTensor {
        DenseTensor::from_rows(rows).unwrap()
    }

    /// Deterministic, irregular test values.
    fn filled(shape: &[usize], salt: f64) -> DenseTensor {
        let mut k = 0.0;
        DenseTensor::from_fn(shape, |_| {
            k += 1.0;
            ((k * 1.618 + salt) * 7.31).sin()
        })
    }

    #[test]
    fn hadamard_small() {
        let r = hadamard(&m(&[&[1., 2.], &[3., 4.]]), &m(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(r, m(&[&[5., 12.], &[21., 32.]]));
        let a = filled(&[3, 2], 0.3);
        assert_eq!(hadamard(&a, &DenseTensor::ones(&[3, 2])).unwrap(), a);
    }

    #[test]
    fn hadamard_matches_double_loop() {
        let a = filled(&[3, 2], 1.0);
        let b = filled(&[3, 2], 2.0);
        let r = hadamard(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(r.at(i, j), a.at(i, j) * b.at(i, j));
            }
        }
    }

    #[test]
    fn hadamard_rejects_mismatch() {
        let err = hadamard(&DenseTensor::zeros(&[2, 2]), &DenseTensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "hadamard", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn khatri_rao_shapes_and_values() {
        let r = khatri_rao(&DenseTensor::zeros(&[2, 3]), &DenseTensor::zeros(&[4, 3])).unwrap();
        assert_eq!(r.shape(), &[8, 3]);
        let r = khatri_rao(&m(&[&[1.], &[2.]]), &m(&[&[3.], &[4.]])).unwrap();
        assert_eq!(r, m(&[&[3.], &[4.], &[6.], &[8.]]));
        let b = filled(&[3, 4], 0.1);
        assert_eq!(khatri_rao(&DenseTensor::ones(&[1, 4]), &b).unwrap(), b);
        assert!(khatri_rao(&DenseTensor::zeros(&[2, 3]), &DenseTensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn mode_product_matrix_is_transpose_matvec() {
        let x = filled(&[3, 2], 0.5);
        let u = [0.5, -1.0, 2.0];
        let r = mode_m_product(&x, &u, 1).unwrap();
        assert_eq!(r.shape(), &[2]);
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| x.at(i, j) * u[i]).sum();
            assert!((r.data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_product_superdiagonal() {
        let t = DenseTensor::from_fn(&[2, 2, 2], |i| if i[0] == i[1] && i[1] == i[2] { 1.0 } else { 0.0 });
        let r = mode_m_product(&t, &[3.0, -2.0], 3).unwrap();
        assert_eq!(r, m(&[&[3.0, 0.0], &[0.0, -2.0]]));
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let t = filled(&[2, 3, 2], 0.9);
        let us: [Vec<f64>; 3] = [vec![0.3, -1.1], vec![1.0, 0.25, -0.5], vec![2.0, 0.7]];
        for mode in 1..=3 {
            let u = &us[mode - 1];
            let r = mode_m_product(&t, u, mode).unwrap();
            for a in 0..2 {
                for b in 0..3 {
                    for c in 0..2 {
                        let idx = [a, b, c];
                        let mut kept: Vec<usize> = idx.to_vec();
                        kept.remove(mode - 1);
                        // Accumulate the full contraction for this output cell once.
                        if idx[mode - 1] != 0 {
                            continue;
                        }
                        let mut s = 0.0;
                        for (i, &ui) in u.iter().enumerate() {
                            let mut full = idx;
                            full[mode - 1] = i;
                            s += t.get(&full) * ui;
                        }
                        assert_eq!(r.get(&kept), s, "mode {mode} at {kept:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn mode_product_errors() {
        let t = DenseTensor::zeros(&[2, 3]);
        assert!(matches!(mode_m_product(&t, &[1.0, 2.0], 0), Err(TensorError::ModeOutOfRange { .. })));
        assert!(matches!(mode_m_product(&t, &[1.0, 2.0], 3), Err(TensorError::ModeOutOfRange { .. })));
        assert!(matches!(mode_m_product(&t, &[1.0, 2.0], 2), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn mode_product_of_vector_is_scalar() {
        let r = mode_m_product(&DenseTensor::vector(vec![1.0, 2.0]), &[3.0, 4.0], 1).unwrap();
        assert_eq!(r.order(), 0);
        assert_eq!(r.scalar_value(), Some(11.0));
    }

    #[test]
    fn multi_mode_product_cases() {
        let w = filled(&[3, 2], 0.2);
        let z = [0.4, -0.9];
        let r = multi_mode_product(&w, 2, &[&z]).unwrap();
        assert_eq!(r.data(), w.matvec(&z).unwrap().as_slice());

        let w3 = filled(&[2, 3, 3], 0.7);
        let z = [0.5, 1.5, -1.0];
        let r = multi_mode_product(&w3, 2, &[&z, &z]).unwrap();
        for o in 0..2 {
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += w3.get(&[o, i, j]) * z[i] * z[j];
                }
            }
            assert!((r.data()[o] - q).abs() < 1e-14);
        }
        let r = multi_mode_product(&w3, 2, &[&[0.0; 3], &[0.0; 3]]).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert!(multi_mode_product(&w3, 2, &[&z, &z, &z]).is_err());
    }

    #[test]
    fn cp_to_full_cases() {
        let u1 = filled(&[3, 2], 0.1);
        let u2 = filled(&[4, 2], 0.2);
        let full = cp_to_full(&[&u1, &u2]).unwrap();
        let expect = u1.matmul(&u2.transpose().unwrap()).unwrap();
        for (a, b) in full.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }

        let a = m(&[&[1.], &[2.]]);
        let b = m(&[&[3.], &[-1.], &[0.5]]);
        let full = cp_to_full(&[&a, &b]).unwrap();
        assert_eq!(full.get(&[1, 2]), 1.0);
        assert_eq!(full.get(&[0, 1]), -1.0);

        assert!(cp_to_full(&[&u1, &DenseTensor::zeros(&[3, 3])]).is_err());
    }

    #[test]
    fn cp_unfolding_identity_order3() {
        let u1 = filled(&[2, 2], 0.4);
        let u2 = filled(&[3, 2], 0.5);
        let u3 = filled(&[2, 2], 0.6);
        let full = cp_to_full(&[&u1, &u2, &u3]).unwrap();
        let unfolded = unfold_mode1(&full).unwrap();
        let expect = u1.matmul(&khatri_rao(&u3, &u2).unwrap().transpose().unwrap()).unwrap();
        assert_eq!(unfolded.shape(), expect.shape());
        assert!(max_abs_diff(unfolded.data(), expect.data()) < 1e-12);
    }

    #[test]
    fn unfold_column_order_is_mode2_fastest() {
        let t = DenseTensor::from_fn(&[1, 2, 3], |i| (10 * i[1] + i[2]) as f64);
        let u = unfold_mode1(&t).unwrap();
        assert_eq!(u.data(), &[0., 10., 1., 11., 2., 12.]);
        assert_eq!(fold_mode1(&u, &[1, 2, 3]).unwrap(), t);
    }

    #[test]
    fn fused_mixed_product_cases() {
        let i2 = DenseTensor::identity(2);
        assert_eq!(fused_mixed_product(&i2, &i2, &[1., 1.], &[1., 1.]).unwrap(), vec![1., 1.]);
        let a = filled(&[3, 4], 0.3);
        let b = filled(&[2, 4], 0.8);
        let r = fused_mixed_product(&a, &b, &[0.; 3], &[1.0, 2.0]).unwrap();
        assert_eq!(r, vec![0.0; 4]);
        let x = [0.3, -0.2, 1.7];
        let y = [-0.6, 0.9];
        let fast = fused_mixed_product_verified(&a, &b, &x, &y, 1e-12).unwrap();
        let lit = mixed_product_literal(&a, &b, &x, &y).unwrap();
        let scale = lit.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        assert!(max_abs_diff(&fast, &lit) <= 1e-12 * scale);
        assert!(fused_mixed_product(&a, &DenseTensor::zeros(&[2, 3]), &x, &y).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::new(vec![0, 3], vec![]).is_err());
        assert!(DenseTensor::new(vec![], vec![1.0]).is_ok());
        assert!(DenseTensor::new(vec![], vec![]).is_err());
    }

    fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = DenseTensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| DenseTensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn products_are_bilinear(
            x in mat_strategy(3, 2),
            x2 in mat_strategy(3, 2),
            y in mat_strategy(3, 2),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let combo = x.scaled(alpha).add(&x2.scaled(beta)).unwrap();
            for f in [hadamard, khatri_rao] {
                let lhs = f(&combo, &y).unwrap();
                let rhs = f(&x, &y).unwrap().scaled(alpha).add(&f(&x2, &y).unwrap().scaled(beta)).unwrap();
                prop_assert!(max_abs_diff(lhs.data(), rhs.data()) <= 1e-12 * (1.0 + lhs.max_abs()));
            }
        }

        #[test]
        fn mode_product_exact_on_integers(
            data in proptest::collection::vec(-5i32..5, 12),
            u in proptest::collection::vec(-5i32..5, 3),
        ) {
            let t = DenseTensor::new(vec![2, 3, 2], data.iter().map(|&v| v as f64).collect()).unwrap();
            let u: Vec<f64> = u.iter().map(|&v| v as f64).collect();
            let r = mode_m_product(&t, &u, 2).unwrap();
            for a in 0..2 {
                for c in 0..2 {
                    let s: f64 = (0..3).map(|b| t.get(&[a, b, c]) * u[b]).sum();
                    prop_assert_eq!(r.get(&[a, c]), s);
                }
            }
        }
    }
}
