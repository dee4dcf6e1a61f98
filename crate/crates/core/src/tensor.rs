//! Dense N-way tensors, observation masks and the multilinear kernels built on them.
//!
//! Storage is row-major (last index fastest). Matricization follows the Kolda
//! convention: the mode-`n` unfolding places entry `(i1, …, iN)` in row `in`
//! and column `Σ_{m≠n} i_m · J_m` with `J_m = ∏_{l<m, l≠n} I_l`, so among the
//! remaining modes the earliest one varies fastest. All indices here are 0-based;
//! public error messages and file formats report modes 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Dimensions `(I1, …, IN)` of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("a tensor needs at least one mode".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("mode {} has size 0", pos + 1)));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape("element count overflows".into()))?;
        Ok(Self(dims))
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// Total number of elements.
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for m in (0..self.0.len().saturating_sub(1)).rev() {
            s[m] = s[m + 1] * self.0[m + 1];
        }
        s
    }

    /// Decodes a flat row-major offset into a multi-index.
    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for m in (0..self.0.len()).rev() {
            out[m] = flat % self.0[m];
            flat /= self.0[m];
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.0)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            Err(Error::InvalidMode {
                mode: mode + 1,
                order: self.order(),
            })
        } else {
            Ok(())
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape} ({} elements)",
                values.len(),
                shape.numel()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Fills entries from their multi-index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut idx = vec![0; shape.order()];
        let values = (0..shape.numel())
            .map(|flat| {
                shape.unravel(flat, &mut idx);
                f(&idx)
            })
            .collect();
        Self { shape, values }
    }

    #[inline]
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.shape.ravel(idx)]
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, c: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
        same_shape(&self.shape, &other.shape)?;
        Ok(DenseTensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Number of entries in one first-mode slab.
    #[inline]
    pub fn slab_len(&self) -> usize {
        self.values.len() / self.shape.dims()[0]
    }
}

fn same_shape(a: &Shape, b: &Shape) -> Result<()> {
    if a != b {
        Err(Error::ShapeMismatch(format!("{a} vs {b}")))
    } else {
        Ok(())
    }
}

/// Which entries of a tensor are observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    shape: Shape,
    observed: Vec<bool>,
    missing_slabs: Vec<usize>,
}

impl ObservationMask {
    pub fn new(shape: Shape, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, shape {shape} has {}",
                observed.len(),
                shape.numel()
            )));
        }
        let slab = observed.len() / shape.dims()[0];
        let missing_slabs = (0..shape.dims()[0])
            .filter(|&i| observed[i * slab..(i + 1) * slab].iter().all(|&o| !o))
            .collect();
        Ok(Self {
            shape,
            observed,
            missing_slabs,
        })
    }

    pub fn full(shape: Shape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            observed: vec![true; n],
            missing_slabs: Vec::new(),
        }
    }

    /// Observed wherever the value is not NaN.
    pub fn from_nan(values: &[f64], shape: Shape) -> Result<Self> {
        Self::new(shape, values.iter().map(|v| !v.is_nan()).collect())
    }

    #[inline]
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    #[inline]
    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    #[inline]
    pub fn is_observed(&self, flat: usize) -> bool {
        self.observed[flat]
    }

    /// First-mode indices whose whole slab is unobserved.
    #[inline]
    pub fn tensorwise_missing_slabs(&self) -> &[usize] {
        &self.missing_slabs
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn n_missing(&self) -> usize {
        self.observed.len() - self.n_observed()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Flat offsets of unobserved entries.
    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.observed.len())
            .filter(|&i| !self.observed[i])
            .collect()
    }

    /// True when the entry lies in a fully unobserved first-mode slab.
    pub fn in_missing_slab(&self, flat: usize) -> bool {
        let slab = self.observed.len() / self.shape.dims()[0];
        self.missing_slabs.binary_search(&(flat / slab)).is_ok()
    }

    /// Additionally hides the given flat offsets.
    pub fn hide(&self, flat: &[usize]) -> ObservationMask {
        let mut observed = self.observed.clone();
        for &f in flat {
            observed[f] = false;
        }
        ObservationMask::new(self.shape.clone(), observed).expect("same shape")
    }

    /// Mask selecting exactly the given entries.
    pub fn selecting(shape: Shape, flat: &[usize]) -> ObservationMask {
        let mut observed = vec![false; shape.numel()];
        for &f in flat {
            observed[f] = true;
        }
        ObservationMask::new(shape, observed).expect("consistent length")
    }

    /// Complement: observed where this mask is missing.
    pub fn complement(&self) -> ObservationMask {
        ObservationMask::new(
            self.shape.clone(),
            self.observed.iter().map(|o| !o).collect(),
        )
        .expect("same shape")
    }
}

/// Mode-`n` unfolding (0-based mode).
pub fn matricize(x: &DenseTensor, n: usize) -> Result<Matrix> {
    x.shape.check_mode(n)?;
    let dims = x.dims();
    let rows = dims[n];
    let cols = x.values.len() / rows;
    // column weight of every mode (0 for mode n itself)
    let mut weight = vec![0usize; dims.len()];
    let mut acc = 1;
    for (m, w) in weight.iter_mut().enumerate() {
        if m != n {
            *w = acc;
            acc *= dims[m];
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut idx = vec![0; dims.len()];
    for (flat, &v) in x.values.iter().enumerate() {
        x.shape.unravel(flat, &mut idx);
        let col: usize = idx.iter().zip(&weight).map(|(i, w)| i * w).sum();
        out.set(idx[n], col, v);
    }
    Ok(out)
}

/// Inverse of [`matricize`].
pub fn fold(m: &Matrix, n: usize, shape: &Shape) -> Result<DenseTensor> {
    shape.check_mode(n)?;
    let dims = shape.dims();
    if m.rows() != dims[n] || m.rows() * m.cols() != shape.numel() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix cannot fold into shape {shape} along mode {}",
            m.rows(),
            m.cols(),
            n + 1
        )));
    }
    let mut weight = vec![0usize; dims.len()];
    let mut acc = 1;
    for (k, w) in weight.iter_mut().enumerate() {
        if k != n {
            *w = acc;
            acc *= dims[k];
        }
    }
    let mut idx = vec![0; dims.len()];
    let values = (0..shape.numel())
        .map(|flat| {
            shape.unravel(flat, &mut idx);
            let col: usize = idx.iter().zip(&weight).map(|(i, w)| i * w).sum();
            m.get(idx[n], col)
        })
        .collect();
    Ok(DenseTensor {
        shape: shape.clone(),
        values,
    })
}

/// Elementwise product.
pub fn hadamard(x: &DenseTensor, y: &DenseTensor) -> Result<DenseTensor> {
    x.zip_with(y, |a, b| a * b)
}

pub fn frobenius_norm(x: &DenseTensor) -> f64 {
    x.norm_sq().sqrt()
}

/// Relative squared error `‖estimate − truth‖² / ‖truth‖²`, optionally restricted
/// to the entries a mask marks as observed.
pub fn rse(
    estimate: &DenseTensor,
    truth: &DenseTensor,
    subset: Option<&ObservationMask>,
) -> Result<f64> {
    same_shape(&estimate.shape, &truth.shape)?;
    if let Some(mask) = subset {
        same_shape(&estimate.shape, mask.shape())?;
    }
    let (num, den) = squared_error_parts(estimate.values(), truth.values(), |i| {
        subset.is_none_or(|m| m.is_observed(i))
    });
    ratio(num, den)
}

/// Sums `(Σ (e−t)², Σ t²)` over the selected flat offsets.
pub(crate) fn squared_error_parts(
    estimate: &[f64],
    truth: &[f64],
    select: impl Fn(usize) -> bool,
) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (e, t)) in estimate.iter().zip(truth).enumerate() {
        if select(i) {
            num += (e - t) * (e - t);
            den += t * t;
        }
    }
    (num, den)
}

pub(crate) fn ratio(num: f64, den: f64) -> Result<f64> {
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::ZeroNorm)
    }
}

/// Row-major Khatri-Rao product of the listed factor matrices restricted to `cols`:
/// row `l` (earlier factors slower) holds `∏_m A_m[i_m(l), r]`.
fn row_major_khatri_rao(factors: &[&Matrix], cols: &[usize]) -> Matrix {
    let r = cols.len();
    let mut acc = Matrix::from_fn(1, r, |_, _| 1.0);
    for f in factors {
        let mut next = Matrix::zeros(acc.rows() * f.rows(), r);
        for l in 0..acc.rows() {
            let prev = acc.row(l).to_vec();
            for i in 0..f.rows() {
                let src = f.row(i);
                let dst = next.row_mut(l * f.rows() + i);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = prev[j] * src[cols[j]];
                }
            }
        }
        acc = next;
    }
    acc
}

/// Matricized-tensor times Khatri-Rao product for mode `n`:
/// `X_(n) · (⊙_{m≠n} A_m)` restricted to the component columns `cols`.
///
/// `factors[n]` is ignored. The result is `I_n × cols.len()`.
pub(crate) fn mttkrp(x: &DenseTensor, factors: &[&Matrix], n: usize, cols: &[usize]) -> Matrix {
    let r = cols.len();
    let in_n = x.dims()[n];
    let mut out = Matrix::zeros(in_n, r);
    if r == 0 {
        return out;
    }
    let left = row_major_khatri_rao(&factors[..n], cols);
    let right = row_major_khatri_rao(&factors[n + 1..], cols);
    let (lr, rt) = (left.rows(), right.rows());
    let vals = x.values();
    if lr <= rt {
        // Each leading block X_l is an I_n × rt matrix; multiply it by the right factors.
        let mut y = vec![0.0; in_n * r];
        for l in 0..lr {
            let block = &vals[l * in_n * rt..(l + 1) * in_n * rt];
            gemm(in_n, rt, r, block, (rt, 1), right.values(), (r, 1), &mut y);
            let kl = left.row(l);
            for (dst, src) in out.values_mut().chunks_exact_mut(r).zip(y.chunks_exact(r)) {
                for ((d, &s), &a) in dst.iter_mut().zip(src).zip(kl) {
                    *d += s * a;
                }
            }
        }
    } else {
        // Contract the leading modes first: W = X_matᵀ · left, then the trailing ones.
        let inner = in_n * rt;
        let mut w = vec![0.0; inner * r];
        gemm(inner, lr, r, vals, (1, inner), left.values(), (r, 1), &mut w);
        for i in 0..in_n {
            let dst = out.row_mut(i);
            for t in 0..rt {
                let src = &w[(i * rt + t) * r..(i * rt + t + 1) * r];
                for ((d, &s), &b) in dst.iter_mut().zip(src).zip(right.row(t)) {
                    *d += s * b;
                }
            }
        }
    }
    out
}

/// `C = A · B` for an `m × k` strided `A`, a row-major `k × n` strided `B` and a
/// row-major `m × n` output.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64]) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa));
    assert!(b.len() >= last(k, n, rsb, csb));
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `Σ_{r∈cols} a_{1r} ∘ … ∘ a_{Nr}`.
pub(crate) fn reconstruct_columns(factors: &[&Matrix], cols: &[usize]) -> Result<DenseTensor> {
    let dims: Vec<usize> = factors.iter().map(|f| f.rows()).collect();
    let shape = Shape::new(dims)?;
    if cols.is_empty() {
        return Ok(DenseTensor::zeros(shape));
    }
    let n = factors.len();
    let left = row_major_khatri_rao(&factors[..n - 1], cols);
    let last = factors[n - 1];
    let mut values = Vec::with_capacity(shape.numel());
    for l in 0..left.rows() {
        let kl = left.row(l);
        for j in 0..last.rows() {
            let row = last.row(j);
            values.push(kl.iter().zip(cols).map(|(a, &c)| a * row[c]).sum());
        }
    }
    DenseTensor::new(shape, values)
}

/// Value of a CP model at one multi-index, restricted to `cols`.
#[inline]
pub(crate) fn cp_entry(factors: &[&Matrix], idx: &[usize], cols: &[usize]) -> f64 {
    cols.iter()
        .map(|&r| {
            factors
                .iter()
                .zip(idx)
                .map(|(f, &i)| f.get(i, r))
                .product::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    fn iota(d: &[usize]) -> DenseTensor {
        let s = shape(d);
        let n = s.numel();
        DenseTensor::new(s, (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![3, 0, 2]).is_err());
        assert!(Shape::new(vec![usize::MAX, 3]).is_err());
        assert_eq!(shape(&[2, 3, 4]).numel(), 24);
        assert_eq!(shape(&[2, 3, 4]).strides(), vec![12, 4, 1]);
    }

    #[test]
    fn matricize_matrix_identity_and_transpose() {
        let x = iota(&[2, 3]);
        let m1 = matricize(&x, 0).unwrap();
        assert_eq!(m1.values(), x.values());
        let m2 = matricize(&x, 1).unwrap();
        assert_eq!(m2, m1.transpose());
    }

    #[test]
    fn matricize_2x2x2_by_index_formula() {
        // x[i][j][k] = 1 + 4i + 2j + k (row-major enumeration 1..8)
        // mode-1 column = j + 2k
        let x = iota(&[2, 2, 2]);
        let m = matricize(&x, 0).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 3.0, 2.0, 4.0], vec![5.0, 7.0, 6.0, 8.0]])
            .unwrap();
        assert_eq!(m, expected);
        // mode-2 column = i + 2k
        let m = matricize(&x, 1).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 5.0, 2.0, 6.0], vec![3.0, 7.0, 4.0, 8.0]])
            .unwrap();
        assert_eq!(m, expected);
        // mode-3 column = i + 2j
        let m = matricize(&x, 2).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 5.0, 3.0, 7.0], vec![2.0, 6.0, 4.0, 8.0]])
            .unwrap();
        assert_eq!(m, expected);
    }

    #[test]
    fn invalid_mode_is_reported_one_based() {
        let x = iota(&[2, 2]);
        let err = matricize(&x, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidMode { mode: 3, order: 2 }));
    }

    #[test]
    fn fold_single_row_matrix() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let t = fold(&m, 0, &shape(&[1, 3])).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fold_rejects_shape_mismatch() {
        let m = Matrix::zeros(2, 3);
        assert!(fold(&m, 0, &shape(&[3, 2])).is_err());
        assert!(fold(&m, 0, &shape(&[2, 4])).is_err());
    }

    #[test]
    fn hadamard_cases() {
        let x = DenseTensor::new(shape(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = DenseTensor::new(shape(&[2, 2]), vec![2.0, 0.0, 1.0, 5.0]).unwrap();
        assert_eq!(hadamard(&x, &y).unwrap().values(), &[2.0, 0.0, 3.0, 20.0]);
        let ones = DenseTensor::new(shape(&[2, 2]), vec![1.0; 4]).unwrap();
        assert_eq!(hadamard(&x, &ones).unwrap(), x);
        let zeros = DenseTensor::zeros(shape(&[2, 2]));
        assert_eq!(hadamard(&x, &zeros).unwrap(), zeros);
        assert!(hadamard(&x, &iota(&[4])).is_err());
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&DenseTensor::zeros(shape(&[3, 3]))), 0.0);
        let x = DenseTensor::new(shape(&[2]), vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&x), 5.0);
        let y = iota(&[2, 3]);
        assert!((frobenius_norm(&y.scaled(-2.5)) - 2.5 * frobenius_norm(&y)).abs() < 1e-12);
    }

    #[test]
    fn rse_cases() {
        let s = iota(&[2, 3]);
        assert_eq!(rse(&s, &s, None).unwrap(), 0.0);
        let z = DenseTensor::zeros(s.shape().clone());
        assert_eq!(rse(&z, &s, None).unwrap(), 1.0);
        let e = s.add(&DenseTensor::new(s.shape().clone(), vec![0.5; 6]).unwrap()).unwrap();
        let a = rse(&e, &s, None).unwrap();
        let b = rse(&e.scaled(-3.0), &s.scaled(-3.0), None).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(rse(&s, &z, None), Err(Error::ZeroNorm)));
    }

    #[test]
    fn rse_on_subset() {
        let s = DenseTensor::new(shape(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = DenseTensor::new(shape(&[4]), vec![1.0, 0.0, 3.0, 100.0]).unwrap();
        let mask = ObservationMask::new(shape(&[4]), vec![true, true, true, false]).unwrap();
        assert!((rse(&e, &s, Some(&mask)).unwrap() - 4.0 / 14.0).abs() < 1e-15);
        let none = ObservationMask::new(shape(&[4]), vec![false; 4]).unwrap();
        assert!(matches!(rse(&e, &s, Some(&none)), Err(Error::ZeroNorm)));
    }

    #[test]
    fn mask_slab_derivation() {
        let s = shape(&[3, 2]);
        let m = ObservationMask::new(s.clone(), vec![false, false, true, false, false, false])
            .unwrap();
        assert_eq!(m.tensorwise_missing_slabs(), &[0, 2]);
        assert!(m.in_missing_slab(1));
        assert!(!m.in_missing_slab(3));
        assert_eq!(ObservationMask::full(s).tensorwise_missing_slabs(), &[] as &[usize]);
    }

    #[test]
    fn mttkrp_matches_explicit_product() {
        let x = iota(&[3, 4, 2]);
        let a = Matrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) * 0.3 - j as f64);
        let b = Matrix::from_fn(4, 2, |i, j| (i * j) as f64 * 0.1 + 0.5);
        let c = Matrix::from_fn(2, 2, |i, j| (i + 2 * j) as f64 - 0.7);
        let factors = [&a, &b, &c];
        let cols = [0, 1];
        // Kolda: X_(1) (C ⊙ B), X_(2) (C ⊙ A), X_(3) (B ⊙ A)
        let kr = [
            crate::matrix::khatri_rao(&c, &b).unwrap(),
            crate::matrix::khatri_rao(&c, &a).unwrap(),
            crate::matrix::khatri_rao(&b, &a).unwrap(),
        ];
        for n in 0..3 {
            let expected = matricize(&x, n).unwrap().matmul(&kr[n]).unwrap();
            let got = mttkrp(&x, &factors, n, &cols);
            assert!(got.max_abs_diff(&expected) < 1e-10, "mode {n}");
        }
    }

    #[test]
    fn reconstruct_outer_product_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let t = reconstruct_columns(&[&a, &b, &c], &[0]).unwrap();
        assert_eq!(t.dims(), &[2, 2, 1]);
        assert_eq!(t.values(), &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(cp_entry(&[&a, &b, &c], &[1, 0, 0], &[0]), 2.0);
    }
}
