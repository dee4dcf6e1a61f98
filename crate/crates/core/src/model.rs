//! CP and linked factor models, component weights and structure classification.
//!
//! A linked model for `K` tensors holds one shared factor `A0` for the common
//! first mode and, for tensor `k`, the factors of its remaining `N_k` modes.
//! Component `r` of tensor `k` has weight `λ0_r · λ_(0)k,r`, the product of the
//! column norms involved. A component is *shared* when it is active in every
//! tensor, *individual* when active in exactly one, *partial* when active in
//! some other nonempty subset (only possible for `K ≥ 3`), and *zero* otherwise.

use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, MatrixRows};
use crate::tensor::{cp_entry, reconstruct_columns, DenseTensor};

/// Default relative threshold below which a component weight counts as zero.
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-6;

/// Version tag written into every JSON document.
pub const FORMAT_VERSION: u32 = 1;

/// Factor matrices of a CP model, one per mode, sharing a column count.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    factors: Vec<Matrix>,
}

impl CpFactors {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let Some(first) = factors.first() else {
            return Err(Error::InvalidShape("a CP model needs at least one mode".into()));
        };
        let r = first.cols();
        if let Some(bad) = factors.iter().find(|f| f.cols() != r) {
            return Err(Error::ColumnMismatch {
                left: r,
                right: bad.cols(),
            });
        }
        Ok(Self { factors })
    }

    #[inline]
    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<Matrix> {
        self.factors
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.factors[0].cols()
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }
}

/// `Σ_r a_{1r} ∘ … ∘ a_{Nr}`.
pub fn cp_reconstruct(f: &CpFactors) -> Result<DenseTensor> {
    let refs: Vec<&Matrix> = f.factors.iter().collect();
    let cols: Vec<usize> = (0..f.rank()).collect();
    reconstruct_columns(&refs, &cols)
}

/// CP model with unit-norm columns and explicit component weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCp {
    pub unit_factors: Vec<Matrix>,
    pub weights: Vec<f64>,
}

impl NormalizedCp {
    /// Spreads each weight evenly over the modes, `λ^{1/N}` per column.
    pub fn denormalize(&self) -> CpFactors {
        let n = self.unit_factors.len() as f64;
        let mut factors = self.unit_factors.clone();
        for f in &mut factors {
            for (r, &w) in self.weights.iter().enumerate() {
                f.scale_column(r, w.powf(1.0 / n));
            }
        }
        CpFactors { factors }
    }
}

/// Splits every component into unit columns and a weight `λ_r = ∏_n ‖a_{nr}‖`.
pub fn normalize(f: &CpFactors) -> NormalizedCp {
    let norms: Vec<Vec<f64>> = f.factors.iter().map(Matrix::column_norms).collect();
    let r = f.rank();
    let mut weights = vec![0.0; r];
    let mut unit_factors = f.factors.clone();
    for c in 0..r {
        let zero = norms.iter().any(|n| n[c] == 0.0);
        weights[c] = if zero {
            0.0
        } else {
            norms.iter().map(|n| n[c]).product()
        };
        for (m, n) in unit_factors.iter_mut().zip(&norms) {
            m.scale_column(c, if zero { 0.0 } else { 1.0 / n[c] });
        }
    }
    NormalizedCp {
        unit_factors,
        weights,
    }
}

/// Linked CP model: shared first-mode factor plus per-tensor factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MultifacModel {
    shared_factor: Matrix,
    tensor_factors: Vec<Vec<Matrix>>,
    penalty: f64,
}

impl MultifacModel {
    pub fn new(shared_factor: Matrix, tensor_factors: Vec<Vec<Matrix>>, penalty: f64) -> Result<Self> {
        if tensor_factors.is_empty() {
            return Err(Error::InvalidShape("a linked model needs at least one tensor".into()));
        }
        let r = shared_factor.cols();
        for (k, fs) in tensor_factors.iter().enumerate() {
            if fs.is_empty() {
                return Err(Error::InvalidShape(format!(
                    "tensor {} needs at least one mode besides the shared one",
                    k + 1
                )));
            }
            if let Some(bad) = fs.iter().find(|f| f.cols() != r) {
                return Err(Error::ColumnMismatch {
                    left: r,
                    right: bad.cols(),
                });
            }
        }
        Ok(Self {
            shared_factor,
            tensor_factors,
            penalty,
        })
    }

    /// All-zero model for tensors of the given full shapes (first mode shared).
    pub fn zeros(shapes: &[Vec<usize>], rank: usize) -> Result<Self> {
        let Some(first) = shapes.first() else {
            return Err(Error::InvalidShape("no tensor shapes given".into()));
        };
        let shared = Matrix::zeros(first[0], rank);
        let tensor_factors = shapes
            .iter()
            .map(|s| s[1..].iter().map(|&d| Matrix::zeros(d, rank)).collect())
            .collect();
        Self::new(shared, tensor_factors, 0.0)
    }

    /// Single-tensor view of a CP model: the first mode plays the shared role.
    pub fn from_cp(f: CpFactors, penalty: f64) -> Result<Self> {
        let mut factors = f.into_factors();
        if factors.len() < 2 {
            return Err(Error::InvalidShape("tensor order must be at least 2".into()));
        }
        let rest = factors.split_off(1);
        Self::new(factors.pop().expect("one factor"), vec![rest], penalty)
    }

    /// Factors of a single-tensor model in mode order.
    pub fn to_cp(&self) -> Result<CpFactors> {
        if self.tensor_factors.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "model links {} tensors; a CP view needs exactly one",
                self.tensor_factors.len()
            )));
        }
        let mut factors = vec![self.shared_factor.clone()];
        factors.extend(self.tensor_factors[0].iter().cloned());
        CpFactors::new(factors)
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shared_factor.cols()
    }

    #[inline]
    pub fn n_tensors(&self) -> usize {
        self.tensor_factors.len()
    }

    #[inline]
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn set_penalty(&mut self, sigma: f64) {
        self.penalty = sigma;
    }

    #[inline]
    pub fn shared_factor(&self) -> &Matrix {
        &self.shared_factor
    }

    pub fn tensor_factors(&self) -> &[Vec<Matrix>] {
        &self.tensor_factors
    }

    pub(crate) fn shared_factor_mut(&mut self) -> &mut Matrix {
        &mut self.shared_factor
    }

    pub(crate) fn tensor_factors_mut(&mut self) -> &mut [Vec<Matrix>] {
        &mut self.tensor_factors
    }

    fn check_tensor(&self, k: usize) -> Result<()> {
        if k < self.tensor_factors.len() {
            Ok(())
        } else {
            Err(Error::InvalidTensorIndex {
                index: k + 1,
                count: self.tensor_factors.len(),
            })
        }
    }

    /// `[A0, A_1^(k), …, A_{N_k}^(k)]`.
    pub fn factors_of(&self, k: usize) -> Vec<&Matrix> {
        std::iter::once(&self.shared_factor)
            .chain(self.tensor_factors[k].iter())
            .collect()
    }

    /// Full shape of tensor `k`.
    pub fn dims_of(&self, k: usize) -> Vec<usize> {
        self.factors_of(k).iter().map(|f| f.rows()).collect()
    }

    pub fn reconstruct(&self, k: usize) -> Result<DenseTensor> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reconstruct_structure(k, &all)
    }

    /// Reconstruction of tensor `k` from the listed components only.
    pub fn reconstruct_structure(&self, k: usize, subset: &[usize]) -> Result<DenseTensor> {
        self.check_tensor(k)?;
        if let Some(&bad) = subset.iter().find(|&&r| r >= self.rank()) {
            return Err(Error::InvalidConfig(format!(
                "component {} is outside the rank budget {}",
                bad + 1,
                self.rank()
            )));
        }
        reconstruct_columns(&self.factors_of(k), subset)
    }

    /// Model value of tensor `k` at a multi-index, over the listed components.
    #[inline]
    pub fn entry(&self, k: usize, idx: &[usize], cols: &[usize]) -> f64 {
        cp_entry(&self.factors_of(k), idx, cols)
    }

    /// `‖A0‖² + Σ_k Σ_i ‖A_i^(k)‖²`, the quantity multiplied by the penalty.
    pub fn squared_norm(&self) -> f64 {
        self.shared_factor.frobenius_norm_sq()
            + self
                .tensor_factors
                .iter()
                .flatten()
                .map(Matrix::frobenius_norm_sq)
                .sum::<f64>()
    }

    /// Model restricted to the listed components, in the given order.
    pub fn select_components(&self, cols: &[usize]) -> MultifacModel {
        MultifacModel {
            shared_factor: self.shared_factor.select_columns(cols),
            tensor_factors: self
                .tensor_factors
                .iter()
                .map(|fs| fs.iter().map(|f| f.select_columns(cols)).collect())
                .collect(),
            penalty: self.penalty,
        }
    }

    /// Overwrites component `slot` with component `col` of `source`, keeping
    /// its tensor factors only where `keep[k]` holds and zeroing the rest.
    pub fn copy_component(&mut self, slot: usize, source: &MultifacModel, col: usize, keep: &[bool]) {
        self.shared_factor
            .set_column(slot, &source.shared_factor.column(col));
        for (k, fs) in self.tensor_factors.iter_mut().enumerate() {
            for (f, g) in fs.iter_mut().zip(&source.tensor_factors[k]) {
                if keep[k] {
                    f.set_column(slot, &g.column(col));
                } else {
                    f.scale_column(slot, 0.0);
                }
            }
        }
    }

    /// Rescales columns within each component to minimize the squared-norm
    /// penalty while leaving every reconstruction unchanged.
    ///
    /// Within a tensor the non-shared columns end up with equal norms; the
    /// shared column norm solves the remaining one-dimensional problem exactly,
    /// which for a single tensor makes all mode norms equal. Components whose
    /// product vanishes in a tensor are set to exact zeros there.
    pub fn rebalance(&mut self) {
        for r in 0..self.rank() {
            self.rebalance_component(r);
        }
    }

    fn rebalance_component(&mut self, r: usize) {
        let mut products = Vec::with_capacity(self.n_tensors());
        for fs in &mut self.tensor_factors {
            let p: f64 = fs.iter().map(|f| column_norm(f, r)).product();
            if p == 0.0 {
                fs.iter_mut().for_each(|f| f.scale_column(r, 0.0));
            }
            products.push(p);
        }
        let s = column_norm(&self.shared_factor, r);
        if s == 0.0 || products.iter().all(|&p| p == 0.0) {
            self.shared_factor.scale_column(r, 0.0);
            for fs in &mut self.tensor_factors {
                fs.iter_mut().for_each(|f| f.scale_column(r, 0.0));
            }
            return;
        }
        let terms: Vec<(f64, f64)> = self
            .tensor_factors
            .iter()
            .zip(&products)
            .filter(|(_, &p)| p > 0.0)
            .map(|(fs, &p)| (s * p, fs.len() as f64))
            .collect();
        let a = optimal_shared_norm(&terms);
        self.shared_factor.scale_column(r, a / s);
        for (fs, &p) in self.tensor_factors.iter_mut().zip(&products) {
            if p == 0.0 {
                continue;
            }
            let target = (s * p / a).powf(1.0 / fs.len() as f64);
            for f in fs.iter_mut() {
                let n = column_norm(f, r);
                f.scale_column(r, target / n);
            }
        }
    }

    /// Sorts components by descending total weight and fixes signs.
    ///
    /// The largest-magnitude entry of each shared column is made positive,
    /// and likewise for every non-shared mode except the last of each tensor;
    /// flips are compensated in the tensor's first (respectively last)
    /// non-shared mode so reconstructions are unchanged.
    pub fn canonicalize(&mut self) {
        let w = component_weights(self, DEFAULT_ZERO_THRESHOLD);
        let totals: Vec<f64> = (0..self.rank())
            .map(|r| (0..self.n_tensors()).map(|k| w.total(k, r)).sum())
            .collect();
        let mut order: Vec<usize> = (0..self.rank()).collect();
        order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
        if order.iter().enumerate().any(|(i, &o)| i != o) {
            *self = self.select_components(&order);
        }
        for r in 0..self.rank() {
            if dominant_sign_negative(&self.shared_factor, r) {
                self.shared_factor.scale_column(r, -1.0);
                for fs in &mut self.tensor_factors {
                    fs[0].scale_column(r, -1.0);
                }
            }
            for fs in &mut self.tensor_factors {
                let last = fs.len() - 1;
                for i in 0..last {
                    if dominant_sign_negative(&fs[i], r) {
                        fs[i].scale_column(r, -1.0);
                        fs[last].scale_column(r, -1.0);
                    }
                }
            }
        }
    }
}

fn column_norm(m: &Matrix, r: usize) -> f64 {
    (0..m.rows()).map(|i| m.get(i, r).powi(2)).sum::<f64>().sqrt()
}

fn dominant_sign_negative(m: &Matrix, r: usize) -> bool {
    let mut best = 0.0_f64;
    for i in 0..m.rows() {
        let v = m.get(i, r);
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best < 0.0
}

/// Minimizes `a² + Σ_k N_k (w_k / a)^{2/N_k}` over `a > 0`.
///
/// `terms` holds `(w_k, N_k)` with `w_k > 0`. The stationarity condition
/// `a² = Σ_k w_k^{2/N_k} a^{-2/N_k}` has a single root in `u = ln a`.
fn optimal_shared_norm(terms: &[(f64, f64)]) -> f64 {
    if let [(w, n)] = terms {
        return w.powf(1.0 / (n + 1.0));
    }
    let logs: Vec<(f64, f64)> = terms.iter().map(|&(w, n)| (w.ln(), n)).collect();
    let g = |u: f64| {
        let rhs: f64 = logs.iter().map(|&(lw, n)| (2.0 * (lw - u) / n).exp()).sum();
        2.0 * u - rhs.ln()
    };
    let u0 = logs.iter().map(|&(lw, n)| lw / (n + 1.0)).sum::<f64>() / logs.len() as f64;
    let (mut lo, mut hi) = (u0 - 1.0, u0 + 1.0);
    while g(lo) > 0.0 {
        lo -= 1.0;
    }
    while g(hi) < 0.0 {
        hi += 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Per-component norms and per-tensor activity of a linked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    /// `λ0_r = ‖a_{0r}‖`.
    pub lambda0: Vec<f64>,
    /// `λ_(0)k,r = ∏_i ‖a_{ir}^(k)‖`, one vector per tensor.
    pub lambda_k: Vec<Vec<f64>>,
    /// `activity[k][r]`: component `r` is active in tensor `k`.
    pub activity: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl ComponentWeights {
    /// `λ0_r · λ_(0)k,r`.
    #[inline]
    pub fn total(&self, k: usize, r: usize) -> f64 {
        self.lambda0[r] * self.lambda_k[k][r]
    }

    pub fn n_components(&self) -> usize {
        self.lambda0.len()
    }
}

/// Weights of every component and whether each exceeds `τ · max_{k,r}` total weight.
pub fn component_weights(m: &MultifacModel, tau: f64) -> ComponentWeights {
    let lambda0 = m.shared_factor.column_norms();
    let lambda_k: Vec<Vec<f64>> = m
        .tensor_factors
        .iter()
        .map(|fs| {
            let norms: Vec<Vec<f64>> = fs.iter().map(Matrix::column_norms).collect();
            (0..m.rank())
                .map(|r| norms.iter().map(|n| n[r]).product())
                .collect()
        })
        .collect();
    let mut w = ComponentWeights {
        lambda0,
        lambda_k,
        activity: Vec::new(),
        threshold: tau,
    };
    let max = (0..m.n_tensors())
        .flat_map(|k| (0..m.rank()).map(move |r| (k, r)))
        .map(|(k, r)| w.total(k, r))
        .fold(0.0, f64::max);
    w.activity = (0..m.n_tensors())
        .map(|k| {
            (0..m.rank())
                .map(|r| max > 0.0 && w.total(k, r) > tau * max)
                .collect()
        })
        .collect();
    w
}

/// Effective ranks of a [`StructurePattern`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureRanks {
    pub shared: usize,
    pub individual: Vec<usize>,
    pub partial: usize,
    pub total: usize,
}

/// Partition of the components by the set of tensors they are active in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructurePattern {
    pub shared: Vec<usize>,
    pub individual: Vec<Vec<usize>>,
    pub partial: Vec<usize>,
    pub zero: Vec<usize>,
    /// `activity[k][r]`, kept so partially shared components stay usable.
    pub activity: Vec<Vec<bool>>,
}

impl StructurePattern {
    pub fn n_tensors(&self) -> usize {
        self.activity.len()
    }

    pub fn n_components(&self) -> usize {
        self.activity.first().map_or(0, Vec::len)
    }

    pub fn ranks(&self) -> StructureRanks {
        let shared = self.shared.len();
        let individual: Vec<usize> = self.individual.iter().map(Vec::len).collect();
        let partial = self.partial.len();
        StructureRanks {
            shared,
            total: shared + partial + individual.iter().sum::<usize>(),
            individual,
            partial,
        }
    }

    /// Components active in tensor `k`.
    pub fn active_in(&self, k: usize) -> Vec<usize> {
        (0..self.n_components())
            .filter(|&r| self.activity[k][r])
            .collect()
    }

    /// Components active in at least one tensor.
    pub fn nonzero(&self) -> Vec<usize> {
        (0..self.n_components())
            .filter(|r| !self.zero.contains(r))
            .collect()
    }
}

/// Groups components into shared, individual, partially shared and zero.
///
/// With a single tensor every active component counts as shared.
pub fn classify_structure(w: &ComponentWeights) -> StructurePattern {
    let k_count = w.activity.len();
    let r_count = w.n_components();
    let mut p = StructurePattern {
        shared: Vec::new(),
        individual: vec![Vec::new(); k_count],
        partial: Vec::new(),
        zero: Vec::new(),
        activity: w.activity.clone(),
    };
    for r in 0..r_count {
        let active: Vec<usize> = (0..k_count).filter(|&k| w.activity[k][r]).collect();
        match active.len() {
            0 => p.zero.push(r),
            n if n == k_count => p.shared.push(r),
            1 => p.individual[active[0]].push(r),
            _ => p.partial.push(r),
        }
    }
    p
}

/// Proportion of observed energy captured by each structure of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceExplained {
    /// 1-based tensor index.
    pub tensor: usize,
    pub total: f64,
    pub shared: f64,
    pub individual: f64,
    pub rank_total: usize,
    pub rank_shared: usize,
    pub rank_individual: usize,
}

/// `‖X̂_struct‖² / ‖X‖²` over observed entries, per tensor.
pub fn variance_explained(
    m: &MultifacModel,
    data: &LinkedTensorSet,
    tau: f64,
) -> Result<Vec<VarianceExplained>> {
    if m.n_tensors() != data.n_tensors() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} tensors, data has {}",
            m.n_tensors(),
            data.n_tensors()
        )));
    }
    let pattern = classify_structure(&component_weights(m, tau));
    let mut out = Vec::with_capacity(m.n_tensors());
    for (k, (x, mask)) in data.tensors().iter().zip(data.masks()).enumerate() {
        if m.dims_of(k) != x.dims() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {} but the model expects {:?}",
                k + 1,
                x.shape(),
                m.dims_of(k)
            )));
        }
        if mask.n_observed() == 0 {
            return Err(Error::NoObservedData { tensor: k + 1 });
        }
        let energy = |t: &DenseTensor| -> f64 {
            t.values()
                .iter()
                .zip(mask.observed())
                .filter(|(_, &o)| o)
                .map(|(v, _)| v * v)
                .sum()
        };
        let denom = energy(x);
        if denom == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let active = pattern.active_in(k);
        let pve = |cols: &[usize]| -> Result<f64> {
            Ok(energy(&m.reconstruct_structure(k, cols)?) / denom)
        };
        out.push(VarianceExplained {
            tensor: k + 1,
            total: pve(&active)?,
            shared: pve(&pattern.shared)?,
            individual: pve(&pattern.individual[k])?,
            rank_total: active.len(),
            rank_shared: pattern.shared.len(),
            rank_individual: pattern.individual[k].len(),
        });
    }
    Ok(out)
}

/// Serialized form of a [`MultifacModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub rank: usize,
    pub shared_factor: MatrixRows,
    pub tensor_factors: Vec<Vec<MatrixRows>>,
    pub penalty: f64,
    pub threshold: f64,
}

impl ModelDocument {
    pub fn from_model(m: &MultifacModel, threshold: f64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            rank: m.rank(),
            shared_factor: MatrixRows::from(&m.shared_factor),
            tensor_factors: m
                .tensor_factors
                .iter()
                .map(|fs| fs.iter().map(MatrixRows::from).collect())
                .collect(),
            penalty: m.penalty,
            threshold,
        }
    }

    pub fn to_model(&self) -> Result<MultifacModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format_version {}",
                self.format_version
            )));
        }
        let shared = self.shared_factor.to_matrix(self.rank)?;
        let factors = self
            .tensor_factors
            .iter()
            .map(|fs| fs.iter().map(|f| f.to_matrix(self.rank)).collect())
            .collect::<Result<Vec<Vec<Matrix>>>>()?;
        if shared.cols() != self.rank {
            return Err(Error::Format(format!(
                "field 'shared_factor' has {} columns but 'rank' is {}",
                shared.cols(),
                self.rank
            )));
        }
        MultifacModel::new(shared, factors, self.penalty)
    }
}
