//! Penalized alternating least squares for single and linked tensors.
//!
//! Every block update solves a ridge problem `A = M (Γ + σI)⁻¹` where `M` is
//! the MTTKRP of the data against the other factors and `Γ` the Hadamard
//! product of their Gram matrices, so the Khatri-Rao design is never formed.
//! The objective after each block follows from the same quantities,
//! `‖X‖² − 2⟨A, M⟩ + ⟨Γ, AᵀA⟩`, and is tracked exactly at no extra cost.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::matrix::{khatri_rao, symmetric_pinv, Cholesky, Matrix};
use crate::model::{
    classify_structure, component_weights, CpFactors, MultifacModel, StructurePattern,
    DEFAULT_ZERO_THRESHOLD,
};
use crate::rng;
use crate::tensor::{mttkrp, DenseTensor};

const START_TAG: u64 = 0x5354_4152_54;

/// Settings shared by every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Rank budget `R`.
    pub rank: usize,
    /// Penalty `σ ≥ 0` on the squared Frobenius norms of all factors.
    pub sigma: f64,
    /// Stop once the relative change of the penalized objective falls below this.
    pub tolerance: f64,
    /// Maximum number of full sweeps.
    pub max_iterations: usize,
    pub n_starts: usize,
    /// Sweeps over which `σ` ramps geometrically from `σ/100` to `σ`.
    pub temper_steps: usize,
    pub seed: u64,
    /// Relative weight below which a component counts as zero.
    pub zero_threshold: f64,
    /// Use a pseudo-inverse instead of failing on singular systems at `σ = 0`.
    pub pseudo_inverse: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            sigma: 0.0,
            tolerance: 1e-8,
            max_iterations: 500,
            n_starts: 5,
            temper_steps: 10,
            seed: 0,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            pseudo_inverse: false,
        }
    }
}

impl SolverConfig {
    pub fn new(rank: usize, sigma: f64) -> Self {
        Self {
            rank,
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.rank == 0 {
            return bad("rank budget must be at least 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("penalty sigma must be finite and non-negative");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.n_starts == 0 {
            return bad("n_starts must be at least 1");
        }
        if !(self.zero_threshold > 0.0 && self.zero_threshold < 1.0) {
            return bad("zero threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Which columns are held at zero in each tensor's non-shared factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroPattern {
    constrained: Vec<Vec<bool>>,
}

impl ZeroPattern {
    /// `constrained[k][r]` pins column `r` of tensor `k` to zero.
    pub fn new(constrained: Vec<Vec<bool>>) -> Result<Self> {
        let r = constrained.first().map(Vec::len).ok_or_else(|| {
            Error::InvalidConfig("zero pattern needs at least one tensor".into())
        })?;
        if constrained.iter().any(|row| row.len() != r) {
            return Err(Error::InvalidConfig("ragged zero pattern".into()));
        }
        Ok(Self { constrained })
    }

    /// No constraints.
    pub fn none(n_tensors: usize, rank: usize) -> Self {
        Self {
            constrained: vec![vec![false; rank]; n_tensors],
        }
    }

    /// Compact pattern reproducing a structure: zero components are dropped
    /// and each kept component is free exactly in the tensors it was active in.
    ///
    /// Returns the pattern and the kept component indices, in order.
    pub fn from_structure(p: &StructurePattern) -> (Self, Vec<usize>) {
        let kept = p.nonzero();
        let constrained = p
            .activity
            .iter()
            .map(|row| kept.iter().map(|&r| !row[r]).collect())
            .collect();
        (Self { constrained }, kept)
    }

    pub fn n_tensors(&self) -> usize {
        self.constrained.len()
    }

    pub fn rank(&self) -> usize {
        self.constrained[0].len()
    }

    #[inline]
    pub fn is_constrained(&self, k: usize, r: usize) -> bool {
        self.constrained[k][r]
    }

    /// Free columns of tensor `k`.
    pub fn active_columns(&self, k: usize) -> Vec<usize> {
        (0..self.rank()).filter(|&r| !self.constrained[k][r]).collect()
    }

    /// Columns free in at least one tensor.
    pub fn shared_columns(&self) -> Vec<usize> {
        (0..self.rank())
            .filter(|&r| self.constrained.iter().any(|row| !row[r]))
            .collect()
    }

    fn check(&self, n_tensors: usize, rank: usize) -> Result<()> {
        if self.n_tensors() != n_tensors || self.rank() != rank {
            return Err(Error::InvalidConfig(format!(
                "zero pattern is {}x{} but the fit has {} tensors and rank {}",
                self.n_tensors(),
                self.rank(),
                n_tensors,
                rank
            )));
        }
        Ok(())
    }
}

/// Summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Penalized objective after each sweep of the selected start.
    pub objective_trace: Vec<f64>,
    pub penalized_final: f64,
    /// Residual sum of squares at the end, the multi-start criterion.
    pub unpenalized_final: f64,
    pub n_sweeps: usize,
    pub converged: bool,
    pub start_index: usize,
    /// Final unpenalized objective of every start.
    pub start_objectives: Vec<f64>,
    pub sigma: f64,
    pub effective_ranks: StructurePattern,
}

/// Result of a single start, before any post-processing.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub model: MultifacModel,
    /// Penalized objective after each sweep.
    pub objective_trace: Vec<f64>,
    /// `(σ in effect, penalized objective)` after every block update.
    pub block_trace: Vec<(f64, f64)>,
    /// Penalized objective on the completed data after each imputation step.
    pub surrogate_trace: Vec<f64>,
    pub penalized_final: f64,
    pub unpenalized_final: f64,
    pub n_sweeps: usize,
    pub converged: bool,
}

/// What an after-sweep hook reports back to the engine.
pub(crate) struct HookOutcome {
    /// `Some` overrides the objective-based convergence test.
    pub converged: Option<bool>,
    /// Change of the unpenalized loss caused by rewriting data.
    pub loss_delta: f64,
}

pub(crate) type Hook<'a> =
    dyn FnMut(&MultifacModel, &mut [DenseTensor]) -> Result<HookOutcome> + 'a;

/// `σ_t = σ · 100^{min(t, s)/s − 1}`; constant when `s = 0`.
pub fn tempered_sigma(sigma: f64, steps: usize, t: usize) -> f64 {
    if steps == 0 || t >= steps {
        return sigma;
    }
    let remaining = (steps - t) as f64 / steps as f64;
    sigma / 100f64.powf(remaining)
}

/// Infinite sequence of per-sweep penalties.
pub fn temper_schedule(sigma: f64, steps: usize) -> impl Iterator<Item = f64> {
    (0..).map(move |t| tempered_sigma(sigma, steps, t))
}

/// Minimizer over `λ ≥ 0` of `(λ − λ̂)² + Nσ λ^{2/N}`.
///
/// For `N = 2` this is `max(λ̂ − σ, 0)`. For larger `N` the objective is
/// concave then convex on `(0, ∞)`; the only candidate besides `0` is the
/// stationary point beyond the inflection, found by bisection. Exact ties go to `0`.
pub fn theorem2_weight(lambda_hat: f64, sigma: f64, n: usize) -> f64 {
    assert!(n >= 2, "order must be at least 2");
    if lambda_hat <= 0.0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return lambda_hat;
    }
    if n == 2 {
        return (lambda_hat - sigma).max(0.0);
    }
    let nf = n as f64;
    let p = 2.0 / nf;
    let h = |l: f64| (l - lambda_hat).powi(2) + nf * sigma * l.powf(p);
    let dh = |l: f64| 2.0 * (l - lambda_hat) + 2.0 * sigma * l.powf(p - 1.0);
    let inflection = (sigma * (nf - 2.0) / nf).powf(nf / (2.0 * nf - 2.0));
    if inflection >= lambda_hat || dh(inflection) >= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (inflection, lambda_hat);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dh(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = if h(lo) <= h(hi) { lo } else { hi };
    if h(root) < h(0.0) {
        root
    } else {
        0.0
    }
}

/// Smallest `σ` at which [`theorem2_weight`] returns `0` for this `λ̂` and order.
///
/// With `t = (N−2)/(N−1)` it equals `(1−t) · t^{1−2/N} · λ̂^{2−2/N}`.
pub fn theorem2_threshold(lambda_hat: f64, n: usize) -> f64 {
    assert!(n >= 2, "order must be at least 2");
    let nf = n as f64;
    let t = (nf - 2.0) / (nf - 1.0);
    (1.0 - t) * t.powf(1.0 - 2.0 / nf) * lambda_hat.max(0.0).powf(2.0 - 2.0 / nf)
}

/// Soft-thresholds the singular values of `x` by `σ`.
pub fn soft_threshold_svd(x: &Matrix, sigma: f64) -> Matrix {
    let dm = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.values());
    let mut svd = dm.svd(true, true);
    svd.singular_values
        .iter_mut()
        .for_each(|s| *s = (*s - sigma).max(0.0));
    let out = svd.recompose().expect("both factors were computed");
    Matrix::from_fn(x.rows(), x.cols(), |i, j| out[(i, j)])
}

/// Solves `argmin_A ‖X_(i) − A Zᵀ‖² + σ‖A‖²` with `Z` the Khatri-Rao product
/// of the companion factors, last companion slowest.
///
/// `companions` lists the other modes' factors in mode order, matching the
/// column order of the unfolding.
pub fn ridge_update(unfolded: &Matrix, companions: &[Matrix], sigma: f64) -> Result<Matrix> {
    let Some(first) = companions.first() else {
        return Err(Error::InvalidConfig("ridge update needs at least one companion factor".into()));
    };
    let r = first.cols();
    let rows: usize = companions.iter().map(Matrix::rows).product();
    if rows != unfolded.cols() {
        return Err(Error::ShapeMismatch(format!(
            "unfolding has {} columns but the companions span {rows}",
            unfolded.cols()
        )));
    }
    let mut z = companions[companions.len() - 1].clone();
    for c in companions.iter().rev().skip(1) {
        z = khatri_rao(&z, c)?;
    }
    let mut gamma = Matrix::from_fn(r, r, |_, _| 1.0);
    for c in companions {
        gamma.hadamard_assign(&c.gram());
    }
    let m = unfolded.matmul(&z)?;
    solve_block(&m, &gamma, sigma, false, || "the ridge block".into())
}

/// `M (Γ + σI)⁻¹`, row by row.
fn solve_block(
    m: &Matrix,
    gamma: &Matrix,
    sigma: f64,
    allow_pinv: bool,
    label: impl Fn() -> String,
) -> Result<Matrix> {
    let c = gamma.rows();
    let mut s = gamma.clone();
    for j in 0..c {
        s.set(j, j, s.get(j, j) + sigma);
    }
    if let Some(ch) = Cholesky::new(&s) {
        let mut out = m.clone();
        for i in 0..out.rows() {
            ch.solve_in_place(out.row_mut(i));
        }
        return Ok(out);
    }
    if sigma > 0.0 || allow_pinv {
        return m.matmul(&symmetric_pinv(&s));
    }
    Err(Error::SingularSystem { block: label() })
}

fn sub_block(g: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(cols.len(), cols.len(), |a, b| g.get(cols[a], cols[b]))
}

fn trace(g: &Matrix) -> f64 {
    (0..g.rows()).map(|i| g.get(i, i)).sum()
}

/// `⟨A[:, cols], M⟩`.
fn inner_on(a: &Matrix, m: &Matrix, cols: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        let ar = a.row(i);
        for (j, &c) in cols.iter().enumerate() {
            s += ar[c] * m.get(i, j);
        }
    }
    s
}

/// `Σ_{ab} Γ[a,b] · G[cols_a, cols_b]`.
fn frob_inner_on(gamma: &Matrix, g: &Matrix, cols: &[usize]) -> f64 {
    let mut s = 0.0;
    for (a, &ca) in cols.iter().enumerate() {
        for (b, &cb) in cols.iter().enumerate() {
            s += gamma.get(a, b) * g.get(ca, cb);
        }
    }
    s
}

/// Writes `sol` into the listed columns of `a` and zeros every other column.
fn write_columns(a: &mut Matrix, sol: &Matrix, cols: &[usize]) {
    let r = a.cols();
    let mut mark = vec![usize::MAX; r];
    for (j, &c) in cols.iter().enumerate() {
        mark[c] = j;
    }
    for i in 0..a.rows() {
        let src = sol.row(i).to_vec();
        for (c, v) in a.row_mut(i).iter_mut().enumerate() {
            *v = if mark[c] == usize::MAX { 0.0 } else { src[mark[c]] };
        }
    }
}

struct Blocks {
    active0: Vec<usize>,
    active: Vec<Vec<usize>>,
}

impl Blocks {
    fn new(n_tensors: usize, rank: usize, pattern: Option<&ZeroPattern>) -> Self {
        let p = pattern.cloned().unwrap_or_else(|| ZeroPattern::none(n_tensors, rank));
        Self {
            active0: p.shared_columns(),
            active: (0..n_tensors).map(|k| p.active_columns(k)).collect(),
        }
    }
}

struct Engine<'a> {
    cfg: &'a SolverConfig,
    blocks: Blocks,
    norms_sq: Vec<f64>,
    g0: Matrix,
    grams: Vec<Vec<Matrix>>,
    losses: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SolverConfig, tensors: &[DenseTensor], model: &MultifacModel, pattern: Option<&ZeroPattern>) -> Self {
        Self {
            cfg,
            blocks: Blocks::new(tensors.len(), model.rank(), pattern),
            norms_sq: tensors.iter().map(DenseTensor::norm_sq).collect(),
            g0: model.shared_factor().gram(),
            grams: model
                .tensor_factors()
                .iter()
                .map(|fs| fs.iter().map(Matrix::gram).collect())
                .collect(),
            losses: vec![0.0; tensors.len()],
        }
    }

    fn refresh_norms(&mut self, tensors: &[DenseTensor]) {
        self.norms_sq = tensors.iter().map(DenseTensor::norm_sq).collect();
    }

    fn penalty_norm(&self) -> f64 {
        trace(&self.g0) + self.grams.iter().flatten().map(trace).sum::<f64>()
    }

    fn penalized(&self, sigma: f64) -> f64 {
        self.losses.iter().sum::<f64>() + sigma * self.penalty_norm()
    }

    /// Hadamard product of the Grams of every factor of tensor `k` except
    /// non-shared mode `skip` (`None` skips the shared factor), on `cols`.
    fn gamma(&self, k: usize, skip: Option<usize>, cols: &[usize]) -> Matrix {
        let mut g = Matrix::from_fn(cols.len(), cols.len(), |_, _| 1.0);
        if skip.is_some() {
            g.hadamard_assign(&sub_block(&self.g0, cols));
        }
        for (i, gi) in self.grams[k].iter().enumerate() {
            if Some(i) != skip {
                g.hadamard_assign(&sub_block(gi, cols));
            }
        }
        g
    }

    /// One full sweep: shared factor, then every mode of every tensor.
    fn sweep(
        &mut self,
        tensors: &[DenseTensor],
        model: &mut MultifacModel,
        sigma: f64,
        block_trace: &mut Vec<(f64, f64)>,
    ) -> Result<()> {
        let allow = self.cfg.pseudo_inverse;
        let cols0 = self.blocks.active0.clone();
        let mut parts = Vec::with_capacity(tensors.len());
        let mut m_sum = Matrix::zeros(model.shared_factor().rows(), cols0.len());
        let mut g_sum = Matrix::zeros(cols0.len(), cols0.len());
        for (k, x) in tensors.iter().enumerate() {
            let m = mttkrp(x, &model.factors_of(k), 0, &cols0);
            let g = self.gamma(k, None, &cols0);
            add_assign(&mut m_sum, &m);
            add_assign(&mut g_sum, &g);
            parts.push((m, g));
        }
        let sol = solve_block(&m_sum, &g_sum, sigma, allow, || "the shared factor".into())?;
        write_columns(model.shared_factor_mut(), &sol, &cols0);
        self.g0 = model.shared_factor().gram();
        for (k, (m, g)) in parts.iter().enumerate() {
            self.losses[k] = self.norms_sq[k] - 2.0 * inner_on(model.shared_factor(), m, &cols0)
                + frob_inner_on(g, &self.g0, &cols0);
        }
        block_trace.push((sigma, self.penalized(sigma)));

        for (k, x) in tensors.iter().enumerate() {
            let cols = self.blocks.active[k].clone();
            for i in 0..model.tensor_factors()[k].len() {
                let m = mttkrp(x, &model.factors_of(k), i + 1, &cols);
                let g = self.gamma(k, Some(i), &cols);
                let sol = solve_block(&m, &g, sigma, allow, || {
                    format!("factor {} of tensor {}", i + 2, k + 1)
                })?;
                let a = &mut model.tensor_factors_mut()[k][i];
                write_columns(a, &sol, &cols);
                self.grams[k][i] = a.gram();
                self.losses[k] = self.norms_sq[k] - 2.0 * inner_on(a, &m, &cols)
                    + frob_inner_on(&g, &self.grams[k][i], &cols);
                block_trace.push((sigma, self.penalized(sigma)));
            }
        }
        Ok(())
    }
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
        *x += y;
    }
}

/// Runs sweeps from `model` until convergence or `max_sweeps`.
pub(crate) fn run_engine(
    tensors: &mut [DenseTensor],
    mut model: MultifacModel,
    cfg: &SolverConfig,
    pattern: Option<&ZeroPattern>,
    max_sweeps: usize,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<SingleRun> {
    let mut engine = Engine::new(cfg, tensors, &model, pattern);
    let mut run = SingleRun {
        model: MultifacModel::zeros(&[vec![1, 1]], 0)?,
        objective_trace: Vec::new(),
        block_trace: Vec::new(),
        surrogate_trace: Vec::new(),
        penalized_final: f64::NAN,
        unpenalized_final: f64::NAN,
        n_sweeps: 0,
        converged: false,
    };
    let mut prev = f64::NAN;
    for t in 0..max_sweeps {
        let sigma = tempered_sigma(cfg.sigma, cfg.temper_steps, t);
        engine.sweep(tensors, &mut model, sigma, &mut run.block_trace)?;
        let obj = engine.penalized(sigma);
        run.objective_trace.push(obj);
        run.n_sweeps = t + 1;
        let mut loss = engine.losses.iter().sum::<f64>();
        let mut verdict = None;
        if let Some(h) = hook.as_deref_mut() {
            let out = h(&model, tensors)?;
            engine.refresh_norms(tensors);
            loss += out.loss_delta;
            run.surrogate_trace.push(obj + out.loss_delta);
            verdict = out.converged;
        }
        run.penalized_final = loss + sigma * engine.penalty_norm();
        run.unpenalized_final = loss;
        if t > cfg.temper_steps {
            let done = match verdict {
                Some(v) => v,
                None => (prev - obj).abs() <= cfg.tolerance * prev.abs(),
            };
            if done {
                run.converged = true;
                break;
            }
        }
        prev = obj;
    }
    run.model = model;
    Ok(run)
}

/// Random starting point: standard normal entries, columns rescaled so the
/// initial reconstruction of each tensor is on the scale of its data.
pub fn initial_model(
    data: &LinkedTensorSet,
    rank: usize,
    seed: u64,
    pattern: Option<&ZeroPattern>,
) -> Result<MultifacModel> {
    initial_model_for(data.tensors(), rank, seed, pattern)
}

pub(crate) fn initial_model_for(
    tensors: &[DenseTensor],
    rank: usize,
    seed: u64,
    pattern: Option<&ZeroPattern>,
) -> Result<MultifacModel> {
    let mut rng = rng::stream(seed, &[]);
    let mut gauss = |rows: usize| {
        let mut m = Matrix::from_fn(rows, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        for (j, n) in m.column_norms().into_iter().enumerate() {
            m.scale_column(j, if n > 0.0 { 1.0 / n } else { 0.0 });
        }
        m
    };
    let mut shared = gauss(tensors[0].dims()[0]);
    let mut factors: Vec<Vec<Matrix>> = tensors
        .iter()
        .map(|x| x.dims()[1..].iter().map(|&d| gauss(d)).collect())
        .collect();
    let scale: Vec<f64> = tensors
        .iter()
        .map(|x| {
            let s = x.norm_sq().sqrt() / rank as f64;
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let c0 = tensors
        .iter()
        .zip(&scale)
        .map(|(x, s)| s.powf(1.0 / x.shape().order() as f64))
        .sum::<f64>()
        / tensors.len() as f64;
    shared.scale(c0);
    for (fs, s) in factors.iter_mut().zip(&scale) {
        let c = (s / c0).powf(1.0 / fs.len() as f64);
        fs.iter_mut().for_each(|f| f.scale(c));
    }
    if let Some(p) = pattern {
        for (k, fs) in factors.iter_mut().enumerate() {
            for r in 0..rank {
                if p.is_constrained(k, r) {
                    fs.iter_mut().for_each(|f| f.scale_column(r, 0.0));
                }
            }
        }
        let free = p.shared_columns();
        for r in 0..rank {
            if !free.contains(&r) {
                shared.scale_column(r, 0.0);
            }
        }
    }
    MultifacModel::new(shared, factors, 0.0)
}

/// Runs one start from a given model without post-processing.
pub fn run_from(
    data: &LinkedTensorSet,
    init: MultifacModel,
    cfg: &SolverConfig,
    pattern: Option<&ZeroPattern>,
) -> Result<SingleRun> {
    cfg.validate()?;
    check_inputs(data, init.rank(), pattern)?;
    let mut tensors = data.tensors().to_vec();
    run_engine(&mut tensors, init, cfg, pattern, cfg.max_iterations, None)
}

pub(crate) fn check_inputs(data: &LinkedTensorSet, rank: usize, pattern: Option<&ZeroPattern>) -> Result<()> {
    for (k, x) in data.tensors().iter().enumerate() {
        if x.shape().order() < 2 {
            return Err(Error::InvalidShape(format!(
                "tensor {} has order 1; factorization needs order at least 2",
                k + 1
            )));
        }
    }
    if let Some(p) = pattern {
        p.check(data.n_tensors(), rank)?;
    }
    Ok(())
}

/// Runs `fit` for each start on the rayon pool and keeps the lowest score,
/// ties going to the earliest start.
pub fn multi_start<T, F, S>(n_starts: usize, seed: u64, fit: F, score: S) -> Result<(usize, Vec<f64>, T)>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
    S: Fn(&T) -> f64,
{
    if n_starts == 0 {
        return Err(Error::InvalidConfig("n_starts must be at least 1".into()));
    }
    let results: Vec<Result<T>> = (0..n_starts)
        .into_par_iter()
        .map(|s| fit(s, rng::derive_seed(seed, &[START_TAG, s as u64])))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<T>>>()?;
    let scores: Vec<f64> = results.iter().map(&score).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    let chosen = results.into_iter().nth(best).expect("index in range");
    Ok((best, scores, chosen))
}

/// Post-processing shared by every public fit: rebalance, order, report.
pub(crate) fn finish(
    run: SingleRun,
    start_index: usize,
    start_objectives: Vec<f64>,
    cfg: &SolverConfig,
) -> (MultifacModel, FitReport) {
    let mut model = run.model;
    model.set_penalty(cfg.sigma);
    model.rebalance();
    model.canonicalize();
    let effective_ranks = classify_structure(&component_weights(&model, cfg.zero_threshold));
    let report = FitReport {
        penalized_final: run.unpenalized_final + cfg.sigma * model.squared_norm(),
        objective_trace: run.objective_trace,
        unpenalized_final: run.unpenalized_final,
        n_sweeps: run.n_sweeps,
        converged: run.converged,
        start_index,
        start_objectives,
        sigma: cfg.sigma,
        effective_ranks,
    };
    (model, report)
}

/// Fits the linked model to complete data.
pub fn fit_multifac(
    data: &LinkedTensorSet,
    cfg: &SolverConfig,
    pattern: Option<&ZeroPattern>,
) -> Result<(MultifacModel, FitReport)> {
    cfg.validate()?;
    if !data.is_complete() {
        return Err(Error::InvalidConfig(
            "data has missing entries; use the imputation routines".into(),
        ));
    }
    check_inputs(data, cfg.rank, pattern)?;
    let (best, scores, run) = multi_start(
        cfg.n_starts,
        cfg.seed,
        |_, seed| {
            let init = initial_model_for(data.tensors(), cfg.rank, seed, pattern)?;
            let mut tensors = data.tensors().to_vec();
            run_engine(&mut tensors, init, cfg, pattern, cfg.max_iterations, None)
        },
        |r| r.unpenalized_final,
    )?;
    Ok(finish(run, best, scores, cfg))
}

/// Fits a penalized CP model to one complete tensor.
pub fn fit_cp(x: &DenseTensor, cfg: &SolverConfig) -> Result<(CpFactors, FitReport)> {
    let data = LinkedTensorSet::single(x.clone())?;
    let (model, report) = fit_multifac(&data, cfg, None)?;
    Ok((model.to_cp()?, report))
}

/// `Σ_k ‖X_k − X̂_k‖²` over observed entries.
pub fn unpenalized_objective(data: &LinkedTensorSet, m: &MultifacModel) -> Result<f64> {
    if m.n_tensors() != data.n_tensors() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} tensors, data has {}",
            m.n_tensors(),
            data.n_tensors()
        )));
    }
    let mut total = 0.0;
    for (k, (x, mask)) in data.tensors().iter().zip(data.masks()).enumerate() {
        let xh = m.reconstruct(k)?;
        if xh.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {} but the model reconstructs {}",
                k + 1,
                x.shape(),
                xh.shape()
            )));
        }
        total += x
            .values()
            .iter()
            .zip(xh.values())
            .zip(mask.observed())
            .filter(|(_, &o)| o)
            .map(|((a, b), _)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Unpenalized objective plus `σ (‖A0‖² + Σ‖A_i^(k)‖²)`.
pub fn penalized_objective(data: &LinkedTensorSet, m: &MultifacModel, sigma: f64) -> Result<f64> {
    Ok(unpenalized_objective(data, m)? + sigma * m.squared_norm())
}
