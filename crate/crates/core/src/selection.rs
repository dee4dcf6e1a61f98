//! Two-step cross-validation of the penalty.
//!
//! Step 1 scans a penalty grid with the rank budget free, scores each value by
//! the error of imputing held-out entries, and keeps the largest penalty whose
//! mean error is within one standard error of the best. The structure of the
//! refit at that penalty fixes which components exist and where. Step 2 holds
//! that structure fixed through a zero pattern and picks the penalty with the
//! lowest mean held-out error on a finer grid that includes zero.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::imputation::{em_als, em_als_from, ImputeConfig, ImputeResult};
use crate::model::{classify_structure, component_weights, MultifacModel, StructurePattern};
use crate::rng;
use crate::solver::{
    theorem2_threshold, FitReport, SolverConfig, ZeroPattern,
};
use crate::tensor::ObservationMask;

const HOLDOUT_TAG: u64 = 0x484f_4c44;
const SLAB_TAG: u64 = 0x534c_4142;
const CELL_TAG: u64 = 0x4345_4c4c;

/// How entries are held out in each fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HoldoutKind {
    /// Individual observed entries only.
    EntryWise,
    /// Individual entries plus whole first-mode slabs.
    Mixed { tensorwise_fraction: f64 },
}

/// Cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub n_folds: usize,
    /// Fraction of each tensor's observed entries hidden per fold.
    pub holdout_fraction: f64,
    pub holdout_kind: HoldoutKind,
    /// Ascending step-1 grid; empty means [`default_sigma_grid`].
    pub sigma_grid: Vec<f64>,
    /// Positive points of the default step-1 grid.
    pub grid_points: usize,
    /// Positive points of the step-2 grid.
    pub step2_points: usize,
    /// Width of the tolerance band in standard errors.
    pub se_slack: f64,
    /// Starts per cross-validation cell; `None` keeps the template's count.
    pub fold_starts: Option<usize>,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            n_folds: 5,
            holdout_fraction: 0.1,
            holdout_kind: HoldoutKind::EntryWise,
            sigma_grid: Vec::new(),
            grid_points: 12,
            step2_points: 8,
            se_slack: 1.0,
            fold_starts: None,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::InfeasibleHoldout(format!(
                "holdout fraction {} is outside (0, 0.5)",
                self.holdout_fraction
            )));
        }
        if let HoldoutKind::Mixed { tensorwise_fraction } = self.holdout_kind {
            if !(tensorwise_fraction > 0.0 && tensorwise_fraction < 0.5) {
                return Err(Error::InfeasibleHoldout(format!(
                    "tensor-wise holdout fraction {tensorwise_fraction} is outside (0, 0.5)"
                )));
            }
        }
        check_grid(&self.sigma_grid, true)?;
        if self.sigma_grid.is_empty() && self.grid_points < 2 {
            return Err(Error::InvalidGrid("a generated grid needs at least 2 points".into()));
        }
        if self.fold_starts == Some(0) {
            return Err(Error::InvalidConfig("fold_starts must be at least 1".into()));
        }
        if !(self.se_slack >= 0.0) {
            return Err(Error::InvalidConfig("se_slack must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64], allow_empty: bool) -> Result<()> {
    if grid.is_empty() && !allow_empty {
        return Err(Error::InvalidGrid("grid is empty".into()));
    }
    if grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidGrid("grid values must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid("grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Entries hidden in one fold, as flat offsets per tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holdout {
    pub hidden: Vec<Vec<usize>>,
}

impl Holdout {
    /// The data masks with this fold's entries removed.
    pub fn masks(&self, data: &LinkedTensorSet) -> Vec<ObservationMask> {
        data.masks()
            .iter()
            .zip(&self.hidden)
            .map(|(m, h)| m.hide(h))
            .collect()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden.iter().map(Vec::len).sum()
    }
}

/// Random folds of held-out entries drawn from the observed entries of every
/// tensor; folds are disjoint whenever the observed entries allow it.
pub fn make_holdouts(data: &LinkedTensorSet, plan: &CvPlan) -> Result<Vec<Holdout>> {
    plan.validate()?;
    let k_count = data.n_tensors();
    let i0 = data.shared_dim();
    let mut perms = Vec::with_capacity(k_count);
    for (k, m) in data.masks().iter().enumerate() {
        let mut obs: Vec<usize> = (0..m.observed().len()).filter(|&i| m.is_observed(i)).collect();
        obs.shuffle(&mut rng::stream(plan.seed, &[HOLDOUT_TAG, k as u64]));
        perms.push(obs);
    }
    let slab_count = match plan.holdout_kind {
        HoldoutKind::EntryWise => 0,
        HoldoutKind::Mixed { tensorwise_fraction } => {
            ((tensorwise_fraction * i0 as f64).round() as usize).max(1)
        }
    };

    let mut folds = Vec::with_capacity(plan.n_folds);
    for f in 0..plan.n_folds {
        let slabs = if slab_count > 0 {
            choose_slabs(data, slab_count, plan.seed, f)?
        } else {
            vec![Vec::new(); k_count]
        };
        let mut hidden = Vec::with_capacity(k_count);
        for (k, (perm, m)) in perms.iter().zip(data.masks()).enumerate() {
            let n_obs = perm.len();
            let numel = m.observed().len();
            let count = ((plan.holdout_fraction * n_obs as f64).round() as usize).max(1);
            let chunk: Vec<usize> = if plan.n_folds * count <= n_obs {
                perm[f * count..(f + 1) * count].to_vec()
            } else {
                let start = f * n_obs / plan.n_folds;
                (0..count).map(|j| perm[(start + j) % n_obs]).collect()
            };
            let slab_len = numel / i0;
            let mut set = vec![false; numel];
            for &i in &chunk {
                set[i] = true;
            }
            for &s in &slabs[k] {
                for i in s * slab_len..(s + 1) * slab_len {
                    if m.is_observed(i) {
                        set[i] = true;
                    }
                }
            }
            let h: Vec<usize> = (0..numel).filter(|&i| set[i]).collect();
            if 2 * (n_obs - h.len()) < numel {
                return Err(Error::InfeasibleHoldout(format!(
                    "fold {} would leave tensor {} with {} of {} entries observed (need at least half)",
                    f + 1,
                    k + 1,
                    n_obs - h.len(),
                    numel
                )));
            }
            hidden.push(h);
        }
        folds.push(Holdout { hidden });
    }
    Ok(folds)
}

/// Slabs to hide per tensor in fold `f`, never hiding a sample everywhere.
fn choose_slabs(data: &LinkedTensorSet, count: usize, seed: u64, f: usize) -> Result<Vec<Vec<usize>>> {
    let k_count = data.n_tensors();
    let i0 = data.shared_dim();
    let mut gone: Vec<Vec<bool>> = data
        .masks()
        .iter()
        .map(|m| {
            let mut g = vec![false; i0];
            for &s in m.tensorwise_missing_slabs() {
                g[s] = true;
            }
            g
        })
        .collect();
    let mut rng = rng::stream(seed, &[SLAB_TAG, f as u64]);
    let mut out = vec![Vec::new(); k_count];
    for k in 0..k_count {
        let mut cand: Vec<usize> = (0..i0)
            .filter(|&s| !gone[k][s])
            .filter(|&s| k_count == 1 || (0..k_count).any(|j| j != k && !gone[j][s]))
            .collect();
        cand.shuffle(&mut rng);
        if cand.len() < count {
            return Err(Error::InfeasibleHoldout(format!(
                "tensor {} has only {} slabs eligible for hiding, {} requested",
                k + 1,
                cand.len(),
                count
            )));
        }
        let mut chosen = cand[..count].to_vec();
        chosen.sort_unstable();
        for &s in &chosen {
            gone[k][s] = true;
        }
        out[k] = chosen;
    }
    Ok(out)
}

/// Held-out performance at one penalty value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sigma: f64,
    /// Pooled `RSE_missing` of each fold; `None` where the fit failed.
    pub fold_rse: Vec<Option<f64>>,
    /// Total effective rank of each fold's fit.
    pub fold_ranks: Vec<Option<usize>>,
    pub mean: Option<f64>,
    /// Sample standard deviation over folds divided by `√folds`.
    pub se: Option<f64>,
}

impl GridPoint {
    pub fn from_folds(sigma: f64, cells: Vec<Option<(f64, usize)>>) -> Self {
        let fold_rse: Vec<Option<f64>> = cells.iter().map(|c| c.map(|(r, _)| r)).collect();
        let fold_ranks = cells.iter().map(|c| c.map(|(_, n)| n)).collect();
        let ok: Vec<f64> = fold_rse.iter().flatten().copied().collect();
        let (mean, se) = if ok.is_empty() {
            (None, None)
        } else {
            let n = ok.len() as f64;
            let mean = ok.iter().sum::<f64>() / n;
            let se = if ok.len() > 1 {
                (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(se))
        };
        Self {
            sigma,
            fold_rse,
            fold_ranks,
            mean,
            se,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_some()
    }

    /// Median of the fold ranks.
    pub fn rank(&self) -> Option<usize> {
        let mut r: Vec<usize> = self.fold_ranks.iter().flatten().copied().collect();
        if r.is_empty() {
            return None;
        }
        r.sort_unstable();
        Some(r[(r.len() - 1) / 2])
    }
}

/// Largest-σ point whose mean is within `slack` standard errors of the minimum.
pub fn select_one_se(grid: &[GridPoint], slack: f64) -> Option<usize> {
    let best = argmin_mean(grid)?;
    let bound = grid[best].mean? + slack * grid[best].se.unwrap_or(0.0);
    (0..grid.len())
        .rev()
        .find(|&i| grid[i].mean.is_some_and(|m| m <= bound))
}

/// Lowest mean, ties to the smaller σ.
pub fn argmin_mean(grid: &[GridPoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in grid.iter().enumerate() {
        if let Some(m) = p.mean {
            if best.is_none_or(|b| m < grid[b].mean.expect("valid")) {
                best = Some(i);
            }
        }
    }
    best
}

/// Outcome of one cross-validation step.
#[derive(Debug, Clone)]
pub struct CvStep {
    pub grid: Vec<GridPoint>,
    pub selected_index: usize,
    pub selected_sigma: f64,
    /// Refit on all data at the selected penalty.
    pub fit: ImputeResult,
    /// Structure of the refit, over the columns of [`CvStep::fit`]'s model.
    pub pattern: StructurePattern,
    /// Fold fits at the selected penalty; `None` where a fit failed.
    pub fold_models: Vec<Option<MultifacModel>>,
}

impl CvStep {
    pub fn model(&self) -> &MultifacModel {
        &self.fit.model
    }

    pub fn report(&self) -> &FitReport {
        &self.fit.report
    }
}

/// Pooled relative squared error of one imputation on the hidden entries.
fn pooled_rse(data: &LinkedTensorSet, holdout: &Holdout, fit: &ImputeResult) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((x, y), h) in data.tensors().iter().zip(fit.completed.tensors()).zip(&holdout.hidden) {
        for &i in h {
            let t = x.values()[i];
            num += (y.values()[i] - t).powi(2);
            den += t * t;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Fits every grid point on every fold and keeps the fold models.
fn evaluate_grid(
    data: &LinkedTensorSet,
    folds: &[Holdout],
    grid: &[f64],
    template: &ImputeConfig,
    pattern: Option<&ZeroPattern>,
    plan: &CvPlan,
    warm: &[Option<MultifacModel>],
) -> (Vec<GridPoint>, Vec<Vec<Option<MultifacModel>>>) {
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|s| (0..folds.len()).map(move |f| (s, f)))
        .collect();
    let results: Vec<Option<(f64, usize, MultifacModel)>> = cells
        .par_iter()
        .map(|&(s, f)| {
            let masked = data.with_masks(folds[f].masks(data)).ok()?;
            let mut cfg = template.clone();
            cfg.solver.sigma = grid[s];
            cfg.solver.seed = rng::derive_seed(plan.seed, &[CELL_TAG, f as u64, s as u64]);
            if let Some(n) = plan.fold_starts {
                cfg.solver.n_starts = n;
            }
            let init = match (pattern, warm.get(f)) {
                (Some(z), Some(Some(src))) => warm_start(src, z, cfg.solver.zero_threshold),
                _ => None,
            };
            let fit = em_als_from(&masked, &cfg, pattern, init.as_ref()).ok()?;
            let rse = pooled_rse(data, &folds[f], &fit)?;
            Some((rse, fit.report.effective_ranks.ranks().total, fit.model))
        })
        .collect();
    let mut points = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    let mut it = results.into_iter();
    for &sigma in grid {
        let row: Vec<_> = it.by_ref().take(folds.len()).collect();
        points.push(GridPoint::from_folds(
            sigma,
            row.iter().map(|c| c.as_ref().map(|(r, n, _)| (*r, *n))).collect(),
        ));
        models.push(row.into_iter().map(|c| c.map(|(_, _, m)| m)).collect());
    }
    (points, models)
}

/// Starting point for a fit under `zeros` built from the components of
/// `source`.
///
/// Each slot takes the strongest unused component whose set of active
/// tensors equals the slot's free tensors, or else one active in a superset
/// of them. Returns `None` when some slot finds no component.
pub fn warm_start(source: &MultifacModel, zeros: &ZeroPattern, tau: f64) -> Option<MultifacModel> {
    let w = component_weights(source, tau);
    let k_count = source.n_tensors();
    if zeros.n_tensors() != k_count {
        return None;
    }
    let active: Vec<Vec<bool>> = (0..source.rank())
        .map(|c| (0..k_count).map(|k| w.activity[k][c]).collect())
        .collect();
    let strength = |c: usize| (0..k_count).map(|k| w.total(k, c)).sum::<f64>();
    let mut order: Vec<usize> = (0..source.rank()).collect();
    order.sort_by(|&a, &b| strength(b).total_cmp(&strength(a)));
    let mut used = vec![false; source.rank()];
    let keep_all: Vec<usize> = vec![0; zeros.rank()];
    let mut init = source.select_components(&keep_all);
    for r in 0..zeros.rank() {
        let want: Vec<bool> = (0..k_count).map(|k| !zeros.is_constrained(k, r)).collect();
        let covers = |c: usize| active[c].iter().zip(&want).all(|(&a, &b)| a || !b);
        let pick = order
            .iter()
            .copied()
            .find(|&c| !used[c] && active[c] == want)
            .or_else(|| order.iter().copied().find(|&c| !used[c] && covers(c)))?;
        used[pick] = true;
        init.copy_component(r, source, pick, &want);
    }
    Some(init)
}

fn refit(
    data: &LinkedTensorSet,
    template: &ImputeConfig,
    sigma: f64,
    pattern: Option<&ZeroPattern>,
    warm: Option<&MultifacModel>,
) -> Result<(ImputeResult, StructurePattern)> {
    let mut cfg = template.clone();
    cfg.solver.sigma = sigma;
    let fit = em_als_from(data, &cfg, pattern, warm)?;
    let p = classify_structure(&component_weights(&fit.model, cfg.solver.zero_threshold));
    Ok((fit, p))
}

/// Step 1: penalty scan with the full rank budget and one-standard-error selection.
pub fn cv_step1(data: &LinkedTensorSet, plan: &CvPlan, template: &ImputeConfig) -> Result<CvStep> {
    template.validate()?;
    let folds = make_holdouts(data, plan)?;
    let grid = if plan.sigma_grid.is_empty() {
        default_sigma_grid(data, plan.grid_points, template)?
    } else {
        plan.sigma_grid.clone()
    };
    let (points, mut models) = evaluate_grid(data, &folds, &grid, template, None, plan, &[]);
    let selected_index = select_one_se(&points, plan.se_slack)
        .ok_or_else(|| Error::InvalidGrid("every fit on every grid point failed".into()))?;
    let selected_sigma = points[selected_index].sigma;
    let (fit, pattern) = refit(data, template, selected_sigma, None, None)?;
    Ok(CvStep {
        grid: points,
        selected_index,
        selected_sigma,
        fit,
        pattern,
        fold_models: std::mem::take(&mut models[selected_index]),
    })
}

/// `{0} ∪` `n` log-spaced values from `σ/10³` to `σ`.
pub fn step2_grid(sigma_1se: f64, n: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    if sigma_1se > 0.0 && n > 0 {
        g.extend(geomspace(sigma_1se / 1e3, sigma_1se, n));
    }
    g
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Step 2: penalty scan with the structure held fixed, minimum mean selection.
///
/// The returned model keeps only the nonzero components of `pattern`. When
/// `start` is the step-1 result that produced `pattern`, every fold fit also
/// starts from the step-1 model of the same fold and the final refit from the
/// step-1 refit.
pub fn cv_step2(
    data: &LinkedTensorSet,
    plan: &CvPlan,
    template: &ImputeConfig,
    pattern: &StructurePattern,
    grid: &[f64],
    start: Option<&CvStep>,
) -> Result<CvStep> {
    template.validate()?;
    check_grid(grid, false)?;
    let folds = make_holdouts(data, plan)?;
    let (zeros, kept) = ZeroPattern::from_structure(pattern);
    if kept.is_empty() {
        return zero_rank_step(data, &folds, grid, template);
    }
    let mut cfg = template.clone();
    cfg.solver.rank = kept.len();
    let tau = cfg.solver.zero_threshold;
    let fold_warm = start.map_or(&[][..], |s| &s.fold_models[..]);
    let (points, mut models) = evaluate_grid(data, &folds, grid, &cfg, Some(&zeros), plan, fold_warm);
    let selected_index = argmin_mean(&points)
        .ok_or_else(|| Error::InvalidGrid("every fit on every grid point failed".into()))?;
    let selected_sigma = points[selected_index].sigma;
    let init = start.and_then(|s| warm_start(s.model(), &zeros, tau));
    let (fit, pattern) = refit(data, &cfg, selected_sigma, Some(&zeros), init.as_ref())?;
    Ok(CvStep {
        grid: points,
        selected_index,
        selected_sigma,
        fit,
        pattern,
        fold_models: std::mem::take(&mut models[selected_index]),
    })
}

fn zero_rank_step(
    data: &LinkedTensorSet,
    folds: &[Holdout],
    grid: &[f64],
    template: &ImputeConfig,
) -> Result<CvStep> {
    let fit = zero_fit(data, template)?;
    let cells: Vec<Option<(f64, usize)>> = folds
        .iter()
        .map(|h| {
            let masked = data.with_masks(h.masks(data)).ok()?;
            let f = zero_fit(&masked, template).ok()?;
            pooled_rse(data, h, &f).map(|r| (r, 0))
        })
        .collect();
    let points: Vec<GridPoint> = grid
        .iter()
        .map(|&s| GridPoint::from_folds(s, cells.clone()))
        .collect();
    let pattern = fit.report.effective_ranks.clone();
    Ok(CvStep {
        grid: points,
        selected_index: 0,
        selected_sigma: grid[0],
        fit,
        pattern,
        fold_models: vec![None; folds.len()],
    })
}

/// Empty model; missing entries are filled with the (preprocessed) zero.
fn zero_fit(data: &LinkedTensorSet, template: &ImputeConfig) -> Result<ImputeResult> {
    let shapes: Vec<Vec<usize>> = data.tensors().iter().map(|t| t.dims().to_vec()).collect();
    let model = MultifacModel::zeros(&shapes, 0)?;
    let transforms = if template.preprocess {
        crate::imputation::fit_preprocessing(data)
    } else {
        vec![crate::imputation::Affine::IDENTITY; data.n_tensors()]
    };
    let filled = data
        .tensors()
        .iter()
        .zip(data.masks())
        .zip(&transforms)
        .map(|((x, m), a)| {
            let values = x
                .values()
                .iter()
                .zip(m.observed())
                .map(|(&v, &o)| if o { v } else { a.inverse(0.0) })
                .collect();
            crate::tensor::DenseTensor::new(x.shape().clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    let rss = crate::solver::unpenalized_objective(data, &model)?;
    let effective_ranks = classify_structure(&component_weights(&model, template.solver.zero_threshold));
    Ok(ImputeResult {
        model,
        completed: LinkedTensorSet::complete(filled)?,
        masks: data.masks().to_vec(),
        report: FitReport {
            objective_trace: Vec::new(),
            penalized_final: rss,
            unpenalized_final: rss,
            n_sweeps: 0,
            converged: true,
            start_index: 0,
            start_objectives: vec![rss],
            sigma: 0.0,
            effective_ranks,
        },
        transforms,
        surrogate_trace: Vec::new(),
    })
}

/// Fit with the structure of `pattern` held fixed.
///
/// Only the nonzero components are kept; an all-zero pattern gives the empty
/// model. `start`, typically the model `pattern` was read from, adds a warm
/// start built by [`warm_start`].
pub fn fit_constrained(
    data: &LinkedTensorSet,
    pattern: &StructurePattern,
    sigma: f64,
    template: &ImputeConfig,
    start: Option<&MultifacModel>,
) -> Result<ImputeResult> {
    let (zeros, kept) = ZeroPattern::from_structure(pattern);
    if kept.is_empty() {
        return zero_fit(data, template);
    }
    let mut cfg = template.clone();
    cfg.solver.rank = kept.len();
    cfg.solver.sigma = sigma;
    let init = start.and_then(|m| warm_start(m, &zeros, cfg.solver.zero_threshold));
    em_als_from(data, &cfg, Some(&zeros), init.as_ref())
}

/// Both steps end to end.
#[derive(Debug, Clone)]
pub struct CvResult {
    pub step1: CvStep,
    pub step2: CvStep,
}

impl CvResult {
    pub fn summary(&self) -> CvSummary {
        CvSummary {
            format_version: crate::model::FORMAT_VERSION,
            selected_sigma_1se: self.step1.selected_sigma,
            ranks: self.step1.pattern.ranks(),
            step2_sigma: self.step2.selected_sigma,
            step1_grid: self.step1.grid.clone(),
            step2_grid: self.step2.grid.clone(),
        }
    }

    /// CSV trace with columns `step,sigma,fold,rse_missing,rank`.
    pub fn trace_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "sigma", "fold", "rse_missing", "rank"])?;
        for (step, grid) in [(1, &self.step1.grid), (2, &self.step2.grid)] {
            for p in grid {
                for (f, (r, k)) in p.fold_rse.iter().zip(&p.fold_ranks).enumerate() {
                    out.write_record([
                        step.to_string(),
                        format!("{}", p.sigma),
                        (f + 1).to_string(),
                        r.map_or(String::new(), |v| format!("{v}")),
                        k.map_or(String::new(), |v| v.to_string()),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// JSON summary of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub format_version: u32,
    pub selected_sigma_1se: f64,
    pub ranks: crate::model::StructureRanks,
    pub step2_sigma: f64,
    pub step1_grid: Vec<GridPoint>,
    pub step2_grid: Vec<GridPoint>,
}

/// Step 1, then step 2 on `{0} ∪ geomspace(σ_1se/10³, σ_1se)` with the same folds.
pub fn cross_validate(data: &LinkedTensorSet, plan: &CvPlan, template: &ImputeConfig) -> Result<CvResult> {
    let step1 = cv_step1(data, plan, template)?;
    let grid = step2_grid(step1.selected_sigma, plan.step2_points);
    let step2 = cv_step2(data, plan, template, &step1.pattern, &grid, Some(&step1))?;
    Ok(CvResult { step1, step2 })
}

/// `{0}` plus `n_points` log-spaced values from `σ_max/10³` to `σ_max`, where
/// `σ_max` is the smallest penalty at which a rank-one fit of the data has no
/// nonzero stationary weight left and so collapses to zero.
pub fn default_sigma_grid(
    data: &LinkedTensorSet,
    n_points: usize,
    template: &ImputeConfig,
) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::InvalidGrid(format!(
            "need at least 2 grid points, got {n_points}"
        )));
    }
    let sigma_max = rank_one_collapse_sigma(data, template)?;
    let mut g = vec![0.0];
    g.extend(geomspace(sigma_max / 1e3, sigma_max, n_points));
    Ok(g)
}

/// Penalty at which a rank-one fit of `data` collapses to zero.
pub fn rank_one_collapse_sigma(data: &LinkedTensorSet, template: &ImputeConfig) -> Result<f64> {
    let energy: f64 = data.tensors().iter().map(|t| t.norm_sq()).sum();
    if energy == 0.0 {
        return Err(Error::InvalidGrid("data has zero norm".into()));
    }
    let mut cfg = template.clone();
    cfg.solver = SolverConfig {
        rank: 1,
        sigma: 0.0,
        n_starts: template.solver.n_starts.max(3),
        temper_steps: 0,
        pseudo_inverse: true,
        ..template.solver.clone()
    };
    let fit = em_als(data, &cfg, None)?;
    let w = component_weights(&fit.model, cfg.solver.zero_threshold);
    let terms: Vec<(f64, usize)> = (0..data.n_tensors())
        .map(|k| (w.total(k, 0), data.tensors()[k].shape().order() - 1))
        .collect();
    if terms.iter().all(|&(l, _)| l == 0.0) {
        return Err(Error::InvalidGrid("rank-one fit of the data is zero".into()));
    }
    if let [(lambda, n)] = terms[..] {
        return Ok(collapse_threshold(lambda, n + 1));
    }
    Ok(linked_collapse_threshold(&terms))
}

/// Smallest `σ` at which `(λ − λ̂)² + Nσλ^{2/N}` has no stationary point in `λ > 0`.
///
/// For `N = 2` this is `λ̂`; for larger `N` it exceeds the point where zero
/// first becomes the global minimizer.
pub fn collapse_threshold(lambda_hat: f64, n: usize) -> f64 {
    assert!(n >= 2, "order must be at least 2");
    let nf = n as f64;
    let c = (nf - 2.0) / nf;
    let p = nf / (2.0 * nf - 2.0);
    if n == 2 {
        return lambda_hat;
    }
    (lambda_hat / (c.powf(p - 1.0) * (1.0 + c))).powf(1.0 / p)
}

/// Collapse penalty of a linked rank-one component with per-tensor weights
/// `λ̂_k` and `N_k` non-shared modes, located by bisection on the scalar
/// alternating updates of the column norms started from the unpenalized fit.
fn linked_collapse_threshold(terms: &[(f64, usize)]) -> f64 {
    let collapses = |sigma: f64| scalar_als_collapses(terms, sigma);
    let mut hi = terms
        .iter()
        .map(|&(l, n)| theorem2_threshold(l, n + 1).max(collapse_threshold(l, n + 1)))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    while !collapses(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if collapses(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn scalar_als_collapses(terms: &[(f64, usize)], sigma: f64) -> bool {
    let total: f64 = terms.iter().map(|t| t.0).sum();
    let mut a = total.powf(1.0 / 3.0).max(1e-300);
    let mut norms: Vec<Vec<f64>> = terms
        .iter()
        .map(|&(l, n)| vec![(l / a).max(0.0).powf(1.0 / n as f64); n])
        .collect();
    for _ in 0..20_000 {
        let prods: Vec<f64> = norms.iter().map(|c| c.iter().product()).collect();
        let num: f64 = terms.iter().zip(&prods).map(|(&(l, _), p)| l * p).sum();
        let den: f64 = prods.iter().map(|p| p * p).sum::<f64>() + sigma;
        a = num / den;
        for (c, &(l, _)) in norms.iter_mut().zip(terms) {
            for i in 0..c.len() {
                let others: f64 = a * c.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).product::<f64>();
                c[i] = others * l / (others * others + sigma);
            }
        }
        let weight: f64 = norms.iter().map(|c| a * c.iter().product::<f64>()).fold(0.0, f64::max);
        if weight <= 1e-12 * total {
            return true;
        }
    }
    false
}
