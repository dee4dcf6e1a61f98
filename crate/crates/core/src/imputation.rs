//! EM-ALS imputation of entry-wise and slab-wise missing data.
//!
//! Missing entries start at zero (after optional centering and scaling) and
//! are rewritten after every full ALS sweep. Isolated missing entries take the
//! value of the full reconstruction. Entries in a first-mode slab that is
//! missing entirely from a tensor take the value of the shared components
//! only, since individual structure of a sample that was never observed in
//! that tensor cannot be estimated.

use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{classify_structure, component_weights, MultifacModel};
use crate::solver::{
    check_inputs, finish, initial_model_for, multi_start, run_engine, FitReport, HookOutcome,
    SingleRun, SolverConfig, ZeroPattern,
};
use crate::tensor::{ratio, DenseTensor, ObservationMask};

/// Settings for [`em_als`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    pub solver: SolverConfig,
    /// Stop once `‖y_new − y_old‖ / ‖y_old‖` over imputed values falls below this.
    pub em_tolerance: f64,
    /// Maximum number of imputation rounds, one ALS sweep each.
    pub em_max_rounds: usize,
    /// Fill fully missing slabs from shared components only.
    pub shared_only_for_tensorwise: bool,
    /// Center each tensor and scale it to unit norm before fitting.
    pub preprocess: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            em_tolerance: 1e-6,
            em_max_rounds: 100,
            shared_only_for_tensorwise: true,
            preprocess: false,
        }
    }
}

impl ImputeConfig {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.em_tolerance > 0.0) {
            return Err(Error::InvalidConfig("em_tolerance must be positive".into()));
        }
        if self.em_max_rounds == 0 {
            return Err(Error::InvalidConfig("em_max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-tensor affine map `z = (x − offset) · scale` applied before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub offset: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        offset: 0.0,
        scale: 1.0,
    };

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        (x - self.offset) * self.scale
    }

    #[inline]
    pub fn inverse(&self, z: f64) -> f64 {
        z / self.scale + self.offset
    }
}

/// Centering on the observed mean and scaling the centered observed entries
/// to unit norm; tensors with no spread are only centered.
pub fn fit_preprocessing(data: &LinkedTensorSet) -> Vec<Affine> {
    data.tensors()
        .iter()
        .zip(data.masks())
        .map(|(x, m)| {
            let obs: Vec<f64> = observed_values(x, m).collect();
            if obs.is_empty() {
                return Affine::IDENTITY;
            }
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            let norm = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
            Affine {
                offset: mean,
                scale: if norm > 0.0 { 1.0 / norm } else { 1.0 },
            }
        })
        .collect()
}

fn observed_values<'a>(x: &'a DenseTensor, m: &'a ObservationMask) -> impl Iterator<Item = f64> + 'a {
    x.values()
        .iter()
        .zip(m.observed())
        .filter(|(_, &o)| o)
        .map(|(&v, _)| v)
}

/// Applies the maps to observed entries; unobserved entries stay zero.
pub fn apply_preprocessing(data: &LinkedTensorSet, maps: &[Affine]) -> Result<LinkedTensorSet> {
    let tensors = data
        .tensors()
        .iter()
        .zip(data.masks())
        .zip(maps)
        .map(|((x, m), a)| {
            let values = x
                .values()
                .iter()
                .zip(m.observed())
                .map(|(&v, &o)| if o { a.forward(v) } else { 0.0 })
                .collect();
            DenseTensor::new(x.shape().clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    LinkedTensorSet::new(tensors, data.masks().to_vec())
}

/// Cold start: every missing entry set to zero, giving a complete set.
///
/// Applied to preprocessed data, zero is the observed mean of the tensor.
pub fn initial_impute(data: &LinkedTensorSet) -> LinkedTensorSet {
    LinkedTensorSet::complete(data.tensors().to_vec()).expect("shapes already validated")
}

/// Output of [`em_als`].
#[derive(Debug, Clone)]
pub struct ImputeResult {
    /// Fitted model in the preprocessed scale.
    pub model: MultifacModel,
    /// Input with every missing entry filled, in the original scale.
    pub completed: LinkedTensorSet,
    /// Masks of the input; `false` marks imputed entries.
    pub masks: Vec<ObservationMask>,
    pub report: FitReport,
    pub transforms: Vec<Affine>,
    /// Penalized objective on the completed data after each imputation step.
    pub surrogate_trace: Vec<f64>,
}

impl ImputeResult {
    /// Model reconstruction of tensor `k` in the original scale.
    pub fn estimate(&self, k: usize) -> Result<DenseTensor> {
        let z = self.model.reconstruct(k)?;
        let a = self.transforms[k];
        let values = z.values().iter().map(|&v| a.inverse(v)).collect();
        DenseTensor::new(z.shape().clone(), values)
    }
}

struct MissingEntry {
    flat: usize,
    in_slab: bool,
}

struct Imputer {
    missing: Vec<Vec<MissingEntry>>,
    tolerance: f64,
    shared_only: bool,
    tau: f64,
}

impl Imputer {
    fn new(masks: &[ObservationMask], cfg: &ImputeConfig) -> Self {
        let missing = masks
            .iter()
            .map(|m| {
                m.missing_indices()
                    .into_iter()
                    .map(|flat| MissingEntry {
                        flat,
                        in_slab: m.in_missing_slab(flat),
                    })
                    .collect()
            })
            .collect();
        Self {
            missing,
            tolerance: cfg.em_tolerance,
            shared_only: cfg.shared_only_for_tensorwise,
            tau: cfg.solver.zero_threshold,
        }
    }

    /// Rewrites every missing entry from the current model.
    fn step(&self, model: &MultifacModel, tensors: &mut [DenseTensor]) -> HookOutcome {
        let pattern = classify_structure(&component_weights(model, self.tau));
        let all: Vec<usize> = (0..model.rank()).collect();
        let (mut change, mut size, mut delta) = (0.0, 0.0, 0.0);
        for (k, x) in tensors.iter_mut().enumerate() {
            let factors: Vec<&Matrix> = model.factors_of(k);
            let shape = x.shape().clone();
            let mut idx = vec![0; shape.order()];
            let values = x.values_mut();
            for e in &self.missing[k] {
                shape.unravel(e.flat, &mut idx);
                let full = crate::tensor::cp_entry(&factors, &idx, &all);
                let new = if e.in_slab && self.shared_only {
                    crate::tensor::cp_entry(&factors, &idx, &pattern.shared)
                } else {
                    full
                };
                let old = values[e.flat];
                delta += (new - full).powi(2) - (old - full).powi(2);
                change += (new - old).powi(2);
                size += old * old;
                values[e.flat] = new;
            }
        }
        let converged = if size > 0.0 {
            change <= self.tolerance * self.tolerance * size
        } else {
            change == 0.0
        };
        HookOutcome {
            converged: Some(converged),
            loss_delta: delta,
        }
    }
}

/// Fits a linked model to incomplete data by alternating imputation and ALS.
///
/// With no missing entries this is exactly [`crate::solver::fit_multifac`]
/// (same starts, same stopping rule). Otherwise each start runs at most
/// `em_max_rounds` sweeps and stops when the imputed values settle.
pub fn em_als(
    data: &LinkedTensorSet,
    cfg: &ImputeConfig,
    pattern: Option<&ZeroPattern>,
) -> Result<ImputeResult> {
    em_als_from(data, cfg, pattern, None)
}

/// [`em_als`] with an extra start at `warm`, given in the preprocessed scale.
///
/// The warm start runs after the random starts and competes with them on the
/// same score; its missing entries are imputed from `warm` before the first
/// sweep.
pub fn em_als_from(
    data: &LinkedTensorSet,
    cfg: &ImputeConfig,
    pattern: Option<&ZeroPattern>,
    warm: Option<&MultifacModel>,
) -> Result<ImputeResult> {
    cfg.validate()?;
    check_inputs(data, cfg.solver.rank, pattern)?;
    if let Some(w) = warm {
        let shapes_match = w.n_tensors() == data.n_tensors()
            && (0..w.n_tensors()).all(|k| w.dims_of(k) == data.tensors()[k].dims());
        if w.rank() != cfg.solver.rank || !shapes_match {
            return Err(Error::ShapeMismatch(format!(
                "warm start has rank {} and does not match the data and rank {}",
                w.rank(),
                cfg.solver.rank
            )));
        }
    }
    for (k, m) in data.masks().iter().enumerate() {
        if m.n_observed() == 0 {
            return Err(Error::NoObservedData { tensor: k + 1 });
        }
    }
    let transforms = if cfg.preprocess {
        fit_preprocessing(data)
    } else {
        vec![Affine::IDENTITY; data.n_tensors()]
    };
    let work = if cfg.preprocess {
        apply_preprocessing(data, &transforms)?
    } else {
        data.clone()
    };
    let start = initial_impute(&work);
    let imputer = Imputer::new(work.masks(), cfg);
    let complete = data.is_complete();
    let max_sweeps = if complete {
        cfg.solver.max_iterations
    } else {
        cfg.em_max_rounds
    };
    let solver = &cfg.solver;

    let (best, scores, (run, mut tensors)) = multi_start(
        solver.n_starts + usize::from(warm.is_some()),
        solver.seed,
        |s, seed| -> Result<(SingleRun, Vec<DenseTensor>)> {
            let mut tensors = start.tensors().to_vec();
            let init = match warm {
                Some(w) if s == solver.n_starts => {
                    if !complete {
                        imputer.step(w, &mut tensors);
                    }
                    w.clone()
                }
                _ => initial_model_for(start.tensors(), solver.rank, seed, pattern)?,
            };
            let mut step = |m: &MultifacModel, t: &mut [DenseTensor]| Ok(imputer.step(m, t));
            let hook: Option<&mut crate::solver::Hook<'_>> =
                if complete { None } else { Some(&mut step) };
            let run = run_engine(&mut tensors, init, solver, pattern, max_sweeps, hook)?;
            Ok((run, tensors))
        },
        |(r, _)| r.unpenalized_final,
    )?;
    let surrogate_trace = run.surrogate_trace.clone();
    let (model, report) = finish(run, best, scores, solver);
    if !complete {
        imputer.step(&model, &mut tensors);
    }

    let filled = tensors
        .into_iter()
        .zip(data.tensors())
        .zip(data.masks())
        .zip(&transforms)
        .map(|(((z, x), m), a)| {
            let values = z
                .values()
                .iter()
                .zip(x.values())
                .zip(m.observed())
                .map(|((&zv, &xv), &o)| if o { xv } else { a.inverse(zv) })
                .collect();
            DenseTensor::new(x.shape().clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputeResult {
        model,
        completed: LinkedTensorSet::complete(filled)?,
        masks: data.masks().to_vec(),
        report,
        transforms,
        surrogate_trace,
    })
}

/// Imputation quality for one tensor; categories with no entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationMetrics {
    /// 1-based tensor index.
    pub tensor: usize,
    pub n_observed: usize,
    pub n_entrywise: usize,
    pub n_tensorwise: usize,
    /// Model estimate against the reference on observed entries.
    pub rse_observe: Option<f64>,
    /// Imputed values against the reference on all missing entries.
    pub rse_missing: Option<f64>,
    pub rse_entrywise: Option<f64>,
    pub rse_tensorwise: Option<f64>,
}

/// Relative squared errors by entry category.
///
/// `truth` is the reference signal; without it observed entries are scored
/// against the data and missing categories are absent.
pub fn imputation_summary(
    result: &ImputeResult,
    truth: Option<&[DenseTensor]>,
) -> Result<Vec<ImputationMetrics>> {
    if let Some(t) = truth {
        if t.len() != result.masks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reference tensors for {} fitted tensors",
                t.len(),
                result.masks.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(result.masks.len());
    for (k, mask) in result.masks.iter().enumerate() {
        let completed = &result.completed.tensors()[k];
        let estimate = result.estimate(k)?;
        let reference = match truth {
            Some(t) => {
                if t[k].shape() != completed.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "reference tensor {} has shape {}, expected {}",
                        k + 1,
                        t[k].shape(),
                        completed.shape()
                    )));
                }
                &t[k]
            }
            None => completed,
        };
        let score = |values: &DenseTensor, select: &dyn Fn(usize) -> bool| -> Option<f64> {
            let mut any = false;
            let (mut num, mut den) = (0.0, 0.0);
            for (i, (e, r)) in values.values().iter().zip(reference.values()).enumerate() {
                if select(i) {
                    any = true;
                    num += (e - r) * (e - r);
                    den += r * r;
                }
            }
            if any {
                ratio(num, den).ok()
            } else {
                None
            }
        };
        let entry = |i: usize| !mask.is_observed(i) && !mask.in_missing_slab(i);
        let slab = |i: usize| mask.in_missing_slab(i);
        let n_tensorwise = mask.tensorwise_missing_slabs().len() * completed.slab_len();
        let mut m = ImputationMetrics {
            tensor: k + 1,
            n_observed: mask.n_observed(),
            n_entrywise: mask.n_missing() - n_tensorwise,
            n_tensorwise,
            rse_observe: score(&estimate, &|i| mask.is_observed(i)),
            rse_missing: None,
            rse_entrywise: None,
            rse_tensorwise: None,
        };
        if truth.is_some() {
            m.rse_missing = score(completed, &|i| !mask.is_observed(i));
            m.rse_entrywise = score(completed, &entry);
            m.rse_tensorwise = score(completed, &slab);
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn initial_impute_leaves_complete_data_unchanged() {
        let x = DenseTensor::from_fn(shape(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64);
        let data = LinkedTensorSet::single(x).unwrap();
        assert_eq!(initial_impute(&data), data);
    }

    #[test]
    fn initial_impute_zeroes_missing_slab() {
        let x = DenseTensor::from_fn(shape(&[2, 2]), |_| 5.0);
        let mask = ObservationMask::new(shape(&[2, 2]), vec![true, true, false, false]).unwrap();
        let data = LinkedTensorSet::new(vec![x], vec![mask]).unwrap();
        assert_eq!(initial_impute(&data).tensors()[0].values(), &[5.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn centered_cold_start_is_the_observed_mean() {
        let c = 4.25;
        let x = DenseTensor::from_fn(shape(&[3, 3]), |_| c);
        let mask = ObservationMask::full(shape(&[3, 3])).hide(&[4]);
        let data = LinkedTensorSet::new(vec![x], vec![mask]).unwrap();
        let maps = fit_preprocessing(&data);
        let start = initial_impute(&apply_preprocessing(&data, &maps).unwrap());
        assert_eq!(maps[0].inverse(start.tensors()[0].values()[4]), c);
    }

    #[test]
    fn rejects_tensor_without_observations() {
        let x = DenseTensor::zeros(shape(&[2, 2]));
        let mask = ObservationMask::new(shape(&[2, 2]), vec![false; 4]).unwrap();
        let data = LinkedTensorSet::new(vec![x], vec![mask]).unwrap();
        let err = em_als(&data, &ImputeConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::NoObservedData { tensor: 1 }));
    }

    fn fake_result(completed: DenseTensor, mask: ObservationMask) -> ImputeResult {
        let model = {
            let cp = crate::model::CpFactors::new(vec![
                Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
                Matrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap(),
            ])
            .unwrap();
            MultifacModel::from_cp(cp, 0.0).unwrap()
        };
        ImputeResult {
            model,
            completed: LinkedTensorSet::single(completed).unwrap(),
            masks: vec![mask],
            report: FitReport {
                objective_trace: vec![],
                penalized_final: 0.0,
                unpenalized_final: 0.0,
                n_sweeps: 0,
                converged: true,
                start_index: 0,
                start_objectives: vec![],
                sigma: 0.0,
                effective_ranks: classify_structure(&crate::model::ComponentWeights {
                    lambda0: vec![],
                    lambda_k: vec![vec![]],
                    activity: vec![vec![]],
                    threshold: 1e-6,
                }),
            },
            transforms: vec![Affine::IDENTITY],
            surrogate_trace: vec![],
        }
    }

    #[test]
    fn summary_of_perfect_and_zero_imputation() {
        let truth = DenseTensor::new(shape(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = ObservationMask::full(shape(&[2, 2])).hide(&[1, 2, 3]);
        let r = fake_result(truth.clone(), mask.clone());
        let s = imputation_summary(&r, Some(std::slice::from_ref(&truth))).unwrap();
        assert_eq!(s[0].rse_missing, Some(0.0));
        assert_eq!(s[0].rse_tensorwise, Some(0.0));
        assert_eq!(s[0].rse_entrywise, Some(0.0));
        assert_eq!(s[0].n_tensorwise, 2);

        let zeroed = DenseTensor::new(shape(&[2, 2]), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = fake_result(zeroed, mask);
        let s = imputation_summary(&r, Some(std::slice::from_ref(&truth))).unwrap();
        assert_eq!(s[0].rse_missing, Some(1.0));
    }

    #[test]
    fn summary_reports_empty_categories_as_absent() {
        let truth = DenseTensor::new(shape(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = ObservationMask::full(shape(&[2, 2])).hide(&[1]);
        let r = fake_result(truth.clone(), mask);
        let s = imputation_summary(&r, Some(std::slice::from_ref(&truth))).unwrap();
        assert_eq!(s[0].rse_tensorwise, None);
        assert_eq!(s[0].rse_entrywise, Some(0.0));
        let s = imputation_summary(&r, None).unwrap();
        assert_eq!(s[0].rse_missing, None);
    }
}
