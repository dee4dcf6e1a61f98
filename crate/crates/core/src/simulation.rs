//! Synthetic linked tensors with known structure, and experiment runners.
//!
//! Signals are sums of rank-one components whose factor columns are standard
//! normal draws. Shared components use the same first-mode column in every
//! tensor; an individual component has nonzero non-shared columns in its own
//! tensor only. Noise is i.i.d. normal with standard deviation
//! `‖S‖ / √(snr · #entries)`, so `snr` is the ratio of signal energy to
//! expected noise energy.
//!
//! Tables report each metric both as a relative squared error `RSE` and as
//! the relative error `√RSE = ‖Ŝ − S‖ / ‖S‖`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::imputation::{em_als, imputation_summary, ImputeConfig};
use crate::matrix::Matrix;
use crate::model::{
    classify_structure, component_weights, MultifacModel, StructureRanks,
};
use crate::rng;
use crate::selection::{cross_validate, fit_constrained, CvPlan, HoldoutKind};
use crate::solver::SolverConfig;
use crate::tensor::{rse, DenseTensor, ObservationMask, Shape};

const FACTOR_TAG: u64 = 1;
const NOISE_TAG: u64 = 2;
const MASK_TAG: u64 = 3;
const CV_TAG: u64 = 4;
const FIT_TAG: u64 = 5;

/// Names accepted by [`run_experiment`].
pub const EXPERIMENTS: [&str; 6] = [
    "single-complete",
    "single-impute",
    "linked-complete-same",
    "linked-complete-varying",
    "linked-impute-same",
    "linked-impute-varying",
];

/// Missing-data design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MissingSpec {
    /// Fraction of all entries missing individually.
    pub entrywise_fraction: f64,
    /// Fraction of first-mode slabs missing entirely, per tensor.
    pub tensorwise_fraction: f64,
    /// Allow a sample's slab to be missing from every tensor at once.
    pub allow_all_missing: bool,
}

/// Design of a simulated linked data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Full shapes; first modes must agree.
    pub shapes: Vec<Vec<usize>>,
    pub shared_rank: usize,
    pub individual_ranks: Vec<usize>,
    /// Signal-to-noise energy ratio; infinity disables noise.
    #[serde(with = "snr_format")]
    pub snr: f64,
    #[serde(default)]
    pub missing: MissingSpec,
    #[serde(default = "one")]
    pub n_replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

mod snr_format {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_snr(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses `3`, `0.5`, `1/3` or `inf`.
pub fn parse_snr(text: &str) -> std::result::Result<f64, String> {
    let t = text.trim();
    let v = if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        f64::INFINITY
    } else if let Some((a, b)) = t.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|_| format!("invalid SNR '{text}'"))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("invalid SNR '{text}'"))?;
        a / b
    } else {
        t.parse().map_err(|_| format!("invalid SNR '{text}'"))?
    };
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("SNR must be positive, got '{text}'"))
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.shapes.is_empty() {
            return bad("at least one tensor shape is required".into());
        }
        for (k, s) in self.shapes.iter().enumerate() {
            Shape::new(s.clone())?;
            if s.len() < 2 {
                return bad(format!("tensor {} must have order at least 2", k + 1));
            }
            if s[0] != self.shapes[0][0] {
                return Err(Error::SharedDimMismatch {
                    tensor: k + 1,
                    expected: self.shapes[0][0],
                    found: s[0],
                });
            }
        }
        if self.individual_ranks.len() != self.shapes.len() {
            return bad(format!(
                "{} individual ranks for {} tensors",
                self.individual_ranks.len(),
                self.shapes.len()
            ));
        }
        if !(self.snr > 0.0) {
            return bad("snr must be positive".into());
        }
        let m = &self.missing;
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(m.entrywise_fraction) || !ok(m.tensorwise_fraction) {
            return bad("missing fractions must lie in [0, 1)".into());
        }
        if m.entrywise_fraction + m.tensorwise_fraction >= 1.0 {
            return bad("missing fractions must sum to less than 1".into());
        }
        if self.n_replicates == 0 {
            return bad("n_replicates must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_rank(&self) -> usize {
        self.shared_rank + self.individual_ranks.iter().sum::<usize>()
    }
}

/// Everything the generator knows about one simulated data set.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub signals: Vec<DenseTensor>,
    pub shared_signals: Vec<DenseTensor>,
    pub individual_signals: Vec<DenseTensor>,
    pub noise: Vec<DenseTensor>,
    pub masks: Vec<ObservationMask>,
    pub model: MultifacModel,
    pub shared_components: Vec<usize>,
    pub individual_components: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn ranks(&self) -> StructureRanks {
        let individual: Vec<usize> = self.individual_components.iter().map(Vec::len).collect();
        StructureRanks {
            shared: self.shared_components.len(),
            total: self.shared_components.len() + individual.iter().sum::<usize>(),
            individual,
            partial: 0,
        }
    }
}

/// First replicate of `spec`.
pub fn gen_linked(spec: &SimulationSpec) -> Result<(LinkedTensorSet, GroundTruth)> {
    gen_replicate(spec, 0)
}

/// Replicate `rep` of `spec`; independent of every other replicate.
pub fn gen_replicate(spec: &SimulationSpec, rep: usize) -> Result<(LinkedTensorSet, GroundTruth)> {
    spec.validate()?;
    let k_count = spec.shapes.len();
    let r_total = spec.total_rank();
    let shared: Vec<usize> = (0..spec.shared_rank).collect();
    let mut individual = Vec::with_capacity(k_count);
    let mut next = spec.shared_rank;
    for &r in &spec.individual_ranks {
        individual.push((next..next + r).collect::<Vec<usize>>());
        next += r;
    }

    let mut frng = rng::stream(spec.seed, &[rep as u64, FACTOR_TAG]);
    let mut normal = |rows: usize| Matrix::from_fn(rows, r_total, |_, _| frng.sample::<f64, _>(StandardNormal));
    let a0 = normal(spec.shapes[0][0]);
    let mut factors = Vec::with_capacity(k_count);
    for (k, s) in spec.shapes.iter().enumerate() {
        let mut fs: Vec<Matrix> = s[1..].iter().map(|&d| normal(d)).collect();
        for r in 0..r_total {
            if !shared.contains(&r) && !individual[k].contains(&r) {
                fs.iter_mut().for_each(|f| f.scale_column(r, 0.0));
            }
        }
        factors.push(fs);
    }
    let model = MultifacModel::new(a0, factors, 0.0)?;

    let masks = gen_masks(spec, rep)?;
    let mut signals = Vec::with_capacity(k_count);
    let mut shared_signals = Vec::with_capacity(k_count);
    let mut individual_signals = Vec::with_capacity(k_count);
    let mut noise = Vec::with_capacity(k_count);
    let mut observed = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let sh = model.reconstruct_structure(k, &shared)?;
        let ind = model.reconstruct_structure(k, &individual[k])?;
        let sig = sh.add(&ind)?;
        let shape = sig.shape().clone();
        let n = if spec.snr.is_finite() && sig.norm_sq() > 0.0 {
            let sd = (sig.norm_sq() / (spec.snr * shape.numel() as f64)).sqrt();
            let dist = Normal::new(0.0, sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut nrng = rng::stream(spec.seed, &[rep as u64, NOISE_TAG, k as u64]);
            let values = (0..shape.numel()).map(|_| dist.sample(&mut nrng)).collect();
            DenseTensor::new(shape.clone(), values)?
        } else {
            DenseTensor::zeros(shape.clone())
        };
        observed.push(sig.add(&n)?);
        signals.push(sig);
        shared_signals.push(sh);
        individual_signals.push(ind);
        noise.push(n);
    }
    let data = LinkedTensorSet::new(observed, masks.clone())?;
    Ok((
        data,
        GroundTruth {
            signals,
            shared_signals,
            individual_signals,
            noise,
            masks,
            model,
            shared_components: shared,
            individual_components: individual,
        },
    ))
}

fn gen_masks(spec: &SimulationSpec, rep: usize) -> Result<Vec<ObservationMask>> {
    let k_count = spec.shapes.len();
    let i0 = spec.shapes[0][0];
    let m = &spec.missing;
    let mut rng = rng::stream(spec.seed, &[rep as u64, MASK_TAG]);
    let mut gone = vec![vec![false; i0]; k_count];
    for k in 0..k_count {
        if m.tensorwise_fraction == 0.0 {
            break;
        }
        let target = m.tensorwise_fraction * i0 as f64;
        let mut count = target.floor() as usize;
        if rng.random::<f64>() < target - target.floor() {
            count += 1;
        }
        let mut cand: Vec<usize> = (0..i0)
            .filter(|&s| {
                m.allow_all_missing || k_count == 1 || (0..k_count).any(|j| j != k && !gone[j][s])
            })
            .collect();
        if count >= i0 || cand.len() < count {
            return Err(Error::InvalidConfig(format!(
                "cannot remove {count} slabs from tensor {}",
                k + 1
            )));
        }
        cand.shuffle(&mut rng);
        for &s in &cand[..count] {
            gone[k][s] = true;
        }
    }
    let mut masks = Vec::with_capacity(k_count);
    for (k, dims) in spec.shapes.iter().enumerate() {
        let shape = Shape::new(dims.clone())?;
        let numel = shape.numel();
        let slab_len = numel / i0;
        let mut observed = vec![true; numel];
        for (s, &g) in gone[k].iter().enumerate() {
            if g {
                observed[s * slab_len..(s + 1) * slab_len].fill(false);
            }
        }
        let count = (m.entrywise_fraction * numel as f64).round() as usize;
        if count > 0 {
            let mut pool: Vec<usize> = (0..numel).filter(|&i| observed[i]).collect();
            if pool.len() <= count {
                return Err(Error::InvalidConfig(format!(
                    "cannot hide {count} entries of tensor {}",
                    k + 1
                )));
            }
            let (chosen, _) = pool.partial_shuffle(&mut rng, count);
            for &i in chosen.iter() {
                observed[i] = false;
            }
        }
        masks.push(ObservationMask::new(shape, observed)?);
    }
    Ok(masks)
}

/// Relative squared errors of a model's structures against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureErrors {
    pub full: Option<f64>,
    pub share: Option<f64>,
    pub indiv: Option<f64>,
}

/// Structure errors of tensor `k`, using the model's own shared/individual split.
pub fn structure_rses(
    model: &MultifacModel,
    truth: &GroundTruth,
    k: usize,
    tau: f64,
) -> Result<StructureErrors> {
    let p = classify_structure(&component_weights(model, tau));
    let score = |est: &DenseTensor, t: &DenseTensor| -> Result<Option<f64>> {
        if t.norm_sq() == 0.0 {
            Ok(None)
        } else {
            rse(est, t, None).map(Some)
        }
    };
    let full = model.reconstruct(k)?;
    let share = model.reconstruct_structure(k, &p.shared)?;
    let indiv = model.reconstruct_structure(k, &p.individual[k])?;
    Ok(StructureErrors {
        full: score(&full, &truth.signals[k])?,
        share: score(&share, &truth.shared_signals[k])?,
        indiv: score(&indiv, &truth.individual_signals[k])?,
    })
}

/// Knobs of the experiment pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentOptions {
    pub rank_budget: usize,
    pub n_folds: usize,
    pub holdout_fraction: f64,
    /// Fraction of first-mode slabs also hidden per fold when there are
    /// several tensors; zero hides entries only.
    pub linked_slab_fraction: f64,
    pub grid_points: usize,
    pub step2_points: usize,
    /// Starts for fits on the full data.
    pub n_starts: usize,
    /// Starts for each cross-validation cell of a single tensor.
    pub fold_starts: usize,
    /// Starts for each cross-validation cell when there are several tensors.
    pub linked_fold_starts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub temper_steps: usize,
    pub em_tolerance: f64,
    pub em_max_rounds: usize,
    pub preprocess: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            rank_budget: 20,
            n_folds: 5,
            holdout_fraction: 0.1,
            linked_slab_fraction: 0.05,
            grid_points: 12,
            step2_points: 8,
            n_starts: 3,
            fold_starts: 1,
            linked_fold_starts: 3,
            tolerance: 1e-8,
            max_iterations: 500,
            temper_steps: 10,
            em_tolerance: 1e-6,
            em_max_rounds: 100,
            preprocess: false,
        }
    }
}

impl ExperimentOptions {
    pub fn template(&self, rank: usize, n_starts: usize, seed: u64) -> ImputeConfig {
        ImputeConfig {
            solver: SolverConfig {
                rank,
                sigma: 0.0,
                tolerance: self.tolerance,
                max_iterations: self.max_iterations,
                n_starts,
                temper_steps: self.temper_steps,
                seed,
                ..SolverConfig::default()
            },
            em_tolerance: self.em_tolerance,
            em_max_rounds: self.em_max_rounds,
            shared_only_for_tensorwise: true,
            preprocess: self.preprocess,
        }
    }
}

/// Design of a named experiment at a given SNR.
pub fn experiment_spec(name: &str, snr: f64, n_replicates: usize, seed: u64) -> Result<SimulationSpec> {
    let cube = vec![50, 50, 50];
    let (shapes, shared, indiv, missing) = match name {
        "single-complete" => (vec![cube], 5, vec![0], MissingSpec::default()),
        "single-impute" => (
            vec![cube],
            5,
            vec![0],
            MissingSpec {
                entrywise_fraction: 0.1,
                ..MissingSpec::default()
            },
        ),
        "linked-complete-same" => (vec![cube.clone(), cube], 2, vec![3, 3], MissingSpec::default()),
        "linked-complete-varying" => (
            vec![vec![100, 100, 4], vec![100, 40, 10, 3]],
            2,
            vec![3, 3],
            MissingSpec::default(),
        ),
        "linked-impute-same" => (vec![cube.clone(), cube], 2, vec![3, 3], linked_missing()),
        "linked-impute-varying" => (
            vec![vec![100, 100, 4], vec![100, 40, 10, 3]],
            2,
            vec![3, 3],
            linked_missing(),
        ),
        other => return Err(Error::UnknownExperiment(other.to_string())),
    };
    let spec = SimulationSpec {
        shapes,
        shared_rank: shared,
        individual_ranks: indiv,
        snr,
        missing,
        n_replicates,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn linked_missing() -> MissingSpec {
    MissingSpec {
        entrywise_fraction: 0.05,
        tensorwise_fraction: 0.05,
        allow_all_missing: false,
    }
}

/// One scored quantity of one replicate.
///
/// `metric` is one of `observe`, `missing`, `entrywise`, `tensorwise`,
/// `tensorwise_shared`, `full`, `share` or `indiv`. All are scored against
/// the full signal except `share`, `indiv` and `tensorwise_shared`, which
/// scores the fully missing slabs against the shared signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub method: String,
    /// 1-based tensor index.
    pub tensor: usize,
    pub metric: String,
    pub rse: f64,
}

/// Everything recorded for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub step1_sigma: f64,
    pub step2_sigma: f64,
    pub selected_ranks: StructureRanks,
    pub true_ranks: StructureRanks,
    pub metrics: Vec<MetricValue>,
}

/// Mean and spread of one metric across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub tensor: usize,
    pub metric: String,
    pub n: usize,
    pub rse_mean: f64,
    pub rse_sd: f64,
    pub rel_err_mean: f64,
    pub rel_err_sd: f64,
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub format_version: u32,
    pub experiment: String,
    pub spec: SimulationSpec,
    pub options: ExperimentOptions,
    pub replicates: Vec<ReplicateRecord>,
    pub table: Vec<TableRow>,
}

impl ExperimentResult {
    pub fn row(&self, method: &str, tensor: usize, metric: &str) -> Option<&TableRow> {
        self.table
            .iter()
            .find(|r| r.method == method && r.tensor == tensor && r.metric == metric)
    }

    /// Fraction of replicates whose step-1 total rank equals the true total rank.
    pub fn rank_recovery(&self) -> f64 {
        let hits = self
            .replicates
            .iter()
            .filter(|r| r.selected_ranks.total == r.true_ranks.total)
            .count();
        hits as f64 / self.replicates.len().max(1) as f64
    }

    pub fn write_table_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.table {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs a named experiment end to end over `spec.n_replicates` replicates.
pub fn run_experiment(name: &str, spec: &SimulationSpec, opts: &ExperimentOptions) -> Result<ExperimentResult> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::UnknownExperiment(name.to_string()));
    }
    spec.validate()?;
    let single = spec.shapes.len() == 1;
    let replicates = (0..spec.n_replicates)
        .into_par_iter()
        .map(|rep| run_replicate(spec, opts, rep, single))
        .collect::<Result<Vec<_>>>()?;
    let table = summarize(&replicates);
    Ok(ExperimentResult {
        format_version: crate::model::FORMAT_VERSION,
        experiment: name.to_string(),
        spec: spec.clone(),
        options: opts.clone(),
        replicates,
        table,
    })
}

fn run_replicate(
    spec: &SimulationSpec,
    opts: &ExperimentOptions,
    rep: usize,
    single: bool,
) -> Result<ReplicateRecord> {
    let (data, truth) = gen_replicate(spec, rep)?;
    let seed = rng::derive_seed(spec.seed, &[rep as u64, CV_TAG]);
    let fit_seed = rng::derive_seed(spec.seed, &[rep as u64, FIT_TAG]);
    let template = opts.template(opts.rank_budget, opts.n_starts, fit_seed);
    let plan = CvPlan {
        n_folds: opts.n_folds,
        holdout_fraction: opts.holdout_fraction,
        grid_points: opts.grid_points,
        step2_points: opts.step2_points,
        fold_starts: Some(if single { opts.fold_starts } else { opts.linked_fold_starts }),
        holdout_kind: if spec.shapes.len() > 1 && opts.linked_slab_fraction > 0.0 {
            HoldoutKind::Mixed {
                tensorwise_fraction: opts.linked_slab_fraction,
            }
        } else {
            HoldoutKind::EntryWise
        },
        seed,
        ..CvPlan::default()
    };
    let cv = cross_validate(&data, &plan, &template)?;
    let incomplete = !data.is_complete();
    let tau = template.solver.zero_threshold;
    let mut metrics = Vec::new();

    let mut record = |method: &str, fit: &crate::imputation::ImputeResult| -> Result<()> {
        for k in 0..data.n_tensors() {
            if incomplete {
                let m = &imputation_summary(fit, Some(&truth.signals))?[k];
                let shared_ref = if single {
                    None
                } else {
                    imputation_summary(fit, Some(&truth.shared_signals))?[k].rse_tensorwise
                };
                for (name, v) in [
                    ("observe", m.rse_observe),
                    ("missing", m.rse_missing),
                    ("entrywise", m.rse_entrywise),
                    ("tensorwise", m.rse_tensorwise),
                    ("tensorwise_shared", shared_ref),
                ] {
                    if let Some(v) = v {
                        metrics.push(MetricValue {
                            method: method.into(),
                            tensor: k + 1,
                            metric: name.into(),
                            rse: v,
                        });
                    }
                }
            }
            let e = structure_rses(&fit.model, &truth, k, tau)?;
            let full = rse(&fit.estimate(k)?, &truth.signals[k], None)?;
            metrics.push(MetricValue {
                method: method.into(),
                tensor: k + 1,
                metric: "full".into(),
                rse: full,
            });
            if !single {
                for (name, v) in [("share", e.share), ("indiv", e.indiv)] {
                    if let Some(v) = v {
                        metrics.push(MetricValue {
                            method: method.into(),
                            tensor: k + 1,
                            metric: name.into(),
                            rse: v,
                        });
                    }
                }
            }
        }
        Ok(())
    };

    record("Step1", &cv.step1.fit)?;
    record("Step2", &cv.step2.fit)?;
    if single {
        let constraint = fit_constrained(&data, &cv.step1.pattern, 0.0, &template, Some(cv.step1.model()))?;
        record("Constraint", &constraint)?;
        let true_rank = opts.template(spec.total_rank(), opts.n_starts, fit_seed);
        let fixed = em_als(&data, &true_rank, None)?;
        record("TrueRank", &fixed)?;
    }

    Ok(ReplicateRecord {
        replicate: rep,
        step1_sigma: cv.step1.selected_sigma,
        step2_sigma: cv.step2.selected_sigma,
        selected_ranks: cv.step1.pattern.ranks(),
        true_ranks: truth.ranks(),
        metrics,
    })
}

fn summarize(reps: &[ReplicateRecord]) -> Vec<TableRow> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for m in reps.iter().flat_map(|r| &r.metrics) {
        let key = (m.method.clone(), m.tensor, m.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, tensor, metric)| {
            let vals: Vec<f64> = reps
                .iter()
                .flat_map(|r| &r.metrics)
                .filter(|m| m.method == method && m.tensor == tensor && m.metric == metric)
                .map(|m| m.rse)
                .collect();
            let roots: Vec<f64> = vals.iter().map(|v| v.sqrt()).collect();
            let (rse_mean, rse_sd) = mean_sd(&vals);
            let (rel_err_mean, rel_err_sd) = mean_sd(&roots);
            TableRow {
                method,
                tensor,
                metric,
                n: vals.len(),
                rse_mean,
                rse_sd,
                rel_err_mean,
                rel_err_sd,
            }
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
