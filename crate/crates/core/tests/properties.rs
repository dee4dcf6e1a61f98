//! Property tests for the algebraic and algorithmic invariants.

use multifac::model::{classify_structure, component_weights};
use multifac::selection::{select_one_se, GridPoint};
use multifac::simulation::{gen_linked, MissingSpec, SimulationSpec};
use multifac::solver::{initial_model, run_from, soft_threshold_svd};
use multifac::{
    em_als, fit_cp, fit_multifac, fold, khatri_rao, matricize, DenseTensor, ImputeConfig, LinkedTensorSet, Matrix,
    MultifacModel, ObservationMask, Shape, SolverConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>) -> DenseTensor {
    let shape = Shape::new(dims).unwrap();
    DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 2..5)
}

/// Random linked data with `k` tensors of order 2 to 4 sharing a first mode.
fn linked_data(seed: u64, k: usize) -> LinkedTensorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i0 = rng.random_range(3..6);
    let tensors = (0..k)
        .map(|_| {
            let order = rng.random_range(2..5);
            let mut dims = vec![i0];
            dims.extend((1..order).map(|_| rng.random_range(2..5)));
            random_tensor(&mut rng, dims)
        })
        .collect();
    LinkedTensorSet::complete(tensors).unwrap()
}

fn with_random_masks(data: &LinkedTensorSet, seed: u64, frac: f64) -> LinkedTensorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = data
        .tensors()
        .iter()
        .map(|t| {
            let n = t.shape().numel();
            let mut obs: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= frac).collect();
            obs[0] = true;
            ObservationMask::new(t.shape().clone(), obs).unwrap()
        })
        .collect();
    data.with_masks(masks).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fold_inverts_matricize(dims in shape_strategy(), seed in any::<u64>(), n_pick in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, dims.clone());
        let n = n_pick % dims.len();
        let m = matricize(&x, n).unwrap();
        prop_assert_eq!(m.rows(), dims[n]);
        let back = fold(&m, n, x.shape()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn matricize_uses_first_mode_fastest_columns(dims in shape_strategy(), seed in any::<u64>(), n_pick in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, dims.clone());
        let n = n_pick % dims.len();
        let m = matricize(&x, n).unwrap();
        let mut idx = vec![0; dims.len()];
        for flat in 0..x.shape().numel() {
            x.shape().unravel(flat, &mut idx);
            let (mut col, mut stride) = (0, 1);
            for (k, &d) in dims.iter().enumerate() {
                if k != n {
                    col += idx[k] * stride;
                    stride *= d;
                }
            }
            prop_assert_eq!(m.get(idx[n], col), x.values()[flat]);
        }
    }

    #[test]
    fn khatri_rao_gram_is_hadamard_of_grams(ra in 1usize..7, rb in 1usize..7, r in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_matrix(&mut rng, ra, r);
        let b = normal_matrix(&mut rng, rb, r);
        let lhs = khatri_rao(&a, &b).unwrap().gram();
        let mut rhs = a.gram();
        rhs.hadamard_assign(&b.gram());
        let scale = 1.0 + rhs.frobenius_norm();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * scale);
    }

    #[test]
    fn rebalance_keeps_fit_and_balances_norms(seed in any::<u64>(), k in 1usize..4, rank in 1usize..4) {
        let data = linked_data(seed, k);
        let mut m = initial_model(&data, rank, seed, None).unwrap();
        let before: Vec<DenseTensor> = (0..k).map(|t| m.reconstruct(t).unwrap()).collect();
        let penalty_before = m.squared_norm();
        m.rebalance();
        prop_assert!(m.squared_norm() <= penalty_before * (1.0 + 1e-12));
        for (t, b) in before.iter().enumerate() {
            let diff = m.reconstruct(t).unwrap().sub(b).unwrap().norm_sq().sqrt();
            prop_assert!(diff <= 1e-10 * (1.0 + b.norm_sq().sqrt()));
        }
        balance_holds(&m, 1e-3)?;
    }

    #[test]
    fn als_blocks_never_increase_the_objective(seed in any::<u64>(), k in 1usize..3, rank in 1usize..5, sigma in 0.0f64..2.0, temper in 0usize..4) {
        let data = linked_data(seed, k);
        let cfg = SolverConfig {
            rank,
            sigma,
            tolerance: 1e-300,
            max_iterations: 25,
            temper_steps: temper,
            pseudo_inverse: true,
            ..SolverConfig::default()
        };
        let init = initial_model(&data, rank, seed ^ 1, None).unwrap();
        let run = run_from(&data, init, &cfg, None).unwrap();
        for w in run.block_trace.windows(2) {
            let ((s0, a), (s1, b)) = (w[0], w[1]);
            if s0 == s1 {
                prop_assert!(b <= a + 1e-10 * a.abs().max(1.0), "{} then {}", a, b);
            }
        }
    }

    #[test]
    fn em_with_complete_data_is_als(seed in any::<u64>(), k in 1usize..3, rank in 1usize..4, sigma in 0.0f64..1.0) {
        let data = linked_data(seed, k);
        let solver = SolverConfig {
            rank,
            sigma,
            n_starts: 2,
            max_iterations: 60,
            seed,
            pseudo_inverse: true,
            ..SolverConfig::default()
        };
        let (model, report) = fit_multifac(&data, &solver, None).unwrap();
        let em = em_als(&data, &ImputeConfig::new(solver), None).unwrap();
        prop_assert_eq!(&em.model, &model);
        prop_assert_eq!(&em.report.objective_trace, &report.objective_trace);
        prop_assert_eq!(em.report.start_objectives, report.start_objectives);
    }

    #[test]
    fn observed_entries_are_preserved(seed in any::<u64>(), k in 1usize..3, preprocess in any::<bool>()) {
        let data = with_random_masks(&linked_data(seed, k), seed ^ 7, 0.3);
        let mut cfg = ImputeConfig::new(SolverConfig {
            rank: 2,
            sigma: 0.1,
            n_starts: 1,
            max_iterations: 40,
            seed,
            ..SolverConfig::default()
        });
        cfg.em_max_rounds = 40;
        cfg.preprocess = preprocess;
        let fit = em_als(&data, &cfg, None).unwrap();
        for t in 0..k {
            let mask = &data.masks()[t];
            let input = data.tensors()[t].values();
            let out = fit.completed.tensors()[t].values();
            for i in 0..input.len() {
                if mask.observed()[i] {
                    prop_assert_eq!(out[i].to_bits(), input[i].to_bits());
                } else {
                    prop_assert!(out[i].is_finite());
                }
            }
        }
    }

    #[test]
    fn one_se_rule_matches_brute_force(seed in any::<u64>(), n in 1usize..12, folds in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, n, folds);
        let got = select_one_se(&grid, 1.0);
        let valid: Vec<usize> = (0..n).filter(|&i| grid[i].mean.is_some()).collect();
        if valid.is_empty() {
            prop_assert_eq!(got, None);
        } else {
            let best = *valid
                .iter()
                .min_by(|&&a, &&b| grid[a].mean.unwrap().partial_cmp(&grid[b].mean.unwrap()).unwrap())
                .unwrap();
            let bound = grid[best].mean.unwrap() + grid[best].se.unwrap();
            let expect = valid.iter().copied().filter(|&i| grid[i].mean.unwrap() <= bound).max();
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn more_slack_never_selects_more_components(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, n, 5);
        let mut last = usize::MAX;
        for step in 0..=10 {
            let slack = step as f64 / 10.0;
            if let Some(i) = select_one_se(&grid, slack) {
                let r = grid[i].rank().unwrap();
                prop_assert!(r <= last);
                last = r;
            }
        }
    }

    #[test]
    fn simulated_masks_hit_the_requested_fractions(seed in any::<u64>(), ef in 0.0f64..0.3, tf in 0.0f64..0.3) {
        let spec = SimulationSpec {
            shapes: vec![vec![120, 4, 3], vec![120, 6, 2]],
            shared_rank: 1,
            individual_ranks: vec![1, 1],
            snr: 1.0,
            missing: MissingSpec { entrywise_fraction: ef, tensorwise_fraction: tf, allow_all_missing: false },
            n_replicates: 1,
            seed,
        };
        let (data, truth) = gen_linked(&spec).unwrap();
        for (k, m) in data.masks().iter().enumerate() {
            let numel = m.shape().numel() as f64;
            let slabs = m.tensorwise_missing_slabs().len();
            let slab_entries = slabs as f64 * numel / 120.0;
            let entry = (m.n_missing() as f64 - slab_entries) / numel;
            prop_assert!((entry - ef).abs() <= 0.005, "tensor {} entry fraction {}", k, entry);
            prop_assert!((slabs as f64 / 120.0 - tf).abs() <= 0.005 + 1.0 / 120.0);
            let recomposed = truth.shared_signals[k].add(&truth.individual_signals[k]).unwrap();
            prop_assert_eq!(&recomposed, &truth.signals[k]);
        }
        let a = data.masks()[0].tensorwise_missing_slabs();
        let b = data.masks()[1].tensorwise_missing_slabs();
        prop_assert!(a.iter().all(|s| !b.contains(s)));
    }

    #[test]
    fn fits_are_deterministic(seed in any::<u64>()) {
        let data = with_random_masks(&linked_data(seed, 2), seed, 0.2);
        let mut cfg = ImputeConfig::new(SolverConfig { rank: 2, sigma: 0.2, n_starts: 3, max_iterations: 30, seed, ..SolverConfig::default() });
        cfg.em_max_rounds = 30;
        let a = em_als(&data, &cfg, None).unwrap();
        let b = em_als(&data, &cfg, None).unwrap();
        prop_assert_eq!(a.model, b.model);
        prop_assert_eq!(a.completed, b.completed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matrix_fit_is_singular_value_soft_thresholding(seed in any::<u64>(), frac in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let dm = nalgebra::DMatrix::from_row_slice(5, 4, x.values());
        let sv = dm.singular_values();
        let sigma = frac * sv.max();
        // Components whose singular value sits near σ decay too slowly for a finite run.
        prop_assume!(sv.iter().all(|s| (s - sigma).abs() > 0.05 * sv.max()));
        let t = DenseTensor::new(Shape::new(vec![5, 4]).unwrap(), x.values().to_vec()).unwrap();
        let cfg = SolverConfig {
            rank: 4,
            sigma,
            tolerance: 1e-300,
            max_iterations: 20_000,
            n_starts: 2,
            seed,
            ..SolverConfig::default()
        };
        let (cp, _) = fit_cp(&t, &cfg).unwrap();
        let f = cp.factors();
        let fitted = f[0].matmul(&f[1].transpose()).unwrap();
        let expect = soft_threshold_svd(&x, sigma);
        prop_assert!(fitted.max_abs_diff(&expect) <= 1e-6, "{}", fitted.max_abs_diff(&expect));
    }
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, folds: usize) -> Vec<GridPoint> {
    let mut sigma = 0.0;
    let mut rank = 20usize;
    (0..n)
        .map(|_| {
            sigma += rng.random_range(0.1..2.0);
            rank = rank.saturating_sub(rng.random_range(0..3));
            let failed = rng.random::<f64>() < 0.1;
            let cells = (0..folds)
                .map(|_| (!failed).then(|| (rng.random_range(0.4..0.6), rank)))
                .collect();
            GridPoint::from_folds(sigma, cells)
        })
        .collect()
}

/// Shared norm `a` and per-tensor non-shared norms `b_k` of each live component
/// satisfy `a² = Σ_k b_k²` with equal norms across a tensor's non-shared modes.
fn balance_holds(m: &MultifacModel, tol: f64) -> Result<(), TestCaseError> {
    let shared = m.shared_factor().column_norms();
    for r in 0..m.rank() {
        let mut sum = 0.0;
        for factors in m.tensor_factors() {
            let norms: Vec<f64> = factors.iter().map(|f| f.column_norms()[r]).collect();
            let b = norms[0];
            for &n in &norms {
                prop_assert!((n - b).abs() <= tol * b.max(1e-300), "mode norms {:?}", norms);
            }
            sum += b * b;
        }
        let a2 = shared[r] * shared[r];
        prop_assert!((a2 - sum).abs() <= tol * a2.max(1e-300), "a² {} vs Σb² {}", a2, sum);
    }
    Ok(())
}

#[test]
fn single_tensor_balance_equalizes_every_mode() {
    let data = linked_data(11, 1);
    let mut m = initial_model(&data, 3, 5, None).unwrap();
    m.rebalance();
    for r in 0..3 {
        let a = m.shared_factor().column_norms()[r];
        for f in &m.tensor_factors()[0] {
            assert!((f.column_norms()[r] - a).abs() <= 1e-3 * a);
        }
    }
}

#[test]
fn fitted_structure_matches_report() {
    let data = linked_data(3, 2);
    let cfg = SolverConfig { rank: 3, sigma: 0.3, n_starts: 2, ..SolverConfig::default() };
    let (model, report) = fit_multifac(&data, &cfg, None).unwrap();
    let pattern = classify_structure(&component_weights(&model, cfg.zero_threshold));
    assert_eq!(pattern, report.effective_ranks);
}
