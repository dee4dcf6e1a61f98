//! Penalized CP factorization of single and linked tensors.
//!
//! The library fits `L2`-penalized CP models whose penalty drives whole
//! rank-one components to zero, so the rank budget is an upper bound rather
//! than a guess. Tensors linked through a common first mode share one factor
//! matrix for that mode, and the surviving components split into structure
//! shared by all tensors and structure individual to one of them.
//!
//! Modules, bottom up:
//!
//! * [`tensor`] and [`matrix`]: dense storage, unfolding and multilinear kernels.
//! * [`model`]: CP and linked models, component weights and structure classification.
//! * [`solver`]: penalized alternating least squares with tempering and multi-start.
//! * [`imputation`]: EM-ALS for entry-wise and slab-wise missing data.
//! * [`selection`]: two-step cross-validation of the penalty.
//! * [`simulation`]: synthetic linked data and experiment runners.
//! * [`io`]: file formats used by the command-line tool.

pub mod data;
pub mod error;
pub mod imputation;
pub mod io;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod selection;
pub mod simulation;
pub mod solver;
pub mod tensor;

pub use data::LinkedTensorSet;
pub use error::{Error, Result};
pub use imputation::{em_als, em_als_from, initial_impute, ImputeConfig, ImputeResult};
pub use matrix::{khatri_rao, kronecker, Matrix};
pub use model::{
    classify_structure, component_weights, cp_reconstruct, normalize, ComponentWeights, CpFactors,
    MultifacModel, NormalizedCp, StructurePattern,
};
pub use selection::{cv_step1, cv_step2, default_sigma_grid, fit_constrained, make_holdouts, warm_start, CvPlan};
pub use solver::{fit_cp, fit_multifac, theorem2_weight, FitReport, SolverConfig, ZeroPattern};
pub use tensor::{fold, frobenius_norm, hadamard, matricize, rse, DenseTensor, ObservationMask, Shape};
