//! `multifac` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a fit stopped
//! at its sweep limit before converging (outputs are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use multifac::imputation::{imputation_summary, ImputationMetrics};
use multifac::io::{self, LinkedManifest};
use multifac::model::{variance_explained, VarianceExplained, FORMAT_VERSION};
use multifac::selection::{cross_validate, CvPlan, HoldoutKind};
use multifac::simulation::{
    experiment_spec, gen_replicate, parse_snr, run_experiment, ExperimentOptions, SimulationSpec,
    EXPERIMENTS,
};
use multifac::{
    classify_structure, component_weights, em_als, fit_multifac, ComponentWeights, FitReport,
    ImputeConfig, LinkedTensorSet, MultifacModel, SolverConfig, StructurePattern,
};

#[derive(Parser)]
#[command(name = "multifac", version, about = "Penalized CP factorization of single and linked tensors")]
struct Cli {
    /// Worker threads for parallel cells.
    #[arg(long, global = true, env = "MULTIFAC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one complete tensor.
    Fit {
        /// Tensor descriptor (.json) or long table (.csv).
        tensor: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit complete tensors linked along their first mode.
    Multifit {
        manifest: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit with missing entries and write completed tensors.
    Impute {
        manifest: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        em: EmArgs,
        /// Manifest of reference tensors for error reporting.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Two-step cross-validated choice of the penalty and structure.
    Cv {
        manifest: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Fraction of observed entries hidden per fold.
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        /// Also hide this fraction of whole first-mode slabs per fold.
        #[arg(long)]
        slab_holdout: Option<f64>,
        #[arg(long, default_value_t = 12)]
        grid_points: usize,
        #[arg(long, default_value_t = 8)]
        step2_points: usize,
        /// Starts per fold fit; defaults to --starts.
        #[arg(long)]
        fold_starts: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate simulated data or run a named experiment.
    Simulate {
        /// One of the named experiment designs.
        #[arg(long, required_unless_present = "spec")]
        experiment: Option<String>,
        /// Simulation spec JSON; implies --generate.
        #[arg(long, conflicts_with = "experiment")]
        spec: Option<PathBuf>,
        /// Signal-to-noise ratio: a number, a fraction like 1/3, or inf.
        #[arg(long, default_value = "1", value_parser = parse_snr)]
        snr: f64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sim")]
        out_dir: PathBuf,
        /// Write data and ground truth instead of running the experiment.
        #[arg(long)]
        generate: bool,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        rank_budget: u64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 12)]
        grid_points: usize,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        starts: u64,
    },
    /// Write the reconstruction of every tensor of a model.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Full)]
        part: Part,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Summarize a model, optionally against data.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Manifest of the data, for variance explained.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Full,
    Shared,
    Individual,
}

#[derive(Args, Clone)]
struct FitArgs {
    /// Number of components (rank budget for cv).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    starts: u64,
    #[arg(long, default_value_t = 10)]
    temper_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative weight below which a component counts as zero.
    #[arg(long, default_value_t = 1e-6)]
    zero_threshold: f64,
}

#[derive(Args, Clone)]
struct EmArgs {
    #[arg(long, default_value_t = 100)]
    em_rounds: usize,
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    /// Fill whole missing slabs with the full estimate rather than shared structure only.
    #[arg(long)]
    entry_only: bool,
    /// Skip per-tensor centering and scaling.
    #[arg(long)]
    no_preprocess: bool,
}

impl FitArgs {
    fn solver(&self) -> SolverConfig {
        SolverConfig {
            rank: self.rank as usize,
            sigma: self.sigma,
            tolerance: self.tol,
            max_iterations: self.max_iters,
            n_starts: self.starts as usize,
            temper_steps: self.temper_steps,
            seed: self.seed,
            zero_threshold: self.zero_threshold,
            ..SolverConfig::default()
        }
    }
}

impl EmArgs {
    fn config(&self, solver: SolverConfig) -> ImputeConfig {
        ImputeConfig {
            solver,
            em_tolerance: self.em_tol,
            em_max_rounds: self.em_rounds,
            shared_only_for_tensorwise: !self.entry_only,
            preprocess: !self.no_preprocess,
        }
    }
}

#[derive(Serialize)]
struct Structure {
    ranks: multifac::model::StructureRanks,
    pattern: StructurePattern,
    weights: ComponentWeights,
}

impl Structure {
    fn of(model: &MultifacModel, tau: f64) -> Self {
        let weights = component_weights(model, tau);
        let pattern = classify_structure(&weights);
        Self {
            ranks: pattern.ranks(),
            pattern,
            weights,
        }
    }
}

#[derive(Serialize)]
struct FitDocument {
    format_version: u32,
    command: &'static str,
    /// Observed squared norm of each tensor.
    data_norm_sq: Vec<f64>,
    fit: FitReport,
    structure: Structure,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance_explained: Option<Vec<VarianceExplained>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    imputation: Option<Vec<ImputationMetrics>>,
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: the fit reached its sweep limit before converging");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> multifac::Result<Outcome> {
    match command {
        Command::Fit { tensor, fit, out } => {
            let (t, m) = io::read_tensor(&tensor)?;
            let data = LinkedTensorSet::new(vec![t], vec![m])?;
            multifit(&data, &fit, &out, "fit")
        }
        Command::Multifit { manifest, fit, out } => {
            let data = io::read_linked(&manifest)?;
            multifit(&data, &fit, &out, "multifit")
        }
        Command::Impute {
            manifest,
            fit,
            em,
            truth,
            out,
        } => impute(&manifest, &fit, &em, truth.as_deref(), &out),
        Command::Cv {
            manifest,
            fit,
            em,
            folds,
            holdout,
            slab_holdout,
            grid_points,
            step2_points,
            fold_starts,
            out,
        } => {
            let data = io::read_linked(&manifest)?;
            let plan = CvPlan {
                n_folds: folds,
                holdout_fraction: holdout,
                holdout_kind: match slab_holdout {
                    Some(f) => HoldoutKind::Mixed {
                        tensorwise_fraction: f,
                    },
                    None => HoldoutKind::EntryWise,
                },
                grid_points,
                step2_points,
                fold_starts,
                seed: fit.seed,
                ..CvPlan::default()
            };
            plan.validate()?;
            let template = em.config(fit.solver());
            let cv = cross_validate(&data, &plan, &template)?;
            std::fs::create_dir_all(&out)?;
            io::write_json(&out.join("cv.json"), &cv.summary())?;
            cv.trace_csv(std::fs::File::create(out.join("cv_trace.csv"))?)?;
            io::save_model(&out.join("model.json"), cv.step2.model(), fit.zero_threshold)?;
            Ok(Outcome::Done)
        }
        Command::Simulate {
            experiment,
            spec,
            snr,
            reps,
            seed,
            out_dir,
            generate,
            rank_budget,
            folds,
            grid_points,
            starts,
        } => {
            let (name, spec) = match (experiment, spec) {
                (Some(name), _) => {
                    if !EXPERIMENTS.contains(&name.as_str()) {
                        return Err(multifac::Error::UnknownExperiment(format!(
                            "{name} (known: {})",
                            EXPERIMENTS.join(", ")
                        )));
                    }
                    let spec = experiment_spec(&name, snr, reps as usize, seed)?;
                    (Some(name), spec)
                }
                (None, Some(path)) => {
                    let spec: SimulationSpec = io::read_json(&path)?;
                    spec.validate()?;
                    (None, spec)
                }
                (None, None) => unreachable!("clap requires one of --experiment and --spec"),
            };
            std::fs::create_dir_all(&out_dir)?;
            match name {
                Some(name) if !generate => {
                    let opts = ExperimentOptions {
                        rank_budget: rank_budget as usize,
                        n_folds: folds,
                        grid_points,
                        n_starts: starts as usize,
                        ..ExperimentOptions::default()
                    };
                    let result = run_experiment(&name, &spec, &opts)?;
                    result.write_table_csv(std::fs::File::create(out_dir.join("table.csv"))?)?;
                    io::write_json(&out_dir.join("results.json"), &result)?;
                }
                _ => write_simulated(&spec, &out_dir)?,
            }
            Ok(Outcome::Done)
        }
        Command::Reconstruct { model, part, out } => {
            let (m, tau) = io::load_model(&model)?;
            let p = classify_structure(&component_weights(&m, tau));
            std::fs::create_dir_all(&out)?;
            let mut names = Vec::new();
            for k in 0..m.n_tensors() {
                let t = match part {
                    Part::Full => m.reconstruct(k)?,
                    Part::Shared => m.reconstruct_structure(k, &p.shared)?,
                    Part::Individual => m.reconstruct_structure(k, &p.individual[k])?,
                };
                let name = format!("reconstruction_{}.json", k + 1);
                io::write_tensor(&out.join(&name), &t, None, sidecar(&t))?;
                names.push(name);
            }
            write_manifest(&out.join("reconstruction.json"), names)?;
            Ok(Outcome::Done)
        }
        Command::Report { model, data, out } => {
            let (m, tau) = io::load_model(&model)?;
            let pve = match data {
                Some(path) => Some(variance_explained(&m, &io::read_linked(&path)?, tau)?),
                None => None,
            };
            #[derive(Serialize)]
            struct ReportDocument {
                format_version: u32,
                rank: usize,
                penalty: f64,
                structure: Structure,
                #[serde(skip_serializing_if = "Option::is_none")]
                variance_explained: Option<Vec<VarianceExplained>>,
            }
            let doc = ReportDocument {
                format_version: FORMAT_VERSION,
                rank: m.rank(),
                penalty: m.penalty(),
                structure: Structure::of(&m, tau),
                variance_explained: pve,
            };
            match out {
                Some(p) => io::write_json(&p, &doc)?,
                None => println!("{}", serde_json::to_string_pretty(&doc)?),
            }
            Ok(Outcome::Done)
        }
    }
}

fn norms(data: &LinkedTensorSet) -> Vec<f64> {
    data.tensors().iter().map(|t| t.norm_sq()).collect()
}

fn outcome(report: &FitReport) -> Outcome {
    if report.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    }
}

fn multifit(data: &LinkedTensorSet, fit: &FitArgs, out: &Path, command: &'static str) -> multifac::Result<Outcome> {
    if !data.is_complete() {
        return Err(multifac::Error::InvalidConfig(
            "the input has missing entries; use `multifac impute`".into(),
        ));
    }
    let cfg = fit.solver();
    let (model, report) = fit_multifac(data, &cfg, None)?;
    std::fs::create_dir_all(out)?;
    io::save_model(&out.join("model.json"), &model, cfg.zero_threshold)?;
    let doc = FitDocument {
        format_version: FORMAT_VERSION,
        command,
        data_norm_sq: norms(data),
        structure: Structure::of(&model, cfg.zero_threshold),
        variance_explained: Some(variance_explained(&model, data, cfg.zero_threshold)?),
        imputation: None,
        fit: report,
    };
    io::write_json(&out.join("report.json"), &doc)?;
    Ok(outcome(&doc.fit))
}

fn impute(
    manifest: &Path,
    fit: &FitArgs,
    em: &EmArgs,
    truth: Option<&Path>,
    out: &Path,
) -> multifac::Result<Outcome> {
    let data = io::read_linked(manifest)?;
    if data.is_complete() {
        eprintln!("warning: no missing entries; completed tensors equal the input");
    }
    let cfg = em.config(fit.solver());
    let result = em_als(&data, &cfg, None)?;
    let reference = match truth {
        Some(p) => {
            let t = io::read_linked(p)?;
            if !t.is_complete() {
                return Err(multifac::Error::InvalidConfig(
                    "reference tensors must be complete".into(),
                ));
            }
            Some(t.tensors().to_vec())
        }
        None => None,
    };
    let metrics = imputation_summary(&result, reference.as_deref())?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for (k, t) in result.completed.tensors().iter().enumerate() {
        let name = format!("completed_{}.json", k + 1);
        io::write_tensor(&out.join(&name), t, None, sidecar(t))?;
        names.push(name);
    }
    write_manifest(&out.join("completed.json"), names)?;
    io::save_model(&out.join("model.json"), &result.model, fit.zero_threshold)?;
    let doc = FitDocument {
        format_version: FORMAT_VERSION,
        command: "impute",
        data_norm_sq: norms(&data),
        structure: Structure::of(&result.model, fit.zero_threshold),
        variance_explained: None,
        imputation: Some(metrics),
        fit: result.report,
    };
    io::write_json(&out.join("report.json"), &doc)?;
    Ok(outcome(&doc.fit))
}

fn sidecar(t: &multifac::DenseTensor) -> bool {
    t.shape().numel() > 4096
}

fn write_manifest(path: &Path, tensors: Vec<String>) -> multifac::Result<()> {
    io::write_json(
        path,
        &LinkedManifest {
            format_version: FORMAT_VERSION,
            tensors,
            shared_mode: 1,
        },
    )
}

fn write_simulated(spec: &SimulationSpec, dir: &Path) -> multifac::Result<()> {
    io::write_json(&dir.join("spec.json"), spec)?;
    for rep in 0..spec.n_replicates {
        let sub = if spec.n_replicates == 1 {
            dir.to_path_buf()
        } else {
            dir.join(format!("rep_{}", rep + 1))
        };
        std::fs::create_dir_all(sub.join("truth"))?;
        let (data, truth) = gen_replicate(spec, rep)?;
        let mut observed = Vec::new();
        let mut signal = Vec::new();
        let mut shared = Vec::new();
        let mut individual = Vec::new();
        for k in 0..data.n_tensors() {
            let t = &data.tensors()[k];
            let name = format!("tensor_{}.json", k + 1);
            io::write_tensor(&sub.join(&name), t, Some(&data.masks()[k]), sidecar(t))?;
            observed.push(name);
            for (list, stem, x) in [
                (&mut signal, "signal", &truth.signals[k]),
                (&mut shared, "shared", &truth.shared_signals[k]),
                (&mut individual, "individual", &truth.individual_signals[k]),
            ] {
                let name = format!("{stem}_{}.json", k + 1);
                io::write_tensor(&sub.join("truth").join(&name), x, None, sidecar(x))?;
                list.push(name);
            }
        }
        write_manifest(&sub.join("linked.json"), observed)?;
        write_manifest(&sub.join("truth").join("signal.json"), signal)?;
        write_manifest(&sub.join("truth").join("shared.json"), shared)?;
        write_manifest(&sub.join("truth").join("individual.json"), individual)?;
        io::save_model(&sub.join("truth").join("model.json"), &truth.model, 1e-6)?;
    }
    Ok(())
}
