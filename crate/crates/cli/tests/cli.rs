use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use multifac::io;

fn multifac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multifac"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MULTIFAC_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Writes a simulation spec and generates it into `dir/name`.
fn generate(dir: &Path, name: &str, spec: Value) -> std::path::PathBuf {
    let spec_path = dir.join(format!("{name}.spec.json"));
    write_json(&spec_path, &spec);
    let out = dir.join(name);
    let o = multifac(
        &["simulate", "--spec", spec_path.to_str().unwrap(), "--out-dir", out.to_str().unwrap()],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn rank2_noiseless(dir: &Path) -> std::path::PathBuf {
    generate(
        dir,
        "rank2",
        json!({"shapes": [[6, 5, 4]], "shared_rank": 2, "individual_ranks": [0], "snr": "inf", "seed": 3}),
    )
}

#[test]
fn noiseless_rank_two_fit_is_exact() {
    let tmp = TempDir::new().unwrap();
    let d = rank2_noiseless(tmp.path());
    let o = multifac(
        &["fit", "rank2/tensor_1.json", "--rank", "2", "--sigma", "0", "--max-iters", "5000", "--out", "fit"],
        tmp.path(),
    );
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    let report = read_json(&tmp.path().join("fit/report.json"));
    let obj = report["fit"]["unpenalized_final"].as_f64().unwrap();
    let norm = report["data_norm_sq"][0].as_f64().unwrap();
    assert!(obj <= 1e-8 * norm, "objective {obj} vs norm {norm}");
    assert!(d.join("truth/model.json").exists());
}

#[test]
fn rank_zero_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    let o = multifac(&["fit", "rank2/tensor_1.json", "--rank", "0"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn zero_replicates_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = multifac(&["simulate", "--experiment", "single-complete", "--reps", "0"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_experiment_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = multifac(&["simulate", "--experiment", "no-such-design"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no-such-design"));
}

#[test]
fn help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&multifac(&["--help"], tmp.path())), 0);
}

#[test]
fn same_seed_gives_identical_model_files() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    for out in ["a", "b"] {
        let o = multifac(
            &["fit", "rank2/tensor_1.json", "--rank", "3", "--sigma", "0.1", "--seed", "9", "--out", out],
            tmp.path(),
        );
        assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    }
    let a = fs::read(tmp.path().join("a/model.json")).unwrap();
    let b = fs::read(tmp.path().join("b/model.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_tensor_multifit_matches_fit() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    write_json(
        &tmp.path().join("one.json"),
        &json!({"format_version": 1, "tensors": ["rank2/tensor_1.json"], "shared_mode": 1}),
    );
    let args = ["--rank", "3", "--sigma", "0.05", "--seed", "4"];
    let f = multifac(&[&["fit", "rank2/tensor_1.json", "--out", "f"][..], &args].concat(), tmp.path());
    let m = multifac(&[&["multifit", "one.json", "--out", "m"][..], &args].concat(), tmp.path());
    assert_eq!(code(&f), code(&m));
    assert_eq!(
        fs::read(tmp.path().join("f/model.json")).unwrap(),
        fs::read(tmp.path().join("m/model.json")).unwrap()
    );
    let rf = read_json(&tmp.path().join("f/report.json"));
    let rm = read_json(&tmp.path().join("m/report.json"));
    assert_eq!(rf["fit"], rm["fit"]);
    assert_eq!(rf["structure"], rm["structure"]);
}

#[test]
fn linked_report_ranks_match_the_model_file() {
    let tmp = TempDir::new().unwrap();
    generate(
        tmp.path(),
        "linked",
        json!({"shapes": [[12, 6, 5], [12, 7, 4]], "shared_rank": 1, "individual_ranks": [1, 1], "snr": 20, "seed": 5}),
    );
    let o = multifac(
        &["multifit", "linked/linked.json", "--rank", "5", "--sigma", "1", "--out", "fit"],
        tmp.path(),
    );
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    let report = read_json(&tmp.path().join("fit/report.json"));
    assert!(report["variance_explained"].is_array());
    let o = multifac(&["report", "--model", "fit/model.json", "--out", "again.json"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = read_json(&tmp.path().join("again.json"));
    assert_eq!(report["structure"]["ranks"], again["structure"]["ranks"]);
}

#[test]
fn mismatched_first_modes_name_the_tensors() {
    let tmp = TempDir::new().unwrap();
    let t = |n: usize| json!({"format_version": 1, "shape": [n, 2], "data": vec![1.0; 2 * n]});
    write_json(&tmp.path().join("a.json"), &t(4));
    write_json(&tmp.path().join("b.json"), &t(5));
    write_json(
        &tmp.path().join("m.json"),
        &json!({"format_version": 1, "tensors": ["a.json", "b.json"], "shared_mode": 1}),
    );
    let o = multifac(&["multifit", "m.json", "--rank", "1"], tmp.path());
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("tensor 2") && e.contains("tensor 1"), "{e}");
}

#[test]
fn malformed_descriptor_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    write_json(
        &tmp.path().join("bad.json"),
        &json!({"format_version": 1, "shape": [2, 3], "data": [1.0, 2.0]}),
    );
    let o = multifac(&["fit", "bad.json", "--rank", "1"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains('6'), "{}", stderr(&o));
}

#[test]
fn fit_on_incomplete_data_points_to_impute() {
    let tmp = TempDir::new().unwrap();
    write_json(
        &tmp.path().join("t.json"),
        &json!({"format_version": 1, "shape": [2, 2], "data": [1.0, null, 3.0, 4.0]}),
    );
    let o = multifac(&["fit", "t.json", "--rank", "1"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("impute"));
}

#[test]
fn impute_without_missing_entries_passes_data_through() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    let o = multifac(&["impute", "rank2/linked.json", "--rank", "2", "--out", "imp"], tmp.path());
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let (input, _) = io::read_tensor(&tmp.path().join("rank2/tensor_1.json")).unwrap();
    let (output, mask) = io::read_tensor(&tmp.path().join("imp/completed_1.json")).unwrap();
    assert_eq!(input, output);
    assert!(mask.is_complete());
}

#[test]
fn impute_keeps_observed_entries_and_scores_against_truth() {
    let tmp = TempDir::new().unwrap();
    generate(
        tmp.path(),
        "holes",
        json!({
            "shapes": [[10, 6, 5], [10, 4, 4]], "shared_rank": 1, "individual_ranks": [1, 1], "snr": 10, "seed": 8,
            "missing": {"entrywise_fraction": 0.1, "tensorwise_fraction": 0.1, "allow_all_missing": false}
        }),
    );
    let o = multifac(
        &[
            "impute", "holes/linked.json", "--rank", "4", "--sigma", "0.001", "--truth", "holes/truth/signal.json",
            "--out", "imp",
        ],
        tmp.path(),
    );
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    for k in 1..=2 {
        let (input, mask) = io::read_tensor(&tmp.path().join(format!("holes/tensor_{k}.json"))).unwrap();
        let (output, _) = io::read_tensor(&tmp.path().join(format!("imp/completed_{k}.json"))).unwrap();
        assert!(!mask.is_complete());
        for (i, (a, b)) in input.values().iter().zip(output.values()).enumerate() {
            if mask.is_observed(i) {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert!(b.is_finite());
            }
        }
    }
    let report = read_json(&tmp.path().join("imp/report.json"));
    let m = &report["imputation"][0];
    assert!(m["rse_entrywise"].as_f64().unwrap() < 0.1);
    assert!(m["rse_tensorwise"].is_number());
}

#[test]
fn generated_structures_add_up() {
    let tmp = TempDir::new().unwrap();
    let d = generate(
        tmp.path(),
        "g",
        json!({"shapes": [[8, 3, 4], [8, 5, 2, 2]], "shared_rank": 2, "individual_ranks": [1, 2], "snr": 2, "seed": 1}),
    );
    for k in 1..=2 {
        let read = |n: &str| io::read_tensor(&d.join(format!("truth/{n}_{k}.json"))).unwrap().0;
        let (signal, shared, individual) = (read("signal"), read("shared"), read("individual"));
        for ((s, a), b) in signal.values().iter().zip(shared.values()).zip(individual.values()) {
            assert!((s - (a + b)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
    let spec = read_json(&d.join("spec.json"));
    assert_eq!(spec["shared_rank"], 2);
}

#[test]
fn replicates_get_their_own_directories() {
    let tmp = TempDir::new().unwrap();
    let spec = json!({"shapes": [[5, 3, 3]], "shared_rank": 1, "individual_ranks": [0], "snr": 1, "n_replicates": 2});
    let d = generate(tmp.path(), "reps", spec);
    assert!(d.join("rep_1/tensor_1.json").exists());
    assert!(d.join("rep_2/truth/signal.json").exists());
    let a = fs::read(d.join("rep_1/tensor_1.json")).unwrap();
    let b = fs::read(d.join("rep_2/tensor_1.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn reconstruct_round_trips_the_fit() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    let o = multifac(&["fit", "rank2/tensor_1.json", "--rank", "2", "--out", "fit"], tmp.path());
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    let o = multifac(&["reconstruct", "--model", "fit/model.json", "--out", "rec"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (model, _) = io::load_model(&tmp.path().join("fit/model.json")).unwrap();
    let (rec, _) = io::read_tensor(&tmp.path().join("rec/reconstruction_1.json")).unwrap();
    assert_eq!(rec, model.reconstruct(0).unwrap());
    let o = multifac(&["reconstruct", "--model", "fit/model.json", "--part", "individual", "--out", "ind"], tmp.path());
    assert_eq!(code(&o), 0);
    let (ind, _) = io::read_tensor(&tmp.path().join("ind/reconstruction_1.json")).unwrap();
    assert!(ind.values().iter().all(|&v| v == 0.0));
}

#[test]
fn cv_rejects_a_single_grid_point() {
    let tmp = TempDir::new().unwrap();
    rank2_noiseless(tmp.path());
    let o = multifac(&["cv", "rank2/linked.json", "--rank", "4", "--grid-points", "1"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));
}

#[test]
fn cv_finds_the_rank_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    generate(
        tmp.path(),
        "r5",
        json!({"shapes": [[16, 15, 14]], "shared_rank": 5, "individual_ranks": [0], "snr": 10, "seed": 21}),
    );
    let args = [
        "cv", "r5/linked.json", "--rank", "10", "--starts", "2", "--fold-starts", "1", "--grid-points", "10",
        "--seed", "3",
    ];
    let a = multifac(&[&args[..], &["--out", "a"]].concat(), tmp.path());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let cv = read_json(&tmp.path().join("a/cv.json"));
    assert_eq!(cv["ranks"]["total"], 5, "{cv}");
    let b = multifac(&[&args[..], &["--out", "b"]].concat(), tmp.path());
    assert_eq!(code(&b), 0);
    assert_eq!(
        fs::read(tmp.path().join("a/cv_trace.csv")).unwrap(),
        fs::read(tmp.path().join("b/cv_trace.csv")).unwrap()
    );
}

#[test]
fn threads_zero_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = multifac(&["--threads", "0", "report", "--model", "none.json"], tmp.path());
    assert_eq!(code(&o), 1);
}
