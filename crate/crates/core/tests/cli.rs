use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sd3mf::checkpoint::Checkpoint;
use sd3mf::interpret::dominant_communities;
use serde_json::Value;

fn sd3mf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sd3mf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = sd3mf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
        }
    }
    files
}

/// Small planted dataset; returns the manifest path.
fn small_dataset(dir: &Path) -> String {
    let out = dir.join("data");
    ok(&["generate", "--n", "10", "--r", "3", "--subjects", "12", "--seed", "3", "--out", &path_str(&out)]);
    path_str(&out.join("manifest.json"))
}

const QUICK: [&str; 6] = ["--widths", "6,3", "--lr", "1e-4", "--iters", "200"];

#[test]
fn generate_writes_every_matrix_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "generate", "--n", "30", "--r", "5", "--modalities", "2", "--subjects", "40", "--seed", "7", "--out",
            &path_str(out),
        ]);
    }
    let files = tree(&a);
    let matrices = files.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    assert_eq!(matrices, 80);
    assert!(files.contains_key(Path::new("manifest.json")));
    assert!(files.contains_key(Path::new("ground_truth.json")));
    let echoed = files.keys().filter(|p| *p == Path::new("config.json")).count();
    assert_eq!(files.len(), matrices + 2 + echoed);
    let mut other = tree(&b);
    // The echoed config records its own output directory.
    files.iter().filter(|(p, _)| *p != Path::new("config.json")).for_each(|(p, bytes)| {
        assert_eq!(other.remove(p).as_ref(), Some(bytes), "{}", p.display());
    });
}

#[test]
fn more_communities_than_nodes_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sd3mf(&["generate", "--r", "40", "--n", "30", "--out", &path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n < r"));
}

#[test]
fn gradcheck_default_passes_and_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&["gradcheck", "--out", &path_str(dir.path())]);
    assert_eq!(report["pass"], true);
    let fine = report["max_relative_error"].as_f64().unwrap();
    assert!(fine < 1e-4);
    assert!(dir.path().join("gradcheck.json").is_file());

    let strict = ok(&["gradcheck", "--tolerance", "0", "--out", &path_str(dir.path())]);
    assert_eq!(strict["pass"], false);

    let coarse = ok(&["gradcheck", "--h", "1e-2", "--out", &path_str(dir.path())]);
    let err = coarse["max_relative_error"].as_f64().unwrap();
    assert!(err.is_finite() && err > fine);
}

#[test]
fn train_variants() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());

    let out = dir.path().join("unsup");
    let mut args = vec!["train", "--dataset", &manifest, "--no-supervision", "--out"];
    let out_s = path_str(&out);
    args.push(&out_s);
    args.extend(QUICK);
    ok(&args);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("iter,recon_loss,cls_loss,train_acc"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("0")));

    let out = dir.path().join("shallow");
    let out_s = path_str(&out);
    ok(&["train", "--dataset", &manifest, "--widths", "3", "--mu", "0", "--iters", "50", "--out", &out_s]);
    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ckpt.raw_factors.iter().all(|f| f.len() == 1));
    assert_eq!(ckpt.hyper.mu, 0.0);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let recon: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(recon.iter().all(|r| *r > 0.0));
}

#[test]
fn experiment_single_run_and_mu_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());

    let one = dir.path().join("one");
    let one_s = path_str(&one);
    let mut args = vec!["experiment", "--dataset", &manifest, "--runs", "1", "--out", &one_s];
    args.extend(QUICK);
    let result = ok(&args);
    for key in ["accuracy", "auc", "sensitivity", "specificity"] {
        assert_eq!(result["std"][key], 0.0);
    }
    let runs = fs::read_to_string(one.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2);
    assert!(one.join("summary.json").is_file());

    let sweep = dir.path().join("sweep");
    let sweep_s = path_str(&sweep);
    let mut args = vec!["experiment", "--dataset", &manifest, "--runs", "2", "--mu-sweep", "0,1,10", "--out", &sweep_s];
    args.extend(QUICK);
    let result = ok(&args);
    assert_eq!(result.as_array().unwrap().len(), 3);
    for mu in ["0", "1", "10"] {
        assert!(sweep.join(format!("mu_{mu}")).join("summary.json").is_file());
    }
    assert_eq!(fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 4);

    let single = dir.path().join("single");
    let single_s = path_str(&single);
    let mut args = vec!["experiment", "--dataset", &manifest, "--runs", "1", "--modality", "m1", "--out", &single_s];
    args.extend(QUICK);
    ok(&args);
    let config: Value = serde_json::from_str(&fs::read_to_string(single.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["modality"], "m1");
}

#[test]
fn interpret_exports_match_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let trained = dir.path().join("trained");
    let trained_s = path_str(&trained);
    let mut args = vec!["train", "--dataset", &manifest, "--out", &trained_s];
    args.extend(QUICK);
    ok(&args);
    let ckpt_path = path_str(&trained.join("checkpoint.json"));

    let out = dir.path().join("interp");
    let out_s = path_str(&out);
    ok(&["interpret", "--dataset", &manifest, "--checkpoint", &ckpt_path, "--out", &out_s]);
    let ckpt = Checkpoint::load(&trained.join("checkpoint.json")).unwrap();
    let params = ckpt.params().unwrap();
    let memberships = params.memberships(ckpt.hyper.row_norm_epsilon).unwrap();
    for (m, name) in ["m0", "m1"].iter().enumerate() {
        let expected = dominant_communities(&memberships[m].psi);
        let csv = fs::read_to_string(out.join(format!("communities_{name}.csv"))).unwrap();
        let got: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(got, expected.community);
        for prefix in ["saliency", "approx_class0", "approx_class1", "edges", "psi"] {
            assert!(out.join(format!("{prefix}_{name}.csv")).is_file(), "{prefix}_{name}");
        }
        let edges = fs::read_to_string(out.join(format!("edges_{name}.csv"))).unwrap();
        assert_eq!(edges.lines().count(), 21);
    }
    assert!(out.join("saliency_fused.csv").is_file());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let missing = path_str(&dir.path().join("no_such_checkpoint.json"));
    let out = sd3mf(&["interpret", "--dataset", &manifest, "--checkpoint", &missing, "--out", &path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn paramcount_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let count = ok(&["paramcount", "--n", "90", "--subjects", "160", "--out", &path_str(dir.path())]);
    assert_eq!(count["per_modality"], 3500);
    assert_eq!(count["interaction"], 16000);
    assert_eq!(count["classifier"], 101);
    assert_eq!(count["total"], 2 * 3500 + 16000 + 101);
}

#[test]
fn help_lists_defaults() {
    let help = String::from_utf8(sd3mf(&["train", "--help"]).stdout).unwrap();
    for default in ["[default: 30,20,10]", "[default: 1e-5]", "[default: 30000]", "[default: 1]", "[default: 1e-3]"] {
        assert!(help.contains(default), "missing {default}");
    }
    let help = String::from_utf8(sd3mf(&["experiment", "--help"]).stdout).unwrap();
    assert!(help.contains("[default: 10]") && help.contains("[default: 0.8]"));
    let help = String::from_utf8(sd3mf(&["interpret", "--help"]).stdout).unwrap();
    assert!(help.contains("[default: 20]"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let config = dir.path().join("run.json");
    let body = serde_json::json!({
        "dataset": manifest,
        "widths": [6, 3],
        "learning_rate": 1e-4,
        "max_iters": 40,
        "mu": 5.0,
    });
    fs::write(&config, body.to_string()).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", &path_str(&config), "--mu", "2", "--out", &path_str(&out)]);
    let echoed: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["mu"], 2.0);
    assert_eq!(echoed["max_iters"], 40);
    assert_eq!(echoed["widths"], serde_json::json!([6, 3]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let out_s = path_str(&dir.path().join("diverge"));
    let out = sd3mf(&["train", "--dataset", &manifest, "--widths", "6,3", "--lr", "1e6", "--iters", "50", "--out", &out_s]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(sd3mf(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(sd3mf(&["train", "--out", &out_s]).status.code(), Some(1));
    assert_eq!(sd3mf(&["--help"]).status.code(), Some(0));
}
