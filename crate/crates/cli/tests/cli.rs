use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use transferbound::capacity::{generalization_bound, BoundParams};
use transferbound::io::{load_model, save_model, to_kv};
use transferbound::linalg::svd_bruteforce;
use transferbound::{Activation, Architecture, Loss, Matrix, Network};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transferbound"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn kv_keys(path: &Path) -> BTreeSet<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split_once('=').unwrap().0.to_string())
        .collect()
}

fn kv_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("missing {key}"))
        .to_string()
}

const TRAIN: &[&str] = &["train", "--data", "gm:2x2:sep4:n400", "--arch", "2-8-2:tanh", "--epochs", "5", "--seed", "1"];

#[test]
fn train_writes_model_and_five_epoch_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), TRAIN);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/model.atl").exists());
    let report = std::fs::read_to_string(dir.path().join("out/train_report.kv")).unwrap();
    let rows = report.lines().filter(|l| l.starts_with("epochs.") && l.contains(".epoch=")).count();
    assert_eq!(rows, 5);
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("[model] epoch")).count(), 5);
}

#[test]
fn train_is_byte_for_byte_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = TRAIN.to_vec();
    a.extend(["--out", "a"]);
    let mut b = TRAIN.to_vec();
    b.extend(["--out", "b"]);
    assert!(run(dir.path(), &a).status.success());
    assert!(run(dir.path(), &b).status.success());
    for f in ["model.atl", "train_report.kv", "config.kv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn capped_training_saves_capped_layers() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TRAIN.to_vec();
    args.extend(["--beta", "1.0", "--attack", "pgd-l2", "--gamma", "0.05"]);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let net = load_model(&dir.path().join("out/model.atl")).unwrap().network;
    for w in net.weights() {
        assert!(svd_bruteforce(w).unwrap() <= 1.0 + 1e-5);
    }
}

#[test]
fn bound_of_identity_layer() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::from_weights(vec![Matrix::identity(4)], Activation::Identity).unwrap();
    save_model(&dir.path().join("id.atl"), &net, &serde_json::Value::Null).unwrap();
    let o = run(dir.path(), &["bound", "--substitute", "id.atl", "--data-norm", "1", "--n", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(kv_value(&text, "lipschitz").parse::<f64>().unwrap(), 1.0);
    assert_eq!(kv_value(&text, "capacity").parse::<f64>().unwrap(), 4.0);
}

#[test]
fn bound_matches_the_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let sub = "3-10-3:tanh".parse::<Architecture>().unwrap().init(1);
    let tgt = "3-6-6-3:tanh".parse::<Architecture>().unwrap().init(2);
    save_model(&dir.path().join("s.atl"), &sub, &serde_json::Value::Null).unwrap();
    save_model(&dir.path().join("t.atl"), &tgt, &serde_json::Value::Null).unwrap();
    let o = run(
        dir.path(),
        &[
            "bound", "--substitute", "s.atl", "--target", "t.atl", "--data-norm", "12.5", "--n",
            "500", "--lambda", "40", "--tau", "0.4", "--out", "bound.kv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let direct = generalization_bound(
        &sub,
        &tgt,
        Loss::Brier,
        BoundParams {
            data_norm_bound: 12.5,
            lambda: 40.0,
            tau: 0.4,
            omega: 0.05,
            n: 500,
        },
    )
    .unwrap();
    let expected = to_kv(&direct).unwrap();
    assert_eq!(stdout(&o), expected);
    assert_eq!(std::fs::read_to_string(dir.path().join("bound.kv")).unwrap(), expected);
}

#[test]
fn bound_refuses_relu_substitute_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let net = "2-5-2:relu".parse::<Architecture>().unwrap().init(0);
    save_model(&dir.path().join("r.atl"), &net, &serde_json::Value::Null).unwrap();
    let o = run(dir.path(), &["bound", "--substitute", "r.atl", "--data-norm", "1", "--n", "10"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("smoothness"), "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        run(dir.path(), &["train", "--data", "gm:2x2:sep1:n50", "--arch", "3-4-2:tanh"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(dir.path(), &["train", "--data", "missing.csv", "--arch", "2-4-2:tanh"]).status.code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.atl"), b"ATL1\n{").unwrap();
    assert_eq!(
        run(dir.path(), &["bound", "--substitute", "bad.atl", "--data-norm", "1", "--n", "1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn csv_training_with_domain() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..60)
        .map(|i| {
            let c = i % 2;
            format!("{},0.5,{c}\n", 0.2 + 0.6 * c as f64 + 0.001 * i as f64)
        })
        .collect();
    std::fs::write(dir.path().join("d.csv"), rows).unwrap();
    let o = run(
        dir.path(),
        &[
            "train", "--data", "d.csv", "--domain", "0,1", "--arch", "2-4-2:tanh", "--epochs",
            "2", "--attack", "fgsm", "--epsilon", "0.3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(dir.path().join("out/config.kv")).unwrap();
    assert!(cfg.contains("data.domain.0=0.0\ndata.domain.1=1.0"), "{cfg}");
}

const EXPERIMENT: &[&str] = &[
    "experiment", "--data", "gm:3x2:sep2:n300", "--arch", "2-8-3:tanh", "--target", "2-6-3:tanh",
    "--target", "2-10-3:tanh", "--epochs", "3", "--batch-size", "32", "--steps", "5",
];

#[test]
fn zero_budget_experiment_has_zero_rates_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = EXPERIMENT.to_vec();
    args.extend(["--epsilon", "0", "--beta", "1", "--baseline", "--out", "run"]);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("run/report.kv")).unwrap();
    for t in 0..2 {
        assert_eq!(kv_value(&report, &format!("targets.{t}.transfer_rate.rate")), "0.0");
        assert_eq!(kv_value(&report, &format!("targets.{t}.transfer_rate.n_fooled")), "0");
    }
    let e = run(dir.path(), &["evaluate", "run"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let table = stdout(&e);
    assert!(table.contains("Gen.Err."));
    assert!(table.contains("Transferability Rate(target1)"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn seeds_change_values_but_not_report_shape() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        let mut args = EXPERIMENT.to_vec();
        args.extend(["--seed", seed, "--out", seed]);
        assert!(run(dir.path(), &args).status.success());
    }
    let (a, b) = (dir.path().join("1/report.kv"), dir.path().join("2/report.kv"));
    assert_eq!(kv_keys(&a), kv_keys(&b));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn experiment_rerun_from_config_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = EXPERIMENT.to_vec();
    args.extend(["--early-stop", "2", "--out", "first"]);
    assert!(run(dir.path(), &args).status.success());
    let o = run(dir.path(), &["experiment", "--config", "first/config.kv", "--out", "second"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut count = 0;
    for entry in std::fs::read_dir(dir.path().join("first")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(dir.path().join("first").join(&name)).unwrap(),
            std::fs::read(dir.path().join("second").join(&name)).unwrap(),
            "{name:?}"
        );
        count += 1;
    }
    assert!(count >= 10);
}
