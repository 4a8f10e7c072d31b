use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim::io::load_model;

const BIN: &str = env!("CARGO_BIN_EXE_fedsim");

fn config_json(method: &str, extra: &str) -> String {
    format!(
        r#"{{
  "dataset": "synthetic",
  "synthetic": {{"num_classes": 3, "input_dim": 5, "train_per_class": 40, "test_per_class": 20, "spread": 0.4}},
  "hidden": [6],
  "K": 3, "T": 4, "E": 1, "batch_size": 8,
  "optimizer": {{"kind": "sgd", "eta": 0.1}},
  "method": "{method}",
  "D_alpha": 0.5,
  "proxy_per_class": 4,
  "seed": 5{extra}
}}"#
    )
}

const HAW: &str = r#", "eta_gamma": 0.001, "eta_lambda": 0.01"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn fedsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    fedsim(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "haw.json", &config_json("fedhaw", HAW));
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "round,method,seed,test_accuracy,gamma,effective_l1,num_failed,agg_time_ns,w0,w1,w2"
    );
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("0,fedhaw,5,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["method"], "fedhaw");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["version"].as_str().unwrap().starts_with("fedsim "));
    assert!(manifest["final_accuracy"].is_number());
    assert!(manifest["best_accuracy"].is_number());

    let model = load_model(&out.join("final_model.bin")).unwrap();
    let names: Vec<&str> = model
        .layout()
        .entries()
        .iter()
        .map(|e| e.name.as_str())
        .collect();
    assert_eq!(names, ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]);
    assert_eq!(model.len(), 5 * 6 + 6 + 6 * 3 + 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &config_json("fedhaw", &format!("{HAW}, \"p_e\": 0.5")),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &["--no-timing"]).status.success());
    assert!(run(&cfg, &b, &["--no-timing"]).status.success());
    for file in ["records.csv", "final_model.bin"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config_json("fedavg", ""));
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = Command::new(BIN)
            .env("FEDSIM_THREADS", threads)
            .args([
                "run",
                "--no-timing",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(out.join("records.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bad_thread_env_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config_json("fedavg", ""));
    let o = Command::new(BIN)
        .env("FEDSIM_THREADS", "zero")
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FEDSIM_THREADS"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config_json("fedavg", ""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &["--no-timing"]).status.success());
    assert!(run(&cfg, &b, &["--no-timing", "--seed", "6"])
        .status
        .success());
    let rb = fs::read_to_string(b.join("records.csv")).unwrap();
    assert!(rb.lines().nth(1).unwrap().starts_with("0,fedavg,6,"));
    assert_ne!(
        fs::read(a.join("final_model.bin")).unwrap(),
        fs::read(b.join("final_model.bin")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 6);
}

#[test]
fn missing_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_json("fedavg", "").replace("\"T\": 4, ", "");
    let cfg = write_config(dir.path(), "c.json", &text);
    let o = run(&cfg, &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`T`"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_and_method_specific_fields_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("typo.json", config_json("fedavg", r#", "eta_gama": 0.1"#)),
        ("law.json", config_json("fedlaw", "")),
        ("haw.json", config_json("fedhaw", "")),
        ("avg.json", config_json("fedavg", r#", "proxy_epochs": 3"#)),
    ] {
        let cfg = write_config(dir.path(), name, &text);
        let o = run(&cfg, &dir.path().join("o"), &[]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
}

#[test]
fn missing_dataset_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"dataset":"mnist","mnist_dir":"nowhere","K":2,"T":1,"E":1,"batch_size":8,
        "optimizer":{"kind":"sgd","eta":0.001},"method":"fedavg","D_alpha":1,"seed":0}"#;
    let cfg = write_config(dir.path(), "c.json", text);
    let o = run(&cfg, &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn config_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &config_json("fedavg", ""));
    let value: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&config_json("fedavg", "")).unwrap();
    let reversed: Vec<String> = value
        .keys()
        .rev()
        .map(|k| format!("{}:{}", serde_json::Value::from(k.as_str()), value[k]))
        .collect();
    let b = write_config(dir.path(), "b.json", &format!("{{{}}}", reversed.join(",")));
    let hash = |cfg: &Path, out: &str| {
        let out = dir.path().join(out);
        assert!(run(cfg, &out, &[]).status.success());
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["config_hash"].as_str().unwrap().to_owned()
    };
    assert_eq!(hash(&a, "oa"), hash(&b, "ob"));
}

#[test]
fn compare_pairs_methods_on_shared_failures() {
    let dir = tempfile::tempdir().unwrap();
    let pe = r#", "p_e": 0.8"#;
    let avg = write_config(dir.path(), "avg.json", &config_json("fedavg", pe));
    let haw = write_config(
        dir.path(),
        "haw.json",
        &config_json("fedhaw", &format!("{HAW}{pe}")),
    );
    let out = dir.path().join("cmp");
    let o = fedsim(&[
        "compare",
        "--configs",
        avg.to_str().unwrap(),
        haw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 8);
    let failed = |m: &str| {
        rows.iter()
            .filter(|r| r[1] == m)
            .map(|r| r[6])
            .collect::<Vec<_>>()
    };
    assert_eq!(failed("fedavg"), failed("fedhaw"));
    assert!(rows.iter().all(|r| !r[3].is_empty()));
}

#[test]
fn compare_of_one_config_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config_json("fedhaw", HAW));
    let run_out = dir.path().join("run");
    let cmp_out = dir.path().join("cmp");
    assert!(run(&cfg, &run_out, &["--no-timing"]).status.success());
    let o = fedsim(&[
        "compare",
        "--no-timing",
        "--configs",
        cfg.to_str().unwrap(),
        "--out",
        cmp_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run_out.join("records.csv")).unwrap(),
        fs::read(cmp_out.join("compare.csv")).unwrap()
    );
}

#[test]
fn compare_rejects_mismatched_configs() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &config_json("fedavg", ""));
    for (name, text) in [
        (
            "k.json",
            config_json("fedhaw", HAW).replace("\"K\": 3", "\"K\": 4"),
        ),
        (
            "t.json",
            config_json("fedhaw", HAW).replace("\"T\": 4", "\"T\": 5"),
        ),
        (
            "seed.json",
            config_json("fedhaw", HAW).replace("\"seed\": 5", "\"seed\": 6"),
        ),
        (
            "data.json",
            config_json("fedhaw", HAW).replace("\"spread\": 0.4", "\"spread\": 0.5"),
        ),
        ("dup.json", config_json("fedavg", "")),
    ] {
        let b = write_config(dir.path(), name, &text);
        let o = fedsim(&[
            "compare",
            "--configs",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
}

#[test]
fn gradcheck_passes_and_names_checks() {
    let o = fedsim(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for name in ["eq15_gamma", "eq16_lambda", "mlp_backprop"] {
        assert!(stdout.contains(name), "missing {name} in\n{stdout}");
    }
    assert!(fedsim(&["gradcheck", "--seed", "17"]).status.success());
}

#[test]
fn perturbed_gradcheck_fails() {
    let o = fedsim(&["gradcheck", "--perturb", "1e-3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("failing checks"));
}
