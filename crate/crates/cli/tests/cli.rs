use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedstress::report::{load_rows, read_heterogeneity, records_from_rows, ConvergenceRow, RobustnessRow};

fn fedstress(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedstress"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("FEDSTRESS_THREADS", t),
        None => cmd.env_remove("FEDSTRESS_THREADS"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
    "strategies": ["fedavg", "fedbn"],
    "levels": ["H0", "H3"],
    "rounds": 2,
    "batch_size": 4,
    "learning_rate": 0.001,
    "validation_fraction": 0.25,
    "synthetic": {"case_count": 8, "slices_per_case": 2, "slice_size": 16, "wt_radius": [2.0, 5.0]},
    "model": {"base_channels": 4}
}"#;

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_the_report_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = fedstress(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "1,2"], Some("2"));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    for seed in ["seed_1", "seed_2"] {
        for level in ["H0", "H3"] {
            for strategy in ["fedavg", "fedbn"] {
                let conv = out.join(seed).join(level).join(strategy).join("convergence.csv");
                let rows: Vec<ConvergenceRow> = load_rows(&conv).unwrap();
                assert_eq!(rows.len(), 2 * 4);
                assert_eq!(records_from_rows(&rows).len(), 2);
            }
            let robust: Vec<RobustnessRow> = load_rows(&out.join(seed).join(level).join("robustness.csv")).unwrap();
            let names: Vec<&str> = robust.iter().map(|r| r.strategy.as_str()).collect();
            assert_eq!(names, ["fedavg", "fedbn"]);
            assert!(out.join(seed).join(level).join("subregion_gaps.csv").exists());
        }
        let het = read_heterogeneity(fs::File::open(out.join(seed).join("heterogeneity_summary.csv")).unwrap()).unwrap();
        assert_eq!(het.len(), 4);
    }
    for k in 1..=4 {
        assert!(out.join("seed_1/H3/fedbn").join(format!("client_{k}_norm.fstp")).exists());
    }
    assert!(!out.join("seed_1/H3/fedavg/client_1_norm.fstp").exists());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["jobs"].as_array().unwrap().len(), 8);
    for job in manifest["jobs"].as_array().unwrap() {
        for f in job["files"].as_array().unwrap() {
            assert!(out.join(f.as_str().unwrap()).exists());
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("level,strategy,metric,seeds,mean,min,max\n"));
    assert!(summary.contains("H3,fedbn,gap,2,"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut trees = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3"), ("c", "1")] {
        let out = tmp.path().join(name);
        let res = fedstress(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(threads));
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let files: Vec<(PathBuf, Vec<u8>)> =
            csv_files(&out).into_iter().map(|p| (p.strip_prefix(&out).unwrap().to_path_buf(), fs::read(&p).unwrap())).collect();
        assert!(files.len() > 10);
        trees.push(files);
    }
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0], trees[2]);
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), r#"{"strategy": "fedavg", "level": "H2", "leraning_rate": 0.1}"#);
    let res = fedstress(&["run", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("leraning_rate"));

    let missing = tmp.path().join("nope.json");
    assert_eq!(fedstress(&["run", "--config", missing.to_str().unwrap()], None).status.code(), Some(2));
    assert_eq!(fedstress(&["run"], None).status.code(), Some(2));
    let cfg = write_config(tmp.path(), SMALL);
    assert_eq!(fedstress(&["run", "--config", cfg.to_str().unwrap()], Some("zero")).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!(r#"{{"strategy": "fedavg", "level": "H1", "data": "{}"}}"#, tmp.path().join("missing.fssb").display()),
    );
    let out = tmp.path().join("out");
    let res = fedstress(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some("1"));
    assert_eq!(res.status.code(), Some(1));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn gen_data_bundle_feeds_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen.json");
    fs::write(&gen, r#"{"case_count": 8, "slices_per_case": 2, "slice_size": 16, "wt_radius": [2.0, 5.0]}"#).unwrap();
    let bundle = tmp.path().join("cases.fssb");
    let res = fedstress(&["gen-data", "--config", gen.to_str().unwrap(), "--out", bundle.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(&fs::read(&bundle).unwrap()[..4], b"FSSB");

    let cfg = write_config(
        tmp.path(),
        &format!(
            r#"{{"strategy": "fedprox", "level": "H2", "rounds": 1, "batch_size": 4, "validation_fraction": 0.25,
                "model": {{"base_channels": 4}}, "data": "{}"}}"#,
            bundle.display()
        ),
    );
    let out = tmp.path().join("out");
    let res = fedstress(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some("1"));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("seed_0/H2/fedprox/convergence.csv").exists());
}

#[test]
fn compare_sorts_by_gap_and_checks_client_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "level,strategy,clients,worst_client,worst,best_client,best,gap,mean\n";
    let a = tmp.path().join("a.csv");
    fs::write(&a, format!("{header}H3,fedavg,4,4,0.7309,1,0.8159,0.085,0.8159\nH3,fedprox,4,4,0.7421,1,0.8085,0.0664,0.8085\n")).unwrap();
    let b = tmp.path().join("b.csv");
    fs::write(&b, format!("{header}H3,fedbn,4,4,0.7656,1,0.8159,0.0503,0.8109\n")).unwrap();
    let combined = tmp.path().join("combined.csv");
    let res = fedstress(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", combined.to_str().unwrap()], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    let order: Vec<usize> = ["fedbn", "fedprox", "fedavg"].iter().map(|s| stdout.find(s).unwrap()).collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{stdout}");
    let rows: Vec<RobustnessRow> = load_rows(&combined).unwrap();
    assert_eq!(rows.iter().map(|r| r.strategy.as_str()).collect::<Vec<_>>(), ["fedbn", "fedprox", "fedavg"]);

    let c = tmp.path().join("c.csv");
    fs::write(&c, format!("{header}H3,fedbn,3,3,0.7,1,0.8,0.1,0.75\n")).unwrap();
    let res = fedstress(&["compare", a.to_str().unwrap(), c.to_str().unwrap(), "--out", combined.to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("client count"));
}
