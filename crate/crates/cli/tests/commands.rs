mod common;

use common::{json, ok, run_in, scratch};

fn small_data(dir: &std::path::Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--classes", "3", "--dim", "8", "--per-class", "30", "--out", "d"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn help_and_version_exit_zero() {
    let dir = scratch("help");
    for flag in ["--help", "--version"] {
        let out = run_in(&dir, &[flag]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = scratch("usage");
    for args in [
        vec!["train", "--no-such-flag"],
        vec!["frobnicate"],
        vec!["gen-data", "--classes", "many"],
        vec!["gen-data", "--classes", "1"],
        vec!["train", "--features", "a.csv", "--manifest", "b.csv"],
    ] {
        assert_eq!(run_in(&dir, &args).status.code(), Some(1), "{args:?}");
    }
    small_data(&dir, &[]);
    let out = run_in(&dir, &["train", "--features", "d/features.csv", "--variance", "1.5", "--out", "t"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = scratch("data");
    assert_eq!(run_in(&dir, &["train", "--features", "missing.csv"]).status.code(), Some(2));
    std::fs::write(dir.join("bad.csv"), "id,label,f0,f1\na,x,1,2\nb,y,3\n").unwrap();
    let out = run_in(&dir, &["train", "--features", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3"));
    std::fs::write(dir.join("model.fhc"), b"not a model").unwrap();
    small_data(&dir, &[]);
    let out = run_in(&dir, &["evaluate", "--model", "model.fhc", "--features", "d/features.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_values_apply() {
    let dir = scratch("config");
    std::fs::write(dir.join("run.cfg"), "# small run\nper_class = 7\nclasses=4\n").unwrap();
    ok(&dir, &["gen-data", "--per-class", "50", "--config", "run.cfg", "--out", "d"]);
    let text = std::fs::read_to_string(dir.join("d/features.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 7);
    std::fs::write(dir.join("bad.cfg"), "per_class\n").unwrap();
    assert_eq!(run_in(&dir, &["gen-data", "--config", "bad.cfg"]).status.code(), Some(2));
    std::fs::write(dir.join("unknown.cfg"), "colour=red\n").unwrap();
    assert_eq!(run_in(&dir, &["gen-data", "--config", "unknown.cfg"]).status.code(), Some(1));
}

#[test]
fn train_evaluate_and_roc_agree() {
    let dir = scratch("evaluate");
    small_data(&dir, &[]);
    ok(&dir, &["train", "--features", "d/features.csv", "--epochs", "20", "--arch", "compact", "--lr", "0.001", "--out", "t"]);
    let train = json(&dir.join("t/report.json"));
    assert_eq!(train["data"]["classes"].as_array().unwrap().len(), 3);
    ok(&dir, &["evaluate", "--model", "t/model.fhc", "--features", "t/test.csv", "--out", "e"]);
    let eval = json(&dir.join("e/report.json"));
    assert_eq!(train["test"], eval["test"]);

    ok(&dir, &["roc", "--model", "t/model.fhc", "--features", "t/test.csv", "--out", "r"]);
    let roc = std::fs::read_to_string(dir.join("r/roc.csv")).unwrap();
    let mut lines = roc.lines();
    assert_eq!(lines.next(), Some("class,threshold,fpr,tpr"));
    let mut curves = std::collections::BTreeSet::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 4);
        for v in &cells[2..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        curves.insert(cells[0].to_string());
    }
    let expect: Vec<String> = ["class_0", "class_1", "class_2", "macro", "micro"].map(String::from).to_vec();
    assert_eq!(curves.into_iter().collect::<Vec<_>>(), expect);
}

#[test]
fn every_adam_cell_reaches_high_test_accuracy() {
    let dir = scratch("adam");
    ok(&dir, &["gen-data", "--per-class", "40", "--out", "d"]);
    ok(&dir, &["sweep", "--features", "d/features.csv", "--optimizers", "adam", "--out", "s"]);
    let grid = json(&dir.join("s/grid.json"));
    let cells = grid["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells {
        let acc = c["test"]["accuracy"].as_f64().unwrap();
        assert!(acc >= 0.95, "{c}");
    }
}

#[test]
fn explain_reports_are_complete() {
    let dir = scratch("explain");
    small_data(&dir, &["--images", "--image-size", "24", "--per-class", "12"]);
    ok(&dir, &["train", "--manifest", "d/manifest.csv", "--epochs", "5", "--arch", "compact", "--out", "t"]);
    for method in ["lime", "shap"] {
        let out = format!("x-{method}");
        ok(&dir, &["explain", "--model", "t/model.fhc", "--input", "t/test.csv", "--method", method, "--n-samples", "300", "--out", &out]);
        let a = json(&dir.join(&out).join("attribution.json"));
        let k = json(&dir.join("t/report.json"))["data"]["pca_components"].as_u64().unwrap() as usize;
        let weights = a["weights"].as_array().unwrap();
        assert_eq!(weights.len(), k);
        assert_eq!(a["ranking"].as_array().unwrap().len(), k);
        assert!(a["target_label"].as_str().unwrap().starts_with("class_"));
        if method == "shap" {
            let total: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
            let gap = total + a["base_value"].as_f64().unwrap() - a["prediction"].as_f64().unwrap();
            assert!(gap.abs() < 1e-9);
            if k <= 12 {
                assert!(a["exact_max_deviation"].as_f64().unwrap() <= 0.05);
            }
        } else {
            assert!(a["fidelity"].is_number());
        }
    }
    let image = std::fs::read_dir(dir.join("d/images")).unwrap().next().unwrap().unwrap().path();
    let image = image.to_str().unwrap();
    ok(&dir, &["explain", "--model", "t/model.fhc", "--input", image, "--method", "lime", "--n-samples", "200", "--out", "xi"]);
    let a = json(&dir.join("xi/attribution.json"));
    assert_eq!(a["weights"].as_array().unwrap().len(), 64);
    assert_eq!(run_in(&dir, &["explain", "--model", "t/model.fhc", "--input", image, "--method", "shap"]).status.code(), Some(1));
}
