//! End-to-end tests of the fairagg binary.

use std::path::Path;
use std::process::{Command, Output};

fn fairagg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairagg"))
        .args(args)
        .current_dir(dir)
        .env_remove("FAIRAGG_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn aggregate_mv_matches_hand_computed_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write(
        dir.path(),
        "labels.csv",
        "voter_id,task_id,label\nv1,t1,1\nv2,t1,1\nv3,t1,2\nv1,t2,2\nv2,t2,2\nv3,t2,2\n",
    );
    let out = dir.path().join("soft.csv");
    let result = fairagg(
        &[
            "aggregate",
            "--labels",
            &labels,
            "--model",
            "mv",
            "--out-labels",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let expected_row = format!("t1,{},{}", 2.0 / 3.0, 1.0 / 3.0);
    assert!(text.contains(&expected_row), "{text}");
    assert!(text.contains("t2,0,1"), "{text}");
}

#[test]
fn aggregate_requires_attrs_for_fairness_options() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write(dir.path(), "labels.csv", "voter_id,task_id,label\nv1,t1,1\n");
    let result = fairagg(
        &[
            "aggregate",
            "--labels",
            &labels,
            "--fairness",
            "weighting",
            "--out-labels",
            "soft.csv",
        ],
        dir.path(),
    );
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("attributes"), "{stderr}");
}

#[test]
fn synth_then_aggregate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let result = fairagg(
        &[
            "synth",
            "--kind",
            "soft-label",
            "--voters0",
            "12",
            "--tasks",
            "6",
            "--seed",
            "5",
            "--out",
            data_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for file in ["labels.csv", "attributes.csv", "truth.csv", "labels.meta.json"] {
        assert!(data_dir.join(file).exists(), "missing {file}");
    }

    let soft = dir.path().join("soft.csv");
    let result = fairagg(
        &[
            "aggregate",
            "--labels",
            data_dir.join("labels.csv").to_str().unwrap(),
            "--model",
            "soft-ds",
            "--hyper-alpha",
            "4,1;1,4",
            "--reference",
            data_dir.join("truth.csv").to_str().unwrap(),
            "--out-labels",
            soft.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("mae="), "{stdout}");
}

#[test]
fn experiment_is_bit_reproducible_and_compare_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "exp.toml",
        r#"
version = 1
experiment = "soft_label"
models = ["mv"]
seeds = [3, 4]

[gen]
num_voters_0 = 10
num_tasks = 5
"#,
    );
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let result = fairagg(
            &[
                "experiment",
                "--config",
                &config,
                "--out",
                out.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    }
    let bytes_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let bytes_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert!(out_a.join("manifest.json").exists());

    let result = fairagg(
        &[
            "compare",
            out_a.join("metrics.csv").to_str().unwrap(),
            out_b.join("metrics.csv").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(result.status.success());

    // a doctored report must fail the comparison
    let doctored = std::fs::read_to_string(out_a.join("metrics.csv"))
        .unwrap()
        .replacen("0.0", "0.9", 1);
    let doctored_path = write(dir.path(), "doctored.csv", &doctored);
    let result = fairagg(
        &[
            "compare",
            out_a.join("metrics.csv").to_str().unwrap(),
            &doctored_path,
            "--threshold",
            "0.01",
        ],
        dir.path(),
    );
    assert!(!result.status.success());
}

#[test]
fn metrics_subcommand_reports_mae_and_bias() {
    let dir = tempfile::tempdir().unwrap();
    let estimate = write(
        dir.path(),
        "est.csv",
        "task_id,class_1,class_2\nt1,0.6,0.4\nt2,0.5,0.5\n",
    );
    let reference = write(
        dir.path(),
        "ref.csv",
        "task_id,class_1,class_2\nt1,0.7,0.3\nt2,0.5,0.5\n",
    );
    let result = fairagg(
        &["metrics", "--estimate", &estimate, "--reference", &reference],
        dir.path(),
    );
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    let value = |prefix: &str| -> f64 {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(prefix))
            .unwrap_or_else(|| panic!("no {prefix} line in {stdout}"))
            .parse()
            .unwrap()
    };
    assert!((value("mae=") - 0.05).abs() < 1e-12, "{stdout}");
    assert!((value("bias_class_1=") + 0.05).abs() < 1e-12, "{stdout}");
}

#[test]
fn preprocess_mm_writes_balanced_output_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "responses.csv",
        "\
ResponseID,ExtendedSessionID,UserID,Intervention,Barrier,CrossingSignal,Saved,Man,Woman,Review_gender
r1,u1s1,u1,0,0,1,1,1,0,Male
r1,u1s1,u1,0,0,1,0,0,1,Male
r2,u2s1,u2,1,0,2,0,1,0,Female
r2,u2s1,u2,1,0,2,1,0,1,Female
",
    );
    let out = dir.path().join("mm");
    let result = fairagg(
        &[
            "preprocess-mm",
            "--input",
            &input,
            "--out",
            out.to_str().unwrap(),
            "--min-labels-female",
            "1",
            "--min-labels-task",
            "1",
        ],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(out.join("labels.csv").exists());
    assert!(out.join("attributes.csv").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("retention.json")).unwrap())
            .unwrap();
    let steps = report["steps"].as_array().unwrap();
    assert_eq!(steps.last().unwrap()["labels"], 2);

    let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    // u1 saved the male side -> class 1; u2 saved the female side -> class 2
    assert!(labels.contains("u1,"), "{labels}");
    assert!(labels.lines().any(|l| l.starts_with("u1,") && l.ends_with(",1")));
    assert!(labels.lines().any(|l| l.starts_with("u2,") && l.ends_with(",2")));
}
