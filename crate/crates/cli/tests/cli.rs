//! End-to-end tests that drive the compiled binary the way a user would:
//! through config files, data files, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use energraph::energy::{EnergyMode, EnergyModel, ModelConfig};
use energraph::graph::{GraphSpec, ObservationInstance};
use energraph::inference::{map_labels, run_mean_field, InferenceOptions};
use energraph::io;
use energraph::rng::derived_seed;
use energraph::synth::SynthConfig;
use tempfile::TempDir;

fn energraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energraph"))
        .args(args)
        .output()
        .expect("the binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("the binary should exit normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A small three-stream experiment whose synthetic data supports the full
/// synth -> train -> infer -> eval recognize pipeline in well under a second.
fn pipeline_config() -> &'static str {
    r#"{
      "model": {"mode": "gsteg", "rank": 1, "bandwidth": 10.0},
      "train": {
        "optimizer": "adaptive_moment",
        "learning_rate": 0.05,
        "batch_size": 8,
        "epochs": 2,
        "inference": {"passes": 2},
        "seed": 0
      },
      "synth": {
        "num_steps": 2,
        "label_sizes": [2, 2, 2],
        "num_contexts": 1,
        "context_strength": 1.5,
        "noise_std": 0.4,
        "num_instances": 24,
        "seed": 0
      },
      "seed": 11
    }"#
}

#[test]
fn bare_invocation_is_a_usage_error_and_help_is_not() {
    let out = energraph(&[]);
    assert_eq!(code(&out), 1);

    let help = energraph(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = stdout(&help);
    for subcommand in ["synth", "train", "infer", "eval", "verify"] {
        assert!(text.contains(subcommand), "help should list {subcommand}");
    }

    let unknown = energraph(&["train", "--no-such-flag"]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn missing_config_path_is_a_data_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = energraph(&[
        "train",
        "--config",
        "/no/such/config.json",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/no/such/config.json"));
}

#[test]
fn corrupt_instance_line_is_a_data_error_naming_the_line() {
    let dir = TempDir::new().unwrap();
    let instances = dir.path().join("instances.jsonl");
    fs::write(
        &instances,
        concat!(
            r#"{"spec":{"K":1,"T":1,"label_sizes":[2],"feature_dims":[1]},"features":[[[0.0]]],"gold":null}"#,
            "\n",
            r#"{"spec":"#,
            "\n"
        ),
    )
    .unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        format!(
            r#"{{
              "model": {{"mode": "ueg", "rank": 1, "bandwidth": 10.0}},
              "train": {{"epochs": 1}},
              "train_instances": {:?}
            }}"#,
            instances.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = energraph(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("parse error at line 2"),
        "stderr should blame line 2: {}",
        stderr(&out)
    );
}

#[test]
fn synth_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, pipeline_config()).unwrap();

    let mut files = Vec::new();
    for (run, seed) in [("a", None), ("b", None), ("c", Some("99"))] {
        let out_dir = dir.path().join(run);
        let mut args = vec![
            "synth",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ];
        if let Some(seed) = seed {
            args.extend(["--seed", seed]);
        }
        let out = energraph(&args);
        assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
        assert!(stdout(&out).contains("wrote 24 instances"));
        files.push(read(&out_dir.join("instances.jsonl")));
    }
    assert_eq!(files[0], files[1], "same seed must reproduce the same bytes");
    assert_ne!(files[0], files[2], "a different root seed must change the data");
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, pipeline_config()).unwrap();

    let mut artifacts = Vec::new();
    for run in ["first", "second"] {
        let base = dir.path().join(run);
        let synth_out = base.join("synth");
        let out = energraph(&[
            "synth",
            "--config",
            config.to_str().unwrap(),
            "--out",
            synth_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
        let instances = synth_out.join("instances.jsonl");

        let train_config = base.join("train.json");
        fs::write(
            &train_config,
            format!(
                r#"{{
                  "model": {{"mode": "gsteg", "rank": 1, "bandwidth": 10.0}},
                  "train": {{
                    "learning_rate": 0.05,
                    "batch_size": 8,
                    "epochs": 2,
                    "inference": {{"passes": 2}}
                  }},
                  "train_instances": {:?},
                  "seed": 11
                }}"#,
                instances.to_str().unwrap()
            ),
        )
        .unwrap();
        let train_out = base.join("train");
        let out = energraph(&[
            "train",
            "--config",
            train_config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));

        let infer_out = base.join("infer");
        let out = energraph(&[
            "infer",
            "--checkpoint",
            train_out.join("checkpoint.json").to_str().unwrap(),
            "--instances",
            instances.to_str().unwrap(),
            "--out",
            infer_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "infer failed: {}", stderr(&out));

        let eval_out = base.join("eval");
        let out = energraph(&[
            "eval",
            "--task",
            "recognize",
            "--preds",
            infer_out.join("inference.jsonl").to_str().unwrap(),
            "--gt",
            instances.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
        assert!(stdout(&out).contains("acc_at_1"));

        artifacts.push((
            read(&train_out.join("checkpoint.json")),
            read(&infer_out.join("inference.jsonl")),
            read(&eval_out.join("report.json")),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoints must match byte for byte");
    assert_eq!(artifacts[0].1, artifacts[1].1, "inference records must match byte for byte");
    assert_eq!(artifacts[0].2, artifacts[1].2, "reports must match byte for byte");
}

#[test]
fn zero_learning_rate_training_leaves_parameters_at_initialization() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
          "model": {"mode": "gsteg", "rank": 1, "bandwidth": 10.0},
          "train": {
            "optimizer": "sgd_momentum",
            "learning_rate": 0.0,
            "batch_size": 4,
            "epochs": 1,
            "inference": {"passes": 2}
          },
          "synth": {
            "num_steps": 2,
            "label_sizes": [2, 2],
            "num_contexts": 1,
            "context_strength": 1.0,
            "noise_std": 0.3,
            "num_instances": 6,
            "seed": 0
          },
          "seed": 5
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = energraph(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));

    let (trained, optimizer) = io::read_checkpoint(&out_dir.join("checkpoint.json")).unwrap();
    assert!(optimizer.is_some(), "the checkpoint should carry optimizer state");

    let synth = SynthConfig {
        num_steps: 2,
        label_sizes: vec![2, 2],
        num_contexts: 1,
        context_strength: 1.0,
        noise_std: 0.3,
        num_instances: 6,
        seed: 0,
    };
    let model_config = ModelConfig {
        mode: EnergyMode::Gsteg,
        rank: 1,
        bandwidth: 10.0,
        ..ModelConfig::default()
    };
    let expected =
        EnergyModel::new(synth.spec().unwrap(), model_config, derived_seed(5, "init")).unwrap();

    let got = trained.named_tensors();
    let want = expected.named_tensors();
    assert_eq!(got.len(), want.len());
    for ((got_name, got_values), (want_name, want_values)) in got.iter().zip(&want) {
        assert_eq!(got_name, want_name);
        let same = got_values.len() == want_values.len()
            && got_values
                .iter()
                .zip(want_values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "tensor {got_name} moved despite a zero learning rate");
    }
}

#[test]
fn inference_through_files_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let spec = GraphSpec::new(2, vec![3, 2], vec![3, 2]).unwrap();
    let model_config = ModelConfig {
        mode: EnergyMode::Ueg,
        rank: 1,
        bandwidth: 10.0,
        ..ModelConfig::default()
    };
    let model = EnergyModel::new(spec.clone(), model_config, 77).unwrap();
    let checkpoint = dir.path().join("checkpoint.json");
    io::write_checkpoint(&checkpoint, &model, None).unwrap();

    let instance = ObservationInstance::new(
        spec,
        vec![
            vec![vec![0.5, -1.0, 0.25], vec![1.5, 0.0]],
            vec![vec![-0.75, 2.0, 0.125], vec![0.0, -0.5]],
        ],
        None,
    )
    .unwrap();
    let instances = dir.path().join("instances.jsonl");
    io::write_instances(&instances, std::slice::from_ref(&instance)).unwrap();

    let out_dir = dir.path().join("out");
    let out = energraph(&[
        "infer",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--instances",
        instances.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--passes",
        "2",
    ]);
    assert_eq!(code(&out), 0, "infer failed: {}", stderr(&out));

    let opts = InferenceOptions { passes: 2, ..InferenceOptions::default() };
    let q = run_mean_field(&model, &instance, &opts).unwrap();
    let expected = io::InferenceRecord {
        labels: map_labels(&q).labels,
        marginals: q.values,
    };
    let records = io::read_inference_records(&out_dir.join("inference.jsonl")).unwrap();
    assert_eq!(records, vec![expected]);
}

#[test]
fn checkpoint_and_instance_spec_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let model_config = ModelConfig {
        mode: EnergyMode::Ueg,
        rank: 1,
        bandwidth: 10.0,
        ..ModelConfig::default()
    };
    let spec = GraphSpec::new(2, vec![3, 2], vec![3, 2]).unwrap();
    let model = EnergyModel::new(spec, model_config, 1).unwrap();
    let checkpoint = dir.path().join("checkpoint.json");
    io::write_checkpoint(&checkpoint, &model, None).unwrap();

    let other_spec = GraphSpec::new(1, vec![3, 2], vec![3, 2]).unwrap();
    let instance = ObservationInstance::new(
        other_spec,
        vec![vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0]]],
        None,
    )
    .unwrap();
    let instances = dir.path().join("instances.jsonl");
    io::write_instances(&instances, std::slice::from_ref(&instance)).unwrap();

    let out = energraph(&[
        "infer",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--instances",
        instances.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint was built for"));
}

/// Two ground-truth instances and three ranked predictions: a hit at rank 1,
/// a miss at rank 2, a hit at rank 3. Recall@2 is 1/2; average precision is
/// (1/1 + 2/3) / 2 = 5/6.
fn write_detection_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let gt = dir.join("gt.jsonl");
    fs::write(
        &gt,
        concat!(
            r#"{"video":"v","triplet":[0,0,0],"score":1.0,"span":[0,2],"straj":[[0,0.0,0.0,10.0,10.0],[1,0.0,0.0,10.0,10.0]],"otraj":[[0,20.0,20.0,30.0,30.0],[1,20.0,20.0,30.0,30.0]]}"#,
            "\n",
            r#"{"video":"v","triplet":[1,1,1],"score":1.0,"span":[0,2],"straj":[[0,40.0,40.0,50.0,50.0],[1,40.0,40.0,50.0,50.0]],"otraj":[[0,60.0,60.0,70.0,70.0],[1,60.0,60.0,70.0,70.0]]}"#,
            "\n"
        ),
    )
    .unwrap();
    let preds = dir.join("preds.jsonl");
    fs::write(
        &preds,
        concat!(
            r#"{"video":"v","triplet":[0,0,0],"score":0.9,"span":[0,2],"straj":[[0,0.0,0.0,10.0,10.0],[1,0.0,0.0,10.0,10.0]],"otraj":[[0,20.0,20.0,30.0,30.0],[1,20.0,20.0,30.0,30.0]]}"#,
            "\n",
            r#"{"video":"v","triplet":[2,2,2],"score":0.8,"span":[0,2],"straj":[[0,100.0,100.0,110.0,110.0],[1,100.0,100.0,110.0,110.0]],"otraj":[[0,120.0,120.0,130.0,130.0],[1,120.0,120.0,130.0,130.0]]}"#,
            "\n",
            r#"{"video":"v","triplet":[1,1,1],"score":0.7,"span":[0,2],"straj":[[0,40.0,40.0,50.0,50.0],[1,40.0,40.0,50.0,50.0]],"otraj":[[0,60.0,60.0,70.0,70.0],[1,60.0,60.0,70.0,70.0]]}"#,
            "\n"
        ),
    )
    .unwrap();
    (preds, gt)
}

#[test]
fn detection_eval_reports_the_hand_ranking() {
    let dir = TempDir::new().unwrap();
    let (preds, gt) = write_detection_fixture(dir.path());
    let out = energraph(&[
        "eval",
        "--task",
        "detect",
        "--preds",
        preds.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--recall-at",
        "2,50",
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["recall_at"]["2"].as_f64(), Some(0.5));
    assert_eq!(report["recall_at"]["50"].as_f64(), Some(1.0));
    let map = report["map"].as_f64().unwrap();
    assert!((map - 5.0 / 6.0).abs() < 1e-12, "map was {map}");
    assert_eq!(report["per_video_ap"]["v"].as_f64(), Some(map));
}

#[test]
fn zero_shot_filter_that_covers_all_triplets_warns_and_reports_nan() {
    let dir = TempDir::new().unwrap();
    let (preds, gt) = write_detection_fixture(dir.path());
    let seen = dir.path().join("train_triplets.json");
    fs::write(&seen, "[[0,0,0],[1,1,1]]").unwrap();
    let out = energraph(&[
        "eval",
        "--task",
        "detect",
        "--preds",
        preds.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--zero-shot",
        seen.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    assert!(stderr(&out).contains("zero-shot"));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report["map"].is_null(), "NaN must render as null: {report}");
}

#[test]
fn metric_self_check_suite_passes() {
    let out = energraph(&["verify", "--suite", "metrics"]);
    assert_eq!(code(&out), 0, "verify failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"), "expected a PASS line: {text}");
    assert!(!text.contains("FAIL"), "unexpected FAIL line: {text}");
}

#[test]
fn parallel_schedule_free_energy_check_is_skipped() {
    let out = energraph(&["verify", "--suite", "freeenergy", "--schedule", "parallel"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("SKIPPED"));
}
