use std::path::Path;
use std::process::Command;

use emberish::cli::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emberish"))
}

fn dir_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn small_run(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = [
        "emberish",
        "--data-dir",
        &dir_arg(dir),
        "--seed",
        "5",
        "--hash-dim",
        "1024",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(["--embedding-dim", "16", "--epochs", "2", "--learning-rate", "0.001"].map(String::from));
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(run(["emberish", "frobnicate"]), 1);
    assert_eq!(run(["emberish", "--data-dir", "/tmp", "train", "--bogus"]), 1);
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(["emberish", "--help"]), 0);
}

#[test]
fn missing_data_dir_is_a_validation_error() {
    let status = bin().env_remove("EMBERISH_DATA_DIR").arg("train").status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn train_without_inputs_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(small_run(dir.path(), &["train"])), 1);
}

#[test]
fn invalid_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(small_run(dir.path(), &["--left-size", "0", "generate"])), 1);
    assert_eq!(run(small_run(dir.path(), &["--sampler", "psychic", "generate"])), 1);
}

#[test]
fn config_file_with_unknown_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"data_dir": "{}", "colour": 3}}"#, dir_arg(dir.path())),
    )
    .unwrap();
    assert_eq!(run(["emberish", "--config", cfg.to_str().unwrap(), "generate"]), 1);
}

#[test]
fn end_to_end_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(small_run(d, &["generate", "--rows", "40", "--copies", "2"])), 0);
    assert_eq!(run(small_run(d, &["train"])), 0);
    assert_eq!(run(small_run(d, &["join"])), 0);
    assert_eq!(run(small_run(d, &["evaluate", "--ks", "1,5"])), 0);
    assert_eq!(run(small_run(d, &["evaluate", "--compare", "--ks", "10"])), 0);
    for name in [
        "base.csv",
        "aux.csv",
        "supervision.csv",
        "truth_train.csv",
        "truth_test.csv",
        "model.bin",
        "loss_trace.csv",
        "embeddings_base.bin",
        "embeddings_aux.bin",
        "result.csv",
        "metrics.csv",
        "manifest_generate.json",
        "manifest_train.json",
        "manifest_join.json",
        "manifest_evaluate.json",
    ] {
        assert!(d.join(name).exists(), "{name} missing");
    }
    let trace = std::fs::read_to_string(d.join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("stage,epoch,loss\n"));
    assert_eq!(trace.lines().filter(|l| l.starts_with("pretrain,")).count(), 1);
    assert_eq!(trace.lines().filter(|l| l.starts_with("train,")).count(), 2);

    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    for method in ["BM25", "J-WS", "untrained-encoder", "trained-encoder"] {
        assert!(
            metrics.lines().any(|l| l.starts_with(&format!("{method},10,"))),
            "{method} row missing:\n{metrics}"
        );
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("manifest_join.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "join");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn separate_encoders_write_two_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(small_run(d, &["generate", "--rows", "30", "--copies", "2"])), 0);
    assert_eq!(run(small_run(d, &["--num-encoders", "2", "--no-pretrain", "train"])), 0);
    assert!(d.join("model_aux.bin").exists());
    let dump = d.join("sentences.jsonl");
    let args = [
        "--num-encoders",
        "2",
        "join",
        "--both-directions",
        "--dump-sentences",
        dump.to_str().unwrap(),
    ];
    assert_eq!(run(small_run(d, &args)), 0);
    let lines = std::fs::read_to_string(&dump).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["text"].as_str().unwrap().contains("[SEP]"));
}

#[test]
fn baseline_join_and_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(small_run(d, &["generate", "--rows", "30", "--copies", "2"])), 0);
    assert_eq!(run(small_run(d, &["join", "--baseline", "BM25"])), 0);
    let result = std::fs::read_to_string(d.join("result.csv")).unwrap();
    assert!(result.starts_with("base_id,aux_id,rank,score"));

    assert_eq!(
        run(small_run(d, &["join", "--baseline", "JK-WS"])),
        1,
        "key column required"
    );
    assert_eq!(
        run(small_run(d, &["join", "--baseline", "LD", "--key-column", "Title"])),
        0
    );

    let spec = d.join("q.sql");
    std::fs::write(
        &spec,
        "base LEFT KEYLESS JOIN aux LEFT SIZE 1 RIGHT SIZE 3 USING supervision;",
    )
    .unwrap();
    assert_eq!(
        run(small_run(
            d,
            &["join", "--spec", spec.to_str().unwrap(), "--baseline", "J-WS"]
        )),
        0
    );
    std::fs::write(&spec, "base SIDEWAYS KEYLESS JOIN aux").unwrap();
    assert_eq!(
        run(small_run(
            d,
            &["join", "--spec", spec.to_str().unwrap(), "--baseline", "J-WS"]
        )),
        1
    );
}

#[test]
fn pipeline_chain_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(small_run(d, &["generate", "--rows", "30", "--copies", "2"])), 0);
    assert_eq!(run(small_run(d, &["--no-pretrain", "train"])), 0);
    let labels = d.join("labels.csv");
    let aux = std::fs::read_to_string(d.join("aux.csv")).unwrap();
    let mut text = String::from("id,score\n");
    for (i, line) in aux.lines().skip(1).enumerate() {
        let id = line.split(',').next().unwrap();
        text.push_str(&format!("{id},{}\n", i % 7));
    }
    std::fs::write(&labels, text).unwrap();
    let chain = d.join("chain.sql");
    std::fs::write(
        &chain,
        "base LEFT KEYLESS JOIN aux LEFT SIZE 1 RIGHT SIZE 2 USING supervision;\n\
         aux LEFT KEYLESS JOIN aux LEFT SIZE 1 RIGHT SIZE 2 USING supervision;\n",
    )
    .unwrap();
    let args = small_run(
        d,
        &[
            "pipeline",
            "--chain",
            chain.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--label-column",
            "score",
            "--ks",
            "1,2",
        ],
    );
    assert_eq!(run(args), 0);
    let result = std::fs::read_to_string(d.join("pipeline_result.csv")).unwrap();
    assert!(result.lines().next().unwrap().ends_with(",path"));
    let aggregates = std::fs::read_to_string(d.join("aggregates.csv")).unwrap();
    assert!(aggregates.starts_with("base_id,k,prediction\n"));
    assert!(aggregates.lines().count() > 1);

    std::fs::write(
        &chain,
        "base LEFT KEYLESS JOIN aux LEFT SIZE 1 RIGHT SIZE 2 USING s;\nbase LEFT KEYLESS JOIN aux LEFT SIZE 1 RIGHT SIZE 2 USING s;\n",
    )
    .unwrap();
    assert_eq!(run(small_run(d, &["pipeline", "--chain", chain.to_str().unwrap()])), 1);
}

#[test]
fn binary_reports_runtime_errors_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(small_run(d, &["generate", "--rows", "20", "--copies", "2"])), 0);
    // a directory in place of the model file is an I/O failure
    std::fs::create_dir(d.join("model.bin")).unwrap();
    let status = bin().args(&small_run(d, &["join"])[1..]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
