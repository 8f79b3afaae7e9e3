use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simulmt(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulmt"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(run_dir: &Path, args: &[&str]) -> String {
    let out = simulmt(run_dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(run_dir: &Path, args: &[&str], code: i32) -> String {
    let out = simulmt(run_dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: &[&str] = &[
    "--set", "train_base.d_model=16",
    "--set", "train_base.n_enc_layers=1",
    "--set", "train_base.n_dec_layers=1",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn full_pipeline_on_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    ok(run, &["gen-data", "--size", "300", "--dev-size", "30", "--test-size", "30"]);
    for split in ["train", "dev", "test"] {
        assert!(run.join(format!("data/{split}.tsv")).exists());
        assert!(run.join(format!("data/{split}.align")).exists());
    }
    ok(run, &with(SMALL, &["train-base", "--mode", "causal", "--epochs", "2"]));
    ok(run, &with(SMALL, &["train-base", "--mode", "full", "--epochs", "1"]));
    ok(run, &["export-align"]);
    ok(run, &["export-align", "--model", "full", "--set", "paths.align_dir=align_full"]);
    let labels = ok(run, &["gen-labels", "--gamma", "0.5"]);
    assert!(labels.contains("train: 240 label matrices"), "{labels}");
    ok(run, &["adapt", "--epochs", "1"]);
    let policy = ok(run, &["train-policy", "--epochs", "2", "--d-p", "8"]);
    assert!(policy.contains("dev:"), "{policy}");

    let eval = ok(run, &["eval", "--delta", "0.6"]);
    assert!(eval.contains("BLEU") && eval.contains("AL"), "{eval}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("out/eval_test.json")).unwrap()).unwrap();
    assert_eq!(report["sentences"], 30);
    let hyp = fs::read_to_string(run.join("out/test.hyp")).unwrap();
    let delays = fs::read_to_string(run.join("out/test.delays")).unwrap();
    assert_eq!(hyp.lines().count(), 30);
    for (h, d) in hyp.lines().zip(delays.lines()) {
        assert_eq!(h.split_whitespace().count(), d.split_whitespace().count());
    }
    let trace = fs::read_to_string(run.join("out/test.trace")).unwrap();
    let first = trace.lines().next().unwrap();
    let fields: Vec<&str> = first.split(' ').collect();
    assert_eq!(fields.len(), 5, "{first}");
    assert!(fields[4] == "READ" || fields[4] == "WRITE");

    ok(run, &["decode", "--policy", "wait-k", "--wait-k", "2", "--beam-size", "2"]);
    let first_delays: Vec<usize> = fs::read_to_string(run.join("out/test.delays"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .map(|x| x.parse().unwrap())
        .collect();
    assert!(first_delays.first().is_none_or(|&g| g >= 2));

    let csv = ok(run, &["sweep", "--deltas", "0.3,0.7"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("delta,bleu,al,mean_reads,sentences"));
    assert!(lines.next().unwrap().starts_with("0.3000,"));
    assert!(run.join("out/sweep.csv").exists() && run.join("out/sweep.svg").exists());

    for stage in ["gen-data", "train-base-causal", "adapt", "train-policy", "eval", "sweep"] {
        let echoed = fs::read_to_string(run.join(format!("config/{stage}.conf"))).unwrap();
        assert!(echoed.contains("seed = 1"), "{stage}");
    }
    let echoed = fs::read_to_string(run.join("config/sweep.conf")).unwrap();
    assert!(echoed.contains("sweep.deltas = 0.3,0.7"));
}

#[test]
fn configuration_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["gen-data", "--set", "gen_data.sise=3"], 1);
    assert!(err.contains("gen_data.sise"), "{err}");
    let err = fails(dir.path(), &["gen-data", "--size", "lots"], 1);
    assert!(err.contains("gen_data.size"), "{err}");
    let err = fails(dir.path(), &["gen-labels", "--gamma", "1.5"], 1);
    assert!(err.contains("gen_labels.gamma"), "{err}");
    fails(dir.path(), &["no-such-stage"], 1);

    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 4\n# comment\nnot a setting\n").unwrap();
    let err = fails(dir.path(), &["--config", conf.to_str().unwrap(), "selftest"], 1);
    assert!(err.contains("bad.conf:3"), "{err}");
}

#[test]
fn echoed_config_reproduces_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    ok(run, &["gen-data", "--size", "120", "--dev-size", "10", "--test-size", "10", "--seed", "9"]);
    let first = fs::read(run.join("data/train.tsv")).unwrap();
    fs::remove_dir_all(run.join("data")).unwrap();
    let echoed = run.join("config/gen-data.conf");
    let copy = run.join("replay.conf");
    fs::copy(&echoed, &copy).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_simulmt"))
        .args(["--config", copy.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(run.join("data/train.tsv")).unwrap(), first);
    assert_eq!(fs::read_to_string(&echoed).unwrap(), fs::read_to_string(&copy).unwrap());
}

#[test]
fn missing_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["train-policy"], 2);
    assert!(err.contains("streaming.absm"), "{err}");
    let err = fails(dir.path(), &["train-base", "--mode", "causal"], 2);
    assert!(err.contains("train.tsv"), "{err}");
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "decode.delta = 0.7\ndecode.beam_size = 3\n").unwrap();
    let c = conf.to_str().unwrap();
    let shown = ok(dir.path(), &["--config", c, "--set", "decode.beam_size=4", "show-config"]);
    assert!(shown.contains("decode.delta = 0.7"));
    assert!(shown.contains("decode.beam_size = 4"));
    assert!(shown.contains("# write threshold of the learned policy"));
}

#[test]
fn checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["selftest"]);
    assert!(!out.contains("FAIL"), "{out}");
    let out = ok(dir.path(), &["gradcheck", "--samples", "200", "--set", "train_base.d_model=16"]);
    assert_eq!(out.lines().count(), 3, "{out}");
    let err = fails(dir.path(), &["gradcheck", "--epsilon", "0.5"], 1);
    assert!(err.contains("gradcheck.epsilon"), "{err}");
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    for stage in ["gen-data", "train-base", "adapt", "export-align", "gen-labels", "train-policy", "decode", "eval", "sweep", "gradcheck", "selftest"] {
        assert!(out.contains(stage), "{stage}");
    }
}
