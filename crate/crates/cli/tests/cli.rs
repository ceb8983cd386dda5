use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use r2lab::config::ExperimentConfig;

const TINY: &str = r#"
[model]
hidden = [8]

[data.synth]
n_train = 120
n_test = 40
classes = 3
dim = 16

[train]
epochs = 2
eval_batch_size = 16
"#;

fn r2lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2lab")).args(args).env("R2LAB_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = r2lab(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    o
}

fn pretrain(dir: &Path, name: &str, extra: &str, seed: u64) -> PathBuf {
    let cfg = config(dir, &format!("{name}.toml"), extra);
    let out = dir.join(name);
    run_ok(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    out
}

#[test]
fn pretrain_writes_all_outputs_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(dir.path(), "run", "[reg]\nkind = \"margin\"\n", 7);
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint.bin", "checkpoint.json", "config.toml", "metrics.csv", "summary.json"]);

    let echoed: ExperimentConfig = toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.reg.kind.as_str(), "margin");
    assert_eq!(echoed.train.momentum, 0.9);
    assert_eq!(echoed.data.synth.n_train, 120);

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["phase"], "pretrain");
}

#[test]
fn repeated_pretrain_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(dir.path(), "a", "", 7);
    let b = pretrain(dir.path(), "b", "", 7);
    for f in ["metrics.csv", "checkpoint.bin", "checkpoint.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "");
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_r2lab"))
            .args(["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "2", "--out", out.to_str().unwrap()])
            .env("R2LAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn bad_thread_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_r2lab"))
        .args(["pretrain", "--seed", "1", "--out", dir.path().join("x").to_str().unwrap()])
        .env("R2LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("R2LAB_THREADS"));
}

#[test]
fn finetune_without_init_exits_2_naming_the_flag() {
    for cmd in ["qat", "compress"] {
        let o = r2lab(&[cmd, "--seed", "1", "--out", "unused"]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("--init"), "{}", stderr(&o));
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (text, field) in [("[train]\nlr = -1.0\n", "train.lr"), ("[quant]\nbitz = 2\n", "bitz"), ("[reg]\nlambda = \"x\"\n", "reg.lambda")] {
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, text).unwrap();
        let o = r2lab(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
    assert!(!out.exists(), "no outputs before validation succeeds");
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = r2lab(&["qat", "--init", dir.path().join("nope.json").to_str().unwrap(), "--seed", "1", "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn qat_and_compress_from_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let init = pretrain(dir.path(), "pre", "", 3);
    let qcfg = config(dir.path(), "q.toml", "[quant]\nbits = 2\nepochs = 1\n");
    let qout = dir.path().join("qat");
    run_ok(&["qat", "--config", qcfg.to_str().unwrap(), "--init", init.to_str().unwrap(), "--seed", "4", "--out", qout.to_str().unwrap()]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(qout.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["phase"], "qat");
    assert!(s["layers"].as_array().unwrap().iter().all(|l| l["distinct_values"].as_u64().unwrap() <= 4));

    let ccfg = config(dir.path(), "c.toml", "[palette]\nbits = 2\ndim = 2\nepochs = 1\n");
    let cout = dir.path().join("compress");
    run_ok(&["compress", "--config", ccfg.to_str().unwrap(), "--init", init.join("checkpoint.json").to_str().unwrap(), "--seed", "4", "--out", cout.to_str().unwrap()]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cout.join("summary.json")).unwrap()).unwrap();
    // 16·8 + 8·3 weights in groups of 2 at 2 bits, whole bytes per layer.
    let index = (64 * 2u64).div_ceil(8) + (12 * 2u64).div_ceil(8);
    let codebooks = 2 * 4 * 2 * 4;
    let biases = (8 + 3) * 4;
    assert_eq!(s["size_report"]["index_bytes"], index);
    assert_eq!(s["size_report"]["total_bytes"], index + codebooks + biases);
}

#[test]
fn report_on_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(dir.path(), "a", "", 1);
    let out = dir.path().join("report");
    run_ok(&["report", "--a", a.to_str().unwrap(), "--b", a.to_str().unwrap(), "--out", out.to_str().unwrap(), "--bins", "10"]);
    let table = std::fs::read_to_string(out.join("stats_table.csv")).unwrap();
    for row in table.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!((cols[5], cols[6]), ("1", "1"), "{row}");
    }
    for (layer, params) in [("fc1", 16 * 8), ("fc2", 8 * 3)] {
        let hist = std::fs::read_to_string(out.join(format!("hist_a_{layer}.txt"))).unwrap();
        assert_eq!(hist.lines().count(), 10);
        let total: usize = hist.lines().map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, params);
    }
    assert!(std::fs::read_to_string(out.join("skew.csv")).unwrap().lines().count() == 5);
    assert!(std::fs::read_to_string(out.join("layer_stats.csv")).unwrap().contains("a,fc1,128,"));
}

#[test]
fn report_rejects_mismatched_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(dir.path(), "a", "", 1);
    let b = pretrain(dir.path(), "b", "", 2);
    // Same layout, different weights: accepted.
    assert!(r2lab(&["report", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]).status.success());
    let cfg = dir.path().join("wide.toml");
    std::fs::write(&cfg, TINY.replace("hidden = [8]", "hidden = [6]")).unwrap();
    let c = dir.path().join("c");
    run_ok(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", c.to_str().unwrap()]);
    let o = r2lab(&["report", "--a", a.to_str().unwrap(), "--b", c.to_str().unwrap(), "--out", dir.path().join("r2").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("architecture mismatch"));
}

#[test]
fn verify_suites_report_per_property() {
    let o = run_ok(&["verify", "--suite", "palette"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("[PASS] palette/")));

    let t = Instant::now();
    let o = r2lab(&["verify", "--suite", "limits"]);
    assert!(t.elapsed().as_secs() < 60);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("smm_monotone_on_alpha_grid"));
    // Exit status follows the reported checks.
    assert_eq!(o.status.success(), !text.contains("[FAIL]"));
}
