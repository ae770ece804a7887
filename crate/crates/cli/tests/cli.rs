use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfp_core::checkpoint;
use lfp_core::network::ActivationKind;
use lfp_core::Network;

const HEADER: &str = "epoch,split,accuracy,weighted_accuracy,criterion_value,wall_clock_s,dead_neuron_fraction";

fn lfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfp"))
        .args(args)
        .env("LFP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const BLOBS: &str = r#"
seed = 4
[model]
kind = "mlp"
hidden = [32, 16]
[dataset]
name = "blobs"
[train]
lr = 1.0
momentum = 0.95
epochs = 10
"#;

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Metrics rows with the wall-clock column removed.
fn stable_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(5);
            f.join(",")
        })
        .collect()
}

#[test]
fn train_writes_metrics_checkpoint_and_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "blobs.toml", BLOBS);
    let out = tmp.path().join("run");
    let o = lfp(&["train", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.iter().filter(|l| l.contains(",train,")).count(), 10);
    assert_eq!(lines.iter().filter(|l| l.contains(",test,")).count(), 1);
    assert!(out.join("model.toml").exists() && out.join("model.bin").exists());

    // the effective config reproduces the run
    let again = tmp.path().join("again");
    let eff = out.join("effective_config.toml");
    let o = lfp(&["train", "--config", path_str(&eff), "--out", path_str(&again)]);
    assert!(o.status.success());
    let metrics2 = fs::read_to_string(again.join("metrics.csv")).unwrap();
    assert_eq!(stable_rows(&metrics), stable_rows(&metrics2));
    assert_eq!(
        fs::read(out.join("model.bin")).unwrap(),
        fs::read(again.join("model.bin")).unwrap()
    );
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &BLOBS.replace("epochs = 10", "epochs = 0"));
    let out = tmp.path().join("run");
    let o = lfp(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", "9"]);
    assert!(o.status.success());
    let saved = checkpoint::load(&out.join("model.toml")).unwrap();
    assert_eq!(saved.seed, Some(9));
    let init = Network::mlp(2, &[32, 16], 2, ActivationKind::Relu, 9).unwrap();
    assert_eq!(saved.network, init);
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "u.toml", &format!("{BLOBS}\nshuffle = true\n"));
    let bad_lr = write_config(tmp.path(), "lr.toml", &BLOBS.replace("lr = 1.0", "lr = -1.0"));
    let snn = write_config(
        tmp.path(),
        "snn.toml",
        &format!("{BLOBS}\n[snn]\nsteps = 0\nbeta = 0.9\nthreshold = 1.0\n"),
    );
    for (cmd, cfg) in [("train", &unknown), ("train", &bad_lr), ("snn-train", &snn)] {
        let o = lfp(&[cmd, "--config", path_str(cfg), "--out", path_str(&tmp.path().join("o"))]);
        assert_eq!(o.status.code(), Some(2), "{cmd} {}", cfg.display());
    }
}

#[test]
fn divergence_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let body = BLOBS
        .replace("lr = 1.0", "lr = 1e200")
        .replace("[train]", "[train]\ntrainer = \"grad\"");
    let cfg = write_config(tmp.path(), "d.toml", &body);
    let o = lfp(&["train", "--config", path_str(&cfg), "--out", path_str(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn warnings_for_unconverging_reward_and_spikes_without_surrogate() {
    let tmp = tempfile::tempdir().unwrap();
    let fp = write_config(
        tmp.path(),
        "fp.toml",
        &BLOBS.replace("epochs = 10", "epochs = 1\nreward = \"false_positive\""),
    );
    let o = lfp(&["train", "--config", path_str(&fp), "--out", path_str(&tmp.path().join("a"))]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no convergence mechanism"));

    let snn = write_config(
        tmp.path(),
        "snn.toml",
        &(BLOBS.replace("epochs = 10", "epochs = 1\ntrainer = \"grad\"")
            + "\n[snn]\nsteps = 3\nbeta = 0.9\nthreshold = 1.0\n"),
    );
    let o = lfp(&["snn-train", "--config", path_str(&snn), "--out", path_str(&tmp.path().join("b"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("without a surrogate"));
}

#[test]
fn snn_train_runs_and_eval_reads_its_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let body = BLOBS.replace("epochs = 10", "epochs = 2\nnormalize_between_layers = true\nlr = 0.1")
        .replace("lr = 1.0\n", "")
        + "\n[snn]\nsteps = 5\nbeta = 0.9\nthreshold = 1.0\n";
    let cfg = write_config(tmp.path(), "snn.toml", &body);
    let out = tmp.path().join("s");
    let o = lfp(&["snn-train", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(HEADER));
    assert_eq!(metrics.lines().count(), 4);

    let ev = tmp.path().join("e");
    let ck = out.join("model.toml");
    let o = lfp(&["eval", "--config", path_str(&cfg), "--checkpoint", path_str(&ck), "--out", path_str(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let test_line = metrics.lines().last().unwrap().to_string();
    let eval_line = fs::read_to_string(ev.join("eval.csv")).unwrap().lines().nth(1).unwrap().to_string();
    // same accuracy on the same test split
    assert_eq!(test_line.split(',').nth(2), eval_line.split(',').nth(2));
}

#[test]
fn prune_sweep_and_sparsity_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "blobs.toml", BLOBS);
    let out = tmp.path().join("run");
    assert!(lfp(&["train", "--config", path_str(&cfg), "--out", path_str(&out)]).status.success());
    let ck = out.join("model.toml");

    let pr = tmp.path().join("prune");
    let o = lfp(&["prune", "--config", path_str(&cfg), "--checkpoint", path_str(&ck), "--out", path_str(&pr)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(pr.join("prune.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);

    // rate 0 reproduces the plain evaluation
    let ev = tmp.path().join("eval");
    assert!(lfp(&["eval", "--config", path_str(&cfg), "--checkpoint", path_str(&ck), "--out", path_str(&ev)])
        .status
        .success());
    let eval_acc: f64 = fs::read_to_string(ev.join("eval.csv")).unwrap().lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let rate0_acc: f64 = rows[0].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(eval_acc, rate0_acc);

    let sp = tmp.path().join("sparsity");
    assert!(lfp(&["sparsity", "--checkpoint", path_str(&ck), "--out", path_str(&sp)]).status.success());
    let text = fs::read_to_string(sp.join("sparsity.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("layer,p0,p25,p50,p75,p100,gini"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn verify_writes_a_passing_json_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = lfp(&["verify", "--suite", "theorem1", "--instances", "10", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report[0]["suite"], "theorem1");
    assert_eq!(report[0]["instances"], 10);
    assert_eq!(report[0]["failures"].as_array().unwrap().len(), 0);

    let o = lfp(&["verify", "--suite", "nope", "--out", path_str(&out)]);
    assert!(!o.status.success());
}
