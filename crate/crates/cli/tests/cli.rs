use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctpp::encoder::Horizon;
use ctpp::events::{interval_stats, load_jsonl};
use ctpp::kernel::KernelMode;
use ctpp::model::{HorizonUnit, Model, ModelConfig};
use ctpp::nn::Tensor;
use tempfile::TempDir;

fn ctpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctpp"))
        .args(args)
        .env_remove("CTPP_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctpp(args);
    assert!(
        out.status.success(),
        "ctpp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ctpp(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn poisson(dir: &Path, name: &str, seed: u64, n: usize) {
    let out = dir.join(name);
    ok(&[
        "synth",
        "poisson",
        "--rate",
        "1",
        "--len",
        "12",
        "--n-seqs",
        &n.to_string(),
        "--marks",
        "0.6,0.4",
        "--seed",
        &seed.to_string(),
        "--out",
        p(&out),
    ]);
}

fn tiny_run(dir: &Path, extra: &str) -> std::path::PathBuf {
    poisson(dir, "train.jsonl", 1, 16);
    poisson(dir, "valid.jsonl", 2, 8);
    poisson(dir, "test.jsonl", 3, 8);
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\nnum_marks = 2\ntime_scale = \"auto\"\n\n[model]\ndim = 4\nhidden = 4\nkernel_hidden = [4]\ncomponents = 2\n{extra}\n[train]\nmax_epochs = 2\nbatch_size = 4\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = ok(&["synth", "hawkes", "--mu", "0.5", "--alpha", "0.8", "--decay", "1", "--horizon", "20", "--seed", "4"]);
    let b = ok(&["synth", "hawkes", "--mu", "0.5", "--alpha", "0.8", "--decay", "1", "--horizon", "20", "--seed", "4"]);
    let c = ok(&["synth", "hawkes", "--mu", "0.5", "--alpha", "0.8", "--decay", "1", "--horizon", "20", "--seed", "5"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 100);
}

#[test]
fn synth_rejects_invalid_processes() {
    assert_eq!(code(&["synth", "hawkes", "--mu", "0.5", "--alpha", "1.0", "--decay", "1", "--horizon", "5"]), 2);
    assert_eq!(code(&["synth", "poisson", "--rate", "-1", "--len", "5"]), 2);
    assert_eq!(code(&["synth", "poisson", "--rate", "1", "--len", "5", "--marks", "0.5,0.6"]), 2);
    assert_eq!(code(&["synth", "poisson", "--rate", "1"]), 2);
}

#[test]
fn stats_match_library() {
    let dir = TempDir::new().unwrap();
    poisson(dir.path(), "d.jsonl", 9, 20);
    let text = ok(&["stats", "--data", p(&dir.path().join("d.jsonl")), "--num-marks", "2"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let seqs = load_jsonl(dir.path().join("d.jsonl"), 2, 256).unwrap();
    let expected = interval_stats(&seqs).unwrap();
    assert_eq!(v["delta"].as_f64().unwrap(), expected.delta);
    assert_eq!(v["sequences"].as_u64().unwrap(), 20);
    assert_eq!(v["events"].as_u64().unwrap(), 240);
    assert_eq!(code(&["stats", "--data", p(&dir.path().join("d.jsonl")), "--num-marks", "1"]), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_run(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", p(&cfg), "--out-dir", p(&a)]);
    ok(&["train", "--config", p(&cfg), "--out-dir", p(&b)]);
    for f in ["checkpoint.json", "history.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,val_loss,lr");
    assert_eq!(history.lines().count(), 3);

    let c = dir.path().join("c");
    ok(&["train", "--config", p(&a.join("config.toml")), "--out-dir", p(&c)]);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn ablation_drops_the_local_encoder() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_run(dir.path(), "");
    let out = dir.path().join("out");
    ok(&["train", "--config", p(&cfg), "--ablate-local", "--out-dir", p(&out)]);
    let model = Model::load(out.join("checkpoint.json")).unwrap();
    assert_eq!(model.config.layers, 0);
    assert!(!model.has_kernels());
    assert_eq!(code(&["dump-kernel", "--checkpoint", p(&out.join("checkpoint.json"))]), 2);
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_run(dir.path(), "");
    let env_dir = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_ctpp"))
        .args(["train", "--config", p(&cfg), "--max-epochs", "1"])
        .env("CTPP_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("checkpoint.json").exists());
}

#[test]
fn divergence_exits_with_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_run(dir.path(), "mode = \"prediction\"\n");
    let text = fs::read_to_string(&cfg).unwrap().replace("[train]\n", "[train]\nlr = 1e8\ngrad_clip = 1e300\n");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&["train", "--config", p(&cfg), "--max-epochs", "20", "--out-dir", p(&out)]), 3);
    assert!(Model::load(out.join("checkpoint.json")).is_ok());
}

#[test]
fn eval_report_and_mode_guard() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_run(dir.path(), "");
    let out = dir.path().join("out");
    ok(&["train", "--config", p(&cfg), "--out-dir", p(&out)]);
    let ckpt = out.join("checkpoint.json");
    let report = ok(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--split", "test"]);
    assert!(report.contains("time_nll_original_units"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics-test.json")).unwrap()).unwrap();
    for key in ["nll", "mark_nll", "time_nll", "time_nll_original_units", "accuracy", "time_scale", "events"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["events"].as_u64().unwrap(), 8 * 11);

    assert_eq!(code(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--expect", "prediction"]), 2);
    ok(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--expect", "probabilistic"]);

    let preds = ok(&["predict", "--checkpoint", p(&ckpt), "--data", p(&dir.path().join("test.jsonl"))]);
    assert_eq!(preds.lines().count(), 8);
    let seqs = load_jsonl(dir.path().join("test.jsonl"), 2, 256).unwrap();
    for (line, seq) in preds.lines().zip(&seqs) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["time"].as_f64().unwrap() > seq.times().last().unwrap());
    }
}

/// With a history-free model, scoring raw data with a scaled checkpoint must
/// match an unscaled checkpoint whose log-normal locations absorb the scale.
#[test]
fn original_units_follow_change_of_variables() {
    let dir = TempDir::new().unwrap();
    poisson(dir.path(), "d.jsonl", 5, 10);
    let s: f64 = 2.5;
    let cfg = ModelConfig {
        num_marks: 2,
        dim: 4,
        hidden: 4,
        layers: 0,
        components: 3,
        frozen_encoder: true,
        ..ModelConfig::default()
    };
    let mut scaled = Model::new(cfg.clone(), 3).unwrap();
    let b = scaled.store.id("dist.mu.bias").unwrap();
    scaled
        .store
        .set(b, Tensor::row_vector(&[0.3, -0.2, 1.1]))
        .unwrap();
    scaled.time_scale = s;
    let mut raw = Model::new(cfg, 3).unwrap();
    raw.store = scaled.store.clone();
    raw.store
        .set(b, Tensor::row_vector(&[0.3 - s.ln(), -0.2 - s.ln(), 1.1 - s.ln()]))
        .unwrap();
    let (a, r) = (dir.path().join("scaled.json"), dir.path().join("raw.json"));
    scaled.save(&a).unwrap();
    raw.save(&r).unwrap();

    let data = dir.path().join("d.jsonl");
    let (ja, jr) = (dir.path().join("a.json"), dir.path().join("r.json"));
    ok(&["eval", "--checkpoint", p(&a), "--data", p(&data), "--json", p(&ja)]);
    ok(&["eval", "--checkpoint", p(&r), "--data", p(&data), "--json", p(&jr)]);
    let read = |f: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(f).unwrap()).unwrap() };
    let (va, vr) = (read(&ja), read(&jr));
    let orig = va["time_nll_original_units"].as_f64().unwrap();
    let direct = vr["time_nll"].as_f64().unwrap();
    assert!((orig - direct).abs() < 1e-10, "{orig} vs {direct}");
    assert!((va["time_nll"].as_f64().unwrap() - s.ln() - orig).abs() < 1e-12);
}

#[test]
fn gradcheck_passes_and_catches_broken_gradients() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("gradcheck passed"));
    assert!(out.contains("prediction kernel"));

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = 1\ncorrupt_gradient = true\n").unwrap();
    let res = ctpp(&["gradcheck", "--config", p(&bad)]);
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("kernel"), "{stderr}");
    assert!(!stderr.contains("gru"), "{stderr}");

    fs::write(&bad, "dim = 64\n").unwrap();
    assert_eq!(code(&["gradcheck", "--config", p(&bad)]), 2);
}

fn kernel_checkpoint(dir: &Path, mode: KernelMode, dim: usize, hidden: &[usize], horizon: Horizon) -> (Model, std::path::PathBuf) {
    let cfg = ModelConfig {
        num_marks: 2,
        dim,
        hidden: 4,
        layers: 1,
        horizons: vec![horizon],
        horizon_unit: HorizonUnit::Absolute,
        kernel_hidden: hidden.to_vec(),
        kernel_mode: mode,
        components: 2,
        omega0: 3.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 1).unwrap();
    let path = dir.join("k.json");
    model.save(&path).unwrap();
    (model, path)
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "layer,channel,tau,row,col,value");
    lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn dump_kernel_grid_layout() {
    let dir = TempDir::new().unwrap();
    let (_, path) = kernel_checkpoint(dir.path(), KernelMode::Depthwise, 2, &[4, 4], Horizon::Finite(2.0));
    let rows = csv_rows(&ok(&["dump-kernel", "--checkpoint", p(&path), "--grid", "100"]));
    assert_eq!(rows.len(), 200);
    assert_eq!(rows[0][2], 0.0);
    assert_eq!(rows[199][2], 2.0);

    let (_, path) = kernel_checkpoint(dir.path(), KernelMode::Full, 3, &[4], Horizon::Finite(1.0));
    assert_eq!(csv_rows(&ok(&["dump-kernel", "--checkpoint", p(&path), "--grid", "10"])).len(), 90);

    let (_, path) = kernel_checkpoint(dir.path(), KernelMode::Full, 2, &[4], Horizon::Infinite);
    assert_eq!(code(&["dump-kernel", "--checkpoint", p(&path)]), 2);
    let rows = csv_rows(&ok(&["dump-kernel", "--checkpoint", p(&path), "--grid", "5", "--tau-max", "4"]));
    assert_eq!(rows.last().unwrap()[2], 4.0);
}

#[test]
fn dump_kernel_values() {
    let dir = TempDir::new().unwrap();
    let (mut model, path) = kernel_checkpoint(dir.path(), KernelMode::Depthwise, 1, &[1], Horizon::Finite(3.0));
    let set = |m: &mut Model, name: &str, v: f64| {
        let id = m.store.id(name).unwrap();
        m.store.set(id, Tensor::scalar(v)).unwrap();
    };
    // one hidden unit sin(3τ) passed straight through
    set(&mut model, "local.0.channel.0.siren.0.weight", 1.0);
    set(&mut model, "local.0.channel.0.siren.0.bias", 0.0);
    set(&mut model, "local.0.channel.0.siren.1.weight", 1.0);
    set(&mut model, "local.0.channel.0.siren.1.bias", 0.0);
    model.save(&path).unwrap();
    let rows = csv_rows(&ok(&["dump-kernel", "--checkpoint", p(&path), "--grid", "31"]));
    assert_eq!(rows.len(), 31);
    for r in &rows {
        assert!((r[5] - (3.0 * r[2]).sin()).abs() < 1e-12, "{r:?}");
    }

    set(&mut model, "local.0.channel.0.siren.1.weight", 0.0);
    model.save(&path).unwrap();
    let rows = csv_rows(&ok(&["dump-kernel", "--checkpoint", p(&path), "--grid", "7"]));
    assert!(rows.iter().all(|r| r[5] == 0.0));
}

#[test]
fn print_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, ok(&["print-config"])).unwrap();
    let gc = dir.path().join("g.toml");
    fs::write(&gc, ok(&["print-config", "--gradcheck"]).replace("seeds = 5", "seeds = 1")).unwrap();
    ok(&["gradcheck", "--config", p(&gc)]);
    assert!(fs::read_to_string(&cfg).unwrap().contains("[model]"));
}
