use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
sources.pool_size = 2
sources.budget = 400
train.batch_steps = 200
train.minibatch_size = 50
train.update_epochs = 2
env.horizon = 100
";

fn aasc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aasc"))
        .args(args)
        .current_dir(dir)
        .env_remove("AASC_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn gen_sources(dir: &Path) -> PathBuf {
    let cfg = write_cfg(dir, "sources.cfg", "");
    ok(&aasc(&["gen-sources", "--config", cfg.to_str().unwrap(), "--out", "out", "--seed", "3"], dir));
    dir.join("out/sources/manifest.txt")
}

#[test]
fn gen_sources_writes_a_manifest_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen_sources(tmp.path());
    let text = fs::read_to_string(&manifest).unwrap();
    let first = aasc_core::SourcePool::load(&manifest).unwrap();
    assert_eq!(first.len(), 2);

    let again = tempfile::tempdir().unwrap();
    let second = gen_sources(again.path());
    assert_eq!(text, fs::read_to_string(second).unwrap());
    for i in 0..2 {
        let name = format!("out/sources/source_{i}.json");
        assert_eq!(fs::read(tmp.path().join(&name)).unwrap(), fs::read(again.path().join(&name)).unwrap());
    }
}

#[test]
fn paired_train_evaluate_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = gen_sources(dir);
    let common = format!(
        "experiment.budget = 400\nexperiment.checkpoints = 200,400\nexperiment.seeds = 0,1\nexperiment.sources = {}\n",
        manifest.display()
    );
    let aasc_cfg = write_cfg(
        dir,
        "aasc.cfg",
        &format!("{common}experiment.name = aasc\nexperiment.method = aasc\nexperiment.selection = random\nexperiment.k = 2\n"),
    );
    let mlp_cfg = write_cfg(dir, "mlp.cfg", &format!("{common}experiment.name = mlp\nexperiment.method = mlp\n"));
    for cfg in [&aasc_cfg, &mlp_cfg] {
        ok(&aasc(&["train", "--config", cfg.to_str().unwrap(), "--out", "out", "--workers", "2"], dir));
    }
    for arm in ["aasc", "mlp"] {
        for seed in ["0", "1"] {
            let run = dir.join("out/run").join(arm).join(seed);
            let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
            assert_eq!(csv.lines().count(), 3, "{arm}/{seed}");
            assert!(run.join("agent.json").is_file());
            let info = fs::read_to_string(run.join("run.txt")).unwrap();
            assert!(info.contains(&format!("run.master_seed = {seed}")), "{info}");
        }
    }

    let agent = dir.join("out/run/aasc/0/agent.json");
    let eval_cfg = write_cfg(dir, "eval.cfg", "evaluate.episodes = 3\n");
    let line = ok(&aasc(
        &["evaluate", agent.to_str().unwrap(), "--config", eval_cfg.to_str().unwrap()],
        dir,
    ));
    assert!(line.starts_with("episodes 3 "), "{line}");

    ok(&aasc(&["plot", "out/run/aasc", "out/run/mlp", "--out", "out"], dir));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/plots/manifest.json")).unwrap()).unwrap();
    let text = manifest.to_string();
    assert!(text.contains("\"aasc\"") && text.contains("\"mlp\""), "{text}");
    // The tiny horizon makes this a non-target environment.
    let svg = fs::read_to_string(dir.join("out/plots/env0_reward.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(dir.join("out/plots/env0_violations.svg").is_file());
}

#[test]
fn repeated_training_gives_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_cfg(dir, "mlp.cfg", "experiment.name = m\nexperiment.method = mlp\nexperiment.budget = 600\nexperiment.checkpoints = 600\n");
    let cfg = cfg.to_str().unwrap();
    ok(&aasc(&["train", "--config", cfg, "--seed", "9", "--out", "a"], dir));
    ok(&aasc(&["train", "--config", cfg, "--seed", "9", "--out", "b"], dir));
    let a = fs::read(dir.join("a/run/m/9/metrics.csv")).unwrap();
    let b = fs::read(dir.join("b/run/m/9/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_cfg(dir, "mlp.cfg", "experiment.name = m\nexperiment.method = mlp\nexperiment.budget = 200\nexperiment.checkpoints = 200\n");
    let out = Command::new(env!("CARGO_BIN_EXE_aasc"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--seed", "1"])
        .current_dir(dir)
        .env("AASC_OUT", dir.join("env-out"))
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.join("env-out/run/m/1/metrics.csv").is_file());
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let missing = write_cfg(dir, "missing.cfg", "experiment.method = mlp\n");
    let out = aasc(&["train", "--config", missing.to_str().unwrap()], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment.name"));

    let out = aasc(&["gen-sources", "--config", write_cfg(dir, "s.cfg", "").to_str().unwrap()], dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let no_budget = dir.join("nb.cfg");
    fs::write(&no_budget, "sources.pool_size = 2\n").unwrap();
    let out = aasc(&["gen-sources", "--config", no_budget.to_str().unwrap()], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sources.budget"));

    assert_eq!(aasc(&["plot"], dir).status.code(), Some(2));
    assert_eq!(aasc(&["frobnicate"], dir).status.code(), Some(2));
    assert_eq!(aasc(&["ablate", "colour"], dir).status.code(), Some(2));

    let no_sources = write_cfg(dir, "ns.cfg", "experiment.name = a\nexperiment.method = aasc\nexperiment.selection = random\n");
    let out = aasc(&["train", "--config", no_sources.to_str().unwrap()], dir);
    assert_ne!(out.status.code(), Some(0));

    let bad_csv = dir.join("bad/0");
    fs::create_dir_all(&bad_csv).unwrap();
    fs::write(bad_csv.join("metrics.csv"), format!("{}\n1,2,x\n", aasc_core::trainer::METRICS_HEADER)).unwrap();
    let out = aasc(&["plot", "bad"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = aasc(&["evaluate", "nope.json"], dir);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_arm_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = gen_sources(dir);
    let cfg = write_cfg(
        dir,
        "big.cfg",
        &format!(
            "experiment.name = greedy\nexperiment.method = aasc\nexperiment.selection = k_high\nexperiment.k = 5\nexperiment.sources = {}\n",
            manifest.display()
        ),
    );
    let out = aasc(&["train", "--config", cfg.to_str().unwrap(), "--out", "out"], dir);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("greedy"), "{err}");
}

#[test]
fn help_documents_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&aasc(&["--help"], tmp.path()));
    for key in ["experiment.method", "safeguard.*", "sources.pool_size"] {
        assert!(text.contains(key), "{key}");
    }
    let sub = ok(&aasc(&["train", "--help"], tmp.path()));
    for flag in ["--config", "--seed", "--out", "--workers"] {
        assert!(sub.contains(flag), "{flag}");
    }
}
