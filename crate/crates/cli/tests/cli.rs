use spectra_cli::run::{RunManifest, MANIFEST_FILE, RESULTS_ENV};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[train]
total_steps = 150
batch_size = 4
buffer_capacity = 16
episodes_per_update = 2
target_update_interval = 4
seed = 3

[model]
agent = spectra
mixer = spectra
hidden = 8
heads = 2
rnn_hidden = 8
mixer_embed = 8
mixer_heads = 2

[env]
agents = 2
enemies = 2
max_steps = 10
";

fn spectra(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectra"))
        .arg("--results-dir")
        .arg(root)
        .args(args)
        .output()
        .expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.ini");
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(run: &Path) -> RunManifest {
    RunManifest::load(&run.join(MANIFEST_FILE)).unwrap()
}

/// Train the tiny config and return the run directory.
fn tiny_run(root: &Path, id: &str) -> PathBuf {
    let cfg = write_config(root, TINY);
    let out = spectra(root, &["train", "--config", cfg.to_str().unwrap(), "--run-id", id]);
    assert!(out.status.success(), "{}", stderr(&out));
    root.join(id)
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spectra(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(spectra(dir.path(), &["train", "--config", "missing.ini"]).status.code(), Some(2));
    assert_eq!(spectra(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    assert_eq!(spectra(dir.path(), &["train", "--config", c, "--mixer", "nope"]).status.code(), Some(2));
    assert_eq!(spectra(dir.path(), &["train", "--config", c, "--set", "train.nope=1"]).status.code(), Some(2));
    assert_eq!(spectra(dir.path(), &["curriculum", "--config", c, "--stages", "3x3"]).status.code(), Some(2));
}

#[test]
fn qmix_curriculum_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = spectra(
        dir.path(),
        &["curriculum", "--config", cfg.to_str().unwrap(), "--mixer", "qmix", "--stages", "2x2:0.5,3x3:0.5"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("non-scalable mixer"), "{}", stderr(&out));
}

#[test]
fn train_writes_metrics_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path(), "t1");
    let m = manifest(&run);
    assert_eq!(m.command, "train");
    assert_eq!(m.seeds, vec![3]);
    assert_eq!(m.resolved["seed"], 3);
    for key in ["metrics", "config", "report"] {
        assert!(run.join(&m.files[key]).is_file(), "{key}");
    }
    let metrics = std::fs::read_to_string(run.join(&m.files["metrics"])).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("env_step,episode_return,win_rate,loss,epsilon,wall_clock_s"));
    assert!(lines.count() > 0);
    assert!(m.checkpoints.len() >= 2);
    for c in &m.checkpoints {
        assert!(run.join(c.path.as_ref().unwrap()).is_file());
        assert_eq!(c.sha256.len(), 64);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["env_steps"].as_u64().unwrap() >= 150);
    // The snapshot reruns to the same metrics.
    let again = spectra(dir.path(), &["train", "--config", run.join("config.ini").to_str().unwrap(), "--run-id", "t2"]);
    assert!(again.status.success());
    assert_eq!(metrics, std::fs::read_to_string(dir.path().join("t2/metrics.csv")).unwrap());
}

#[test]
fn results_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let root = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_spectra"))
        .env(RESULTS_ENV, &root)
        .args(["train", "--config", cfg.to_str().unwrap(), "--set", "train.total_steps=0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let run = root.join("train-spectra-spectra-seed3");
    assert!(run.join(MANIFEST_FILE).is_file());
}

#[test]
fn eval_and_attention_export_read_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path(), "src");
    let m = manifest(&run);
    let ckpt = run.join(m.checkpoints.last().unwrap().path.as_ref().unwrap());
    let ck = ckpt.to_str().unwrap();
    let out = spectra(
        dir.path(),
        &["eval", "--checkpoint", ck, "--episodes", "4", "--set", "env.agents=3", "--set", "env.enemies=4", "--run-id", "ev"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("eval on 3v4"));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["episodes"], 4);

    let out = spectra(
        dir.path(),
        &["export-attn", "--checkpoint", ck, "--episode-seed", "5", "--set", "env.agents=2", "--set", "env.enemies=2", "--run-id", "at"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.path().join("at/attention.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["t", "agent", "head", "slot", "entity_id", "weight"]);
    let mut sums = std::collections::BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let key = (rec[0].to_string(), rec[1].to_string(), rec[2].to_string());
        *sums.entry(key).or_insert(0.0) += rec[5].parse::<f64>().unwrap();
    }
    assert!(!sums.is_empty());
    assert!(sums.values().all(|s: &f64| (s - 1.0).abs() < 1e-9));

    assert_eq!(spectra(dir.path(), &["eval", "--checkpoint", "nowhere.ckpt"]).status.code(), Some(2));
}

#[test]
fn transfer_fine_tunes_on_a_larger_team() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path(), "src");
    let m = manifest(&run);
    let ckpt = run.join(m.checkpoints.last().unwrap().path.as_ref().unwrap());
    let cfg = write_config(dir.path(), TINY);
    let out = spectra(
        dir.path(),
        &[
            "transfer", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
            "--set", "env.agents=4", "--set", "env.enemies=4", "--zero-shot-episodes", "3", "--run-id", "ft",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("zero-shot on 4v4"));
    let ft = manifest(&dir.path().join("ft"));
    // Fine-tuning starts from the source parameters.
    assert_eq!(ft.checkpoints[0].sha256, m.checkpoints.last().unwrap().sha256);

    let wider = spectra(
        dir.path(),
        &["transfer", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--set", "model.hidden=16"],
    );
    assert_eq!(wider.status.code(), Some(1));
    assert!(stderr(&wider).contains("manifest"), "{}", stderr(&wider));
}

#[test]
fn curriculum_reports_constant_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = spectra(
        dir.path(),
        &["curriculum", "--config", cfg.to_str().unwrap(), "--stages", "2x2:0.4,4x4:0.6", "--run-id", "cl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cl/report.json")).unwrap()).unwrap();
    assert_eq!(report["manifest_constant_across_stages"], true);
    assert_eq!(report["stage_teams"], serde_json::json!([[2, 2], [4, 4]]));
}

#[test]
fn props_and_bench_pass_at_small_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = spectra(
        dir.path(),
        &["props", "--seeds", "2", "--sizes", "2x2,3x3", "--monotonicity-instances", "20", "--run-id", "p"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
    assert!(dir.path().join("p/propositions.csv").is_file());
    assert!(dir.path().join("p/gradients.csv").is_file());

    let out = spectra(
        dir.path(),
        &["bench", "--n", "5,10,20,40", "--samples", "30", "--hidden", "16", "--heads", "2", "--run-id", "b"],
    );
    assert!(stdout(&out).contains("MAC(32)/MAC(16) saqa"), "{}", stdout(&out));
    let mut rdr = csv::Reader::from_path(dir.path().join("b/timing.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["model", "n", "samples", "median_s", "q1_s", "q3_s", "iqr_s"]);
    assert_eq!(rdr.records().count(), 8);
    assert_eq!(spectra(dir.path(), &["bench", "--n", "5,10"]).status.code(), Some(2));
}
