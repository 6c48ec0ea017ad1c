use crate::run::{results_root, RunDir};
use crate::{
    BenchArgs, Cli, Command, ConfigArgs, CurriculumArgs, EvalArgs, ExportAttnArgs, PropsArgs,
    RunArgs, TransferArgs, UsageError,
};
use anyhow::{bail, Context, Result};
use serde::Serialize;
use spectra_core::agent::AgentKind;
use spectra_core::checkpoint;
use spectra_core::config::KvConfig;
use spectra_core::env::EnvConfig;
use spectra_core::mixer::MixerKind;
use spectra_core::model::ModelConfig;
use spectra_core::nn::AttentionConfig;
use spectra_core::props::complexity::{self, Layer, RATIO_N, RATIO_PROBE, SAQA_RATIO, SA_RATIO};
use spectra_core::props::{self, suite};
use spectra_core::trainer::{self, EvalReport, RolloutOptions, TrainConfig, TrainOptions};
use spectra_core::{Error, ParamStore};
use std::path::{Path, PathBuf};

pub fn run(cli: Cli) -> Result<i32> {
    let root = results_root(cli.results_dir.as_deref());
    match cli.command {
        Command::Train(a) => train_like("train", &root, &a.run, load_run_kv(&a.run)?, None),
        Command::Curriculum(a) => curriculum(&root, a),
        Command::Transfer(a) => transfer(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::Props(a) => props_cmd(&root, a),
        Command::Bench(a) => bench(&root, a),
        Command::ExportAttn(a) => export_attn(&root, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_kv(path: &Path, overrides: &[String]) -> Result<KvConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    let mut kv = KvConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for o in overrides {
        kv.apply_override(o).map_err(|e| usage(e.to_string()))?;
    }
    Ok(kv)
}

fn load_run_kv(run: &RunArgs) -> Result<KvConfig> {
    let ConfigArgs { config, overrides } = &run.config;
    let mut kv = load_kv(config, overrides)?;
    if let Some(a) = &run.agent {
        a.parse::<AgentKind>().map_err(|e| usage(e.to_string()))?;
        kv.set("model.agent", a.as_str());
    }
    if let Some(m) = &run.mixer {
        m.parse::<MixerKind>().map_err(|e| usage(e.to_string()))?;
        kv.set("model.mixer", m.as_str());
    }
    if let Some(s) = run.seed {
        kv.set("train.seed", s.to_string());
    }
    Ok(kv)
}

/// Config errors are usage errors, except the trainer's non-scalable-mixer
/// contract which is a run failure.
fn train_config(kv: &KvConfig) -> Result<TrainConfig> {
    match TrainConfig::from_kv(kv) {
        Ok(c) => Ok(c),
        Err(e @ Error::NonScalableMixer { .. }) => Err(e.into()),
        Err(e) => Err(usage(e.to_string())),
    }
}

fn env_only(kv: &KvConfig) -> Result<EnvConfig> {
    EnvConfig::from_kv(kv, "env").map_err(|e| usage(e.to_string()))
}

#[derive(Serialize)]
struct TrainReport {
    command: String,
    seed: u64,
    agent: String,
    mixer: String,
    env_steps: usize,
    updates: usize,
    episodes: usize,
    stopped_early: bool,
    final_win_rate: Option<f64>,
    threshold: f64,
    steps_to_threshold: Option<usize>,
    stage_starts: Vec<usize>,
    stage_teams: Vec<(usize, usize)>,
    manifest_constant_across_stages: bool,
    zero_shot: Option<EvalReport>,
    eval: Option<EvalReport>,
}

fn train_like(
    command: &str,
    root: &Path,
    run: &RunArgs,
    kv: KvConfig,
    source: Option<(ParamStore, Option<EvalReport>)>,
) -> Result<i32> {
    let cfg = train_config(&kv)?;
    let run_id = run.run_id.clone().unwrap_or_else(|| {
        format!("{command}-{}-{}-seed{}", cfg.model.agent, cfg.model.mixer, cfg.seed)
    });
    let mut dir = RunDir::create(root, &run_id, command)?;
    let snapshot = dir.file("config.ini");
    std::fs::write(&snapshot, kv.to_text())?;
    dir.record("config", &snapshot);
    dir.manifest.config = kv.to_text();
    dir.manifest.resolved = serde_json::to_value(&cfg)?;
    dir.manifest.seeds = vec![cfg.seed];

    let (init, zero_shot) = match source {
        Some((s, z)) => (Some(s), z),
        None => (None, None),
    };
    let art = trainer::train(
        &cfg,
        TrainOptions {
            out_dir: Some(&dir.path),
            init,
        },
    )?;
    if let Some(p) = &art.metrics_path {
        dir.record("metrics", p);
    }
    let timing = dir.file("timing.csv");
    if timing.is_file() {
        dir.record("timing", &timing);
    }
    dir.add_checkpoints(&art.checkpoints);

    let last_env = &cfg.stages.last().expect("validated").env;
    let eval = if run.eval_episodes > 0 {
        Some(trainer::evaluate(&art.model, &art.store, last_env, run.eval_episodes, cfg.seed)?)
    } else {
        None
    };
    let report = TrainReport {
        command: command.to_string(),
        seed: cfg.seed,
        agent: cfg.model.agent.to_string(),
        mixer: cfg.model.mixer.to_string(),
        env_steps: art.env_steps,
        updates: art.updates,
        episodes: art.metrics.len(),
        stopped_early: art.stopped_early,
        final_win_rate: art.final_win_rate(),
        threshold: run.threshold,
        steps_to_threshold: art.steps_to_threshold(run.threshold, cfg.win_window),
        stage_starts: art.stage_starts.clone(),
        stage_teams: cfg.stages.iter().map(|s| (s.env.agents, s.env.enemies)).collect(),
        manifest_constant_across_stages: art.stage_manifests.windows(2).all(|w| w[0] == w[1]),
        zero_shot,
        eval,
    };
    dir.write_json("report", "report.json", &report)?;
    let path = dir.finish()?;
    println!(
        "{command}: {} env steps, {} updates, final win rate {:.3}, steps to {:.2}: {}",
        report.env_steps,
        report.updates,
        report.final_win_rate.unwrap_or(0.0),
        report.threshold,
        report
            .steps_to_threshold
            .map_or_else(|| "not reached".to_string(), |s| s.to_string()),
    );
    println!("run directory: {}", path.display());
    Ok(0)
}

/// `3x3:0.3,6x6:0.7` into `(agents, enemies, fraction)` triples.
pub fn parse_stages(spec: &str) -> Result<Vec<(usize, usize, f64)>> {
    spec.split(',')
        .map(|part| {
            let (teams, frac) = part
                .split_once(':')
                .ok_or_else(|| usage(format!("stage {part:?} is not MxE:FRACTION")))?;
            let (m, e) = parse_size(teams)?;
            let f: f64 = frac
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad stage fraction {frac:?}")))?;
            Ok((m, e, f))
        })
        .collect()
}

/// `MxN` into `(m, n)`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("size {s:?} is not MxN"));
    let (m, n) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((m.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad {what} {p:?}"))))
        .collect()
}

fn curriculum(root: &Path, a: CurriculumArgs) -> Result<i32> {
    let mut kv = load_run_kv(&a.run)?;
    let has_stages = kv.iter().any(|(k, _)| k.starts_with("stage."));
    if !has_stages {
        let stages = parse_stages(&a.stages)?;
        if stages.len() < 2 {
            return Err(usage("a curriculum needs at least two stages"));
        }
        for (i, (m, e, f)) in stages.into_iter().enumerate() {
            kv.set(format!("stage.{i}.agents"), m.to_string());
            kv.set(format!("stage.{i}.enemies"), e.to_string());
            kv.set(format!("stage.{i}.fraction"), f.to_string());
        }
    }
    train_like("curriculum", root, &a.run, kv, None)
}

fn transfer(root: &Path, a: TransferArgs) -> Result<i32> {
    let kv = load_run_kv(&a.run)?;
    let cfg = train_config(&kv)?;
    if !a.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let env = &cfg.stages[0].env;
    let (model, store) = trainer::transfer_load(&a.checkpoint, cfg.model, env)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let zero_shot = if a.zero_shot_episodes > 0 {
        let r = trainer::evaluate(&model, &store, env, a.zero_shot_episodes, cfg.seed)?;
        println!(
            "zero-shot on {}v{}: win rate {:.3} over {} episodes",
            env.agents, env.enemies, r.win_rate, r.episodes
        );
        Some(r)
    } else {
        None
    };
    train_like("transfer", root, &a.run, kv, Some((store, zero_shot)))
}

/// Model settings stored with a checkpoint, else those of the config.
fn checkpoint_model(path: &Path, kv: &KvConfig) -> Result<ModelConfig> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let (_, meta) = checkpoint::load(path)?;
    match meta.get("model") {
        Some(m) => Ok(serde_json::from_value(m.clone()).context("checkpoint model settings")?),
        None => ModelConfig::from_kv(kv, "model").map_err(|e| usage(e.to_string())),
    }
}

fn optional_kv(config: Option<&Path>, overrides: &[String]) -> Result<KvConfig> {
    match config {
        Some(p) => load_kv(p, overrides),
        None => {
            let mut kv = KvConfig::default();
            for o in overrides {
                kv.apply_override(o).map_err(|e| usage(e.to_string()))?;
            }
            Ok(kv)
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn eval(root: &Path, a: EvalArgs) -> Result<i32> {
    let kv = optional_kv(a.config.as_deref(), &a.overrides)?;
    let env = env_only(&kv)?;
    let model_cfg = checkpoint_model(&a.checkpoint, &kv)?;
    let (model, store) = trainer::transfer_load(&a.checkpoint, model_cfg, &env)?;
    let report = trainer::evaluate(&model, &store, &env, a.episodes, a.seed)?;
    let run_id = a
        .run_id
        .unwrap_or_else(|| format!("eval-{}-seed{}", stem(&a.checkpoint), a.seed));
    let mut dir = RunDir::create(root, &run_id, "eval")?;
    dir.manifest.config = kv.to_text();
    dir.manifest.resolved = serde_json::json!({
        "checkpoint": a.checkpoint,
        "model": model_cfg,
        "env": env,
        "episodes": a.episodes,
    });
    dir.manifest.seeds = vec![a.seed];
    dir.write_json("eval", "eval.json", &report)?;
    let path = dir.finish()?;
    println!(
        "eval on {}v{}: win rate {:.3} over {} episodes, mean return {:.3}",
        env.agents, env.enemies, report.win_rate, report.episodes, report.mean_return
    );
    println!("run directory: {}", path.display());
    Ok(0)
}

#[derive(Serialize)]
struct AttnRow {
    t: usize,
    agent: usize,
    head: usize,
    slot: usize,
    entity_id: usize,
    weight: f64,
}

fn export_attn(root: &Path, a: ExportAttnArgs) -> Result<i32> {
    let kv = optional_kv(a.config.as_deref(), &a.overrides)?;
    let env = env_only(&kv)?;
    let model_cfg = checkpoint_model(&a.checkpoint, &kv)?;
    if model_cfg.agent != AgentKind::Spectra {
        return Err(usage(format!(
            "export-attn needs a spectra agent, checkpoint holds {}",
            model_cfg.agent
        )));
    }
    let (model, store) = trainer::transfer_load(&a.checkpoint, model_cfg, &env)?;
    let opts = RolloutOptions {
        trace: false,
        attention: true,
    };
    let out = trainer::rollout(&model, &store, &env, a.episode_seed, 0.0, &opts)?;
    let mut rows = Vec::new();
    for rec in &out.attention {
        let (heads, slots) = rec.weights.dims();
        for head in 0..heads {
            for slot in 0..slots {
                rows.push(AttnRow {
                    t: rec.t,
                    agent: rec.agent,
                    head,
                    slot,
                    entity_id: rec.entity_ids[slot],
                    weight: rec.weights.get(head, slot),
                });
            }
        }
    }
    let run_id = a
        .run_id
        .unwrap_or_else(|| format!("attn-{}-ep{}", stem(&a.checkpoint), a.episode_seed));
    let mut dir = RunDir::create(root, &run_id, "export-attn")?;
    dir.manifest.config = kv.to_text();
    dir.manifest.resolved = serde_json::json!({
        "checkpoint": a.checkpoint,
        "model": model_cfg,
        "env": env,
    });
    dir.manifest.seeds = vec![a.episode_seed];
    let csv = dir.write_csv("attention", "attention.csv", &rows)?;
    let path = dir.finish()?;
    println!(
        "{} steps, {} weight rows written to {}",
        out.episode.len(),
        rows.len(),
        csv.display()
    );
    println!("run directory: {}", path.display());
    Ok(0)
}

#[derive(Serialize)]
struct Check {
    name: String,
    detail: String,
    passed: bool,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        detail,
        passed,
    }
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
}

fn props_cmd(root: &Path, a: PropsArgs) -> Result<i32> {
    let sizes: Vec<(usize, usize)> = a.sizes.split(',').map(parse_size).collect::<Result<_>>()?;
    if sizes.is_empty() || sizes.iter().any(|&(m, n)| m == 0 || n == 0) {
        bail!(usage("sizes need M >= 1 and N >= 1"));
    }
    let reports = props::check_propositions(a.seeds, &sizes, a.jobs)?;
    let qmix = props::check_qmix_invariance(3, a.qmix_trials)?;
    let mono = props::monotonicity_probe(MixerKind::Spectra, a.monotonicity_instances, 0)?;
    let mono_fd: Vec<_> = [MixerKind::Spectra, MixerKind::Qmix]
        .into_iter()
        .map(|k| props::monotonicity_fd(k, 200, 1))
        .collect::<spectra_core::Result<_>>()?;
    let grads = suite::gradient_suite(0)?;

    let mut checks = Vec::new();
    for r in &reports {
        checks.push(check(
            &format!("{} ({}x{})", r.proposition, r.m, r.n),
            r.passed,
            format!(
                "{} instances, max deviation {:.3e}{}",
                r.instances,
                r.max_abs_deviation,
                r.counterexample_seed
                    .map_or_else(String::new, |s| format!(", counterexample seed {s}"))
            ),
        ));
    }
    checks.push(check(
        "qmix counterexample",
        qmix.counterexample_seed.is_some(),
        format!(
            "deviation {:.3e} at seed {:?}",
            qmix.max_abs_deviation, qmix.counterexample_seed
        ),
    ));
    checks.push(check(
        "monotonicity (autodiff, spectra)",
        mono.violations == 0,
        format!(
            "{} instances, {} violations, min gradient {:.3e}",
            mono.instances, mono.violations, mono.min_gradient
        ),
    ));
    for m in &mono_fd {
        checks.push(check(
            &format!("monotonicity (finite difference, {})", m.mixer),
            m.violations == 0,
            format!("{} instances, min gradient {:.3e}", m.instances, m.min_gradient),
        ));
    }
    for g in &grads {
        checks.push(check(
            &format!("gradient {}", g.name),
            g.passed(),
            format!("rel err {:.3e} < {:.0e}", g.max_rel_err, g.tolerance),
        ));
    }

    let run_id = a.run_id.unwrap_or_else(|| format!("props-seeds{}", a.seeds));
    let mut dir = RunDir::create(root, &run_id, "props")?;
    dir.manifest.resolved = serde_json::json!({
        "sizes": sizes,
        "seeds": a.seeds,
        "jobs": a.jobs,
        "monotonicity_instances": a.monotonicity_instances,
        "qmix_trials": a.qmix_trials,
    });
    dir.manifest.seeds = (0..a.seeds).collect();
    dir.write_csv("propositions", "propositions.csv", &reports)?;
    dir.write_csv("gradients", "gradients.csv", &grads)?;
    dir.write_json(
        "report",
        "props.json",
        &serde_json::json!({
            "propositions": reports,
            "qmix": qmix,
            "monotonicity": mono,
            "monotonicity_fd": mono_fd,
            "gradients": grads,
            "checks": checks,
        }),
    )?;
    let path = dir.finish()?;
    print_checks(&checks);
    println!("run directory: {}", path.display());
    Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
}

fn bench(root: &Path, a: BenchArgs) -> Result<i32> {
    let layers: Vec<Layer> = parse_list(&a.models, "model")?;
    let ns: Vec<usize> = parse_list(&a.n, "n")?;
    let cfg = AttentionConfig::new(a.hidden, a.heads).map_err(|e| usage(e.to_string()))?;
    let mut fits = Vec::new();
    for &l in &layers {
        fits.push(complexity::complexity_fit(l, cfg, &ns).map_err(|e| usage(e.to_string()))?);
    }
    let probe = AttentionConfig::new(RATIO_PROBE.0, RATIO_PROBE.1)?;
    let mut checks = Vec::new();
    let mut probe_fits = Vec::new();
    for &l in &layers {
        let fit = complexity::complexity_fit(l, probe, &RATIO_N)?;
        let r = fit.ratio(16).expect("16 and 32 are probed");
        let (lo, hi) = match l {
            Layer::Saqa => SAQA_RATIO,
            Layer::SelfAttention => SA_RATIO,
        };
        checks.push(check(
            &format!("MAC(32)/MAC(16) {l}"),
            (lo..=hi).contains(&r),
            format!("{r:.4} in [{lo}, {hi}] at hidden {}, heads {}", probe.hidden, probe.heads),
        ));
        if l == Layer::Saqa {
            checks.push(check(
                "saqa MACs affine in n",
                fit.affine_max_residual < 1e-6,
                format!("max residual {:.3e}", fit.affine_max_residual),
            ));
        }
        probe_fits.push(fit);
    }
    let timing = complexity::inference_bench(&layers, cfg, &ns, a.samples)?;
    let median = |l: Layer, n: usize| {
        timing
            .iter()
            .find(|r| r.model == l.to_string() && r.n == n)
            .map(|r| r.median_s)
    };
    if let (Some(s), Some(t)) = (median(Layer::Saqa, 40), median(Layer::SelfAttention, 40)) {
        checks.push(check(
            "wall clock at n=40",
            s < t,
            format!("saqa median {:.3e} s, self_attention median {:.3e} s", s, t),
        ));
    }

    let run_id = a.run_id.unwrap_or_else(|| "bench".to_string());
    let mut dir = RunDir::create(root, &run_id, "bench")?;
    dir.manifest.resolved = serde_json::json!({
        "models": layers,
        "n": ns,
        "samples": a.samples,
        "hidden": a.hidden,
        "heads": a.heads,
    });
    let timing_path: PathBuf = dir.write_csv("timing", "timing.csv", &timing)?;
    dir.write_json(
        "report",
        "complexity.json",
        &serde_json::json!({
            "fits": fits,
            "ratio_probe": probe_fits,
            "checks": checks,
        }),
    )?;
    let path = dir.finish()?;
    for f in &fits {
        println!(
            "{} (hidden {}, heads {}): MACs {:?}, doubling ratios {:?}",
            f.layer, f.hidden, f.heads, f.macs, f.doubling_ratios
        );
    }
    print_checks(&checks);
    println!("timing written to {}", timing_path.display());
    println!("run directory: {}", path.display());
    Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
}
