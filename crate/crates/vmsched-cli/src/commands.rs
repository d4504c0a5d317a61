//! Subcommand implementations. Each writes its artifacts under `--out` and
//! returns its in-memory result so integration tests can call commands
//! directly.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::Rng;
use serde::Serialize;
use vmsched::agent::{
    load_checkpoint, AgentConfig, Checkpoint, CvdPolicy, EpochLog, FlatPolicy, PolicyKind,
    TrainConfig, Trainer, ValueInput,
};
use vmsched::metrics::{
    aggregate, format_curve_point, format_log_row, format_table_row, learning_curve, RunSummary,
    TableRow, CURVE_HEADER, TABLE_HEADER, TRAIN_LOG_HEADER,
};
use vmsched::sim::{
    run_episode, BestFitPolicy, EpisodeResult, FirstFitPolicy, Policy, RandomPolicy,
    SurrogatePolicy,
};
use vmsched::trace::{generate_trace, save_trace, Catalog, ScenarioConfig, ScenarioMode};

use crate::config::ExperimentConfig;
use crate::{AblateArgs, CliError, CommonArgs, CompareArgs, EvalArgs, GenTraceArgs, TrainArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_mode(name: &str) -> Result<ScenarioMode, CliError> {
    match name {
        "non_expansion" => Ok(ScenarioMode::NonExpansion),
        "expansion" => Ok(ScenarioMode::Expansion),
        other => Err(CliError::UnknownMode {
            name: other.to_string(),
        }),
    }
}

/// Loads the config file and applies the shared command-line overrides. The
/// master seed is pushed into the agent config so one flag controls all
/// randomness.
fn resolve(common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.pms {
        cfg.scenario.n_pms_initial = n;
    }
    if let Some(w) = common.warm_start {
        cfg.scenario.warm_start_ratio = w;
    }
    if let Some(m) = &common.mode {
        cfg.scenario.mode = parse_mode(m)?;
    }
    if let Some(l) = common.trace_length {
        cfg.trace.length = l;
    }
    cfg.agent.seed = cfg.seed;
    cfg.scenario
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid scenario: {e}"))?;
    Ok(cfg)
}

fn write_manifest<T: Serialize>(dir: &Path, payload: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(payload)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text).context("writing manifest.json")?;
    Ok(())
}

fn train_config_of(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        agent: cfg.agent.clone(),
        scenario: cfg.scenario.clone(),
        catalog: cfg.trace.catalog.clone(),
        trace_length: cfg.trace.length,
    }
}

/// Builds a policy by name; learned policies need their checkpoint, and a
/// monolithic net is refused outside the fleet size it was trained for.
pub fn build_policy(
    name: &str,
    checkpoint: Option<&Checkpoint>,
    n_pms: usize,
) -> anyhow::Result<Box<dyn Policy>> {
    let learned = |kind: PolicyKind| -> anyhow::Result<Box<dyn Policy>> {
        let ckpt = checkpoint.ok_or_else(|| CliError::MissingCheckpoint {
            policy: name.to_string(),
        })?;
        if ckpt.kind != kind {
            bail!(
                "checkpoint holds a {:?} net but the requested policy is {name}",
                ckpt.kind
            );
        }
        Ok(match kind {
            PolicyKind::CvdRl => Box::new(CvdPolicy::greedy(
                ckpt.online.clone(),
                &ckpt.config.agent,
            )),
            PolicyKind::FlatDqn => {
                if ckpt.config.scenario.n_pms_initial != n_pms {
                    bail!(
                        "flat_dqn checkpoint was trained for {} PMs and cannot evaluate {} PMs",
                        ckpt.config.scenario.n_pms_initial,
                        n_pms
                    );
                }
                Box::new(FlatPolicy {
                    net: ckpt.online.clone(),
                })
            }
        })
    };
    match name {
        "first_fit" => Ok(Box::new(FirstFitPolicy)),
        "best_fit" => Ok(Box::new(BestFitPolicy)),
        "surrogate" => Ok(Box::new(SurrogatePolicy::default())),
        "random" => Ok(Box::new(RandomPolicy)),
        "cvd_rl" => learned(PolicyKind::CvdRl),
        "flat_dqn" => learned(PolicyKind::FlatDqn),
        other => Err(CliError::UnknownPolicy {
            name: other.to_string(),
        }
        .into()),
    }
}

/// Runs `traces` evaluation episodes; trace and episode randomness derive
/// from the master seed and trace index only, so every policy sees the same
/// workload.
fn run_eval_episodes(
    cfg: &ExperimentConfig,
    traces: usize,
    policy: &mut dyn Policy,
) -> anyhow::Result<Vec<EpisodeResult>> {
    (0..traces)
        .map(|i| {
            let mut trace_seed = vmsched::seed_rng(cfg.seed, vmsched::seeds::EVAL, i as u64, 0);
            let trace = generate_trace(&cfg.trace.catalog, cfg.trace.length, trace_seed.gen());
            let mut rng = vmsched::seed_rng(cfg.seed, vmsched::seeds::EVAL, i as u64, 1);
            run_episode(&cfg.scenario, &trace, policy, &mut rng)
                .with_context(|| format!("evaluation episode {i}"))
        })
        .collect()
}

pub fn gen_trace(args: GenTraceArgs) -> anyhow::Result<()> {
    let cfg = resolve(&args.common)?;
    let length = args.length.unwrap_or(cfg.trace.length);
    let trace = generate_trace(&cfg.trace.catalog, length, cfg.seed);
    save_trace(&trace, &args.out)?;
    println!(
        "wrote {} events ({} creates) to {}",
        trace.events.len(),
        length,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'static str,
    version: &'static str,
    kind: PolicyKind,
    checkpoint_every: usize,
    config: &'a TrainConfig,
}

pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub epochs_run: usize,
}

pub fn train(args: TrainArgs) -> anyhow::Result<TrainOutcome> {
    let mut cfg = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.agent.epochs = e;
    }
    let checkpoint_every = args
        .checkpoint_every
        .unwrap_or(cfg.train.checkpoint_every)
        .max(1);
    let kind = match args.policy.as_deref().unwrap_or("cvd_rl") {
        "cvd_rl" => PolicyKind::CvdRl,
        "flat_dqn" => PolicyKind::FlatDqn,
        other => {
            bail!(CliError::UnknownPolicy {
                name: other.to_string()
            })
        }
    };

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            if let Some(e) = args.epochs {
                t.config.agent.epochs = e;
            }
            log::info!("resuming at epoch {}", t.next_epoch());
            t
        }
        None => Trainer::new(kind, train_config_of(&cfg))?,
    };

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        &TrainManifest {
            command: "train",
            version: VERSION,
            kind: trainer.kind,
            checkpoint_every,
            config: &trainer.config,
        },
    )?;

    let log_path = args.out.join("train_log.csv");
    let fresh = !log_path.exists() || fs::metadata(&log_path)?.len() == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut log_file = BufWriter::new(file);
    if fresh {
        writeln!(log_file, "{TRAIN_LOG_HEADER}")?;
    }

    let checkpoint_path = args.out.join("checkpoint.json");
    let start = trainer.next_epoch();
    while trainer.next_epoch() < trainer.config.agent.epochs {
        let row = trainer.run_epoch()?;
        writeln!(log_file, "{}", format_log_row(&row))?;
        log::info!(
            "epoch {}: length {:.1} loss {:.5}",
            row.epoch,
            row.scheduled_length,
            row.loss
        );
        if (row.epoch + 1) % checkpoint_every == 0 {
            log_file.flush()?;
            trainer.save_checkpoint(&checkpoint_path)?;
        }
    }
    log_file.flush()?;
    trainer.save_checkpoint(&checkpoint_path)?;
    let epochs_run = trainer.next_epoch() - start;
    println!(
        "trained {} epochs ({} total) -> {}",
        epochs_run,
        trainer.next_epoch(),
        args.out.display()
    );
    Ok(TrainOutcome {
        log_path,
        checkpoint_path,
        epochs_run,
    })
}

#[derive(Serialize)]
struct EvalManifest<'a> {
    command: &'static str,
    version: &'static str,
    policy: &'a str,
    traces: usize,
    seed: u64,
    trace_length: usize,
    scenario: &'a ScenarioConfig,
    catalog: &'a Catalog,
}

pub fn eval(args: EvalArgs) -> anyhow::Result<RunSummary> {
    let cfg = resolve(&args.common)?;
    let traces = args.traces.unwrap_or(cfg.compare.traces);
    let checkpoint = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut policy = build_policy(&args.policy, checkpoint.as_ref(), cfg.scenario.n_pms_initial)?;
    let results = run_eval_episodes(&cfg, traces, policy.as_mut())?;
    let summary = aggregate(policy.name(), &results)?;

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        &EvalManifest {
            command: "eval",
            version: VERSION,
            policy: &args.policy,
            traces,
            seed: cfg.seed,
            trace_length: cfg.trace.length,
            scenario: &cfg.scenario,
            catalog: &cfg.trace.catalog,
        },
    )?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(args.out.join("summary.json"), text)?;
    println!(
        "{}: scheduled length {:.2}, cpu utilization {:.4}, income {:.1} (n={})",
        summary.policy,
        summary.scheduled_length.mean,
        summary.avg_cpu_utilization.mean,
        summary.income.mean,
        summary.n
    );
    Ok(summary)
}

#[derive(Serialize)]
struct CompareManifest<'a> {
    command: &'static str,
    version: &'static str,
    policies: &'a [String],
    warm_start_grid: &'a [f64],
    traces: usize,
    seed: u64,
    trace_length: usize,
    scenario: &'a ScenarioConfig,
    catalog: &'a Catalog,
}

fn parse_checkpoint_specs(specs: &[String]) -> anyhow::Result<HashMap<String, Checkpoint>> {
    let mut out = HashMap::new();
    for spec in specs {
        let Some((name, path)) = spec.split_once('=') else {
            bail!("--checkpoint expects name=path, got {spec:?}");
        };
        let ckpt = load_checkpoint(Path::new(path))
            .with_context(|| format!("loading checkpoint for {name}"))?;
        out.insert(name.to_string(), ckpt);
    }
    Ok(out)
}

pub fn compare(args: CompareArgs) -> anyhow::Result<Vec<TableRow>> {
    let cfg = resolve(&args.common)?;
    let policies: Vec<String> = match &args.policies {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => cfg.compare.policies.clone(),
    };
    let traces = args.traces.unwrap_or(cfg.compare.traces);
    let checkpoints = parse_checkpoint_specs(&args.checkpoints)?;

    let mut rows = Vec::new();
    for &rho in &cfg.compare.warm_start_grid {
        let mut cell = cfg.clone();
        cell.scenario.warm_start_ratio = rho;
        for name in &policies {
            let mut policy =
                build_policy(name, checkpoints.get(name), cell.scenario.n_pms_initial)?;
            let results = run_eval_episodes(&cell, traces, policy.as_mut())
                .with_context(|| format!("policy {name} at warm start {rho}"))?;
            let summary = aggregate(policy.name(), &results)?;
            rows.extend(summary.table_rows(rho));
        }
    }

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        &CompareManifest {
            command: "compare",
            version: VERSION,
            policies: &policies,
            warm_start_grid: &cfg.compare.warm_start_grid,
            traces,
            seed: cfg.seed,
            trace_length: cfg.trace.length,
            scenario: &cfg.scenario,
            catalog: &cfg.trace.catalog,
        },
    )?;
    let mut table = String::from(TABLE_HEADER);
    for row in &rows {
        table.push('\n');
        table.push_str(&format_table_row(row));
    }
    table.push('\n');
    fs::write(args.out.join("table.csv"), &table)?;
    println!(
        "compared {} policies x {} warm-start levels on {} traces -> {}",
        policies.len(),
        cfg.compare.warm_start_grid.len(),
        traces,
        args.out.display()
    );
    Ok(rows)
}

pub const ABLATION_VARIANTS: &[&str] = &[
    "base",
    "no_filter",
    "no_decomposition",
    "no_look_ahead",
    "bf_only",
    "is_only",
    "k3",
    "k5",
    "k7",
    "k10",
];

/// Maps a variant name to the scheduler kind and adjusted hyperparameters it
/// trains with.
fn variant_setup(name: &str, base: &AgentConfig) -> Result<(PolicyKind, AgentConfig), CliError> {
    let mut agent = base.clone();
    let kind = match name {
        "base" => PolicyKind::CvdRl,
        "no_filter" => {
            agent.use_filter = false;
            PolicyKind::CvdRl
        }
        "no_decomposition" => PolicyKind::FlatDqn,
        "no_look_ahead" => {
            agent.value_input = ValueInput::NoLookAhead;
            PolicyKind::CvdRl
        }
        "bf_only" => {
            agent.filter_split = Some((agent.k, 0));
            PolicyKind::CvdRl
        }
        "is_only" => {
            agent.filter_split = Some((0, agent.k));
            PolicyKind::CvdRl
        }
        _ => match name.strip_prefix('k').and_then(|n| n.parse::<usize>().ok()) {
            Some(k) if k >= 1 => {
                agent.k = k;
                agent.filter_split = None;
                PolicyKind::CvdRl
            }
            _ => {
                return Err(CliError::UnknownAblation {
                    name: name.to_string(),
                })
            }
        },
    };
    Ok((kind, agent))
}

#[derive(Serialize)]
struct AblateManifest<'a> {
    command: &'static str,
    version: &'static str,
    variants: &'a [String],
    seeds: u64,
    window: usize,
    base: &'a TrainConfig,
}

pub fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.agent.epochs = e;
    }
    let variants: Vec<String> = match &args.variants {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
    };
    // fail on typos before any training time is spent
    for v in &variants {
        variant_setup(v, &cfg.agent)?;
    }
    let base = train_config_of(&cfg);

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        &AblateManifest {
            command: "ablate",
            version: VERSION,
            variants: &variants,
            seeds: args.seeds,
            window: args.window,
            base: &base,
        },
    )?;

    for variant in &variants {
        let (kind, agent) = variant_setup(variant, &cfg.agent)?;
        let vdir = args.out.join(variant);
        let mut runs: Vec<Vec<EpochLog>> = Vec::new();
        for s in 0..args.seeds {
            let mut train_cfg = base.clone();
            train_cfg.agent = agent.clone();
            train_cfg.agent.seed = cfg.seed + s;
            let mut trainer = Trainer::new(kind, train_cfg)?;
            let sdir = vdir.join(format!("seed{s}"));
            fs::create_dir_all(&sdir)?;
            let file = fs::File::create(sdir.join("train_log.csv"))?;
            let mut log_file = BufWriter::new(file);
            writeln!(log_file, "{TRAIN_LOG_HEADER}")?;
            let logs = trainer.run(|row| {
                let _ = writeln!(log_file, "{}", format_log_row(row));
            })?;
            log_file.flush()?;
            trainer.save_checkpoint(&sdir.join("checkpoint.json"))?;
            runs.push(logs);
        }
        let curve = learning_curve(&runs, args.window)?;
        let mut text = String::from(CURVE_HEADER);
        for p in &curve {
            text.push('\n');
            text.push_str(&format_curve_point(p));
        }
        text.push('\n');
        fs::write(vdir.join("curve.csv"), text)?;
        let last = curve.last().expect("curve has at least one point");
        println!(
            "{variant}: final smoothed length {:.2} over {} seeds -> {}",
            last.mean,
            args.seeds,
            vdir.display()
        );
    }
    Ok(())
}
