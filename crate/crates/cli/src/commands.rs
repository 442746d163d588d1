//! Verb implementations behind the `chunkplay` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chunkplay::diffusion::SamplerConfig;
use chunkplay::evaluation::{
    collect_rollouts, config_digest, contact_sheet, control_success_rate, drift_curve, read_json, run_sweep,
    run_tournament, sweep_table, DataSpec, DomainReference, EvalReport, ExperimentSpec, ModelStore, OracleConfig,
    RolloutJudge, SweepSpec, TournamentConfig, TrialConfig,
};
use chunkplay::model::{load_checkpoint, Checkpoint};
use chunkplay::rollout::{create_session, export_transcript, rollout_many, Engine};
use chunkplay::trainer::{train, ExamplePool, InitParams};
use chunkplay::worldsim::{load_dataset, save_dataset, Dataset};
use chunkplay::{ActionCommand, Chunk, Domain, EntityKind, InjectionStrategy};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Checkpoint used when `--ckpt` is absent.
pub const CHECKPOINT_ENV: &str = "CHUNKPLAY_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "chunkplay", about = "Action-conditioned chunk-wise video diffusion on a synthetic 2D world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON configuration file for the verb.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the generic, game and real corpora to disk.
    GenData(Common),
    /// Run both training stages of one recipe.
    Train(TrainArgs),
    /// Play an action sequence from a checkpoint and export the transcript.
    Rollout(RolloutArgs),
    /// Evaluate checkpoints and write one structured report.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// Serve interactive sessions over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpora written by `gen-data`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub stage1_steps: Option<u64>,
    #[arg(long)]
    pub stage2_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub entity: String,
    /// Comma-separated commands, e.g. `left,forward,right`.
    #[arg(long)]
    pub actions: String,
}

#[derive(Debug, Args, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Repeat to compare several checkpoints (Elo).
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Defaults to every entity.
    #[arg(long)]
    pub entity: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Subcommand)]
pub enum EvalKind {
    Control(EvalArgs),
    Elo(EvalArgs),
    Drift(EvalArgs),
    /// Train (or reuse) every variant of a sweep and compare control rates.
    Sweep {
        #[command(flatten)]
        args: EvalArgs,
        /// Built-in sweep used when `--config` is absent.
        #[arg(long, default_value = "strategies")]
        name: String,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampler settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Transcripts of open sessions are exported here on shutdown.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

/// Settings shared by the evaluation verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub oracle: OracleConfig,
    /// Simulator episodes per entity in each domain's quality reference.
    pub reference_episodes: usize,
    pub comparisons: usize,
    pub elo_rollout_len: usize,
    /// Rollouts drawn on each contact sheet; 0 disables sheets.
    pub sheet_rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampler: SamplerConfig::default(),
            oracle: OracleConfig::default(),
            reference_episodes: 8,
            comparisons: 200,
            elo_rollout_len: 3,
            sheet_rollouts: 4,
        }
    }
}

fn config_or<T: for<'de> Deserialize<'de>>(path: &Option<PathBuf>, default: impl FnOnce() -> T) -> Result<T> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(explicit: Option<&PathBuf>) -> Option<PathBuf> {
    explicit.cloned().or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
}

fn load_engine(path: &Path, sampler: SamplerConfig) -> Result<Engine> {
    let ckpt = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
    Ok(Engine::from_checkpoint(ckpt, sampler)?)
}

fn entities(arg: &Option<String>) -> Result<Vec<EntityKind>> {
    match arg {
        Some(s) => s.split(',').map(|e| e.trim().parse().map_err(anyhow::Error::from)).collect(),
        None => Ok(EntityKind::ALL.to_vec()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::Rollout(a) => rollout_cmd(&a),
        Command::Eval { kind } => eval_cmd(kind),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn corpus_dirs(spec: &DataSpec) -> Vec<(String, Option<EntityKind>, usize)> {
    let mut dirs = vec![("generic".to_string(), None, spec.generic_episodes)];
    dirs.push((EntityKind::GameCar.as_str().to_string(), Some(EntityKind::GameCar), spec.game_episodes));
    dirs.extend(spec.real_episodes.iter().map(|(e, n)| (e.as_str().to_string(), Some(*e), *n)));
    dirs.retain(|d| d.2 > 0);
    dirs
}

fn gen_data(c: &Common) -> Result<()> {
    let mut spec: DataSpec = config_or(&c.config, DataSpec::reduced)?;
    spec.seed = c.seed;
    std::fs::create_dir_all(&c.out)?;
    let generic = spec.generic()?;
    save_dataset(&c.out.join("generic"), &generic.episodes)?;
    if let Some(game) = spec.game()? {
        save_dataset(&c.out.join(EntityKind::GameCar.as_str()), &game.episodes)?;
    }
    for (&e, &n) in &spec.real_episodes {
        if n > 0 {
            let one = DataSpec { real_episodes: [(e, n)].into(), ..spec.clone() };
            if let Some(ds) = one.real()? {
                save_dataset(&c.out.join(e.as_str()), &ds.episodes)?;
            }
        }
    }
    write_json(&c.out.join("data.json"), &spec)?;
    eprintln!("wrote {} corpora to {}", corpus_dirs(&spec).len(), c.out.display());
    Ok(())
}

struct Corpora {
    generic: Dataset,
    paired: Vec<Dataset>,
}

fn load_corpora(spec: &DataSpec, dir: Option<&Path>) -> Result<Corpora> {
    let Some(dir) = dir else {
        let paired = spec.game()?.into_iter().chain(spec.real()?).collect();
        return Ok(Corpora { generic: spec.generic()?, paired });
    };
    let mut generic = None;
    let mut paired = Vec::new();
    for (name, entity, _) in corpus_dirs(spec) {
        let path = dir.join(&name);
        if !path.join("manifest").exists() {
            continue;
        }
        let ds = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
        match entity {
            None => generic = Some(ds),
            Some(_) => paired.push(ds),
        }
    }
    let generic = generic.with_context(|| format!("no generic corpus under {}", dir.display()))?;
    Ok(Corpora { generic, paired })
}

fn last_checkpoint(paths: &[PathBuf]) -> Result<Checkpoint> {
    let p = paths.last().context("training saved no checkpoint")?;
    Ok(load_checkpoint(p, None)?)
}

/// Returns the path of the final model.
pub fn train_cmd(a: &TrainArgs) -> Result<PathBuf> {
    let c = &a.common;
    let mut spec: ExperimentSpec = config_or(&c.config, || ExperimentSpec::reduced("model", InjectionStrategy::Adaln))?;
    if let Some(s) = &a.strategy {
        let strategy: InjectionStrategy = s.parse()?;
        spec.stage2.model.action = Some(strategy);
    }
    if let Some(n) = a.stage1_steps {
        spec.stage1.steps = n;
        spec.stage1.checkpoint_every = spec.stage1.checkpoint_every.min(n);
    }
    if let Some(n) = a.stage2_steps {
        spec.stage2.steps = n;
        spec.stage2.checkpoint_every = spec.stage2.checkpoint_every.min(n);
    }
    spec.stage1.seed = c.seed;
    spec.stage2.seed = c.seed;
    std::fs::create_dir_all(&c.out)?;
    write_json(&c.out.join("experiment.json"), &spec)?;
    let corpora = load_corpora(&spec.data, a.data.as_deref())?;

    let pool = ExamplePool::new(&[&corpora.generic], 1)?;
    let s1 = train(spec.stage1, InitParams::Scratch, &pool, Some(&c.out.join("stage1")))?;
    eprintln!("stage 1: {} steps, final loss {:.4}", s1.step, s1.metrics.last().map_or(f64::NAN, |m| m.loss));

    let paired: Vec<&Dataset> = corpora.paired.iter().collect();
    let pool = ExamplePool::new(&paired, 2)?;
    let s2 = train(spec.stage2, InitParams::Stage1(last_checkpoint(&s1.checkpoints)?), &pool, Some(&c.out.join("stage2")))?;
    for w in &s2.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("stage 2: {} steps, final loss {:.4}", s2.step, s2.metrics.last().map_or(f64::NAN, |m| m.loss));
    let final_path = s2.checkpoints.last().context("training saved no checkpoint")?;
    let model = c.out.join("model.ckpt");
    std::fs::copy(final_path, &model)?;
    eprintln!("model: {}", model.display());
    Ok(model)
}

fn rollout_cmd(a: &RolloutArgs) -> Result<()> {
    let c = &a.common;
    let sampler: SamplerConfig = config_or(&c.config, SamplerConfig::default)?;
    let ckpt = checkpoint_path(a.ckpt.as_ref()).context("no checkpoint: pass --ckpt or set CHUNKPLAY_CHECKPOINT")?;
    let engine = load_engine(&ckpt, sampler)?;
    let entity: EntityKind = a.entity.parse()?;
    let actions = a
        .actions
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<ActionCommand>())
        .collect::<Result<Vec<_>, _>>()?;
    if actions.is_empty() {
        bail!("--actions needs at least one command");
    }
    let mut state = create_session(&engine, entity, entity.domain(), c.seed)?;
    rollout_many(&engine, &mut state, &actions)?;
    let t = export_transcript(&c.out, "rollout", &state)?;
    let mut chunks = vec![state.seed_chunk.clone()];
    chunks.extend(state.history.iter().map(|(_, ch)| ch.clone()));
    std::fs::write(c.out.join("rollout.png"), contact_sheet(&[chunks])?.to_png()?)?;
    let total: f64 = t.latencies_ms.iter().sum();
    eprintln!("{} chunks in {total:.0} ms, transcript {}", t.actions.len(), c.out.join("rollout.json").display());
    Ok(())
}

fn eval_engines(args: &EvalArgs, sampler: SamplerConfig) -> Result<Vec<Engine>> {
    let paths = if args.ckpt.is_empty() { checkpoint_path(None).into_iter().collect() } else { args.ckpt.clone() };
    if paths.is_empty() {
        bail!("no checkpoint: pass --ckpt or set CHUNKPLAY_CHECKPOINT");
    }
    paths.iter().map(|p| load_engine(p, sampler)).collect()
}

fn write_sheet(out: &Path, name: &str, rollouts: &[Vec<Chunk>], report: &mut EvalReport) -> Result<()> {
    if rollouts.is_empty() {
        return Ok(());
    }
    let file = format!("{name}.png");
    std::fs::write(out.join(&file), contact_sheet(rollouts)?.to_png()?)?;
    report.sheets.push(file);
    Ok(())
}

/// Runs one evaluation verb and returns the report written to `<out>/report.json`.
pub fn eval_report(kind: &EvalKind) -> Result<EvalReport> {
    let (args, name) = match kind {
        EvalKind::Control(a) | EvalKind::Elo(a) | EvalKind::Drift(a) => (a, None),
        EvalKind::Sweep { args, name } => (args, Some(name.as_str())),
    };
    let c = &args.common;
    std::fs::create_dir_all(&c.out)?;
    let ents = entities(&args.entity)?;
    let mut report = EvalReport::default();

    if let Some(name) = name {
        let mut spec: SweepSpec = match &c.config {
            Some(p) => read_json(p)?,
            None => SweepSpec::named(name)?,
        };
        spec.trials = args.trials;
        spec.seed = c.seed;
        if args.entity.is_some() {
            spec.entities = ents;
        }
        let store = ModelStore { dir: c.out.join("models"), log_every: 500 };
        report.sweep = run_sweep(&spec, &store, &OracleConfig::default())?;
        report.config_hash = config_digest(&spec);
        report.checkpoint_id = report.sweep.iter().map(|r| r.checkpoint_id.as_str()).collect::<Vec<_>>().join(",");
        println!("{}", sweep_table(&report.sweep));
        report.write(&c.out.join("report.json"))?;
        return Ok(report);
    }

    let cfg: EvalConfig = config_or(&c.config, EvalConfig::default)?;
    let engines = eval_engines(args, cfg.sampler)?;
    report.config_hash = config_digest(&(&cfg, args.trials, c.seed, &ents));
    report.checkpoint_id = engines.iter().map(|e| e.checkpoint_id.as_str()).collect::<Vec<_>>().join(",");
    let world = engines[0].world();
    let reference = |d: Domain| DomainReference::build(d, &world, cfg.reference_episodes, chunkplay::seed::derive(c.seed, &[1]));

    match kind {
        EvalKind::Control(_) => {
            for &e in &ents {
                let r = control_success_rate(&engines[0], e, &TrialConfig::control(args.trials, c.seed), &cfg.oracle)?;
                println!("{:<16} per-chunk {:.3}  all-correct {:.3}  invalid {:.3}", e.as_str(), r.per_chunk_rate, r.all_correct_rate, r.invalid_rate);
                report.control.push(r);
                let sample = collect_rollouts(&engines[0], e, &TrialConfig::control(cfg.sheet_rollouts, c.seed))?;
                write_sheet(&c.out, &format!("control-{}", e.as_str()), &sample, &mut report)?;
            }
        }
        EvalKind::Drift(_) => {
            for &e in &ents {
                let r = drift_curve(&engines[0], e, &reference(e.domain())?, &TrialConfig::drift(args.trials, c.seed), &cfg.oracle)?;
                let curve: Vec<String> = r.composite.iter().map(|v| format!("{v:.3}")).collect();
                println!("{:<16} {}", e.as_str(), curve.join(" "));
                report.drift.push(r);
                let sample = collect_rollouts(&engines[0], e, &TrialConfig::drift(cfg.sheet_rollouts, c.seed))?;
                write_sheet(&c.out, &format!("drift-{}", e.as_str()), &sample, &mut report)?;
            }
        }
        EvalKind::Elo(_) => {
            if engines.len() < 2 {
                bail!("elo needs at least two --ckpt");
            }
            let mut judge = RolloutJudge {
                models: engines.iter().map(|e| e as &dyn chunkplay::evaluation::ChunkGenerator).collect(),
                entities: ents,
                references: [Domain::Game, Domain::Real].into_iter().map(|d| Ok((d, reference(d)?))).collect::<Result<_>>()?,
                oracle: cfg.oracle,
                rollout_len: cfg.elo_rollout_len,
            };
            let names: Vec<String> = args.ckpt.iter().map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())).collect();
            let t = run_tournament(&names, &mut judge, &TournamentConfig { comparisons: cfg.comparisons, seed: c.seed, ..TournamentConfig::default() })?;
            for r in &t.ratings {
                println!("{:<24} {:>8.1} ({} games)", r.model, r.rating, r.games);
            }
            report.elo = t.ratings;
        }
        EvalKind::Sweep { .. } => unreachable!("handled above"),
    }
    report.write(&c.out.join("report.json"))?;
    Ok(report)
}

fn eval_cmd(kind: EvalKind) -> Result<()> {
    eval_report(&kind).map(|_| ())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let mut sampler: SamplerConfig = config_or(&a.config, SamplerConfig::default)?;
    sampler.seed = a.seed;
    let engine = match checkpoint_path(a.ckpt.as_ref()) {
        Some(p) => Some(load_engine(&p, sampler)?),
        None => {
            eprintln!("no checkpoint configured; session creation will return 503");
            None
        }
    };
    let state = crate::server::AppState::new(engine);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::server::serve(&a.addr, state.clone()))?;
    if let Some(out) = &a.out {
        let n = state.export_transcripts(out)?;
        eprintln!("exported {n} transcripts to {}", out.display());
    }
    Ok(())
}
