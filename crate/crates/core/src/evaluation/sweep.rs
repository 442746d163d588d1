//! Experiment specs, a cache of trained models keyed by spec hash, and sweeps
//! that train several variants and compare their control success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::control::{control_success_rate, ControlReport, TrialConfig};
use super::oracle::OracleConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, DenoiserConfig, InjectionStrategy};
use crate::rollout::Engine;
use crate::seed;
use crate::trainer::{strategy_label, ExamplePool, InitParams, TrainConfig, Trainer};
use crate::worldsim::{generate_corpus, CorpusSpec, Dataset, EntityKind, WorldConfig};

/// Which simulator corpora an experiment trains on. Corpora are prefix-stable:
/// a smaller episode count selects a subset of a larger one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub world: WorldConfig,
    pub generic_episodes: usize,
    pub game_episodes: usize,
    /// Episodes per real entity; absent or zero entities are left out.
    pub real_episodes: BTreeMap<EntityKind, usize>,
    pub seed: u64,
}

impl DataSpec {
    pub fn reduced() -> Self {
        DataSpec {
            world: WorldConfig::reduced(),
            generic_episodes: 600,
            game_episodes: 1000,
            real_episodes: EntityKind::REAL.into_iter().map(|e| (e, 400)).collect(),
            seed: 0,
        }
    }

    fn corpus(&self, entity: Option<EntityKind>, episodes: usize) -> Result<Dataset> {
        let tag = entity.map_or(seed::tag("generic"), |e| seed::tag(e.as_str()));
        let spec = CorpusSpec { entity, episodes, world: self.world, seed: seed::derive(self.seed, &[tag]) };
        Dataset::new(generate_corpus(&spec)?)
    }

    pub fn generic(&self) -> Result<Dataset> {
        self.corpus(None, self.generic_episodes)
    }

    /// `None` when the spec has no game episodes.
    pub fn game(&self) -> Result<Option<Dataset>> {
        match self.game_episodes {
            0 => Ok(None),
            n => self.corpus(Some(EntityKind::GameCar), n).map(Some),
        }
    }

    /// All real entities merged; `None` when there are none.
    pub fn real(&self) -> Result<Option<Dataset>> {
        let mut merged: Option<Dataset> = None;
        for (&e, &n) in &self.real_episodes {
            if n == 0 {
                continue;
            }
            let ds = self.corpus(Some(e), n)?;
            merged = Some(match merged {
                Some(m) => m.merge(ds)?,
                None => ds,
            });
        }
        Ok(merged)
    }
}

/// A full training recipe: data plus both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSpec,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

/// Short stable digest of a value's JSON encoding.
pub fn config_digest(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("serializable spec");
    hex::encode(Sha256::digest(json))[..16].to_string()
}

impl ExperimentSpec {
    /// The default recipe on the reduced world with the given injection strategy.
    pub fn reduced(name: &str, strategy: InjectionStrategy) -> Self {
        let model = DenoiserConfig { action: Some(strategy), ..DenoiserConfig::reduced() };
        let train = |mut c: TrainConfig, steps| {
            c.steps = steps;
            c.batch_size = 16;
            c.learning_rate = 1e-3;
            c.checkpoint_every = steps;
            c
        };
        ExperimentSpec {
            name: name.to_string(),
            data: DataSpec::reduced(),
            stage1: train(TrainConfig::stage1(DenoiserConfig { action: None, ..model }), 2000),
            stage2: train(TrainConfig::stage2(model), 6000),
        }
    }

    pub fn with_strategy(mut self, name: &str, strategy: InjectionStrategy) -> Self {
        self.name = name.to_string();
        self.stage2.model.action = Some(strategy);
        self
    }

    /// Keeps `fraction` of the game corpus.
    pub fn with_game_fraction(mut self, name: &str, fraction: f64) -> Self {
        self.name = name.to_string();
        self.data.game_episodes = (self.data.game_episodes as f64 * fraction).round() as usize;
        self
    }

    /// Real data restricted to `keep` (all other real entities removed).
    pub fn with_real_entities(mut self, name: &str, keep: &[EntityKind]) -> Self {
        self.name = name.to_string();
        self.data.real_episodes.retain(|e, _| keep.contains(e));
        self
    }

    /// Chunk length `c` with the same frames per episode.
    pub fn with_chunk_len(mut self, name: &str, c: usize) -> Self {
        self.name = name.to_string();
        let frames = self.data.world.chunk_len * self.data.world.chunks;
        self.data.world.chunk_len = c;
        self.data.world.chunks = frames.div_ceil(c);
        // token layout depends on the chunk length, so stage 1 is retrained too
        self.stage1.model.chunk_len = c;
        self.stage2.model.chunk_len = c;
        self
    }

    /// Digest of everything that affects stage 1.
    pub fn stage1_key(&self) -> String {
        config_digest(&(&self.data.world, self.data.generic_episodes, self.data.seed, &self.stage1))
    }

    /// Digest of the full recipe (the name is excluded).
    pub fn key(&self) -> String {
        config_digest(&(&self.data, &self.stage1, &self.stage2))
    }
}

/// Trained checkpoints cached on disk by recipe digest.
#[derive(Debug, Clone)]
pub struct ModelStore {
    pub dir: PathBuf,
    /// Print training progress to stderr every this many steps (0 = silent).
    pub log_every: u64,
}

impl ModelStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ModelStore { dir: dir.into(), log_every: 0 }
    }

    fn cached(&self, file: &str) -> Option<Checkpoint> {
        let path = self.dir.join(file);
        path.exists().then(|| load_checkpoint(&path, None).ok()).flatten()
    }

    fn store(&self, file: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::Io { path: self.dir.clone(), source: e })?;
        let path = self.dir.join(file);
        save_checkpoint(&path, ckpt)?;
        Ok(path)
    }

    fn run(&self, label: &str, config: TrainConfig, init: InitParams, pool: &ExamplePool) -> Result<Checkpoint> {
        let mut trainer = Trainer::new(config, init, pool, None)?;
        let mut window = 0.0;
        while trainer.step < config.steps {
            let m = trainer.train_step(pool)?;
            window += m.loss;
            if self.log_every > 0 && m.step % self.log_every == 0 {
                eprintln!("[{label}] step {}/{} loss {:.4}", m.step, config.steps, window / self.log_every as f64);
                window = 0.0;
            }
        }
        let mut ckpt = trainer.save()?.0;
        // optimizer moments are only needed to resume
        ckpt.aux.clear();
        Ok(ckpt)
    }

    /// Loads or trains the stage-1 checkpoint of `spec`.
    pub fn stage1(&self, spec: &ExperimentSpec) -> Result<Checkpoint> {
        let file = format!("stage1-{}.ckpt", spec.stage1_key());
        if let Some(c) = self.cached(&file) {
            return Ok(c);
        }
        let generic = spec.data.generic()?;
        let pool = ExamplePool::new(&[&generic], 1)?;
        let ckpt = self.run("stage1", spec.stage1, InitParams::Scratch, &pool)?;
        self.store(&file, &ckpt)?;
        Ok(ckpt)
    }

    /// Loads or trains the final checkpoint of `spec`.
    pub fn model(&self, spec: &ExperimentSpec) -> Result<Checkpoint> {
        let file = format!("{}-{}.ckpt", spec.name, spec.key());
        if let Some(c) = self.cached(&file) {
            return Ok(c);
        }
        let s1 = self.stage1(spec)?;
        let game = spec.data.game()?;
        let real = spec.data.real()?;
        let sets: Vec<&Dataset> = game.iter().chain(real.iter()).collect();
        let pool = ExamplePool::new(&sets, 2)?;
        let ckpt = self.run(&spec.name, spec.stage2, InitParams::Stage1(s1), &pool)?;
        self.store(&file, &ckpt)?;
        // reload so the id reflects the stored blob digest
        load_checkpoint(&self.dir.join(&file), None)
    }

    pub fn engine(&self, spec: &ExperimentSpec, sampler: SamplerConfig) -> Result<Engine> {
        Engine::from_checkpoint(self.model(spec)?, sampler)
    }
}

/// Variants to train and compare under one evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub experiments: Vec<ExperimentSpec>,
    pub entities: Vec<EntityKind>,
    pub trials: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl SweepSpec {
    fn over(experiments: Vec<ExperimentSpec>) -> Self {
        SweepSpec { experiments, entities: EntityKind::ALL.to_vec(), trials: 100, seed: 0, sampler: SamplerConfig::default() }
    }

    /// The three injection strategies on the default recipe.
    pub fn strategies() -> Self {
        let base = ExperimentSpec::reduced("adaln", InjectionStrategy::Adaln);
        SweepSpec::over(vec![
            base.clone(),
            base.clone().with_strategy("self_attn_token", InjectionStrategy::SelfAttnToken),
            base.with_strategy("cross_attn", InjectionStrategy::CrossAttn),
        ])
    }

    /// Game corpus at 25%, 50% and 100%.
    pub fn data_scaling() -> Self {
        let base = ExperimentSpec::reduced("adaln", InjectionStrategy::Adaln);
        SweepSpec::over(vec![base.clone().with_game_fraction("game-25", 0.25), base.clone().with_game_fraction("game-50", 0.5), base])
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "strategies" => Ok(SweepSpec::strategies()),
            "data-scaling" => Ok(SweepSpec::data_scaling()),
            other => Err(Error::InvalidConfig(format!("unknown sweep {other:?} (expected strategies or data-scaling)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub strategy: String,
    pub chunk_len: usize,
    pub game_episodes: usize,
    pub real_episodes: BTreeMap<EntityKind, usize>,
    pub recipe_hash: String,
    pub checkpoint_id: String,
    pub control: Vec<ControlReport>,
}

impl SweepRow {
    pub fn rate(&self, entity: EntityKind) -> Option<f64> {
        self.control.iter().find(|r| r.entity == entity).map(|r| r.per_chunk_rate)
    }
}

pub fn run_sweep(spec: &SweepSpec, store: &ModelStore, oracle: &OracleConfig) -> Result<Vec<SweepRow>> {
    spec.experiments
        .iter()
        .map(|exp| {
            let engine = store.engine(exp, spec.sampler)?;
            let control = spec
                .entities
                .iter()
                .map(|&e| control_success_rate(&engine, e, &TrialConfig::control(spec.trials, spec.seed), oracle))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                name: exp.name.clone(),
                strategy: strategy_label(&exp.stage2.model).to_string(),
                chunk_len: exp.stage2.model.chunk_len,
                game_episodes: exp.data.game_episodes,
                real_episodes: exp.data.real_episodes.clone(),
                recipe_hash: exp.key(),
                checkpoint_id: engine.checkpoint_id.clone(),
                control,
            })
        })
        .collect()
}

/// Fixed-width comparison table of per-chunk success rates.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut entities: Vec<EntityKind> = rows.iter().flat_map(|r| r.control.iter().map(|c| c.entity)).collect();
    entities.sort();
    entities.dedup();
    let mut out = format!("{:<18} {:<16}", "variant", "strategy");
    for e in &entities {
        let _ = write!(out, " {:>16}", e.as_str());
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<18} {:<16}", r.name, r.strategy);
        for &e in &entities {
            match r.rate(e) {
                Some(v) => {
                    let _ = write!(out, " {v:>16.3}");
                }
                None => {
                    let _ = write!(out, " {:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Loads an [`ExperimentSpec`] or [`SweepSpec`] JSON file.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(serde_json::from_slice(&bytes)?)
}
