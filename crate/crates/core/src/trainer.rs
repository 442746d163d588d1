//! Two-stage training: stage 1 adapts a fresh model to chunk-wise generation on the
//! generic-motion corpus; stage 2 attaches the action module and fine-tunes on a
//! mix of labeled game transitions and unlabeled real transitions.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::ActionCommand;
use crate::diffusion::{training_loss, DiffusionSchedule, LossBatch};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, DenoiserConfig, DenoiserParameters, InjectionStrategy};
use crate::seed;
use crate::tensor::Tensor;
use crate::worldsim::{Dataset, Domain, EpisodeRecord};

/// One `(C_k, a_k) → C_{k+1}` transition in signed pixel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub cond: Vec<f32>,
    pub target: Vec<f32>,
    /// One-hot for labeled game transitions, zero otherwise.
    pub action: ActionCommand,
    pub domain: Domain,
}

fn expected_stage(domain: Domain) -> u8 {
    if domain == Domain::Generic {
        1
    } else {
        2
    }
}

fn check_stage(dataset: &Dataset, stage: u8) -> Result<()> {
    if let Some(ep) = dataset.episodes.iter().find(|e| expected_stage(e.domain) != stage) {
        return Err(Error::StageMismatch { stage, found: format!("{} episodes", ep.domain.as_str()) });
    }
    Ok(())
}

fn transition_action(ep: &EpisodeRecord, k: usize) -> ActionCommand {
    ep.actions.as_ref().map_or(ActionCommand::Zero, |a| a[k])
}

/// Every adjacent chunk pair of every episode, in episode order.
pub fn assemble_examples(dataset: &Dataset, stage: u8) -> Result<Vec<TrainingExample>> {
    check_stage(dataset, stage)?;
    let mut out = Vec::new();
    for ep in &dataset.episodes {
        for k in 0..ep.chunks.len().saturating_sub(1) {
            out.push(TrainingExample {
                cond: ep.chunks[k].to_signed(),
                target: ep.chunks[k + 1].to_signed(),
                action: transition_action(ep, k),
                domain: ep.domain,
            });
        }
    }
    Ok(out)
}

/// Seeded Fisher–Yates shuffle.
pub fn shuffle_examples<T>(items: &mut [T], seed: u64) {
    let mut rng = seed::rng(seed, &[seed::tag("shuffle")]);
    for i in (1..items.len()).rev() {
        items.swap(i, rng.random_range(0..=i));
    }
}

/// Transition index over in-memory episodes, split by domain.
#[derive(Debug, Clone)]
pub struct ExamplePool {
    episodes: Vec<EpisodeRecord>,
    game: Vec<(u32, u32)>,
    real: Vec<(u32, u32)>,
    generic: Vec<(u32, u32)>,
    fingerprints: Vec<String>,
}

/// Digest over episode identity and pixels.
pub fn dataset_fingerprint(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for ep in &dataset.episodes {
        h.update(ep.seed.to_le_bytes());
        h.update(ep.domain.as_str());
        h.update(ep.entity.map_or("generic", |e| e.as_str()));
        for c in &ep.chunks {
            for f in &c.frames {
                h.update(&f.pixels);
            }
        }
        if let Some(a) = &ep.actions {
            h.update(a.iter().filter_map(|a| a.code()).collect::<Vec<u8>>());
        }
    }
    hex::encode(h.finalize())
}

impl ExamplePool {
    /// Indexes the datasets after checking they belong to `stage`.
    pub fn new(datasets: &[&Dataset], stage: u8) -> Result<Self> {
        let mut pool = ExamplePool { episodes: Vec::new(), game: Vec::new(), real: Vec::new(), generic: Vec::new(), fingerprints: Vec::new() };
        let mut geometry = None;
        for ds in datasets {
            check_stage(ds, stage)?;
            let g = (ds.world.height, ds.world.width, ds.world.chunk_len);
            if *geometry.get_or_insert(g) != g {
                return Err(Error::Shape("datasets in one pool must share frame geometry".into()));
            }
            pool.fingerprints.push(dataset_fingerprint(ds));
            for ep in &ds.episodes {
                let e = pool.episodes.len() as u32;
                let list = match ep.domain {
                    Domain::Game => &mut pool.game,
                    Domain::Real => &mut pool.real,
                    Domain::Generic => &mut pool.generic,
                };
                list.extend((0..ep.chunks.len().saturating_sub(1) as u32).map(|k| (e, k)));
                pool.episodes.push(ep.clone());
            }
        }
        if pool.game.is_empty() && pool.real.is_empty() && pool.generic.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(pool)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.game.len(), self.real.len(), self.generic.len())
    }

    pub fn fingerprints(&self) -> &[String] {
        &self.fingerprints
    }

    /// `(height, width, chunk_len)` of every chunk in the pool.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let c = &self.episodes[0].chunks[0];
        (c.height(), c.width(), c.len())
    }

    fn example(&self, (e, k): (u32, u32)) -> TrainingExample {
        let ep = &self.episodes[e as usize];
        let k = k as usize;
        TrainingExample {
            cond: ep.chunks[k].to_signed(),
            target: ep.chunks[k + 1].to_signed(),
            action: transition_action(ep, k),
            domain: ep.domain,
        }
    }

    /// The batch used at `step`: each example comes from the game pool with
    /// probability `mix_ratio / (1 + mix_ratio)` when both stage-2 pools exist.
    pub fn sample_batch(&self, config: &TrainConfig, step: u64) -> Vec<TrainingExample> {
        let mut rng = seed::rng(config.seed, &[seed::tag("batch"), step]);
        let p_game = config.mix_ratio / (1.0 + config.mix_ratio);
        (0..config.batch_size)
            .map(|_| {
                let list = if !self.generic.is_empty() {
                    &self.generic
                } else if self.real.is_empty() || (!self.game.is_empty() && rng.random::<f64>() < p_game) {
                    &self.game
                } else {
                    &self.real
                };
                self.example(list[rng.random_range(0..list.len())])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Game examples per real example in stage-2 batches.
    pub mix_ratio: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; the final step is always saved.
    pub checkpoint_every: u64,
    /// Largest condition-noise timestep; 0 disables augmentation.
    pub t_cond_max: usize,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Architecture for fresh models; its injection strategy is the one attached in stage 2.
    pub model: DenoiserConfig,
}

impl TrainConfig {
    pub fn stage1(model: DenoiserConfig) -> Self {
        TrainConfig {
            stage: 1,
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            mix_ratio: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            t_cond_max: 250,
            warmup_steps: 100,
            grad_clip: 1.0,
            model,
        }
    }

    pub fn stage2(model: DenoiserConfig) -> Self {
        TrainConfig { stage: 2, steps: 15_000, ..TrainConfig::stage1(model) }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.stage == 1 || self.stage == 2) {
            return bad("stage must be 1 or 2");
        }
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("steps, batch size and checkpoint cadence must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.mix_ratio > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("learning rate and mix ratio must be positive; weight decay and clip non-negative");
        }
        if self.stage == 2 && self.model.action.is_none() {
            return bad("stage 2 needs an injection strategy");
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable config");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    fn learning_rate_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: DenoiserParameters<f32>,
    pub v: DenoiserParameters<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &DenoiserParameters<f32>) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut DenoiserParameters<f32>, grads: &DenoiserParameters<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let decay = 1.0 - (lr * weight_decay) as f32;
        let eps = self.eps as f32;
        let grads: Vec<&Tensor<f32>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads).zip(moments) {
            for (((w, &g), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w = *w * decay - step * *mi / ((*vi).sqrt() / c2s + eps);
            }
        }
    }
}

/// One line of `metrics.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub game_examples: usize,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: DenoiserParameters<f32>,
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub config_hash: String,
}

/// Where stage-2 weights come from.
#[derive(Clone, Debug)]
pub enum InitParams {
    /// A stage-1 checkpoint (the action module is attached here).
    Stage1(Checkpoint),
    /// Fresh weights; permitted for ablations and flagged with a warning in stage 2.
    Scratch,
}

/// A training run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: DenoiserParameters<f32>,
    pub optimizer: AdamW,
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
    pub warnings: Vec<String>,
    run_dir: Option<PathBuf>,
    schedule: DiffusionSchedule,
    fingerprints: Vec<String>,
}

const CHECKPOINT_METRIC_STRIDE: u64 = 25;

impl Trainer {
    pub fn new(config: TrainConfig, init: InitParams, pool: &ExamplePool, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = pool.geometry();
        if (h, w, c) != (config.model.height, config.model.width, config.model.chunk_len) {
            return Err(Error::ConfigMismatch(format!(
                "data is {h}x{w} with {c}-frame chunks, model expects {}x{} with {}",
                config.model.height, config.model.width, config.model.chunk_len
            )));
        }
        let mut warnings = Vec::new();
        let mut init_rng = seed::rng(config.seed, &[seed::tag("init")]);
        let params = match (config.stage, init) {
            (1, InitParams::Scratch) => DenoiserParameters::init(DenoiserConfig { action: None, ..config.model }, &mut init_rng)?,
            (1, InitParams::Stage1(_)) => {
                return Err(Error::InvalidConfig("stage 1 starts from fresh weights".into()));
            }
            (_, InitParams::Stage1(ckpt)) => {
                if ckpt.meta.config.action.is_some() {
                    return Err(Error::StageMismatch { stage: 2, found: "a checkpoint that already has an action module".into() });
                }
                let mut arch = ckpt.meta.config;
                arch.action = None;
                let want = DenoiserConfig { action: None, chunk_len: arch.chunk_len, ..config.model };
                want.ensure_compatible(&arch)?;
                // weights do not depend on the chunk length
                let mut p = ckpt.params;
                p.config.chunk_len = config.model.chunk_len;
                let strategy = config.model.action.expect("validated");
                p.attach_action_module(strategy, &mut init_rng)?;
                p
            }
            (_, InitParams::Scratch) => {
                warnings.push("stage 2 started without a stage-1 checkpoint".to_string());
                DenoiserParameters::init(config.model, &mut init_rng)?
            }
        };
        let optimizer = AdamW::new(&params);
        let mut t = Trainer {
            config,
            params,
            optimizer,
            step: 0,
            metrics: Vec::new(),
            warnings,
            run_dir: run_dir.map(Path::to_path_buf),
            schedule: DiffusionSchedule::default(),
            fingerprints: pool.fingerprints().to_vec(),
        };
        t.prepare_run_dir(false)?;
        Ok(t)
    }

    /// Continues a run from one of its checkpoints.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint, pool: &ExamplePool, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let hash = ckpt.meta.labels.get("config_hash").cloned().unwrap_or_default();
        if hash != config.hash() {
            return Err(Error::ConfigMismatch(format!("checkpoint was written by config {hash}, not {}", config.hash())));
        }
        let mut optimizer = AdamW::new(&ckpt.params);
        let restore = |dst: &mut DenoiserParameters<f32>, prefix: &str| -> Result<()> {
            let mut missing = None;
            dst.for_each_mut(|name, t| match ckpt.aux_tensor(&format!("{prefix}{name}")) {
                Some(src) if src.shape == t.shape => t.data.copy_from_slice(&src.data),
                _ => missing = Some(name.to_string()),
            });
            missing.map_or(Ok(()), |n| Err(Error::Format(format!("checkpoint lacks optimizer state for {n}"))))
        };
        restore(&mut optimizer.m, "adam.m.")?;
        restore(&mut optimizer.v, "adam.v.")?;
        optimizer.t = ckpt.meta.step;
        let metrics = ckpt
            .meta
            .metrics
            .iter()
            .map(|v| serde_json::from_value(v.clone()))
            .collect::<std::result::Result<Vec<MetricRecord>, _>>()?;
        let mut t = Trainer {
            config,
            params: ckpt.params,
            optimizer,
            step: ckpt.meta.step,
            metrics,
            warnings: Vec::new(),
            run_dir: run_dir.map(Path::to_path_buf),
            schedule: DiffusionSchedule::default(),
            fingerprints: pool.fingerprints().to_vec(),
        };
        t.prepare_run_dir(true)?;
        Ok(t)
    }

    fn prepare_run_dir(&mut self, resuming: bool) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = serde_json::json!({
            "train": self.config,
            "config_hash": self.config.hash(),
            "dataset_fingerprints": self.fingerprints,
            "warnings": self.warnings,
        });
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
        let log = dir.join("metrics.log");
        if resuming {
            // drop records past the checkpoint so the log matches an uninterrupted run
            let text = fs::read_to_string(&log).unwrap_or_default();
            let kept: String = text
                .lines()
                .filter(|l| serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.step <= self.step))
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&log, kept).map_err(|e| Error::io(&log, e))?;
        } else {
            fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone(), self.step);
        ckpt.meta.dataset_fingerprints = self.fingerprints.clone();
        ckpt.meta.metrics = self
            .metrics
            .iter()
            .filter(|m| m.step % CHECKPOINT_METRIC_STRIDE == 0 || m.step == self.step)
            .map(|m| serde_json::to_value(m).expect("serializable metric"))
            .collect();
        let mut labels = BTreeMap::new();
        labels.insert("config_hash".to_string(), self.config.hash());
        labels.insert("stage".to_string(), self.config.stage.to_string());
        labels.insert("train_config".to_string(), serde_json::to_string(&self.config).expect("serializable config"));
        ckpt.meta.labels = labels;
        let mut aux: Vec<(String, Tensor<f32>)> = Vec::new();
        for (prefix, src) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            src.for_each(|name, t| aux.push((format!("{prefix}{name}"), t.clone())));
        }
        ckpt.aux = aux;
        ckpt
    }

    /// Builds the current checkpoint, optionally writing it into the run directory.
    pub fn save(&self) -> Result<(Checkpoint, Option<PathBuf>)> {
        let ckpt = self.checkpoint();
        let path = match &self.run_dir {
            Some(dir) => {
                let p = dir.join(format!("ckpt_{}", self.step));
                save_checkpoint(&p, &ckpt)?;
                Some(p)
            }
            None => None,
        };
        Ok((ckpt, path))
    }

    /// One optimizer step.
    pub fn train_step(&mut self, pool: &ExamplePool) -> Result<MetricRecord> {
        let batch = pool.sample_batch(&self.config, self.step);
        let mut cond = Vec::with_capacity(batch.len() * batch[0].cond.len());
        let mut target = Vec::with_capacity(cond.capacity());
        let mut actions = Vec::with_capacity(batch.len());
        let mut game = 0;
        for ex in &batch {
            cond.extend_from_slice(&ex.cond);
            target.extend_from_slice(&ex.target);
            actions.push(ex.action);
            game += usize::from(ex.domain == Domain::Game);
        }
        let mut rng = seed::rng(self.config.seed, &[seed::tag("noise"), self.step]);
        let out = training_loss(
            &self.params,
            &self.schedule,
            &LossBatch { cond: &cond, target: &target, actions: &actions },
            self.config.t_cond_max,
            &mut rng,
        )?;
        let mut grads = out.grads;
        let mut sq = 0.0f64;
        grads.for_each(|_, t| sq += t.data.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
        let grad_norm = sq.sqrt();
        if !out.loss.is_finite() || !grad_norm.is_finite() {
            let snapshot = match &self.run_dir {
                Some(dir) => {
                    let p = dir.join(format!("nonfinite_{}", self.step));
                    save_checkpoint(&p, &self.checkpoint())?;
                    Some(p)
                }
                None => None,
            };
            return Err(Error::NonFiniteLoss { step: self.step, snapshot });
        }
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let s = (self.config.grad_clip / grad_norm) as f32;
            grads.for_each_mut(|_, t| t.data.iter_mut().for_each(|g| *g *= s));
        }
        let lr = self.config.learning_rate_at(self.step);
        self.optimizer.step(&mut self.params, &grads, lr, self.config.weight_decay);
        self.step += 1;
        let record = MetricRecord { step: self.step, loss: out.loss, learning_rate: lr, grad_norm, game_examples: game };
        if let Some(dir) = &self.run_dir {
            let path = dir.join("metrics.log");
            let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&path, e))?;
        }
        self.metrics.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.steps`, saving at the cadence and at the end.
    pub fn run(mut self, pool: &ExamplePool) -> Result<TrainReport> {
        let mut checkpoints = Vec::new();
        while self.step < self.config.steps {
            self.train_step(pool)?;
            if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                if let (_, Some(p)) = self.save()? {
                    checkpoints.push(p);
                }
            }
        }
        Ok(TrainReport {
            config_hash: self.config.hash(),
            params: self.params,
            step: self.step,
            metrics: self.metrics,
            checkpoints,
            warnings: self.warnings,
        })
    }
}

/// Convenience wrapper: builds a trainer and runs it to completion.
pub fn train(config: TrainConfig, init: InitParams, pool: &ExamplePool, run_dir: Option<&Path>) -> Result<TrainReport> {
    Trainer::new(config, init, pool, run_dir)?.run(pool)
}

/// Strategy-independent description used by reports.
pub fn strategy_label(config: &DenoiserConfig) -> &'static str {
    config.action.map_or("none", InjectionStrategy::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{generate_corpus, CorpusSpec, EntityKind, WorldConfig};

    fn world() -> WorldConfig {
        WorldConfig { height: 8, width: 8, chunk_len: 2, chunks: 3 }
    }

    fn corpus(entity: Option<EntityKind>, n: usize) -> Dataset {
        Dataset::new(generate_corpus(&CorpusSpec { entity, episodes: n, world: world(), seed: 5 }).unwrap()).unwrap()
    }

    fn model() -> DenoiserConfig {
        DenoiserConfig { height: 8, width: 8, chunk_len: 2, patch: 4, dim: 16, heads: 2, layers: 1, mlp_ratio: 2, action: Some(InjectionStrategy::Adaln) }
    }

    #[test]
    fn adjacent_pairs_become_examples() {
        let ds = Dataset::new(
            generate_corpus(&CorpusSpec { entity: Some(EntityKind::GameCar), episodes: 2, world: WorldConfig::reduced(), seed: 1 }).unwrap(),
        )
        .unwrap();
        let ex = assemble_examples(&ds, 2).unwrap();
        assert_eq!(ex.len(), 2 * 7);
        assert!(ex.iter().all(|e| e.action.is_command()));
        let real = corpus(Some(EntityKind::RealBicycle), 3);
        assert!(assemble_examples(&real, 2).unwrap().iter().all(|e| e.action == ActionCommand::Zero));
        assert!(matches!(assemble_examples(&real, 1), Err(Error::StageMismatch { .. })));
        assert!(matches!(assemble_examples(&corpus(None, 1), 2), Err(Error::StageMismatch { .. })));
    }

    #[test]
    fn shuffle_is_seeded() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        shuffle_examples(&mut a, 3);
        shuffle_examples(&mut b, 3);
        assert_eq!(a, b);
        assert_ne!(a, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn even_mix_is_binomial() {
        let game = corpus(Some(EntityKind::GameCar), 4);
        let real = corpus(Some(EntityKind::RealVehicle), 4);
        let pool = ExamplePool::new(&[&game, &real], 2).unwrap();
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::stage2(model()) };
        let batches = 1000;
        let total: usize = (0..batches)
            .map(|s| pool.sample_batch(&cfg, s).iter().filter(|e| e.domain == Domain::Game).count())
            .sum();
        let n = (batches * 16) as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((total as f64 - n / 2.0).abs() < 3.0 * sigma, "{total}");
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let cfg = DenoiserConfig { layers: 1, ..model() };
        let mut p = DenoiserParameters::<f32>::init(cfg, &mut seed::rng(1, &[])).unwrap();
        let mut g = p.zeros_like();
        g.unembed.bias.data[0] = 0.5;
        let w0 = p.unembed.bias.data[0] as f64;
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.01, 0.1);
        // first step: m̂ = g, v̂ = g², so the update is lr · sign(g) plus decay
        let want = w0 * (1.0 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.unembed.bias.data[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn stage_two_from_scratch_warns() {
        let game = corpus(Some(EntityKind::GameCar), 2);
        let pool = ExamplePool::new(&[&game], 2).unwrap();
        let cfg = TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::stage2(model()) };
        let report = train(cfg, InitParams::Scratch, &pool, None).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.step, 2);
    }

    #[test]
    fn stage_two_requires_stage_one_weights() {
        let generic = corpus(None, 2);
        let pool1 = ExamplePool::new(&[&generic], 1).unwrap();
        let cfg1 = TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::stage1(model()) };
        let s1 = train(cfg1, InitParams::Scratch, &pool1, None).unwrap();
        assert!(s1.params.action.is_none());
        let game = corpus(Some(EntityKind::GameCar), 2);
        let pool2 = ExamplePool::new(&[&game], 2).unwrap();
        let cfg2 = TrainConfig { steps: 1, batch_size: 2, ..TrainConfig::stage2(model()) };
        let ckpt = Checkpoint::new(s1.params.clone(), 2);
        let s2 = train(cfg2, InitParams::Stage1(ckpt), &pool2, None).unwrap();
        assert!(s2.warnings.is_empty());
        assert!(s2.params.action.is_some());
        let twice = Checkpoint::new(s2.params, 1);
        assert!(matches!(Trainer::new(cfg2, InitParams::Stage1(twice), &pool2, None), Err(Error::StageMismatch { .. })));
    }
}
