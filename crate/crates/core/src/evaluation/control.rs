//! Seeded rollout trials: control success and per-step quality drift.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{estimate_state, judge_control, OracleConfig, Verdict};
use super::quality::{assess_chunk, DomainReference, QualityReport};
use crate::action::ActionCommand;
use crate::error::Result;
use crate::rollout::{create_session, rollout_batch, Engine};
use crate::seed;
use crate::worldsim::{
    generate_episode, render_chunk, step_dynamics, Chunk, EntityKind, EpisodeConfig, Scene, WorldConfig,
};

/// Anything that can roll out seeded sessions: a trained engine or the simulator.
pub trait ChunkGenerator {
    fn world(&self) -> WorldConfig;

    /// For each `(session seed, plan)`, the seed chunk followed by one chunk per action.
    fn rollouts(&self, entity: EntityKind, seeds: &[u64], plans: &[Vec<ActionCommand>]) -> Result<Vec<Vec<Chunk>>>;
}

impl ChunkGenerator for Engine {
    fn world(&self) -> WorldConfig {
        Engine::world(self)
    }

    fn rollouts(&self, entity: EntityKind, seeds: &[u64], plans: &[Vec<ActionCommand>]) -> Result<Vec<Vec<Chunk>>> {
        let mut sessions = seeds
            .iter()
            .map(|&s| create_session(self, entity, entity.domain(), s))
            .collect::<Result<Vec<_>>>()?;
        rollout_batch(self, &mut sessions, plans)?;
        Ok(sessions
            .into_iter()
            .map(|s| std::iter::once(s.seed_chunk).chain(s.history.into_iter().map(|(_, c)| c)).collect())
            .collect())
    }
}

/// Ground-truth "model": continues the seed episode through the true dynamics.
#[derive(Debug, Clone, Copy)]
pub struct SimulatorGenerator {
    pub world: WorldConfig,
}

impl ChunkGenerator for SimulatorGenerator {
    fn world(&self) -> WorldConfig {
        self.world
    }

    fn rollouts(&self, entity: EntityKind, seeds: &[u64], plans: &[Vec<ActionCommand>]) -> Result<Vec<Vec<Chunk>>> {
        let world = WorldConfig { chunks: 1, ..self.world };
        let spec = entity.spec();
        seeds
            .iter()
            .zip(plans)
            .map(|(&s, plan)| {
                let ep = generate_episode(&EpisodeConfig::new(entity, world), s)?;
                let scene = Scene::new(entity.domain(), seed::derive(s, &[seed::tag("scene")]));
                let mut state = *ep.true_states.last().expect("seed chunk states");
                let mut out = ep.chunks;
                for &a in plan {
                    let mut states = Vec::with_capacity(world.chunk_len);
                    for _ in 0..world.chunk_len {
                        state = step_dynamics(&state, a, &spec)?;
                        states.push(state);
                    }
                    out.push(render_chunk(&states, &spec, &scene, &world)?);
                }
                Ok(out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trials: usize,
    pub rollout_len: usize,
    pub seed: u64,
    /// Sessions advanced together per sampler call.
    pub batch: usize,
}

impl TrialConfig {
    pub fn control(trials: usize, seed: u64) -> Self {
        TrialConfig { trials, rollout_len: 3, seed, batch: 32 }
    }

    pub fn drift(trials: usize, seed: u64) -> Self {
        TrialConfig { trials, rollout_len: 12, seed, batch: 32 }
    }
}

/// Session seed and uniformly random plan of trial `i`.
pub fn trial_plan(entity: EntityKind, cfg: &TrialConfig, i: usize) -> (u64, Vec<ActionCommand>) {
    let s = seed::derive(cfg.seed, &[seed::tag("trial"), entity.index(), i as u64]);
    let mut rng = seed::rng(s, &[seed::tag("plan")]);
    let plan = (0..cfg.rollout_len).map(|_| ActionCommand::COMMANDS[rng.random_range(0..3)]).collect();
    (s, plan)
}

fn run_trials<G: ChunkGenerator + ?Sized>(
    generator: &G,
    entity: EntityKind,
    cfg: &TrialConfig,
    mut visit: impl FnMut(&[ActionCommand], &[Chunk]),
) -> Result<()> {
    let batch = cfg.batch.max(1);
    let mut start = 0;
    while start < cfg.trials {
        let end = (start + batch).min(cfg.trials);
        let (seeds, plans): (Vec<_>, Vec<_>) = (start..end).map(|i| trial_plan(entity, cfg, i)).unzip();
        for (plan, chunks) in plans.iter().zip(generator.rollouts(entity, &seeds, &plans)?) {
            visit(plan, &chunks);
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub entity: EntityKind,
    pub trials: usize,
    pub rollout_len: usize,
    pub seed: u64,
    /// Judged-correct chunks over all judged chunks; invalid counts as failure.
    pub per_chunk_rate: f64,
    /// Trials with every chunk correct.
    pub all_correct_rate: f64,
    pub invalid_rate: f64,
    /// Successes and attempts per command.
    pub per_action: BTreeMap<String, (usize, usize)>,
}

/// Judges every chunk of one rollout, each against the last frame before it.
pub fn judge_rollout(chunks: &[Chunk], plan: &[ActionCommand], entity: EntityKind, world: &WorldConfig, oracle: &OracleConfig) -> Vec<Verdict> {
    let spec = entity.spec();
    plan.iter()
        .enumerate()
        .map(|(k, &a)| {
            let est = estimate_state(&chunks[k + 1], Some(chunks[k].last_frame()), &spec, world, oracle);
            judge_control(&est, a, &spec, world)
        })
        .collect()
}

pub fn control_success_rate<G: ChunkGenerator + ?Sized>(
    generator: &G,
    entity: EntityKind,
    cfg: &TrialConfig,
    oracle: &OracleConfig,
) -> Result<ControlReport> {
    let world = generator.world();
    let (mut ok, mut judged, mut invalid, mut all_ok) = (0usize, 0usize, 0usize, 0usize);
    let mut per_action: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    run_trials(generator, entity, cfg, |plan, chunks| {
        let verdicts = judge_rollout(chunks, plan, entity, &world, oracle);
        for (&a, v) in plan.iter().zip(&verdicts) {
            let slot = per_action.entry(a.as_str().to_string()).or_default();
            slot.1 += 1;
            if *v == Verdict::Success {
                slot.0 += 1;
                ok += 1;
            }
            if *v == Verdict::Invalid {
                invalid += 1;
            }
            judged += 1;
        }
        if verdicts.iter().all(|v| *v == Verdict::Success) {
            all_ok += 1;
        }
    })?;
    let denom = judged.max(1) as f64;
    Ok(ControlReport {
        entity,
        trials: cfg.trials,
        rollout_len: cfg.rollout_len,
        seed: cfg.seed,
        per_chunk_rate: ok as f64 / denom,
        all_correct_rate: all_ok as f64 / cfg.trials.max(1) as f64,
        invalid_rate: invalid as f64 / denom,
        per_action,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub entity: EntityKind,
    pub trials: usize,
    pub seed: u64,
    /// Mean quality of the chunk generated at each rollout step (index 0 = step 1).
    pub per_step: Vec<QualityReport>,
    pub composite: Vec<f64>,
}

pub fn drift_curve<G: ChunkGenerator + ?Sized>(
    generator: &G,
    entity: EntityKind,
    reference: &DomainReference,
    cfg: &TrialConfig,
    oracle: &OracleConfig,
) -> Result<DriftReport> {
    let world = generator.world();
    let spec = entity.spec();
    let mut steps: Vec<Vec<QualityReport>> = vec![Vec::new(); cfg.rollout_len];
    run_trials(generator, entity, cfg, |_, chunks| {
        for k in 1..chunks.len() {
            steps[k - 1].push(assess_chunk(&chunks[k], Some(chunks[k - 1].last_frame()), &spec, reference, &world, oracle));
        }
    })?;
    let per_step: Vec<_> = steps.iter().map(|s| QualityReport::mean(s)).collect();
    Ok(DriftReport { entity, trials: cfg.trials, seed: cfg.seed, composite: per_step.iter().map(QualityReport::composite).collect(), per_step })
}

/// Generated chunks of seeded rollouts, for metrics over whole streams.
pub fn collect_rollouts<G: ChunkGenerator + ?Sized>(generator: &G, entity: EntityKind, cfg: &TrialConfig) -> Result<Vec<Vec<Chunk>>> {
    let mut out = Vec::with_capacity(cfg.trials);
    run_trials(generator, entity, cfg, |_, chunks| out.push(chunks.to_vec()))?;
    Ok(out)
}

/// Mean temporal consistency over every consecutive frame pair of the generated
/// part of each rollout, chunk boundaries included.
pub fn stream_consistency(rollouts: &[Vec<Chunk>], world: &WorldConfig) -> f64 {
    let mut scores = Vec::new();
    for chunks in rollouts {
        for k in 1..chunks.len() {
            scores.push(super::quality::temporal_consistency(&chunks[k], Some(chunks[k - 1].last_frame()), world));
        }
    }
    scores.iter().sum::<f64>() / scores.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::seed_chunk;

    #[test]
    fn simulator_scores_perfectly() {
        let sim = SimulatorGenerator { world: WorldConfig::reduced() };
        for e in EntityKind::ALL {
            let r = control_success_rate(&sim, e, &TrialConfig::control(40, 1), &OracleConfig::default()).unwrap();
            assert_eq!(r.per_chunk_rate, 1.0, "{e}: {r:?}");
            assert_eq!(r.all_correct_rate, 1.0);
        }
    }

    #[test]
    fn simulator_seed_chunk_matches_sessions() {
        let world = WorldConfig::reduced();
        let sim = SimulatorGenerator { world };
        let (s, plan) = trial_plan(EntityKind::RealVehicle, &TrialConfig::control(1, 0), 0);
        let out = sim.rollouts(EntityKind::RealVehicle, &[s], &[plan]).unwrap();
        assert_eq!(out[0][0], seed_chunk(EntityKind::RealVehicle, &world, s).unwrap());
        assert_eq!(out[0].len(), 4);
    }

    #[test]
    fn trial_plans_are_seeded() {
        let cfg = TrialConfig::control(5, 9);
        assert_eq!(trial_plan(EntityKind::GameCar, &cfg, 3), trial_plan(EntityKind::GameCar, &cfg, 3));
        assert_ne!(trial_plan(EntityKind::GameCar, &cfg, 3).0, trial_plan(EntityKind::RealBicycle, &cfg, 3).0);
    }
}
