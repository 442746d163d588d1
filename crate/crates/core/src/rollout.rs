//! Interactive engine: a session holds the last chunk and turns one command into
//! the next chunk. Generation is Markov in the current chunk; the initial chunk is
//! rendered by the simulator.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::action::ActionCommand;
use crate::diffusion::{ddim_sample_from, standard_normal, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{patchify_chunk, unpatchify_chunk, Checkpoint, DenoiserParameters, TokenLayout};
use crate::seed;
use crate::worldsim::{
    check_entity_domain, generate_episode, write_episode_file, Chunk, Domain, EntityKind, EpisodeConfig, EpisodeRecord,
    WorldConfig,
};

/// Immutable inference state shared by all sessions.
#[derive(Debug)]
pub struct Engine {
    pub params: DenoiserParameters<f32>,
    pub schedule: DiffusionSchedule,
    pub sampler: SamplerConfig,
    /// Short identifier of the weights, carried into transcripts.
    pub checkpoint_id: String,
    layout: TokenLayout,
}

impl Engine {
    pub fn new(params: DenoiserParameters<f32>, sampler: SamplerConfig, checkpoint_id: impl Into<String>) -> Result<Self> {
        let schedule = DiffusionSchedule::default();
        sampler.validate(&schedule)?;
        let layout = params.config.layout();
        Ok(Engine { params, schedule, sampler, checkpoint_id: checkpoint_id.into(), layout })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, sampler: SamplerConfig) -> Result<Self> {
        let id = ckpt.meta.blob_sha256.get(..12).unwrap_or("unsaved").to_string();
        Engine::new(ckpt.params, sampler, id)
    }

    /// World geometry implied by the model.
    pub fn world(&self) -> WorldConfig {
        let c = self.params.config;
        WorldConfig { height: c.height, width: c.width, chunk_len: c.chunk_len, chunks: 1 }
    }

    /// Next chunk for each `(current, action, rng seed)` in one batched sampler run.
    /// Each example's starting noise comes from its own stream, so the result for
    /// one example does not depend on the others in the batch.
    pub fn generate(&self, current: &[&Chunk], actions: &[ActionCommand], streams: &[u64]) -> Result<Vec<Chunk>> {
        if current.len() != actions.len() || current.len() != streams.len() {
            return Err(Error::Shape("chunk, action and stream counts differ".into()));
        }
        if current.is_empty() {
            return Ok(Vec::new());
        }
        for a in actions {
            a.require_command()?;
        }
        let world = self.world();
        let mut cond = Vec::new();
        let mut noise = Vec::new();
        for (chunk, &stream) in current.iter().zip(streams) {
            if chunk.len() != world.chunk_len || chunk.height() != world.height || chunk.width() != world.width {
                return Err(Error::Shape(format!(
                    "chunk is {}×{}×{}, model expects {}×{}×{}",
                    chunk.len(),
                    chunk.height(),
                    chunk.width(),
                    world.chunk_len,
                    world.height,
                    world.width
                )));
            }
            let tokens = patchify_chunk(&self.layout, &chunk.to_signed())?;
            let mut rng = seed::rng(stream, &[seed::tag("sample")]);
            noise.extend(standard_normal::<f32, _>(tokens.len(), &mut rng));
            cond.extend(tokens);
        }
        let mut rng = seed::rng(streams[0], &[seed::tag("sampler-eta")]);
        let out = ddim_sample_from(&self.params, &self.schedule, &cond, actions, &self.sampler, noise, &mut rng)?;
        let per = out.len() / actions.len();
        out.chunks(per)
            .map(|tokens| {
                let values = unpatchify_chunk(&self.layout, tokens)?;
                Chunk::from_signed(&values, world.chunk_len, world.height, world.width)
            })
            .collect()
    }
}

/// Live state of one interactive session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub id: String,
    pub entity: EntityKind,
    pub domain: Domain,
    pub seed: u64,
    pub checkpoint_id: String,
    pub seed_chunk: Chunk,
    /// Last generated chunk, or the seed chunk at step 0.
    pub current: Chunk,
    pub history: Vec<(ActionCommand, Chunk)>,
    pub latencies_ms: Vec<f64>,
}

impl SessionState {
    pub fn step_index(&self) -> usize {
        self.history.len()
    }

    /// Seed of the sampler stream for the next step.
    pub fn next_stream(&self) -> u64 {
        step_stream(self.seed, self.step_index())
    }

    fn push(&mut self, action: ActionCommand, chunk: Chunk, latency_ms: f64) {
        self.current = chunk.clone();
        self.history.push((action, chunk));
        self.latencies_ms.push(latency_ms);
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            session_id: self.id.clone(),
            entity: self.entity,
            domain: self.domain,
            seed: self.seed,
            checkpoint_id: self.checkpoint_id.clone(),
            actions: self.history.iter().map(|(a, _)| *a).collect(),
            latencies_ms: self.latencies_ms.clone(),
            chunk_file: None,
        }
    }
}

/// Per-step sampler seed derived from the session seed and step index.
pub fn step_stream(session_seed: u64, step: usize) -> u64 {
    seed::derive(session_seed, &[seed::tag("step"), step as u64])
}

/// Simulator-rendered first observation for `(entity, seed)`.
pub fn seed_chunk(entity: EntityKind, world: &WorldConfig, seed: u64) -> Result<Chunk> {
    let world = WorldConfig { chunks: 1, ..*world };
    let ep = generate_episode(&EpisodeConfig::new(entity, world), seed)?;
    Ok(ep.chunks.into_iter().next().expect("one chunk"))
}

pub fn create_session(engine: &Engine, entity: EntityKind, domain: Domain, seed: u64) -> Result<SessionState> {
    check_entity_domain(entity, domain)?;
    let chunk = seed_chunk(entity, &engine.world(), seed)?;
    Ok(SessionState {
        id: format!("{:016x}", seed::derive(seed, &[seed::tag("session-id")])),
        entity,
        domain,
        seed,
        checkpoint_id: engine.checkpoint_id.clone(),
        seed_chunk: chunk.clone(),
        current: chunk,
        history: Vec::new(),
        latencies_ms: Vec::new(),
    })
}

/// Generates the next chunk, appends it to the history and returns it.
pub fn step_session(engine: &Engine, state: &mut SessionState, action: ActionCommand) -> Result<Chunk> {
    action.require_command()?;
    let started = Instant::now();
    let chunk = engine.generate(&[&state.current], &[action], &[state.next_stream()])?.remove(0);
    state.push(action, chunk.clone(), started.elapsed().as_secs_f64() * 1e3);
    Ok(chunk)
}

pub fn rollout_many(engine: &Engine, state: &mut SessionState, actions: &[ActionCommand]) -> Result<Vec<Chunk>> {
    for a in actions {
        a.require_command()?;
    }
    actions.iter().map(|&a| step_session(engine, state, a)).collect()
}

/// Advances several sessions in lockstep, one batched sampler run per step.
/// `actions[i]` is the command list of `sessions[i]`; all lists share a length.
pub fn rollout_batch(engine: &Engine, sessions: &mut [SessionState], actions: &[Vec<ActionCommand>]) -> Result<()> {
    if sessions.len() != actions.len() {
        return Err(Error::Shape("one action list per session".into()));
    }
    let steps = actions.first().map_or(0, Vec::len);
    if actions.iter().any(|a| a.len() != steps) {
        return Err(Error::Shape("action lists differ in length".into()));
    }
    for k in 0..steps {
        let started = Instant::now();
        let step_actions: Vec<_> = actions.iter().map(|a| a[k]).collect();
        let streams: Vec<_> = sessions.iter().map(SessionState::next_stream).collect();
        let current: Vec<_> = sessions.iter().map(|s| &s.current).collect();
        let chunks = engine.generate(&current, &step_actions, &streams)?;
        let per_session = started.elapsed().as_secs_f64() * 1e3 / sessions.len().max(1) as f64;
        for ((s, a), c) in sessions.iter_mut().zip(step_actions).zip(chunks) {
            s.push(a, c, per_session);
        }
    }
    Ok(())
}

/// A session handle that rejects a second step while one is running.
#[derive(Debug, Clone)]
pub struct SharedSession {
    pub id: String,
    inner: Arc<Mutex<SessionState>>,
}

impl SharedSession {
    pub fn new(state: SessionState) -> Self {
        SharedSession { id: state.id.clone(), inner: Arc::new(Mutex::new(state)) }
    }

    pub fn step(&self, engine: &Engine, action: ActionCommand) -> Result<(SessionState, Chunk)> {
        let mut guard = match self.inner.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(Error::StepInFlight(self.id.clone())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let chunk = step_session(engine, &mut guard, action)?;
        Ok((guard.clone(), chunk))
    }

    /// Current state, or `None` while a step is running.
    pub fn try_snapshot(&self) -> Option<SessionState> {
        match self.inner.try_lock() {
            Ok(g) => Some(g.clone()),
            Err(TryLockError::Poisoned(p)) => Some(p.into_inner().clone()),
            Err(TryLockError::WouldBlock) => None,
        }
    }

    pub fn snapshot(&self) -> SessionState {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

/// Everything needed to replay a session bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub entity: EntityKind,
    pub domain: Domain,
    pub seed: u64,
    pub checkpoint_id: String,
    pub actions: Vec<ActionCommand>,
    pub latencies_ms: Vec<f64>,
    /// Episode-format file holding the seed chunk followed by every generated chunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_file: Option<PathBuf>,
}

/// Writes `<stem>.json` and `<stem>.rpl` into `dir`.
pub fn export_transcript(dir: &Path, stem: &str, state: &SessionState) -> Result<Transcript> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let chunk_path = dir.join(format!("{stem}.rpl"));
    let mut chunks = vec![state.seed_chunk.clone()];
    chunks.extend(state.history.iter().map(|(_, c)| c.clone()));
    let record = EpisodeRecord {
        chunks,
        actions: Some(state.history.iter().map(|(a, _)| *a).collect()),
        entity: Some(state.entity),
        domain: state.domain,
        seed: state.seed,
        true_states: Vec::new(),
    };
    write_episode_file(&chunk_path, &record)?;
    let mut t = state.transcript();
    t.chunk_file = Some(PathBuf::from(format!("{stem}.rpl")));
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_vec_pretty(&t)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(t)
}

/// Re-runs a transcript from scratch on `engine`.
pub fn replay_transcript(engine: &Engine, transcript: &Transcript) -> Result<SessionState> {
    let mut s = create_session(engine, transcript.entity, transcript.domain, transcript.seed)?;
    rollout_many(engine, &mut s, &transcript.actions)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, InjectionStrategy};

    fn engine() -> Engine {
        let cfg = DenoiserConfig { action: Some(InjectionStrategy::Adaln), layers: 1, ..DenoiserConfig::reduced() };
        let mut params = DenoiserParameters::<f32>::init(cfg, &mut seed::rng(5, &[])).unwrap();
        // perturb so outputs depend on inputs and actions
        let mut rng = seed::rng(6, &[]);
        params.for_each_mut(|_, t| {
            for v in &mut t.data {
                *v += 0.05 * rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, &mut rng);
            }
        });
        Engine::new(params, SamplerConfig { num_steps: 4, ..SamplerConfig::default() }, "test").unwrap()
    }

    #[test]
    fn seed_chunks_are_deterministic_and_checked() {
        let e = engine();
        let a = create_session(&e, EntityKind::RealBicycle, Domain::Real, 3).unwrap();
        let b = create_session(&e, EntityKind::RealBicycle, Domain::Real, 3).unwrap();
        assert_eq!(a.seed_chunk, b.seed_chunk);
        assert!(create_session(&e, EntityKind::RealBicycle, Domain::Game, 3).is_err());
        assert!("boat".parse::<EntityKind>().is_err());
    }

    #[test]
    fn zero_action_is_rejected() {
        let e = engine();
        let mut s = create_session(&e, EntityKind::GameCar, Domain::Game, 1).unwrap();
        assert!(matches!(step_session(&e, &mut s, ActionCommand::Zero), Err(Error::ZeroAction)));
        assert_eq!(s.step_index(), 0);
    }

    #[test]
    fn empty_rollout_leaves_state() {
        let e = engine();
        let mut s = create_session(&e, EntityKind::GameCar, Domain::Game, 1).unwrap();
        let before = s.clone();
        assert!(rollout_many(&e, &mut s, &[]).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn three_steps_and_markov_property() {
        let e = engine();
        let mut s = create_session(&e, EntityKind::GameCar, Domain::Game, 9).unwrap();
        let out = rollout_many(&e, &mut s, &[ActionCommand::Left, ActionCommand::Forward, ActionCommand::Right]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(s.step_index(), 3);
        assert_eq!(s.current, out[2]);
        assert_eq!(s.latencies_ms.len(), 3);

        // same current chunk, seed and step index but a different history
        let mut other = create_session(&e, EntityKind::GameCar, Domain::Game, 9).unwrap();
        other.history = vec![(ActionCommand::Right, out[0].clone()); 3];
        other.current = s.current.clone();
        let mut again = s.clone();
        let x = step_session(&e, &mut again, ActionCommand::Left).unwrap();
        let y = step_session(&e, &mut other, ActionCommand::Left).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn batched_rollout_equals_serial() {
        let e = engine();
        let seeds = [1u64, 2, 3];
        let plans: Vec<Vec<ActionCommand>> =
            vec![vec![ActionCommand::Left, ActionCommand::Left], vec![ActionCommand::Forward, ActionCommand::Right], vec![ActionCommand::Right, ActionCommand::Forward]];
        let mut batch: Vec<_> = seeds.iter().map(|&s| create_session(&e, EntityKind::GameCar, Domain::Game, s).unwrap()).collect();
        rollout_batch(&e, &mut batch, &plans).unwrap();
        for ((&sd, plan), b) in seeds.iter().zip(&plans).zip(&batch) {
            let mut s = create_session(&e, EntityKind::GameCar, Domain::Game, sd).unwrap();
            rollout_many(&e, &mut s, plan).unwrap();
            assert_eq!(s.history, b.history);
        }
    }

    #[test]
    fn interleaved_sessions_match_serial() {
        let e = engine();
        let mut a = create_session(&e, EntityKind::GameCar, Domain::Game, 11).unwrap();
        let mut b = create_session(&e, EntityKind::RealVehicle, Domain::Real, 12).unwrap();
        step_session(&e, &mut a, ActionCommand::Left).unwrap();
        step_session(&e, &mut b, ActionCommand::Right).unwrap();
        step_session(&e, &mut a, ActionCommand::Forward).unwrap();
        let mut a2 = create_session(&e, EntityKind::GameCar, Domain::Game, 11).unwrap();
        rollout_many(&e, &mut a2, &[ActionCommand::Left, ActionCommand::Forward]).unwrap();
        assert_eq!(a.history, a2.history);
    }

    #[test]
    fn transcript_replays_exactly() {
        let e = engine();
        let mut s = create_session(&e, EntityKind::RealPedestrian, Domain::Real, 4).unwrap();
        rollout_many(&e, &mut s, &[ActionCommand::Right, ActionCommand::Left]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = export_transcript(dir.path(), "run", &s).unwrap();
        let back: Transcript = serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(back.actions, t.actions);
        let replay = replay_transcript(&e, &back).unwrap();
        assert_eq!(replay.history, s.history);
        let file = crate::worldsim::read_episode_file(&dir.path().join("run.rpl"), true).unwrap();
        assert_eq!(file.chunks.last(), Some(&s.current));
    }

    #[test]
    fn busy_session_rejects_second_step() {
        let e = engine();
        let shared = SharedSession::new(create_session(&e, EntityKind::GameCar, Domain::Game, 2).unwrap());
        let guard = shared.inner.lock().unwrap();
        assert!(matches!(shared.step(&e, ActionCommand::Left), Err(Error::StepInFlight(_))));
        drop(guard);
        assert!(shared.step(&e, ActionCommand::Left).is_ok());
    }
}
