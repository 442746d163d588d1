use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_view, Scene, Sprite, View};
use super::{
    check_entity_domain, render_chunk, step_dynamics, Chunk, Domain, EntityKind, EntitySpec,
    EpisodeRecord, WorldConfig, WorldState,
};
use crate::action::ActionCommand;
use crate::error::{Error, Result};
use crate::seed;

/// Scripted action process for unlabeled real footage: a sticky Markov chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WanderPolicy {
    pub stay_probability: f64,
    /// Weights of forward, left, right when a new action is drawn.
    pub weights: [f64; 3],
}

impl WanderPolicy {
    pub fn for_entity(entity: EntityKind) -> WanderPolicy {
        match entity {
            EntityKind::GameCar => WanderPolicy { stay_probability: 0.0, weights: [1.0, 1.0, 1.0] },
            EntityKind::RealVehicle => WanderPolicy { stay_probability: 0.5, weights: [0.5, 0.25, 0.25] },
            EntityKind::RealBicycle => WanderPolicy { stay_probability: 0.4, weights: [0.4, 0.3, 0.3] },
            EntityKind::RealPedestrian => WanderPolicy { stay_probability: 0.3, weights: [0.2, 0.4, 0.4] },
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ActionCommand {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                return ActionCommand::COMMANDS[i];
            }
            u -= w;
        }
        ActionCommand::Right
    }

    fn next(&self, prev: ActionCommand, rng: &mut ChaCha8Rng) -> ActionCommand {
        if rng.random::<f64>() < self.stay_probability {
            prev
        } else {
            self.draw(rng)
        }
    }
}

/// How one game or real episode is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub entity: EntityKind,
    pub domain: Domain,
    pub world: WorldConfig,
    pub spec: EntitySpec,
    /// Game episodes draw uniformly per chunk; this policy is used for real ones.
    pub policy: WanderPolicy,
}

impl EpisodeConfig {
    pub fn new(entity: EntityKind, world: WorldConfig) -> Self {
        EpisodeConfig {
            entity,
            domain: entity.domain(),
            world,
            spec: entity.spec(),
            policy: WanderPolicy::for_entity(entity),
        }
    }
}

fn advance(state: &WorldState, action: ActionCommand, spec: &EntitySpec, n: usize) -> Result<Vec<WorldState>> {
    let mut out = Vec::with_capacity(n);
    let mut s = *state;
    for _ in 0..n {
        s = step_dynamics(&s, action, spec)?;
        out.push(s);
    }
    Ok(out)
}

/// Initial observation for a new episode: the state before chunk 0 and the action
/// driving chunk 0 (never recorded as a label).
pub(crate) fn initial_state(config: &EpisodeConfig, seed: u64) -> (WorldState, ActionCommand, ChaCha8Rng) {
    let mut rng = seed::rng(seed, &[seed::tag("episode"), config.entity.index()]);
    let position = [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)];
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let state = WorldState::new(config.entity, position, heading, rng.random());
    let warmup = match config.domain {
        Domain::Game => ActionCommand::COMMANDS[rng.random_range(0..3)],
        _ => config.policy.draw(&mut rng),
    };
    (state, warmup, rng)
}

pub fn generate_episode(config: &EpisodeConfig, seed: u64) -> Result<EpisodeRecord> {
    config.world.validate()?;
    check_entity_domain(config.entity, config.domain)?;
    let c = config.world.chunk_len;
    let k = config.world.chunks;
    let scene = Scene::new(config.domain, seed::derive(seed, &[seed::tag("scene")]));
    let (start, warmup, mut rng) = initial_state(config, seed);

    let mut states = advance(&start, warmup, &config.spec, c)?;
    let mut actions = Vec::with_capacity(k.saturating_sub(1));
    let mut prev = warmup;
    for _ in 1..k {
        let action = match config.domain {
            Domain::Game => ActionCommand::COMMANDS[rng.random_range(0..3)],
            _ => config.policy.next(prev, &mut rng),
        };
        let last = *states.last().expect("chunk 0 rendered");
        states.extend(advance(&last, action, &config.spec, c)?);
        actions.push(action);
        prev = action;
    }
    let chunks = states
        .chunks(c)
        .map(|s| render_chunk(s, &config.spec, &scene, &config.world))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeRecord {
        chunks,
        actions: (config.domain == Domain::Game).then_some(actions),
        entity: Some(config.entity),
        domain: config.domain,
        seed,
        true_states: states,
    })
}

/// Generic-motion episode: a drifting camera over a random texture plus a few
/// coloured disks with their own velocities. Used for stage-1 adaptation.
pub fn generate_generic_episode(world: &WorldConfig, seed: u64) -> Result<EpisodeRecord> {
    world.validate()?;
    let mut rng = seed::rng(seed, &[seed::tag("generic")]);
    let mut scene = Scene::new(Domain::Generic, seed::derive(seed, &[seed::tag("scene")]));
    let sprite_colors: [[u8; 3]; 5] =
        [[40, 170, 120], [200, 200, 60], [90, 60, 150], [230, 150, 170], [20, 110, 110]];
    for _ in 0..rng.random_range(1..=2) {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.0..1.5);
        scene.sprites.push(Sprite {
            origin: [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)],
            velocity: [speed * angle.cos(), speed * angle.sin()],
            radius: rng.random_range(3.0..6.0),
            color: sprite_colors[rng.random_range(0..sprite_colors.len())],
        });
    }
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let turn = rng.random_range(-0.08..0.08);
    let speed = rng.random_range(0.0..2.5);
    let mut position = [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)];
    let n = world.chunk_len * world.chunks;
    let mut states = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        heading = super::normalize_angle(heading + turn);
        position = [position[0] + speed * heading.cos(), position[1] + speed * heading.sin()];
        // camera state; the entity fields are placeholders for this domain
        let state = WorldState {
            position,
            heading,
            speed,
            entity: EntityKind::GameCar,
            domain: Domain::Generic,
            rng_state: 0,
        };
        frames.push(render_view(
            &View { camera: position, heading, entity: None, frame_index: i },
            &scene,
            world,
        ));
        states.push(state);
    }
    let mut chunks = Vec::with_capacity(world.chunks);
    let mut it = frames.into_iter();
    for _ in 0..world.chunks {
        chunks.push(Chunk::new(it.by_ref().take(world.chunk_len).collect())?);
    }
    Ok(EpisodeRecord {
        chunks,
        actions: None,
        entity: None,
        domain: Domain::Generic,
        seed,
        true_states: states,
    })
}

/// A batch of episodes of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// `None` selects the generic-motion corpus.
    pub entity: Option<EntityKind>,
    pub episodes: usize,
    pub world: WorldConfig,
    pub seed: u64,
}

/// Generates `spec.episodes` episodes with seeds derived from `spec.seed`.
/// Each episode is a pure function of its own seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<EpisodeRecord>> {
    if spec.episodes == 0 {
        return Err(Error::InvalidConfig("a corpus needs at least one episode".into()));
    }
    let tag = spec.entity.map_or(seed::tag("generic"), |e| e.index() + 1);
    (0..spec.episodes as u64)
        .map(|i| {
            let s = seed::derive(spec.seed, &[tag, i]);
            match spec.entity {
                Some(e) => generate_episode(&EpisodeConfig::new(e, spec.world), s),
                None => generate_generic_episode(&spec.world, s),
            }
        })
        .collect()
}
