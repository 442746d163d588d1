//! Head-to-head judging of generators on shared seeded rollouts, for Elo tournaments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::control::{judge_rollout, trial_plan, ChunkGenerator, TrialConfig};
use super::elo::Judge;
use super::oracle::{OracleConfig, Verdict};
use super::quality::{assess_chunk, DomainReference};
use crate::error::{Error, Result};
use crate::worldsim::{Domain, EntityKind};

/// How one generator did on one game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    /// Chunks the oracle judged as following their command.
    pub correct: usize,
    /// Mean composite quality of the generated chunks.
    pub quality: f64,
}

impl ScoreCard {
    /// Score of `self` against `other`: more correct chunks wins, then higher
    /// quality; an exact tie is a draw.
    pub fn versus(&self, other: &ScoreCard) -> f64 {
        match self.correct.cmp(&other.correct) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => match self.quality.partial_cmp(&other.quality) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Less) => 0.0,
                _ => 0.5,
            },
        }
    }
}

/// Every game plays one seeded rollout per side: same entity, seed chunk and
/// action plan. The entity cycles through `entities` with the game seed.
pub struct RolloutJudge<'a> {
    pub models: Vec<&'a dyn ChunkGenerator>,
    pub entities: Vec<EntityKind>,
    pub references: BTreeMap<Domain, DomainReference>,
    pub oracle: OracleConfig,
    pub rollout_len: usize,
}

impl RolloutJudge<'_> {
    pub fn score(&self, model: usize, game: u64) -> Result<ScoreCard> {
        if self.entities.is_empty() {
            return Err(Error::Evaluation("the judge needs at least one entity".into()));
        }
        let entity = self.entities[(game % self.entities.len() as u64) as usize];
        let reference = self
            .references
            .get(&entity.domain())
            .ok_or_else(|| Error::Evaluation(format!("no {} reference", entity.domain())))?;
        let generator = self.models.get(model).ok_or_else(|| Error::Evaluation(format!("no model {model}")))?;
        let cfg = TrialConfig { trials: 1, rollout_len: self.rollout_len, seed: game, batch: 1 };
        let (seed, plan) = trial_plan(entity, &cfg, 0);
        let world = generator.world();
        let chunks = generator.rollouts(entity, &[seed], std::slice::from_ref(&plan))?.remove(0);
        let correct = judge_rollout(&chunks, &plan, entity, &world, &self.oracle).iter().filter(|v| **v == Verdict::Success).count();
        let spec = entity.spec();
        let quality = (1..chunks.len())
            .map(|k| assess_chunk(&chunks[k], Some(chunks[k - 1].last_frame()), &spec, reference, &world, &self.oracle).composite())
            .sum::<f64>()
            / plan.len().max(1) as f64;
        Ok(ScoreCard { correct, quality })
    }
}

impl Judge for RolloutJudge<'_> {
    fn compare(&mut self, a: usize, b: usize, game: u64) -> Result<f64> {
        Ok(self.score(a, game)?.versus(&self.score(b, game)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::control::SimulatorGenerator;
    use crate::evaluation::elo::{run_tournament, TournamentConfig, DEFAULT_K, INITIAL_RATING};
    use crate::worldsim::WorldConfig;

    fn references(world: &WorldConfig) -> BTreeMap<Domain, DomainReference> {
        [Domain::Game, Domain::Real].into_iter().map(|d| (d, DomainReference::build(d, world, 2, 1).unwrap())).collect()
    }

    #[test]
    fn versus_orders_by_correct_then_quality() {
        let a = ScoreCard { correct: 2, quality: 0.1 };
        let b = ScoreCard { correct: 1, quality: 0.9 };
        assert_eq!(a.versus(&b), 1.0);
        assert_eq!(b.versus(&a), 0.0);
        let c = ScoreCard { correct: 2, quality: 0.2 };
        assert_eq!(c.versus(&a), 1.0);
        assert_eq!(a.versus(&a), 0.5);
    }

    #[test]
    fn identical_generators_only_draw() {
        let world = WorldConfig::reduced();
        let sim = SimulatorGenerator { world };
        let mut judge = RolloutJudge {
            models: vec![&sim, &sim],
            entities: EntityKind::ALL.to_vec(),
            references: references(&world),
            oracle: OracleConfig::default(),
            rollout_len: 2,
        };
        let cfg = TournamentConfig { comparisons: 12, ..TournamentConfig::default() };
        let r = run_tournament(&["a".into(), "b".into()], &mut judge, &cfg).unwrap();
        assert!(r.log.iter().all(|c| c.score_a == 0.5));
        assert!(r.ratings.iter().all(|x| (x.rating - INITIAL_RATING).abs() <= 2.0 * DEFAULT_K));
    }

    /// A generator that freezes the seed chunk never follows a command.
    struct Frozen(WorldConfig);

    impl ChunkGenerator for Frozen {
        fn world(&self) -> WorldConfig {
            self.0
        }

        fn rollouts(&self, entity: EntityKind, seeds: &[u64], plans: &[Vec<crate::ActionCommand>]) -> Result<Vec<Vec<crate::Chunk>>> {
            let sim = SimulatorGenerator { world: self.0 };
            let seeded = sim.rollouts(entity, seeds, &vec![Vec::new(); seeds.len()])?;
            Ok(seeded.into_iter().zip(plans).map(|(mut c, p)| {
                let first = c[0].clone();
                c.extend(std::iter::repeat_n(first, p.len()));
                c
            }).collect())
        }
    }

    #[test]
    fn simulator_beats_frozen_generator() {
        let world = WorldConfig::reduced();
        let sim = SimulatorGenerator { world };
        let frozen = Frozen(world);
        let mut judge = RolloutJudge {
            models: vec![&sim, &frozen],
            entities: vec![EntityKind::GameCar, EntityKind::RealVehicle],
            references: references(&world),
            oracle: OracleConfig::default(),
            rollout_len: 2,
        };
        let cfg = TournamentConfig { comparisons: 10, ..TournamentConfig::default() };
        let r = run_tournament(&["sim".into(), "frozen".into()], &mut judge, &cfg).unwrap();
        assert!(r.ratings[0].rating > r.ratings[1].rating + 100.0, "{:?}", r.ratings);
    }
}
