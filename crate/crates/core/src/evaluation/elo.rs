//! Elo ratings and seeded pairwise tournaments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_K: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloRating {
    pub model: String,
    pub rating: f64,
    pub games: u32,
}

impl EloRating {
    pub fn new(model: impl Into<String>) -> Self {
        EloRating { model: model.into(), rating: INITIAL_RATING, games: 0 }
    }
}

/// Expected score of a player rated `ra` against `rb`.
pub fn expected_score(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

/// Rating changes are rounded to multiples of this, so every sum of ratings
/// below 2^32 is exact in `f64` and tournaments stay zero-sum without drift.
pub const RATING_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

/// One rating adjustment. `outcome` is the score of `a` (1 win, 0.5 draw, 0 loss).
/// `b` moves by exactly the negation of `a`'s change.
pub fn elo_update(a: &mut EloRating, b: &mut EloRating, outcome: f64, k: f64) -> Result<()> {
    if !(k > 0.0) {
        return Err(Error::InvalidConfig(format!("K-factor must be positive, got {k}")));
    }
    if ![0.0, 0.5, 1.0].contains(&outcome) {
        return Err(Error::InvalidConfig(format!("outcome must be 0, 0.5 or 1, got {outcome}")));
    }
    let delta = (k * (outcome - expected_score(a.rating, b.rating)) / RATING_QUANTUM).round() * RATING_QUANTUM;
    a.rating += delta;
    b.rating -= delta;
    a.games += 1;
    b.games += 1;
    Ok(())
}

/// Decides one comparison between models `a` and `b` on game `game`, returning
/// the score of `a`.
pub trait Judge {
    fn compare(&mut self, a: usize, b: usize, game: u64) -> Result<f64>;
}

impl<F: FnMut(usize, usize, u64) -> Result<f64>> Judge for F {
    fn compare(&mut self, a: usize, b: usize, game: u64) -> Result<f64> {
        self(a, b, game)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TournamentConfig {
    pub comparisons: usize,
    pub k: f64,
    pub seed: u64,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        TournamentConfig { comparisons: 500, k: DEFAULT_K, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: usize,
    pub b: usize,
    pub game: u64,
    pub score_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentResult {
    pub ratings: Vec<EloRating>,
    pub log: Vec<Comparison>,
    pub config: TournamentConfig,
}

/// Pairings drawn up front: uniform over ordered pairs of distinct models, each with
/// its own game seed.
pub fn tournament_schedule(models: usize, config: &TournamentConfig) -> Vec<(usize, usize, u64)> {
    let mut rng = seed::rng(config.seed, &[seed::tag("elo-schedule")]);
    (0..config.comparisons)
        .map(|_| {
            let a = rng.random_range(0..models);
            let mut b = rng.random_range(0..models - 1);
            if b >= a {
                b += 1;
            }
            (a, b, rng.random())
        })
        .collect()
}

pub fn run_tournament<J: Judge + ?Sized>(models: &[String], judge: &mut J, config: &TournamentConfig) -> Result<TournamentResult> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("a tournament needs at least two models".into()));
    }
    let mut ratings: Vec<_> = models.iter().map(EloRating::new).collect();
    let mut log = Vec::with_capacity(config.comparisons);
    for (a, b, game) in tournament_schedule(models.len(), config) {
        let score_a = judge.compare(a, b, game)?;
        let (x, y) = if a < b {
            let (l, r) = ratings.split_at_mut(b);
            (&mut l[a], &mut r[0])
        } else {
            let (l, r) = ratings.split_at_mut(a);
            (&mut r[0], &mut l[b])
        };
        elo_update(x, y, score_a, config.k)?;
        log.push(Comparison { a, b, game, score_a });
    }
    Ok(TournamentResult { ratings, log, config: *config })
}

/// Judge that lets model `strong` beat `weak` with a fixed probability, seeded per game.
#[derive(Debug, Clone, Copy)]
pub struct ProbabilityJudge {
    pub strong: usize,
    pub p_win: f64,
}

impl Judge for ProbabilityJudge {
    fn compare(&mut self, a: usize, _b: usize, game: u64) -> Result<f64> {
        let u: f64 = seed::rng(game, &[seed::tag("coin")]).random();
        let strong_wins = u < self.p_win;
        Ok(if (a == self.strong) == strong_wins { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn single_game_values() {
        let (mut a, mut b) = (EloRating::new("a"), EloRating::new("b"));
        elo_update(&mut a, &mut b, 1.0, 32.0).unwrap();
        assert_eq!((a.rating, b.rating), (1016.0, 984.0));
        let (mut a, mut b) = (EloRating::new("a"), EloRating::new("b"));
        elo_update(&mut a, &mut b, 0.5, 32.0).unwrap();
        assert_eq!((a.rating, b.rating), (1000.0, 1000.0));
        assert!(elo_update(&mut a, &mut b, 0.5, 0.0).is_err());
    }

    #[test]
    fn single_model_is_rejected() {
        let mut j = ProbabilityJudge { strong: 0, p_win: 0.5 };
        assert!(run_tournament(&["x".into()], &mut j, &TournamentConfig::default()).is_err());
    }

    #[test]
    fn identical_models_stay_near_start() {
        for seed in 0..20 {
            let cfg = TournamentConfig { seed, ..TournamentConfig::default() };
            let mut fair = ProbabilityJudge { strong: 0, p_win: 0.5 };
            let r = run_tournament(&["a".into(), "b".into()], &mut fair, &cfg).unwrap();
            assert_eq!(r.ratings.iter().map(|x| x.rating).sum::<f64>(), 2000.0);
        }
        let mut draw = |_: usize, _: usize, _: u64| Ok(0.5);
        let r = run_tournament(&["a".into(), "b".into()], &mut draw, &TournamentConfig::default()).unwrap();
        assert!(r.ratings.iter().all(|x| (x.rating - 1000.0).abs() <= 2.0 * DEFAULT_K));
    }

    proptest! {
        #[test]
        fn updates_are_zero_sum(ra in 0u64..3000 << 20, rb in 0u64..3000 << 20, o in 0usize..3, k in 1.0f64..64.0) {
            let mut a = EloRating { model: "a".into(), rating: ra as f64 * RATING_QUANTUM, games: 0 };
            let mut b = EloRating { model: "b".into(), rating: rb as f64 * RATING_QUANTUM, games: 0 };
            let before = a.rating + b.rating;
            elo_update(&mut a, &mut b, o as f64 / 2.0, k).unwrap();
            prop_assert_eq!(a.rating + b.rating, before);
        }

        #[test]
        fn equal_ratings_are_symmetric(r in 0u64..3000 << 20, k in 1.0f64..64.0) {
            let r = r as f64 * RATING_QUANTUM;
            let mut a = EloRating { model: "a".into(), rating: r, games: 0 };
            let mut b = EloRating { model: "b".into(), rating: r, games: 0 };
            elo_update(&mut a, &mut b, 1.0, k).unwrap();
            prop_assert_eq!(a.rating - r, r - b.rating);
        }
    }
}
