//! Automatic evaluation: pixel oracle, control judging, visual quality, drift and Elo.

mod arena;
mod control;
mod elo;
mod oracle;
mod quality;
mod report;
mod sweep;

pub use arena::{RolloutJudge, ScoreCard};
pub use control::{
    collect_rollouts, control_success_rate, drift_curve, judge_rollout, stream_consistency, trial_plan, ChunkGenerator,
    ControlReport, DriftReport, SimulatorGenerator, TrialConfig,
};
pub use elo::{
    elo_update, expected_score, run_tournament, tournament_schedule, Comparison, EloRating, Judge, ProbabilityJudge,
    TournamentConfig, TournamentResult, DEFAULT_K, INITIAL_RATING, RATING_QUANTUM,
};
pub use oracle::{background_displacement, estimate_heading, estimate_state, judge_control, OracleConfig, OracleEstimate, Verdict};
pub use quality::{
    assess_chunk, compensated_mad, gradient_energy, palette_affinity, temporal_consistency, CompositeWeights,
    DomainReference, Histogram, QualityReport, HISTOGRAM_BINS, MAD_SCALE,
};
pub use sweep::{config_digest, read_json, run_sweep, sweep_table, DataSpec, ExperimentSpec, ModelStore, SweepRow, SweepSpec};
pub use report::{contact_sheet, EvalReport};
