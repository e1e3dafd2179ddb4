//! Attacks on the protocol and experiments measuring how often they work.
//!
//! [`strategy`] holds the attacker-side client roles. They only see wire
//! traffic. [`experiment`] runs them, many times over, against real server
//! sessions and summarizes the success rates, and also measures how many
//! sessions a token survives.

pub mod experiment;
pub mod strategy;

pub use experiment::{
    attack_table, binomial_sigma, decay_ratio, lifetime_report_table, lifetime_table,
    replay_attempt, replay_attempts, run_attack, run_blind_guess, run_exhaustion,
    run_full_observation, run_replay_eavesdropper, subset_containment_probability, sweep_lifetime,
    AttackExperiment, AttackSetup, ExhaustionAttacker, ExperimentError, LifetimeReport,
    LifetimeRow, ReplayAttempt, StrategyKind, VICTIM,
};
pub use strategy::{Impersonator, ObservationBook, RecordedSession, TranscriptReplayer};
