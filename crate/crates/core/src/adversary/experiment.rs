//! Monte Carlo drivers for the attack strategies and token lifetime.
//!
//! Every trial builds its own victim token and server database, then runs
//! the real server state machine over an [`InProcessChannel`]. Trial `i`
//! draws all of its randomness from stream `i` of the experiment seed, so
//! results do not depend on thread scheduling.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use super::strategy::{Impersonator, ObservationBook, RecordedSession, TranscriptReplayer};
use crate::authdb::{AuthDatabase, AuthDbError, ReusePolicy, SharedAuthDb};
use crate::hmp4::Basis;
use crate::protocol::{
    ClientOutcome, ClientRole, HonestClient, Message, ProtocolError, ProtocolParams, ServerConfig,
    ServerMachine,
};
use crate::rng::{fork, stream_rng, SimRng};
use crate::token::QuantumToken;
use crate::transport::{
    run_handshake, Direction, HandshakeReport, InProcessChannel, Transcript, TranscriptEntry,
};

/// Identity the victim token is issued to in every experiment.
pub const VICTIM: &str = "victim";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Params(#[from] ProtocolError),
    #[error("trial count must be positive")]
    NoTrials,
    #[error("at least one observed session is required")]
    NoObservations,
    #[error("repetitions must be positive")]
    NoRepetitions,
    #[error(transparent)]
    Issue(#[from] AuthDbError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Uniform `(a, b)` for every requested register.
    BlindGuess,
    /// Taps this many honest sessions, then answers from what it saw.
    ReplayEavesdropper { observed_sessions: usize },
    /// Has one `(m, a, b)` for every register of the token.
    FullObservation,
    /// Resends one recorded session's `SUBSET` and `RESPONSE` unchanged.
    TranscriptReplay,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyKind::BlindGuess => f.write_str("blind-guess"),
            StrategyKind::ReplayEavesdropper { observed_sessions } => {
                write!(f, "replay-eavesdropper/{observed_sessions}")
            }
            StrategyKind::FullObservation => f.write_str("full-observation"),
            StrategyKind::TranscriptReplay => f.write_str("transcript-replay"),
        }
    }
}

/// Shared parameters of an attack experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackSetup {
    pub k: usize,
    pub t: usize,
    pub trials: u64,
    pub seed: u64,
    /// Server policy for indices that were already accepted. Replay
    /// attacks only have something to replay under
    /// [`ReusePolicy::Allow`].
    pub policy: ReusePolicy,
}

impl AttackSetup {
    pub fn new(k: usize, t: usize, trials: u64, seed: u64) -> Self {
        AttackSetup {
            k,
            t,
            trials,
            seed,
            policy: ReusePolicy::Allow,
        }
    }

    pub fn with_policy(mut self, policy: ReusePolicy) -> Self {
        self.policy = policy;
        self
    }

    fn validate(&self) -> Result<ProtocolParams, ExperimentError> {
        let params = ProtocolParams::new(self.t, self.k)?;
        if self.trials == 0 {
            return Err(ExperimentError::NoTrials);
        }
        Ok(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackExperiment {
    pub strategy: StrategyKind,
    pub setup: AttackSetup,
    pub successes: u64,
    /// Success probability predicted by the per-register analysis, when
    /// there is a closed form for this strategy.
    pub expected: Option<f64>,
}

impl AttackExperiment {
    pub fn trials(&self) -> u64 {
        self.setup.trials
    }

    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.setup.trials as f64
    }

    /// Standard error of the measured rate.
    pub fn std_error(&self) -> f64 {
        binomial_sigma(self.rate(), self.setup.trials)
    }

    /// Normal-approximation 95% interval, clamped to `[0, 1]`.
    pub fn ci95(&self) -> (f64, f64) {
        let half = 1.96 * self.std_error();
        let r = self.rate();
        ((r - half).max(0.0), (r + half).min(1.0))
    }

    /// Binomial standard deviation of the rate if `expected` is the truth.
    pub fn expected_sigma(&self) -> Option<f64> {
        self.expected.map(|p| binomial_sigma(p, self.setup.trials))
    }

    /// Distance between measured and expected rate in units of
    /// [`Self::expected_sigma`]. Infinite if the expectation is degenerate
    /// and the measurement disagrees.
    pub fn deviation_sigmas(&self) -> Option<f64> {
        let p = self.expected?;
        let diff = (self.rate() - p).abs();
        let sigma = binomial_sigma(p, self.setup.trials);
        Some(if sigma > 0.0 {
            diff / sigma
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        })
    }
}

pub fn binomial_sigma(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Ratio of the rate of `to` over the rate of `from`, with its delta-method
/// standard deviation computed from the expected rates.
pub fn decay_ratio(from: &AttackExperiment, to: &AttackExperiment) -> Option<(f64, f64)> {
    let (p1, p2) = (from.expected?, to.expected?);
    let ratio = to.rate() / from.rate();
    let rel1 = (1.0 - p1) / (p1 * from.setup.trials as f64);
    let rel2 = (1.0 - p2) / (p2 * to.setup.trials as f64);
    Some((ratio, (p2 / p1) * (rel1 + rel2).sqrt()))
}

/// Probability that a fixed `n`-subset lies inside a uniform `t`-subset of
/// `1..=k`.
pub fn subset_containment_probability(k: usize, t: usize, n: usize) -> f64 {
    (0..n).map(|i| (t - i) as f64 / (k - i) as f64).product()
}

fn run_trials<F>(setup: &AttackSetup, trial: F) -> u64
where
    F: Fn(&mut SimRng) -> bool + Sync,
{
    (0..setup.trials)
        .into_par_iter()
        .filter(|i| trial(&mut stream_rng(setup.seed, *i)))
        .count() as u64
}

/// Fresh database holding one token issued to [`VICTIM`].
fn victim(k: usize, rng: &mut SimRng) -> (SharedAuthDb, QuantumToken) {
    let mut db = AuthDatabase::new();
    let (token, _) = db.issue(k, VICTIM, rng).expect("parameters validated");
    (SharedAuthDb::new(db), token)
}

fn session<C: ClientRole + ?Sized>(
    client: &mut C,
    db: &SharedAuthDb,
    setup: &AttackSetup,
    channel: &mut InProcessChannel,
    rng: &mut SimRng,
) -> HandshakeReport {
    let config = ServerConfig::new(setup.t).with_reuse(setup.policy);
    let mut server = ServerMachine::new(db.clone(), config, fork(rng));
    run_handshake(client, &mut server, channel)
}

fn honest_session(
    token: &mut QuantumToken,
    db: &SharedAuthDb,
    setup: &AttackSetup,
    channel: &mut InProcessChannel,
    rng: &mut SimRng,
) -> HandshakeReport {
    let mut client = HonestClient::new(token, VICTIM, fork(rng));
    session(&mut client, db, setup, channel, rng)
}

pub fn run_attack(
    strategy: StrategyKind,
    setup: AttackSetup,
) -> Result<AttackExperiment, ExperimentError> {
    let params = setup.validate()?;
    let n = params.subset_size() as i32;
    let (successes, expected) = match strategy {
        StrategyKind::BlindGuess => {
            let hits = run_trials(&setup, |rng| {
                let (db, token) = victim(setup.k, rng);
                let mut attacker = Impersonator::blind(VICTIM, token.token_id().clone(), fork(rng));
                session(
                    &mut attacker,
                    &db,
                    &setup,
                    &mut InProcessChannel::new(),
                    rng,
                )
                .accepted()
            });
            (hits, Some(0.5f64.powi(n)))
        }
        StrategyKind::ReplayEavesdropper { observed_sessions } => {
            if observed_sessions == 0 {
                return Err(ExperimentError::NoObservations);
            }
            let hits = run_trials(&setup, |rng| {
                let (db, mut token) = victim(setup.k, rng);
                let mut channel = InProcessChannel::new();
                let tap = channel.tap();
                for _ in 0..observed_sessions {
                    let report = honest_session(&mut token, &db, &setup, &mut channel, rng);
                    if report.client != ClientOutcome::Accepted {
                        break;
                    }
                }
                let book = ObservationBook::from_transcript(&Transcript::from_tap(&tap));
                let mut attacker =
                    Impersonator::replaying(VICTIM, token.token_id().clone(), book, fork(rng));
                session(
                    &mut attacker,
                    &db,
                    &setup,
                    &mut InProcessChannel::new(),
                    rng,
                )
                .accepted()
            });
            (hits, None)
        }
        StrategyKind::FullObservation => {
            let hits = run_trials(&setup, |rng| {
                let (db, mut token) = victim(setup.k, rng);
                let seen = observation_pass(&mut token, rng);
                let all = (1..=setup.k).collect();
                // the observed exchanges were accepted by the server
                let _ = db.commit_success(token.token_id(), &all, setup.policy);
                let book = ObservationBook::from_transcript(&seen);
                let mut attacker =
                    Impersonator::replaying(VICTIM, token.token_id().clone(), book, fork(rng));
                session(
                    &mut attacker,
                    &db,
                    &setup,
                    &mut InProcessChannel::new(),
                    rng,
                )
                .accepted()
            });
            let expected = match setup.policy {
                ReusePolicy::Allow => 0.75f64.powi(n),
                ReusePolicy::Reject => 0.0,
            };
            (hits, Some(expected))
        }
        StrategyKind::TranscriptReplay => {
            let hits = run_trials(&setup, |rng| replay_attempt(&setup, rng).accepted);
            let expected = match setup.policy {
                ReusePolicy::Allow => {
                    subset_containment_probability(setup.k, setup.t, n as usize) * 0.75f64.powi(n)
                }
                ReusePolicy::Reject => 0.0,
            };
            (hits, Some(expected))
        }
    };
    Ok(AttackExperiment {
        strategy,
        setup,
        successes,
        expected,
    })
}

pub fn run_blind_guess(
    k: usize,
    t: usize,
    trials: u64,
    seed: u64,
) -> Result<AttackExperiment, ExperimentError> {
    run_attack(
        StrategyKind::BlindGuess,
        AttackSetup::new(k, t, trials, seed),
    )
}

pub fn run_replay_eavesdropper(
    k: usize,
    t: usize,
    observed_sessions: usize,
    trials: u64,
    seed: u64,
) -> Result<AttackExperiment, ExperimentError> {
    run_attack(
        StrategyKind::ReplayEavesdropper { observed_sessions },
        AttackSetup::new(k, t, trials, seed),
    )
}

pub fn run_full_observation(
    k: usize,
    t: usize,
    trials: u64,
    seed: u64,
) -> Result<AttackExperiment, ExperimentError> {
    run_attack(
        StrategyKind::FullObservation,
        AttackSetup::new(k, t, trials, seed),
    )
}

/// What an eavesdropper collects by tapping enough sessions to see every
/// register once: per register, a random basis and the holder's honest
/// answer, written as the `BASES`/`RESPONSE` lines that carry them.
fn observation_pass(token: &mut QuantumToken, rng: &mut SimRng) -> Transcript {
    let mut bases = BTreeMap::new();
    let mut replies = BTreeMap::new();
    for index in 1..=token.k() {
        let m = Basis::random(rng);
        replies.insert(
            index,
            token.measure_slot(index, m, rng).expect("fresh register"),
        );
        bases.insert(index, m);
    }
    let entry = |direction, msg: Message| TranscriptEntry {
        direction,
        line: msg.to_string(),
        elapsed: Default::default(),
    };
    Transcript::new(vec![
        entry(Direction::ServerToClient, Message::Bases(bases)),
        entry(Direction::ClientToServer, Message::Response(replies)),
    ])
}

/// One verbatim replay against a fresh session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayAttempt {
    pub recorded: Transcript,
    pub replay: Transcript,
    /// The fresh `L_C` equals the recorded one.
    pub same_subset: bool,
    /// The fresh `L_C` and bases both equal the recorded ones.
    pub same_challenge: bool,
    pub accepted: bool,
}

/// Records one honest session, then replays it in a new session.
pub fn replay_attempt(setup: &AttackSetup, rng: &mut SimRng) -> ReplayAttempt {
    let (db, mut token) = victim(setup.k, rng);
    let recorded = honest_session(&mut token, &db, setup, &mut InProcessChannel::new(), rng);
    let session_record =
        RecordedSession::from_transcript(&recorded.transcript).expect("honest session completes");
    let mut replayer = TranscriptReplayer::new(session_record, fork(rng));
    let replay = session(&mut replayer, &db, setup, &mut InProcessChannel::new(), rng);
    ReplayAttempt {
        recorded: recorded.transcript,
        replay: replay.transcript.clone(),
        same_subset: replayer.same_subset(),
        same_challenge: replayer.same_challenge(),
        accepted: replay.accepted(),
    }
}

/// `attempts` seeded replay attempts, attempt `i` on stream `i`.
pub fn replay_attempts(setup: &AttackSetup) -> Result<Vec<ReplayAttempt>, ExperimentError> {
    setup.validate()?;
    Ok((0..setup.trials)
        .into_par_iter()
        .map(|i| replay_attempt(setup, &mut stream_rng(setup.seed, i)))
        .collect())
}

/// Outcome of authenticating with one token until it runs out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LifetimeReport {
    pub k: usize,
    pub t: usize,
    pub sessions_completed: usize,
    /// Registers the holder measured in each completed session.
    pub consumed_per_session: Vec<usize>,
    pub registers_consumed: usize,
    /// Indices the server has accepted, for comparison with the client.
    pub server_consumed: usize,
    /// First session (counting from 1) after which renewal was due.
    pub renewal_first_session: Option<usize>,
    /// Used-register count at that point.
    pub renewal_first_used: Option<usize>,
    /// The client hit `ABORT token-exhausted`.
    pub exhausted: bool,
    /// Sessions that ended in anything other than success or exhaustion.
    pub failures: usize,
}

/// Talks the victim into authenticating over and over, measuring
/// registers each time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExhaustionAttacker {
    /// Stop after this many completed sessions; `None` runs until the
    /// token is exhausted.
    pub sessions_to_force: Option<usize>,
}

impl ExhaustionAttacker {
    pub fn run(&self, k: usize, t: usize, seed: u64) -> Result<LifetimeReport, ExperimentError> {
        ProtocolParams::new(t, k)?;
        Ok(self.run_with(k, t, &mut stream_rng(seed, 0)))
    }

    fn run_with(&self, k: usize, t: usize, rng: &mut SimRng) -> LifetimeReport {
        let setup = AttackSetup::new(k, t, 1, 0).with_policy(ReusePolicy::Reject);
        let (db, mut token) = victim(k, rng);
        let mut report = LifetimeReport {
            k,
            t,
            sessions_completed: 0,
            consumed_per_session: Vec::new(),
            registers_consumed: 0,
            server_consumed: 0,
            renewal_first_session: None,
            renewal_first_used: None,
            exhausted: false,
            failures: 0,
        };
        let cap = self.sessions_to_force.unwrap_or(usize::MAX);
        // every session measures at least two registers
        let bound = k / 2 + 1;
        while report.sessions_completed < cap && report.sessions_completed + report.failures < bound
        {
            let before = token.used_count();
            let outcome =
                honest_session(&mut token, &db, &setup, &mut InProcessChannel::new(), rng).client;
            match outcome {
                ClientOutcome::Accepted => {
                    report.sessions_completed += 1;
                    report
                        .consumed_per_session
                        .push(token.used_count() - before);
                    if report.renewal_first_session.is_none() && token.renewal_due() {
                        report.renewal_first_session = Some(report.sessions_completed);
                        report.renewal_first_used = Some(token.used_count());
                    }
                }
                ClientOutcome::Exhausted => {
                    report.exhausted = true;
                    break;
                }
                _ => report.failures += 1,
            }
        }
        report.registers_consumed = token.used_count();
        report.server_consumed = db
            .lookup(token.token_id())
            .map(|r| r.server_used.len())
            .unwrap_or(0);
        report
    }
}

pub fn run_exhaustion(k: usize, t: usize, seed: u64) -> Result<LifetimeReport, ExperimentError> {
    ExhaustionAttacker::default().run(k, t, seed)
}

/// One row of a lifetime sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LifetimeRow {
    pub t: usize,
    pub repetitions: usize,
    pub mean_sessions: f64,
    /// Sample standard deviation; zero for a single repetition.
    pub std_sessions: f64,
    pub min_sessions: usize,
    pub max_sessions: usize,
}

/// Mean sessions until exhaustion for each `t`, over `repetitions` tokens.
pub fn sweep_lifetime(
    k: usize,
    t_values: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<LifetimeRow>, ExperimentError> {
    if repetitions == 0 {
        return Err(ExperimentError::NoRepetitions);
    }
    for &t in t_values {
        ProtocolParams::new(t, k)?;
    }
    let attacker = ExhaustionAttacker::default();
    Ok(t_values
        .iter()
        .enumerate()
        .map(|(row, &t)| {
            let counts: Vec<usize> = (0..repetitions)
                .into_par_iter()
                .map(|rep| {
                    let stream = ((row as u64) << 32) | rep as u64;
                    attacker
                        .run_with(k, t, &mut stream_rng(seed, stream))
                        .sessions_completed
                })
                .collect();
            let n = counts.len() as f64;
            let mean = counts.iter().sum::<usize>() as f64 / n;
            let var = if counts.len() > 1 {
                counts
                    .iter()
                    .map(|c| (*c as f64 - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            LifetimeRow {
                t,
                repetitions,
                mean_sessions: mean,
                std_sessions: var.sqrt(),
                min_sessions: counts.iter().copied().min().unwrap_or(0),
                max_sessions: counts.iter().copied().max().unwrap_or(0),
            }
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.6}"))
}

/// Tab-delimited table with a header row.
pub fn attack_table(rows: &[AttackExperiment]) -> String {
    let mut out = String::from(
        "strategy\tk\tt\ttrials\tseed\tpolicy\tsuccesses\trate\tci95_low\tci95_high\texpected\tdeviation_sigma\n",
    );
    for r in rows {
        let (lo, hi) = r.ci95();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            r.strategy,
            r.setup.k,
            r.setup.t,
            r.setup.trials,
            r.setup.seed,
            r.setup.policy,
            r.successes,
            r.rate(),
            lo,
            hi,
            fmt_opt(r.expected),
            r.deviation_sigmas()
                .map_or_else(|| "-".to_owned(), |d| format!("{d:.2}")),
        ));
    }
    out
}

pub fn lifetime_table(rows: &[LifetimeRow]) -> String {
    let mut out =
        String::from("t\trepetitions\tmean_sessions\tstd_sessions\tmin_sessions\tmax_sessions\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\n",
            r.t, r.repetitions, r.mean_sessions, r.std_sessions, r.min_sessions, r.max_sessions
        ));
    }
    out
}

pub fn lifetime_report_table(report: &LifetimeReport) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_owned(), |v| v.to_string());
    format!(
        "k\tt\tsessions_completed\tregisters_consumed\tserver_consumed\trenewal_session\trenewal_used\texhausted\n\
         {}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        report.k,
        report.t,
        report.sessions_completed,
        report.registers_consumed,
        report.server_consumed,
        opt(report.renewal_first_session),
        opt(report.renewal_first_used),
        report.exhausted,
    )
}
