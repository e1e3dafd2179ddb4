//! Attacker-side client roles.
//!
//! Everything here works from what crosses the wire: the victim's identity
//! and token id, and any lines captured by a tap. None of it can see the
//! server's classical strings or the victim's register states.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::hmp4::{Basis, Outcome};
use crate::protocol::{AbortReason, ClientOutcome, ClientRole, Message};
use crate::token::TokenId;
use crate::transport::{Direction, Transcript};

/// Everything an eavesdropper has learned: for each register index, the
/// `(m, a, b)` triples seen in completed exchanges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObservationBook {
    seen: BTreeMap<usize, Vec<(Basis, Outcome)>>,
}

impl ObservationBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transcript(transcript: &Transcript) -> Self {
        let mut book = Self::new();
        book.absorb(transcript);
        book
    }

    /// Adds every `BASES`/`RESPONSE` pair found in `transcript`. The
    /// transcript may hold several sessions back to back.
    pub fn absorb(&mut self, transcript: &Transcript) {
        let mut pending: Option<BTreeMap<usize, Basis>> = None;
        for (direction, msg) in transcript.messages() {
            match (direction, msg) {
                (Direction::ServerToClient, Message::Bases(bases)) => pending = Some(bases),
                (Direction::ClientToServer, Message::Response(replies)) => {
                    if let Some(bases) = pending.take() {
                        for (index, outcome) in replies {
                            if let Some(m) = bases.get(&index) {
                                self.record(index, *m, outcome);
                            }
                        }
                    }
                }
                (_, Message::Auth { .. }) => pending = None,
                _ => {}
            }
        }
    }

    pub fn record(&mut self, index: usize, basis: Basis, outcome: Outcome) {
        let entry = self.seen.entry(index).or_default();
        if !entry.contains(&(basis, outcome)) {
            entry.push((basis, outcome));
        }
    }

    /// A recorded outcome for `index` under `basis`, if any.
    pub fn lookup(&self, index: usize, basis: Basis) -> Option<Outcome> {
        self.seen
            .get(&index)?
            .iter()
            .find(|(m, _)| *m == basis)
            .map(|(_, o)| *o)
    }

    pub fn is_observed(&self, index: usize) -> bool {
        self.seen.contains_key(&index)
    }

    /// Number of registers with at least one observation.
    pub fn registers(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

enum Phase {
    Start,
    AwaitChallenge,
    AwaitBases,
    AwaitResult,
    Done,
}

/// Impersonates the victim without holding the token.
///
/// For each requested `(i, m)` it answers from its [`ObservationBook`] when
/// it has seen register `i` answered in basis `m`, and guesses a uniform
/// `(a, b)` otherwise. With an empty book this is the blind guesser.
pub struct Impersonator<R> {
    identity: String,
    token_id: TokenId,
    book: ObservationBook,
    rng: R,
    phase: Phase,
    outcome: ClientOutcome,
    answered_from_book: usize,
}

impl<R: Rng> Impersonator<R> {
    pub fn blind(identity: impl Into<String>, token_id: TokenId, rng: R) -> Self {
        Self::replaying(identity, token_id, ObservationBook::new(), rng)
    }

    pub fn replaying(
        identity: impl Into<String>,
        token_id: TokenId,
        book: ObservationBook,
        rng: R,
    ) -> Self {
        Impersonator {
            identity: identity.into(),
            token_id,
            book,
            rng,
            phase: Phase::Start,
            outcome: ClientOutcome::Pending,
            answered_from_book: 0,
        }
    }

    pub fn book(&self) -> &ObservationBook {
        &self.book
    }

    /// Replies taken from the book in the last session rather than guessed.
    pub fn answered_from_book(&self) -> usize {
        self.answered_from_book
    }

    /// Picks `2t/3` indices of `L_S`, observed registers first.
    fn choose_subset(&mut self, challenge: &BTreeSet<usize>) -> BTreeSet<usize> {
        let size = 2 * challenge.len() / 3;
        let (observed, unobserved): (Vec<usize>, Vec<usize>) =
            challenge.iter().partition(|i| self.book.is_observed(**i));
        let mut subset: BTreeSet<usize> = observed
            .choose_multiple(&mut self.rng, size)
            .copied()
            .collect();
        let missing = size - subset.len();
        subset.extend(unobserved.choose_multiple(&mut self.rng, missing).copied());
        subset
    }

    fn finish(&mut self, outcome: ClientOutcome) {
        self.phase = Phase::Done;
        self.outcome = outcome;
    }
}

impl<R: Rng> ClientRole for Impersonator<R> {
    fn open(&mut self) -> Message {
        self.phase = Phase::AwaitChallenge;
        self.answered_from_book = 0;
        Message::Auth {
            identity: self.identity.clone(),
            token_id: self.token_id.clone(),
        }
    }

    fn on_message(&mut self, msg: Message) -> Option<Message> {
        match (&self.phase, msg) {
            (Phase::Done, _) => None,
            (_, Message::Result(ok)) => {
                let complete = matches!(self.phase, Phase::AwaitResult);
                self.finish(if ok && complete {
                    ClientOutcome::Accepted
                } else {
                    ClientOutcome::Rejected
                });
                None
            }
            (_, Message::Abort(reason)) => {
                self.finish(ClientOutcome::Aborted(reason));
                None
            }
            (Phase::AwaitChallenge, Message::Challenge(challenge)) => {
                self.phase = Phase::AwaitBases;
                Some(Message::Subset(self.choose_subset(&challenge)))
            }
            (Phase::AwaitBases, Message::Bases(bases)) => {
                let mut replies = BTreeMap::new();
                for (index, m) in bases {
                    let reply = match self.book.lookup(index, m) {
                        Some(known) => {
                            self.answered_from_book += 1;
                            known
                        }
                        None => Outcome::random(&mut self.rng),
                    };
                    replies.insert(index, reply);
                }
                self.phase = Phase::AwaitResult;
                Some(Message::Response(replies))
            }
            _ => {
                self.finish(ClientOutcome::Aborted(AbortReason::ProtocolError));
                Some(Message::Abort(AbortReason::ProtocolError))
            }
        }
    }

    fn outcome(&self) -> ClientOutcome {
        self.outcome
    }
}

/// The recorded client half of one honest session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordedSession {
    pub identity: String,
    pub token_id: TokenId,
    pub subset: BTreeSet<usize>,
    pub bases: BTreeMap<usize, Basis>,
    pub response_line: String,
}

impl RecordedSession {
    /// Extracts the first complete exchange from `transcript`.
    pub fn from_transcript(transcript: &Transcript) -> Option<Self> {
        let mut auth = None;
        let mut subset = None;
        let mut bases = None;
        for entry in transcript.entries() {
            let Ok(msg) = Message::parse(&entry.line) else {
                continue;
            };
            match (entry.direction, msg) {
                (Direction::ClientToServer, Message::Auth { identity, token_id }) => {
                    auth = Some((identity, token_id));
                    subset = None;
                    bases = None;
                }
                (Direction::ClientToServer, Message::Subset(s)) => subset = Some(s),
                (Direction::ServerToClient, Message::Bases(b)) => bases = Some(b),
                (Direction::ClientToServer, Message::Response(_)) => {
                    let (identity, token_id) = auth.take()?;
                    return Some(RecordedSession {
                        identity,
                        token_id,
                        subset: subset.take()?,
                        bases: bases.take()?,
                        response_line: entry.line.clone(),
                    });
                }
                _ => {}
            }
        }
        None
    }
}

/// Replays a recorded session: the same `SUBSET` whenever the new
/// challenge allows it, then the recorded `RESPONSE` line unchanged.
pub struct TranscriptReplayer<R> {
    recorded: RecordedSession,
    rng: R,
    phase: Phase,
    outcome: ClientOutcome,
    sent_subset: Option<BTreeSet<usize>>,
    received_bases: Option<BTreeMap<usize, Basis>>,
}

impl<R: Rng> TranscriptReplayer<R> {
    pub fn new(recorded: RecordedSession, rng: R) -> Self {
        TranscriptReplayer {
            recorded,
            rng,
            phase: Phase::Start,
            outcome: ClientOutcome::Pending,
            sent_subset: None,
            received_bases: None,
        }
    }

    pub fn recorded(&self) -> &RecordedSession {
        &self.recorded
    }

    /// Whether this session's `L_C` equals the recorded one.
    pub fn same_subset(&self) -> bool {
        self.sent_subset.as_ref() == Some(&self.recorded.subset)
    }

    /// Whether this session's `L_C` and bases both equal the recorded ones.
    pub fn same_challenge(&self) -> bool {
        self.same_subset() && self.received_bases.as_ref() == Some(&self.recorded.bases)
    }

    fn finish(&mut self, outcome: ClientOutcome) {
        self.phase = Phase::Done;
        self.outcome = outcome;
    }
}

impl<R: Rng> ClientRole for TranscriptReplayer<R> {
    fn open(&mut self) -> Message {
        self.phase = Phase::AwaitChallenge;
        Message::Auth {
            identity: self.recorded.identity.clone(),
            token_id: self.recorded.token_id.clone(),
        }
    }

    fn on_message(&mut self, msg: Message) -> Option<Message> {
        match (&self.phase, msg) {
            (Phase::Done, _) => None,
            (_, Message::Result(ok)) => {
                let complete = matches!(self.phase, Phase::AwaitResult);
                self.finish(if ok && complete {
                    ClientOutcome::Accepted
                } else {
                    ClientOutcome::Rejected
                });
                None
            }
            (_, Message::Abort(reason)) => {
                self.finish(ClientOutcome::Aborted(reason));
                None
            }
            (Phase::AwaitChallenge, Message::Challenge(challenge)) => {
                let size = 2 * challenge.len() / 3;
                let subset = if self.recorded.subset.len() == size
                    && self.recorded.subset.is_subset(&challenge)
                {
                    self.recorded.subset.clone()
                } else {
                    let pool: Vec<usize> = challenge.into_iter().collect();
                    pool.choose_multiple(&mut self.rng, size).copied().collect()
                };
                self.sent_subset = Some(subset.clone());
                self.phase = Phase::AwaitBases;
                Some(Message::Subset(subset))
            }
            (Phase::AwaitBases, Message::Bases(bases)) => {
                self.received_bases = Some(bases);
                self.phase = Phase::AwaitResult;
                match Message::parse(&self.recorded.response_line) {
                    Ok(reply) => Some(reply),
                    Err(_) => {
                        self.finish(ClientOutcome::Aborted(AbortReason::ProtocolError));
                        Some(Message::Abort(AbortReason::ProtocolError))
                    }
                }
            }
            _ => {
                self.finish(ClientOutcome::Aborted(AbortReason::ProtocolError));
                Some(Message::Abort(AbortReason::ProtocolError))
            }
        }
    }

    fn outcome(&self) -> ClientOutcome {
        self.outcome
    }
}
