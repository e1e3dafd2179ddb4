//! The individual protocol steps, as pure functions over session state.
//!
//! [`super::machine`] sequences these into client and server state
//! machines; tests and adversaries can also call them directly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom};
use rand::Rng;

use super::message::{AbortReason, Message};
use super::{FailureReason, ProtocolError, ProtocolParams, Verdict};
use crate::authdb::{ReusePolicy, TokenRecord};
use crate::hmp4::{hmp4_condition, Basis, Outcome};
use crate::token::{QuantumToken, TokenError, TokenId};

/// Server-side state of one authentication attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeSession {
    token_id: TokenId,
    identity: String,
    params: ProtocolParams,
    challenge: BTreeSet<usize>,
    subset: BTreeSet<usize>,
    bases: BTreeMap<usize, Basis>,
    replies: BTreeMap<usize, Outcome>,
    verdict: Verdict,
}

impl ChallengeSession {
    pub fn token_id(&self) -> &TokenId {
        &self.token_id
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn params(&self) -> ProtocolParams {
        self.params
    }

    /// `L_S`, the indices nominated by the server.
    pub fn challenge(&self) -> &BTreeSet<usize> {
        &self.challenge
    }

    /// `L_C`, the indices the client chose to measure.
    pub fn subset(&self) -> &BTreeSet<usize> {
        &self.subset
    }

    pub fn bases(&self) -> &BTreeMap<usize, Basis> {
        &self.bases
    }

    pub fn replies(&self) -> &BTreeMap<usize, Outcome> {
        &self.replies
    }

    pub fn verdict(&self) -> &Verdict {
        &self.verdict
    }

    pub(crate) fn fail(&mut self, reason: FailureReason) {
        self.verdict = Verdict::Failure(reason);
    }

    pub(crate) fn succeed(&mut self) {
        self.verdict = Verdict::Success;
    }
}

/// Starts a session: draws `L_S` uniformly among the `t`-subsets of `1..=k`.
pub fn server_begin<R: Rng + ?Sized>(
    record: &TokenRecord,
    identity: &str,
    t: usize,
    rng: &mut R,
) -> Result<(ChallengeSession, Message), ProtocolError> {
    let params = ProtocolParams::new(t, record.k())?;
    let challenge: BTreeSet<usize> = index::sample(rng, params.k(), params.t())
        .into_iter()
        .map(|i| i + 1)
        .collect();
    let session = ChallengeSession {
        token_id: record.token_id.clone(),
        identity: identity.to_owned(),
        params,
        challenge: challenge.clone(),
        subset: BTreeSet::new(),
        bases: BTreeMap::new(),
        replies: BTreeMap::new(),
        verdict: Verdict::Pending,
    };
    Ok((session, Message::Challenge(challenge)))
}

/// Client step: picks `L_C` uniformly among the `2t/3`-subsets of the
/// unused registers in `L_S`, or gives up with `ABORT token-exhausted`.
pub fn client_choose_subset<R: Rng + ?Sized>(
    token: &QuantumToken,
    challenge: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<Message, ProtocolError> {
    let params = ProtocolParams::new(challenge.len(), token.k())?;
    if let Some(bad) = challenge.iter().find(|i| **i == 0 || **i > token.k()) {
        return Err(ProtocolError::IndexOutOfRange {
            index: *bad,
            k: token.k(),
        });
    }
    let candidates: Vec<usize> = challenge
        .iter()
        .copied()
        .filter(|i| token.is_unused(*i))
        .collect();
    if candidates.len() < params.subset_size() {
        return Ok(Message::Abort(AbortReason::TokenExhausted));
    }
    let subset = candidates
        .choose_multiple(rng, params.subset_size())
        .copied()
        .collect();
    Ok(Message::Subset(subset))
}

/// Server step: validates `L_C` and draws a fair basis bit for each of its
/// indices. An invalid subset ends the session with `RESULT FAIL`.
pub fn server_pick_bases<R: Rng + ?Sized>(
    session: &mut ChallengeSession,
    record: &TokenRecord,
    subset: BTreeSet<usize>,
    policy: ReusePolicy,
    rng: &mut R,
) -> Message {
    let well_formed =
        subset.len() == session.params.subset_size() && subset.is_subset(&session.challenge);
    if !well_formed {
        session.fail(FailureReason::SubsetInvalid);
        return Message::Result(false);
    }
    if policy == ReusePolicy::Reject && !subset.is_disjoint(&record.server_used) {
        session.fail(FailureReason::IndexReused);
        return Message::Result(false);
    }
    session.bases = subset.iter().map(|i| (*i, Basis::random(rng))).collect();
    session.subset = subset;
    Message::Bases(session.bases.clone())
}

/// Client step: measures each requested register in its basis and marks
/// it used. Nothing is measured unless every requested register is fresh.
pub fn client_respond<R: Rng + ?Sized>(
    token: &mut QuantumToken,
    bases: &BTreeMap<usize, Basis>,
    rng: &mut R,
) -> Result<Message, ProtocolError> {
    for index in bases.keys() {
        let slot = token.slot(*index)?;
        if slot.used() {
            return Err(TokenError::AlreadyUsed(*index).into());
        }
    }
    let mut replies = BTreeMap::new();
    for (index, m) in bases {
        replies.insert(*index, token.measure_slot(*index, *m, rng)?);
    }
    Ok(Message::Response(replies))
}

/// Server step: accepts only if every acceptance condition holds.
///
/// 1. the token is known
/// 2. the identity may use it
/// 3. `L_C` is a subset of `L_S` of size `2t/3`
/// 4. the reply covers exactly `L_C`
/// 5. every reply satisfies the HMP4 predicate for its `x_i` and `m_i`
///
/// Committing accepted indices to the database is left to the caller.
pub fn server_verify(
    session: &mut ChallengeSession,
    record: &TokenRecord,
    replies: BTreeMap<usize, Outcome>,
) -> Message {
    let reason = check_conditions(session, record, &replies);
    session.replies = replies;
    match reason {
        None => {
            session.succeed();
            Message::Result(true)
        }
        Some(reason) => {
            session.fail(reason);
            Message::Result(false)
        }
    }
}

fn check_conditions(
    session: &ChallengeSession,
    record: &TokenRecord,
    replies: &BTreeMap<usize, Outcome>,
) -> Option<FailureReason> {
    if record.token_id != session.token_id {
        return Some(FailureReason::UnknownToken);
    }
    if record.revoked {
        return Some(FailureReason::Revoked);
    }
    if !record.permits(&session.identity) {
        return Some(FailureReason::IdentityNotPermitted);
    }
    if session.subset.len() != session.params.subset_size()
        || !session.subset.is_subset(&session.challenge)
    {
        return Some(FailureReason::SubsetInvalid);
    }
    if !replies.keys().eq(session.subset.iter()) {
        return Some(FailureReason::ResponseMismatch);
    }
    for (index, outcome) in replies {
        let valid = match (record.x(*index), session.bases.get(index)) {
            (Some(x), Some(m)) => hmp4_condition(x, *m, *outcome),
            _ => false,
        };
        if !valid {
            return Some(FailureReason::ConditionViolated { index: *index });
        }
    }
    None
}
