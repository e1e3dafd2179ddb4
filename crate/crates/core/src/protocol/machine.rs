//! Client and server state machines.
//!
//! Both sides are sans-IO: they consume one parsed message and return the
//! reply, if any. The transport layer moves the lines.

use std::collections::BTreeSet;

use log::info;
use rand::Rng;

use super::message::{AbortReason, Message, WireError};
use super::session::{
    client_choose_subset, client_respond, server_begin, server_pick_bases, server_verify,
    ChallengeSession,
};
use super::{FailureReason, ServerConfig, Verdict};
use crate::authdb::{AuthDbError, SharedAuthDb, TokenRecord};
use crate::token::{QuantumToken, TokenId};

/// How a session ended from the client's point of view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientOutcome {
    Pending,
    Accepted,
    Rejected,
    /// Not enough unused registers inside the challenge; the token needs
    /// replacing.
    Exhausted,
    Aborted(AbortReason),
}

/// Anything that can play the client side of the exchange: the honest
/// token holder or one of the attack strategies.
pub trait ClientRole {
    /// The opening `AUTH` message.
    fn open(&mut self) -> Message;

    /// Handles a server message and returns the reply, or `None` when the
    /// client has nothing more to say.
    fn on_message(&mut self, msg: Message) -> Option<Message>;

    fn on_malformed(&mut self, _err: &WireError) -> Option<Message> {
        Some(Message::Abort(AbortReason::ProtocolError))
    }

    fn on_disconnect(&mut self) {}

    fn outcome(&self) -> ClientOutcome;

    fn handle_line(&mut self, line: &str) -> Option<Message> {
        match Message::parse(line) {
            Ok(msg) => self.on_message(msg),
            Err(err) => self.on_malformed(&err),
        }
    }
}

enum ServerState {
    AwaitAuth,
    AwaitSubset,
    AwaitResponse,
    Finished,
}

/// Server side of one session.
pub struct ServerMachine<R> {
    db: SharedAuthDb,
    config: ServerConfig,
    rng: R,
    state: ServerState,
    token_id: Option<TokenId>,
    session: Option<ChallengeSession>,
    verdict: Verdict,
}

impl<R: Rng> ServerMachine<R> {
    pub fn new(db: SharedAuthDb, config: ServerConfig, rng: R) -> Self {
        ServerMachine {
            db,
            config,
            rng,
            state: ServerState::AwaitAuth,
            token_id: None,
            session: None,
            verdict: Verdict::Pending,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn verdict(&self) -> &Verdict {
        &self.verdict
    }

    pub fn session(&self) -> Option<&ChallengeSession> {
        self.session.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, ServerState::Finished)
    }

    pub fn handle_line(&mut self, line: &str) -> Option<Message> {
        match Message::parse(line) {
            Ok(msg) => self.on_message(msg),
            Err(err) => self.on_malformed(&err),
        }
    }

    pub fn on_malformed(&mut self, _err: &WireError) -> Option<Message> {
        if self.is_finished() {
            return None;
        }
        self.finish(Verdict::Failure(FailureReason::ProtocolError));
        Some(Message::Abort(AbortReason::ProtocolError))
    }

    pub fn on_timeout(&mut self) -> Option<Message> {
        if self.is_finished() {
            return None;
        }
        self.finish(Verdict::Failure(FailureReason::Timeout));
        Some(Message::Abort(AbortReason::Timeout))
    }

    pub fn on_disconnect(&mut self) {
        if !self.is_finished() {
            self.finish(Verdict::Failure(FailureReason::Disconnected));
        }
    }

    pub fn on_message(&mut self, msg: Message) -> Option<Message> {
        match (&self.state, msg) {
            (ServerState::Finished, _) => None,
            (_, Message::Abort(reason)) => {
                self.finish(Verdict::Failure(FailureReason::ClientAborted(reason)));
                None
            }
            (ServerState::AwaitAuth, Message::Auth { identity, token_id }) => {
                Some(self.begin(&identity, token_id))
            }
            (ServerState::AwaitSubset, Message::Subset(subset)) => Some(self.pick_bases(subset)),
            (ServerState::AwaitResponse, Message::Response(replies)) => {
                let Some(record) = self.current_record() else {
                    return Some(Message::Result(false));
                };
                let session = self.session.as_mut().expect("session started");
                let reply = server_verify(session, &record, replies);
                let mut verdict = session.verdict().clone();
                if verdict.is_success() {
                    let committed = self.db.commit_success(
                        &record.token_id,
                        session.subset(),
                        self.config.reuse,
                    );
                    if committed.is_err() {
                        // another session accepted one of these indices first
                        session.fail(FailureReason::IndexReused);
                        verdict = session.verdict().clone();
                    }
                }
                let ok = verdict.is_success();
                self.finish(verdict);
                Some(if ok { reply } else { Message::Result(false) })
            }
            _ => {
                self.finish(Verdict::Failure(FailureReason::ProtocolError));
                Some(Message::Abort(AbortReason::ProtocolError))
            }
        }
    }

    fn begin(&mut self, identity: &str, token_id: TokenId) -> Message {
        self.token_id = Some(token_id.clone());
        let record = match self.db.lookup(&token_id) {
            Ok(record) => record,
            Err(err) => {
                let reason = match err {
                    AuthDbError::Revoked(_) => FailureReason::Revoked,
                    _ => FailureReason::UnknownToken,
                };
                self.finish(Verdict::Failure(reason));
                return Message::Result(false);
            }
        };
        if !record.permits(identity) {
            self.finish(Verdict::Failure(FailureReason::IdentityNotPermitted));
            return Message::Result(false);
        }
        match server_begin(&record, identity, self.config.t, &mut self.rng) {
            Ok((session, challenge)) => {
                self.session = Some(session);
                self.state = ServerState::AwaitSubset;
                challenge
            }
            Err(_) => {
                // configured t does not fit this token
                self.finish(Verdict::Failure(FailureReason::ProtocolError));
                Message::Result(false)
            }
        }
    }

    fn pick_bases(&mut self, subset: BTreeSet<usize>) -> Message {
        let Some(record) = self.current_record() else {
            return Message::Result(false);
        };
        let session = self.session.as_mut().expect("session started");
        let reply = server_pick_bases(session, &record, subset, self.config.reuse, &mut self.rng);
        match reply {
            Message::Bases(_) => {
                self.state = ServerState::AwaitResponse;
                reply
            }
            _ => {
                let verdict = session.verdict().clone();
                self.finish(verdict);
                Message::Result(false)
            }
        }
    }

    /// Re-reads the record so revocations and concurrent commits are seen.
    fn current_record(&mut self) -> Option<TokenRecord> {
        let id = self.token_id.clone().expect("token id known after AUTH");
        match self.db.lookup(&id) {
            Ok(record) => Some(record),
            Err(AuthDbError::Revoked(_)) => {
                self.finish(Verdict::Failure(FailureReason::Revoked));
                None
            }
            Err(_) => {
                self.finish(Verdict::Failure(FailureReason::UnknownToken));
                None
            }
        }
    }

    fn finish(&mut self, verdict: Verdict) {
        self.state = ServerState::Finished;
        if let Some(session) = self.session.as_mut() {
            if let Verdict::Failure(reason) = &verdict {
                session.fail(reason.clone());
            }
        }
        if let (Verdict::Failure(_), Some(id)) = (&verdict, &self.token_id) {
            // unknown ids have nothing to update
            let _ = self.db.record_failure(id);
        }
        let label = self.token_id.as_ref().map_or("-", |id| id.as_str());
        info!("session token={label} verdict={verdict}");
        self.verdict = verdict;
    }
}

enum ClientState {
    Start,
    AwaitChallenge,
    AwaitBases(BTreeSet<usize>),
    AwaitResult,
    Done,
}

/// The legitimate token holder.
pub struct HonestClient<'a, R> {
    token: &'a mut QuantumToken,
    identity: String,
    rng: R,
    state: ClientState,
    outcome: ClientOutcome,
}

impl<'a, R: Rng> HonestClient<'a, R> {
    pub fn new(token: &'a mut QuantumToken, identity: impl Into<String>, rng: R) -> Self {
        HonestClient {
            token,
            identity: identity.into(),
            rng,
            state: ClientState::Start,
            outcome: ClientOutcome::Pending,
        }
    }

    pub fn token(&self) -> &QuantumToken {
        self.token
    }

    fn done(&mut self, outcome: ClientOutcome) {
        self.state = ClientState::Done;
        self.outcome = outcome;
    }

    fn protocol_error(&mut self) -> Option<Message> {
        self.done(ClientOutcome::Aborted(AbortReason::ProtocolError));
        Some(Message::Abort(AbortReason::ProtocolError))
    }
}

impl<R: Rng> ClientRole for HonestClient<'_, R> {
    fn open(&mut self) -> Message {
        self.state = ClientState::AwaitChallenge;
        Message::Auth {
            identity: self.identity.clone(),
            token_id: self.token.token_id().clone(),
        }
    }

    fn on_message(&mut self, msg: Message) -> Option<Message> {
        match (&self.state, msg) {
            (ClientState::Done, _) => None,
            (_, Message::Result(ok)) => {
                let finished_normally = matches!(self.state, ClientState::AwaitResult);
                self.done(if ok && finished_normally {
                    ClientOutcome::Accepted
                } else {
                    ClientOutcome::Rejected
                });
                None
            }
            (_, Message::Abort(reason)) => {
                self.done(ClientOutcome::Aborted(reason));
                None
            }
            (ClientState::AwaitChallenge, Message::Challenge(challenge)) => {
                match client_choose_subset(self.token, &challenge, &mut self.rng) {
                    Ok(Message::Subset(subset)) => {
                        self.state = ClientState::AwaitBases(subset.clone());
                        Some(Message::Subset(subset))
                    }
                    Ok(other) => {
                        self.done(ClientOutcome::Exhausted);
                        Some(other)
                    }
                    Err(_) => self.protocol_error(),
                }
            }
            (ClientState::AwaitBases(subset), Message::Bases(bases)) => {
                if !bases.keys().eq(subset.iter()) {
                    return self.protocol_error();
                }
                match client_respond(self.token, &bases, &mut self.rng) {
                    Ok(reply) => {
                        self.state = ClientState::AwaitResult;
                        Some(reply)
                    }
                    Err(_) => self.protocol_error(),
                }
            }
            _ => self.protocol_error(),
        }
    }

    fn on_malformed(&mut self, _err: &WireError) -> Option<Message> {
        if matches!(self.state, ClientState::Done) {
            return None;
        }
        self.protocol_error()
    }

    fn on_disconnect(&mut self) {
        if !matches!(self.state, ClientState::Done) {
            self.done(ClientOutcome::Aborted(AbortReason::ProtocolError));
        }
    }

    fn outcome(&self) -> ClientOutcome {
        self.outcome
    }
}
