//! The challenge-response exchange between a token holder and the server.
//!
//! ```text
//! C -> S  AUTH <identity> <tokenID>
//! S -> C  CHALLENGE L_S          t random indices
//! C -> S  SUBSET L_C             2t/3 unused indices from L_S
//! S -> C  BASES m_i              one fair bit per index in L_C
//! C -> S  RESPONSE (a_i, b_i)    measurement results
//! S -> C  RESULT OK | FAIL
//! ```
//!
//! Every message is classical; only the client touches quantum state.

use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::authdb::ReusePolicy;
use crate::token::TokenError;

pub mod machine;
pub mod message;
pub mod session;

pub use machine::{ClientOutcome, ClientRole, HonestClient, ServerMachine};
pub use message::{AbortReason, Message, WireError, MAX_LINE_LEN};
pub use session::{
    client_choose_subset, client_respond, server_begin, server_pick_bases, server_verify,
    ChallengeSession,
};

/// Sessions that run longer than this are failed.
pub const DEFAULT_SESSION_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid parameters t={t}, k={k}: t must be a positive multiple of 3 with t <= k")]
    InvalidParams { t: usize, k: usize },
    #[error("challenge index {index} out of range 1..={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// Challenge size `t` and register count `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolParams {
    t: usize,
    k: usize,
}

impl ProtocolParams {
    pub fn new(t: usize, k: usize) -> Result<Self, ProtocolError> {
        if t < 3 || !t.is_multiple_of(3) || t > k {
            return Err(ProtocolError::InvalidParams { t, k });
        }
        Ok(ProtocolParams { t, k })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `2t/3`, the number of registers measured per session.
    pub fn subset_size(&self) -> usize {
        2 * self.t / 3
    }
}

/// Why the server rejected a session. Only the server log sees this; the
/// wire carries a bare `RESULT FAIL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FailureReason {
    UnknownToken,
    Revoked,
    IdentityNotPermitted,
    SubsetInvalid,
    IndexReused,
    ResponseMismatch,
    ConditionViolated { index: usize },
    ClientAborted(AbortReason),
    ProtocolError,
    Timeout,
    Disconnected,
}

impl FailureReason {
    /// The acceptance condition (1-5) this failure violates, if any.
    pub fn condition(&self) -> Option<u8> {
        match self {
            FailureReason::UnknownToken | FailureReason::Revoked => Some(1),
            FailureReason::IdentityNotPermitted => Some(2),
            FailureReason::SubsetInvalid | FailureReason::IndexReused => Some(3),
            FailureReason::ResponseMismatch => Some(4),
            FailureReason::ConditionViolated { .. } => Some(5),
            _ => None,
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::UnknownToken => f.write_str("unknown-token"),
            FailureReason::Revoked => f.write_str("revoked"),
            FailureReason::IdentityNotPermitted => f.write_str("identity-not-permitted"),
            FailureReason::SubsetInvalid => f.write_str("subset-invalid"),
            FailureReason::IndexReused => f.write_str("index-reused"),
            FailureReason::ResponseMismatch => f.write_str("response-mismatch"),
            FailureReason::ConditionViolated { index } => write!(f, "condition-violated@{index}"),
            FailureReason::ClientAborted(reason) => write!(f, "client-abort:{reason}"),
            FailureReason::ProtocolError => f.write_str("protocol-error"),
            FailureReason::Timeout => f.write_str("timeout"),
            FailureReason::Disconnected => f.write_str("disconnected"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pending,
    Success,
    Failure(FailureReason),
}

impl Verdict {
    pub fn is_success(&self) -> bool {
        matches!(self, Verdict::Success)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pending => f.write_str("pending"),
            Verdict::Success => f.write_str("ok"),
            Verdict::Failure(reason) => match reason.condition() {
                Some(c) => write!(f, "fail condition={c} reason={reason}"),
                None => write!(f, "fail reason={reason}"),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServerConfig {
    /// Challenge size for new sessions. May differ between sessions
    /// against the same token.
    pub t: usize,
    pub reuse: ReusePolicy,
    pub timeout: Duration,
}

impl ServerConfig {
    pub fn new(t: usize) -> Self {
        ServerConfig {
            t,
            reuse: ReusePolicy::Reject,
            timeout: DEFAULT_SESSION_TIMEOUT,
        }
    }

    pub fn with_reuse(mut self, reuse: ReusePolicy) -> Self {
        self.reuse = reuse;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}
