//! Line-oriented wire grammar.
//!
//! ```text
//! C: AUTH <identity> <tokenID>
//! S: CHALLENGE <i1,...,it>
//! C: SUBSET <j1,...>            | ABORT token-exhausted
//! S: BASES <j1:m1,...>
//! C: RESPONSE <j1:a1:b1,...>
//! S: RESULT OK                   | RESULT FAIL
//! ```
//!
//! Either side may send `ABORT <reason>`. Index lists and maps are written
//! strictly ascending and the parser only accepts that canonical form, so a
//! parsed line formats back to the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::hmp4::{Basis, Outcome};
use crate::token::TokenId;

/// Longest accepted line, excluding the terminating newline.
pub const MAX_LINE_LEN: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("line exceeds {MAX_LINE_LEN} bytes")]
    TooLong,
    #[error("empty line")]
    Empty,
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("malformed {command}: {reason}")]
    Malformed {
        command: &'static str,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbortReason {
    TokenExhausted,
    ProtocolError,
    Timeout,
}

impl AbortReason {
    pub fn code(self) -> &'static str {
        match self {
            AbortReason::TokenExhausted => "token-exhausted",
            AbortReason::ProtocolError => "protocol-error",
            AbortReason::Timeout => "timeout",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "token-exhausted" => Some(AbortReason::TokenExhausted),
            "protocol-error" => Some(AbortReason::ProtocolError),
            "timeout" => Some(AbortReason::Timeout),
            _ => None,
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Auth {
        identity: String,
        token_id: TokenId,
    },
    Challenge(BTreeSet<usize>),
    Subset(BTreeSet<usize>),
    Bases(BTreeMap<usize, Basis>),
    Response(BTreeMap<usize, Outcome>),
    /// `true` for `RESULT OK`. Failures carry no detail.
    Result(bool),
    Abort(AbortReason),
}

impl Message {
    pub fn command(&self) -> &'static str {
        match self {
            Message::Auth { .. } => "AUTH",
            Message::Challenge(_) => "CHALLENGE",
            Message::Subset(_) => "SUBSET",
            Message::Bases(_) => "BASES",
            Message::Response(_) => "RESPONSE",
            Message::Result(_) => "RESULT",
            Message::Abort(_) => "ABORT",
        }
    }

    pub fn parse(line: &str) -> Result<Message, WireError> {
        if line.len() > MAX_LINE_LEN {
            return Err(WireError::TooLong);
        }
        if line.is_empty() {
            return Err(WireError::Empty);
        }
        let (command, rest) = line.split_once(' ').unwrap_or((line, ""));
        match command {
            "AUTH" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [identity, token_id] = fields[..] else {
                    return Err(malformed("AUTH", "expected <identity> <tokenID>"));
                };
                if identity.is_empty() || identity.chars().any(char::is_control) {
                    return Err(malformed("AUTH", "bad identity"));
                }
                let token_id =
                    TokenId::new(token_id).map_err(|e| malformed("AUTH", &e.to_string()))?;
                Ok(Message::Auth {
                    identity: identity.to_owned(),
                    token_id,
                })
            }
            "CHALLENGE" => Ok(Message::Challenge(parse_index_list("CHALLENGE", rest)?)),
            "SUBSET" => Ok(Message::Subset(parse_index_list("SUBSET", rest)?)),
            "BASES" => {
                let map = parse_index_map("BASES", rest, |fields| match fields {
                    [m] => parse_bit(m).and_then(|b| Basis::from_bit(b).ok()),
                    _ => None,
                })?;
                Ok(Message::Bases(map))
            }
            "RESPONSE" => {
                let map = parse_index_map("RESPONSE", rest, |fields| match fields {
                    [a, b] => Outcome::new(parse_bit(a)?, parse_bit(b)?).ok(),
                    _ => None,
                })?;
                Ok(Message::Response(map))
            }
            "RESULT" => match rest {
                "OK" => Ok(Message::Result(true)),
                "FAIL" => Ok(Message::Result(false)),
                _ => Err(malformed("RESULT", "expected OK or FAIL")),
            },
            "ABORT" => AbortReason::from_code(rest)
                .map(Message::Abort)
                .ok_or_else(|| malformed("ABORT", "unknown reason code")),
            other => Err(WireError::UnknownCommand(truncate(other))),
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command())?;
        match self {
            Message::Auth { identity, token_id } => write!(f, " {identity} {token_id}"),
            Message::Challenge(set) | Message::Subset(set) => {
                f.write_str(" ")?;
                join(f, set.iter(), |f, i| write!(f, "{i}"))
            }
            Message::Bases(map) => {
                f.write_str(" ")?;
                join(f, map.iter(), |f, (i, m)| write!(f, "{i}:{m}"))
            }
            Message::Response(map) => {
                f.write_str(" ")?;
                join(f, map.iter(), |f, (i, o)| {
                    write!(f, "{i}:{}:{}", o.a(), o.b())
                })
            }
            Message::Result(ok) => f.write_str(if *ok { " OK" } else { " FAIL" }),
            Message::Abort(reason) => write!(f, " {reason}"),
        }
    }
}

fn join<I, T>(
    f: &mut fmt::Formatter<'_>,
    items: I,
    mut item: impl FnMut(&mut fmt::Formatter<'_>, T) -> fmt::Result,
) -> fmt::Result
where
    I: Iterator<Item = T>,
{
    for (n, x) in items.enumerate() {
        if n > 0 {
            f.write_str(",")?;
        }
        item(f, x)?;
    }
    Ok(())
}

fn malformed(command: &'static str, reason: &str) -> WireError {
    WireError::Malformed {
        command,
        reason: reason.to_owned(),
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(32).collect()
}

fn parse_bit(s: &str) -> Option<u8> {
    match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

/// Canonical positive decimal: digits only, no leading zero.
fn parse_index(s: &str) -> Option<usize> {
    let canonical = !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit()) && !s.starts_with('0');
    if canonical {
        s.parse().ok()
    } else {
        None
    }
}

fn parse_index_list(command: &'static str, rest: &str) -> Result<BTreeSet<usize>, WireError> {
    let mut set = BTreeSet::new();
    for part in rest.split(',') {
        let i = parse_index(part).ok_or_else(|| malformed(command, "bad index"))?;
        if set.last().is_some_and(|last| *last >= i) {
            return Err(malformed(command, "indices must be strictly ascending"));
        }
        set.insert(i);
    }
    Ok(set)
}

fn parse_index_map<V>(
    command: &'static str,
    rest: &str,
    value: impl Fn(&[&str]) -> Option<V>,
) -> Result<BTreeMap<usize, V>, WireError> {
    let mut map = BTreeMap::new();
    for part in rest.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        let i = fields
            .first()
            .and_then(|s| parse_index(s))
            .ok_or_else(|| malformed(command, "bad index"))?;
        let v = value(&fields[1..]).ok_or_else(|| malformed(command, "bad value"))?;
        if map.last_key_value().is_some_and(|(last, _)| *last >= i) {
            return Err(malformed(command, "indices must be strictly ascending"));
        }
        map.insert(i, v);
    }
    Ok(map)
}
