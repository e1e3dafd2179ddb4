//! Token issuing and the server's classical authentication database.
//!
//! # Database file format
//!
//! ```text
//! qmfa-authdb 1
//! <token_id>\t<k>\t<x hex>\t<identity>\t<revoked>\t<server_used>\t<failed>
//! ```
//!
//! One record per line, sorted by token id, tab separated:
//!
//! * `x hex` packs the strings `x_1..x_k` one hex digit each, `x_1` first;
//! * `identity` is empty when the record is not bound to a user;
//! * `revoked` is `0` or `1`;
//! * `server_used` lists accepted indices ascending, comma separated, or is
//!   empty;
//! * `failed` counts failed verification attempts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::Rng;
use thiserror::Error;

use crate::hmp4::{encode, BitString4};
use crate::token::{write_atomically, QuantumToken, TokenError, TokenId};

pub const DB_FILE_MAGIC: &str = "qmfa-authdb";
pub const DB_FILE_VERSION: u32 = 1;

/// Smallest token that can answer a challenge of size 3.
pub const MIN_REGISTERS: usize = 3;

const ID_RETRIES: usize = 8;

/// Whether the server refuses registers it has already accepted.
///
/// `Reject` remembers every accepted index and fails any session that
/// nominates one again. `Allow` trusts the client's bookkeeping, which is
/// the bare protocol; experiments use it to measure how much an
/// eavesdropper gains from replaying observed answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReusePolicy {
    #[default]
    Reject,
    Allow,
}

impl fmt::Display for ReusePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReusePolicy::Reject => "reject",
            ReusePolicy::Allow => "allow",
        })
    }
}

#[derive(Debug, Error)]
pub enum AuthDbError {
    #[error("k must be at least {MIN_REGISTERS}, got {0}")]
    TooFewRegisters(usize),
    #[error("invalid identity {0:?}: expected non-empty printable text without whitespace")]
    InvalidIdentity(String),
    #[error("could not generate a fresh token id")]
    IdExhausted,
    #[error("unknown token {0}")]
    NotFound(TokenId),
    #[error("token {0} has been revoked")]
    Revoked(TokenId),
    #[error("token {id}: indices {indices:?} were already accepted")]
    AlreadyUsed { id: TokenId, indices: Vec<usize> },
    #[error("database line {line} ({record}): {reason}")]
    Parse {
        line: usize,
        record: String,
        reason: String,
    },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identities travel as a single wire field, so whitespace is excluded.
pub fn validate_identity(identity: &str) -> Result<(), AuthDbError> {
    let ok = !identity.is_empty()
        && identity.len() <= 256
        && identity
            .chars()
            .all(|c| !c.is_whitespace() && !c.is_control());
    if ok {
        Ok(())
    } else {
        Err(AuthDbError::InvalidIdentity(identity.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRecord {
    pub token_id: TokenId,
    pub x_strings: Vec<BitString4>,
    pub identity: Option<String>,
    pub server_used: BTreeSet<usize>,
    pub revoked: bool,
    pub failed_attempts: u64,
}

impl TokenRecord {
    pub fn k(&self) -> usize {
        self.x_strings.len()
    }

    /// The string behind register `index` (1-based).
    pub fn x(&self, index: usize) -> Option<BitString4> {
        index
            .checked_sub(1)
            .and_then(|i| self.x_strings.get(i))
            .copied()
    }

    pub fn permits(&self, identity: &str) -> bool {
        self.identity
            .as_deref()
            .is_none_or(|bound| bound == identity)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuthDatabase {
    records: BTreeMap<TokenId, TokenRecord>,
}

impl AuthDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TokenRecord> {
        self.records.values()
    }

    pub fn contains(&self, id: &TokenId) -> bool {
        self.records.contains_key(id)
    }

    /// Issues a token of `k` registers bound to `identity`.
    ///
    /// Each `x_i` is drawn uniformly from the 16 four-bit strings, the
    /// classical record is stored here and the matching token is returned
    /// to be handed to the user.
    pub fn issue<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        identity: &str,
        rng: &mut R,
    ) -> Result<(QuantumToken, TokenRecord), AuthDbError> {
        if k < MIN_REGISTERS {
            return Err(AuthDbError::TooFewRegisters(k));
        }
        validate_identity(identity)?;
        let token_id = (0..ID_RETRIES)
            .map(|_| random_token_id(rng))
            .find(|id| !self.records.contains_key(id))
            .ok_or(AuthDbError::IdExhausted)?;
        let x_strings: Vec<BitString4> = (0..k)
            .map(|_| BitString4::from_u8(rng.random_range(0..16)).expect("nibble"))
            .collect();
        let token = QuantumToken::build(
            token_id.clone(),
            x_strings.iter().map(|x| encode(*x)).collect(),
        )?;
        let record = TokenRecord {
            token_id: token_id.clone(),
            x_strings,
            identity: Some(identity.to_owned()),
            server_used: BTreeSet::new(),
            revoked: false,
            failed_attempts: 0,
        };
        self.records.insert(token_id, record.clone());
        Ok((token, record))
    }

    pub fn insert(&mut self, record: TokenRecord) {
        self.records.insert(record.token_id.clone(), record);
    }

    pub fn lookup(&self, id: &TokenId) -> Result<&TokenRecord, AuthDbError> {
        match self.records.get(id) {
            None => Err(AuthDbError::NotFound(id.clone())),
            Some(r) if r.revoked => Err(AuthDbError::Revoked(id.clone())),
            Some(r) => Ok(r),
        }
    }

    pub fn revoke(&mut self, id: &TokenId) -> Result<(), AuthDbError> {
        let record = self
            .records
            .get_mut(id)
            .ok_or_else(|| AuthDbError::NotFound(id.clone()))?;
        record.revoked = true;
        Ok(())
    }

    /// Records a successful verification over `indices`. Under
    /// [`ReusePolicy::Reject`] it fails without changing anything if any
    /// index was already accepted.
    pub fn commit_success(
        &mut self,
        id: &TokenId,
        indices: &BTreeSet<usize>,
        policy: ReusePolicy,
    ) -> Result<(), AuthDbError> {
        let record = self
            .records
            .get_mut(id)
            .ok_or_else(|| AuthDbError::NotFound(id.clone()))?;
        let reused: Vec<usize> = indices.intersection(&record.server_used).copied().collect();
        if policy == ReusePolicy::Reject && !reused.is_empty() {
            return Err(AuthDbError::AlreadyUsed {
                id: id.clone(),
                indices: reused,
            });
        }
        record.server_used.extend(indices.iter().copied());
        Ok(())
    }

    pub fn record_failure(&mut self, id: &TokenId) {
        if let Some(record) = self.records.get_mut(id) {
            record.failed_attempts += 1;
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{DB_FILE_MAGIC} {DB_FILE_VERSION}\n");
        for r in self.records.values() {
            let hex: String = r
                .x_strings
                .iter()
                .map(|x| char::from_digit(u32::from(x.to_u8()), 16).expect("nibble"))
                .collect();
            let used = r
                .server_used
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.token_id,
                r.k(),
                hex,
                r.identity.as_deref().unwrap_or(""),
                u8::from(r.revoked),
                used,
                r.failed_attempts
            ));
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self, AuthDbError> {
        let mut lines = text.split_terminator('\n').enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let expected = format!("{DB_FILE_MAGIC} {DB_FILE_VERSION}");
        if header != expected {
            return Err(AuthDbError::Parse {
                line: 1,
                record: "header".into(),
                reason: format!("expected {expected:?}, found {header:?}"),
            });
        }
        let mut db = AuthDatabase::new();
        for (n, line) in lines {
            let record = parse_record(line).map_err(|reason| AuthDbError::Parse {
                line: n + 1,
                record: line.split('\t').next().unwrap_or("").to_owned(),
                reason,
            })?;
            if db.records.contains_key(&record.token_id) {
                return Err(AuthDbError::Parse {
                    line: n + 1,
                    record: record.token_id.to_string(),
                    reason: "duplicate token id".into(),
                });
            }
            db.insert(record);
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(AuthDbError::Parse {
                line: text.lines().count(),
                record: text
                    .lines()
                    .last()
                    .unwrap_or("")
                    .split('\t')
                    .next()
                    .unwrap_or("")
                    .into(),
                reason: "truncated: missing final newline".into(),
            });
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AuthDbError> {
        write_atomically(path.as_ref(), self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AuthDbError> {
        Self::parse_file(&fs::read_to_string(path)?)
    }
}

fn random_token_id<R: Rng + ?Sized>(rng: &mut R) -> TokenId {
    let bits: u128 = rng.random();
    TokenId::new(format!("{bits:032x}")).expect("hex id is valid")
}

fn parse_record(line: &str) -> Result<TokenRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    let token_id = TokenId::new(fields[0]).map_err(|e| e.to_string())?;
    let k: usize = fields[1].parse().map_err(|_| "bad k")?;
    if fields[2].len() != k {
        return Err(format!(
            "expected {k} hex digits, found {}",
            fields[2].len()
        ));
    }
    let x_strings = fields[2]
        .chars()
        .map(|c| {
            c.to_digit(16)
                .filter(|_| !c.is_ascii_uppercase())
                .map(|v| BitString4::from_u8(v as u8).expect("nibble"))
                .ok_or_else(|| format!("bad hex digit {c:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let identity = match fields[3] {
        "" => None,
        id => {
            validate_identity(id).map_err(|e| e.to_string())?;
            Some(id.to_owned())
        }
    };
    let revoked = match fields[4] {
        "0" => false,
        "1" => true,
        other => return Err(format!("bad revoked flag {other:?}")),
    };
    let mut server_used = BTreeSet::new();
    if !fields[5].is_empty() {
        for part in fields[5].split(',') {
            let i: usize = part.parse().map_err(|_| format!("bad index {part:?}"))?;
            if i == 0 || i > k || server_used.last().is_some_and(|last| *last >= i) {
                return Err(format!("used index {i} out of range or order"));
            }
            server_used.insert(i);
        }
    }
    let failed_attempts = fields[6].parse().map_err(|_| "bad failure count")?;
    Ok(TokenRecord {
        token_id,
        x_strings,
        identity,
        server_used,
        revoked,
        failed_attempts,
    })
}

/// A database shared between concurrent sessions.
///
/// Readers take snapshots of records; every mutation happens under the
/// write lock and, when a backing file is configured, is flushed to disk
/// before the lock is released.
#[derive(Clone, Debug)]
pub struct SharedAuthDb {
    inner: Arc<RwLock<AuthDatabase>>,
    backing: Option<PathBuf>,
}

impl SharedAuthDb {
    pub fn new(db: AuthDatabase) -> Self {
        SharedAuthDb {
            inner: Arc::new(RwLock::new(db)),
            backing: None,
        }
    }

    pub fn with_backing_file(db: AuthDatabase, path: impl Into<PathBuf>) -> Self {
        SharedAuthDb {
            inner: Arc::new(RwLock::new(db)),
            backing: Some(path.into()),
        }
    }

    pub fn lookup(&self, id: &TokenId) -> Result<TokenRecord, AuthDbError> {
        self.read().lookup(id).cloned()
    }

    pub fn snapshot(&self) -> AuthDatabase {
        self.read().clone()
    }

    pub fn issue<R: Rng + ?Sized>(
        &self,
        k: usize,
        identity: &str,
        rng: &mut R,
    ) -> Result<(QuantumToken, TokenRecord), AuthDbError> {
        self.mutate(|db| db.issue(k, identity, rng))
    }

    pub fn revoke(&self, id: &TokenId) -> Result<(), AuthDbError> {
        self.mutate(|db| db.revoke(id))
    }

    pub fn commit_success(
        &self,
        id: &TokenId,
        indices: &BTreeSet<usize>,
        policy: ReusePolicy,
    ) -> Result<(), AuthDbError> {
        self.mutate(|db| db.commit_success(id, indices, policy))
    }

    pub fn record_failure(&self, id: &TokenId) -> Result<(), AuthDbError> {
        self.mutate(|db| {
            db.record_failure(id);
            Ok(())
        })
    }

    pub fn flush(&self) -> Result<(), AuthDbError> {
        match &self.backing {
            Some(path) => self.read().save(path),
            None => Ok(()),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, AuthDatabase> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn mutate<T>(
        &self,
        f: impl FnOnce(&mut AuthDatabase) -> Result<T, AuthDbError>,
    ) -> Result<T, AuthDbError> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let value = f(&mut guard)?;
        if let Some(path) = &self.backing {
            guard.save(path)?;
        }
        Ok(value)
    }
}
