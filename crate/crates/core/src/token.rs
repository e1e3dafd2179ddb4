//! Client-side token: an identifier and `k` single-use registers.
//!
//! # Token file format
//!
//! The simulator persists tokens as line-oriented text so a client can
//! authenticate across process restarts. Real quantum memory cannot be
//! copied to disk; the file exists only because the registers are
//! simulated.
//!
//! ```text
//! qmfa-token 1
//! token_id <id>
//! k <k>
//! slot <i> fresh <amp00> <amp01> <amp10> <amp11>
//! slot <i> used <m> <ab> <amp00> <amp01> <amp10> <amp11>
//! ```
//!
//! Fields are separated by a single space and every line ends with `\n`.
//! Slots appear in index order `1..=k`. Amplitudes use the shortest decimal
//! form that round-trips the `f64` exactly, so `load` followed by `save`
//! reproduces the file byte for byte.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::hmp4::{self, Basis, Hmp4Error, Outcome, RegisterState, RegisterStatus};

pub const TOKEN_FILE_MAGIC: &str = "qmfa-token";
pub const TOKEN_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("invalid token id {0:?}: expected 1-64 characters from [A-Za-z0-9_-]")]
    InvalidId(String),
    #[error("a token needs at least one register")]
    Empty,
    #[error("register {0} is not fresh")]
    NotFresh(usize),
    #[error("register index {index} out of range 1..={k}")]
    OutOfRange { index: usize, k: usize },
    #[error("register {0} already used")]
    AlreadyUsed(usize),
    #[error(transparent)]
    State(#[from] Hmp4Error),
    #[error("token file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identifier shared by a token and its database record.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(String);

impl TokenId {
    pub fn new(id: impl Into<String>) -> Result<Self, TokenError> {
        let id = id.into();
        let ok = (1..=64).contains(&id.len())
            && id
                .bytes()
                .all(|c| c.is_ascii_alphanumeric() || c == b'_' || c == b'-');
        if ok {
            Ok(TokenId(id))
        } else {
            Err(TokenError::InvalidId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TokenId {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TokenId::new(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterSlot {
    index: usize,
    state: RegisterState,
}

impl RegisterSlot {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn state(&self) -> &RegisterState {
        &self.state
    }

    pub fn used(&self) -> bool {
        !self.state.is_fresh()
    }
}

/// A token holding `k` registers, indexed from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumToken {
    token_id: TokenId,
    slots: Vec<RegisterSlot>,
}

impl QuantumToken {
    pub fn build(token_id: TokenId, states: Vec<RegisterState>) -> Result<Self, TokenError> {
        if states.is_empty() {
            return Err(TokenError::Empty);
        }
        let slots = states
            .into_iter()
            .enumerate()
            .map(|(i, state)| {
                if state.is_fresh() {
                    Ok(RegisterSlot {
                        index: i + 1,
                        state,
                    })
                } else {
                    Err(TokenError::NotFresh(i + 1))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QuantumToken { token_id, slots })
    }

    pub fn token_id(&self) -> &TokenId {
        &self.token_id
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[RegisterSlot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> Result<&RegisterSlot, TokenError> {
        self.check_index(index)?;
        Ok(&self.slots[index - 1])
    }

    pub fn is_unused(&self, index: usize) -> bool {
        self.slot(index).map(|s| !s.used()).unwrap_or(false)
    }

    /// Indices of registers not yet measured, ascending.
    pub fn unused_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| !s.used())
            .map(|s| s.index)
            .collect()
    }

    pub fn used_count(&self) -> usize {
        self.slots.iter().filter(|s| s.used()).count()
    }

    /// Measures register `index` in basis `m`. A register can be measured
    /// once; later calls fail with [`TokenError::AlreadyUsed`].
    pub fn measure_slot<R: Rng + ?Sized>(
        &mut self,
        index: usize,
        m: Basis,
        rng: &mut R,
    ) -> Result<Outcome, TokenError> {
        self.check_index(index)?;
        let slot = &mut self.slots[index - 1];
        if slot.used() {
            return Err(TokenError::AlreadyUsed(index));
        }
        let (outcome, collapsed) = hmp4::measure(slot.state.clone(), m, rng)?;
        slot.state = collapsed;
        Ok(outcome)
    }

    /// Number of used registers at which renewal is recommended: `ceil(k/4)`.
    pub fn renewal_threshold(&self) -> usize {
        self.k().div_ceil(4)
    }

    /// True once a quarter of the registers have been used. Advisory only;
    /// the token keeps working until a challenge can no longer be met.
    pub fn renewal_due(&self) -> bool {
        self.used_count() >= self.renewal_threshold()
    }

    fn check_index(&self, index: usize) -> Result<(), TokenError> {
        if index == 0 || index > self.k() {
            return Err(TokenError::OutOfRange { index, k: self.k() });
        }
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{TOKEN_FILE_MAGIC} {TOKEN_FILE_VERSION}\n"));
        out.push_str(&format!("token_id {}\n", self.token_id));
        out.push_str(&format!("k {}\n", self.k()));
        for slot in &self.slots {
            out.push_str(&format!("slot {}", slot.index));
            match slot.state.status() {
                RegisterStatus::Fresh => out.push_str(" fresh"),
                RegisterStatus::Collapsed { basis, outcome } => {
                    out.push_str(&format!(" used {} {}{}", basis, outcome.a(), outcome.b()))
                }
            }
            for amp in slot.state.amplitudes() {
                out.push_str(&format!(" {amp}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self, TokenError> {
        let err = |line: usize, reason: &str| TokenError::Parse {
            line,
            reason: reason.to_owned(),
        };
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));

        let (n, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let version = header
            .strip_prefix(TOKEN_FILE_MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| err(n, "missing token file header"))?;
        if version != TOKEN_FILE_VERSION.to_string() {
            return Err(err(n, &format!("unsupported version {version:?}")));
        }

        let (n, id_line) = lines.next().ok_or_else(|| err(n + 1, "missing token_id"))?;
        let id = id_line
            .strip_prefix("token_id ")
            .ok_or_else(|| err(n, "expected token_id"))?;
        let token_id = TokenId::new(id).map_err(|e| err(n, &e.to_string()))?;

        let (n, k_line) = lines.next().ok_or_else(|| err(n + 1, "missing k"))?;
        let k: usize = k_line
            .strip_prefix("k ")
            .and_then(|v| v.parse().ok())
            .filter(|k| *k > 0)
            .ok_or_else(|| err(n, "expected positive k"))?;

        let mut slots = Vec::with_capacity(k);
        let mut last = n;
        for (n, line) in lines {
            last = n;
            if slots.len() == k {
                return Err(err(n, "more slots than k"));
            }
            slots.push(parse_slot(line, slots.len() + 1).map_err(|r| err(n, &r))?);
        }
        if slots.len() != k {
            return Err(err(
                last + 1,
                &format!("expected {k} slots, found {}", slots.len()),
            ));
        }
        Ok(QuantumToken { token_id, slots })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenError> {
        write_atomically(path.as_ref(), self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenError> {
        Self::parse_file(&fs::read_to_string(path)?)
    }
}

fn parse_slot(line: &str, expected_index: usize) -> Result<RegisterSlot, String> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.first() != Some(&"slot") || fields.len() < 3 {
        return Err("expected slot line".into());
    }
    let index: usize = fields[1].parse().map_err(|_| "bad slot index")?;
    if index != expected_index {
        return Err(format!(
            "slot {index} out of order, expected {expected_index}"
        ));
    }
    let (status, amps) = match fields[2] {
        "fresh" => (RegisterStatus::Fresh, &fields[3..]),
        "used" if fields.len() >= 5 => {
            let basis = match fields[3] {
                "0" => Basis::Zero,
                "1" => Basis::One,
                _ => return Err("bad basis".into()),
            };
            let outcome = match fields[4] {
                "00" => Outcome::from_index(0),
                "01" => Outcome::from_index(1),
                "10" => Outcome::from_index(2),
                "11" => Outcome::from_index(3),
                _ => return Err("bad outcome".into()),
            };
            (RegisterStatus::Collapsed { basis, outcome }, &fields[5..])
        }
        _ => return Err("expected fresh or used".into()),
    };
    if amps.len() != 4 {
        return Err(format!("expected 4 amplitudes, found {}", amps.len()));
    }
    let mut amplitudes = [0.0; 4];
    for (slot, text) in amplitudes.iter_mut().zip(amps) {
        *slot = text
            .parse()
            .map_err(|_| format!("bad amplitude {text:?}"))?;
    }
    let state = RegisterState::from_parts(amplitudes, status).map_err(|e| e.to_string())?;
    Ok(RegisterSlot { index, state })
}

/// Writes to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
