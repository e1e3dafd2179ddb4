//! Exact simulation of the 2-qubit registers used by the token.
//!
//! A classical 4-bit string `x` is encoded as the state whose amplitude on
//! the computational basis state `|i-1>` is `(-1)^{x_i} / 2`. The holder of
//! the register is asked to measure it in one of two orthonormal bases,
//! selected by a bit `m`, and reports which basis vector it collapsed to as
//! a pair of bits `(a, b)`. The verifier, knowing `x`, checks the reply with
//! a pair of XORs.
//!
//! Every amplitude involved is real (either `±1/2` or `0, ±1/√2`), so states
//! are stored as `[f64; 4]` and no complex arithmetic is needed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Tolerance for normalization and orthonormality checks.
pub const TOLERANCE: f64 = 1e-12;

const HALF: f64 = 0.5;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Hmp4Error {
    #[error("bit string value {0} does not fit in 4 bits")]
    OutOfRange(u8),
    #[error("invalid bit string {0:?}: expected four characters from {{0,1}}")]
    BadBitString(String),
    #[error("bit must be 0 or 1, got {0}")]
    NotABit(u8),
    #[error("state is not normalized (squared norm {0})")]
    Unnormalized(f64),
    #[error("collapsed state does not match basis vector {outcome} of basis m={basis}")]
    InconsistentCollapse { basis: Basis, outcome: Outcome },
}

/// A classical string `x = (x_1, x_2, x_3, x_4)`.
///
/// Stored as a nibble with `x_1` in the most significant position, so the
/// string `0110` is the integer 6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitString4(u8);

impl BitString4 {
    pub const ALL: [BitString4; 16] = {
        let mut all = [BitString4(0); 16];
        let mut v = 0;
        while v < 16 {
            all[v] = BitString4(v as u8);
            v += 1;
        }
        all
    };

    pub fn from_u8(value: u8) -> Result<Self, Hmp4Error> {
        if value > 0x0f {
            return Err(Hmp4Error::OutOfRange(value));
        }
        Ok(BitString4(value))
    }

    pub fn from_bits(bits: [u8; 4]) -> Result<Self, Hmp4Error> {
        let mut value = 0u8;
        for bit in bits {
            if bit > 1 {
                return Err(Hmp4Error::NotABit(bit));
            }
            value = (value << 1) | bit;
        }
        Ok(BitString4(value))
    }

    pub fn to_u8(self) -> u8 {
        self.0
    }

    /// The bit `x_i` for `i` in `1..=4`.
    ///
    /// Panics if `i` is outside `1..=4`.
    pub fn bit(self, i: usize) -> u8 {
        assert!((1..=4).contains(&i), "bit index {i} outside 1..=4");
        (self.0 >> (4 - i)) & 1
    }

    pub fn bits(self) -> [u8; 4] {
        [self.bit(1), self.bit(2), self.bit(3), self.bit(4)]
    }
}

impl fmt::Display for BitString4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04b}", self.0)
    }
}

impl FromStr for BitString4 {
    type Err = Hmp4Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() != 4 || !bytes.iter().all(|c| *c == b'0' || *c == b'1') {
            return Err(Hmp4Error::BadBitString(s.to_owned()));
        }
        let mut bits = [0u8; 4];
        for (slot, c) in bits.iter_mut().zip(bytes) {
            *slot = c - b'0';
        }
        Self::from_bits(bits)
    }
}

/// The basis selector `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Zero,
    One,
}

impl Basis {
    pub fn from_bit(bit: u8) -> Result<Self, Hmp4Error> {
        match bit {
            0 => Ok(Basis::Zero),
            1 => Ok(Basis::One),
            other => Err(Hmp4Error::NotABit(other)),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Basis::Zero => 0,
            Basis::One => 1,
        }
    }

    pub fn other(self) -> Basis {
        match self {
            Basis::Zero => Basis::One,
            Basis::One => Basis::Zero,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Basis {
        if rng.random_bool(0.5) {
            Basis::One
        } else {
            Basis::Zero
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bit())
    }
}

/// A measurement reply `(a, b)`.
///
/// Basis vector `v_j` (1-based) corresponds to the outcome with
/// `index() == j - 1`, i.e. `v1 -> (0,0)`, `v2 -> (0,1)`, `v3 -> (1,0)`,
/// `v4 -> (1,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Outcome {
    a: u8,
    b: u8,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome { a: 0, b: 0 },
        Outcome { a: 0, b: 1 },
        Outcome { a: 1, b: 0 },
        Outcome { a: 1, b: 1 },
    ];

    pub fn new(a: u8, b: u8) -> Result<Self, Hmp4Error> {
        if a > 1 {
            return Err(Hmp4Error::NotABit(a));
        }
        if b > 1 {
            return Err(Hmp4Error::NotABit(b));
        }
        Ok(Outcome { a, b })
    }

    /// Outcome for basis vector index `j` in `0..4`.
    pub fn from_index(j: usize) -> Self {
        Self::ALL[j]
    }

    pub fn index(self) -> usize {
        usize::from(2 * self.a + self.b)
    }

    pub fn a(self) -> u8 {
        self.a
    }

    pub fn b(self) -> u8 {
        self.b
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Outcome {
        Self::ALL[rng.random_range(0..4)]
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.a, self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegisterStatus {
    Fresh,
    Collapsed { basis: Basis, outcome: Outcome },
}

/// State vector of one register, indexed by `|00>, |01>, |10>, |11>`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterState {
    amplitudes: [f64; 4],
    status: RegisterStatus,
}

impl RegisterState {
    /// Rebuilds a state from stored amplitudes, checking normalization and,
    /// for collapsed states, that the amplitudes match the recorded basis
    /// vector.
    pub fn from_parts(amplitudes: [f64; 4], status: RegisterStatus) -> Result<Self, Hmp4Error> {
        check_normalized(&amplitudes)?;
        if let RegisterStatus::Collapsed { basis, outcome } = status {
            let expected = basis_vectors(basis)[outcome.index()];
            let overlap = inner(&expected, &amplitudes);
            if (overlap.abs() - 1.0).abs() > TOLERANCE {
                return Err(Hmp4Error::InconsistentCollapse { basis, outcome });
            }
        }
        Ok(RegisterState { amplitudes, status })
    }

    pub fn amplitudes(&self) -> &[f64; 4] {
        &self.amplitudes
    }

    pub fn status(&self) -> RegisterStatus {
        self.status
    }

    pub fn is_fresh(&self) -> bool {
        self.status == RegisterStatus::Fresh
    }

    pub fn norm_squared(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum()
    }
}

fn inner(u: &[f64; 4], v: &[f64; 4]) -> f64 {
    u.iter().zip(v).map(|(x, y)| x * y).sum()
}

fn check_normalized(amplitudes: &[f64; 4]) -> Result<(), Hmp4Error> {
    let norm: f64 = amplitudes.iter().map(|a| a * a).sum();
    if !norm.is_finite() || (norm - 1.0).abs() > TOLERANCE {
        return Err(Hmp4Error::Unnormalized(norm));
    }
    Ok(())
}

/// Encodes `x` as a fresh register state.
pub fn encode(x: BitString4) -> RegisterState {
    let mut amplitudes = [HALF; 4];
    for (i, amp) in amplitudes.iter_mut().enumerate() {
        if x.bit(i + 1) == 1 {
            *amp = -HALF;
        }
    }
    RegisterState {
        amplitudes,
        status: RegisterStatus::Fresh,
    }
}

/// The measurement basis `v1..v4` selected by `m`.
///
/// `m = 0` pairs `|00>,|01>` and `|10>,|11>`; `m = 1` pairs `|00>,|10>` and
/// `|01>,|11>`. Within each pair the sum comes before the difference.
pub fn basis_vectors(m: Basis) -> [[f64; 4]; 4] {
    let r = INV_SQRT2;
    match m {
        Basis::Zero => [
            [r, r, 0.0, 0.0],
            [r, -r, 0.0, 0.0],
            [0.0, 0.0, r, r],
            [0.0, 0.0, r, -r],
        ],
        Basis::One => [
            [r, 0.0, r, 0.0],
            [r, 0.0, -r, 0.0],
            [0.0, r, 0.0, r],
            [0.0, r, 0.0, -r],
        ],
    }
}

/// Born-rule probabilities `|<v_j|state>|^2` in the order `v1..v4`.
pub fn outcome_probabilities(state: &RegisterState, m: Basis) -> [f64; 4] {
    let basis = basis_vectors(m);
    let mut probs = [0.0; 4];
    for (p, v) in probs.iter_mut().zip(basis.iter()) {
        let overlap = inner(v, &state.amplitudes);
        *p = (overlap * overlap).clamp(0.0, 1.0);
    }
    probs
}

/// Projectively measures `state` in basis `m`, consuming it.
///
/// The outcome is drawn by inverting the cumulative distribution over
/// `v1..v4` with one uniform draw from `rng`.
pub fn measure<R: Rng + ?Sized>(
    state: RegisterState,
    m: Basis,
    rng: &mut R,
) -> Result<(Outcome, RegisterState), Hmp4Error> {
    check_normalized(&state.amplitudes)?;
    let probs = outcome_probabilities(&state, m);
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut selected = None;
    for (j, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            selected = Some(j);
            break;
        }
    }
    // Rounding can leave the cumulative sum a hair below u; take the last
    // outcome with nonzero weight.
    let j = selected.unwrap_or_else(|| {
        probs
            .iter()
            .rposition(|p| *p > TOLERANCE)
            .expect("normalized state has a nonzero outcome")
    });
    let outcome = Outcome::from_index(j);
    let collapsed = RegisterState {
        amplitudes: basis_vectors(m)[j],
        status: RegisterStatus::Collapsed { basis: m, outcome },
    };
    Ok((outcome, collapsed))
}

/// The verifier's predicate: `b = x_1 xor x_{2+m}` when `a = 0`, and
/// `b = x_{3-m} xor x_4` when `a = 1`.
pub fn hmp4_condition(x: BitString4, m: Basis, out: Outcome) -> bool {
    let m = usize::from(m.bit());
    let expected = if out.a == 0 {
        x.bit(1) ^ x.bit(2 + m)
    } else {
        x.bit(3 - m) ^ x.bit(4)
    };
    out.b == expected
}

/// The two replies accepted for `(x, m)`, ordered by `a`.
pub fn valid_outcomes(x: BitString4, m: Basis) -> [Outcome; 2] {
    let mut found = [Outcome { a: 0, b: 0 }; 2];
    for a in 0..2u8 {
        let b = if hmp4_condition(x, m, Outcome { a, b: 0 }) {
            0
        } else {
            1
        };
        found[usize::from(a)] = Outcome { a, b };
    }
    found
}
