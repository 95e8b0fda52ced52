//! Base-q digit words and the monotone slot lifecycle.
//!
//! Integers are stored as fixed-width words of cell levels, most-significant
//! digit first. A slot's lifecycle lives in a single state cell whose level
//! only ever increases: even levels are vacant, odd levels are occupied, and
//! a vacant level with no room left for another occupy + tombstone pair is
//! dead until the block is erased.

use thiserror::Error;

use crate::flash::CellLevel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("value {value} does not fit in {width} base-{q} digits")]
    Overflow { value: u64, width: usize, q: u32 },
    #[error("digit {digit} at position {position} is not below q={q}")]
    InvalidDigit {
        digit: CellLevel,
        position: usize,
        q: u32,
    },
    #[error("{width} base-{q} digits exceed 64 bits")]
    DecodeOverflow { width: usize, q: u32 },
    #[error("word widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("illegal slot transition {op} from level {level} ({state:?})")]
    IllegalTransition {
        op: &'static str,
        level: CellLevel,
        state: SlotState,
    },
}

/// Fixed-width base-q representation, most-significant digit first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DigitWord {
    digits: Vec<CellLevel>,
}

impl DigitWord {
    pub fn from_digits(digits: Vec<CellLevel>) -> Self {
        Self { digits }
    }

    pub fn digits(&self) -> &[CellLevel] {
        &self.digits
    }

    pub fn width(&self) -> usize {
        self.digits.len()
    }
}

/// `q^width`, saturating at `u128::MAX`.
pub fn capacity(q: u32, width: usize) -> u128 {
    let mut cap: u128 = 1;
    for _ in 0..width {
        cap = match cap.checked_mul(q as u128) {
            Some(c) => c,
            None => return u128::MAX,
        };
    }
    cap
}

/// Fewest base-q digits able to hold every value below `2^bits`.
pub fn digits_for_bits(bits: u32, q: u32) -> usize {
    let target: u128 = 1u128 << bits;
    let mut width = 0;
    while capacity(q, width) < target {
        width += 1;
    }
    width
}

pub fn encode_word(value: u64, width: usize, q: u32) -> Result<DigitWord, CodecError> {
    if (value as u128) >= capacity(q, width) {
        return Err(CodecError::Overflow { value, width, q });
    }
    let mut digits = vec![0; width];
    let mut rest = value;
    for d in digits.iter_mut().rev() {
        *d = (rest % q as u64) as CellLevel;
        rest /= q as u64;
    }
    Ok(DigitWord { digits })
}

pub fn decode_word(word: &DigitWord, q: u32) -> Result<u64, CodecError> {
    let mut value: u64 = 0;
    for (position, &digit) in word.digits.iter().enumerate() {
        if u32::from(digit) >= q {
            return Err(CodecError::InvalidDigit { digit, position, q });
        }
        value = value
            .checked_mul(q as u64)
            .and_then(|v| v.checked_add(digit as u64))
            .ok_or(CodecError::DecodeOverflow {
                width: word.width(),
                q,
            })?;
    }
    Ok(value)
}

/// True when every digit of `new` is at least the matching digit of
/// `current`, i.e. `new` can be programmed over `current` without erase.
pub fn can_overwrite(current: &DigitWord, new: &DigitWord) -> Result<bool, CodecError> {
    if current.width() != new.width() {
        return Err(CodecError::WidthMismatch(current.width(), new.width()));
    }
    Ok(current.digits.iter().zip(&new.digits).all(|(c, n)| n >= c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotState {
    Vacant,
    Occupied,
    Dead,
}

/// Slot lifecycle rules for a given number of levels.
///
/// With `recycle_tombstones` off, a tombstoned slot is never reused: every
/// even level above zero classifies as dead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRules {
    pub q: u32,
    pub recycle_tombstones: bool,
}

impl SlotRules {
    pub fn new(q: u32) -> Self {
        Self {
            q,
            recycle_tombstones: true,
        }
    }

    pub fn classify(&self, level: CellLevel) -> SlotState {
        let level = u32::from(level);
        if level % 2 == 1 {
            SlotState::Occupied
        } else if level + 2 <= self.q - 1 && (self.recycle_tombstones || level == 0) {
            SlotState::Vacant
        } else {
            SlotState::Dead
        }
    }

    pub fn occupy(&self, level: CellLevel) -> Result<CellLevel, CodecError> {
        match self.classify(level) {
            SlotState::Vacant => Ok(level + 1),
            state => Err(CodecError::IllegalTransition {
                op: "occupy",
                level,
                state,
            }),
        }
    }

    /// Fails on a vacant or dead slot, and on an occupied slot already at
    /// `q - 1` (no level left to record the tombstone).
    pub fn tombstone(&self, level: CellLevel) -> Result<CellLevel, CodecError> {
        let state = self.classify(level);
        if state == SlotState::Occupied && u32::from(level) + 1 < self.q {
            Ok(level + 1)
        } else {
            Err(CodecError::IllegalTransition {
                op: "tombstone",
                level,
                state,
            })
        }
    }

    /// Number of occupy/tombstone cycles a fresh slot supports before erase.
    pub fn cycles_per_erase(&self) -> u32 {
        if self.recycle_tombstones {
            (self.q - 1) / 2
        } else {
            u32::from(self.q >= 3)
        }
    }
}

pub fn classify_slot(level: CellLevel, q: u32) -> SlotState {
    SlotRules::new(q).classify(level)
}

pub fn occupy_level(level: CellLevel, q: u32) -> Result<CellLevel, CodecError> {
    SlotRules::new(q).occupy(level)
}

pub fn tombstone_level(level: CellLevel, q: u32) -> Result<CellLevel, CodecError> {
    SlotRules::new(q).tombstone(level)
}
