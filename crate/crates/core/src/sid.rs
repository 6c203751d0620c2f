use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, Error, Result};

/// Shape of a residual codebook: `levels` tokens per SID, each drawn from
/// `codes_per_level` codes, over `dim`-dimensional vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodebookSpec {
    pub levels: usize,
    pub codes_per_level: usize,
    pub dim: usize,
}

impl CodebookSpec {
    pub fn new(levels: usize, codes_per_level: usize, dim: usize) -> Result<Self> {
        if levels == 0 || codes_per_level < 2 || dim == 0 {
            return invalid("codebook spec needs levels >= 1, codes >= 2, dim >= 1");
        }
        if codes_per_level > u16::MAX as usize + 1 {
            return invalid("codes_per_level must fit a u16 token");
        }
        Ok(Self { levels, codes_per_level, dim })
    }

    /// K^L, saturating.
    pub fn capacity(&self) -> usize {
        let mut cap: usize = 1;
        for _ in 0..self.levels {
            cap = cap.saturating_mul(self.codes_per_level);
        }
        cap
    }

    pub fn validate(&self, sid: &SidSequence) -> Result<()> {
        if sid.len() != self.levels {
            return Err(Error::Shape(alloc::format!(
                "SID has {} tokens, expected {}",
                sid.len(),
                self.levels
            )));
        }
        for &t in sid.tokens() {
            if t as usize >= self.codes_per_level {
                return Err(Error::OutOfRange {
                    what: "token",
                    index: t as usize,
                    bound: self.codes_per_level,
                });
            }
        }
        Ok(())
    }
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self { levels: 3, codes_per_level: 64, dim: 16 }
    }
}

/// A semantic identifier: one token per codebook level.
///
/// Ordering is lexicographic over the tokens, which is the tie-break used
/// everywhere a deterministic order between SIDs is needed.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SidSequence(Vec<u16>);

impl SidSequence {
    pub fn new(tokens: Vec<u16>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<u16> {
        self.0
    }
}

impl From<Vec<u16>> for SidSequence {
    fn from(v: Vec<u16>) -> Self {
        Self(v)
    }
}

impl fmt::Debug for SidSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sid{:?}", self.0)
    }
}

/// Comma-joined tokens, the form used in every text file.
impl fmt::Display for SidSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl core::str::FromStr for SidSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for part in s.split(',') {
            let t: u16 = part
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(alloc::format!("bad SID token {part:?}")))?;
            tokens.push(t);
        }
        Ok(Self(tokens))
    }
}
