use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// N kept values out of every aligned group of M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NMPattern {
    n: usize,
    m: usize,
}

impl NMPattern {
    /// The 2:4 pattern used by FP16, BF16 and INT8 sparse GEMMs.
    pub const TWO_FOUR: NMPattern = NMPattern { n: 2, m: 4 };
    /// The 1:2 pattern used by TF32 sparse GEMMs.
    pub const ONE_TWO: NMPattern = NMPattern { n: 1, m: 2 };

    /// Largest group size; metadata indices are stored in at most 8 bits.
    pub const MAX_M: usize = 256;

    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n >= m || m > Self::MAX_M {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(NMPattern { n, m })
    }

    pub fn n(self) -> usize {
        self.n
    }

    pub fn m(self) -> usize {
        self.m
    }

    /// ceil(log2 m): metadata bits per kept value.
    pub fn index_bits(self) -> u32 {
        usize::BITS - (self.m - 1).leading_zeros()
    }

    /// Fails unless `m` divides `len`.
    pub fn check_divides(self, len: usize) -> Result<()> {
        if len % self.m == 0 {
            Ok(())
        } else {
            Err(Error::NotMultiple { what: "constrained dimension", value: len, multiple: self.m })
        }
    }
}

impl fmt::Display for NMPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for NMPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("pattern '{s}' is not of the form n:m")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("pattern '{s}' is not of the form n:m")))
        };
        NMPattern::new(parse(n)?, parse(m)?)
    }
}
