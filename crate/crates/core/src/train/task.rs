//! Synthetic sequence-to-sequence tasks.
//!
//! Token ids `0` and `1` are [`BOS`](crate::BOS) and [`EOS`](crate::EOS);
//! content symbols occupy `2..2 + symbols`. Sources carry no end marker.
//! Targets end with `EOS`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS};
use crate::rng::{stream, Stream};

const FIRST_SYMBOL: usize = 2;
const TEST_BUCKETS: u64 = 5;
const MAX_DRAWS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Output symbol `t` combines, by [`LocalRule`], the input symbols at
    /// positions `t - window ..= t + window`.
    LocalPattern,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalRule {
    /// Sum modulo the symbol count.
    #[default]
    Sum,
    /// Largest symbol.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Number of content symbols.
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Half-width of the local pattern window.
    #[serde(default)]
    pub window: usize,
    #[serde(default)]
    pub rule: LocalRule,
    /// Seeds the held-out set, which is shared by every run on this task.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    /// Expected output including the trailing `EOS`.
    pub tgt: Vec<usize>,
}

impl Example {
    /// Teacher-forcing decoder input: `BOS` followed by the target without
    /// its last token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len());
        v.push(BOS);
        v.extend_from_slice(&self.tgt[..self.tgt.len() - 1]);
        v
    }
}

impl SyntheticTask {
    pub fn vocab(&self) -> usize {
        FIRST_SYMBOL + self.symbols
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 {
            return Err(Error::Config("task needs at least one symbol".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// The deterministic target for `src`.
    pub fn target_for(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::LocalPattern => {
                let n = src.len();
                (0..n)
                    .map(|t| {
                        let lo = t.saturating_sub(self.window);
                        let hi = (t + self.window).min(n - 1);
                        let w = src[lo..=hi].iter().map(|&x| x - FIRST_SYMBOL);
                        FIRST_SYMBOL
                            + match self.rule {
                                LocalRule::Sum => w.sum::<usize>() % self.symbols,
                                LocalRule::Max => w.max().unwrap_or(0),
                            }
                    })
                    .collect()
            }
        };
        out.push(EOS);
        out
    }

    /// Which split a source sequence belongs to; a fixed hash of its tokens
    /// keeps the splits disjoint.
    pub fn split_of(src: &[usize]) -> Split {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in src {
            for b in (t as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        if h.is_multiple_of(TEST_BUCKETS) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, split: Split) -> Result<Example> {
        for _ in 0..MAX_DRAWS {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let src: Vec<usize> = (0..len)
                .map(|_| FIRST_SYMBOL + rng.gen_range(0..self.symbols))
                .collect();
            if Self::split_of(&src) == split {
                let tgt = self.target_for(&src);
                return Ok(Example { src, tgt });
            }
        }
        Err(Error::Config(format!("could not draw a {split:?} example from {self:?}")))
    }

    /// The fixed held-out set derived from the task seed.
    pub fn test_set(&self, n: usize) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = stream(self.seed, Stream::Eval);
        (0..n).map(|_| self.sample(&mut rng, Split::Test)).collect()
    }
}
