//! Data-parallel execution over independent work items.
//!
//! Results are always returned in input order so reductions performed by the
//! caller are identical whichever path ran. Without the `parallel` feature the
//! parallel path falls back to a plain loop.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run work concurrently.
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

impl std::fmt::Display for Execution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

impl std::str::FromStr for Execution {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(crate::Error::Config(format!("unknown execution mode `{other}`"))),
        }
    }
}

/// Applies `f` to every item, preserving order.
pub fn par_map<I, R, F>(exec: Execution, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Splits `0..n` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect()
}
