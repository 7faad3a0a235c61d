use std::fmt;
use std::str::FromStr;

use flashwin::{ChunkRule, TileConfig};

use crate::{HarnessError, Result};

/// Comma-separated list flag. An empty string parses to an empty list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|piece| !piece.is_empty())
            .map(|piece| piece.parse::<T>().map_err(|e| format!("`{piece}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

pub(crate) fn positive(name: &str, values: &[usize]) -> Result<()> {
    if values.contains(&0) {
        return Err(HarnessError::Usage(format!("{name} values must be >= 1")));
    }
    Ok(())
}

/// Resolves a chunk rule for `channels` and validates the layout. `Ok(None)`
/// means `auto` is undefined for this `C` and the point is skipped.
pub(crate) fn resolve_chunks(rule: ChunkRule, channels: usize) -> Result<Option<usize>> {
    let r = match (rule, rule.resolve(channels)) {
        (_, Ok(r)) => r,
        (ChunkRule::Auto, Err(_)) => return Ok(None),
        (_, Err(e)) => return Err(HarnessError::Usage(e.to_string())),
    };
    TileConfig::new(r, 1.0, 1)
        .and_then(|cfg| cfg.chunk_width(channels))
        .map_err(|e| HarnessError::Usage(format!("C = {channels}: {e}")))?;
    Ok(Some(r))
}

/// Like [`resolve_chunks`] but `auto` must be defined.
pub(crate) fn require_chunks(rule: ChunkRule, channels: usize) -> Result<usize> {
    resolve_chunks(rule, channels)?.ok_or_else(|| {
        HarnessError::Usage(format!(
            "--r auto means C/16, which is not integral for C = {channels}"
        ))
    })
}
