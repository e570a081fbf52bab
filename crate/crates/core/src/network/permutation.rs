//! Per-stream, per-layer reordering of dense feature blocks.
//!
//! Layer l of stream s consumes every block x_j^{s'} with j < l, grouped by
//! layer from l−1 down to 0; within each group the streams are rotated
//! cyclically so the consuming stream's own block comes first. For two
//! streams this yields the canonical ordering:
//! stream 1 sees [x₁¹, x₁², x₀¹, x₀²], stream 2 sees [x₁², x₁¹, x₀², x₀¹].

use std::fmt;

use crate::error::{Error, Result};

/// Identifier of one feature block: the output of conv layer `layer`
/// (0-based) in stream `stream` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockRef {
    pub stream: usize,
    pub layer: usize,
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}^{}", self.layer, self.stream)
    }
}

/// The concrete ordering consumed by one (stream, layer) site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationRule {
    pub stream: usize,
    pub layer: usize,
    pub order: Vec<BlockRef>,
}

impl fmt::Display for PermutationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.order.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}

/// π_l^s for `n` streams: all blocks of layers l−1..0, own stream first
/// within each layer group.
pub fn permutation(s: usize, l: usize, n: usize) -> Result<PermutationRule> {
    if n == 0 {
        return Err(Error::Config("permutation needs at least one stream".into()));
    }
    if s == 0 || s > n {
        return Err(Error::Config(format!(
            "stream index {s} out of range 1..={n}"
        )));
    }
    let mut order = Vec::with_capacity(l * n);
    for layer in (0..l).rev() {
        for off in 0..n {
            let stream = (s - 1 + off) % n + 1;
            order.push(BlockRef { stream, layer });
        }
    }
    Ok(PermutationRule { stream: s, layer: l, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn two_stream_display_matches_canonical_ordering() {
        let p1 = permutation(1, 2, 2).unwrap();
        assert_eq!(p1.to_string(), "[x1^1, x1^2, x0^1, x0^2]");
        let p2 = permutation(2, 2, 2).unwrap();
        assert_eq!(p2.to_string(), "[x1^2, x1^1, x0^2, x0^1]");
    }

    #[test]
    fn single_stream_is_identity_ordering() {
        let p = permutation(1, 3, 1).unwrap();
        assert_eq!(p.to_string(), "[x2^1, x1^1, x0^1]");
    }

    #[test]
    fn all_streams_see_the_same_multiset_own_block_first() {
        for n in 1..=4 {
            for l in 1..=4 {
                let sets: Vec<BTreeSet<BlockRef>> = (1..=n)
                    .map(|s| {
                        let p = permutation(s, l, n).unwrap();
                        // a permutation: no duplicates
                        let set: BTreeSet<BlockRef> = p.order.iter().copied().collect();
                        assert_eq!(set.len(), p.order.len(), "n={n} l={l} s={s}");
                        // own block leads every layer group
                        for (gi, chunk) in p.order.chunks(n).enumerate() {
                            assert_eq!(chunk[0].stream, s);
                            assert!(chunk.iter().all(|b| b.layer == l - 1 - gi));
                        }
                        set
                    })
                    .collect();
                assert!(sets.windows(2).all(|w| w[0] == w[1]), "n={n} l={l}");
            }
        }
    }

    #[test]
    fn out_of_range_stream_rejected() {
        assert!(permutation(3, 2, 2).is_err());
        assert!(permutation(0, 2, 2).is_err());
    }
}
