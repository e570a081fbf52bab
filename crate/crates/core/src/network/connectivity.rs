//! Machine-readable data-dependency listing of a configuration.
//!
//! Nodes: `s{stream}.in` (modality input), `s{stream}.l{layer}` (conv layer
//! output, 0-based), `bridge`, `dec{k}` (decoder level) and `softmax`. One
//! edge per line, `src -> dst`, in deterministic order.

use crate::error::Result;

use super::config::{Fusion, NetworkConfig};
use super::permutation::permutation;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
}

/// All data dependencies of `config`, encoder edges in permutation order.
pub fn connectivity_graph(config: &NetworkConfig) -> Result<Vec<Edge>> {
    config.validate()?;
    let fusion = config.effective_fusion();
    let paths = match fusion {
        Fusion::Early => 1,
        _ => config.num_streams(),
    };
    let depth = config.depth;
    let mut edges = Vec::new();
    let mut push = |src: String, dst: String| edges.push(Edge { src, dst });

    for s in 1..=paths {
        push(format!("s{s}.in"), format!("s{s}.l0"));
        for l in 1..depth {
            match fusion {
                Fusion::Hyperdense => {
                    for b in permutation(s, l, paths)?.order {
                        push(format!("s{}.l{}", b.stream, b.layer), format!("s{s}.l{l}"));
                    }
                }
                _ => push(format!("s{s}.l{}", l - 1), format!("s{s}.l{l}")),
            }
        }
    }

    match fusion {
        Fusion::Hyperdense => {
            for b in permutation(1, depth, paths)?.order {
                push(format!("s{}.l{}", b.stream, b.layer), "bridge".to_string());
            }
        }
        _ => {
            for s in 1..=paths {
                push(format!("s{s}.l{}", depth - 1), "bridge".to_string());
            }
        }
    }

    for k in 1..=depth {
        let dst = format!("dec{k}");
        let src = if k == 1 {
            "bridge".to_string()
        } else {
            format!("dec{}", k - 1)
        };
        push(src, dst.clone());
        // summed skip from every path's matching encoder level
        for s in 1..=paths {
            push(format!("s{s}.l{}", depth - k), dst.clone());
        }
    }
    push(format!("dec{depth}"), "softmax".to_string());
    Ok(edges)
}

/// Plain-text rendering: one `src -> dst` line per edge.
pub fn render(edges: &[Edge]) -> String {
    let mut out = String::new();
    for e in edges {
        out.push_str(&format!("{} -> {}\n", e.src, e.dst));
    }
    out
}
