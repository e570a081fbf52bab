//! Extended Inception blocks: five parallel branches (1×1, 3×3, 5×5 and two
//! dilated 3×3) concatenated channel-wise, with no pooling branch.
//!
//! Every spatial branch starts with a 1×1 reduction to the branch width, so
//! the spatial convolution maps width → width. The asymmetric variant
//! factorizes each n×n spatial convolution into a 1×n followed by an n×1 of
//! equal width, cutting its spatial-kernel parameters to (2/n)× — a third
//! cheaper for the 3×3 branches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnBuffer, Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Convolution kernel style inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    Asymmetric,
}

/// Declarative description of one block.
#[derive(Debug, Clone)]
pub struct InceptionSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub variant: Variant,
    /// Dilation rates of the two extra branches; both > 1 and distinct.
    pub dilations: (usize, usize),
    /// Output widths of the branches in fixed order:
    /// 1×1, 3×3, 5×5, 3×3 dilated (rate .0), 3×3 dilated (rate .1).
    /// Zero-width branches are omitted from the built block.
    pub widths: [usize; 5],
    /// Insert batch normalization after every convolution.
    pub batchnorm: bool,
}

impl InceptionSpec {
    /// Splits `out_channels` evenly across the five branches, assigning the
    /// remainder to the 1×1 branch.
    pub fn equal_split(
        in_channels: usize,
        out_channels: usize,
        variant: Variant,
        dilations: (usize, usize),
        batchnorm: bool,
    ) -> Self {
        let w = out_channels / 5;
        let rem = out_channels - 4 * w;
        InceptionSpec {
            in_channels,
            out_channels,
            variant,
            dilations,
            widths: [rem, w, w, w, w],
            batchnorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "inception channels must be positive".into(),
            ));
        }
        let sum: usize = self.widths.iter().sum();
        if sum != self.out_channels {
            return Err(Error::Config(format!(
                "inception branch widths {:?} sum to {sum}, expected out_channels {}",
                self.widths, self.out_channels
            )));
        }
        let (d0, d1) = self.dilations;
        if d0 <= 1 || d1 <= 1 {
            return Err(Error::Config(format!(
                "inception dilation rates must both exceed 1, got ({d0}, {d1})"
            )));
        }
        if d0 == d1 {
            return Err(Error::Config(format!(
                "inception dilation rates must be distinct, got ({d0}, {d1})"
            )));
        }
        Ok(())
    }

    /// Per-branch parameter breakdown; see [`BranchParams`].
    pub fn branch_breakdown(&self) -> Vec<BranchParams> {
        self.branch_plans()
            .iter()
            .map(|plan| {
                let mut bp = BranchParams {
                    name: plan.name,
                    width: plan.width,
                    reduce_weights: 0,
                    spatial_weights: 0,
                    biases: 0,
                    norm: 0,
                };
                for conv in &plan.convs {
                    let numel = conv.out * conv.inp * conv.kh * conv.kw;
                    if conv.is_reduce {
                        bp.reduce_weights += numel;
                    } else {
                        bp.spatial_weights += numel;
                    }
                    bp.biases += conv.out;
                    if self.batchnorm {
                        bp.norm += 2 * conv.out;
                    }
                }
                bp
            })
            .collect()
    }

    /// Exact count of learnable scalars (weights + biases + γ/β if enabled).
    pub fn parameter_count(&self) -> usize {
        self.branch_breakdown()
            .iter()
            .map(|b| b.reduce_weights + b.spatial_weights + b.biases + b.norm)
            .sum()
    }

    /// The concrete convolution sequence of each non-empty branch.
    fn branch_plans(&self) -> Vec<BranchPlan> {
        let cin = self.in_channels;
        let mut plans = Vec::new();
        let branch = |name, width, n: usize, dilation: usize| -> BranchPlan {
            let mut convs = Vec::new();
            if n == 1 {
                // pure 1×1 projection; a reduction in front would be redundant
                convs.push(ConvPlan::new(cin, width, 1, 1, (1, 1), false));
            } else {
                convs.push(ConvPlan::new(cin, width, 1, 1, (1, 1), true));
                match self.variant {
                    Variant::Standard => {
                        convs.push(ConvPlan::new(
                            width,
                            width,
                            n,
                            n,
                            (dilation, dilation),
                            false,
                        ));
                    }
                    Variant::Asymmetric => {
                        convs.push(ConvPlan::new(width, width, 1, n, (1, dilation), false));
                        convs.push(ConvPlan::new(width, width, n, 1, (dilation, 1), false));
                    }
                }
            }
            BranchPlan { name, width, convs }
        };
        let (d0, d1) = self.dilations;
        for (name, width, n, d) in [
            ("b1x1", self.widths[0], 1, 1),
            ("b3x3", self.widths[1], 3, 1),
            ("b5x5", self.widths[2], 5, 1),
            ("bd_lo", self.widths[3], 3, d0),
            ("bd_hi", self.widths[4], 3, d1),
        ] {
            if width > 0 {
                plans.push(branch(name, width, n, d));
            }
        }
        plans
    }
}

/// Parameter accounting for one branch, split by role so the factorization
/// economy (spatial kernels only) can be compared across variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchParams {
    pub name: &'static str,
    pub width: usize,
    pub reduce_weights: usize,
    pub spatial_weights: usize,
    pub biases: usize,
    pub norm: usize,
}

struct BranchPlan {
    name: &'static str,
    width: usize,
    convs: Vec<ConvPlan>,
}

struct ConvPlan {
    inp: usize,
    out: usize,
    kh: usize,
    kw: usize,
    dilation: (usize, usize),
    is_reduce: bool,
}

impl ConvPlan {
    fn new(inp: usize, out: usize, kh: usize, kw: usize, dilation: (usize, usize), is_reduce: bool) -> Self {
        ConvPlan {
            inp,
            out,
            kh,
            kw,
            dilation,
            is_reduce,
        }
    }
}

/// One registered convolution inside a built block.
#[derive(Debug, Clone)]
struct ConvUnit {
    kernel: ParamId,
    bias: ParamId,
    dilation: (usize, usize),
    /// (γ, β, index into the network's batchnorm buffer list)
    bn: Option<(ParamId, ParamId, usize)>,
}

#[derive(Debug, Clone)]
struct Branch {
    convs: Vec<ConvUnit>,
    width: usize,
}

/// A built, trainable block. Parameters live in the shared [`ParamSet`];
/// running statistics live in the shared buffer list; the block itself only
/// holds handles, so it is cheap to clone and thread-confined like the graph.
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    branches: Vec<Branch>,
    out_channels: usize,
}

impl InceptionBlock {
    /// Registers all parameters of `spec` under `prefix` and returns the
    /// block. `init_weight(shape, fan_in)` supplies kernel tensors; biases
    /// start at zero, γ at one, β at zero.
    pub fn build<T: Scalar>(
        spec: &InceptionSpec,
        prefix: &str,
        params: &mut ParamSet<T>,
        bn_buffers: &mut Vec<BnBuffer<T>>,
        init_weight: &mut dyn FnMut(Vec<usize>, usize) -> Tensor<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut branches = Vec::new();
        for plan in spec.branch_plans() {
            let mut convs = Vec::new();
            for (ci, conv) in plan.convs.iter().enumerate() {
                let role = if conv.is_reduce {
                    "reduce".to_string()
                } else if plan.convs.len() > 2 && !conv.is_reduce {
                    // factorized pair: distinguish the 1×n and n×1 halves
                    format!("conv{}x{}", conv.kh, conv.kw)
                } else {
                    "conv".to_string()
                };
                let name = format!("{prefix}.{}.{role}", plan.name);
                debug_assert!(ci < 3);
                let fan_in = conv.inp * conv.kh * conv.kw;
                let kernel = params.add(
                    format!("{name}.kernel"),
                    init_weight(vec![conv.out, conv.inp, conv.kh, conv.kw], fan_in),
                )?;
                let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![conv.out]))?;
                let bn = if spec.batchnorm {
                    let gamma =
                        params.add(format!("{name}.gamma"), Tensor::full(vec![conv.out], T::one()))?;
                    let beta = params.add(format!("{name}.beta"), Tensor::zeros(vec![conv.out]))?;
                    bn_buffers.push(BnBuffer::new(conv.out));
                    Some((gamma, beta, bn_buffers.len() - 1))
                } else {
                    None
                };
                convs.push(ConvUnit {
                    kernel,
                    bias,
                    dilation: conv.dilation,
                    bn,
                });
            }
            branches.push(Branch {
                convs,
                width: plan.width,
            });
        }
        Ok(InceptionBlock {
            branches,
            out_channels: spec.out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Channel offset of each branch in the concatenated output, paired with
    /// its width (used by receptive-field inspection in tests).
    pub fn branch_channel_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::new();
        let mut off = 0;
        for b in &self.branches {
            ranges.push((off, b.width));
            off += b.width;
        }
        ranges
    }

    /// Records the block's forward pass on the tape.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        params: &ParamSet<T>,
        bn_buffers: &mut [BnBuffer<T>],
        training: bool,
    ) -> Result<NodeId> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut cur = x;
            for conv in &branch.convs {
                let k = g.param(params, conv.kernel);
                let b = g.param(params, conv.bias);
                cur = g.conv2d(cur, k, b, conv.dilation)?;
                if let Some((gamma, beta, buf)) = conv.bn {
                    let ga = g.param(params, gamma);
                    let be = g.param(params, beta);
                    cur = g.batchnorm(cur, ga, be, &mut bn_buffers[buf], training)?;
                }
                cur = g.relu(cur);
            }
            outs.push(cur);
        }
        g.concat_channels(&outs)
    }
}
