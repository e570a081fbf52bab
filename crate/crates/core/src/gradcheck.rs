//! Finite-difference verification of every backward rule, in 64-bit.
//!
//! Each registered op gets 20 random small instances; a central difference
//! with ε = 1e-5 is compared against the analytic gradient elementwise. The
//! relative error uses a 1e-3 denominator floor so that near-zero gradients
//! are compared absolutely, keeping finite-difference round-off (~1e-8 at
//! this floor) far below the 1e-6 pass threshold.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BnBuffer, Graph, NodeId};
use crate::network::{Fusion, Network, NetworkConfig};
use crate::tensor::Tensor;

/// Central-difference step.
pub const EPSILON: f64 = 1e-5;

/// Step size for the whole-network check. Deep compositions through batch
/// normalization carry large third derivatives, so the ε² truncation term at
/// 1e-5 alone can exceed the 1e-4 gate; at 1e-6 truncation falls ~100× while
/// 64-bit central-difference roundoff stays near 1e-8.
pub const NETWORK_EPSILON: f64 = 1e-6;
/// Pass threshold for single-op checks.
pub const OP_THRESHOLD: f64 = 1e-6;
/// Pass threshold for the end-to-end tiny-network check.
pub const NETWORK_THRESHOLD: f64 = 1e-4;
/// Instances per op.
pub const INSTANCES: usize = 20;

/// Ops accepted by [`check_op`].
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv2d_dilated",
    "conv2d_asymmetric",
    "maxpool2x2",
    "avgpool2x2",
    "upsample2x",
    "concat",
    "add",
    "mul",
    "relu",
    "softmax",
    "batchnorm",
    "batchnorm_inference",
    "sum_all",
    "cross_entropy",
    "soft_dice",
];

/// Outcome of one check run.
#[derive(Debug, Clone)]
pub struct Report {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// Runs 20 random instances of `name` and reports the worst relative error.
pub fn check_op(name: &str, seed: u64) -> Result<Report> {
    if !OP_NAMES.contains(&name) {
        return Err(Error::Config(format!(
            "unknown gradcheck op `{name}`; known ops: {}",
            OP_NAMES.join(", ")
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        let (inputs, build) = instance(name, &mut rng);
        let err = max_rel_err(&inputs, &build)?;
        worst = worst.max(err);
    }
    Ok(Report {
        name: name.to_string(),
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: OP_THRESHOLD,
    })
}

/// Worst relative error between analytic and central-difference gradients,
/// over every element of every input tensor.
pub fn max_rel_err(inputs: &[Tensor<f64>], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if g.output(loss).numel() != 1 {
        return Err(Error::GradCheck("check target is not a scalar".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.output(loss).data()[0])
    };

    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + EPSILON;
            let lp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - EPSILON;
            let lm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (lp - lm) / (2.0 * EPSILON);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Elements sampled per parameter tensor in the whole-network check; full
/// enumeration would need millions of forward passes for no extra assurance.
const NETWORK_SAMPLES_PER_TENSOR: usize = 4;

/// Finite-difference check of a complete tiny hyper-dense network (two paths,
/// 16×16 inputs, base width 4) against the cross-entropy loss. Every
/// parameter tensor is probed at a deterministic subsample of elements.
pub fn check_full_network(seed: u64) -> Result<Report> {
    let config = NetworkConfig {
        base_width: 4,
        input_spatial: (16, 16),
        ..NetworkConfig::with_streams(2, Fusion::Hyperdense)
    };
    let mut net = Network::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let batch = 2;
    let inputs: Vec<Tensor<f64>> = (0..2)
        .map(|_| uniform(&mut rng, vec![batch, 1, 16, 16], 0.0, 1.0))
        .collect();
    let target: Vec<u8> = (0..batch * 16 * 16)
        .map(|_| u8::from(rng.random_range(0.0..1.0) < 0.35))
        .collect();

    let eval = |net: &mut Network<f64>| -> Result<f64> {
        let pass = net.forward(&inputs, true)?;
        let mut g = pass.graph;
        let loss = g.cross_entropy(pass.output, &target)?;
        Ok(g.output(loss).data()[0])
    };

    // One analytic pass; batchnorm running buffers drift across the repeated
    // forward evaluations below, but training-mode loss never reads them.
    let pass = net.forward(&inputs, true)?;
    let mut g = pass.graph;
    let loss = g.cross_entropy(pass.output, &target)?;
    g.backward(loss)?;
    net.params.zero_grads();
    g.accumulate_param_grads(&mut net.params);
    drop(g);

    let mut probes: Vec<(crate::params::ParamId, usize, f64)> = Vec::new();
    for (id, _, value) in net.params.iter() {
        let len = value.numel();
        let count = NETWORK_SAMPLES_PER_TENSOR.min(len);
        let stride = len / count;
        for i in 0..count {
            let ei = i * stride;
            probes.push((id, ei, net.params.grad(id).data()[ei]));
        }
    }

    let mut worst = 0.0f64;
    for &(id, ei, analytic) in &probes {
        let orig = net.params.value(id).data()[ei];
        net.params.value_mut(id).data_mut()[ei] = orig + NETWORK_EPSILON;
        let lp = eval(&mut net)?;
        net.params.value_mut(id).data_mut()[ei] = orig - NETWORK_EPSILON;
        let lm = eval(&mut net)?;
        net.params.value_mut(id).data_mut()[ei] = orig;
        let numeric = (lp - lm) / (2.0 * NETWORK_EPSILON);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(Report {
        name: "full_network_small".to_string(),
        instances: probes.len(),
        max_rel_err: worst,
        threshold: NETWORK_THRESHOLD,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random probability map built by a plain softmax over random logits; values
/// stay well inside the cross-entropy clamp.
fn prob_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let hw = h * w;
    let logits = uniform(rng, vec![b, c, h, w], -2.0, 2.0);
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    for bi in 0..b {
        for p in 0..hw {
            let mut sum = 0.0;
            for ci in 0..c {
                sum += logits.data()[(bi * c + ci) * hw + p].exp();
            }
            for ci in 0..c {
                let i = (bi * c + ci) * hw + p;
                out.data_mut()[i] = logits.data()[i].exp() / sum;
            }
        }
    }
    out
}

/// Builds one random instance: the input tensors to differentiate against
/// plus a closure recording the forward pass up to a scalar. Constants (e.g.
/// the weighting tensor that makes order-sensitive ops non-degenerate under
/// a plain sum) are captured by the closure and replayed identically.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    match name {
        "conv2d" => {
            let (b, cin, cout) = (
                rng.random_range(1..=2usize),
                rng.random_range(1..=3usize),
                rng.random_range(1..=3usize),
            );
            let (h, w) = (rng.random_range(3..=6usize), rng.random_range(3..=6usize));
            let k = if rng.random_range(0..2) == 0 { 1 } else { 3 };
            let x = uniform(rng, vec![b, cin, h, w], -1.0, 1.0);
            let kr = uniform(rng, vec![cout, cin, k, k], -1.0, 1.0);
            let bias = uniform(rng, vec![cout], -0.5, 0.5);
            (
                vec![x, kr, bias],
                Box::new(|g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], (1, 1))?;
                    Ok(g.sum_all(y))
                }),
            )
        }
        "conv2d_dilated" => {
            let d = rng.random_range(2..=3usize);
            let (h, w) = (rng.random_range(7..=9usize), rng.random_range(7..=9usize));
            let x = uniform(rng, vec![1, 2, h, w], -1.0, 1.0);
            let kr = uniform(rng, vec![2, 2, 3, 3], -1.0, 1.0);
            let bias = uniform(rng, vec![2], -0.5, 0.5);
            (
                vec![x, kr, bias],
                Box::new(move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], (d, d))?;
                    Ok(g.sum_all(y))
                }),
            )
        }
        "conv2d_asymmetric" => {
            // 1xn followed by nx1, the factorized pair
            let (h, w) = (rng.random_range(4..=6usize), rng.random_range(4..=6usize));
            let x = uniform(rng, vec![1, 2, h, w], -1.0, 1.0);
            let k1 = uniform(rng, vec![2, 2, 1, 3], -1.0, 1.0);
            let b1 = uniform(rng, vec![2], -0.5, 0.5);
            let k2 = uniform(rng, vec![2, 2, 3, 1], -1.0, 1.0);
            let b2 = uniform(rng, vec![2], -0.5, 0.5);
            (
                vec![x, k1, b1, k2, b2],
                Box::new(|g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], (1, 1))?;
                    let y = g.conv2d(y, ids[3], ids[4], (1, 1))?;
                    Ok(g.sum_all(y))
                }),
            )
        }
        "maxpool2x2" | "avgpool2x2" => {
            let max = name == "maxpool2x2";
            let (h, w) = (
                2 * rng.random_range(2..=3usize),
                2 * rng.random_range(2..=3usize),
            );
            // continuous draws keep window values separated well beyond ε
            let x = uniform(rng, vec![2, 2, h, w], -1.0, 1.0);
            let wt = uniform(rng, vec![2, 2, h / 2, w / 2], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let y = if max {
                        g.maxpool2x2(ids[0])?
                    } else {
                        g.avgpool2x2(ids[0])?
                    };
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "upsample2x" => {
            let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
            let x = uniform(rng, vec![2, 2, h, w], -1.0, 1.0);
            let wt = uniform(rng, vec![2, 2, 2 * h, 2 * w], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let y = g.upsample2x(ids[0])?;
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "concat" => {
            let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
            let cs = [
                rng.random_range(1..=2usize),
                rng.random_range(1..=2usize),
                rng.random_range(1..=2usize),
            ];
            let xs: Vec<Tensor<f64>> = cs
                .iter()
                .map(|&c| uniform(rng, vec![1, c, h, w], -1.0, 1.0))
                .collect();
            let wt = uniform(rng, vec![1, cs.iter().sum(), h, w], -1.0, 1.0);
            (
                xs,
                Box::new(move |g, ids| {
                    let y = g.concat_channels(ids)?;
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "add" => {
            let shape = vec![2, 2, 3, 3];
            let xs: Vec<Tensor<f64>> = (0..3)
                .map(|_| uniform(rng, shape.clone(), -1.0, 1.0))
                .collect();
            let wt = uniform(rng, shape, -1.0, 1.0);
            (
                xs,
                Box::new(move |g, ids| {
                    let y = g.add_n(ids)?;
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "mul" => {
            let shape = vec![2, 1, 3, 4];
            let a = uniform(rng, shape.clone(), -1.0, 1.0);
            let b = uniform(rng, shape, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(|g, ids| {
                    let y = g.mul(ids[0], ids[1])?;
                    Ok(g.sum_all(y))
                }),
            )
        }
        "relu" => {
            // jitter inputs away from the kink at 0 (|x| ≥ 0.2 >> ε)
            let x = Tensor::from_fn(vec![2, 2, 4, 4], |_| {
                let mag = rng.random_range(0.2..1.0);
                if rng.random_range(0..2) == 0 {
                    mag
                } else {
                    -mag
                }
            });
            let wt = uniform(rng, vec![2, 2, 4, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let y = g.relu(ids[0]);
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "softmax" => {
            let c = rng.random_range(2..=4usize);
            let x = uniform(rng, vec![2, c, 3, 3], -2.0, 2.0);
            let wt = uniform(rng, vec![2, c, 3, 3], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let y = g.softmax_channels(ids[0])?;
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "batchnorm" | "batchnorm_inference" => {
            let training = name == "batchnorm";
            let c = rng.random_range(1..=3usize);
            let x = uniform(rng, vec![2, c, 3, 3], -1.0, 1.0);
            let gamma = uniform(rng, vec![c], 0.5, 1.5);
            let beta = uniform(rng, vec![c], -0.5, 0.5);
            let wt = uniform(rng, vec![2, c, 3, 3], -1.0, 1.0);
            let rm = uniform(rng, vec![c], -0.5, 0.5);
            let rv = uniform(rng, vec![c], 0.2, 1.5);
            (
                vec![x, gamma, beta],
                Box::new(move |g, ids| {
                    let mut buf = BnBuffer::new(c);
                    buf.running_mean.copy_from_slice(rm.data());
                    buf.running_var.copy_from_slice(rv.data());
                    let y = g.batchnorm(ids[0], ids[1], ids[2], &mut buf, training)?;
                    let c = g.input(wt.clone());
                    let p = g.mul(y, c)?;
                    Ok(g.sum_all(p))
                }),
            )
        }
        "sum_all" => {
            let x = uniform(rng, vec![2, 3, 4, 4], -1.0, 1.0);
            (vec![x], Box::new(|g, ids| Ok(g.sum_all(ids[0]))))
        }
        "cross_entropy" => {
            let (h, w) = (3, 4);
            let c = 2;
            let pred = prob_map(rng, 2, c, h, w);
            let target: Vec<u8> = (0..2 * h * w)
                .map(|_| rng.random_range(0..c) as u8)
                .collect();
            (
                vec![pred],
                Box::new(move |g, ids| g.cross_entropy(ids[0], &target)),
            )
        }
        "soft_dice" => {
            let (h, w) = (4, 4);
            let pred = prob_map(rng, 2, 2, h, w);
            let target: Vec<u8> = (0..2 * h * w)
                .map(|_| u8::from(rng.random_range(0.0..1.0) < 0.3))
                .collect();
            (
                vec![pred],
                Box::new(move |g, ids| g.soft_dice(ids[0], &target)),
            )
        }
        other => unreachable!("op `{other}` validated by check_op"),
    }
}
