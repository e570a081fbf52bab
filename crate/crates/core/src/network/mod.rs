//! Multi-path U-Net assembly: early/late/hyper-dense fusion over per-modality
//! encoder streams, inception blocks throughout, summed skip connections and
//! a softmax head.

pub mod config;
pub mod connectivity;
pub mod permutation;
pub mod shapes;

pub use config::{DensePool, Fusion, NetworkConfig};
pub use connectivity::{connectivity_graph, render, Edge};
pub use permutation::{permutation, BlockRef, PermutationRule};
pub use shapes::{shape_table, ShapeTable};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{BnBuffer, Graph, NodeId};
use crate::inception::{InceptionBlock, InceptionSpec};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

use shapes::{ShapeRow, Shape3};

/// He-style fan-in scaled normal draw.
fn he_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// The learned 1×1 reduction that follows each nearest-neighbour upsample.
#[derive(Debug, Clone)]
struct UpReduce {
    kernel: ParamId,
    bias: ParamId,
    bn: Option<(ParamId, ParamId, usize)>,
}

/// A fully built, trainable network. Parameters and batchnorm running
/// statistics are owned here; each forward pass records a fresh graph.
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    pub params: ParamSet<T>,
    pub bn: Vec<BnBuffer<T>>,
    encoders: Vec<Vec<InceptionBlock>>,
    bridge: InceptionBlock,
    ups: Vec<UpReduce>,
    decoders: Vec<InceptionBlock>,
    head_kernel: ParamId,
    head_bias: ParamId,
}

/// Result of one recorded forward pass.
pub struct ForwardPass<T: Scalar> {
    pub graph: Graph<T>,
    /// Softmax output, `[B, num_classes, H, W]`.
    pub output: NodeId,
    /// Layer table observed on the live tensors (encoder rows from path 1).
    pub traced: ShapeTable,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes all parameters; deterministic in `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut bn = Vec::new();
        let depth = config.depth;
        let paths = match config.effective_fusion() {
            Fusion::Early => 1,
            _ => config.num_streams(),
        };
        let spec = |cin: usize, cout: usize| {
            InceptionSpec::equal_split(
                cin,
                cout,
                config.module_variant,
                config.dilations,
                config.batchnorm,
            )
        };

        let mut encoders = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut layers = Vec::with_capacity(depth);
            for l in 0..depth {
                let s = spec(config.encoder_in_channels(l), config.width(l));
                layers.push(InceptionBlock::build(
                    &s,
                    &format!("s{}.l{l}", p + 1),
                    &mut params,
                    &mut bn,
                    &mut |shape, fan_in| he_init(&mut rng, shape, fan_in),
                )?);
            }
            encoders.push(layers);
        }

        let bridge = InceptionBlock::build(
            &spec(config.bridge_in_channels(), config.width(depth)),
            "bridge",
            &mut params,
            &mut bn,
            &mut |shape, fan_in| he_init(&mut rng, shape, fan_in),
        )?;

        let mut ups = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth);
        for k in 1..=depth {
            let cin = config.width(depth - k + 1);
            let cout = config.width(depth - k);
            let kernel = params.add(
                format!("up{k}.reduce.kernel"),
                he_init(&mut rng, vec![cout, cin, 1, 1], cin),
            )?;
            let bias = params.add(format!("up{k}.reduce.bias"), Tensor::zeros(vec![cout]))?;
            let bn_ids = if config.batchnorm {
                let gamma = params.add(
                    format!("up{k}.reduce.gamma"),
                    Tensor::full(vec![cout], T::one()),
                )?;
                let beta =
                    params.add(format!("up{k}.reduce.beta"), Tensor::zeros(vec![cout]))?;
                bn.push(BnBuffer::new(cout));
                Some((gamma, beta, bn.len() - 1))
            } else {
                None
            };
            ups.push(UpReduce {
                kernel,
                bias,
                bn: bn_ids,
            });
            decoders.push(InceptionBlock::build(
                &spec(cout, cout),
                &format!("dec{k}"),
                &mut params,
                &mut bn,
                &mut |shape, fan_in| he_init(&mut rng, shape, fan_in),
            )?);
        }

        let w0 = config.width(0);
        let head_kernel = params.add(
            "head.kernel".to_string(),
            he_init(&mut rng, vec![config.num_classes, w0, 1, 1], w0),
        )?;
        let head_bias = params.add(
            "head.bias".to_string(),
            Tensor::zeros(vec![config.num_classes]),
        )?;

        Ok(Network {
            config,
            params,
            bn,
            encoders,
            bridge,
            ups,
            decoders,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Records a forward pass over one batch. `inputs` holds one
    /// `[B, 1, H, W]` tensor per modality, in config order.
    pub fn forward(&mut self, inputs: &[Tensor<T>], training: bool) -> Result<ForwardPass<T>> {
        let n = self.config.num_streams();
        if inputs.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} modality tensors, got {}",
                inputs.len()
            )));
        }
        let (expect_h, expect_w) = self.config.input_spatial;
        let mut batch = 0;
        for (i, t) in inputs.iter().enumerate() {
            let (b, c, h, w) = t.dims4()?;
            if c != 1 || h != expect_h || w != expect_w {
                return Err(Error::Shape(format!(
                    "modality {i} has shape {:?}, expected [B, 1, {expect_h}, {expect_w}]",
                    t.shape()
                )));
            }
            if i == 0 {
                batch = b;
            } else if b != batch {
                return Err(Error::Shape(format!(
                    "modality {i} batch {b} differs from {batch}"
                )));
            }
        }

        let fusion = self.config.effective_fusion();
        let depth = self.config.depth;
        let paths = self.encoders.len();
        let mut g = Graph::new();
        let mut traced: Vec<ShapeRow> = Vec::new();
        let modality_nodes: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let path_inputs: Vec<NodeId> = match fusion {
            Fusion::Early => vec![g.concat_channels(&modality_nodes)?],
            _ => modality_nodes,
        };

        let shape3 = |g: &Graph<T>, id: NodeId| -> Shape3 {
            let (_, c, h, w) = g.output(id).dims4().expect("rank-4 activations");
            (c, h, w)
        };

        // pooled[p][l] is the chain [x, pool(x), pool²(x), ...] of path p's
        // layer-l output, extended on demand and shared by every consumer.
        let mut enc_out: Vec<Vec<NodeId>> = vec![Vec::new(); paths];
        let mut pooled: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); paths];
        for l in 0..depth {
            // materialize layer l for every path before layer l+1 needs it
            for p in 0..paths {
                let block_in = if l == 0 {
                    path_inputs[p]
                } else {
                    match fusion {
                        Fusion::Hyperdense => {
                            let rule = permutation::permutation(p + 1, l, paths)?;
                            let mut parts = Vec::with_capacity(rule.order.len());
                            for b in &rule.order {
                                parts.push(self.pooled_to(
                                    &mut g,
                                    &mut pooled,
                                    b.stream - 1,
                                    b.layer,
                                    l - b.layer,
                                )?);
                            }
                            g.concat_channels(&parts)?
                        }
                        _ => self.pooled_to(&mut g, &mut pooled, p, l - 1, 1)?,
                    }
                };
                let out = self.encoders[p][l].forward(
                    &mut g,
                    block_in,
                    &self.params,
                    &mut self.bn,
                    training,
                )?;
                enc_out[p].push(out);
                pooled[p].push(vec![out]);
                if p == 0 {
                    let name = if l == 0 {
                        "Conv Layer 1".to_string()
                    } else {
                        format!("Layer {}", l + 1)
                    };
                    traced.push(ShapeRow {
                        name,
                        input: shape3(&g, block_in),
                        output: shape3(&g, out),
                    });
                }
            }
            // the own-path pooling row, observed on path 1
            let once = self.pooled_to(&mut g, &mut pooled, 0, l, 1)?;
            traced.push(ShapeRow {
                name: format!("Max-pooling {}", l + 1),
                input: shape3(&g, enc_out[0][l]),
                output: shape3(&g, once),
            });
        }

        let bridge_in = match fusion {
            Fusion::Hyperdense => {
                let rule = permutation::permutation(1, depth, paths)?;
                let mut parts = Vec::with_capacity(rule.order.len());
                for b in &rule.order {
                    parts.push(self.pooled_to(
                        &mut g,
                        &mut pooled,
                        b.stream - 1,
                        b.layer,
                        depth - b.layer,
                    )?);
                }
                g.concat_channels(&parts)?
            }
            _ => {
                let mut parts = Vec::with_capacity(paths);
                for p in 0..paths {
                    parts.push(self.pooled_to(&mut g, &mut pooled, p, depth - 1, 1)?);
                }
                g.concat_channels(&parts)?
            }
        };
        let mut dec = self
            .bridge
            .forward(&mut g, bridge_in, &self.params, &mut self.bn, training)?;
        traced.push(ShapeRow {
            name: "Bridge".to_string(),
            input: shape3(&g, bridge_in),
            output: shape3(&g, dec),
        });

        for k in 1..=depth {
            let pre = dec;
            let up = g.upsample2x(dec)?;
            let kern = g.param(&self.params, self.ups[k - 1].kernel);
            let bias = g.param(&self.params, self.ups[k - 1].bias);
            let mut reduced = g.conv2d(up, kern, bias, (1, 1))?;
            if let Some((gamma, beta, buf)) = self.ups[k - 1].bn {
                let ga = g.param(&self.params, gamma);
                let be = g.param(&self.params, beta);
                reduced = g.batchnorm(reduced, ga, be, &mut self.bn[buf], training)?;
            }
            reduced = g.relu(reduced);
            traced.push(ShapeRow {
                name: format!("Up-sample {k}"),
                input: shape3(&g, pre),
                output: shape3(&g, reduced),
            });

            // skip: elementwise sum of every path's level-(depth-k) output,
            // added to the upsampled feature
            let mut summands: Vec<NodeId> = (0..paths).map(|p| enc_out[p][depth - k]).collect();
            summands.push(reduced);
            let block_in = g.add_n(&summands)?;
            dec = self.decoders[k - 1].forward(
                &mut g,
                block_in,
                &self.params,
                &mut self.bn,
                training,
            )?;
            traced.push(ShapeRow {
                name: format!("Layer {}", depth + k),
                input: shape3(&g, block_in),
                output: shape3(&g, dec),
            });
        }

        let kern = g.param(&self.params, self.head_kernel);
        let bias = g.param(&self.params, self.head_bias);
        let logits = g.conv2d(dec, kern, bias, (1, 1))?;
        let output = g.softmax_channels(logits)?;
        traced.push(ShapeRow {
            name: "Softmax layer".to_string(),
            input: shape3(&g, dec),
            output: shape3(&g, output),
        });

        Ok(ForwardPass {
            graph: g,
            output,
            traced: ShapeTable { rows: traced },
        })
    }

    /// Extends the pooling chain of (path, layer) to `times` applications and
    /// returns that node. Own-path down-sampling (the first pool) is always
    /// max; further alignment pools follow the configured dense operator.
    fn pooled_to(
        &self,
        g: &mut Graph<T>,
        pooled: &mut [Vec<Vec<NodeId>>],
        path: usize,
        layer: usize,
        times: usize,
    ) -> Result<NodeId> {
        let chain = &mut pooled[path][layer];
        while chain.len() <= times {
            let last = *chain.last().expect("chain starts at the raw output");
            let next = if chain.len() == 1 || self.config.dense_pool == DensePool::Max {
                g.maxpool2x2(last)?
            } else {
                g.avgpool2x2(last)?
            };
            chain.push(next);
        }
        Ok(chain[times])
    }

    /// Inference helper: softmax probabilities for one batch.
    pub fn predict(&mut self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let pass = self.forward(inputs, false)?;
        Ok(pass.graph.output(pass.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inception::Variant;

    fn tiny_config(n: usize, fusion: Fusion) -> NetworkConfig {
        NetworkConfig {
            base_width: 4,
            depth: 2,
            input_spatial: (16, 16),
            ..NetworkConfig::with_streams(n, fusion)
        }
    }

    fn rand_inputs(n: usize, b: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                Tensor::from_fn(vec![b, 1, h, w], |_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f32 / (1u64 << 53) as f32
                })
            })
            .collect()
    }

    #[test]
    fn traced_shapes_agree_with_symbolic_table_on_reference_configs() {
        for fusion in [Fusion::Early, Fusion::Late, Fusion::Hyperdense] {
            let mut c = NetworkConfig::with_streams(4, fusion);
            // shrink spatial only; channel structure stays Table-like
            c.input_spatial = (32, 32);
            let symbolic = shape_table(&c).unwrap();
            let mut net = Network::<f32>::new(c, 0).unwrap();
            let inputs = rand_inputs(4, 1, 32, 32, 9);
            let pass = net.forward(&inputs, true).unwrap();
            assert_eq!(pass.traced.rows, symbolic.rows, "{fusion:?}");
        }
    }

    #[test]
    fn single_stream_fusion_modes_are_bitwise_identical() {
        let seed = 11;
        let mut outs = Vec::new();
        for fusion in [Fusion::Late, Fusion::Hyperdense, Fusion::Early] {
            let c = tiny_config(1, fusion);
            assert_eq!(
                shape_table(&c).unwrap(),
                shape_table(&tiny_config(1, Fusion::Late)).unwrap()
            );
            let mut net = Network::<f32>::new(c, seed).unwrap();
            let inputs = rand_inputs(1, 2, 16, 16, 3);
            outs.push(net.predict(&inputs).unwrap());
        }
        for o in &outs[1..] {
            assert_eq!(o.shape(), outs[0].shape());
            assert!(o
                .data()
                .iter()
                .zip(outs[0].data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_forward_outputs() {
        let c = tiny_config(2, Fusion::Hyperdense);
        let inputs = rand_inputs(2, 2, 16, 16, 5);
        let mut a = Network::<f32>::new(c.clone(), 7).unwrap();
        let mut b = Network::<f32>::new(c, 7).unwrap();
        let (ya, yb) = (a.predict(&inputs).unwrap(), b.predict(&inputs).unwrap());
        assert!(ya
            .data()
            .iter()
            .zip(yb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gradient_reaches_first_layer_of_every_stream() {
        let c = tiny_config(2, Fusion::Hyperdense);
        let mut net = Network::<f32>::new(c, 0).unwrap();
        let inputs = rand_inputs(2, 1, 16, 16, 13);
        let target: Vec<u8> = (0..16 * 16).map(|i| u8::from(i % 3 == 0)).collect();
        let pass = net.forward(&inputs, true).unwrap();
        let mut g = pass.graph;
        let loss = g.cross_entropy(pass.output, &target).unwrap();
        g.backward(loss).unwrap();
        net.params.zero_grads();
        g.accumulate_param_grads(&mut net.params);
        for (id, name, _) in net.params.iter() {
            if name.starts_with("s1.l0") || name.starts_with("s2.l0") {
                if name.ends_with(".kernel") {
                    let nonzero = net.params.grad(id).data().iter().any(|v| *v != 0.0);
                    assert!(nonzero, "no gradient reached {name}");
                }
            }
        }
    }

    #[test]
    fn wrong_modality_count_is_rejected() {
        let mut net = Network::<f32>::new(tiny_config(2, Fusion::Late), 0).unwrap();
        let inputs = rand_inputs(1, 1, 16, 16, 0);
        assert!(net.forward(&inputs, true).is_err());
    }

    #[test]
    fn wrong_spatial_extent_is_rejected() {
        let mut net = Network::<f32>::new(tiny_config(1, Fusion::Late), 0).unwrap();
        let inputs = rand_inputs(1, 1, 8, 8, 0);
        assert!(net.forward(&inputs, true).is_err());
    }

    #[test]
    fn asymmetric_variant_runs_and_is_cheaper() {
        let mut std_cfg = tiny_config(2, Fusion::Hyperdense);
        std_cfg.base_width = 8;
        let mut asym_cfg = std_cfg.clone();
        asym_cfg.module_variant = Variant::Asymmetric;
        let std_net = Network::<f32>::new(std_cfg, 0).unwrap();
        let mut asym_net = Network::<f32>::new(asym_cfg, 0).unwrap();
        assert!(asym_net.params.total_scalars() < std_net.params.total_scalars());
        let inputs = rand_inputs(2, 1, 16, 16, 1);
        let out = asym_net.predict(&inputs).unwrap();
        assert_eq!(out.shape(), [1, 2, 16, 16]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn symbolic_table_matches_observed_forward_shapes(
                n in 1..4usize,
                fusion_ix in 0..3usize,
                variant_ix in 0..2usize,
                depth in 1..3usize,
                base in 1..6usize,
                batchnorm in proptest::bool::ANY,
                pool_ix in 0..2usize,
            ) {
                let fusion = [Fusion::Early, Fusion::Late, Fusion::Hyperdense][fusion_ix];
                let spatial = 8usize;
                let config = NetworkConfig {
                    base_width: base,
                    depth,
                    input_spatial: (spatial, spatial),
                    batchnorm,
                    module_variant: [Variant::Standard, Variant::Asymmetric][variant_ix],
                    dense_pool: [DensePool::Max, DensePool::Avg][pool_ix],
                    ..NetworkConfig::with_streams(n, fusion)
                };
                let symbolic = shape_table(&config).unwrap();
                let mut net = Network::<f32>::new(config, 2).unwrap();
                let inputs = rand_inputs(n, 2, spatial, spatial, 17);
                let pass = net.forward(&inputs, true).unwrap();
                prop_assert_eq!(pass.traced.rows, symbolic.rows);
            }
        }
    }
}
