//! Training loop: Adam over slice-wise batches with a single step-decayed
//! learning rate, per-epoch validation through the metrics module, epoch
//! logging, and weight checkpoints.

pub mod adam;
pub mod checkpoint;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Case, SliceSample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, MetricsReport, SegmentationMask};
use crate::network::Network;
use crate::tensor::Tensor;

use adam::{adam_step, AdamState};

/// Which loss the graph minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
}

/// Optimization protocol. Defaults follow the reference recipe: Adam with
/// β = (0.9, 0.99), learning rate 1e-4 cut to a tenth after epoch 100,
/// batches of 4 slices, 200 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            decay_epoch: 100,
            decay_factor: 0.1,
            betas: (0.9, 0.99),
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 200,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) {
            return Err(Error::Config(format!(
                "decay factor must lie in [0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_epoch < 1 || self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay epoch must lie in [1, {}], got {}",
                self.epochs, self.decay_epoch
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate in effect during a 1-based epoch: `lr0` through the decay
/// epoch, `lr0 × factor` afterwards.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch <= cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.decay_factor
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
    pub val_mhd_mm: Option<f64>,
    pub val_vs: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,train_loss,val_dsc,val_mhd_mm,val_vs,lr,seconds`; loss and
    /// metric values use shortest round-trip float formatting so identical
    /// runs serialize identically (wall time is the one run-dependent field).
    pub fn render_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dsc,val_mhd_mm,val_vs,lr,seconds\n");
        for r in &self.epochs {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.train_loss,
                opt(r.val_dsc),
                opt(r.val_mhd_mm),
                opt(r.val_vs),
                r.lr,
                r.seconds
            ));
        }
        out
    }
}

/// Periodic checkpointing: every `every` epochs into `dir`.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub every: usize,
    pub dir: PathBuf,
}

fn check_case_compatible(net: &Network<f32>, case: &Case, need_mask: bool) -> Result<()> {
    let cfg = net.config();
    if case.modality_names != cfg.modalities {
        return Err(Error::Data(format!(
            "case {} modalities {:?} do not match the configured streams {:?}",
            case.case_id, case.modality_names, cfg.modalities
        )));
    }
    let (_, h, w) = case.shape();
    if (h, w) != cfg.input_spatial {
        return Err(Error::Data(format!(
            "case {} slices are {h}×{w}, the network expects {}×{}",
            case.case_id, cfg.input_spatial.0, cfg.input_spatial.1
        )));
    }
    if need_mask && case.mask.is_none() {
        return Err(Error::Data(format!(
            "case {} has no ground-truth mask",
            case.case_id
        )));
    }
    Ok(())
}

/// Min–max normalizes a copy of every case and pools its slices.
fn labelled_slices(net: &Network<f32>, cases: &[Case]) -> Result<Vec<SliceSample>> {
    let mut samples = Vec::new();
    for case in cases {
        check_case_compatible(net, case, true)?;
        let mut c = case.clone();
        c.normalize();
        samples.extend(c.slices());
    }
    Ok(samples)
}

fn stack_batch(samples: &[SliceSample], picks: &[usize]) -> (Vec<Tensor<f32>>, Vec<u8>) {
    let n_mod = samples[picks[0]].inputs.len();
    let (_, _, h, w) = samples[picks[0]].inputs[0]
        .dims4()
        .expect("slices are rank 4");
    let b = picks.len();
    let inputs = (0..n_mod)
        .map(|m| {
            let mut data = Vec::with_capacity(b * h * w);
            for &p in picks {
                data.extend_from_slice(samples[p].inputs[m].data());
            }
            Tensor::new(vec![b, 1, h, w], data).expect("stacked to shape")
        })
        .collect();
    let mut targets = Vec::with_capacity(b * h * w);
    for &p in picks {
        targets.extend_from_slice(samples[p].label.as_ref().expect("labelled sample"));
    }
    (inputs, targets)
}

/// One optimization pass over `order`; returns the slice-weighted mean loss.
fn run_epoch(
    net: &mut Network<f32>,
    samples: &[SliceSample],
    order: &[usize],
    cfg: &TrainConfig,
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    for (batch_ix, picks) in order.chunks(cfg.batch_size).enumerate() {
        let (inputs, targets) = stack_batch(samples, picks);
        let pass = net.forward(&inputs, true)?;
        let mut g = pass.graph;
        let loss = match cfg.loss {
            LossKind::CrossEntropy => g.cross_entropy(pass.output, &targets)?,
            LossKind::SoftDice => g.soft_dice(pass.output, &targets)?,
        };
        let value = g.output(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: batch_ix,
            });
        }
        g.backward(loss)?;
        net.params.zero_grads();
        g.accumulate_param_grads(&mut net.params);
        adam_step(&mut net.params, state, lr, cfg.betas, cfg.epsilon)?;
        loss_sum += value * picks.len() as f64;
    }
    Ok(loss_sum / order.len() as f64)
}

/// Trains in place. Deterministic given (network seed, config seed, dataset):
/// the shuffle stream derives from `cfg.seed` alone and everything runs on
/// one thread.
pub fn train(
    net: &mut Network<f32>,
    train_cases: &[Case],
    val_cases: &[Case],
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPolicy>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let samples = labelled_slices(net, train_cases)?;
    for case in val_cases {
        check_case_compatible(net, case, true)?;
    }
    if let Some(p) = ckpt {
        if p.every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        std::fs::create_dir_all(&p.dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&net.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let lr = lr_at(cfg, epoch);
        let train_loss = run_epoch(net, &samples, &order, cfg, &mut state, lr, epoch)?;

        let (val_dsc, val_mhd_mm, val_vs) = if val_cases.is_empty() {
            (None, None, None)
        } else {
            let report = evaluate(net, val_cases)?;
            (
                Some(report.dsc.mean),
                report.mhd_mm.map(|s| s.mean),
                report.vs.map(|s| s.mean),
            )
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_dsc,
            val_mhd_mm,
            val_vs,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(p) = ckpt {
            if epoch % p.every == 0 {
                checkpoint::save_checkpoint(&p.dir.join(format!("epoch{epoch:04}.mdtw")), net)?;
            }
        }
    }
    Ok(log)
}

/// Slice-wise inference over one case: the predicted foreground mask (class
/// argmax ≠ 0) stacked back into a volume. Inputs are normalized the same
/// way training inputs are.
pub fn predict_case(net: &mut Network<f32>, case: &Case) -> Result<SegmentationMask> {
    check_case_compatible(net, case, false)?;
    let mut c = case.clone();
    c.normalize();
    let (d, h, w) = c.shape();
    let mut voxels = Vec::with_capacity(d * h * w);
    for slice in c.slices() {
        let probs = net.predict(&slice.inputs)?;
        let (_, classes, _, _) = probs.dims4()?;
        let data = probs.data();
        for px in 0..h * w {
            let mut best = 0usize;
            let mut best_p = data[px];
            for ch in 1..classes {
                let p = data[ch * h * w + px];
                if p > best_p {
                    best_p = p;
                    best = ch;
                }
            }
            voxels.push(u8::from(best != 0));
        }
    }
    SegmentationMask::with_spacing(vec![d, h, w], voxels, case.spacing.to_vec())
}

/// Runs prediction over labelled cases and aggregates DSC/MHD/VS.
pub fn evaluate(net: &mut Network<f32>, cases: &[Case]) -> Result<MetricsReport> {
    let mut records = Vec::with_capacity(cases.len());
    for case in cases {
        check_case_compatible(net, case, true)?;
        let predicted = predict_case(net, case)?;
        let (d, h, w) = case.shape();
        let reference = SegmentationMask::with_spacing(
            vec![d, h, w],
            case.mask.clone().expect("checked above"),
            case.spacing.to_vec(),
        )?;
        records.push(evaluate_case(&case.case_id, &reference, &predicted)?);
    }
    aggregate(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthSpec};
    use crate::network::{Fusion, NetworkConfig};

    fn tiny_net(seed: u64) -> Network<f32> {
        let config = NetworkConfig {
            modalities: crate::data::default_modality_names(2),
            base_width: 4,
            depth: 2,
            input_spatial: (16, 16),
            ..NetworkConfig::with_streams(2, Fusion::Hyperdense)
        };
        Network::<f32>::new(config, seed).unwrap()
    }

    fn tiny_dataset(seed: u64, cases: usize) -> Vec<Case> {
        synth_dataset(&SynthSpec {
            seed,
            num_cases: cases,
            size: (16, 16),
            depth: 2,
            num_modalities: 2,
            conjunctive: true,
        })
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            decay_epoch: epochs,
            lr0: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learning_rate_schedule_is_a_step_at_the_decay_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 1), 1e-4);
        assert_eq!(lr_at(&cfg, 100), 1e-4);
        assert!((lr_at(&cfg, 101) - 1e-5).abs() < 1e-20);
        assert!((lr_at(&cfg, 200) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut c = TrainConfig::default();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.decay_factor = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.decay_epoch = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.decay_epoch = 300;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn one_epoch_at_lr_zero_leaves_parameters_bitwise_unchanged() {
        let mut net = tiny_net(1);
        let cases = tiny_dataset(2, 1);
        let samples = labelled_slices(&net, &cases).unwrap();
        let before: Vec<Vec<u32>> = net
            .params
            .iter()
            .map(|(_, _, v)| v.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        let cfg = quick_config(1);
        let mut state = AdamState::new(&net.params);
        let order: Vec<usize> = (0..samples.len()).collect();
        run_epoch(&mut net, &samples, &order, &cfg, &mut state, 0.0, 1).unwrap();
        for ((_, name, v), b) in net.params.iter().zip(&before) {
            assert!(
                v.data().iter().map(|x| x.to_bits()).eq(b.iter().copied()),
                "{name} changed at lr 0"
            );
        }
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_loss_trajectories() {
        let run = || -> Vec<u64> {
            let mut net = tiny_net(5);
            let cases = tiny_dataset(6, 2);
            let log = train(&mut net, &cases, &[], &quick_config(2), None).unwrap();
            log.epochs.iter().map(|e| e.train_loss.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    fn grads_after_one_batch(net: &mut Network<f32>) {
        let cases = tiny_dataset(3, 1);
        let samples = labelled_slices(net, &cases).unwrap();
        let cfg = TrainConfig {
            batch_size: samples.len(),
            ..quick_config(1)
        };
        let mut state = AdamState::new(&net.params);
        let order: Vec<usize> = (0..samples.len()).collect();
        run_epoch(net, &samples, &order, &cfg, &mut state, 1e-3, 1).unwrap();
    }

    #[test]
    fn every_parameter_receives_gradient_in_one_dense_step() {
        // Without normalization layers every kernel and bias must see signal.
        let config = NetworkConfig {
            modalities: crate::data::default_modality_names(2),
            base_width: 4,
            depth: 2,
            input_spatial: (16, 16),
            batchnorm: false,
            ..NetworkConfig::with_streams(2, Fusion::Hyperdense)
        };
        let mut net = Network::<f32>::new(config, 0).unwrap();
        // Force every pre-activation positive (small kernels + a dominant
        // positive bias) so no rectifier branch is dead at initialization;
        // the check is about wiring, not about the initialization scheme.
        let ids: Vec<_> = net.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            for x in net.params.value_mut(id).data_mut() {
                if name.ends_with(".bias") {
                    *x = 0.5;
                } else {
                    *x *= 0.01;
                }
            }
        }
        grads_after_one_batch(&mut net);
        for (id, name, _) in net.params.iter() {
            let nonzero = net.params.grad(id).data().iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }

        // With normalization on, a convolution bias feeding straight into a
        // normalization layer is cancelled by the mean subtraction, so its
        // gradient is analytically zero (numerically a rounding residue) and
        // is excluded here; everything else must still carry signal.
        let mut net = tiny_net(0);
        grads_after_one_batch(&mut net);
        for (id, name, _) in net.params.iter() {
            if name.ends_with(".bias") && name != "head.bias" {
                continue;
            }
            let nonzero = net.params.grad(id).data().iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_batch() {
        let mut net = tiny_net(2);
        let id = net.params.id_by_name("s1.l0.b1x1.conv.kernel").unwrap();
        net.params.value_mut(id).data_mut()[0] = f32::NAN;
        let cases = tiny_dataset(9, 1);
        let err = train(&mut net, &cases, &[], &quick_config(1), None).unwrap_err();
        match err {
            Error::Diverged { epoch, batch } => {
                assert_eq!(epoch, 1);
                assert_eq!(batch, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_records_the_schedule_and_renders_csv() {
        let mut net = tiny_net(7);
        let cases = tiny_dataset(11, 2);
        let cfg = TrainConfig {
            epochs: 3,
            decay_epoch: 1,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        let log = train(&mut net, &cases, &cases[..1], &cfg, None).unwrap();
        assert_eq!(log.epochs.len(), 3);
        for r in &log.epochs {
            assert_eq!(r.lr, lr_at(&cfg, r.epoch));
            assert!(r.train_loss.is_finite());
            assert!(r.val_dsc.is_some());
        }
        assert_eq!(log.epochs[0].lr, 1e-3);
        assert!((log.epochs[1].lr - 1e-4).abs() < 1e-18);
        let csv = log.render_csv();
        assert!(csv.starts_with("epoch,train_loss,val_dsc,val_mhd_mm,val_vs,lr,seconds\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn checkpoints_are_written_at_the_requested_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = tiny_net(4);
        let cases = tiny_dataset(13, 1);
        let policy = CheckpointPolicy {
            every: 2,
            dir: dir.path().join("ckpt"),
        };
        train(&mut net, &cases, &[], &quick_config(4), Some(&policy)).unwrap();
        let mut files: Vec<String> = std::fs::read_dir(policy.dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(files, ["epoch0002.mdtw", "epoch0004.mdtw"]);
    }

    #[test]
    fn mismatched_cases_are_rejected_up_front() {
        let mut net = tiny_net(3);
        let mut cases = tiny_dataset(5, 1);
        cases[0].modality_names[1] = "FLAIR".into();
        assert!(train(&mut net, &cases, &[], &quick_config(1), None).is_err());

        let unlabelled: Vec<Case> = tiny_dataset(5, 1)
            .into_iter()
            .map(|mut c| {
                c.mask = None;
                c
            })
            .collect();
        assert!(train(&mut net, &unlabelled, &[], &quick_config(1), None).is_err());
        assert!(train(&mut net, &[], &[], &quick_config(1), None).is_err());
    }
}
