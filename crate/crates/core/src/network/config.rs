//! Declarative network description, loadable from JSON config files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inception::Variant;

/// How the per-modality paths are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Modalities concatenated at the input; one shared encoder.
    Early,
    /// Independent encoders; features concatenated at the bridge.
    Late,
    /// Every layer of every path consumes all previous layers of all paths.
    Hyperdense,
}

/// Pooling operator used to align earlier, larger dense inputs to the
/// consuming layer's resolution (hyper-dense mode only). Down-sampling
/// between a path's own consecutive layers is always max-pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensePool {
    Max,
    Avg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// One encoder stream per modality; names also key the data container.
    pub modalities: Vec<String>,
    pub fusion: Fusion,
    pub module_variant: Variant,
    /// Channel width of the first encoder level; level l has width·2^l.
    pub base_width: usize,
    /// Number of encoder levels (and of 2× down-samplings).
    pub depth: usize,
    pub input_spatial: (usize, usize),
    pub num_classes: usize,
    /// Batch normalization after every convolution.
    pub batchnorm: bool,
    pub dense_pool: DensePool,
    /// Dilation rates of the two extra inception branches.
    pub dilations: (usize, usize),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            modalities: Vec::new(),
            fusion: Fusion::Hyperdense,
            module_variant: Variant::Standard,
            base_width: 32,
            depth: 4,
            input_spatial: (256, 256),
            num_classes: 2,
            batchnorm: true,
            dense_pool: DensePool::Max,
            dilations: (2, 4),
        }
    }
}

impl NetworkConfig {
    /// Test/tooling helper: `n` synthetic modality names, everything else
    /// default.
    pub fn with_streams(n: usize, fusion: Fusion) -> Self {
        NetworkConfig {
            modalities: (1..=n).map(|i| format!("m{i}")).collect(),
            fusion,
            ..Default::default()
        }
    }

    pub fn num_streams(&self) -> usize {
        self.modalities.len()
    }

    /// A single stream admits no cross-path connectivity, so every fusion
    /// mode collapses to the same plain single-path U-Net. Normalizing here
    /// makes the degeneracy exact: identical parameters, identical graphs.
    pub fn effective_fusion(&self) -> Fusion {
        if self.num_streams() == 1 {
            Fusion::Late
        } else {
            self.fusion
        }
    }

    /// Channel width of encoder/decoder level `l` (0-based); `l == depth` is
    /// the bridge.
    pub fn width(&self, l: usize) -> usize {
        self.base_width << l
    }

    /// Input channels of encoder conv layer `l` (0-based) for one path.
    pub fn encoder_in_channels(&self, l: usize) -> usize {
        let n = self.num_streams();
        if l == 0 {
            return match self.effective_fusion() {
                Fusion::Early => n,
                _ => 1,
            };
        }
        match self.effective_fusion() {
            Fusion::Hyperdense => n * (0..l).map(|j| self.width(j)).sum::<usize>(),
            _ => self.width(l - 1),
        }
    }

    /// Input channels of the bridge block.
    pub fn bridge_in_channels(&self) -> usize {
        let n = self.num_streams();
        match self.effective_fusion() {
            Fusion::Early => self.width(self.depth - 1),
            Fusion::Late => n * self.width(self.depth - 1),
            Fusion::Hyperdense => n * (0..self.depth).map(|j| self.width(j)).sum::<usize>(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_streams();
        if n == 0 {
            return Err(Error::Config(
                "network config lists no modalities (need at least one stream)".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.modalities {
            if !seen.insert(m.as_str()) {
                return Err(Error::Config(format!("duplicate modality name `{m}`")));
            }
        }
        if self.depth == 0 {
            return Err(Error::Config("network depth must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let (h, w) = self.input_spatial;
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input spatial {h}x{w} must be divisible by 2^depth = {div}"
            )));
        }
        let (d0, d1) = self.dilations;
        if d0 <= 1 || d1 <= 1 || d0 == d1 {
            return Err(Error::Config(format!(
                "dilation rates must be distinct and both > 1, got ({d0}, {d1})"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_channel_arithmetic_for_four_streams() {
        let c = NetworkConfig::with_streams(4, Fusion::Hyperdense);
        // N·Σ_{j<l} base·2^j: 128, 384, 896 for layers 2..4, bridge 1920
        assert_eq!(c.encoder_in_channels(1), 128);
        assert_eq!(c.encoder_in_channels(2), 384);
        assert_eq!(c.encoder_in_channels(3), 896);
        assert_eq!(c.bridge_in_channels(), 1920);
        let late = NetworkConfig::with_streams(4, Fusion::Late);
        assert_eq!(late.bridge_in_channels(), 1024);
        assert_eq!(late.encoder_in_channels(2), 64);
    }

    #[test]
    fn zero_streams_rejected() {
        let c = NetworkConfig::with_streams(0, Fusion::Late);
        assert!(c.validate().is_err());
    }

    #[test]
    fn spatial_must_divide_by_two_pow_depth() {
        let mut c = NetworkConfig::with_streams(2, Fusion::Late);
        c.input_spatial = (100, 256);
        assert!(c.validate().is_err());
        c.input_spatial = (64, 256);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn single_stream_normalizes_every_fusion_mode() {
        for f in [Fusion::Early, Fusion::Late, Fusion::Hyperdense] {
            let c = NetworkConfig::with_streams(1, f);
            assert_eq!(c.effective_fusion(), Fusion::Late);
        }
        let c = NetworkConfig::with_streams(2, Fusion::Hyperdense);
        assert_eq!(c.effective_fusion(), Fusion::Hyperdense);
    }

    #[test]
    fn config_round_trips_through_json_and_rejects_unknown_fields() {
        let c = NetworkConfig::with_streams(2, Fusion::Hyperdense);
        let s = serde_json::to_string(&c).unwrap();
        let back: NetworkConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.modalities, c.modalities);
        assert_eq!(back.dilations, c.dilations);
        let bad = r#"{"modalities":["a"],"fusion":"late","learning_rate":0.1}"#;
        let err = serde_json::from_str::<NetworkConfig>(bad).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn duplicate_modalities_rejected() {
        let mut c = NetworkConfig::with_streams(2, Fusion::Late);
        c.modalities = vec!["dwi".into(), "dwi".into()];
        assert!(c.validate().is_err());
    }
}
