//! Model configuration and construction of every seeded component.

use serde::{Deserialize, Serialize};

use crate::aae::{check_gamma, AppearanceAggregator, AttentionParams, TemporalTarget, DEFAULT_GAMMA, DEFAULT_PYRAMID_DEPTH};
use crate::encoders::{
    derive_seed, seeded_projection, AppearanceEncoder, Mlp, SilhouetteEncoder, SkeletonEncoder, SmplEncoder,
    SKELETON_FEATURES, SMPL_DIM,
};
use crate::error::{Error, Result};
use crate::math::BinStatistic;
use crate::pse::{HppOrder, ShapeEncoder};
use crate::scalar::Real;

/// Architecture and seed of the embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input frame height; must match the data.
    pub input_height: usize,
    pub input_width: usize,
    /// Number of 2×2 average downsampling steps before the pixel stacks.
    pub downsample: usize,
    /// Horizontal bins `B` of the shape branch.
    pub bins: usize,
    pub bin_statistic: BinStatistic,
    pub hpp_order: HppOrder,
    /// Shape channel width `C`.
    pub channels: usize,
    /// Skeleton feature width `C_m`; projected to `C` when different.
    pub motion_channels: usize,
    pub hidden: usize,
    pub appearance_channels: usize,
    pub pyramid_depth: usize,
    pub gamma: f64,
    pub temporal_target: TemporalTarget,
    /// L2-normalize the attention and averaging parts before concatenation.
    pub normalize_parts: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 16,
            downsample: 1,
            bins: 4,
            bin_statistic: BinStatistic::MaxPlusMean,
            hpp_order: HppOrder::PoolThenHpp,
            channels: 16,
            motion_channels: 8,
            hidden: 16,
            appearance_channels: 16,
            pyramid_depth: DEFAULT_PYRAMID_DEPTH,
            gamma: DEFAULT_GAMMA,
            temporal_target: TemporalTarget::Later,
            normalize_parts: true,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidInput(format!("model.{field}: {why}")));
        check_gamma(self.gamma).or_else(|_| bad("gamma", "must lie in [0, 1]"))?;
        for (name, v) in [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("bins", self.bins),
            ("channels", self.channels),
            ("motion_channels", self.motion_channels),
            ("hidden", self.hidden),
            ("appearance_channels", self.appearance_channels),
            ("pyramid_depth", self.pyramid_depth),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        let (h, w) = (self.input_height >> self.downsample, self.input_width >> self.downsample);
        if h == 0 || w == 0 || (h << self.downsample) != self.input_height || (w << self.downsample) != self.input_width {
            return bad("downsample", "input size must be divisible by 2^downsample");
        }
        if h % self.bins != 0 {
            return bad("bins", "must divide the encoded feature height");
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        1 << self.pyramid_depth
    }
}

/// Input ablations zero the named modality; branch ablations zero an
/// appearance part.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub drop_silhouette: bool,
    pub drop_skeleton: bool,
    pub drop_shape3d: bool,
    pub disable_attention: bool,
    pub disable_average: bool,
    pub disable_centroid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub shape: ShapeEncoder<T>,
    pub appearance: AppearanceEncoder<T>,
    pub aggregator: AppearanceAggregator<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let (c, cm, hid) = (config.channels, config.motion_channels, config.hidden);
        let (fh, fw) = (config.input_height >> config.downsample, config.input_width >> config.downsample);

        let silhouette = SilhouetteEncoder::new(Mlp::seeded(&[4, hid, c], derive_seed(seed, 1)), config.downsample)?;
        let smpl = SmplEncoder::new(Mlp::seeded(&[SMPL_DIM, hid, hid, hid, c], derive_seed(seed, 2)), fh, fw)?;
        let skeleton = SkeletonEncoder::new(Mlp::seeded(&[SKELETON_FEATURES, hid, cm], derive_seed(seed, 3)))?;
        let motion_projection = (cm != c).then(|| seeded_projection(cm, c, derive_seed(seed, 4)));
        let shape = ShapeEncoder {
            silhouette,
            smpl,
            skeleton,
            motion_projection,
            strips: config.bins,
            statistic: config.bin_statistic,
            order: config.hpp_order,
        };

        let ca = config.appearance_channels;
        let appearance = AppearanceEncoder::new(Mlp::seeded(&[3, hid, ca], derive_seed(seed, 5)), config.downsample)?;
        let mut attention = AttentionParams::seeded(ca, config.pyramid_depth, derive_seed(seed, 6));
        attention.target = config.temporal_target;
        let mut aggregator = AppearanceAggregator::new(attention, config.gamma)?;
        aggregator.use_attention = !ablation.disable_attention;
        aggregator.use_average = !ablation.disable_average;

        Ok(Self { config: config.clone(), ablation, shape, appearance, aggregator })
    }

    /// Same model with a different flattening exponent.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let mut m = self.clone();
        m.config.gamma = gamma;
        m.aggregator.gamma = gamma;
        Ok(m)
    }

    pub fn shape_dim(&self) -> usize {
        (self.config.bins + 1) * self.config.channels
    }

    pub fn appearance_dim(&self) -> usize {
        2 * self.config.appearance_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_deterministic() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let a: Model<f64> = Model::new(&cfg, Ablation::default()).unwrap();
        let b: Model<f64> = Model::new(&cfg, Ablation::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aggregator.group_size(), 8);
        assert!(a.shape.motion_projection.is_some());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = ModelConfig { gamma: 2.0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("model.gamma"));
        cfg.gamma = 0.0;
        cfg.bins = 3;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.bins"));
        cfg.bins = 4;
        cfg.input_width = 15;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.downsample"));
    }

    #[test]
    fn model_builds_for_f32() {
        let m: Model<f32> = Model::new(&ModelConfig::default(), Ablation::default()).unwrap();
        assert_eq!(m.shape_dim(), 80);
        assert_eq!(m.with_gamma(0.5).unwrap().aggregator.gamma, 0.5);
        assert!(m.with_gamma(1.5).is_err());
    }
}
