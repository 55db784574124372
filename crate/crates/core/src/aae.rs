//! Aggregated appearance encoder.
//!
//! Two aggregations of per-frame appearance grids are concatenated:
//!
//! * attention pyramid: each level merges consecutive pairs with
//!   `SA(A_t) + SA(A_{t+1}) + TA(A_t, A_{t+1})`, halving the population until
//!   one grid is left, which is then average-pooled over space;
//! * averaging: the framewise mean, average-pooled over space and flattened
//!   elementwise by `sgn(x)·|x|^γ`.
//!
//! Attention weights are shared by every pair within a level and differ
//! between levels.

use serde::{Deserialize, Serialize};

use crate::encoders::{derive_seed, DenseLayer, Mlp};
use crate::error::{check_dim, Error, Result};
use crate::math::{l2_normalize, softmax_unchecked, FeatureGrid, Vector};
use crate::scalar::{order_free_mean, Real};

pub const DEFAULT_PYRAMID_DEPTH: usize = 3;
pub const DEFAULT_GAMMA: f64 = 0.0;

/// Operand of the temporal attention map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalTarget {
    Earlier,
    #[default]
    Later,
    BothAveraged,
}

/// Attention projections for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams<T> {
    /// `C × C`, applied per spatial position.
    pub spatial: DenseLayer<T>,
    /// `C × 2C`, applied to the concatenated pair per spatial position.
    pub temporal: DenseLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub levels: Vec<LevelParams<T>>,
    pub target: TemporalTarget,
    pub seed: u64,
}

impl<T: Real> AttentionParams<T> {
    pub fn seeded(channels: usize, depth: usize, seed: u64) -> Self {
        let levels = (0..depth as u64)
            .map(|l| {
                let sa = Mlp::seeded(&[channels, channels], derive_seed(seed, 2 * l));
                let ta = Mlp::seeded(&[2 * channels, channels], derive_seed(seed, 2 * l + 1));
                LevelParams { spatial: sa.layers()[0].clone(), temporal: ta.layers()[0].clone() }
            })
            .collect();
        Self { levels, target: TemporalTarget::Later, seed }
    }

    pub fn channels(&self) -> usize {
        self.levels[0].spatial.outputs()
    }
}

/// Attention operators used by [`pyramid_aggregate`].
pub trait PyramidAttention<T: Real> {
    fn depth(&self) -> usize;
    fn spatial(&self, level: usize, a: &FeatureGrid<T>) -> Result<FeatureGrid<T>>;
    fn temporal(&self, level: usize, a_t: &FeatureGrid<T>, a_t1: &FeatureGrid<T>) -> Result<FeatureGrid<T>>;
}

impl<T: Real> PyramidAttention<T> for AttentionParams<T> {
    fn depth(&self) -> usize {
        self.levels.len()
    }

    fn spatial(&self, level: usize, a: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        spatial_attention(a, &self.levels[level])
    }

    fn temporal(&self, level: usize, a_t: &FeatureGrid<T>, a_t1: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        temporal_attention(a_t, a_t1, &self.levels[level], self.target)
    }
}

/// Softmax over spatial positions, independently per channel, of per-position
/// logits laid out like a grid.
fn spatial_softmax<T: Real>(logits: &FeatureGrid<T>) -> FeatureGrid<T> {
    let (positions, channels) = (logits.positions(), logits.channels());
    let mut out = logits.clone();
    let mut column = Vec::with_capacity(positions);
    for c in 0..channels {
        column.clear();
        column.extend((0..positions).map(|p| logits.at(p)[c]));
        for (p, w) in softmax_unchecked(&column).into_iter().enumerate() {
            out.as_mut_slice()[p * channels + c] = w;
        }
    }
    out
}

/// `softmax_positions(W·a + b) ⊙ a`.
pub fn spatial_attention<T: Real>(a: &FeatureGrid<T>, level: &LevelParams<T>) -> Result<FeatureGrid<T>> {
    check_dim(level.spatial.inputs(), a.channels())?;
    check_dim(level.spatial.outputs(), a.channels())?;
    let logits = a.map_pixels(a.channels(), |px| level.spatial.affine(px));
    let attention = spatial_softmax(&logits);
    attention.zip_map(a, |w, x| w * x)
}

/// Attention from the concatenated pair, applied pointwise to `target`.
pub fn temporal_attention<T: Real>(
    a_t: &FeatureGrid<T>,
    a_t1: &FeatureGrid<T>,
    level: &LevelParams<T>,
    target: TemporalTarget,
) -> Result<FeatureGrid<T>> {
    a_t.same_dims(a_t1)?;
    check_dim(level.temporal.inputs(), 2 * a_t.channels())?;
    check_dim(level.temporal.outputs(), a_t.channels())?;
    let mut pair = Vec::with_capacity(2 * a_t.channels());
    let mut logits = Vec::with_capacity(a_t.as_slice().len());
    for p in 0..a_t.positions() {
        pair.clear();
        pair.extend_from_slice(a_t.at(p));
        pair.extend_from_slice(a_t1.at(p));
        logits.extend(level.temporal.affine(&pair));
    }
    let logits = FeatureGrid::new(a_t.height(), a_t.width(), a_t.channels(), logits)?;
    let attention = spatial_softmax(&logits);
    match target {
        TemporalTarget::Earlier => attention.zip_map(a_t, |w, x| w * x),
        TemporalTarget::Later => attention.zip_map(a_t1, |w, x| w * x),
        TemporalTarget::BothAveraged => {
            let half = T::lit(0.5);
            let mean = a_t.zip_map(a_t1, |x, y| (x + y) * half)?;
            attention.zip_map(&mean, |w, x| w * x)
        }
    }
}

/// Every population of the pyramid, from the input frames down to the single
/// merged grid.
pub fn pyramid_levels<T: Real, A: PyramidAttention<T> + ?Sized>(
    frames: &[FeatureGrid<T>],
    attention: &A,
) -> Result<Vec<Vec<FeatureGrid<T>>>> {
    let expected = 1usize << attention.depth();
    if frames.len() != expected {
        return Err(Error::InvalidFrameCount { expected, found: frames.len() });
    }
    for f in &frames[1..] {
        frames[0].same_dims(f)?;
    }
    let mut levels = vec![frames.to_vec()];
    for level in 0..attention.depth() {
        let current = levels.last().expect("non-empty");
        let next = current
            .chunks_exact(2)
            .map(|pair| {
                let (a, b) = (&pair[0], &pair[1]);
                let sa = attention.spatial(level, a)?;
                let sb = attention.spatial(level, b)?;
                let ta = attention.temporal(level, a, b)?;
                let s = sa.zip_map(&sb, |x, y| x + y)?;
                s.zip_map(&ta, |x, y| x + y)
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(next);
    }
    Ok(levels)
}

pub fn pyramid_aggregate<T: Real, A: PyramidAttention<T> + ?Sized>(
    frames: &[FeatureGrid<T>],
    attention: &A,
) -> Result<Vector<T>> {
    let levels = pyramid_levels(frames, attention)?;
    Ok(levels.last().expect("non-empty")[0].global_average_pool())
}

/// Framewise mean followed by spatial average pooling.
pub fn average_aggregate<T: Real>(frames: &[FeatureGrid<T>]) -> Result<Vector<T>> {
    let (first, rest) = frames.split_first().ok_or(Error::EmptyInput("appearance frames"))?;
    for f in rest {
        first.same_dims(f)?;
    }
    let mut column = Vec::with_capacity(frames.len());
    let data = (0..first.as_slice().len())
        .map(|i| {
            column.clear();
            column.extend(frames.iter().map(|f| f.as_slice()[i]));
            order_free_mean(&mut column)
        })
        .collect();
    let (h, w, c) = first.dims();
    Ok(FeatureGrid::new(h, w, c, data)?.global_average_pool())
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// Elementwise `sgn(x)·|x|^γ` with `sgn(0) = 0`; `γ = 0` yields the sign
/// vector and `γ = 1` the identity.
pub fn flatten_feature<T: Real>(v: &[T], gamma: f64) -> Result<Vec<T>> {
    check_gamma(gamma)?;
    let g = T::lit(gamma);
    Ok(v.iter()
        .map(|&x| {
            if x == T::zero() {
                T::zero()
            } else if gamma == 1.0 {
                x
            } else {
                x.signum() * x.abs().powf(g)
            }
        })
        .collect())
}

/// Attention and averaging parts of one tracklet's appearance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceEmbedding<T> {
    pub attn_part: Vector<T>,
    pub avg_part: Vector<T>,
    pub gamma: f64,
}

impl<T: Real> AppearanceEmbedding<T> {
    /// `[attn_part, avg_part]`, optionally L2-normalizing each part first.
    pub fn to_vector(&self, normalize_parts: bool) -> Vector<T> {
        if normalize_parts {
            let a = l2_normalize(self.attn_part.as_slice()).expect("finite part");
            let b = l2_normalize(self.avg_part.as_slice()).expect("finite part");
            Vector::new([a, b].concat()).expect("finite embedding")
        } else {
            self.attn_part.concat(&self.avg_part)
        }
    }

    /// Partwise mean of several group embeddings.
    pub fn mean_of(groups: &[Self]) -> Result<Self> {
        let first = groups.first().ok_or(Error::EmptyInput("appearance groups"))?;
        let attn: Vec<&Vector<T>> = groups.iter().map(|g| &g.attn_part).collect();
        let avg: Vec<&Vector<T>> = groups.iter().map(|g| &g.avg_part).collect();
        Ok(Self { attn_part: Vector::mean_of(&attn)?, avg_part: Vector::mean_of(&avg)?, gamma: first.gamma })
    }
}

/// Produces an [`AppearanceEmbedding`] from one group of encoded frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceAggregator<T> {
    pub attention: AttentionParams<T>,
    pub gamma: f64,
    /// Zeroes the attention part when false.
    pub use_attention: bool,
    /// Zeroes the averaging part when false.
    pub use_average: bool,
}

impl<T: Real> AppearanceAggregator<T> {
    pub fn new(attention: AttentionParams<T>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self { attention, gamma, use_attention: true, use_average: true })
    }

    pub fn group_size(&self) -> usize {
        1 << self.attention.depth()
    }

    pub fn embed_group(&self, frames: &[FeatureGrid<T>]) -> Result<AppearanceEmbedding<T>> {
        let channels = self.attention.channels();
        let attn_part = if self.use_attention {
            pyramid_aggregate(frames, &self.attention)?
        } else {
            Vector::zeros(channels)
        };
        let avg_part = if self.use_average {
            Vector::new(flatten_feature(average_aggregate(frames)?.as_slice(), self.gamma)?)?
        } else {
            Vector::zeros(channels)
        };
        Ok(AppearanceEmbedding { attn_part, avg_part, gamma: self.gamma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::grid_digest;
    use proptest::prelude::*;

    /// SA = identity, TA = 0.
    struct StubAttention;

    impl PyramidAttention<f64> for StubAttention {
        fn depth(&self) -> usize {
            3
        }
        fn spatial(&self, _: usize, a: &FeatureGrid<f64>) -> Result<FeatureGrid<f64>> {
            Ok(a.clone())
        }
        fn temporal(&self, _: usize, a: &FeatureGrid<f64>, _: &FeatureGrid<f64>) -> Result<FeatureGrid<f64>> {
            Ok(a.map(|_| 0.0))
        }
    }

    fn seeded_frames(n: usize, seed: u64) -> Vec<FeatureGrid<f64>> {
        (0..n)
            .map(|i| {
                let data = (0..4 * 2 * 3)
                    .map(|j| (((j + 7 * i) as f64 + seed as f64) * 0.731).sin())
                    .collect();
                FeatureGrid::new(4, 2, 3, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn spatial_attention_on_constant_grid_is_uniform() {
        let params = AttentionParams::<f64>::seeded(3, 1, 5);
        let a = FeatureGrid::filled(4, 2, 3, 2.0);
        let out = spatial_attention(&a, &params.levels[0]).unwrap();
        assert_eq!(out.dims(), a.dims());
        for &v in out.as_slice() {
            assert!((v - 2.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn temporal_attention_on_constant_grids_is_uniform() {
        let params = AttentionParams::<f64>::seeded(3, 1, 5);
        let a = FeatureGrid::filled(4, 2, 3, 1.0);
        let b = FeatureGrid::filled(4, 2, 3, 4.0);
        let later = temporal_attention(&a, &b, &params.levels[0], TemporalTarget::Later).unwrap();
        assert_eq!(later.dims(), a.dims());
        assert!(later.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let earlier = temporal_attention(&a, &b, &params.levels[0], TemporalTarget::Earlier).unwrap();
        assert!(earlier.as_slice().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        let both = temporal_attention(&a, &b, &params.levels[0], TemporalTarget::BothAveraged).unwrap();
        assert!(both.as_slice().iter().all(|&v| (v - 2.5 / 8.0).abs() < 1e-15));
        let wrong = FeatureGrid::filled(2, 2, 3, 1.0);
        assert!(temporal_attention(&a, &wrong, &params.levels[0], TemporalTarget::Later).is_err());
    }

    #[test]
    fn attention_goldens() {
        let params = AttentionParams::<f64>::seeded(3, 3, 17);
        let frames = seeded_frames(8, 2);
        let sa = spatial_attention(&frames[0], &params.levels[0]).unwrap();
        assert_eq!(grid_digest(sa.as_slice()), "1fa9ed754c92edaa");
        let ta = temporal_attention(&frames[0], &frames[1], &params.levels[1], TemporalTarget::Later).unwrap();
        assert_eq!(grid_digest(ta.as_slice()), "790a2f910c162d1c");
        let pooled = pyramid_aggregate(&frames, &params).unwrap();
        assert_eq!(grid_digest(pooled.as_slice()), "2c14bbbc8a54bad0");
    }

    #[test]
    fn pyramid_requires_exactly_eight_frames() {
        let params = AttentionParams::<f64>::seeded(3, 3, 1);
        for n in [1, 4, 7, 9, 16] {
            let err = pyramid_aggregate(&seeded_frames(n, 0), &params).unwrap_err();
            assert!(matches!(err, Error::InvalidFrameCount { expected: 8, found } if found == n));
        }
        let levels = pyramid_levels(&seeded_frames(8, 0), &params).unwrap();
        let sizes: Vec<usize> = levels.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
    }

    #[test]
    fn stub_pyramid_doubles_constant_per_level() {
        let v = 1.75;
        let frames = vec![FeatureGrid::filled(2, 2, 3, v); 8];
        let levels = pyramid_levels(&frames, &StubAttention).unwrap();
        for (l, pop) in levels.iter().enumerate() {
            let expected = v * (1 << l) as f64;
            assert!(pop.iter().all(|g| g.as_slice().iter().all(|&x| x == expected)));
        }
        assert_eq!(pyramid_aggregate(&frames, &StubAttention).unwrap().as_slice(), &[8.0 * v; 3]);
    }

    #[test]
    fn stub_pyramid_sums_frames() {
        let frames = seeded_frames(8, 4);
        let got = pyramid_aggregate(&frames, &StubAttention).unwrap();
        // Hand-unrolled tree: ((f0+f1)+(f2+f3)) + ((f4+f5)+(f6+f7)).
        let add = |a: &FeatureGrid<f64>, b: &FeatureGrid<f64>| a.zip_map(b, |x, y| x + y).unwrap();
        let l1: Vec<_> = (0..4).map(|i| add(&frames[2 * i], &frames[2 * i + 1])).collect();
        let l2 = [add(&l1[0], &l1[1]), add(&l1[2], &l1[3])];
        let top = add(&l2[0], &l2[1]);
        assert_eq!(got, top.global_average_pool());
    }

    #[test]
    fn pyramid_depends_on_order() {
        let params = AttentionParams::<f64>::seeded(3, 3, 9);
        let frames = seeded_frames(8, 1);
        let mut swapped = frames.clone();
        swapped.swap(0, 5);
        assert_ne!(pyramid_aggregate(&frames, &params).unwrap(), pyramid_aggregate(&swapped, &params).unwrap());
    }

    #[test]
    fn average_aggregate_examples() {
        let a = FeatureGrid::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let b = FeatureGrid::new(1, 1, 2, vec![3.0, 1.0]).unwrap();
        assert_eq!(average_aggregate(&[a.clone(), b.clone()]).unwrap().as_slice(), &[2.0, 2.0]);
        let one = seeded_frames(1, 3);
        assert_eq!(average_aggregate(&one).unwrap(), one[0].global_average_pool());
        let frames = seeded_frames(7, 8);
        let mut shuffled = frames.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        assert_eq!(average_aggregate(&frames).unwrap(), average_aggregate(&shuffled).unwrap());
        assert!(matches!(average_aggregate::<f64>(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_feature(&[4.0, -0.25, 0.0], 0.5).unwrap(), vec![2.0, -0.5, 0.0]);
        let v = [0.3, -2.0, 0.0, 1e-9, -7.5];
        assert_eq!(flatten_feature(&v, 1.0).unwrap(), v.to_vec());
        assert_eq!(flatten_feature(&[0.3, -2.0, 0.0], 0.0).unwrap(), vec![1.0, -1.0, 0.0]);
        assert!(matches!(flatten_feature(&v, 1.5), Err(Error::InvalidGamma(_))));
        assert!(matches!(flatten_feature(&v, -0.1), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn group_embedding_ablations_and_golden() {
        let frames = seeded_frames(8, 6);
        let mut agg = AppearanceAggregator::new(AttentionParams::<f64>::seeded(3, 3, 23), 0.0).unwrap();
        let full = agg.embed_group(&frames).unwrap();
        assert_eq!(grid_digest(full.to_vector(true).as_slice()), "4e9a74c43693f187");
        agg.use_attention = false;
        let no_attn = agg.embed_group(&frames).unwrap();
        assert!(no_attn.attn_part.iter().all(|&v| v == 0.0));
        assert_eq!(no_attn.avg_part, full.avg_part);
        agg.use_attention = true;
        agg.use_average = false;
        let no_avg = agg.embed_group(&frames).unwrap();
        assert!(no_avg.avg_part.iter().all(|&v| v == 0.0));
        assert_eq!(no_avg.attn_part, full.attn_part);
        assert_eq!(full.to_vector(false).dim(), 6);
    }

    proptest! {
        #[test]
        fn flatten_preserves_sign_and_compresses(v in prop::collection::vec(-5.0f64..5.0, 1..16), gamma in 0.0f64..1.0) {
            let out = flatten_feature(&v, gamma).unwrap();
            for (&x, &y) in v.iter().zip(&out) {
                prop_assert_eq!(x.signum() * (x != 0.0) as i32 as f64, y.signum() * (y != 0.0) as i32 as f64);
                if x.abs() <= 1.0 { prop_assert!(y.abs() >= x.abs()); }
                if x.abs() >= 1.0 { prop_assert!(y.abs() <= x.abs()); }
            }
        }

        #[test]
        fn flatten_composes_powers(v in prop::collection::vec(-5.0f64..5.0, 1..16), g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
            let twice = flatten_feature(&flatten_feature(&v, g1).unwrap(), g2).unwrap();
            let once = flatten_feature(&v, g1 * g2).unwrap();
            for (a, b) in twice.iter().zip(&once) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
