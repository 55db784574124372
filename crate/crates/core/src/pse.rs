//! Pose-and-shape encoder.
//!
//! Per frame the silhouette feature is gated by the body-model feature with a
//! skip connection (`I_sil · I_3d + I_sil`). Frames are max-pooled, split into
//! `B` horizontal bins, and the temporally averaged skeleton feature is
//! appended as bin `B + 1`.

use serde::{Deserialize, Serialize};

use crate::encoders::{SilhouetteEncoder, SilhouetteInput, SkeletonEncoder, SkeletonFrame, SmplEncoder, SmplParams};
use crate::error::{check_dim, Error, Result};
use crate::math::{strip_pool, BinStatistic, FeatureGrid, Matrix, Vector};
use crate::scalar::{order_free_mean, Real};

/// `(B + 1) × C` shape feature: `B` pose bins followed by the motion bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEmbedding<T> {
    bins: Matrix<T>,
}

impl<T: Real> ShapeEmbedding<T> {
    pub fn new(pose_bins: Matrix<T>, motion: &[T]) -> Result<Self> {
        check_dim(pose_bins.cols(), motion.len())?;
        let motion = Matrix::new(1, motion.len(), motion.to_vec())?;
        Ok(Self { bins: pose_bins.vstack(&motion)? })
    }

    pub fn bins(&self) -> &Matrix<T> {
        &self.bins
    }

    /// Number of pose bins `B` (the motion bin is not counted).
    pub fn pose_bin_count(&self) -> usize {
        self.bins.rows() - 1
    }

    pub fn channels(&self) -> usize {
        self.bins.cols()
    }

    pub fn motion_bin(&self) -> &[T] {
        self.bins.row(self.bins.rows() - 1)
    }

    /// Row-major flattening used for scoring. Bin `b` occupies
    /// `b·C .. (b+1)·C`.
    pub fn to_vector(&self) -> Vector<T> {
        Vector::new(self.bins.as_slice().to_vec()).expect("finite embedding")
    }
}

/// `I_sil · I_3d + I_sil`, elementwise.
pub fn fuse_pose<T: Real>(i_sil: &FeatureGrid<T>, i_3d: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    i_sil.zip_map(i_3d, |s, d| s * d + s)
}

/// Elementwise max over frames.
pub fn temporal_pool_pose<T: Real>(frames: &[FeatureGrid<T>]) -> Result<FeatureGrid<T>> {
    let (first, rest) = frames.split_first().ok_or(Error::EmptyInput("pose frames"))?;
    rest.iter().try_fold(first.clone(), |acc, f| acc.zip_map(f, T::max))
}

/// Column-wise mean of a `T × C_m` motion matrix.
pub fn pool_motion<T: Real>(motion: &Matrix<T>) -> Result<Vector<T>> {
    if motion.rows() == 0 || motion.cols() == 0 {
        return Err(Error::EmptyInput("motion features"));
    }
    let mut column = Vec::with_capacity(motion.rows());
    let means = (0..motion.cols())
        .map(|c| {
            column.clear();
            column.extend((0..motion.rows()).map(|r| motion.get(r, c)));
            order_free_mean(&mut column)
        })
        .collect();
    Vector::new(means)
}

/// Where horizontal pooling sits relative to temporal pooling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HppOrder {
    #[default]
    PoolThenHpp,
    HppThenPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEncoder<T> {
    pub silhouette: SilhouetteEncoder<T>,
    pub smpl: SmplEncoder<T>,
    pub skeleton: SkeletonEncoder<T>,
    /// `C × C_m` projection, present when the motion width differs from `C`.
    pub motion_projection: Option<Matrix<T>>,
    pub strips: usize,
    pub statistic: BinStatistic,
    pub order: HppOrder,
}

impl<T: Real> ShapeEncoder<T> {
    /// Fused, HPP-ready pose grid for one frame.
    pub fn pose_frame(&self, sil: &SilhouetteInput<T>, smpl: &SmplParams<T>) -> Result<FeatureGrid<T>> {
        let i_sil = self.silhouette.encode(sil)?;
        let i_3d = self.smpl.encode(smpl);
        fuse_pose(&i_sil, &i_3d)
    }

    fn pose_bins(&self, fused: &[FeatureGrid<T>]) -> Result<Matrix<T>> {
        match self.order {
            HppOrder::PoolThenHpp => strip_pool(&temporal_pool_pose(fused)?, self.strips, self.statistic),
            HppOrder::HppThenPool => {
                let mut pooled: Option<Matrix<T>> = None;
                for grid in fused {
                    let bins = strip_pool(grid, self.strips, self.statistic)?;
                    pooled = Some(match pooled {
                        None => bins,
                        Some(mut acc) => {
                            for (a, &b) in acc.as_mut_slice().iter_mut().zip(bins.as_slice()) {
                                *a = a.max(b);
                            }
                            acc
                        }
                    });
                }
                pooled.ok_or(Error::EmptyInput("pose frames"))
            }
        }
    }

    /// Pooled skeleton feature mapped to the pose channel width.
    pub fn motion_vector(&self, skeleton: &[SkeletonFrame<T>]) -> Result<Vec<T>> {
        let pooled = pool_motion(&self.skeleton.encode_sequence(skeleton)?)?;
        Ok(match &self.motion_projection {
            Some(p) => p.matvec(pooled.as_slice()),
            None => pooled.into_vec(),
        })
    }

    pub fn embed(
        &self,
        silhouettes: &[SilhouetteInput<T>],
        smpl: &[SmplParams<T>],
        skeleton: &[SkeletonFrame<T>],
    ) -> Result<ShapeEmbedding<T>> {
        if silhouettes.is_empty() {
            return Err(Error::EmptyInput("shape frames"));
        }
        check_dim(silhouettes.len(), smpl.len())?;
        check_dim(silhouettes.len(), skeleton.len())?;
        let fused = silhouettes
            .iter()
            .zip(smpl)
            .map(|(s, p)| self.pose_frame(s, p))
            .collect::<Result<Vec<_>>>()?;
        let bins = self.pose_bins(&fused)?;
        let motion = self.motion_vector(skeleton)?;
        ShapeEmbedding::new(bins, &motion)
    }
}
