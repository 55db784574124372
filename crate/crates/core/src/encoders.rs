//! Per-frame encoders for the silhouette, body-model, skeleton and RGB inputs.
//!
//! Each encoder is a stack of affine layers with ReLU between them (the
//! output layer is linear, so features are signed). Weights are drawn
//! uniformly from `[-1/√fan_in, 1/√fan_in]` by a SplitMix64 generator, so a
//! seed fully determines every weight on every platform. Grid inputs are
//! first reduced by 2×2 average downsampling and the stack is applied to each
//! pixel's channel vector.
//!
//! Parameter files (`SHRCENC1`) are little-endian: the 8-byte magic, then for
//! each layer `u32 rows`, `u32 cols`, `rows·cols` f32 weights in row-major
//! order and `rows` f32 biases, repeated until end of file.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{check_dim, Error, Result};
use crate::math::{dot, FeatureGrid, Matrix};
use crate::scalar::Real;

pub const ENCODER_MAGIC: &[u8; 8] = b"SHRCENC1";

/// Joints per skeleton frame (COCO keypoint convention).
pub const COCO_JOINTS: usize = 17;
pub const SMPL_CAMERA_DIM: usize = 3;
pub const SMPL_SHAPE_DIM: usize = 10;
pub const SMPL_POSE_DIM: usize = 72;
pub const SMPL_DIM: usize = SMPL_CAMERA_DIM + SMPL_SHAPE_DIM + SMPL_POSE_DIM;

/// Mixes a base seed with a stream index into an independent seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One affine block; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        check_dim(weights.rows(), bias.len())?;
        Ok(Self { weights, bias })
    }

    fn seeded(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || T::lit((2.0 * rng.random::<f64>() - 1.0) * bound);
        let weights: Vec<T> = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self { weights: Matrix::new(outputs, inputs, weights).expect("finite weights"), bias }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    /// `W·x + b` without activation.
    pub fn affine(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs()).map(|r| dot(self.weights.row(r), x) + self.bias[r]).collect()
    }
}

/// Bias-free linear map `outputs × inputs`, drawn like a layer's weights.
pub fn seeded_projection<T: Real>(inputs: usize, outputs: usize, seed: u64) -> Matrix<T> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    DenseLayer::<T>::seeded(inputs, outputs, &mut rng).weights
}

/// Affine layers with ReLU between them and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("mlp layers"));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].outputs(), pair[1].inputs())?;
        }
        Ok(Self { layers })
    }

    /// Builds a stack with widths `dims[0] → dims[1] → … → dims[n]`.
    pub fn seeded(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
        let mut rng = SplitMix64::seed_from_u64(seed);
        let layers = dims.windows(2).map(|w| DenseLayer::seeded(w[0], w[1], &mut rng)).collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.affine(&h);
            if i < last {
                for v in &mut h {
                    *v = v.max(T::zero());
                }
            }
        }
        h
    }

    /// Sets every bias to zero; the map becomes positively homogeneous.
    pub fn zero_biases(&mut self) {
        for layer in &mut self.layers {
            layer.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Writes the stack as a `SHRCENC1` file (weights quantized to f32).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ENCODER_MAGIC.to_vec();
        for layer in &self.layers {
            out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
            for &w in layer.weights.as_slice().iter().chain(&layer.bias) {
                out.extend_from_slice(&w.to_f32_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::corrupt(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(ENCODER_MAGIC.as_slice()).ok_or("bad magic")?;
        let mut reader = crate::io::LeReader::new(rest);
        let mut layers = Vec::new();
        while !reader.is_empty() {
            let rows = reader.u32()? as usize;
            let cols = reader.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err("zero-sized layer".into());
            }
            let weights = reader.f32_vec::<T>(rows * cols)?;
            let bias = reader.f32_vec::<T>(rows)?;
            let weights = Matrix::new(rows, cols, weights).map_err(|e| e.to_string())?;
            layers.push(DenseLayer { weights, bias });
        }
        Self::new(layers).map_err(|e| e.to_string())
    }
}

/// Binary person mask with the RGB crop restricted to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteInput<T> {
    mask: Vec<bool>,
    masked_rgb: FeatureGrid<T>,
}

impl<T: Real> SilhouetteInput<T> {
    /// Pairs a mask with an RGB crop, zeroing the crop outside the mask.
    pub fn from_rgb(mask: Vec<bool>, rgb: &FeatureGrid<T>) -> Result<Self> {
        check_dim(3, rgb.channels())?;
        check_dim(rgb.positions(), mask.len())?;
        let mut masked = rgb.clone();
        for (p, &inside) in mask.iter().enumerate() {
            if !inside {
                masked.as_mut_slice()[p * 3..p * 3 + 3].fill(T::zero());
            }
        }
        Ok(Self { mask, masked_rgb: masked })
    }

    /// Validating constructor: `masked_rgb` must already be zero off-mask.
    pub fn new(mask: Vec<bool>, masked_rgb: FeatureGrid<T>) -> Result<Self> {
        check_dim(3, masked_rgb.channels())?;
        check_dim(masked_rgb.positions(), mask.len())?;
        for (p, &inside) in mask.iter().enumerate() {
            if !inside && masked_rgb.at(p).iter().any(|&v| v != T::zero()) {
                return Err(Error::InvalidInput(format!("masked rgb is nonzero off-mask at {p}")));
            }
        }
        Ok(Self { mask, masked_rgb })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { mask: vec![false; height * width], masked_rgb: FeatureGrid::zeros(height, width, 3) }
    }

    pub fn height(&self) -> usize {
        self.masked_rgb.height()
    }

    pub fn width(&self) -> usize {
        self.masked_rgb.width()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_rgb(&self) -> &FeatureGrid<T> {
        &self.masked_rgb
    }

    /// Four-channel grid `[mask, r, g, b]`.
    pub fn to_grid(&self) -> FeatureGrid<T> {
        let mut data = Vec::with_capacity(self.mask.len() * 4);
        for (p, &inside) in self.mask.iter().enumerate() {
            data.push(if inside { T::one() } else { T::zero() });
            data.extend_from_slice(self.masked_rgb.at(p));
        }
        FeatureGrid::new(self.height(), self.width(), 4, data).expect("valid silhouette grid")
    }
}

/// 85-D body model vector: camera, shape coefficients, joint rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SmplParams<T> {
    values: Vec<T>,
}

impl<T: Real> SmplParams<T> {
    pub fn new(camera: &[T], shape: &[T], joint_rotations: &[T]) -> Result<Self> {
        check_dim(SMPL_CAMERA_DIM, camera.len())?;
        check_dim(SMPL_SHAPE_DIM, shape.len())?;
        check_dim(SMPL_POSE_DIM, joint_rotations.len())?;
        Self::from_slice(&[camera, shape, joint_rotations].concat())
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        check_dim(SMPL_DIM, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite SMPL parameter".into()));
        }
        Ok(Self { values: values.to_vec() })
    }

    pub fn zeros() -> Self {
        Self { values: vec![T::zero(); SMPL_DIM] }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn camera(&self) -> &[T] {
        &self.values[..SMPL_CAMERA_DIM]
    }

    pub fn shape(&self) -> &[T] {
        &self.values[SMPL_CAMERA_DIM..SMPL_CAMERA_DIM + SMPL_SHAPE_DIM]
    }

    pub fn joint_rotations(&self) -> &[T] {
        &self.values[SMPL_CAMERA_DIM + SMPL_SHAPE_DIM..]
    }
}

/// 2-D keypoints with per-joint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame<T> {
    joints: Vec<[T; 2]>,
    confidence: Vec<T>,
}

impl<T: Real> SkeletonFrame<T> {
    pub fn new(joints: Vec<[T; 2]>, confidence: Vec<T>) -> Result<Self> {
        check_dim(COCO_JOINTS, joints.len())?;
        check_dim(COCO_JOINTS, confidence.len())?;
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite joint coordinate".into()));
        }
        if confidence.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(Error::InvalidInput("joint confidence outside [0, 1]".into()));
        }
        Ok(Self { joints, confidence })
    }

    pub fn zeros() -> Self {
        Self { joints: vec![[T::zero(); 2]; COCO_JOINTS], confidence: vec![T::zero(); COCO_JOINTS] }
    }

    pub fn joints(&self) -> &[[T; 2]] {
        &self.joints
    }

    pub fn confidence(&self) -> &[T] {
        &self.confidence
    }

    /// Flattened `[x0, y0, …, x16, y16, conf0, …, conf16]`.
    pub fn to_features(&self) -> Vec<T> {
        let mut out: Vec<T> = self.joints.iter().flatten().copied().collect();
        out.extend_from_slice(&self.confidence);
        out
    }
}

pub const SKELETON_FEATURES: usize = COCO_JOINTS * 3;

/// Shared pixel-wise encoder for grid inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEncoder<T> {
    mlp: Mlp<T>,
    downsample: usize,
}

impl<T: Real> GridEncoder<T> {
    pub fn new(mlp: Mlp<T>, downsample: usize) -> Self {
        Self { mlp, downsample }
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    /// Spatial size of the output for an input of `height × width`.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height >> self.downsample, width >> self.downsample)
    }

    pub fn encode(&self, grid: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        check_dim(self.mlp.input_dim(), grid.channels())?;
        let mut g = grid.clone();
        for _ in 0..self.downsample {
            g = g.downsample2()?;
        }
        Ok(g.map_pixels(self.mlp.output_dim(), |px| self.mlp.forward(px)))
    }
}

/// Silhouette path: `[mask, masked rgb]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteEncoder<T>(GridEncoder<T>);

impl<T: Real> SilhouetteEncoder<T> {
    pub fn new(mlp: Mlp<T>, downsample: usize) -> Result<Self> {
        check_dim(4, mlp.input_dim())?;
        Ok(Self(GridEncoder::new(mlp, downsample)))
    }

    pub fn inner(&self) -> &GridEncoder<T> {
        &self.0
    }

    pub fn inner_mut(&mut self) -> &mut GridEncoder<T> {
        &mut self.0
    }

    pub fn encode(&self, input: &SilhouetteInput<T>) -> Result<FeatureGrid<T>> {
        self.0.encode(&input.to_grid())
    }
}

/// RGB appearance path.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceEncoder<T>(GridEncoder<T>);

impl<T: Real> AppearanceEncoder<T> {
    pub fn new(mlp: Mlp<T>, downsample: usize) -> Result<Self> {
        check_dim(3, mlp.input_dim())?;
        Ok(Self(GridEncoder::new(mlp, downsample)))
    }

    pub fn inner(&self) -> &GridEncoder<T> {
        &self.0
    }

    pub fn inner_mut(&mut self) -> &mut GridEncoder<T> {
        &mut self.0
    }

    pub fn encode(&self, frame_rgb: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        self.0.encode(frame_rgb)
    }
}

/// Body-model path; the per-frame vector is broadcast over the silhouette
/// feature's spatial grid so it can gate it elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SmplEncoder<T> {
    mlp: Mlp<T>,
    out_height: usize,
    out_width: usize,
}

impl<T: Real> SmplEncoder<T> {
    pub fn new(mlp: Mlp<T>, out_height: usize, out_width: usize) -> Result<Self> {
        check_dim(SMPL_DIM, mlp.input_dim())?;
        if out_height == 0 || out_width == 0 {
            return Err(Error::InvalidInput("SMPL output grid must be non-empty".into()));
        }
        Ok(Self { mlp, out_height, out_width })
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn encode(&self, input: &SmplParams<T>) -> FeatureGrid<T> {
        let v = self.mlp.forward(input.as_slice());
        FeatureGrid::broadcast(self.out_height, self.out_width, &v)
    }
}

/// Skeleton path: one feature row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonEncoder<T> {
    mlp: Mlp<T>,
}

impl<T: Real> SkeletonEncoder<T> {
    pub fn new(mlp: Mlp<T>) -> Result<Self> {
        check_dim(SKELETON_FEATURES, mlp.input_dim())?;
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn encode_sequence(&self, frames: &[SkeletonFrame<T>]) -> Result<Matrix<T>> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("skeleton sequence"));
        }
        let rows: Vec<Vec<T>> = frames.iter().map(|f| self.mlp.forward(&f.to_features())).collect();
        Matrix::from_rows(&rows)
    }
}
