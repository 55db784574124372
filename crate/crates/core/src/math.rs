//! Dense kernels shared by the shape and appearance branches.
//!
//! Everything here is pure and works on plain row-major buffers so the same
//! code runs for `f32` and `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{order_free_mean, Real};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-12;

fn ensure_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{what}: non-finite entry at {i}"))),
        None => Ok(()),
    }
}

/// Flat feature vector with at least one finite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<T>(Vec<T>);

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        ensure_finite(&data, "vector")?;
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.0)
    }

    /// Concatenates two vectors.
    pub fn concat(&self, other: &Self) -> Self {
        let mut data = self.0.clone();
        data.extend_from_slice(&other.0);
        Self(data)
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self(self.0.iter().map(|&v| v * factor).collect())
    }

    /// Componentwise mean of `vectors`, summed in an order-independent way.
    pub fn mean_of(vectors: &[&Self]) -> Result<Self> {
        let first = vectors.first().ok_or(Error::EmptyInput("vector mean"))?;
        let dim = first.dim();
        for v in vectors {
            check_dim(dim, v.dim())?;
        }
        let mut column = Vec::with_capacity(vectors.len());
        let data = (0..dim)
            .map(|d| {
                column.clear();
                column.extend(vectors.iter().map(|v| v.0[d]));
                order_free_mean(&mut column)
            })
            .collect();
        Ok(Self(data))
    }
}

impl<T> std::ops::Index<usize> for Vector<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        ensure_finite(&data, "matrix")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_dim(cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        check_dim(self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols: self.cols, data })
    }
}

/// `height × width × channels` grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        check_dim(height * width * channels, data.len())?;
        ensure_finite(&data, "feature grid")?;
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "grid dimensions must be positive");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Grid whose every pixel holds `pixel`.
    pub fn broadcast(height: usize, width: usize, pixel: &[T]) -> Self {
        assert!(height > 0 && width > 0 && !pixel.is_empty());
        let mut data = Vec::with_capacity(height * width * pixel.len());
        for _ in 0..height * width {
            data.extend_from_slice(pixel);
        }
        Self { height, width, channels: pixel.len(), data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Channel vector at position `(h, w)`.
    pub fn pixel(&self, h: usize, w: usize) -> &[T] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Channel vector at flat spatial position `p`.
    pub fn at(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected: self.data.len(), found: other.data.len() })
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { data, ..*self })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Applies `f` to each pixel's channel vector, producing `out_channels` values.
    pub fn map_pixels(&self, out_channels: usize, mut f: impl FnMut(&[T]) -> Vec<T>) -> Self {
        let mut data = Vec::with_capacity(self.positions() * out_channels);
        for p in 0..self.positions() {
            let out = f(self.at(p));
            debug_assert_eq!(out.len(), out_channels);
            data.extend(out);
        }
        Self { height: self.height, width: self.width, channels: out_channels, data }
    }

    /// Halves both spatial dimensions by averaging 2×2 blocks. Odd trailing
    /// rows or columns are dropped.
    pub fn downsample2(&self) -> Result<Self> {
        let (h, w) = (self.height / 2, self.width / 2);
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "cannot downsample a {}x{} grid",
                self.height, self.width
            )));
        }
        let quarter = T::lit(0.25);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let s = self.get(2 * y, 2 * x, c)
                        + self.get(2 * y, 2 * x + 1, c)
                        + self.get(2 * y + 1, 2 * x, c)
                        + self.get(2 * y + 1, 2 * x + 1, c);
                    data.push(s * quarter);
                }
            }
        }
        Ok(Self { height: h, width: w, channels: self.channels, data })
    }

    /// Mean over spatial positions, one value per channel.
    pub fn global_average_pool(&self) -> Vector<T> {
        let mut column = Vec::with_capacity(self.positions());
        Vector(
            (0..self.channels)
                .map(|c| {
                    column.clear();
                    column.extend((0..self.positions()).map(|p| self.at(p)[c]));
                    order_free_mean(&mut column)
                })
                .collect(),
        )
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm, rescaled by the largest magnitude to avoid overflow.
pub fn l2_norm<T: Real>(v: &[T]) -> T {
    let scale = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if scale == T::zero() || !scale.is_finite() {
        return scale;
    }
    let sum = v.iter().fold(T::zero(), |acc, &x| {
        let y = x / scale;
        acc + y * y
    });
    scale * sum.sqrt()
}

/// Scales `v` to unit length. Vectors with norm below [`ZERO_NORM`] are
/// returned unchanged.
pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("l2_normalize"));
    }
    ensure_finite(v, "l2_normalize")?;
    let norm = l2_norm(v);
    if norm < T::lit(ZERO_NORM) {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    let s = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x / na) * (y / nb));
    Ok(s.max(-T::one()).min(T::one()))
}

pub fn squared_euclidean<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    }))
}

pub fn euclidean_distance<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    squared_euclidean(a, b).map(T::sqrt)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    ensure_finite(v, "softmax")?;
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Statistic used to reduce one horizontal band to a bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatistic {
    Max,
    Mean,
    #[default]
    MaxPlusMean,
}

/// Horizontal strip pooling: splits the grid into `strips` equal bands and
/// reduces each band to one `C`-wide row.
pub fn strip_pool<T: Real>(grid: &FeatureGrid<T>, strips: usize, stat: BinStatistic) -> Result<Matrix<T>> {
    let (height, width, channels) = grid.dims();
    if strips == 0 || height % strips != 0 {
        return Err(Error::InvalidBinning { height, strips });
    }
    let band = height / strips;
    let count = T::from_usize_lossy(band * width);
    let mut out = Matrix::zeros(strips, channels);
    for b in 0..strips {
        for c in 0..channels {
            let mut max = T::neg_infinity();
            let mut sum = T::zero();
            for h in b * band..(b + 1) * band {
                for w in 0..width {
                    let v = grid.get(h, w, c);
                    max = max.max(v);
                    sum += v;
                }
            }
            let mean = sum / count;
            let value = match stat {
                BinStatistic::Max => max,
                BinStatistic::Mean => mean,
                BinStatistic::MaxPlusMean => max + mean,
            };
            out.set(b, c, value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_1col(values: &[f64]) -> FeatureGrid<f64> {
        FeatureGrid::new(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[1e-300, 0.0]).unwrap(), vec![1e-300, 0.0]);
        assert!(matches!(l2_normalize(&[f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(Vector::new(vec![1.0, f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[1.0], &[-1.0]).unwrap(), 2.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        // exp(-1000) underflows to exactly zero in f64; the reference value is
        // 1 / (1 + e^-1000) which rounds to 1.
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn strip_pool_examples() {
        let g = grid_1col(&[1.0, 2.0, 3.0, 4.0]);
        let two = strip_pool(&g, 2, BinStatistic::MaxPlusMean).unwrap();
        assert_eq!(two.as_slice(), &[3.5, 7.5]);
        let one = strip_pool(&g, 1, BinStatistic::MaxPlusMean).unwrap();
        assert_eq!(one.as_slice(), &[6.5]);
        assert_eq!(strip_pool(&g, 2, BinStatistic::Max).unwrap().as_slice(), &[2.0, 4.0]);
        assert_eq!(strip_pool(&g, 2, BinStatistic::Mean).unwrap().as_slice(), &[1.5, 3.5]);
        assert!(matches!(
            strip_pool(&g, 3, BinStatistic::MaxPlusMean),
            Err(Error::InvalidBinning { height: 4, strips: 3 })
        ));
        let k = FeatureGrid::filled(6, 3, 2, 1.25);
        for b in [1, 2, 3, 6] {
            let m = strip_pool(&k, b, BinStatistic::MaxPlusMean).unwrap();
            assert!(m.as_slice().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn strip_pool_per_row() {
        let g = FeatureGrid::new(3, 1, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
        let m = strip_pool(&g, 3, BinStatistic::MaxPlusMean).unwrap();
        assert_eq!(m.as_slice(), &[2.0, -2.0, 4.0, 1.0, -6.0, 8.0]);
    }

    #[test]
    fn generic_over_f32() {
        let n = l2_normalize(&[3f32, 4.0]).unwrap();
        assert_eq!(n, vec![0.6f32, 0.8]);
        assert_eq!(cosine_similarity(&[2f32, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn downsample_and_pool() {
        let g = FeatureGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(g.downsample2().unwrap().as_slice(), &[3.0]);
        assert_eq!(g.global_average_pool().as_slice(), &[3.0]);
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(a in vec_strategy(6), b in vec_strategy(6), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let base = cosine_similarity(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            prop_assert!((cosine_similarity(&sa, &tb).unwrap() - base).abs() <= 1e-12);
        }

        #[test]
        fn euclidean_metric_axioms(a in vec_strategy(5), b in vec_strategy(5), c in vec_strategy(5)) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let ba = euclidean_distance(&b, &a).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn softmax_shift_invariant(v in vec_strategy(7), shift in -50.0f64..50.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, y) in p.iter().zip(&q) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn strip_pool_full_resolution(rows in prop::collection::vec(vec_strategy(3), 1..6)) {
            let h = rows.len();
            let data: Vec<f64> = rows.iter().flatten().copied().collect();
            let g = FeatureGrid::new(h, 1, 3, data).unwrap();
            let m = strip_pool(&g, h, BinStatistic::MaxPlusMean).unwrap();
            for (r, row) in rows.iter().enumerate() {
                for c in 0..3 {
                    prop_assert_eq!(m.get(r, c), 2.0 * row[c]);
                }
            }
        }
    }
}
