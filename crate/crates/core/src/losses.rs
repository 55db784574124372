//! Training objectives, their analytic gradients and a small full-batch trainer.
//!
//! Shape model: `0.1·triplet(m = 0.2) + CE`. Appearance model:
//! `triplet(m = 0.3) + CE + center + 5e-4·CTL(m = 0.3)`. Triplet terms use
//! batch-hard mining on the flattened embedding; the centroid triplet loss
//! builds the positive centroid without the anchor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::{derive_seed, DenseLayer, Mlp};
use crate::error::{check_dim, Error, Result};
use crate::math::{euclidean_distance, l2_norm, softmax_unchecked, Matrix, ZERO_NORM};
use crate::scalar::Real;

pub const SHAPE_TRIPLET_MARGIN: f64 = 0.2;
pub const APPEARANCE_TRIPLET_MARGIN: f64 = 0.3;
pub const CTL_MARGIN: f64 = 0.3;
pub const CENTER_UPDATE_RATE: f64 = 0.5;

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    euclidean_distance(a, b).expect("equal dims")
}

/// Gradient of `‖a − b‖` with respect to `a`; zero at `a = b`.
fn unit_diff<T: Real>(a: &[T], b: &[T], d: T) -> Vec<T> {
    if d <= T::lit(ZERO_NORM) {
        vec![T::zero(); a.len()]
    } else {
        a.iter().zip(b).map(|(&x, &y)| (x - y) / d).collect()
    }
}

fn axpy<T: Real>(out: &mut [T], scale: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin >= 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("margin {margin} must be nonnegative")))
    }
}

/// `max(0, d(a, p) − d(a, n) + margin)` with Euclidean `d`.
pub fn triplet_loss<T: Real>(anchor: &[T], positive: &[T], negative: &[T], margin: f64) -> Result<T> {
    check_margin(margin)?;
    let dp = euclidean_distance(anchor, positive)?;
    let dn = euclidean_distance(anchor, negative)?;
    Ok((dp - dn + T::lit(margin)).max(T::zero()))
}

/// Gradients of [`triplet_loss`] with respect to anchor, positive and negative.
pub fn triplet_gradient<T: Real>(anchor: &[T], positive: &[T], negative: &[T], margin: f64) -> Result<[Vec<T>; 3]> {
    let dp = euclidean_distance(anchor, positive)?;
    let dn = euclidean_distance(anchor, negative)?;
    let zero = vec![T::zero(); anchor.len()];
    if dp - dn + T::lit(margin) <= T::zero() {
        return Ok([zero.clone(), zero.clone(), zero]);
    }
    let up = unit_diff(anchor, positive, dp);
    let un = unit_diff(anchor, negative, dn);
    let ga = up.iter().zip(&un).map(|(&p, &n)| p - n).collect();
    Ok([ga, up.iter().map(|&v| -v).collect(), un])
}

/// `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::IndexError { label, classes: logits.len() });
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    Ok((lse - logits[label]).max(T::zero()))
}

pub fn cross_entropy_gradient<T: Real>(logits: &[T], label: usize) -> Result<Vec<T>> {
    if label >= logits.len() {
        return Err(Error::IndexError { label, classes: logits.len() });
    }
    let mut g = softmax_unchecked(logits);
    g[label] -= T::one();
    Ok(g)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::IndexError { label, classes }),
        None => Ok(()),
    }
}

/// `(1/2N)·Σ‖x_i − c_{y_i}‖²`.
pub fn center_loss<T: Real>(embeddings: &Matrix<T>, centers: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_dim(embeddings.rows(), labels.len())?;
    check_dim(embeddings.cols(), centers.cols())?;
    check_labels(labels, centers.rows())?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("center loss batch"));
    }
    let mut sum = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        sum += embeddings.row(i).iter().zip(centers.row(y)).map(|(&x, &c)| (x - c) * (x - c)).sum::<T>();
    }
    Ok(sum / T::from_usize_lossy(2 * labels.len()))
}

/// Gradients of [`center_loss`] with respect to the embeddings and the centers.
pub fn center_loss_gradient<T: Real>(
    embeddings: &Matrix<T>,
    centers: &Matrix<T>,
    labels: &[usize],
) -> Result<(Matrix<T>, Matrix<T>)> {
    center_loss(embeddings, centers, labels)?;
    let n = T::from_usize_lossy(labels.len());
    let mut ge = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut gc = Matrix::zeros(centers.rows(), centers.cols());
    for (i, &y) in labels.iter().enumerate() {
        for d in 0..embeddings.cols() {
            let r = (embeddings.get(i, d) - centers.get(y, d)) / n;
            ge.set(i, d, r);
            gc.set(y, d, gc.get(y, d) - r);
        }
    }
    Ok((ge, gc))
}

/// Hardest positive and negative of one anchor and their distances, with the
/// distance gaps to the runner-up candidates.
#[derive(Debug, Clone, Copy)]
struct Mined<T> {
    pos: usize,
    neg: usize,
    dp: T,
    dn: T,
    pos_gap: T,
    neg_gap: T,
}

fn mine_batch_hard<T: Real>(embeddings: &Matrix<T>, labels: &[usize]) -> Result<Vec<Option<Mined<T>>>> {
    check_dim(embeddings.rows(), labels.len())?;
    let n = labels.len();
    Ok((0..n)
        .map(|i| {
            let a = embeddings.row(i);
            let (mut pos, mut neg) = (None::<(usize, T)>, None::<(usize, T)>);
            let (mut pos_gap, mut neg_gap) = (T::infinity(), T::infinity());
            for j in (0..n).filter(|&j| j != i) {
                let d = dist(a, embeddings.row(j));
                if labels[j] == labels[i] {
                    match pos {
                        Some((_, best)) if d <= best => pos_gap = pos_gap.min(best - d),
                        Some((_, best)) => {
                            pos_gap = pos_gap.min(d - best);
                            pos = Some((j, d));
                        }
                        None => pos = Some((j, d)),
                    }
                } else {
                    match neg {
                        Some((_, best)) if d >= best => neg_gap = neg_gap.min(d - best),
                        Some((_, best)) => {
                            neg_gap = neg_gap.min(best - d);
                            neg = Some((j, d));
                        }
                        None => neg = Some((j, d)),
                    }
                }
            }
            match (pos, neg) {
                (Some((pos, dp)), Some((neg, dn))) => Some(Mined { pos, neg, dp, dn, pos_gap, neg_gap }),
                _ => None,
            }
        })
        .collect())
}

/// Batch-hard triplet loss averaged over anchors that have both a positive and
/// a negative in the batch; zero when no anchor qualifies.
pub fn batch_hard_triplet<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<T> {
    check_margin(margin)?;
    let mined = mine_batch_hard(embeddings, labels)?;
    let m = T::lit(margin);
    let (sum, count) = mined
        .iter()
        .flatten()
        .fold((T::zero(), 0usize), |(s, c), x| (s + (x.dp - x.dn + m).max(T::zero()), c + 1));
    Ok(if count == 0 { T::zero() } else { sum / T::from_usize_lossy(count) })
}

pub fn batch_hard_triplet_gradient<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<Matrix<T>> {
    check_margin(margin)?;
    let mined = mine_batch_hard(embeddings, labels)?;
    let mut g = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let count = mined.iter().flatten().count();
    if count == 0 {
        return Ok(g);
    }
    let w = T::one() / T::from_usize_lossy(count);
    for (i, x) in mined.iter().enumerate() {
        let Some(x) = x else { continue };
        if x.dp - x.dn + T::lit(margin) <= T::zero() {
            continue;
        }
        let a = embeddings.row(i);
        let up = unit_diff(a, embeddings.row(x.pos), x.dp);
        let un = unit_diff(a, embeddings.row(x.neg), x.dn);
        axpy(g.row_mut(i), w, &up);
        axpy(g.row_mut(i), -w, &un);
        axpy(g.row_mut(x.pos), -w, &up);
        axpy(g.row_mut(x.neg), w, &un);
    }
    Ok(g)
}

/// Distance of the batch to the nearest point where the batch-hard loss is not
/// differentiable (a hinge or a change of mined partner).
pub fn batch_hard_slack<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<T> {
    let m = T::lit(margin);
    Ok(mine_batch_hard(embeddings, labels)?
        .iter()
        .flatten()
        .map(|x| (x.dp - x.dn + m).abs().min(x.pos_gap).min(x.neg_gap).min(x.dp).min(x.dn))
        .fold(T::infinity(), T::min))
}

fn class_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    members
}

fn centroid<T: Real>(embeddings: &Matrix<T>, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut sum = vec![T::zero(); embeddings.cols()];
    let mut n = 0;
    for r in rows {
        axpy(&mut sum, T::one(), embeddings.row(r));
        n += 1;
    }
    let n = T::from_usize_lossy(n);
    sum.into_iter().map(|v| v / n).collect()
}

/// Per-anchor centroid triplet: positive centroid, hardest negative class,
/// distances and the gap to the second-closest negative class.
struct CentroidTriplet<T> {
    anchor: usize,
    positive: Vec<T>,
    negative_class: usize,
    negative: Vec<T>,
    dp: T,
    dn: T,
    neg_gap: T,
}

fn mine_centroids<T: Real>(embeddings: &Matrix<T>, labels: &[usize]) -> Result<(Vec<CentroidTriplet<T>>, BTreeMap<usize, Vec<usize>>)> {
    check_dim(embeddings.rows(), labels.len())?;
    let members = class_members(labels);
    if members.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "centroid triplet loss needs at least 2 classes, batch has {}",
            members.len()
        )));
    }
    let centroids: BTreeMap<usize, Vec<T>> =
        members.iter().map(|(&k, rows)| (k, centroid(embeddings, rows.iter().copied()))).collect();
    let mut out = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let own = &members[&y];
        if own.len() < 2 {
            continue;
        }
        let a = embeddings.row(i);
        let positive = centroid(embeddings, own.iter().copied().filter(|&j| j != i));
        let dp = dist(a, &positive);
        let mut best: Option<(usize, T)> = None;
        let mut neg_gap = T::infinity();
        for (&k, c) in centroids.iter().filter(|(&k, _)| k != y) {
            let d = dist(a, c);
            match best {
                Some((_, b)) if d >= b => neg_gap = neg_gap.min(d - b),
                Some((_, b)) => {
                    neg_gap = neg_gap.min(b - d);
                    best = Some((k, d));
                }
                None => best = Some((k, d)),
            }
        }
        let (negative_class, dn) = best.expect("another class exists");
        out.push(CentroidTriplet {
            anchor: i,
            positive,
            negative: centroids[&negative_class].clone(),
            negative_class,
            dp,
            dn,
            neg_gap,
        });
    }
    Ok((out, members))
}

/// Centroid triplet loss averaged over anchors whose class has another member.
pub fn centroid_triplet_loss<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<T> {
    check_margin(margin)?;
    let (triplets, _) = mine_centroids(embeddings, labels)?;
    if triplets.is_empty() {
        return Ok(T::zero());
    }
    let m = T::lit(margin);
    let sum: T = triplets.iter().map(|t| (t.dp - t.dn + m).max(T::zero())).sum();
    Ok(sum / T::from_usize_lossy(triplets.len()))
}

pub fn centroid_triplet_gradient<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<Matrix<T>> {
    check_margin(margin)?;
    let (triplets, members) = mine_centroids(embeddings, labels)?;
    let mut g = Matrix::zeros(embeddings.rows(), embeddings.cols());
    if triplets.is_empty() {
        return Ok(g);
    }
    let w = T::one() / T::from_usize_lossy(triplets.len());
    for t in &triplets {
        if t.dp - t.dn + T::lit(margin) <= T::zero() {
            continue;
        }
        let a = embeddings.row(t.anchor).to_vec();
        let up = unit_diff(&a, &t.positive, t.dp);
        let un = unit_diff(&a, &t.negative, t.dn);
        axpy(g.row_mut(t.anchor), w, &up);
        axpy(g.row_mut(t.anchor), -w, &un);
        let own = &members[&labels[t.anchor]];
        let wp = w / T::from_usize_lossy(own.len() - 1);
        for &j in own.iter().filter(|&&j| j != t.anchor) {
            axpy(g.row_mut(j), -wp, &up);
        }
        let neg = &members[&t.negative_class];
        let wn = w / T::from_usize_lossy(neg.len());
        for &j in neg {
            axpy(g.row_mut(j), wn, &un);
        }
    }
    Ok(g)
}

/// See [`batch_hard_slack`].
pub fn centroid_triplet_slack<T: Real>(embeddings: &Matrix<T>, labels: &[usize], margin: f64) -> Result<T> {
    let m = T::lit(margin);
    Ok(mine_centroids(embeddings, labels)?
        .0
        .iter()
        .map(|t| (t.dp - t.dn + m).abs().min(t.neg_gap).min(t.dp).min(t.dn))
        .fold(T::infinity(), T::min))
}

/// Embeddings, labels, classifier logits and class centers of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub embeddings: Matrix<T>,
    pub labels: Vec<usize>,
    pub logits: Matrix<T>,
    pub centers: Matrix<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(embeddings: Matrix<T>, labels: Vec<usize>, logits: Matrix<T>, centers: Matrix<T>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        check_dim(embeddings.rows(), labels.len())?;
        check_dim(logits.rows(), labels.len())?;
        check_dim(centers.cols(), embeddings.cols())?;
        check_dim(logits.cols(), centers.rows())?;
        check_labels(&labels, logits.cols())?;
        Ok(Self { embeddings, labels, logits, centers })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_cross_entropy(&self) -> Result<T> {
        let sum: T = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy(self.logits.row(i), y))
            .sum::<Result<T>>()?;
        Ok(sum / T::from_usize_lossy(self.len()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Shape,
    Appearance,
}

/// Coefficient and margin of every loss component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub triplet: f64,
    pub triplet_margin: f64,
    pub cross_entropy: f64,
    pub center: f64,
    pub centroid_triplet: f64,
    pub centroid_margin: f64,
}

impl ObjectiveWeights {
    pub const SHAPE: Self = Self {
        triplet: 0.1,
        triplet_margin: SHAPE_TRIPLET_MARGIN,
        cross_entropy: 1.0,
        center: 0.0,
        centroid_triplet: 0.0,
        centroid_margin: CTL_MARGIN,
    };
    pub const APPEARANCE: Self = Self {
        triplet: 1.0,
        triplet_margin: APPEARANCE_TRIPLET_MARGIN,
        cross_entropy: 1.0,
        center: 1.0,
        centroid_triplet: 5e-4,
        centroid_margin: CTL_MARGIN,
    };

    pub fn total<T: Real>(&self, terms: &ObjectiveTerms<T>) -> T {
        T::lit(self.triplet) * terms.triplet
            + T::lit(self.cross_entropy) * terms.cross_entropy
            + T::lit(self.center) * terms.center
            + T::lit(self.centroid_triplet) * terms.centroid_triplet
    }
}

impl Objective {
    pub fn weights(self) -> ObjectiveWeights {
        match self {
            Objective::Shape => ObjectiveWeights::SHAPE,
            Objective::Appearance => ObjectiveWeights::APPEARANCE,
        }
    }
}

/// Unweighted value of each component; components with zero weight are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms<T> {
    pub triplet: T,
    pub cross_entropy: T,
    pub center: T,
    pub centroid_triplet: T,
}

pub fn objective_terms<T: Real>(batch: &Batch<T>, weights: &ObjectiveWeights) -> Result<ObjectiveTerms<T>> {
    let (e, y) = (&batch.embeddings, batch.labels.as_slice());
    Ok(ObjectiveTerms {
        triplet: batch_hard_triplet(e, y, weights.triplet_margin)?,
        cross_entropy: batch.mean_cross_entropy()?,
        center: if weights.center != 0.0 { center_loss(e, &batch.centers, y)? } else { T::zero() },
        centroid_triplet: if weights.centroid_triplet != 0.0 {
            centroid_triplet_loss(e, y, weights.centroid_margin)?
        } else {
            T::zero()
        },
    })
}

pub fn shape_objective<T: Real>(batch: &Batch<T>) -> Result<T> {
    let w = ObjectiveWeights::SHAPE;
    Ok(w.total(&objective_terms(batch, &w)?))
}

pub fn appearance_objective<T: Real>(batch: &Batch<T>) -> Result<T> {
    let w = ObjectiveWeights::APPEARANCE;
    Ok(w.total(&objective_terms(batch, &w)?))
}

/// Gradient of a weighted objective with respect to each batch operand.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient<T> {
    pub embeddings: Matrix<T>,
    pub logits: Matrix<T>,
    pub centers: Matrix<T>,
}

pub fn objective_gradient<T: Real>(batch: &Batch<T>, weights: &ObjectiveWeights) -> Result<BatchGradient<T>> {
    let (e, y) = (&batch.embeddings, batch.labels.as_slice());
    let mut ge = batch_hard_triplet_gradient(e, y, weights.triplet_margin)?;
    ge.as_mut_slice().iter_mut().for_each(|v| *v *= T::lit(weights.triplet));
    let mut gl = Matrix::zeros(batch.logits.rows(), batch.logits.cols());
    let scale = T::lit(weights.cross_entropy) / T::from_usize_lossy(batch.len());
    for (i, &label) in y.iter().enumerate() {
        let g = cross_entropy_gradient(batch.logits.row(i), label)?;
        axpy(gl.row_mut(i), scale, &g);
    }
    let mut gc = Matrix::zeros(batch.centers.rows(), batch.centers.cols());
    if weights.center != 0.0 {
        let (dx, dc) = center_loss_gradient(e, &batch.centers, y)?;
        axpy(ge.as_mut_slice(), T::lit(weights.center), dx.as_slice());
        axpy(gc.as_mut_slice(), T::lit(weights.center), dc.as_slice());
    }
    if weights.centroid_triplet != 0.0 {
        let dx = centroid_triplet_gradient(e, y, weights.centroid_margin)?;
        axpy(ge.as_mut_slice(), T::lit(weights.centroid_triplet), dx.as_slice());
    }
    Ok(BatchGradient { embeddings: ge, logits: gl, centers: gc })
}

/// Central differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` per coordinate.
pub fn numerical_gradient<T: Real>(mut f: impl FnMut(&[T]) -> T, x: &[T], eps: T) -> Result<Vec<T>> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidInput(format!("step {eps} must be positive")));
    }
    let mut probe = x.to_vec();
    Ok((0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (eps + eps)
        })
        .collect())
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> T {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let scale = l2_norm(a).max(l2_norm(b));
    if scale <= T::lit(ZERO_NORM) {
        l2_norm(&diff)
    } else {
        l2_norm(&diff) / scale
    }
}

/// Embedding stack followed by a linear classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet<T> {
    pub encoder: Mlp<T>,
    pub head: DenseLayer<T>,
}

struct Trace<T> {
    /// Input and output of every encoder layer.
    activations: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Real> ToyNet<T> {
    pub fn seeded(dims: &[usize], classes: usize, seed: u64) -> Self {
        let encoder = Mlp::seeded(dims, derive_seed(seed, 1));
        let head = Mlp::seeded(&[dims[dims.len() - 1], classes], derive_seed(seed, 2)).layers()[0].clone();
        Self { encoder, head }
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer<T>> {
        self.encoder.layers().iter().chain(std::iter::once(&self.head))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Every weight and bias, layer by layer, head last.
    pub fn params(&self) -> Vec<T> {
        self.layers().flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        check_dim(self.parameter_count(), params.len())?;
        let mut at = 0;
        let mut fill = |layer: &mut DenseLayer<T>| {
            let w = layer.weights.as_slice().len();
            layer.weights.as_mut_slice().copy_from_slice(&params[at..at + w]);
            at += w;
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[at..at + b]);
            at += b;
        };
        for layer in self.encoder.layers_mut() {
            fill(layer);
        }
        fill(&mut self.head);
        Ok(())
    }

    fn forward_traced(&self, x: &[T]) -> Trace<T> {
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::new();
        let last = self.encoder.layers().len() - 1;
        for (l, layer) in self.encoder.layers().iter().enumerate() {
            let z = layer.affine(activations.last().expect("input"));
            activations.push(if l < last { z.iter().map(|v| v.max(T::zero())).collect() } else { z.clone() });
            pre.push(z);
        }
        Trace { activations, pre }
    }

    pub fn embed(&self, inputs: &Matrix<T>) -> Matrix<T> {
        let rows: Vec<Vec<T>> = (0..inputs.rows()).map(|i| self.encoder.forward(inputs.row(i))).collect();
        Matrix::from_rows(&rows).expect("consistent widths")
    }

    pub fn batch(&self, inputs: &Matrix<T>, labels: &[usize], centers: &Matrix<T>) -> Result<Batch<T>> {
        let embeddings = self.embed(inputs);
        let logits: Vec<Vec<T>> = (0..embeddings.rows()).map(|i| self.head.affine(embeddings.row(i))).collect();
        Batch::new(embeddings, labels.to_vec(), Matrix::from_rows(&logits)?, centers.clone())
    }

    pub fn loss(&self, inputs: &Matrix<T>, labels: &[usize], centers: &Matrix<T>, weights: &ObjectiveWeights) -> Result<T> {
        Ok(weights.total(&objective_terms(&self.batch(inputs, labels, centers)?, weights)?))
    }

    /// Loss and its gradient with respect to [`params`](Self::params), by backpropagation.
    pub fn loss_and_gradient(
        &self,
        inputs: &Matrix<T>,
        labels: &[usize],
        centers: &Matrix<T>,
        weights: &ObjectiveWeights,
    ) -> Result<(T, Vec<T>)> {
        check_dim(self.encoder.input_dim(), inputs.cols())?;
        let batch = self.batch(inputs, labels, centers)?;
        let loss = weights.total(&objective_terms(&batch, weights)?);
        let grad = objective_gradient(&batch, weights)?;

        let n_layers = self.encoder.layers().len();
        let mut gw: Vec<Vec<T>> = self.layers().map(|l| vec![T::zero(); l.weights.as_slice().len()]).collect();
        let mut gb: Vec<Vec<T>> = self.layers().map(|l| vec![T::zero(); l.bias.len()]).collect();
        for i in 0..inputs.rows() {
            let trace = self.forward_traced(inputs.row(i));
            let e = &trace.activations[n_layers];
            let dlogits = grad.logits.row(i);
            let mut de = grad.embeddings.row(i).to_vec();
            let k = self.head.inputs();
            for (r, &dl) in dlogits.iter().enumerate() {
                axpy(&mut gw[n_layers][r * k..(r + 1) * k], dl, e);
                gb[n_layers][r] += dl;
                axpy(&mut de, dl, self.head.weights.row(r));
            }
            let mut delta = de;
            for l in (0..n_layers).rev() {
                let layer = &self.encoder.layers()[l];
                let dz: Vec<T> = if l + 1 == n_layers {
                    delta
                } else {
                    delta.iter().zip(&trace.pre[l]).map(|(&d, &z)| if z > T::zero() { d } else { T::zero() }).collect()
                };
                let h = &trace.activations[l];
                let cols = layer.inputs();
                let mut dh = vec![T::zero(); cols];
                for (r, &d) in dz.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    axpy(&mut gw[l][r * cols..(r + 1) * cols], d, h);
                    gb[l][r] += d;
                    axpy(&mut dh, d, layer.weights.row(r));
                }
                delta = dh;
            }
        }
        let flat = gw.into_iter().zip(gb).flat_map(|(w, b)| w.into_iter().chain(b)).collect();
        Ok((loss, flat))
    }
}

/// Per-class mean of the rows of `embeddings`; classes without samples stay at zero.
pub fn class_means<T: Real>(embeddings: &Matrix<T>, labels: &[usize], classes: usize) -> Matrix<T> {
    let mut means = Matrix::zeros(classes, embeddings.cols());
    for (k, rows) in class_members(labels) {
        means.row_mut(k).copy_from_slice(&centroid(embeddings, rows.into_iter()));
    }
    means
}

/// Moving-average center update: `c_k ← c_k − rate·Σ(c_k − x_i)/(1 + n_k)`.
pub fn update_centers<T: Real>(centers: &mut Matrix<T>, embeddings: &Matrix<T>, labels: &[usize], rate: f64) {
    for (k, rows) in class_members(labels) {
        let n = T::from_usize_lossy(rows.len() + 1);
        for d in 0..centers.cols() {
            let c = centers.get(k, d);
            let delta: T = rows.iter().map(|&i| c - embeddings.get(i, d)).sum::<T>() / n;
            centers.set(k, d, c - T::lit(rate) * delta);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub objective: Objective,
    pub steps: usize,
    pub lr: f64,
    /// Encoder widths after the input layer; the last one is the embedding size.
    pub widths: Vec<usize>,
    pub seed: u64,
    /// Compare the first step's gradient with central differences.
    pub check_gradient: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { objective: Objective::Appearance, steps: 200, lr: 0.05, widths: vec![32, 16], seed: 11, check_gradient: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun<T> {
    pub net: ToyNet<T>,
    pub centers: Matrix<T>,
    /// Loss before each step.
    pub trace: Vec<T>,
    /// Relative error of the analytic gradient at the first step, if checked.
    pub gradient_error: Option<T>,
}

/// Full-batch gradient descent with constant step size. With `lr = 0` every
/// parameter, centers included, stays fixed.
pub fn train_toy<T: Real>(inputs: &Matrix<T>, labels: &[usize], config: &ToyConfig) -> Result<ToyRun<T>> {
    if config.steps == 0 {
        return Err(Error::InvalidInput("train.steps must be at least 1".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidInput(format!("train.lr {} must be nonnegative", config.lr)));
    }
    if config.widths.is_empty() || config.widths.contains(&0) {
        return Err(Error::InvalidInput("train.widths must be positive".into()));
    }
    check_dim(inputs.rows(), labels.len())?;
    let classes = labels.iter().max().map(|&m| m + 1).ok_or(Error::EmptyInput("training set"))?;
    let weights = config.objective.weights();
    let mut dims = vec![inputs.cols()];
    dims.extend(&config.widths);
    let mut net = ToyNet::seeded(&dims, classes, config.seed);
    let mut centers = class_means(&net.embed(inputs), labels, classes);
    let lr = T::lit(config.lr);
    let mut trace = Vec::with_capacity(config.steps);
    let mut gradient_error = None;
    for step in 0..config.steps {
        let (loss, grad) = net.loss_and_gradient(inputs, labels, &centers, &weights)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(step));
        }
        trace.push(loss);
        let params = net.params();
        if step == 0 && config.check_gradient {
            let mut probe = net.clone();
            let numeric = numerical_gradient(
                |p| {
                    probe.set_params(p).expect("same size");
                    probe.loss(inputs, labels, &centers, &weights).expect("valid batch")
                },
                &params,
                T::lit(1e-6),
            );
            gradient_error = Some(relative_error(&grad, &numeric?));
        }
        if config.lr > 0.0 {
            let updated: Vec<T> = params.iter().zip(&grad).map(|(&p, &g)| p - lr * g).collect();
            net.set_params(&updated)?;
            update_centers(&mut centers, &net.embed(inputs), labels, CENTER_UPDATE_RATE);
        }
    }
    Ok(ToyRun { net, centers, trace, gradient_error })
}

/// `step,loss` table.
pub fn trace_csv<T: Real>(trace: &[T]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}
