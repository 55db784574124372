//! Per-modality scoring, weighted fusion and ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{GalleryIndex, TrackletEmbedding};
use crate::math::{cosine_similarity, euclidean_distance, Matrix};
use crate::scalar::Real;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Queries × gallery similarities with their row and column ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    pub scores: Matrix<T>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(scores: Matrix<T>, query_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if scores.rows() != query_ids.len() || scores.cols() != gallery_ids.len() {
            return Err(Error::AlignmentError(format!(
                "{}x{} scores for {} queries and {} gallery ids",
                scores.rows(),
                scores.cols(),
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        Ok(Self { scores, query_ids, gallery_ids })
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, q: usize) -> &[T] {
        self.scores.row(q)
    }

    /// Merges columns sharing a gallery id by taking their maximum. Columns
    /// of the result are in ascending id order.
    pub fn collapse_max(&self) -> Self {
        let mut columns: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (c, id) in self.gallery_ids.iter().enumerate() {
            columns.entry(id.as_str()).or_default().push(c);
        }
        let ids: Vec<String> = columns.keys().map(|s| s.to_string()).collect();
        let mut data = Vec::with_capacity(self.rows() * ids.len());
        for q in 0..self.rows() {
            let row = self.row(q);
            data.extend(
                columns.values().map(|cols| cols.iter().map(|&c| row[c]).fold(T::neg_infinity(), T::max)),
            );
        }
        let scores = Matrix::new(self.rows(), ids.len(), data).expect("finite scores");
        Self { scores, query_ids: self.query_ids.clone(), gallery_ids: ids }
    }

    /// Writes `query_id,<gallery ids…>` followed by one row per query.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "query_id")?;
        for id in &self.gallery_ids {
            write!(out, ",{id}")?;
        }
        writeln!(out)?;
        for (q, id) in self.query_ids.iter().enumerate() {
            write!(out, "{id}")?;
            for v in self.row(q) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Parses the output of [`write_csv`](Self::write_csv), skipping `#` comment lines.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let bad = |msg: String| Error::InvalidInput(format!("score table: {msg}"));
        let mut lines = input.lines().map(|l| l.map_err(|e| bad(e.to_string())));
        let header = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.starts_with('#') {
                        break line;
                    }
                }
                None => return Err(bad("missing header".into())),
            }
        };
        let mut fields = header.split(',');
        if fields.next() != Some("query_id") {
            return Err(bad("header must start with query_id".into()));
        }
        let gallery_ids: Vec<String> = fields.map(str::to_owned).collect();
        let mut query_ids = Vec::new();
        let mut data = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            query_ids.push(fields.next().unwrap_or_default().to_owned());
            let before = data.len();
            for f in fields {
                let v: f64 = f.parse().map_err(|_| bad(format!("bad score {f:?}")))?;
                data.push(T::lit(v));
            }
            if data.len() - before != gallery_ids.len() {
                return Err(bad(format!("row {} has the wrong width", query_ids.len())));
            }
        }
        Self::new(Matrix::new(query_ids.len(), gallery_ids.len(), data)?, query_ids, gallery_ids)
    }
}

fn build<T: Real>(
    queries: &[TrackletEmbedding<T>],
    index: &GalleryIndex<T>,
    row: impl Fn(&TrackletEmbedding<T>) -> Result<Vec<T>> + Sync + Send,
) -> Result<ScoreMatrix<T>> {
    let rows: Vec<Vec<T>> = queries.par_iter().map(row).collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    ScoreMatrix::new(
        Matrix::new(queries.len(), index.len(), data)?,
        queries.iter().map(|q| q.tracklet_id.clone()).collect(),
        index.subject_ids(),
    )
}

/// Cosine similarity between each query's shape vector and each gallery entry.
/// How shape cosine similarities enter fusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeScoring {
    /// Cosine similarity, min-max rescaled per query row like appearance.
    #[default]
    MinMax,
    /// Raw cosine similarity.
    Cosine,
}

pub fn shape_scores<T: Real>(
    queries: &[TrackletEmbedding<T>],
    index: &GalleryIndex<T>,
    scoring: ShapeScoring,
) -> Result<ScoreMatrix<T>> {
    build(queries, index, |q| {
        let mut row =
            index.entries.iter().map(|e| cosine_similarity(q.shape.as_slice(), e.shape.as_slice())).collect::<Result<Vec<T>>>()?;
        if scoring == ShapeScoring::MinMax {
            min_max_row(&mut row);
        }
        Ok(row)
    })
}

/// How Euclidean appearance distances become similarities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceScoring {
    /// Negated distance, min-max rescaled to `[0, 1]` per query row; a row
    /// with no spread scores 0.5 everywhere.
    #[default]
    MinMax,
    /// Negated raw distance.
    NegatedDistance,
}

/// Per-row min-max rescaling of similarities into `[0, 1]`.
pub fn min_max_row<T: Real>(row: &mut [T]) {
    let lo = row.iter().fold(T::infinity(), |m, &v| m.min(v));
    let hi = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let range = hi - lo;
    for v in row.iter_mut() {
        *v = if range > T::zero() { (*v - lo) / range } else { T::lit(0.5) };
    }
}

pub fn appearance_scores<T: Real>(
    queries: &[TrackletEmbedding<T>],
    index: &GalleryIndex<T>,
    scoring: AppearanceScoring,
) -> Result<ScoreMatrix<T>> {
    build(queries, index, |q| {
        let mut row = index
            .entries
            .iter()
            .map(|e| euclidean_distance(q.appearance.as_slice(), e.appearance.as_slice()).map(|d| -d))
            .collect::<Result<Vec<T>>>()?;
        if scoring == AppearanceScoring::MinMax {
            min_max_row(&mut row);
        }
        Ok(row)
    })
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// `α·shape + (1 − α)·appearance`, entrywise.
pub fn fuse_scores<T: Real>(shape: &ScoreMatrix<T>, appearance: &ScoreMatrix<T>, alpha: f64) -> Result<ScoreMatrix<T>> {
    check_alpha(alpha)?;
    if shape.query_ids != appearance.query_ids {
        return Err(Error::AlignmentError("query ids differ".into()));
    }
    if shape.gallery_ids != appearance.gallery_ids {
        return Err(Error::AlignmentError("gallery ids differ".into()));
    }
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    let data = shape
        .scores
        .as_slice()
        .iter()
        .zip(appearance.scores.as_slice())
        .map(|(&s, &p)| a * s + b * p)
        .collect();
    ScoreMatrix::new(
        Matrix::new(shape.rows(), shape.cols(), data)?,
        shape.query_ids.clone(),
        shape.gallery_ids.clone(),
    )
}

/// Column indices of each row, best first. Ties go to the smaller gallery id.
pub fn rank<T: Real>(scores: &ScoreMatrix<T>) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|q| {
            let row = scores.row(q);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| scores.gallery_ids[a].cmp(&scores.gallery_ids[b]))
            });
            order
        })
        .collect()
}

/// [`rank`] with gallery ids instead of column indices.
pub fn rank_ids<T: Real>(scores: &ScoreMatrix<T>) -> Vec<Vec<String>> {
    rank(scores)
        .into_iter()
        .map(|order| order.into_iter().map(|c| scores.gallery_ids[c].clone()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::GalleryEntry;
    use crate::math::Vector;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::new(x.to_vec()).unwrap()
    }

    fn query(id: &str, shape: &[f64], app: &[f64]) -> TrackletEmbedding<f64> {
        TrackletEmbedding { tracklet_id: id.into(), subject_id: "?".into(), shape: v(shape), appearance: v(app) }
    }

    fn index(entries: &[(&str, &[f64], &[f64])]) -> GalleryIndex<f64> {
        GalleryIndex {
            entries: entries
                .iter()
                .map(|(id, s, a)| GalleryEntry { subject_id: id.to_string(), shape: v(s), appearance: v(a), count: 1 })
                .collect(),
        }
    }

    fn matrix(rows: &[&[f64]], gallery: &[&str]) -> ScoreMatrix<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        ScoreMatrix::new(
            Matrix::from_rows(&rows).unwrap(),
            (0..rows.len()).map(|i| format!("q{i}")).collect(),
            gallery.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_score_examples() {
        let idx = index(&[("a", &[1.0, 0.0], &[0.0]), ("b", &[0.0, 2.0], &[0.0])]);
        let s = shape_scores(&[query("q", &[3.0, 0.0], &[0.0])], &idx, ShapeScoring::Cosine).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
        let zero = shape_scores(&[query("q", &[0.0, 0.0], &[0.0])], &idx, ShapeScoring::Cosine);
        assert!(matches!(zero, Err(Error::InvalidInput(_))));
        let idx = index(&[("a", &[1.0, 0.0], &[0.0]), ("b", &[-1.0, 0.0], &[0.0]), ("c", &[0.0, 1.0], &[0.0])]);
        let q = [query("q", &[2.0, 0.0], &[0.0])];
        assert_eq!(shape_scores(&q, &idx, ShapeScoring::Cosine).unwrap().row(0), &[1.0, -1.0, 0.0]);
        assert_eq!(shape_scores(&q, &idx, ShapeScoring::MinMax).unwrap().row(0), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn shape_scores_match_loop_oracle() {
        let g: Vec<Vec<f64>> = (0..4).map(|i| (0..5).map(|d| ((i * 5 + d) as f64 * 1.37).sin()).collect()).collect();
        let q: Vec<Vec<f64>> = (0..3).map(|i| (0..5).map(|d| ((i * 7 + d) as f64 * 0.91).cos()).collect()).collect();
        let idx = GalleryIndex {
            entries: g
                .iter()
                .enumerate()
                .map(|(i, s)| GalleryEntry { subject_id: format!("g{i}"), shape: v(s), appearance: v(&[0.0]), count: 1 })
                .collect(),
        };
        let queries: Vec<_> = q.iter().enumerate().map(|(i, s)| query(&format!("q{i}"), s, &[0.0])).collect();
        let m = shape_scores(&queries, &idx, ShapeScoring::Cosine).unwrap();
        for (qi, qv) in q.iter().enumerate() {
            for (gi, gv) in g.iter().enumerate() {
                let mut dot = 0.0;
                let mut nq = 0.0;
                let mut ng = 0.0;
                for d in 0..5 {
                    dot += qv[d] * gv[d];
                    nq += qv[d] * qv[d];
                    ng += gv[d] * gv[d];
                }
                let oracle = dot / (nq.sqrt() * ng.sqrt());
                assert!((m.scores.get(qi, gi) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn appearance_score_examples() {
        let idx = index(&[("a", &[1.0], &[0.0, 0.0]), ("b", &[1.0], &[3.0, 4.0]), ("c", &[1.0], &[-3.0, 4.0])]);
        let s = appearance_scores(&[query("q", &[1.0], &[3.0, 4.0])], &idx, AppearanceScoring::MinMax).unwrap();
        assert_eq!(s.row(0)[1], 1.0);
        let s = appearance_scores(&[query("q", &[1.0], &[0.0, 0.0])], &idx, AppearanceScoring::MinMax).unwrap();
        assert_eq!(s.row(0)[0], 1.0);
        assert_eq!(s.row(0)[1], s.row(0)[2]);
        assert_eq!(s.row(0)[1], 0.0);
        let flat = index(&[("a", &[1.0], &[1.0, 0.0]), ("b", &[1.0], &[0.0, 1.0])]);
        let s = appearance_scores(&[query("q", &[1.0], &[0.0, 0.0])], &flat, AppearanceScoring::MinMax).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let raw = appearance_scores(&[query("q", &[1.0], &[0.0, 0.0])], &idx, AppearanceScoring::NegatedDistance).unwrap();
        assert_eq!(raw.row(0), &[-0.0, -5.0, -5.0]);
    }

    #[test]
    fn fuse_examples() {
        let s = matrix(&[&[1.0, 0.2]], &["a", "b"]);
        let a = matrix(&[&[0.5, 0.9]], &["a", "b"]);
        let f = fuse_scores(&s, &a, 0.1).unwrap();
        assert!((f.row(0)[0] - 0.55).abs() < 1e-15);
        assert_eq!(fuse_scores(&s, &a, 0.0).unwrap().scores, a.scores);
        assert_eq!(fuse_scores(&s, &a, 1.0).unwrap().scores, s.scores);
        let other = matrix(&[&[0.5, 0.9]], &["b", "a"]);
        assert!(matches!(fuse_scores(&s, &other, 0.5), Err(Error::AlignmentError(_))));
        assert!(fuse_scores(&s, &a, 1.2).is_err());
    }

    #[test]
    fn rank_examples() {
        let m = matrix(&[&[0.2, 0.9, 0.5]], &["g1", "g2", "g3"]);
        assert_eq!(rank_ids(&m)[0], ["g2", "g3", "g1"]);
        let tied = matrix(&[&[0.3, 0.3, 0.3]], &["c", "a", "b"]);
        assert_eq!(rank_ids(&tied)[0], ["a", "b", "c"]);
        let affine = matrix(&[&[0.2 * 3.0 + 1.0, 0.9 * 3.0 + 1.0, 0.5 * 3.0 + 1.0]], &["g1", "g2", "g3"]);
        assert_eq!(rank(&affine)[0][0], rank(&m)[0][0]);
    }

    #[test]
    fn collapse_takes_subject_max() {
        let m = matrix(&[&[0.1, 0.7, 0.4], &[0.9, 0.2, 0.3]], &["b", "a", "b"]);
        let c = m.collapse_max();
        assert_eq!(c.gallery_ids, ["a", "b"]);
        assert_eq!(c.row(0), &[0.7, 0.4]);
        assert_eq!(c.row(1), &[0.2, 0.9]);
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix(&[&[0.1, 1.0 / 3.0], &[-2.5e-17, 0.9]], &["a", "b"]);
        let mut buf = b"# header comment\n".to_vec();
        m.write_csv(&mut buf).unwrap();
        let back = ScoreMatrix::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ScoreMatrix::<f64>::read_csv("query_id,a\nq,1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn fusion_is_affine_in_alpha(
            s in prop::collection::vec(-1.0f64..1.0, 6),
            a in prop::collection::vec(0.0f64..1.0, 6),
            alpha in 0.0f64..=1.0,
        ) {
            let sm = ScoreMatrix::new(Matrix::new(2, 3, s.clone()).unwrap(), vec!["x".into(), "y".into()], vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let am = ScoreMatrix::new(Matrix::new(2, 3, a.clone()).unwrap(), sm.query_ids.clone(), sm.gallery_ids.clone()).unwrap();
            let f = fuse_scores(&sm, &am, alpha).unwrap();
            for i in 0..6 {
                let expected = alpha * s[i] + (1.0 - alpha) * a[i];
                prop_assert!((f.scores.as_slice()[i] - expected).abs() <= 4.0 * f64::EPSILON);
            }
            // Identical modalities rank identically for every alpha.
            let same = fuse_scores(&sm, &sm, alpha).unwrap();
            prop_assert_eq!(rank(&same), rank(&sm));
        }
    }
}
