//! Symbolic affinity between primitive triples: per-primitive binary match
//! matrices, their weighted average `S`, and row-stochastic targets built
//! from `S`.

use crate::action_space::PrimitiveTriple;
use crate::numerics::Mat;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("affinity needs at least one triple")]
    Empty,
    #[error("invalid affinity weights ({0}, {1}, {2}): need non-negative values with a positive sum")]
    Weights(f64, f64, f64),
    #[error("{0} sample ids for a {1}x{1} matrix")]
    Ids(usize, usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchComponent {
    Trans,
    Rot,
    Grip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityWeights {
    pub w_t: f64,
    pub w_r: f64,
    pub w_g: f64,
}

impl Default for AffinityWeights {
    fn default() -> Self {
        Self { w_t: 1.0, w_r: 1.0, w_g: 1.0 }
    }
}

impl AffinityWeights {
    pub fn validate(&self) -> Result<(), AffinityError> {
        let ws = [self.w_t, self.w_r, self.w_g];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(AffinityError::Weights(self.w_t, self.w_r, self.w_g));
        }
        Ok(())
    }
}

/// Whether self-pairs take part in a normalized target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelfMode {
    IncludeSelf,
    ExcludeSelf,
}

/// `S` for one batch. Symmetric, unit diagonal, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    s: Mat,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.s.rows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.s
    }

    /// The hard-label stand-in `S := I`.
    pub fn identity(n: usize) -> Self {
        Self { s: Mat::identity(n) }
    }

    /// Writes `S` as CSV: header row of sample ids, then one row per sample.
    pub fn write_csv<W: Write>(&self, ids: &[String], out: W) -> Result<(), AffinityError> {
        if ids.len() != self.n() {
            return Err(AffinityError::Ids(ids.len(), self.n()));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ids)?;
        for i in 0..self.n() {
            w.write_record(self.s.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn component_matches(a: &PrimitiveTriple, b: &PrimitiveTriple, c: MatchComponent) -> bool {
    match c {
        MatchComponent::Trans => a.trans == b.trans,
        MatchComponent::Rot => a.rot == b.rot,
        MatchComponent::Grip => a.grip == b.grip,
    }
}

/// `M_ij = 1` iff triples `i` and `j` agree on the selected primitive
/// (direction and magnitude bin for translation / rotation).
pub fn match_matrix(triples: &[PrimitiveTriple], component: MatchComponent) -> Result<Mat, AffinityError> {
    if triples.is_empty() {
        return Err(AffinityError::Empty);
    }
    let n = triples.len();
    Ok(Mat::from_fn(n, n, |i, j| {
        f64::from(u8::from(component_matches(&triples[i], &triples[j], component)))
    }))
}

pub fn similarity_matrix(
    triples: &[PrimitiveTriple],
    w: &AffinityWeights,
) -> Result<AffinityMatrix, AffinityError> {
    w.validate()?;
    let mt = match_matrix(triples, MatchComponent::Trans)?;
    let mr = match_matrix(triples, MatchComponent::Rot)?;
    let mg = match_matrix(triples, MatchComponent::Grip)?;
    let total = w.w_t + w.w_r + w.w_g;
    let n = triples.len();
    let s = Mat::from_fn(n, n, |i, j| {
        (w.w_t * mt[(i, j)] + w.w_r * mr[(i, j)] + w.w_g * mg[(i, j)]) / total
    });
    Ok(AffinityMatrix { s })
}

/// Rescales every row of a non-negative matrix to sum to one. Rows with no
/// mass become uniform over the allowed entries (off-diagonal ones when
/// `self_mode` excludes self).
fn normalize_rows(mut m: Mat, self_mode: SelfMode) -> Mat {
    let square = m.rows() == m.cols();
    for i in 0..m.rows() {
        if self_mode == SelfMode::ExcludeSelf && square {
            m[(i, i)] = 0.0;
        }
        let cols = m.cols();
        let row = m.row_mut(i);
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            let skip = (self_mode == SelfMode::ExcludeSelf && square).then_some(i);
            let allowed = cols - usize::from(skip.is_some());
            for (j, v) in row.iter_mut().enumerate() {
                *v = if Some(j) == skip || allowed == 0 { 0.0 } else { 1.0 / allowed as f64 };
            }
        }
    }
    m
}

/// Row-stochastic target `T` with `T_ij ∝ S_ij` in each row.
pub fn row_normalize(s: &AffinityMatrix, mode: SelfMode) -> Mat {
    normalize_rows(s.s.clone(), mode)
}

/// Groups identical items, in first-appearance order. Returns the distinct
/// items and, per input position, the index of its group.
pub fn dedup_in_order<T: Clone + Eq + std::hash::Hash>(items: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut index = std::collections::HashMap::new();
    let mut distinct = Vec::new();
    let groups = items
        .iter()
        .map(|it| {
            *index.entry(it.clone()).or_insert_with(|| {
                distinct.push(it.clone());
                distinct.len() - 1
            })
        })
        .collect();
    (distinct, groups)
}

/// Action-to-description target: `T_ig` is the mean of `S_ij` over the
/// samples `j` with description `g` (`groups[j]`, `k` descriptions in
/// total), then rows are normalized with the self pair included.
///
/// Averaging rather than summing keeps the target independent of how
/// often a description occurs in the batch, which matches scoring every
/// batch position as its own candidate.
pub fn collapse_target(s: &AffinityMatrix, groups: &[usize], k: usize) -> Mat {
    let n = s.n();
    assert_eq!(groups.len(), n, "one group per sample");
    let mut count = vec![0usize; k];
    groups.iter().for_each(|&g| count[g] += 1);
    let mut t = Mat::zeros(n, k);
    for i in 0..n {
        for (j, &g) in groups.iter().enumerate() {
            t[(i, g)] += s.s[(i, j)];
        }
        for (g, c) in count.iter().enumerate() {
            if *c > 0 {
                t[(i, g)] /= *c as f64;
            }
        }
    }
    normalize_rows(t, SelfMode::IncludeSelf)
}
