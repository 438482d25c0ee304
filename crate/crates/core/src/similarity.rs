// SPDX-License-Identifier: Apache-2.0

//! Semi-supervised semantic similarity and binned ranking lists.
//!
//! For two instances with feature cosine `s1` and label cosine `s2` (both
//! clamped to `[0, 1]`), the similarity is `s1 * exp(s2 - s1)` when both
//! instances carry labels and `s1` otherwise. The cross-modal matrix is the
//! elementwise mean of the two single-modality matrices.
//!
//! Matrices are dense `n x n`, so memory grows as `O(n^2)`; that is fine for
//! a few thousand training instances.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{FeatureMatrix, LabelMatrix};
use crate::error::{Error, Result};

/// Default number of similarity levels a ranking list is cut into.
pub const DEFAULT_BIN_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    /// Wraps a matrix after checking squareness, bounds and exact symmetry.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, m) = values.dim();
        if n != m || n == 0 {
            return Err(Error::validation(format!(
                "similarity matrix must be square and non-empty, got {n}x{m}"
            )));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "similarity {v} at ({i},{j}) outside [0, 1]"
                )));
            }
            if v != values[[j, i]] {
                return Err(Error::validation(format!(
                    "similarity not symmetric at ({i},{j})"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// `max(0, cos(a, b))`.
pub fn clamped_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation(
            "cosine similarity of a zero vector is undefined",
        ));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(0.0, 1.0))
}

/// The scalar semantic measure for one pair.
#[inline]
pub fn semantic_measure(feature_sim: f64, label_sim: f64, both_labeled: bool) -> f64 {
    if both_labeled {
        feature_sim * (label_sim - feature_sim).exp()
    } else {
        feature_sim
    }
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Builds `S` for one modality from its features and the shared labels.
pub fn semi_supervised_similarity(
    features: &FeatureMatrix,
    labels: &LabelMatrix,
) -> Result<SimilarityMatrix> {
    let n = features.rows();
    if labels.rows() != n {
        return Err(Error::validation(format!(
            "features have {n} rows but labels have {}",
            labels.rows()
        )));
    }
    let x = features.to_f64();
    if let Some(r) = x
        .axis_iter(Axis(0))
        .position(|row| row.iter().all(|&v| v == 0.0))
    {
        return Err(Error::validation(format!("feature row {r} is all zeros")));
    }
    let z = labels.view().mapv(f64::from);
    let labeled: Vec<bool> = (0..n).map(|i| labels.is_labeled(i)).collect();

    let xn = unit_rows(&x);
    let zn = unit_rows(&z);
    let feature_gram = xn.dot(&xn.t());
    let label_gram = zn.dot(&zn.t());

    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let s1 = feature_gram[[i, j]].clamp(0.0, 1.0);
            let s2 = label_gram[[i, j]].clamp(0.0, 1.0);
            let s = semantic_measure(s1, s2, labeled[i] && labeled[j]).clamp(0.0, 1.0);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SimilarityMatrix { values })
}

/// `(S_xx + S_yy) / 2`, shared by both cross-modal directions.
pub fn cross_modal_similarity(
    sxx: &SimilarityMatrix,
    syy: &SimilarityMatrix,
) -> Result<SimilarityMatrix> {
    if sxx.len() != syy.len() {
        return Err(Error::validation(format!(
            "similarity sizes differ: {} vs {}",
            sxx.len(),
            syy.len()
        )));
    }
    let values = (&sxx.values + &syy.values) / 2.0;
    Ok(SimilarityMatrix { values })
}

/// Shared-label counts used as ranking scores by the NS ablation.
pub fn shared_label_counts(labels: &LabelMatrix) -> Array2<f64> {
    let z = labels.view().mapv(f64::from);
    z.dot(&z.t())
}

/// One query's database order by descending similarity, cut into bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingList {
    pub query: usize,
    order: Vec<usize>,
    /// `bin_count + 1` offsets into `order`.
    bin_starts: Vec<usize>,
    bin_of: Vec<usize>,
}

impl RankingList {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn bin_count(&self) -> usize {
        self.bin_starts.len() - 1
    }

    pub fn bin(&self, k: usize) -> &[usize] {
        &self.order[self.bin_starts[k]..self.bin_starts[k + 1]]
    }

    pub fn bin_sizes(&self) -> Vec<usize> {
        self.bin_starts.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Bin index of a database id, `None` for the query itself.
    pub fn bin_of(&self, id: usize) -> Option<usize> {
        match self.bin_of.get(id) {
            Some(&b) if b != usize::MAX => Some(b),
            _ => None,
        }
    }

    pub fn nonempty_bins(&self) -> usize {
        self.bin_sizes().into_iter().filter(|&s| s > 0).count()
    }
}

/// Ranks every id except `query` by descending score (ties by ascending id)
/// and partitions the order into `bin_count` contiguous near-equal bins,
/// the first bins absorbing the remainder.
pub fn rank_by_scores(
    scores: ArrayView2<f64>,
    query: usize,
    bin_count: usize,
) -> Result<RankingList> {
    let n = scores.nrows();
    if bin_count < 2 {
        return Err(Error::validation(format!(
            "bin_count must be at least 2, got {bin_count}"
        )));
    }
    if query >= n {
        return Err(Error::validation(format!(
            "query id {query} out of range for {n} instances"
        )));
    }
    if n <= bin_count {
        return Err(Error::validation(format!(
            "need more than {bin_count} instances to fill {bin_count} bins, got {n}"
        )));
    }
    let row = scores.row(query);
    let mut order: Vec<usize> = (0..n).filter(|&i| i != query).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));

    let len = order.len();
    let base = len / bin_count;
    let rem = len % bin_count;
    let mut bin_starts = Vec::with_capacity(bin_count + 1);
    let mut start = 0;
    bin_starts.push(0);
    for k in 0..bin_count {
        start += base + usize::from(k < rem);
        bin_starts.push(start);
    }

    let mut bin_of = vec![usize::MAX; n];
    for k in 0..bin_count {
        for &id in &order[bin_starts[k]..bin_starts[k + 1]] {
            bin_of[id] = k;
        }
    }
    Ok(RankingList {
        query,
        order,
        bin_starts,
        bin_of,
    })
}

pub fn build_ranking_list(
    s: &SimilarityMatrix,
    query: usize,
    bin_count: usize,
) -> Result<RankingList> {
    rank_by_scores(s.view(), query, bin_count)
}

/// Ranking lists for every instance as query, built in parallel.
pub fn build_all_ranking_lists(
    scores: ArrayView2<f64>,
    bin_count: usize,
) -> Result<Vec<RankingList>> {
    (0..scores.nrows())
        .into_par_iter()
        .map(|q| rank_by_scores(scores, q, bin_count))
        .collect()
}
