// SPDX-License-Identifier: Apache-2.0

//! Weighted cross-modal triplet ranking loss with quantization penalty.
//!
//! For a triplet `(q, i, j)` where `i` ranks above `j` for query `q`, four
//! margins compare distances inside and across modalities:
//!
//! ```text
//! xx = d(Fq, Fi) - d(Fq, Fj)        yy = d(Gq, Gi) - d(Gq, Gj)
//! xy = d(Fq, Fi) - d(Gq, Gj)        yx = d(Gq, Gi) - d(Fq, Fj)
//! ```
//!
//! and each contributes `w * max(0, margin)` with `w = 1 - s_ij` taken from
//! the matching similarity matrix. The quantization term adds
//! `lambda/2 * (|B - F|^2 + |B - G|^2)` over the rows the batch touches.
//!
//! Distances use the Hamming identity `d(a, b) = (c - <a, b>) / 2` with the
//! inner product linearized around the sign codes:
//!
//! ```text
//! <a, b> ~ <a, h(b)> + <h(a), b> - <h(a), h(b)>
//! ```
//!
//! On `±1` inputs this is the exact Hamming distance, and away from sign
//! changes its partial derivative with respect to one code is the sign code
//! of the other, so the gradients below only ever involve `h(F)` and `h(G)`.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Zip};

use crate::error::{Error, Result};
use crate::retrieval::HashCodeMatrix;
use crate::similarity::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub query: usize,
    pub pos: usize,
    pub neg: usize,
}

impl Triplet {
    pub fn members(&self) -> [usize; 3] {
        [self.query, self.pos, self.neg]
    }
}

/// The three similarity matrices of the training set.
#[derive(Debug, Clone)]
pub struct Similarities {
    pub sxx: SimilarityMatrix,
    pub syy: SimilarityMatrix,
    pub sxy: SimilarityMatrix,
}

/// Per-triplet weights of the four margin terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
    pub yx: f64,
}

impl TermWeights {
    pub const UNIFORM: TermWeights = TermWeights {
        xx: 1.0,
        yy: 1.0,
        xy: 1.0,
        yx: 1.0,
    };

    /// `1 - s_ij` for the positive/negative pair `(i, j)`.
    pub fn from_similarities(sims: &Similarities, i: usize, j: usize) -> Self {
        let cross = 1.0 - sims.sxy.get(i, j);
        TermWeights {
            xx: 1.0 - sims.sxx.get(i, j),
            yy: 1.0 - sims.syy.get(i, j),
            xy: cross,
            yx: cross,
        }
    }
}

/// Triplets with their weights; ids index rows of the code matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub weights: Vec<TermWeights>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Distinct rows referenced by the batch, ascending.
    pub fn rows(&self) -> Vec<usize> {
        self.triplets
            .iter()
            .flat_map(Triplet::members)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// The four relaxed-distance differences of one triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
    pub yx: f64,
}

impl Margins {
    pub fn as_array(&self) -> [f64; 4] {
        [self.xx, self.yy, self.xy, self.yx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub ranking_term: f64,
    pub quantization_term: f64,
    pub total: f64,
    pub active_triplet_count: usize,
}

impl LossReport {
    pub fn new(
        ranking_term: f64,
        quantization_term: f64,
        lambda: f64,
        active_triplet_count: usize,
    ) -> Self {
        LossReport {
            ranking_term,
            quantization_term,
            total: ranking_term + 0.5 * lambda * quantization_term,
            active_triplet_count,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ranking_term.is_finite()
            && self.quantization_term.is_finite()
            && self.total.is_finite()
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub lambda: f64,
    /// Additive hinge margin, zero unless experimenting.
    pub margin: f64,
}

impl LossParams {
    pub fn new(lambda: f64) -> Self {
        LossParams {
            lambda,
            margin: 0.0,
        }
    }
}

/// Relaxed Hamming distance `(c - u.v) / 2`.
pub fn relaxed_hamming(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "code lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok((u.len() as f64 - u.dot(&v)) / 2.0)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn signs(m: ArrayView2<f64>) -> Array2<f64> {
    m.mapv(sign)
}

/// `<a, h(b)> + <h(a), b> - <h(a), h(b)>`.
#[inline]
fn linearized_dot(
    a: ArrayView1<f64>,
    ha: ArrayView1<f64>,
    b: ArrayView1<f64>,
    hb: ArrayView1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * hb[k] + ha[k] * b[k] - ha[k] * hb[k];
    }
    acc
}

struct SignedCodes<'a> {
    f: ArrayView2<'a, f64>,
    g: ArrayView2<'a, f64>,
    hf: Array2<f64>,
    hg: Array2<f64>,
}

impl<'a> SignedCodes<'a> {
    fn new(f: ArrayView2<'a, f64>, g: ArrayView2<'a, f64>) -> Self {
        SignedCodes {
            hf: signs(f),
            hg: signs(g),
            f,
            g,
        }
    }

    fn dot_f(&self, a: usize, b: usize) -> f64 {
        linearized_dot(self.f.row(a), self.hf.row(a), self.f.row(b), self.hf.row(b))
    }

    fn dot_g(&self, a: usize, b: usize) -> f64 {
        linearized_dot(self.g.row(a), self.hg.row(a), self.g.row(b), self.hg.row(b))
    }

    fn margins(&self, t: &Triplet) -> Margins {
        let (q, i, j) = (t.query, t.pos, t.neg);
        let fqi = self.dot_f(q, i);
        let fqj = self.dot_f(q, j);
        let gqi = self.dot_g(q, i);
        let gqj = self.dot_g(q, j);
        // d(a,b) - d(c,d) = (<c,d> - <a,b>) / 2
        Margins {
            xx: (fqj - fqi) / 2.0,
            yy: (gqj - gqi) / 2.0,
            xy: (gqj - fqi) / 2.0,
            yx: (fqj - gqi) / 2.0,
        }
    }
}

fn check_shapes(
    f: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    b: Option<&ArrayView2<f64>>,
) -> Result<()> {
    if f.dim() != g.dim() {
        return Err(Error::validation(format!(
            "F is {:?} but G is {:?}",
            f.dim(),
            g.dim()
        )));
    }
    if let Some(b) = b {
        if b.dim() != f.dim() {
            return Err(Error::validation(format!(
                "B is {:?} but F is {:?}",
                b.dim(),
                f.dim()
            )));
        }
        if b.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::validation("B entries must be ±1"));
        }
    }
    Ok(())
}

fn check_batch(batch: &TripletBatch, rows: usize) -> Result<()> {
    if batch.weights.len() != batch.triplets.len() {
        return Err(Error::validation(format!(
            "{} triplets but {} weight sets",
            batch.triplets.len(),
            batch.weights.len()
        )));
    }
    for t in &batch.triplets {
        if let Some(&bad) = t.members().iter().find(|&&id| id >= rows) {
            return Err(Error::validation(format!(
                "triplet id {bad} out of range for {rows} rows"
            )));
        }
    }
    Ok(())
}

/// The four margins of one triplet.
pub fn triplet_margins(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    triplet: &Triplet,
) -> Result<Margins> {
    check_shapes(&f, &g, None)?;
    if let Some(&bad) = triplet.members().iter().find(|&&id| id >= f.nrows()) {
        return Err(Error::validation(format!(
            "triplet id {bad} out of range for {} rows",
            f.nrows()
        )));
    }
    // Only the three member rows matter, so sign just those.
    let ids = triplet.members();
    let fs = f.select(ndarray::Axis(0), &ids);
    let gs = g.select(ndarray::Axis(0), &ids);
    let local = Triplet {
        query: 0,
        pos: 1,
        neg: 2,
    };
    Ok(SignedCodes::new(fs.view(), gs.view()).margins(&local))
}

fn quantization_over(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    b: ArrayView2<f64>,
    rows: &[usize],
) -> f64 {
    let mut acc = 0.0;
    for &r in rows {
        for k in 0..f.ncols() {
            acc += (b[[r, k]] - f[[r, k]]).powi(2) + (b[[r, k]] - g[[r, k]]).powi(2);
        }
    }
    acc
}

/// `|B - F|^2 + |B - G|^2` over every row.
pub fn full_quantization(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    b: ArrayView2<f64>,
) -> Result<f64> {
    check_shapes(&f, &g, Some(&b))?;
    let rows: Vec<usize> = (0..f.nrows()).collect();
    Ok(quantization_over(f, g, b, &rows))
}

/// Ranking and quantization terms of a batch; quantization covers only the
/// rows the batch references.
pub fn total_loss(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    b: ArrayView2<f64>,
    batch: &TripletBatch,
    params: LossParams,
) -> Result<LossReport> {
    check_shapes(&f, &g, Some(&b))?;
    check_batch(batch, f.nrows())?;
    if params.lambda.is_nan() || params.lambda < 0.0 {
        return Err(Error::validation(format!(
            "lambda must be non-negative, got {}",
            params.lambda
        )));
    }
    let codes = SignedCodes::new(f, g);
    let mut ranking = 0.0;
    let mut active = 0;
    for (t, w) in batch.triplets.iter().zip(&batch.weights) {
        let m = codes.margins(t);
        let mu = params.margin;
        let hinge = |v: f64| (v + mu).max(0.0);
        let contribution =
            w.xx * hinge(m.xx) + w.yy * hinge(m.yy) + w.yx * hinge(m.yx) + w.xy * hinge(m.xy);
        if m.as_array().iter().any(|&v| v + mu > 0.0) {
            active += 1;
        }
        ranking += contribution;
    }
    let quantization = quantization_over(f, g, b, &batch.rows());
    Ok(LossReport::new(
        ranking,
        quantization,
        params.lambda,
        active,
    ))
}

#[inline]
fn axpy(mut dst: ArrayViewMut1<f64>, alpha: f64, src: ArrayView1<f64>) {
    if alpha != 0.0 {
        Zip::from(&mut dst)
            .and(&src)
            .for_each(|d, &s| *d += alpha * s);
    }
}

/// Gradients of [`total_loss`] with respect to `F` and `G`.
///
/// For the image side, with `h = sign` and every term gated by its hinge:
///
/// ```text
/// dL/dFq = 1/2 [ w_xx (h(Fj) - h(Fi)) - w_xy h(Fi) + w_yx h(Fj) ] + lambda (Fq - Bq)
/// dL/dFi = -1/2 [ w_xx + w_xy ] h(Fq)                            + lambda (Fi - Bi)
/// dL/dFj =  1/2 [ w_xx + w_yx ] h(Fq)                            + lambda (Fj - Bj)
/// ```
///
/// and symmetrically for the text side. Contributions from an instance that
/// appears in several triplets accumulate; the quantization part is added
/// once per distinct batch row.
pub fn grad_wrt_codes(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    b: ArrayView2<f64>,
    batch: &TripletBatch,
    params: LossParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_shapes(&f, &g, Some(&b))?;
    check_batch(batch, f.nrows())?;
    let codes = SignedCodes::new(f, g);
    let mut df = Array2::<f64>::zeros(f.dim());
    let mut dg = Array2::<f64>::zeros(g.dim());
    let mu = params.margin;
    for (t, w) in batch.triplets.iter().zip(&batch.weights) {
        let (q, i, j) = (t.query, t.pos, t.neg);
        let m = codes.margins(t);
        let on = |v: f64, weight: f64| if v + mu > 0.0 { 0.5 * weight } else { 0.0 };
        let (xx, yy, xy, yx) = (
            on(m.xx, w.xx),
            on(m.yy, w.yy),
            on(m.xy, w.xy),
            on(m.yx, w.yx),
        );
        let (hf, hg) = (&codes.hf, &codes.hg);

        // xx: d(Fq,Fi) - d(Fq,Fj)
        axpy(df.row_mut(q), -xx, hf.row(i));
        axpy(df.row_mut(q), xx, hf.row(j));
        axpy(df.row_mut(i), -xx, hf.row(q));
        axpy(df.row_mut(j), xx, hf.row(q));
        // yy: d(Gq,Gi) - d(Gq,Gj)
        axpy(dg.row_mut(q), -yy, hg.row(i));
        axpy(dg.row_mut(q), yy, hg.row(j));
        axpy(dg.row_mut(i), -yy, hg.row(q));
        axpy(dg.row_mut(j), yy, hg.row(q));
        // xy: d(Fq,Fi) - d(Gq,Gj)
        axpy(df.row_mut(q), -xy, hf.row(i));
        axpy(df.row_mut(i), -xy, hf.row(q));
        axpy(dg.row_mut(q), xy, hg.row(j));
        axpy(dg.row_mut(j), xy, hg.row(q));
        // yx: d(Gq,Gi) - d(Fq,Fj)
        axpy(dg.row_mut(q), -yx, hg.row(i));
        axpy(dg.row_mut(i), -yx, hg.row(q));
        axpy(df.row_mut(q), yx, hf.row(j));
        axpy(df.row_mut(j), yx, hf.row(q));
    }
    if params.lambda != 0.0 {
        for r in batch.rows() {
            for k in 0..f.ncols() {
                df[[r, k]] += params.lambda * (f[[r, k]] - b[[r, k]]);
                dg[[r, k]] += params.lambda * (g[[r, k]] - b[[r, k]]);
            }
        }
    }
    Ok((df, dg))
}

/// Closed-form code update `B = sign(lambda (F + G))`, `sign(0) = +1`.
pub fn update_codes_b(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    lambda: f64,
) -> Result<HashCodeMatrix> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::validation(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    check_shapes(&f, &g, None)?;
    let u = (&f + &g) * lambda;
    Ok(HashCodeMatrix::from_real(u.view()))
}
