// SPDX-License-Identifier: Apache-2.0

//! Relevance, average precision, MAP over Hamming ranking, and the
//! variant ablation harness.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{DatasetBundle, LabelMatrix, Role, Split};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::retrieval::{self, HashCodeMatrix};
use crate::seed;
use crate::trainer::{self, make_variant, TrainConfig, TrainedModel, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    #[serde(rename = "image_to_text")]
    ImageToText,
    #[serde(rename = "text_to_image")]
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::X,
            Direction::TextToImage => Modality::Y,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image_to_text" | "i2t" | "x2y" => Ok(Direction::ImageToText),
            "text_to_image" | "t2i" | "y2x" => Ok(Direction::TextToImage),
            _ => Err(Error::validation(format!("unknown direction {s:?}"))),
        }
    }
}

/// True when both rows share at least one active label.
pub fn is_relevant(labels: &LabelMatrix, q: usize, x: usize) -> Result<bool> {
    relevant_across(labels, q, labels, x)
}

fn relevant_across(a: &LabelMatrix, i: usize, b: &LabelMatrix, j: usize) -> Result<bool> {
    if !a.is_labeled(i) || !b.is_labeled(j) {
        return Err(Error::validation(
            "relevance requested for an unlabeled row",
        ));
    }
    Ok(a.row(i)
        .iter()
        .zip(b.row(j))
        .any(|(&p, &q)| p == 1 && q == 1))
}

/// Mean of precision at each relevant position; 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Per-query AP of Hamming ranking over the full database.
pub fn per_query_ap(
    query_codes: &HashCodeMatrix,
    query_labels: &LabelMatrix,
    database_codes: &HashCodeMatrix,
    database_labels: &LabelMatrix,
) -> Result<Vec<f64>> {
    let (nq, nd) = (query_codes.rows(), database_codes.rows());
    if nq == 0 || nd == 0 {
        return Err(Error::validation("empty query or database set"));
    }
    if query_labels.rows() != nq || database_labels.rows() != nd {
        return Err(Error::validation("codes and labels disagree on row count"));
    }
    if query_codes.bits() != database_codes.bits() {
        return Err(Error::validation("query and database code lengths differ"));
    }
    if query_labels.unlabeled_count() > 0 || database_labels.unlabeled_count() > 0 {
        return Err(Error::validation("evaluation set contains unlabeled rows"));
    }
    (0..nq)
        .into_par_iter()
        .map(|q| {
            let ranked = retrieval::search(database_codes, query_codes.packed_row(q), nd)?;
            let relevance = ranked
                .ids
                .iter()
                .map(|&x| relevant_across(query_labels, q, database_labels, x))
                .collect::<Result<Vec<_>>>()?;
            Ok(average_precision(&relevance))
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub bits: usize,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_map: Option<f64>,
    pub config: TrainConfig,
}

fn encode_pair(
    model: &TrainedModel,
    queries: &Split,
    database: &Split,
    direction: Direction,
) -> Result<(HashCodeMatrix, HashCodeMatrix)> {
    if queries.is_empty() || database.is_empty() {
        return Err(Error::validation("empty query or database set"));
    }
    let qm = direction.query_modality();
    let pick = |s: &Split, m: Modality| match m {
        Modality::X => s.x.clone(),
        Modality::Y => s.y.clone(),
    };
    let q = retrieval::encode_out_of_sample(model, &pick(queries, qm), qm)?;
    let d = retrieval::encode_out_of_sample(model, &pick(database, qm.other()), qm.other())?;
    Ok((q, d))
}

/// Encodes queries with the query-modality encoder and the database with the
/// other one, then averages per-query AP.
pub fn mean_average_precision(
    model: &TrainedModel,
    queries: &Split,
    database: &Split,
    direction: Direction,
) -> Result<EvalReport> {
    let (q, d) = encode_pair(model, queries, database, direction)?;
    let aps = per_query_ap(&q, &queries.labels, &d, &database.labels)?;
    Ok(EvalReport {
        direction,
        bits: q.bits(),
        map: mean(&aps),
        per_query_ap: aps,
        null_map: None,
        config: model.config.clone(),
    })
}

/// MAP of the same codes after independently permuting the query labels and
/// the database labels, which removes any association between codes and
/// labels while keeping the label distribution.
pub fn null_map(
    model: &TrainedModel,
    queries: &Split,
    database: &Split,
    direction: Direction,
    seed: u64,
) -> Result<f64> {
    let (q, d) = encode_pair(model, queries, database, direction)?;
    let mut rng = seed::stream(seed, seed::streams::NULL_SHUFFLE);
    let mut permuted = |labels: &LabelMatrix| {
        let mut order: Vec<usize> = (0..labels.rows()).collect();
        order.shuffle(&mut rng);
        labels.select(&order)
    };
    let ql = permuted(&queries.labels);
    let dl = permuted(&database.labels);
    Ok(mean(&per_query_ap(&q, &ql, &d, &dl)?))
}

/// MAP plus the label-shuffled null for one direction.
pub fn evaluate_with_null(
    model: &TrainedModel,
    queries: &Split,
    database: &Split,
    direction: Direction,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = mean_average_precision(model, queries, database, direction)?;
    report.null_map = Some(null_map(model, queries, database, direction, seed)?);
    Ok(report)
}

/// Evaluates both directions on the bundle's query and database roles.
pub fn evaluate_bundle(
    model: &TrainedModel,
    dataset: &DatasetBundle,
    null_seed: Option<u64>,
) -> Result<Vec<EvalReport>> {
    let queries = dataset.split(Role::Query);
    let database = dataset.split(Role::Database);
    Direction::BOTH
        .iter()
        .map(|&dir| match null_seed {
            Some(s) => evaluate_with_null(model, &queries, &database, dir, s),
            None => mean_average_precision(model, &queries, &database, dir),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<AblationRun>,
    pub mean_map_image_to_text: f64,
    pub std_map_image_to_text: f64,
    pub mean_map_text_to_image: f64,
    pub std_map_text_to_image: f64,
    /// Mean over both directions and all successful runs.
    pub mean_map: f64,
}

impl VariantSummary {
    fn new(variant: Variant, runs: Vec<AblationRun>) -> Self {
        let maps = |dir: Direction| -> Vec<f64> {
            runs.iter()
                .flat_map(|r| {
                    r.reports
                        .iter()
                        .filter(move |e| e.direction == dir)
                        .map(|e| e.map)
                })
                .collect()
        };
        let i2t = maps(Direction::ImageToText);
        let t2i = maps(Direction::TextToImage);
        let both: Vec<f64> = i2t.iter().chain(&t2i).copied().collect();
        VariantSummary {
            variant,
            mean_map_image_to_text: mean(&i2t),
            std_map_image_to_text: std_dev(&i2t),
            mean_map_text_to_image: mean(&t2i),
            std_map_text_to_image: std_dev(&t2i),
            mean_map: mean(&both),
            runs,
        }
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.failure.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

/// All five variants over `seeds`.
pub fn run_ablation(
    dataset: &DatasetBundle,
    base_config: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    run_ablation_variants(dataset, base_config, seeds, &Variant::ALL)
}

/// Trains every variant per seed on the same splits. A failed run is
/// recorded in the report instead of aborting the whole ablation.
pub fn run_ablation_variants(
    dataset: &DatasetBundle,
    base_config: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::validation("ablation needs at least one seed"));
    }
    if variants.is_empty() {
        return Err(Error::validation("ablation needs at least one variant"));
    }
    base_config.validate()?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let config = TrainConfig {
                seed,
                ..make_variant(base_config, variant)
            };
            match trainer::train(dataset, config).and_then(|m| evaluate_bundle(&m, dataset, None)) {
                Ok(reports) => AblationRun {
                    seed,
                    reports,
                    failure: None,
                },
                Err(e) => AblationRun {
                    seed,
                    reports: Vec::new(),
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut runs = runs.into_iter();
    let summaries = variants
        .iter()
        .map(|&v| VariantSummary::new(v, runs.by_ref().take(seeds.len()).collect()))
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        variants: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(rows: &[&[u8]]) -> LabelMatrix {
        let c = rows[0].len();
        let flat: Vec<u8> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabelMatrix::new(Array2::from_shape_vec((rows.len(), c), flat).unwrap()).unwrap()
    }

    #[test]
    fn relevance_examples() {
        let l = labels(&[
            &[1, 0, 0],
            &[1, 0, 0],
            &[0, 1, 0],
            &[1, 1, 0],
            &[0, 1, 1],
            &[0, 0, 0],
        ]);
        assert!(is_relevant(&l, 0, 1).unwrap());
        assert!(!is_relevant(&l, 0, 2).unwrap());
        assert!(is_relevant(&l, 3, 4).unwrap());
        assert!(matches!(is_relevant(&l, 0, 5), Err(Error::Validation(_))));
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 7]), 1.0);
        assert_eq!(average_precision(&[false; 4]), 0.0);
        assert_eq!(mean(&[1.0, 0.5, 0.0]), 0.5);
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval_and_suffix_invariant(rel in proptest::collection::vec(any::<bool>(), 1..40), tail in proptest::collection::vec(Just(false), 0..10)) {
            let ap = average_precision(&rel);
            prop_assert!((0.0..=1.0).contains(&ap));
            let mut longer = rel.clone();
            longer.extend(tail);
            prop_assert_eq!(average_precision(&longer), ap);
            let r = rel.iter().filter(|&&b| b).count();
            let sorted_first = r > 0 && rel[..r].iter().all(|&b| b);
            prop_assert_eq!(ap == 1.0, sorted_first);
        }
    }

    #[test]
    fn single_relevant_item_gives_map_one() {
        let q = HashCodeMatrix::from_signs(array![[1i8, -1], [-1, -1], [1, 1]]).unwrap();
        let d = HashCodeMatrix::from_signs(array![[1i8, 1]]).unwrap();
        let ql = labels(&[&[1, 0], &[0, 1], &[1, 1]]);
        let dl = labels(&[&[1, 1]]);
        assert_eq!(per_query_ap(&q, &ql, &d, &dl).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn empty_or_unlabeled_sets_rejected() {
        let q = HashCodeMatrix::from_signs(array![[1i8, -1]]).unwrap();
        let ql = labels(&[&[1, 0]]);
        let dl = labels(&[&[0, 0]]);
        assert!(matches!(
            per_query_ap(&q, &ql, &q, &dl),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn random_codes_give_class_prior() {
        let mut rng = seed::stream(11, 0);
        let (nq, nd, classes, bits) = (300, 2000, 5, 32);
        let random_codes = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            HashCodeMatrix::from_signs(Array2::from_shape_fn((n, bits), |_| {
                if rng.random::<bool>() {
                    1
                } else {
                    -1
                }
            }))
            .unwrap()
        };
        let one_hot = |n: usize| {
            LabelMatrix::new(Array2::from_shape_fn((n, classes), |(i, k)| {
                u8::from(i % classes == k)
            }))
            .unwrap()
        };
        let q = random_codes(nq, &mut rng);
        let d = random_codes(nd, &mut rng);
        let map = mean(&per_query_ap(&q, &one_hot(nq), &d, &one_hot(nd)).unwrap());
        assert!((map - 0.2).abs() < 0.05, "{map}");
    }

    #[test]
    fn small_ablation_reports_every_variant() {
        let data = generate_synthetic(&SyntheticSpec {
            n_train: 60,
            n_database: 30,
            n_query: 10,
            d_x: 8,
            d_y: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let base = TrainConfig {
            code_length: 8,
            any_code_length: true,
            iterations: 3,
            batch_size: 8,
            hidden_x: vec![8],
            hidden_y: vec![8],
            ..TrainConfig::default()
        };
        let report = run_ablation(&data, &base, &[1, 2]).unwrap();
        assert_eq!(report.variants.len(), 5);
        for s in &report.variants {
            assert_eq!(s.runs.len(), 2);
            assert_eq!(s.failures(), 0);
            assert!(s.runs.iter().all(|r| r.reports.len() == 2));
            assert!((0.0..=1.0).contains(&s.mean_map));
        }
        assert_eq!(report, run_ablation(&data, &base, &[1, 2]).unwrap());

        let broken = TrainConfig {
            learning_rate: 1e200,
            iterations: 20,
            ..base.clone()
        };
        let failed = run_ablation_variants(&data, &broken, &[1], &[Variant::Full]).unwrap();
        assert_eq!(failed.variants[0].failures(), 1);
        assert!(run_ablation(&data, &base, &[]).is_err());
    }
}
