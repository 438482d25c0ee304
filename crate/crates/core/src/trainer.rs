// SPDX-License-Identifier: Apache-2.0

//! Alternating optimization of the two encoders and the shared codes `B`.
//!
//! Each iteration samples a mini-batch of triplets from binned ranking
//! lists, takes one SGD step on the image encoder with the text encoder and
//! `B` fixed, then one on the text encoder with the image encoder and `B`
//! fixed, and finally recomputes `B = sign(lambda (F + G))` over the whole
//! training set.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetBundle, Role};
use crate::encoder::{Encoder, Modality};
use crate::error::{Error, Result};
use crate::objective::{
    self, LossParams, LossReport, Similarities, TermWeights, Triplet, TripletBatch,
};
use crate::retrieval::HashCodeMatrix;
use crate::seed::{self, streams};
use crate::similarity::{self, RankingList};

pub const STANDARD_CODE_LENGTHS: [usize; 4] = [16, 32, 64, 128];

/// Relative loss change under which an iteration counts as stalled.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-6;
/// Consecutive stalled iterations that stop training.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Variant {
    #[serde(rename = "FULL")]
    Full,
    /// Unweighted triplets.
    #[serde(rename = "NW")]
    Nw,
    /// Ranking lists from shared-label counts.
    #[serde(rename = "NS")]
    Ns,
    /// A single linear layer on the raw features.
    #[serde(rename = "ND")]
    Nd,
    /// Encoders trained on the ranking term alone, codes fitted afterwards.
    #[serde(rename = "NJ")]
    Nj,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Nw,
        Variant::Ns,
        Variant::Nd,
        Variant::Nj,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "FULL",
            Variant::Nw => "NW",
            Variant::Ns => "NS",
            Variant::Nd => "ND",
            Variant::Nj => "NJ",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(Variant::Full),
            "NW" => Ok(Variant::Nw),
            "NS" => Ok(Variant::Ns),
            "ND" => Ok(Variant::Nd),
            "NJ" => Ok(Variant::Nj),
            _ => Err(Error::validation(format!("unknown variant {s:?}"))),
        }
    }
}

/// Which similarity matrix orders the ranking lists used for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingSource {
    Xx,
    Yy,
    Xy,
}

impl FromStr for RankingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xx" => Ok(RankingSource::Xx),
            "yy" => Ok(RankingSource::Yy),
            "xy" | "yx" => Ok(RankingSource::Xy),
            _ => Err(Error::validation(format!("unknown ranking source {s:?}"))),
        }
    }
}

impl fmt::Display for RankingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingSource::Xx => "xx",
            RankingSource::Yy => "yy",
            RankingSource::Xy => "xy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingScores {
    SemiSupervised,
    SharedLabels,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub code_length: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bin_count: usize,
    pub seed: u64,
    pub dropout: Option<f64>,
    pub hidden_x: Vec<usize>,
    pub hidden_y: Vec<usize>,
    pub margin: f64,
    pub ranking_source: RankingSource,
    pub variant: Variant,
    pub weighted: bool,
    pub ranking_scores: RankingScores,
    /// `false` trains the encoders on the ranking term only and fits `B`
    /// once at the end.
    pub joint: bool,
    /// Accept code lengths outside 16/32/64/128.
    pub any_code_length: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            code_length: 16,
            lambda: 1.0,
            iterations: 500,
            batch_size: 128,
            learning_rate: 0.01,
            bin_count: similarity::DEFAULT_BIN_COUNT,
            seed: 0,
            dropout: None,
            hidden_x: vec![256],
            hidden_y: vec![256],
            margin: 0.0,
            ranking_source: RankingSource::Xy,
            variant: Variant::Full,
            weighted: true,
            ranking_scores: RankingScores::SemiSupervised,
            joint: true,
            any_code_length: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_length == 0 {
            return Err(Error::validation("code length must be at least 1"));
        }
        if !self.any_code_length && !STANDARD_CODE_LENGTHS.contains(&self.code_length) {
            return Err(Error::validation(format!(
                "code length {} not in {STANDARD_CODE_LENGTHS:?}",
                self.code_length
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.bin_count < 3 {
            return Err(Error::validation(format!(
                "a triplet needs three distinct bins, got bin_count {}",
                self.bin_count
            )));
        }
        if let Some(rate) = self.dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::validation(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::validation("margin must be finite"));
        }
        if self.hidden_x.contains(&0) || self.hidden_y.contains(&0) {
            return Err(Error::validation("hidden layer widths must be at least 1"));
        }
        Ok(())
    }

    fn layer_dims(&self, input: usize, modality: Modality) -> Vec<usize> {
        let hidden = match modality {
            Modality::X => &self.hidden_x,
            Modality::Y => &self.hidden_y,
        };
        let mut dims = vec![input];
        dims.extend(hidden);
        dims.push(self.code_length);
        dims
    }
}

/// Configuration of an ablation variant derived from a base configuration.
pub fn make_variant(config: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut out = config.clone();
    out.variant = variant;
    match variant {
        Variant::Full => {}
        Variant::Nw => out.weighted = false,
        Variant::Ns => out.ranking_scores = RankingScores::SharedLabels,
        Variant::Nd => {
            out.hidden_x.clear();
            out.hidden_y.clear();
        }
        Variant::Nj => out.joint = false,
    }
    out
}

/// A sampled triplet with the three bins it was drawn from, ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledTriplet {
    pub triplet: Triplet,
    pub bins: [usize; 3],
}

/// Draws `batch_size` triplets: a uniform query, three distinct bins of its
/// ranking list, and one uniform point per bin. The point from the most
/// similar bin is the positive and the one from the least similar bin the
/// negative.
pub fn sample_triplet_batch<R: Rng + ?Sized>(
    lists: &[RankingList],
    rng: &mut R,
    batch_size: usize,
) -> Result<Vec<SampledTriplet>> {
    if lists.is_empty() {
        return Err(Error::Sampling("no ranking lists to sample from".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let list = &lists[rng.random_range(0..lists.len())];
        let nonempty: Vec<usize> = (0..list.bin_count())
            .filter(|&k| !list.bin(k).is_empty())
            .collect();
        if nonempty.len() < 3 {
            return Err(Error::Sampling(format!(
                "ranking list of query {} has {} non-empty bins, need 3",
                list.query,
                nonempty.len()
            )));
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, nonempty.len(), 3)
            .into_iter()
            .map(|k| nonempty[k])
            .collect();
        picked.sort_unstable();
        let mut draw = |k: usize| {
            let bin = list.bin(k);
            bin[rng.random_range(0..bin.len())]
        };
        let pos = draw(picked[0]);
        let _middle = draw(picked[1]);
        let neg = draw(picked[2]);
        out.push(SampledTriplet {
            triplet: Triplet {
                query: list.query,
                pos,
                neg,
            },
            bins: [picked[0], picked[1], picked[2]],
        });
    }
    Ok(out)
}

/// Result of training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder_x: Encoder,
    pub encoder_y: Encoder,
    pub codes_b: HashCodeMatrix,
    pub config: TrainConfig,
    /// Loss on the fixed monitoring batch before the first iteration.
    pub initial_loss: LossReport,
    /// Loss on the monitoring batch after each iteration.
    pub log: Vec<LossReport>,
    pub converged_at: Option<usize>,
}

impl TrainedModel {
    pub fn encoder(&self, modality: Modality) -> &Encoder {
        match modality {
            Modality::X => &self.encoder_x,
            Modality::Y => &self.encoder_y,
        }
    }

    pub fn final_loss(&self) -> LossReport {
        self.log.last().copied().unwrap_or(self.initial_loss)
    }

    /// Writes `encoder_x.rdmp`, `encoder_y.rdmp`, `codes.rdmb` and
    /// `manifest.txt` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder_x
            .save(&dir.join("encoder_x.rdmp"), Modality::X)?;
        self.encoder_y
            .save(&dir.join("encoder_y.rdmp"), Modality::Y)?;
        self.codes_b.save_packed(&dir.join("codes.rdmb"))?;
        let manifest = dir.join("manifest.txt");
        fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))
    }

    fn manifest(&self) -> String {
        let c = &self.config;
        let dims = |e: &Encoder| {
            e.layer_dims()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let hidden = |h: &[usize]| {
            h.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "code_length={}\nlayers_x={}\nlayers_y={}\nhidden_x={}\nhidden_y={}\nseed={}\nlambda={}\niterations={}\n\
             batch={}\nlr={}\nbins={}\nvariant={}\nmargin={}\nranking_source={}\ndropout={}\niterations_run={}\n",
            c.code_length,
            dims(&self.encoder_x),
            dims(&self.encoder_y),
            hidden(&c.hidden_x),
            hidden(&c.hidden_y),
            c.seed,
            c.lambda,
            c.iterations,
            c.batch_size,
            c.learning_rate,
            c.bin_count,
            c.variant,
            c.margin,
            c.ranking_source,
            c.dropout.map_or_else(|| "off".to_string(), |d| d.to_string()),
            self.log.len(),
        )
    }

    /// Reloads a checkpoint. Parameters come back at `f32` precision and the
    /// loss history is not restored.
    pub fn load_checkpoint(dir: &Path) -> Result<TrainedModel> {
        let (mx, encoder_x) = Encoder::load(&dir.join("encoder_x.rdmp"))?;
        let (my, encoder_y) = Encoder::load(&dir.join("encoder_y.rdmp"))?;
        if mx != Modality::X || my != Modality::Y {
            return Err(Error::validation(
                "checkpoint encoders carry the wrong modality tags",
            ));
        }
        let codes_b = HashCodeMatrix::load_packed(&dir.join("codes.rdmb"))?;
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let kv: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::validation(format!("checkpoint manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::validation(format!("bad manifest value for {k}")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::validation(format!("bad manifest value for {k}")))
                })
                .collect()
        };
        let config = TrainConfig {
            code_length: num("code_length")? as usize,
            lambda: num("lambda")?,
            iterations: num("iterations")? as usize,
            batch_size: num("batch")? as usize,
            learning_rate: num("lr")?,
            bin_count: num("bins")? as usize,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::validation("bad manifest seed"))?,
            dropout: match get("dropout")? {
                "off" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| Error::validation("bad manifest dropout"))?,
                ),
            },
            hidden_x: list("hidden_x")?,
            hidden_y: list("hidden_y")?,
            margin: num("margin")?,
            ranking_source: get("ranking_source")?.parse()?,
            any_code_length: true,
            ..make_variant(&TrainConfig::default(), get("variant")?.parse()?)
        };
        let empty = LossReport::new(0.0, 0.0, config.lambda, 0);
        Ok(TrainedModel {
            encoder_x,
            encoder_y,
            codes_b,
            config,
            initial_loss: empty,
            log: Vec::new(),
            converged_at: None,
        })
    }
}

/// Training state for one run.
pub struct Trainer {
    config: TrainConfig,
    x: Array2<f64>,
    y: Array2<f64>,
    sims: Similarities,
    lists: Vec<RankingList>,
    encoder_x: Encoder,
    encoder_y: Encoder,
    codes: HashCodeMatrix,
    rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    monitor: TripletBatch,
    initial_loss: LossReport,
    log: Vec<LossReport>,
    stalled: usize,
    converged_at: Option<usize>,
}

impl Trainer {
    pub fn new(dataset: &DatasetBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let train = dataset.split(Role::Train);
        let n = train.len();
        if n < 3 * config.bin_count {
            return Err(Error::validation(format!(
                "{n} training instances, need at least {} for {} bins",
                3 * config.bin_count,
                config.bin_count
            )));
        }

        let sxx = similarity::semi_supervised_similarity(&train.x, &train.labels)?;
        let syy = similarity::semi_supervised_similarity(&train.y, &train.labels)?;
        let sxy = similarity::cross_modal_similarity(&sxx, &syy)?;
        let sims = Similarities { sxx, syy, sxy };

        let lists = match config.ranking_scores {
            RankingScores::SharedLabels => {
                let counts = similarity::shared_label_counts(&train.labels);
                similarity::build_all_ranking_lists(counts.view(), config.bin_count)?
            }
            RankingScores::SemiSupervised => {
                let source = match config.ranking_source {
                    RankingSource::Xx => &sims.sxx,
                    RankingSource::Yy => &sims.syy,
                    RankingSource::Xy => &sims.sxy,
                };
                similarity::build_all_ranking_lists(source.view(), config.bin_count)?
            }
        };

        let encoder_x = Encoder::init(
            &config.layer_dims(train.x.cols(), Modality::X),
            seed::stream(config.seed, streams::ENCODER_X).random(),
        )?;
        let encoder_y = Encoder::init(
            &config.layer_dims(train.y.cols(), Modality::Y),
            seed::stream(config.seed, streams::ENCODER_Y).random(),
        )?;

        let x = train.x.to_f64();
        let y = train.y.to_f64();
        let f = encoder_x.predict(x.view())?;
        let g = encoder_y.predict(y.view())?;
        let codes = objective::update_codes_b(f.view(), g.view(), config.lambda)?;

        let mut monitor_rng = seed::stream(config.seed, streams::MONITOR);
        let sampled = sample_triplet_batch(&lists, &mut monitor_rng, config.batch_size)?;

        let mut trainer = Trainer {
            rng: seed::stream(config.seed, streams::TRIPLETS),
            dropout_rng: seed::stream(config.seed, streams::DROPOUT),
            monitor: TripletBatch::default(),
            initial_loss: LossReport::new(0.0, 0.0, config.lambda, 0),
            log: Vec::with_capacity(config.iterations),
            stalled: 0,
            converged_at: None,
            config,
            x,
            y,
            sims,
            lists,
            encoder_x,
            encoder_y,
            codes,
        };
        trainer.monitor = trainer.weigh(sampled.iter().map(|s| s.triplet).collect());
        trainer.initial_loss = trainer.monitor_loss(&f, &g)?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder_x(&self) -> &Encoder {
        &self.encoder_x
    }

    pub fn encoder_y(&self) -> &Encoder {
        &self.encoder_y
    }

    pub fn codes(&self) -> &HashCodeMatrix {
        &self.codes
    }

    pub fn similarities(&self) -> &Similarities {
        &self.sims
    }

    pub fn ranking_lists(&self) -> &[RankingList] {
        &self.lists
    }

    pub fn initial_loss(&self) -> LossReport {
        self.initial_loss
    }

    pub fn log(&self) -> &[LossReport] {
        &self.log
    }

    pub fn iteration(&self) -> usize {
        self.log.len()
    }

    pub fn converged_at(&self) -> Option<usize> {
        self.converged_at
    }

    fn effective_lambda(&self) -> f64 {
        if self.config.joint {
            self.config.lambda
        } else {
            0.0
        }
    }

    fn loss_params(&self) -> LossParams {
        LossParams {
            lambda: self.effective_lambda(),
            margin: self.config.margin,
        }
    }

    fn weigh(&self, triplets: Vec<Triplet>) -> TripletBatch {
        let weights = triplets
            .iter()
            .map(|t| {
                if self.config.weighted {
                    TermWeights::from_similarities(&self.sims, t.pos, t.neg)
                } else {
                    TermWeights::UNIFORM
                }
            })
            .collect();
        TripletBatch { triplets, weights }
    }

    /// Samples the next mini-batch; ids index training instances.
    pub fn sample_batch(&mut self) -> Result<TripletBatch> {
        let sampled = sample_triplet_batch(&self.lists, &mut self.rng, self.config.batch_size)?;
        Ok(self.weigh(sampled.into_iter().map(|s| s.triplet).collect()))
    }

    /// Full-training-set continuous codes `(F, G)`.
    pub fn full_codes(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((
            self.encoder_x.predict(self.x.view())?,
            self.encoder_y.predict(self.y.view())?,
        ))
    }

    /// Gathers the batch rows and rewrites triplet ids to local row indices.
    fn localize(&self, batch: &TripletBatch) -> (Vec<usize>, TripletBatch) {
        let rows = batch.rows();
        let index: HashMap<usize, usize> = rows.iter().enumerate().map(|(k, &r)| (r, k)).collect();
        let triplets = batch
            .triplets
            .iter()
            .map(|t| Triplet {
                query: index[&t.query],
                pos: index[&t.pos],
                neg: index[&t.neg],
            })
            .collect();
        (
            rows,
            TripletBatch {
                triplets,
                weights: batch.weights.clone(),
            },
        )
    }

    fn phase(&mut self, batch: &TripletBatch, modality: Modality) -> Result<()> {
        let iteration = self.iteration() + 1;
        let (rows, local) = self.localize(batch);
        let xb = self.x.select(Axis(0), &rows);
        let yb = self.y.select(Axis(0), &rows);
        let bb = self.codes.select(&rows).to_f64();
        let dropout = self.config.dropout.filter(|&r| r > 0.0);

        let (own_input, other_input, own, other) = match modality {
            Modality::X => (&xb, &yb, &self.encoder_x, &self.encoder_y),
            Modality::Y => (&yb, &xb, &self.encoder_y, &self.encoder_x),
        };
        let (own_codes, trace) = match dropout {
            Some(rate) => {
                own.forward_with_dropout(own_input.view(), rate, &mut self.dropout_rng)?
            }
            None => own.forward(own_input.view())?,
        };
        let other_codes = other.predict(other_input.view())?;
        let (f, g) = match modality {
            Modality::X => (&own_codes, &other_codes),
            Modality::Y => (&other_codes, &own_codes),
        };
        let (df, dg) =
            objective::grad_wrt_codes(f.view(), g.view(), bb.view(), &local, self.loss_params())?;
        // Steps follow the batch-mean loss.
        let scale = 1.0 / batch.len().max(1) as f64;
        let grad = match modality {
            Modality::X => df * scale,
            Modality::Y => dg * scale,
        };
        let grads = own.backward(&trace, grad.view())?;
        let lr = self.config.learning_rate;
        let target = match modality {
            Modality::X => &mut self.encoder_x,
            Modality::Y => &mut self.encoder_y,
        };
        target.sgd_step(&grads, lr).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical {
                iteration,
                message: format!("{message} in encoder {modality}"),
            },
            other => other,
        })
    }

    /// One SGD step on the image encoder; the text encoder and `B` stay fixed.
    pub fn update_x(&mut self, batch: &TripletBatch) -> Result<()> {
        self.phase(batch, Modality::X)
    }

    /// One SGD step on the text encoder; the image encoder and `B` stay fixed.
    pub fn update_y(&mut self, batch: &TripletBatch) -> Result<()> {
        self.phase(batch, Modality::Y)
    }

    /// `B = sign(lambda (F + G))` over all training rows; returns `(F, G)`.
    pub fn update_codes(&mut self) -> Result<(Array2<f64>, Array2<f64>)> {
        let (f, g) = self.full_codes()?;
        self.codes = objective::update_codes_b(f.view(), g.view(), self.config.lambda)?;
        Ok((f, g))
    }

    fn monitor_loss(&self, f: &Array2<f64>, g: &Array2<f64>) -> Result<LossReport> {
        let b = self.codes.to_f64();
        objective::total_loss(
            f.view(),
            g.view(),
            b.view(),
            &self.monitor,
            self.loss_params(),
        )
    }

    /// One full iteration. Returns the monitoring-batch loss afterwards.
    pub fn step(&mut self) -> Result<LossReport> {
        let iteration = self.iteration() + 1;
        let batch = self.sample_batch()?;
        self.update_x(&batch)?;
        self.update_y(&batch)?;
        let (f, g) = if self.config.joint {
            self.update_codes()?
        } else {
            self.full_codes()?
        };
        let report = self.monitor_loss(&f, &g)?;
        if !report.is_finite() {
            return Err(Error::Numerical {
                iteration,
                message: format!("non-finite loss {report:?}"),
            });
        }
        let previous = self.log.last().map_or(self.initial_loss.total, |r| r.total);
        let change = (previous - report.total).abs() / previous.abs().max(f64::MIN_POSITIVE);
        self.stalled = if change < CONVERGENCE_TOLERANCE {
            self.stalled + 1
        } else {
            0
        };
        if self.stalled >= CONVERGENCE_WINDOW && self.converged_at.is_none() {
            self.converged_at = Some(iteration);
        }
        self.log.push(report);
        Ok(report)
    }

    pub fn is_done(&self) -> bool {
        self.converged_at.is_some() || self.iteration() >= self.config.iterations
    }

    /// Final code update and hand-off.
    pub fn finish(mut self) -> Result<TrainedModel> {
        self.update_codes()?;
        Ok(TrainedModel {
            encoder_x: self.encoder_x,
            encoder_y: self.encoder_y,
            codes_b: self.codes,
            config: self.config,
            initial_loss: self.initial_loss,
            log: self.log,
            converged_at: self.converged_at,
        })
    }
}

/// Runs training to completion.
pub fn train(dataset: &DatasetBundle, config: TrainConfig) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(dataset, config)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    trainer.finish()
}

/// Writes one JSON object per iteration.
pub fn write_train_log(path: &Path, log: &[LossReport]) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        iteration: usize,
        #[serde(flatten)]
        report: &'a LossReport,
    }
    let mut out = String::new();
    for (k, report) in log.iter().enumerate() {
        out.push_str(
            &serde_json::to_string(&Line {
                iteration: k + 1,
                report,
            })
            .expect("plain struct"),
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use ndarray::Array2;

    fn small_data() -> DatasetBundle {
        generate_synthetic(&SyntheticSpec {
            n_train: 60,
            n_database: 20,
            n_query: 10,
            d_x: 12,
            d_y: 10,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            code_length: 8,
            any_code_length: true,
            iterations: 5,
            batch_size: 16,
            hidden_x: vec![16],
            hidden_y: vec![16],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn list_of(n: usize, bins: usize) -> RankingList {
        let scores = Array2::<f64>::zeros((n, n));
        similarity::rank_by_scores(scores.view(), 0, bins).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                code_length: 12,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                bin_count: 2,
                ..TrainConfig::default()
            },
            TrainConfig {
                dropout: Some(1.0),
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Validation(_))), "{c:?}");
        }
        assert!(TrainConfig {
            code_length: 12,
            any_code_length: true,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn variants() {
        let base = TrainConfig::default();
        assert_eq!(make_variant(&base, Variant::Full), base);
        assert!(!make_variant(&base, Variant::Nw).weighted);
        assert_eq!(
            make_variant(&base, Variant::Ns).ranking_scores,
            RankingScores::SharedLabels
        );
        assert!(make_variant(&base, Variant::Nd).hidden_x.is_empty());
        assert!(!make_variant(&base, Variant::Nj).joint);
        assert!("XX".parse::<Variant>().is_err());
        assert_eq!("nw".parse::<Variant>().unwrap(), Variant::Nw);
    }

    #[test]
    fn sampled_triplets_span_distinct_ordered_bins() {
        let list = list_of(11, 5);
        let mut rng = seed::stream(1, 0);
        let batch = sample_triplet_batch(std::slice::from_ref(&list), &mut rng, 200).unwrap();
        for s in &batch {
            assert!(s.bins[0] < s.bins[1] && s.bins[1] < s.bins[2]);
            assert_eq!(list.bin_of(s.triplet.pos), Some(s.bins[0]));
            assert_eq!(list.bin_of(s.triplet.neg), Some(s.bins[2]));
            assert_ne!(s.triplet.pos, s.triplet.query);
        }
        let mut again = seed::stream(1, 0);
        assert_eq!(
            batch,
            sample_triplet_batch(std::slice::from_ref(&list), &mut again, 200).unwrap()
        );
    }

    #[test]
    fn each_bin_drawn_with_probability_three_fifths() {
        let list = list_of(11, 5);
        let mut rng = seed::stream(2, 0);
        let draws = 10_000;
        let batch = sample_triplet_batch(std::slice::from_ref(&list), &mut rng, draws).unwrap();
        let mut counts = [0usize; 5];
        for s in &batch {
            for b in s.bins {
                counts[b] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.6).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn sampling_needs_three_bins() {
        let scores = Array2::<f64>::zeros((4, 4));
        let list = similarity::rank_by_scores(scores.view(), 0, 2).unwrap();
        let mut rng = seed::stream(3, 0);
        assert!(matches!(
            sample_triplet_batch(&[list], &mut rng, 1),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn zero_iterations_returns_initial_codes() {
        let data = small_data();
        let config = TrainConfig {
            iterations: 0,
            ..small_config()
        };
        let model = train(&data, config).unwrap();
        assert!(model.log.is_empty());
        let train_split = data.split(Role::Train);
        let f = model
            .encoder_x
            .predict(train_split.x.to_f64().view())
            .unwrap();
        let g = model
            .encoder_y
            .predict(train_split.y.to_f64().view())
            .unwrap();
        assert_eq!(model.codes_b, HashCodeMatrix::from_real((&f + &g).view()));
    }

    #[test]
    fn phases_leave_the_other_side_untouched() {
        let data = small_data();
        let mut trainer = Trainer::new(&data, small_config()).unwrap();
        for _ in 0..3 {
            let batch = trainer.sample_batch().unwrap();
            let (y0, b0) = (trainer.encoder_y().clone(), trainer.codes().clone());
            let x0 = trainer.encoder_x().clone();
            trainer.update_x(&batch).unwrap();
            assert_eq!(trainer.encoder_y(), &y0);
            assert_eq!(trainer.codes(), &b0);
            assert_ne!(trainer.encoder_x(), &x0);
            let x1 = trainer.encoder_x().clone();
            trainer.update_y(&batch).unwrap();
            assert_eq!(trainer.encoder_x(), &x1);
            assert_eq!(trainer.codes(), &b0);
            let (f, g) = trainer.update_codes().unwrap();
            assert_eq!(
                trainer.codes(),
                &HashCodeMatrix::from_real((&f + &g).view())
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data();
        let a = train(&data, small_config()).unwrap();
        let b = train(&data, small_config()).unwrap();
        assert_eq!(a, b);
        let c = train(
            &data,
            TrainConfig {
                seed: 4,
                ..small_config()
            },
        )
        .unwrap();
        assert_ne!(a.encoder_x, c.encoder_x);
    }

    #[test]
    fn dropout_training_runs_and_is_deterministic() {
        let data = small_data();
        let config = TrainConfig {
            dropout: Some(0.5),
            ..small_config()
        };
        let a = train(&data, config.clone()).unwrap();
        assert_eq!(a, train(&data, config).unwrap());
        assert!(a.log.iter().all(LossReport::is_finite));
    }

    #[test]
    fn variants_train() {
        let data = small_data();
        for v in Variant::ALL {
            let model = train(&data, make_variant(&small_config(), v)).unwrap();
            assert_eq!(model.codes_b.rows(), 60);
            if v == Variant::Nd {
                assert_eq!(model.encoder_x.layer_dims(), vec![12, 8]);
            }
        }
    }

    #[test]
    fn too_few_training_rows_rejected() {
        let data = generate_synthetic(&SyntheticSpec {
            n_train: 10,
            n_database: 5,
            n_query: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(matches!(
            Trainer::new(&data, small_config()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn divergent_learning_rate_aborts_with_iteration() {
        let data = small_data();
        let config = TrainConfig {
            learning_rate: 1e200,
            iterations: 50,
            ..small_config()
        };
        match train(&data, config) {
            Err(Error::Numerical { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let data = small_data();
        let model = train(&data, small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let back = TrainedModel::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.codes_b, model.codes_b);
        assert_eq!(back.config.code_length, 8);
        assert_eq!(back.config.hidden_x, vec![16]);
        assert_eq!(back.encoder_x.layer_dims(), model.encoder_x.layer_dims());
    }

    #[test]
    fn train_log_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_train_log(&path, &[LossReport::new(1.0, 2.0, 1.0, 3)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["iteration"], 1);
        assert_eq!(v["total"], 2.0);
        assert_eq!(v["active_triplet_count"], 3);
    }
}
