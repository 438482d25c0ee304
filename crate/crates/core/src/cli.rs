// SPDX-License-Identifier: Apache-2.0

//! The `rdcmh` command line.
//!
//! Reports go to stdout as JSON, progress goes to stderr. Exit codes: 0 on
//! success, 2 on validation or usage errors, 3 on numerical aborts and 4 on
//! I/O or format errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, DatasetBundle, MatrixKind, Role, SyntheticSpec};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::eval::{self, Direction};
use crate::gradcheck;
use crate::retrieval::{self, HashCodeMatrix};
use crate::similarity;
use crate::trainer::{
    self, make_variant, RankingSource, TrainConfig, TrainedModel, Trainer, Variant,
};

const SUBCOMMANDS: [&str; 8] = [
    "synth",
    "dump-similarity",
    "train",
    "encode",
    "retrieve",
    "eval",
    "ablate",
    "gradcheck",
];

#[derive(Debug, Parser)]
#[command(
    name = "rdcmh",
    version,
    about = "Ranking-based deep cross-modal hashing",
    args_override_self = true
)]
struct Cli {
    /// Worker threads (falls back to RDCMH_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat key=value file of default flags; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Write a training-set similarity matrix as RDMX.
    DumpSimilarity(DumpArgs),
    /// Train both encoders and the shared codes.
    Train(TrainCmd),
    /// Hash a feature matrix with a trained encoder.
    Encode(EncodeArgs),
    /// Hamming top-k search of query codes against database codes.
    Retrieve(RetrieveArgs),
    /// MAP of a trained model on the bundle's query and database rows.
    Eval(EvalArgs),
    /// Train and evaluate every variant over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Total instance count, split 4:4:1 into train, database and query.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 800)]
    n_train: usize,
    #[arg(long, default_value_t = 800)]
    n_database: usize,
    #[arg(long, default_value_t = 200)]
    n_query: usize,
    #[arg(long, default_value_t = 32)]
    dx: usize,
    #[arg(long, default_value_t = 32)]
    dy: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    labels_per_instance: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Fraction of training rows whose labels are removed.
    #[arg(long, default_value_t = 0.0)]
    unlabeled: f64,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory (x, y, labels, roles.txt).
    #[arg(long)]
    data: PathBuf,
    /// Read x.csv, y.csv and labels.csv instead of RDMX files.
    #[arg(long)]
    csv: bool,
}

impl DataArgs {
    fn load(&self) -> Result<DatasetBundle> {
        DatasetBundle::load_dir(&self.data, self.csv)
    }
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    /// xx, yy or xy.
    #[arg(long, default_value = "xy")]
    which: RankingSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 16)]
    bits: usize,
    /// Accept code lengths other than 16, 32, 64 and 128.
    #[arg(long)]
    any_bits: bool,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "FULL")]
    variant: Variant,
    /// Inverted dropout rate on hidden layers.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Hidden widths of the image encoder, comma separated; "none" for a
    /// single linear layer.
    #[arg(long, default_value = "256")]
    hidden_x: String,
    #[arg(long, default_value = "256")]
    hidden_y: String,
    /// Similarity driving triplet sampling: xx, yy or xy.
    #[arg(long, default_value = "xy")]
    ranking_source: RankingSource,
    /// Remove labels from this fraction of training rows before training.
    #[arg(long)]
    mask_labels: Option<f64>,
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad layer width {w:?}")))
        })
        .collect()
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let base = TrainConfig {
            code_length: self.bits,
            any_code_length: self.any_bits,
            lambda: self.lambda,
            iterations: self.iters,
            batch_size: self.batch,
            learning_rate: self.lr,
            bin_count: self.bins,
            seed: self.seed,
            dropout: self.dropout,
            margin: self.margin,
            hidden_x: parse_widths(&self.hidden_x)?,
            hidden_y: parse_widths(&self.hidden_y)?,
            ranking_source: self.ranking_source,
            ..TrainConfig::default()
        };
        let config = make_variant(&base, self.variant);
        config.validate()?;
        Ok(config)
    }

    fn dataset(&self, data: &DataArgs) -> Result<DatasetBundle> {
        let bundle = data.load()?;
        match self.mask_labels {
            Some(f) => bundle.mask_training_labels(f, self.seed),
            None => Ok(bundle),
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Directory receiving the encoders, codes and manifest.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines loss log, one line per iteration.
    #[arg(long)]
    train_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature matrix, RDMX or CSV by extension.
    #[arg(long)]
    features: PathBuf,
    /// x (image) or y (text).
    #[arg(long)]
    modality: Modality,
    /// Output codes; `.rdmx` writes kind-2 RDMX, anything else packed RDMB.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    database: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// image_to_text, text_to_image or both.
    #[arg(long, default_value = "both")]
    direction: String,
    /// Also report the MAP with query labels shuffled by this seed.
    #[arg(long)]
    null_seed: Option<u64>,
    /// CSV of per-query average precision.
    #[arg(long)]
    ap_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "FULL,NW,NS,ND,NJ")]
    variants: Vec<Variant>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    configs: usize,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        return report_error(&e);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

/// Splices flags from a `--config` file right after the subcommand so that
/// later command-line flags override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(
                it.next()
                    .ok_or_else(|| Error::validation("--config needs a path"))?,
            );
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::validation(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => extra.push(key),
            "false" => {}
            v => {
                extra.push(key);
                extra.push(v.to_string());
            }
        }
    }
    let at = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(rest.len(), |p| p + 1);
    rest.splice(at..at, extra);
    Ok(rest)
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads =
        match flag {
            Some(t) => Some(t),
            None => match std::env::var("RDCMH_THREADS") {
                Ok(v) => Some(v.trim().parse().map_err(|_| {
                    Error::validation(format!("RDCMH_THREADS={v:?} is not a count"))
                })?),
                Err(_) => None,
            },
        };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::validation("thread count must be at least 1"));
        }
        // A pool may already exist when run() is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::DumpSimilarity(a) => dump_similarity(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let (n_train, n_database, n_query) = match a.n {
        Some(n) => {
            let q = n / 9;
            let db = (n - q) / 2;
            (n - q - db, db, q)
        }
        None => (a.n_train, a.n_database, a.n_query),
    };
    let spec = SyntheticSpec {
        n_train,
        n_database,
        n_query,
        d_x: a.dx,
        d_y: a.dy,
        class_count: a.classes,
        labels_per_instance: a.labels_per_instance,
        noise_sigma: a.noise,
        unlabeled_fraction: a.unlabeled,
        latent_dim: a.latent_dim,
        seed: a.seed,
    };
    let bundle = data::generate_synthetic(&spec)?;
    bundle.save_dir(&a.out)?;
    eprintln!("wrote {} instances to {}", bundle.len(), a.out.display());
    print_json(&serde_json::json!({
        "out": a.out,
        "n_train": n_train,
        "n_database": n_database,
        "n_query": n_query,
        "d_x": a.dx,
        "d_y": a.dy,
        "classes": a.classes,
        "unlabeled_train_rows": bundle.labels().unlabeled_count(),
        "seed": a.seed,
    }));
    Ok(0)
}

fn dump_similarity(a: DumpArgs) -> Result<i32> {
    let bundle = a.data.load()?;
    let train = bundle.split(Role::Train);
    let sxx = || similarity::semi_supervised_similarity(&train.x, &train.labels);
    let syy = || similarity::semi_supervised_similarity(&train.y, &train.labels);
    let s = match a.which {
        RankingSource::Xx => sxx()?,
        RankingSource::Yy => syy()?,
        RankingSource::Xy => similarity::cross_modal_similarity(&sxx()?, &syy()?)?,
    };
    let n = s.len();
    let values: Vec<f32> = s.view().iter().map(|&v| v as f32).collect();
    data::write_rdmx(&a.out, MatrixKind::Feature, n, n, &values)?;
    print_json(&serde_json::json!({ "out": a.out, "which": a.which, "rows": n }));
    Ok(0)
}

fn train(a: TrainCmd) -> Result<i32> {
    let config = a.train.config()?;
    let bundle = a.train.dataset(&a.data)?;
    let total = config.iterations;
    let mut t = Trainer::new(&bundle, config)?;
    eprintln!("initial loss {:.6}", t.initial_loss().total);
    while !t.is_done() {
        let report = t.step()?;
        let it = t.iteration();
        if it % 50 == 0 || it == total {
            eprintln!(
                "iter {it}/{total} loss {:.6} active {}",
                report.total, report.active_triplet_count
            );
        }
    }
    if let Some(at) = t.converged_at() {
        eprintln!("converged at iteration {at}");
    }
    let model = t.finish()?;
    model.save_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.train_log {
        trainer::write_train_log(path, &model.log)?;
    }
    print_json(&serde_json::json!({
        "checkpoint": a.checkpoint,
        "iterations_run": model.log.len(),
        "converged_at": model.converged_at,
        "initial_loss": model.initial_loss,
        "final_loss": model.final_loss(),
        "config": model.config,
    }));
    Ok(0)
}

fn load_features(path: &Path) -> Result<data::FeatureMatrix> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        data::FeatureMatrix::load_csv(path)
    } else {
        data::FeatureMatrix::load(path)
    }
}

fn is_rdmx(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("rdmx"))
}

fn load_codes(path: &Path) -> Result<HashCodeMatrix> {
    if is_rdmx(path) {
        HashCodeMatrix::load_rdmx(path)
    } else {
        HashCodeMatrix::load_packed(path)
    }
}

fn encode(a: EncodeArgs) -> Result<i32> {
    let model = TrainedModel::load_checkpoint(&a.checkpoint)?;
    let features = load_features(&a.features)?;
    let codes = retrieval::encode_out_of_sample(&model, &features, a.modality)?;
    if is_rdmx(&a.out) {
        codes.save_rdmx(&a.out)?;
    } else {
        codes.save_packed(&a.out)?;
    }
    print_json(&serde_json::json!({ "out": a.out, "rows": codes.rows(), "bits": codes.bits() }));
    Ok(0)
}

fn retrieve(a: RetrieveArgs) -> Result<i32> {
    let db = load_codes(&a.database)?;
    let queries = load_codes(&a.query)?;
    if db.bits() != queries.bits() {
        return Err(Error::validation(format!(
            "database codes have {} bits, queries {}",
            db.bits(),
            queries.bits()
        )));
    }
    #[derive(Serialize)]
    struct Hit {
        query: usize,
        #[serde(flatten)]
        result: retrieval::SearchResult,
    }
    let hits = (0..queries.rows())
        .map(|q| {
            Ok(Hit {
                query: q,
                result: retrieval::search(&db, queries.packed_row(q), a.k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    print_json(&serde_json::json!({ "k": a.k, "results": hits }));
    Ok(0)
}

fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    if s.eq_ignore_ascii_case("both") {
        Ok(Direction::BOTH.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn evaluate(a: EvalArgs) -> Result<i32> {
    let directions = parse_directions(&a.direction)?;
    let model = TrainedModel::load_checkpoint(&a.checkpoint)?;
    let bundle = a.data.load()?;
    let queries = bundle.split(Role::Query);
    let database = bundle.split(Role::Database);
    let mut reports = Vec::new();
    for dir in directions {
        let report = match a.null_seed {
            Some(s) => eval::evaluate_with_null(&model, &queries, &database, dir, s)?,
            None => eval::mean_average_precision(&model, &queries, &database, dir)?,
        };
        eprintln!("{dir}: MAP {:.4}", report.map);
        reports.push(report);
    }
    if let Some(path) = &a.ap_csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["direction", "query_id", "ap"])
            .map_err(|e| csv_io(path, e))?;
        for r in &reports {
            for (q, ap) in queries.ids.iter().zip(&r.per_query_ap) {
                w.write_record([r.direction.to_string(), q.to_string(), ap.to_string()])
                    .map_err(|e| csv_io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    print_json(&reports);
    Ok(0)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let config = a.train.config()?;
    let bundle = a.train.dataset(&a.data)?;
    eprintln!(
        "ablating {} variants over {} seeds",
        a.variants.len(),
        a.seeds.len()
    );
    let report = eval::run_ablation_variants(&bundle, &config, &a.seeds, &a.variants)?;
    for s in &report.variants {
        eprintln!(
            "{}: i2t {:.4} +- {:.4}, t2i {:.4} +- {:.4}, failures {}",
            s.variant,
            s.mean_map_image_to_text,
            s.std_map_image_to_text,
            s.mean_map_text_to_image,
            s.std_map_text_to_image,
            s.failures()
        );
    }
    print_json(&report);
    Ok(0)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.configs == 0 {
        return Err(Error::validation("--configs must be at least 1"));
    }
    let report = gradcheck::run(a.seed, a.configs)?;
    print_json(&report);
    Ok(if report.passed { 0 } else { 3 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn config_file_flags_precede_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(
            &cfg,
            "# defaults\nbits=32\nlambda = 0.5\ncsv=true\nany_bits=false\n",
        )
        .unwrap();
        let out = expand_config(args(&[
            "rdcmh",
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--bits",
            "64",
        ]))
        .unwrap();
        assert_eq!(
            out,
            args(&["rdcmh", "train", "--bits", "32", "--lambda", "0.5", "--csv", "--bits", "64"])
        );
        let cli =
            Cli::try_parse_from(
                out.iter()
                    .chain(&args(&["--data", "d", "--checkpoint", "c"])),
            )
            .unwrap();
        match cli.command {
            Command::Train(t) => {
                assert_eq!(t.train.bits, 64);
                assert_eq!(t.train.lambda, 0.5);
                assert!(t.data.csv);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_config_line_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, "bits 32\n").unwrap();
        assert!(matches!(
            expand_config(args(&["rdcmh", "--config", cfg.to_str().unwrap(), "train"])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn widths() {
        assert_eq!(parse_widths("256").unwrap(), vec![256]);
        assert_eq!(parse_widths("64, 32").unwrap(), vec![64, 32]);
        assert!(parse_widths("none").unwrap().is_empty());
        assert!(parse_widths("a").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(args(&["rdcmh", "train", "--no-such-flag"])), 2);
        assert_eq!(run(args(&["rdcmh", "bogus"])), 2);
        assert_eq!(run(args(&["rdcmh", "gradcheck", "--configs", "0"])), 2);
    }

    #[test]
    fn train_defaults_mirror_stated_settings() {
        let cli = Cli::try_parse_from(args(&[
            "rdcmh",
            "train",
            "--data",
            "d",
            "--checkpoint",
            "c",
        ]))
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!()
        };
        let c = t.train.config().unwrap();
        assert_eq!(
            (
                c.code_length,
                c.lambda,
                c.iterations,
                c.batch_size,
                c.bin_count
            ),
            (16, 1.0, 500, 128, 5)
        );
    }
}
