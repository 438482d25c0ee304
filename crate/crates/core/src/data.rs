// SPDX-License-Identifier: Apache-2.0

//! Dataset representation and on-disk formats.
//!
//! Matrices are stored in the RDMX container:
//!
//! ```text
//! "RDMX" | version u8 = 0x01 | kind u8 | rows u32 LE | cols u32 LE | rows*cols f32 LE (row-major)
//! ```
//!
//! with kind `0x00` for features, `0x01` for labels and `0x02` for ±1 hash
//! codes. A bundle directory holds `x.rdmx`, `y.rdmx`, `labels.rdmx`, a
//! `roles.txt` with one role per instance, and a `manifest.txt`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{self, streams};

pub const RDMX_MAGIC: &[u8; 4] = b"RDMX";
pub const RDMX_VERSION: u8 = 0x01;
const RDMX_HEADER_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MatrixKind {
    Feature = 0x00,
    Label = 0x01,
    Code = 0x02,
}

impl MatrixKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(MatrixKind::Feature),
            0x01 => Some(MatrixKind::Label),
            0x02 => Some(MatrixKind::Code),
            _ => None,
        }
    }
}

/// Raw contents of an RDMX file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub kind: MatrixKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub fn write_rdmx(
    path: &Path,
    kind: MatrixKind,
    rows: usize,
    cols: usize,
    values: &[f32],
) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::validation(format!(
            "refusing to write a {rows}x{cols} matrix: both dimensions must be at least 1"
        )));
    }
    if values.len() != rows * cols {
        return Err(Error::validation(format!(
            "payload has {} values, expected {rows}x{cols}",
            values.len()
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::validation("row count exceeds u32"))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::validation("column count exceeds u32"))?;

    let mut buf = Vec::with_capacity(RDMX_HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(RDMX_MAGIC);
    buf.push(RDMX_VERSION);
    buf.push(kind as u8);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_rdmx(path: &Path) -> Result<RawMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != RDMX_MAGIC {
        return Err(format("bad magic, expected \"RDMX\"".into()));
    }
    if bytes.len() < RDMX_HEADER_LEN {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            message: format!(
                "header needs {RDMX_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    if bytes[4] != RDMX_VERSION {
        return Err(format(format!("unsupported version {:#04x}", bytes[4])));
    }
    let kind = MatrixKind::from_byte(bytes[5])
        .ok_or_else(|| format(format!("unknown kind byte {:#04x}", bytes[5])))?;
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[RDMX_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            message: format!(
                "{rows}x{cols} matrix needs {expected} payload bytes, found {}",
                payload.len()
            ),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawMatrix {
        kind,
        rows,
        cols,
        values,
    })
}

fn expect_kind(path: &Path, raw: &RawMatrix, kind: MatrixKind) -> Result<()> {
    if raw.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {kind:?} matrix, file holds {:?}", raw.kind),
        });
    }
    Ok(())
}

/// Plain numeric CSV without a header row.
pub fn read_csv(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("row {rows} has {} fields, expected {c}", record.len()),
                })
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("unparsable value {field:?} at ({rows},{c})"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), values))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Dense `n x d` real features for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::validation(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::validation(format!("non-finite value at ({r},{c})")));
            }
        }
        for (r, row) in values.axis_iter(Axis(0)).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::validation(format!("feature row {r} is all zeros")));
            }
        }
        Ok(Self { values })
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        let values = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::validation(format!("bad feature shape {rows}x{cols}: {e}")))?;
        Self::new(values)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.values.row(i)
    }

    /// Features widened to `f64` for numerical work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    pub fn select(&self, ids: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(Axis(0), ids),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let values: Vec<f32> = self.values.iter().copied().collect();
        write_rdmx(path, MatrixKind::Feature, self.rows(), self.cols(), &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_rdmx(path)?;
        expect_kind(path, &raw, MatrixKind::Feature)?;
        Self::from_vec(raw.rows, raw.cols, raw.values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let (rows, cols, values) = read_csv(path)?;
        Self::from_vec(rows, cols, values)
    }
}

/// Binary `n x m` label matrix; an all-zero row marks an unlabeled instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    values: Array2<u8>,
}

impl LabelMatrix {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        let (n, m) = values.dim();
        if n == 0 || m == 0 {
            return Err(Error::validation(format!(
                "label matrix must be non-empty, got {n}x{m}"
            )));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(Error::validation(format!(
                "non-binary label value {v} at ({r},{c})"
            )));
        }
        Ok(Self { values })
    }

    /// Builds labels from real values, accepting only exact 0.0 and 1.0.
    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::validation(format!(
                "label payload has {} values, expected {rows}x{cols}",
                values.len()
            )));
        }
        let mut out = Vec::with_capacity(values.len());
        for (k, &v) in values.iter().enumerate() {
            let b = if v == 0.0 {
                0
            } else if v == 1.0 {
                1
            } else {
                return Err(Error::validation(format!(
                    "non-binary label value {v} at ({},{})",
                    k / cols,
                    k % cols
                )));
            };
            out.push(b);
        }
        Self::new(Array2::from_shape_vec((rows, cols), out).unwrap())
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, u8> {
        self.values.row(i)
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.values.row(i).iter().any(|&v| v != 0)
    }

    pub fn unlabeled_count(&self) -> usize {
        (0..self.rows()).filter(|&i| !self.is_labeled(i)).count()
    }

    /// Number of labels rows `i` and `j` have in common.
    pub fn shared_count(&self, i: usize, j: usize) -> usize {
        self.values
            .row(i)
            .iter()
            .zip(self.values.row(j))
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn select(&self, ids: &[usize]) -> LabelMatrix {
        LabelMatrix {
            values: self.values.select(Axis(0), ids),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let values: Vec<f32> = self.values.iter().map(|&v| f32::from(v)).collect();
        write_rdmx(path, MatrixKind::Label, self.rows(), self.cols(), &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_rdmx(path)?;
        expect_kind(path, &raw, MatrixKind::Label)?;
        Self::from_f32(raw.rows, raw.cols, &raw.values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let (rows, cols, values) = read_csv(path)?;
        Self::from_f32(rows, cols, &values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedMatrix {
    Features(FeatureMatrix),
    Labels(LabelMatrix),
}

/// Loads an RDMX file, validating it against the requested kind.
pub fn load_matrix(path: &Path, kind: MatrixKind) -> Result<LoadedMatrix> {
    match kind {
        MatrixKind::Feature => FeatureMatrix::load(path).map(LoadedMatrix::Features),
        MatrixKind::Label => LabelMatrix::load(path).map(LoadedMatrix::Labels),
        MatrixKind::Code => Err(Error::validation(
            "code matrices are loaded through retrieval::HashCodeMatrix",
        )),
    }
}

pub fn save_matrix(matrix: &LoadedMatrix, path: &Path) -> Result<()> {
    match matrix {
        LoadedMatrix::Features(m) => m.save(path),
        LoadedMatrix::Labels(m) => m.save(path),
    }
}

/// Rounds `fraction * n` half-up.
pub fn masked_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Zeroes the label rows of a seeded uniform sample of `round(fraction * n)`
/// instances.
pub fn mask_labels(labels: &LabelMatrix, fraction: f64, seed: u64) -> Result<LabelMatrix> {
    let all: Vec<usize> = (0..labels.rows()).collect();
    let mut rng = seed::stream(seed, streams::SYNTH_MASK);
    mask_rows(labels, &all, fraction, &mut rng)
}

/// Masks a fraction of the listed rows only.
pub fn mask_rows<R: Rng + ?Sized>(
    labels: &LabelMatrix,
    candidates: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<LabelMatrix> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::validation(format!(
            "mask fraction {fraction} outside [0, 1)"
        )));
    }
    let k = masked_count(fraction, candidates.len());
    let mut out = labels.clone();
    for idx in rand::seq::index::sample(rng, candidates.len(), k) {
        out.values.row_mut(candidates[idx]).fill(0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Database,
    Query,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Database => "database",
            Role::Query => "query",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "database" => Ok(Role::Database),
            "query" => Ok(Role::Query),
            other => Err(Error::validation(format!("unknown role {other:?}"))),
        }
    }
}

/// The instances of one role, with both modalities and labels aligned by row.
#[derive(Debug, Clone)]
pub struct Split {
    pub ids: Vec<usize>,
    pub x: FeatureMatrix,
    pub y: FeatureMatrix,
    pub labels: LabelMatrix,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    x: FeatureMatrix,
    y: FeatureMatrix,
    labels: LabelMatrix,
    roles: Vec<Role>,
}

impl DatasetBundle {
    pub fn new(
        x: FeatureMatrix,
        y: FeatureMatrix,
        labels: LabelMatrix,
        roles: Vec<Role>,
    ) -> Result<Self> {
        let n = x.rows();
        if y.rows() != n || labels.rows() != n || roles.len() != n {
            return Err(Error::validation(format!(
                "instance counts disagree: x={}, y={}, labels={}, roles={}",
                n,
                y.rows(),
                labels.rows(),
                roles.len()
            )));
        }
        Ok(Self {
            x,
            y,
            labels,
            roles,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn x(&self) -> &FeatureMatrix {
        &self.x
    }

    pub fn y(&self) -> &FeatureMatrix {
        &self.y
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, role: Role) -> Split {
        let ids = self.ids_with_role(role);
        Split {
            x: self.x.select(&ids),
            y: self.y.select(&ids),
            labels: self.labels.select(&ids),
            ids,
        }
    }

    pub fn with_labels(&self, labels: LabelMatrix) -> Result<Self> {
        Self::new(self.x.clone(), self.y.clone(), labels, self.roles.clone())
    }

    /// Zeroes the labels of `round(fraction * n_train)` training instances.
    pub fn mask_training_labels(&self, fraction: f64, seed: u64) -> Result<Self> {
        let train = self.ids_with_role(Role::Train);
        let mut rng = seed::stream(seed, streams::SYNTH_MASK);
        let labels = mask_rows(&self.labels, &train, fraction, &mut rng)?;
        self.with_labels(labels)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.x.save(&dir.join("x.rdmx"))?;
        self.y.save(&dir.join("y.rdmx"))?;
        self.labels.save(&dir.join("labels.rdmx"))?;

        let roles_path = dir.join("roles.txt");
        let mut roles = String::with_capacity(self.len() * 9);
        for r in &self.roles {
            roles.push_str(&r.to_string());
            roles.push('\n');
        }
        fs::write(&roles_path, roles).map_err(|e| Error::io(&roles_path, e))?;

        let manifest_path = dir.join("manifest.txt");
        let mut manifest =
            fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let count = |role| self.roles.iter().filter(|&&r| r == role).count();
        writeln!(
            manifest,
            "n={}\nd_x={}\nd_y={}\nlabels={}\nn_train={}\nn_database={}\nn_query={}\nunlabeled={}",
            self.len(),
            self.x.cols(),
            self.y.cols(),
            self.labels.cols(),
            count(Role::Train),
            count(Role::Database),
            count(Role::Query),
            self.labels.unlabeled_count(),
        )
        .map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    /// Loads `x`, `y` and `labels` (RDMX, or CSV when `csv` is set) plus
    /// `roles.txt` from a bundle directory.
    pub fn load_dir(dir: &Path, csv: bool) -> Result<Self> {
        let file = |stem: &str| -> PathBuf {
            dir.join(format!("{stem}.{}", if csv { "csv" } else { "rdmx" }))
        };
        let (x, y, labels) = if csv {
            (
                FeatureMatrix::load_csv(&file("x"))?,
                FeatureMatrix::load_csv(&file("y"))?,
                LabelMatrix::load_csv(&file("labels"))?,
            )
        } else {
            (
                FeatureMatrix::load(&file("x"))?,
                FeatureMatrix::load(&file("y"))?,
                LabelMatrix::load(&file("labels"))?,
            )
        };
        let roles_path = dir.join("roles.txt");
        let text = fs::read_to_string(&roles_path).map_err(|e| Error::io(&roles_path, e))?;
        let roles = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(Role::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(x, y, labels, roles)
    }
}

/// Parameters of the seeded synthetic two-modality generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_database: usize,
    pub n_query: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub class_count: usize,
    pub labels_per_instance: usize,
    pub noise_sigma: f64,
    pub unlabeled_fraction: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_database: 800,
            n_query: 200,
            d_x: 32,
            d_y: 32,
            class_count: 5,
            labels_per_instance: 1,
            noise_sigma: 0.3,
            unlabeled_fraction: 0.0,
            latent_dim: 16,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn n(&self) -> usize {
        self.n_train + self.n_database + self.n_query
    }

    fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::validation(
                "synthetic dataset needs at least one instance",
            ));
        }
        if self.d_x == 0 || self.d_y == 0 || self.latent_dim == 0 {
            return Err(Error::validation(
                "feature and latent dimensions must be at least 1",
            ));
        }
        if self.class_count == 0 || self.labels_per_instance == 0 {
            return Err(Error::validation(
                "class_count and labels_per_instance must be at least 1",
            ));
        }
        if self.labels_per_instance > self.class_count {
            return Err(Error::validation(format!(
                "labels_per_instance {} exceeds class_count {}",
                self.labels_per_instance, self.class_count
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation(
                "noise_sigma must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::validation("unlabeled_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Generates a labeled two-modality dataset.
///
/// Each instance draws `labels_per_instance` distinct classes; its latent
/// vector is the mean of those class prototypes, and each modality sees the
/// latent vector plus independent Gaussian noise pushed through its own fixed
/// random projection. Rows are laid out as train, then database, then query.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let n = spec.n();
    let latent = spec.latent_dim;

    let prototypes = gaussian_matrix(
        &mut seed::stream(spec.seed, streams::SYNTH_PROTOTYPES),
        spec.class_count,
        latent,
        1.0,
    );
    let proj_x = gaussian_matrix(
        &mut seed::stream(spec.seed, streams::SYNTH_PROJECTION_X),
        latent,
        spec.d_x,
        1.0 / (latent as f64).sqrt(),
    );
    let proj_y = gaussian_matrix(
        &mut seed::stream(spec.seed, streams::SYNTH_PROJECTION_Y),
        latent,
        spec.d_y,
        1.0 / (latent as f64).sqrt(),
    );

    let mut rng = seed::stream(spec.seed, streams::SYNTH_INSTANCES);
    let mut labels = Array2::<u8>::zeros((n, spec.class_count));
    let mut latent_x = Array2::<f64>::zeros((n, latent));
    let mut latent_y = Array2::<f64>::zeros((n, latent));
    for i in 0..n {
        let classes =
            rand::seq::index::sample(&mut rng, spec.class_count, spec.labels_per_instance);
        let mut center = ndarray::Array1::<f64>::zeros(latent);
        for k in classes.iter() {
            labels[[i, k]] = 1;
            center += &prototypes.row(k);
        }
        center /= spec.labels_per_instance as f64;
        for l in 0..latent {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            latent_x[[i, l]] = center[l] + spec.noise_sigma * nx;
            latent_y[[i, l]] = center[l] + spec.noise_sigma * ny;
        }
    }

    let x = FeatureMatrix::new(latent_x.dot(&proj_x).mapv(|v| v as f32))?;
    let y = FeatureMatrix::new(latent_y.dot(&proj_y).mapv(|v| v as f32))?;

    let mut roles = Vec::with_capacity(n);
    roles.extend(std::iter::repeat_n(Role::Train, spec.n_train));
    roles.extend(std::iter::repeat_n(Role::Database, spec.n_database));
    roles.extend(std::iter::repeat_n(Role::Query, spec.n_query));

    let labels = LabelMatrix::new(labels)?;
    let train: Vec<usize> = (0..spec.n_train).collect();
    let mut mask_rng = seed::stream(spec.seed, streams::SYNTH_MASK);
    let labels = mask_rows(&labels, &train, spec.unlabeled_fraction, &mut mask_rng)?;

    DatasetBundle::new(x, y, labels, roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
        let dot: f64 = a
            .iter()
            .zip(b)
            .map(|(&p, &q)| f64::from(p) * f64::from(q))
            .sum();
        let na: f64 = a.iter().map(|&p| f64::from(p).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&p| f64::from(p).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn label_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.rdmx");
        let labels = LabelMatrix::from_f32(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        labels.save(&path).unwrap();
        match load_matrix(&path, MatrixKind::Label).unwrap() {
            LoadedMatrix::Labels(l) => {
                assert_eq!((l.rows(), l.cols()), (2, 3));
                assert_eq!(l, labels);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_feature_is_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdmx");
        write_rdmx(&path, MatrixKind::Feature, 2, 2, &[1.0, 2.0, f32::NAN, 1.0]).unwrap();
        let err = FeatureMatrix::load(&path).unwrap_err();
        assert!(
            err.to_string().contains("non-finite value at (1,0)"),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdmx");
        fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(
            FeatureMatrix::load(&path),
            Err(Error::Format { .. })
        ));

        write_rdmx(&path, MatrixKind::Feature, 2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            FeatureMatrix::load(&path),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn non_binary_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.rdmx");
        write_rdmx(&path, MatrixKind::Label, 1, 2, &[1.0, 0.5]).unwrap();
        assert!(matches!(
            LabelMatrix::load(&path),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn kind_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.rdmx");
        LabelMatrix::new(array![[1u8, 0]])
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(matches!(
            FeatureMatrix::load(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn save_overwrites_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdmx");
        FeatureMatrix::new(array![[1.0f32, 2.0], [3.0, 4.0]])
            .unwrap()
            .save(&path)
            .unwrap();
        let second = FeatureMatrix::new(array![[5.0f32]]).unwrap();
        second.save(&path).unwrap();
        assert_eq!(FeatureMatrix::load(&path).unwrap(), second);
    }

    #[test]
    fn zero_row_matrix_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdmx");
        assert!(write_rdmx(&path, MatrixKind::Feature, 0, 3, &[]).is_err());
        assert!(!path.exists());
        assert!(FeatureMatrix::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "1, 2.5\n-3,4\n").unwrap();
        let m = FeatureMatrix::load_csv(&path).unwrap();
        assert_eq!(m.view(), array![[1.0f32, 2.5], [-3.0, 4.0]]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_train: 40,
            n_database: 20,
            n_query: 10,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.roles(), b.roles());

        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn zero_noise_prototypes_coincide() {
        let spec = SyntheticSpec {
            n_train: 30,
            n_database: 0,
            n_query: 0,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let labels = data.labels();
        for i in 0..30 {
            for j in 0..30 {
                if labels.row(i) == labels.row(j) {
                    let s = cosine(data.x().row(i), data.x().row(j));
                    assert!((s - 1.0).abs() < 1e-6, "cos({i},{j}) = {s}");
                }
            }
        }
    }

    #[test]
    fn synthetic_masks_exactly_seventy_percent_of_training_rows() {
        let spec = SyntheticSpec {
            unlabeled_fraction: 0.7,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let train = data.split(Role::Train);
        assert_eq!(train.len(), 800);
        assert_eq!(train.labels.unlabeled_count(), 560);
        assert_eq!(data.split(Role::Database).labels.unlabeled_count(), 0);
        assert_eq!(data.split(Role::Query).labels.unlabeled_count(), 0);
    }

    #[test]
    fn synthetic_rejects_too_many_labels() {
        let spec = SyntheticSpec {
            labels_per_instance: 6,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn masking_counts_and_determinism() {
        let labels = LabelMatrix::new(Array2::from_elem((10, 3), 1u8)).unwrap();
        assert_eq!(mask_labels(&labels, 0.0, 1).unwrap(), labels);
        let masked = mask_labels(&labels, 0.7, 1).unwrap();
        assert_eq!(masked.unlabeled_count(), 7);
        assert_eq!(masked, mask_labels(&labels, 0.7, 1).unwrap());
        assert!(mask_labels(&labels, 1.0, 1).is_err());
        assert!(mask_labels(&labels, -0.1, 1).is_err());
    }

    #[test]
    fn masking_rounds_half_up() {
        assert_eq!(masked_count(0.5, 5), 3);
        assert_eq!(masked_count(0.25, 10), 3);
        assert_eq!(masked_count(0.24, 10), 2);
    }

    #[test]
    fn masking_leaves_features_untouched() {
        let spec = SyntheticSpec {
            n_train: 50,
            n_database: 5,
            n_query: 5,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let masked = data.mask_training_labels(0.5, 3).unwrap();
        assert_eq!(masked.x(), data.x());
        assert_eq!(masked.y(), data.y());
        assert_eq!(masked.labels().view().dim(), data.labels().view().dim());
        assert_eq!(masked.split(Role::Train).labels.unlabeled_count(), 25);
    }

    #[test]
    fn bundle_dir_roundtrip() {
        let spec = SyntheticSpec {
            n_train: 12,
            n_database: 6,
            n_query: 3,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save_dir(dir.path()).unwrap();
        let back = DatasetBundle::load_dir(dir.path(), false).unwrap();
        assert_eq!(back.x(), data.x());
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.roles(), data.roles());
    }

    proptest::proptest! {
        #[test]
        fn feature_roundtrip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = seed::stream(seed, 0);
            let values: Vec<f32> = (0..rows * cols)
                .map(|_| rng.random_range(-1e6f32..1e6) + 1e-3)
                .collect();
            let m = FeatureMatrix::from_vec(rows, cols, values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.rdmx");
            m.save(&path).unwrap();
            let back = FeatureMatrix::load(&path).unwrap();
            let same = back.view().iter().zip(m.view()).all(|(a, b)| a.to_bits() == b.to_bits());
            proptest::prop_assert!(same);
        }
    }
}
