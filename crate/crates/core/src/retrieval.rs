// SPDX-License-Identifier: Apache-2.0

//! Binary codes, Hamming distance and exact top-k search.
//!
//! Codes are kept both as a `±1` matrix and packed into 64-bit words,
//! `+1 -> 1`, least significant bit first, with zeroed padding in the last
//! word of every row. The packed file format is
//!
//! ```text
//! "RDMB" | n u32 LE | c u32 LE | n * ceil(c/64) u64 LE
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::data::{self, FeatureMatrix, MatrixKind};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::trainer::TrainedModel;

pub const RDMB_MAGIC: &[u8; 4] = b"RDMB";

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// `n x c` matrix over `{-1, +1}` with its packed form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodeMatrix {
    signs: Array2<i8>,
    words_per_row: usize,
    packed: Vec<u64>,
}

impl HashCodeMatrix {
    pub fn from_signs(signs: Array2<i8>) -> Result<Self> {
        let (n, c) = signs.dim();
        if c == 0 {
            return Err(Error::validation("code length must be at least 1"));
        }
        if let Some(((r, k), v)) = signs.indexed_iter().find(|(_, &v)| v != 1 && v != -1) {
            return Err(Error::validation(format!(
                "code entry {v} at ({r},{k}) is not ±1"
            )));
        }
        let words_per_row = words_for(c);
        let mut packed = vec![0u64; n * words_per_row];
        for (r, row) in signs.rows().into_iter().enumerate() {
            let words = &mut packed[r * words_per_row..(r + 1) * words_per_row];
            for (k, &v) in row.iter().enumerate() {
                if v > 0 {
                    words[k / 64] |= 1u64 << (k % 64);
                }
            }
        }
        Ok(Self {
            signs,
            words_per_row,
            packed,
        })
    }

    /// Elementwise sign with `sign(0) = +1`.
    pub fn from_real(values: ArrayView2<f64>) -> Self {
        let signs = values.mapv(|v| if v >= 0.0 { 1i8 } else { -1 });
        Self::from_signs(signs).expect("sign codomain is ±1")
    }

    pub fn from_packed(rows: usize, cols: usize, packed: Vec<u64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::validation("code length must be at least 1"));
        }
        let words_per_row = words_for(cols);
        if packed.len() != rows * words_per_row {
            return Err(Error::validation(format!(
                "{rows}x{cols} codes need {} words, got {}",
                rows * words_per_row,
                packed.len()
            )));
        }
        let tail = cols % 64;
        if tail != 0 {
            let pad_mask = !0u64 << tail;
            for r in 0..rows {
                if packed[(r + 1) * words_per_row - 1] & pad_mask != 0 {
                    return Err(Error::validation(format!(
                        "row {r} has non-zero padding bits"
                    )));
                }
            }
        }
        let signs = Array2::from_shape_fn((rows, cols), |(r, k)| {
            if packed[r * words_per_row + k / 64] >> (k % 64) & 1 == 1 {
                1i8
            } else {
                -1
            }
        });
        Ok(Self {
            signs,
            words_per_row,
            packed,
        })
    }

    pub fn rows(&self) -> usize {
        self.signs.nrows()
    }

    pub fn bits(&self) -> usize {
        self.signs.ncols()
    }

    pub fn signs(&self) -> ArrayView2<'_, i8> {
        self.signs.view()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.signs.mapv(f64::from)
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn packed_row(&self, r: usize) -> &[u64] {
        &self.packed[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn packed(&self) -> &[u64] {
        &self.packed
    }

    pub fn select(&self, ids: &[usize]) -> HashCodeMatrix {
        Self::from_signs(self.signs.select(ndarray::Axis(0), ids)).expect("subset of valid codes")
    }

    /// RDMX container with kind `0x02`, `±1` stored as `f32`.
    pub fn save_rdmx(&self, path: &Path) -> Result<()> {
        let values: Vec<f32> = self.signs.iter().map(|&v| f32::from(v)).collect();
        data::write_rdmx(path, MatrixKind::Code, self.rows(), self.bits(), &values)
    }

    pub fn load_rdmx(path: &Path) -> Result<Self> {
        let raw = data::read_rdmx(path)?;
        if raw.kind != MatrixKind::Code {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected Code matrix, file holds {:?}", raw.kind),
            });
        }
        let mut signs = Vec::with_capacity(raw.values.len());
        for (k, &v) in raw.values.iter().enumerate() {
            signs.push(match v {
                1.0 => 1i8,
                -1.0 => -1,
                _ => {
                    return Err(Error::validation(format!(
                        "code entry {v} at ({},{}) is not ±1",
                        k / raw.cols,
                        k % raw.cols
                    )))
                }
            });
        }
        Self::from_signs(Array2::from_shape_vec((raw.rows, raw.cols), signs).unwrap())
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        let n =
            u32::try_from(self.rows()).map_err(|_| Error::validation("row count exceeds u32"))?;
        let c =
            u32::try_from(self.bits()).map_err(|_| Error::validation("code length exceeds u32"))?;
        let mut buf = Vec::with_capacity(12 + self.packed.len() * 8);
        buf.extend_from_slice(RDMB_MAGIC);
        buf.extend_from_slice(&n.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
        for w in &self.packed {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_packed(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != RDMB_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "bad magic, expected \"RDMB\"".into(),
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncation {
                path: path.to_path_buf(),
                message: "header needs 12 bytes".into(),
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12..];
        let expected = n * words_for(c) * 8;
        if payload.len() != expected {
            return Err(Error::Truncation {
                path: path.to_path_buf(),
                message: format!(
                    "{n}x{c} codes need {expected} payload bytes, found {}",
                    payload.len()
                ),
            });
        }
        let words = payload
            .chunks_exact(8)
            .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
            .collect();
        Self::from_packed(n, c, words)
    }
}

/// Popcount of the XOR of two packed codes.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SearchResult {
    pub ids: Vec<usize>,
    pub distances: Vec<u32>,
}

/// Exact `k` nearest database codes by Hamming distance, ties by ascending id.
pub fn search(database: &HashCodeMatrix, query: &[u64], k: usize) -> Result<SearchResult> {
    let n = database.rows();
    if k == 0 || k > n {
        return Err(Error::validation(format!(
            "k must lie in [1, {n}], got {k}"
        )));
    }
    if query.len() != database.words_per_row() {
        return Err(Error::validation(format!(
            "query has {} words, database rows have {}",
            query.len(),
            database.words_per_row()
        )));
    }
    // Distances are bounded by the code length, so a counting sort over
    // distance buckets keeps ids ascending within each bucket.
    let c = database.bits();
    let distances: Vec<u32> = (0..n)
        .map(|r| hamming(database.packed_row(r), query))
        .collect();
    let mut counts = vec![0usize; c + 2];
    for &d in &distances {
        counts[d as usize + 1] += 1;
    }
    for b in 1..counts.len() {
        counts[b] += counts[b - 1];
    }
    let mut order = vec![0usize; n];
    for (id, &d) in distances.iter().enumerate() {
        order[counts[d as usize]] = id;
        counts[d as usize] += 1;
    }
    order.truncate(k);
    let distances = order.iter().map(|&id| distances[id]).collect();
    Ok(SearchResult {
        ids: order,
        distances,
    })
}

/// Codes for unseen instances of one modality under a trained model.
pub fn encode_out_of_sample(
    model: &TrainedModel,
    features: &FeatureMatrix,
    modality: Modality,
) -> Result<HashCodeMatrix> {
    model.encoder(modality).encode(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;
    use rand::Rng;

    fn random_codes(rng: &mut impl Rng, n: usize, c: usize) -> HashCodeMatrix {
        HashCodeMatrix::from_signs(Array2::from_shape_simple_fn((n, c), || {
            if rng.random_bool(0.5) {
                1
            } else {
                -1
            }
        }))
        .unwrap()
    }

    fn naive(a: ndarray::ArrayView1<i8>, b: ndarray::ArrayView1<i8>) -> u32 {
        let mut d = 0;
        for k in 0..a.len() {
            if a[k] != b[k] {
                d += 1;
            }
        }
        d
    }

    #[test]
    fn sign_tie_rule_and_packing() {
        let codes = HashCodeMatrix::from_real(array![[-0.2, 0.7, 0.0]].view());
        assert_eq!(codes.signs(), array![[-1i8, 1, 1]]);
        assert_eq!(codes.packed_row(0), &[0b110]);
    }

    #[test]
    fn identical_and_complementary() {
        let mut rng = seed::stream(1, 0);
        let a = random_codes(&mut rng, 1, 32);
        let neg = HashCodeMatrix::from_signs(a.signs().mapv(|v| -v)).unwrap();
        assert_eq!(hamming(a.packed_row(0), a.packed_row(0)), 0);
        assert_eq!(hamming(a.packed_row(0), neg.packed_row(0)), 32);
    }

    #[test]
    fn packed_matches_unpacked_for_16_bits() {
        let mut rng = seed::stream(2, 0);
        let a = random_codes(&mut rng, 500, 16);
        let b = random_codes(&mut rng, 500, 16);
        for r in 0..500 {
            let d = hamming(a.packed_row(r), b.packed_row(r));
            assert_eq!(d, naive(a.signs().row(r), b.signs().row(r)));
            let dot: i32 = a
                .signs()
                .row(r)
                .iter()
                .zip(b.signs().row(r))
                .map(|(&x, &y)| i32::from(x) * i32::from(y))
                .sum();
            assert_eq!(d as i32, (16 - dot) / 2);
        }
    }

    #[test]
    fn metric_axioms_on_random_triples() {
        let mut rng = seed::stream(3, 0);
        let codes = random_codes(&mut rng, 300, 70);
        for t in 0..100 {
            let (a, b, c) = (
                codes.packed_row(3 * t),
                codes.packed_row(3 * t + 1),
                codes.packed_row(3 * t + 2),
            );
            assert_eq!(hamming(a, b), hamming(b, a));
            assert!(hamming(a, c) <= hamming(a, b) + hamming(b, c));
            assert_eq!(hamming(a, b) == 0, a == b);
        }
    }

    #[test]
    fn search_full_ranking_and_exact_hit() {
        let mut rng = seed::stream(4, 0);
        let db = random_codes(&mut rng, 40, 24);
        let res = search(&db, db.packed_row(17), 40).unwrap();
        let mut sorted = res.ids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
        assert_eq!(res.distances[0], 0);
        assert!(res.distances.windows(2).all(|w| w[0] <= w[1]));
        // 17 is the first zero-distance id unless an earlier duplicate exists.
        let first_dup = (0..40)
            .find(|&r| db.packed_row(r) == db.packed_row(17))
            .unwrap();
        assert_eq!(res.ids[0], first_dup);
    }

    #[test]
    fn search_rejects_bad_k() {
        let mut rng = seed::stream(5, 0);
        let db = random_codes(&mut rng, 5, 8);
        assert!(search(&db, db.packed_row(0), 0).is_err());
        assert!(search(&db, db.packed_row(0), 6).is_err());
    }

    #[test]
    fn search_is_permutation_invariant_up_to_ties() {
        let mut rng = seed::stream(6, 0);
        let db = random_codes(&mut rng, 60, 16);
        let perm: Vec<usize> = (0..60).rev().collect();
        let shuffled = db.select(&perm);
        let q = random_codes(&mut rng, 1, 16);
        let a = search(&db, q.packed_row(0), 60).unwrap();
        let b = search(&shuffled, q.packed_row(0), 60).unwrap();
        assert_eq!(a.distances, b.distances);
        let mut ids_a: Vec<(u32, usize)> = a
            .ids
            .iter()
            .map(|&i| (a.distances[a.ids.iter().position(|&x| x == i).unwrap()], i))
            .collect();
        let mut ids_b: Vec<(u32, usize)> = b
            .ids
            .iter()
            .zip(&b.distances)
            .map(|(&i, &d)| (d, perm[i]))
            .collect();
        ids_a.sort_unstable();
        ids_b.sort_unstable();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn file_formats_roundtrip() {
        let mut rng = seed::stream(7, 0);
        let codes = random_codes(&mut rng, 9, 70);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rdmb");
        codes.save_packed(&p).unwrap();
        assert_eq!(HashCodeMatrix::load_packed(&p).unwrap(), codes);
        let p = dir.path().join("c.rdmx");
        codes.save_rdmx(&p).unwrap();
        assert_eq!(HashCodeMatrix::load_rdmx(&p).unwrap(), codes);
    }

    #[test]
    fn dirty_padding_rejected() {
        assert!(HashCodeMatrix::from_packed(1, 8, vec![1 << 9]).is_err());
        assert!(HashCodeMatrix::from_packed(1, 8, vec![0xff]).is_ok());
    }
}
