// SPDX-License-Identifier: Apache-2.0

//! Feed-forward modality encoders with an explicit backward pass.
//!
//! An encoder is a stack of affine layers, `ReLU` between them and identity
//! on the last one, whose `c` outputs are the continuous codes (`F` for the
//! image side, `G` for the text side). The last affine layer plays the role
//! of the hash projection, so `sign(forward(x))` is the hash code.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! "RDMP" | version u8 | modality u8 (0 = X, 1 = Y) | layers u32
//! per layer: in u32 | out u32 | in*out f32 weights (row-major) | out f32 biases
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::retrieval::HashCodeMatrix;

pub const RDMP_MAGIC: &[u8; 4] = b"RDMP";
pub const RDMP_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Modality {
    X,
    Y,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::X => Modality::Y,
            Modality::Y => Modality::X,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Modality::X => 0,
            Modality::Y => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::X => "x",
            Modality::Y => "y",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "image" => Ok(Modality::X),
            "y" | "text" => Ok(Modality::Y),
            other => Err(Error::validation(format!("unknown modality {other:?}"))),
        }
    }
}

/// One affine layer, `out = input . weights + bias` with `weights` stored
/// `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Parameters of one modality's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input seen by each layer (after `ReLU` and dropout of the previous one).
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Inverted-dropout scale factors applied to each hidden layer's output.
    dropout: Vec<Option<Array2<f64>>>,
}

impl ForwardTrace {
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter gradients, shaped like the encoder's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened view in the same order as [`Encoder::param`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Encoder {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::validation(format!(
                "an encoder needs an input and an output dimension, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::validation(format!(
                "layer dimensions must be at least 1: {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("an encoder needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::validation(format!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    pair[0].fan_out(),
                    l + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::validation(format!("layer {l} bias length mismatch")));
            }
            if layer
                .weights
                .iter()
                .chain(layer.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::validation(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn code_length(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::validation(format!(
                "batch has {} features, encoder expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Inference pass without bookkeeping.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut h = batch.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weights) + &layer.bias;
            if l < last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
        self.forward_impl(batch, None::<(f64, &mut ChaCha8Rng)>)
    }

    /// Training pass with inverted dropout of rate `rate` on hidden layers.
    pub fn forward_with_dropout<R: Rng>(
        &self,
        batch: ArrayView2<f64>,
        rate: f64,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        self.forward_impl(batch, Some((rate, rng)))
    }

    fn forward_impl<R: Rng>(
        &self,
        batch: ArrayView2<f64>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            dropout: Vec::with_capacity(last),
        };
        let mut h = batch.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights) + &layer.bias;
            trace.inputs.push(h);
            if l == last {
                h = z.clone();
            } else {
                let mut a = z.mapv(relu);
                let mask = match dropout.as_mut() {
                    Some((rate, rng)) if *rate > 0.0 => {
                        let keep = 1.0 - *rate;
                        let mask = Array2::from_shape_simple_fn(a.dim(), || {
                            if rng.random_bool(keep) {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        a *= &mask;
                        Some(mask)
                    }
                    _ => None,
                };
                trace.dropout.push(mask);
                h = a;
            }
            trace.pre_activations.push(z);
        }
        Ok((h, trace))
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the encoder output is `grad_output`. The `ReLU` subgradient at 0 is 0.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: ArrayView2<f64>,
    ) -> Result<Gradients> {
        if trace.pre_activations.len() != self.layers.len() {
            return Err(Error::validation("trace does not belong to this encoder"));
        }
        let expected = (trace.batch_size(), self.code_length());
        if grad_output.dim() != expected {
            return Err(Error::validation(format!(
                "output gradient is {:?}, expected {:?}",
                grad_output.dim(),
                expected
            )));
        }
        let n_layers = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut biases = vec![Array1::zeros(0); n_layers];
        let mut delta = grad_output.to_owned();
        for l in (0..n_layers).rev() {
            weights[l] = trace.inputs[l].t().dot(&delta);
            biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].weights.t());
                if let Some(mask) = &trace.dropout[l - 1] {
                    upstream *= mask;
                }
                upstream.zip_mut_with(&trace.pre_activations[l - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = upstream;
            }
        }
        Ok(Gradients { weights, biases })
    }

    /// `params <- params - learning_rate * gradients`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.weights.len() != self.layers.len() || grads.biases.len() != self.layers.len() {
            return Err(Error::validation(
                "gradient layer count does not match encoder",
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if grads.weights[l].dim() != layer.weights.dim()
                || grads.biases[l].len() != layer.bias.len()
            {
                return Err(Error::validation(format!(
                    "gradient shape mismatch in layer {l}"
                )));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numerical {
                iteration: 0,
                message: "non-finite parameter gradient".into(),
            });
        }
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            layer.weights.scaled_add(-learning_rate, gw);
            layer.bias.scaled_add(-learning_rate, gb);
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn locate(&self, mut k: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            let nw = layer.weights.len();
            if k < nw {
                return (l, Some((k / layer.fan_out(), k % layer.fan_out())), 0);
            }
            k -= nw;
            if k < layer.bias.len() {
                return (l, None, k);
            }
            k -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `k` in flattened order: per layer, weights row-major then bias.
    pub fn param(&self, k: usize) -> f64 {
        match self.locate(k) {
            (l, Some(idx), _) => self.layers[l].weights[idx],
            (l, None, b) => self.layers[l].bias[b],
        }
    }

    pub fn set_param(&mut self, k: usize, value: f64) {
        match self.locate(k) {
            (l, Some(idx), _) => self.layers[l].weights[idx] = value,
            (l, None, b) => self.layers[l].bias[b] = value,
        }
    }

    /// Hash codes of a feature matrix.
    pub fn encode(&self, features: &FeatureMatrix) -> Result<HashCodeMatrix> {
        let codes = self.predict(features.to_f64().view())?;
        Ok(hash(codes.view()))
    }

    pub fn to_bytes(&self, modality: Modality) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(RDMP_MAGIC);
        buf.push(RDMP_VERSION);
        buf.push(modality.tag());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
            for &w in layer.weights.iter() {
                buf.extend_from_slice(&(w as f32).to_le_bytes());
            }
            for &b in layer.bias.iter() {
                buf.extend_from_slice(&(b as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path, modality: Modality) -> Result<()> {
        fs::write(path, self.to_bytes(modality)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Modality, Encoder)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| {
            if message.starts_with("truncated") {
                Error::Truncation {
                    path: path.to_path_buf(),
                    message,
                }
            } else {
                Error::Format {
                    path: path.to_path_buf(),
                    message,
                }
            }
        })
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<(Modality, Encoder), String> {
        struct Cursor<'a>(&'a [u8]);
        impl Cursor<'_> {
            fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
                if self.0.len() < n {
                    return Err("truncated checkpoint".into());
                }
                let (head, tail) = self.0.split_at(n);
                self.0 = tail;
                Ok(head)
            }
            fn u32(&mut self) -> std::result::Result<usize, String> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
            }
            fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
                let raw = self.take(n.checked_mul(4).ok_or("truncated checkpoint")?)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect())
            }
        }

        let mut cur = Cursor(bytes);
        if cur
            .take(4)
            .map_err(|_| "bad magic, expected \"RDMP\"".to_string())?
            != RDMP_MAGIC
        {
            return Err("bad magic, expected \"RDMP\"".into());
        }
        let header = cur.take(2)?;
        if header[0] != RDMP_VERSION {
            return Err(format!("unsupported version {:#04x}", header[0]));
        }
        let modality = match header[1] {
            0 => Modality::X,
            1 => Modality::Y,
            t => return Err(format!("unknown modality tag {t}")),
        };
        let count = cur.u32()?;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let fan_in = cur.u32()?;
            let fan_out = cur.u32()?;
            let weights =
                Array2::from_shape_vec((fan_in, fan_out), cur.f32s(fan_in * fan_out)?).unwrap();
            let bias = Array1::from(cur.f32s(fan_out)?);
            layers.push(Layer { weights, bias });
        }
        if !cur.0.is_empty() {
            return Err(format!("{} trailing bytes after last layer", cur.0.len()));
        }
        let encoder = Encoder::from_layers(layers).map_err(|e| e.to_string())?;
        Ok((modality, encoder))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Elementwise sign with `sign(0) = +1`.
pub fn hash(codes: ArrayView2<f64>) -> HashCodeMatrix {
    HashCodeMatrix::from_real(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    fn random_input(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = seed::stream(seed, 99);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    /// Straightforward triple-loop forward pass used as an oracle.
    fn naive_forward(enc: &Encoder, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = enc.layers().len() - 1;
        for (l, layer) in enc.layers().iter().enumerate() {
            let mut out = Array2::zeros((h.nrows(), layer.fan_out()));
            for r in 0..h.nrows() {
                for o in 0..layer.fan_out() {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.fan_in() {
                        acc += h[[r, i]] * layer.weights[[i, o]];
                    }
                    out[[r, o]] = if l < last { acc.max(0.0) } else { acc };
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn init_shapes_and_determinism() {
        let enc = Encoder::init(&[8, 4], 3).unwrap();
        assert_eq!(enc.layers()[0].weights.dim(), (8, 4));
        assert!(enc.layers()[0].bias.iter().all(|&b| b == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(enc.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert_eq!(enc, Encoder::init(&[8, 4], 3).unwrap());
        assert_ne!(enc, Encoder::init(&[8, 4], 4).unwrap());
        assert!(Encoder::init(&[8], 3).is_err());
        assert!(Encoder::init(&[8, 0, 4], 3).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut enc = Encoder::init(&[5, 7, 3], 1).unwrap();
        for k in 0..enc.num_params() {
            enc.set_param(k, 0.0);
        }
        let (out, _) = enc.forward(random_input(1, 4, 5).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_identity() {
        let enc = Encoder::from_layers(vec![Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        }])
        .unwrap();
        let x = random_input(2, 6, 3);
        assert_eq!(enc.forward(x.view()).unwrap().0, x);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let enc = Encoder::init(&[6, 9, 4], 5).unwrap();
        let x = random_input(3, 10, 6);
        let out = enc.predict(x.view()).unwrap();
        let expected = naive_forward(&enc, &x);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(enc.forward(random_input(3, 2, 5).view()).is_err());
    }

    #[test]
    fn forward_is_batch_order_equivariant() {
        let enc = Encoder::init(&[4, 8, 3], 6).unwrap();
        let x = random_input(4, 7, 4);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let a = enc.predict(x.view()).unwrap();
        let b = enc.predict(x.select(Axis(0), &perm).view()).unwrap();
        assert_eq!(a.select(Axis(0), &perm), b);
    }

    #[test]
    fn hash_rules() {
        let codes = hash(array![[-0.2, 0.7, 0.0]].view());
        assert_eq!(codes.signs(), array![[-1i8, 1, 1]]);
        let again = hash(codes.to_f64().view());
        assert_eq!(again, codes);
        let scaled = hash((array![[-0.2, 0.7, 0.0]] * 3.5).view());
        assert_eq!(scaled, codes);
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let enc = Encoder::init(&[4, 6, 3], 7).unwrap();
        let (_, trace) = enc.forward(random_input(5, 5, 4).view()).unwrap();
        let grads = enc.backward(&trace, Array2::zeros((5, 3)).view()).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
        assert!(enc.backward(&trace, Array2::zeros((5, 2)).view()).is_err());
    }

    #[test]
    fn linear_layer_sum_loss_gradient() {
        // loss = sum of outputs: dW[i][o] = sum_r x[r][i], db[o] = batch size
        let enc = Encoder::init(&[3, 2], 8).unwrap();
        let x = random_input(6, 4, 3);
        let (_, trace) = enc.forward(x.view()).unwrap();
        let grads = enc.backward(&trace, Array2::ones((4, 2)).view()).unwrap();
        let col_sums = x.sum_axis(Axis(0));
        for i in 0..3 {
            for o in 0..2 {
                assert!((grads.weights[0][[i, o]] - col_sums[i]).abs() < 1e-12);
            }
        }
        assert!(grads.biases[0].iter().all(|&b| (b - 4.0).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = <U, forward(x)> for a fixed random U
        for trial in 0..10u64 {
            let dims: Vec<usize> = match trial % 3 {
                0 => vec![5, 4],
                1 => vec![5, 7, 3],
                _ => vec![4, 6, 5, 3],
            };
            let enc = Encoder::init(&dims, trial).unwrap();
            let x = random_input(100 + trial, 6, dims[0]);
            let u = random_input(200 + trial, 6, *dims.last().unwrap());
            let (_, trace) = enc.forward(x.view()).unwrap();
            let analytic = enc.backward(&trace, u.view()).unwrap().flat();

            let loss = |e: &Encoder| (e.predict(x.view()).unwrap() * &u).sum();
            let h = 1e-4;
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = enc.clone();
                plus.set_param(k, enc.param(k) + h);
                let mut minus = enc.clone();
                minus.set_param(k, enc.param(k) - h);
                // skip parameters whose perturbation moves a ReLU input across 0
                let near_kink = [&plus, &minus].iter().any(|e| {
                    let (_, t) = e.forward(x.view()).unwrap();
                    t.pre_activations()
                        .iter()
                        .zip(trace.pre_activations())
                        .take(dims.len() - 2)
                        .any(|(p, q)| {
                            p.iter()
                                .zip(q)
                                .any(|(a, b)| (*a > 0.0) != (*b > 0.0) || b.abs() < 1e-3)
                        })
                });
                if near_kink {
                    continue;
                }
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "trial {trial} param {k}: analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dropout_forward_backward_consistent() {
        let enc = Encoder::init(&[4, 8, 3], 9).unwrap();
        let x = random_input(7, 5, 4);
        let mut rng = seed::stream(1, 1);
        let (out, trace) = enc.forward_with_dropout(x.view(), 0.5, &mut rng).unwrap();
        let mut rng = seed::stream(1, 1);
        let (again, _) = enc.forward_with_dropout(x.view(), 0.5, &mut rng).unwrap();
        assert_eq!(out, again);
        // with the mask fixed the map is piecewise linear; check a bias gradient
        let u = random_input(8, 5, 3);
        let grads = enc.backward(&trace, u.view()).unwrap();
        let (_, plain_trace) = enc.forward(x.view()).unwrap();
        let plain = enc.backward(&plain_trace, u.view()).unwrap();
        assert_eq!(grads.biases[1], plain.biases[1]);
        assert!(enc.forward_with_dropout(x.view(), 1.0, &mut rng).is_err());
    }

    #[test]
    fn sgd_step_rules() {
        let enc = Encoder::init(&[3, 4, 2], 10).unwrap();
        let (_, trace) = enc.forward(random_input(9, 3, 3).view()).unwrap();
        let grads = enc.backward(&trace, random_input(10, 3, 2).view()).unwrap();

        let mut same = enc.clone();
        same.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(same, enc);

        let as_grads = Gradients {
            weights: enc.layers().iter().map(|l| l.weights.clone()).collect(),
            biases: enc.layers().iter().map(|l| l.bias.clone()).collect(),
        };
        let mut zero = enc.clone();
        zero.sgd_step(&as_grads, 1.0).unwrap();
        assert!((0..zero.num_params()).all(|k| zero.param(k) == 0.0));

        let mut two = enc.clone();
        two.sgd_step(&grads, 0.5).unwrap();
        two.sgd_step(&grads, 0.5).unwrap();
        let mut one = enc.clone();
        one.sgd_step(&grads, 1.0).unwrap();
        for k in 0..one.num_params() {
            assert!((one.param(k) - two.param(k)).abs() < 1e-12);
        }

        let mut bad = grads.clone();
        bad.weights[0][[0, 0]] = f64::NAN;
        assert!(matches!(
            enc.clone().sgd_step(&bad, 0.1),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_at_f32_precision() {
        let enc = Encoder::init(&[5, 6, 4], 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdmp");
        enc.save(&path, Modality::Y).unwrap();
        let (modality, back) = Encoder::load(&path).unwrap();
        assert_eq!(modality, Modality::Y);
        assert_eq!(back.layer_dims(), vec![5, 6, 4]);
        for k in 0..enc.num_params() {
            assert_eq!(back.param(k), f64::from(enc.param(k) as f32));
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            Encoder::load(&path),
            Err(Error::Truncation { .. })
        ));
        fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(Encoder::load(&path), Err(Error::Format { .. })));
    }
}
