//! The trainable query embedding network.
//!
//! A small fully connected net: tanh on every hidden layer, identity on the
//! final layer, then L2 normalization so the output lands on the unit
//! sphere where gallery embeddings live. Parameters flatten to a single
//! vector (per layer: weights row-major, then biases) for the optimizer
//! and for finite-difference checks, and serialize to a versioned binary
//! file with an embedded JSON header.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{check_finite, l2_norm};
use crate::store::{get_f64s, get_u32, put_f64s};

pub const MODEL_MAGIC: [u8; 4] = *b"AQM1";
pub const MODEL_VERSION: u32 = 1;

/// Norm below which the pre-normalization output is treated as zero.
pub const PRE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs an input and an output dimension, got {0} layer sizes")]
    BadDims(usize),
    #[error("layer size must be positive")]
    ZeroLayer,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("pre-normalization output norm {norm:e} is below {floor:e}")]
    ZeroPreNorm { norm: f64, floor: f64 },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported model file version {found}")]
    VersionUnsupported { found: u32 },
    #[error("invalid model header: {0}")]
    InvalidHeader(String),
    #[error("truncated model payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    dims: Vec<usize>,
    activation: String,
}

/// Fully connected network parameters. `dims` lists the layer sizes from
/// input to output; layer `l` maps `dims[l] -> dims[l + 1]` with a
/// row-major weight matrix and a bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryModelParams {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Intermediate state of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s
    /// post-activation output. The last entry is the pre-normalization
    /// output of the identity final layer.
    activations: Vec<Vec<f64>>,
    pre_norm: f64,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Parameter gradients in the same shapes as [`QueryModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    d_weights: Vec<Vec<f64>>,
    d_biases: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(params: &QueryModelParams) -> Self {
        Self {
            d_weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.d_weights {
            for x in w {
                *x *= factor;
            }
        }
        for b in &mut self.d_biases {
            for x in b {
                *x *= factor;
            }
        }
    }

    /// Same ordering as [`QueryModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }
}

impl QueryModelParams {
    /// Seeded initialization: weights uniform in the symmetric interval of
    /// half-width `sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::BadDims(dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::ZeroLayer);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { dims: dims.to_vec(), weights, biases })
    }

    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::BadDims(dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::ZeroLayer);
        }
        let layers = dims.len() - 1;
        if weights.len() != layers {
            return Err(ModelError::ShapeMismatch { expected: layers, got: weights.len() });
        }
        if biases.len() != layers {
            return Err(ModelError::ShapeMismatch { expected: layers, got: biases.len() });
        }
        for l in 0..layers {
            let expected_w = dims[l] * dims[l + 1];
            if weights[l].len() != expected_w {
                return Err(ModelError::ShapeMismatch { expected: expected_w, got: weights[l].len() });
            }
            if biases[l].len() != dims[l + 1] {
                return Err(ModelError::ShapeMismatch { expected: dims[l + 1], got: biases[l].len() });
            }
            check_finite(&weights[l]).map_err(|_| ModelError::NonFiniteInput)?;
            check_finite(&biases[l]).map_err(|_| ModelError::NonFiniteInput)?;
        }
        Ok(Self { dims, weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers()).map(|l| self.dims[l] * self.dims[l + 1] + self.dims[l + 1]).sum()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Mutable weight access for constructing hand-built networks.
    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    fn affine(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = b.clone();
        for j in 0..fan_out {
            let row = &w[j * fan_in..(j + 1) * fan_in];
            let mut acc = 0.0;
            for i in 0..fan_in {
                acc += row[i] * input[i];
            }
            out[j] += acc;
        }
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_traced(input)?.output)
    }

    pub fn forward_traced(&self, input: &[f64]) -> Result<ForwardTrace, ModelError> {
        if input.len() != self.input_dim() {
            return Err(ModelError::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        check_finite(input).map_err(|_| ModelError::NonFiniteInput)?;
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input.to_vec());
        for l in 0..layers {
            let mut out = self.affine(l, &activations[l]);
            if l + 1 < layers {
                for x in &mut out {
                    *x = x.tanh();
                }
            }
            activations.push(out);
        }
        let pre = activations.last().expect("at least one layer");
        let pre_norm = l2_norm(pre);
        if pre_norm <= PRE_NORM_FLOOR {
            return Err(ModelError::ZeroPreNorm { norm: pre_norm, floor: PRE_NORM_FLOOR });
        }
        let output: Vec<f64> = pre.iter().map(|x| x / pre_norm).collect();
        Ok(ForwardTrace { activations, pre_norm, output })
    }

    /// Backpropagates a gradient with respect to the normalized output
    /// through the normalization, the identity final layer, and the tanh
    /// hidden layers. Components of `grad_output` parallel to the output
    /// are projected away by the normalization Jacobian.
    pub fn backward_traced(
        &self,
        trace: &ForwardTrace,
        grad_output: &[f64],
    ) -> Result<ModelGrads, ModelError> {
        let out_dim = self.output_dim();
        if grad_output.len() != out_dim {
            return Err(ModelError::ShapeMismatch { expected: out_dim, got: grad_output.len() });
        }
        check_finite(grad_output).map_err(|_| ModelError::NonFiniteInput)?;

        let q = &trace.output;
        let projected: f64 = grad_output.iter().zip(q).map(|(g, y)| g * y).sum();
        let mut delta: Vec<f64> =
            grad_output.iter().zip(q).map(|(g, y)| (g - projected * y) / trace.pre_norm).collect();

        let layers = self.num_layers();
        let mut grads = ModelGrads::zeros_like(self);
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let input = &trace.activations[l];
            let dw = &mut grads.d_weights[l];
            for j in 0..fan_out {
                let row = &mut dw[j * fan_in..(j + 1) * fan_in];
                for i in 0..fan_in {
                    row[i] = delta[j] * input[i];
                }
            }
            grads.d_biases[l].copy_from_slice(&delta);
            if l > 0 {
                let w = &self.weights[l];
                let mut upstream = vec![0.0; fan_in];
                for j in 0..fan_out {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    for i in 0..fan_in {
                        upstream[i] += row[i] * delta[j];
                    }
                }
                // The input to this layer is the previous layer's tanh output.
                for i in 0..fan_in {
                    upstream[i] *= 1.0 - input[i] * input[i];
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }

    /// Per layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::ShapeMismatch { expected: self.num_params(), got: flat.len() });
        }
        check_finite(flat).map_err(|_| ModelError::NonFiniteInput)?;
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.len();
            w.copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = ModelHeader { dims: self.dims.clone(), activation: "tanh".to_string() };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            put_f64s(&mut buf, w);
            put_f64s(&mut buf, b);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 {
            return Err(ModelError::TruncatedPayload { expected: 12, found: bytes.len() });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if magic != MODEL_MAGIC {
            return Err(ModelError::BadMagic { found: magic });
        }
        let version = get_u32(bytes, 4);
        if version != MODEL_VERSION {
            return Err(ModelError::VersionUnsupported { found: version });
        }
        let header_len = get_u32(bytes, 8) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end {
            return Err(ModelError::TruncatedPayload { expected: header_end, found: bytes.len() });
        }
        let header: ModelHeader = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| ModelError::InvalidHeader(e.to_string()))?;
        if header.activation != "tanh" {
            return Err(ModelError::InvalidHeader(format!("unknown activation {:?}", header.activation)));
        }
        if header.dims.len() < 2 {
            return Err(ModelError::BadDims(header.dims.len()));
        }
        if header.dims.iter().any(|&d| d == 0) {
            return Err(ModelError::ZeroLayer);
        }
        let param_count: usize =
            (0..header.dims.len() - 1).map(|l| header.dims[l] * header.dims[l + 1] + header.dims[l + 1]).sum();
        let expected = header_end + param_count * 8;
        if bytes.len() < expected {
            return Err(ModelError::TruncatedPayload { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(ModelError::InvalidHeader(format!(
                "{} trailing bytes after parameters",
                bytes.len() - expected
            )));
        }
        let mut offset = header_end;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..header.dims.len() - 1 {
            let wn = header.dims[l] * header.dims[l + 1];
            weights.push(get_f64s(&bytes[offset..], wn));
            offset += wn * 8;
            let bn = header.dims[l + 1];
            biases.push(get_f64s(&bytes[offset..], bn));
            offset += bn * 8;
        }
        Self::from_parts(header.dims, weights, biases)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }
}
