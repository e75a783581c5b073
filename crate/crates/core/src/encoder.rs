//! Fully connected encoder with ReLU hidden layers and an ℓ2-normalized
//! output, with a hand-written backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, Matrix, SeededRng, MIN_NORM};

static NEXT_ENCODER_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ENCODER_ID.fetch_add(1, Ordering::Relaxed)
}

/// Multi-layer perceptron `d_in → … → d_emb`.
///
/// Layer `l` computes `x · W_l + b_l` with `W_l` stored as a
/// `dims[l] × dims[l+1]` matrix. Every layer but the last is followed by a
/// ReLU; the final affine output is ℓ2-normalized row by row.
#[derive(Debug)]
pub struct MlpEncoder {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    id: u64,
    version: u64,
}

impl Clone for MlpEncoder {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            id: next_id(),
            version: 0,
        }
    }
}

impl PartialEq for MlpEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations cached by [`MlpEncoder::forward`] for one minibatch.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    encoder_id: u64,
    version: u64,
    /// Input to each layer; `layer_inputs[0]` is the batch itself.
    layer_inputs: Vec<Matrix>,
    /// Affine output of each layer before the activation.
    pre_activations: Vec<Matrix>,
    /// Norm of each output row before normalization.
    output_norms: Vec<f64>,
    /// Normalized output rows.
    outputs: Matrix,
}

impl ForwardTape {
    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    /// Output rows before ℓ2 normalization.
    pub fn raw_outputs(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Parameter gradients, shaped like the encoder's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(encoder: &MlpEncoder) -> Self {
        Self {
            weights: encoder
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: encoder.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Flat views in the same order as [`MlpEncoder::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl MlpEncoder {
    /// Zero-mean Gaussian weights with standard deviation `1/√fan_in`, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(
                "model.dims",
                "need at least an input and an output width",
            ));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::config("model.dims", format!("width {i} is zero")));
        }
        let root = SeededRng::new(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut rng = root.fork(l as u64);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            id: next_id(),
            version: 0,
        })
    }

    /// Builds an encoder from explicit parameters.
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *dims.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but previous layer has {}",
                    w.rows(),
                    dims.last().unwrap()
                )));
            }
            if b.len() != w.cols() {
                return Err(Error::Shape(format!(
                    "layer {l} bias has {} entries, expected {}",
                    b.len(),
                    w.cols()
                )));
            }
            dims.push(w.cols());
        }
        Ok(Self {
            dims,
            weights,
            biases,
            id: next_id(),
            version: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Flat views `[W_0, b_0, W_1, b_1, …]`.
    pub fn params(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    /// Mutable flat views in the order of [`params`](Self::params).
    /// Invalidates every outstanding [`ForwardTape`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.data_mut(), b.as_mut_slice()])
            .collect()
    }

    /// Runs the batch through the network and normalizes each output row.
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.num_layers() - 1;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut current = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = current.matmul(w)?;
            for r in 0..z.rows() {
                z.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
            let next = if l < last {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                z.clone()
            };
            layer_inputs.push(current);
            pre_activations.push(z);
            current = next;
        }
        current.ensure_finite("encoder output")?;
        let output_norms = l2_normalize_rows(&mut current)?;
        let tape = ForwardTape {
            encoder_id: self.id,
            version: self.version,
            layer_inputs,
            pre_activations,
            output_norms,
            outputs: current.clone(),
        };
        Ok((current, tape))
    }

    /// Embeds a batch without keeping the tape.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Back-propagates `∂L/∂outputs` to parameter gradients.
    pub fn backward(&self, tape: &ForwardTape, grad_outputs: &Matrix) -> Result<EncoderGrads> {
        if tape.encoder_id != self.id || tape.version != self.version {
            return Err(Error::StaleTape);
        }
        tape.outputs.check_same_shape(grad_outputs, "encoder backward")?;

        // Through the normalization: (I - u uᵀ) g / ‖z‖.
        let mut delta = Matrix::zeros(grad_outputs.rows(), grad_outputs.cols());
        for r in 0..delta.rows() {
            let u = tape.outputs.row(r);
            let g = grad_outputs.row(r);
            let radial = dot(g, u);
            let inv = 1.0 / tape.output_norms[r];
            for ((d, &gv), &uv) in delta.row_mut(r).iter_mut().zip(g).zip(u) {
                *d = (gv - radial * uv) * inv;
            }
        }

        let mut grads = EncoderGrads::zeros_like(self);
        for l in (0..self.num_layers()).rev() {
            grads.weights[l] = tape.layer_inputs[l].t_matmul(&delta)?;
            let db = &mut grads.biases[l];
            for r in 0..delta.rows() {
                db.iter_mut().zip(delta.row(r)).for_each(|(a, b)| *a += b);
            }
            if l > 0 {
                let mut upstream = delta.matmul_t(&self.weights[l])?;
                // ReLU subgradient at exactly 0 is 0.
                let pre = &tape.pre_activations[l - 1];
                upstream
                    .data_mut()
                    .iter_mut()
                    .zip(pre.data())
                    .for_each(|(g, &z)| {
                        if z <= 0.0 {
                            *g = 0.0
                        }
                    });
                delta = upstream;
            }
        }
        Ok(grads)
    }
}

/// Vector-Jacobian product of `z ↦ z/‖z‖` at `z`: `(I - u uᵀ) g / ‖z‖`.
pub fn normalization_vjp(z: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if z.len() != g.len() {
        return Err(Error::Shape(format!("{} vs {}", z.len(), g.len())));
    }
    let n = crate::numerics::norm(z);
    if !(n >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm: n });
    }
    let radial: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(z
        .iter()
        .zip(g)
        .map(|(&zi, &gi)| (gi - radial * zi / n) / n)
        .collect())
}
