//! Small dense networks and everything needed to train them: static and
//! adversarially trained classifiers, clean/adversarial discriminators, a
//! denoising score network, and PCA activation embeddings.

pub mod data;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{Dataset, DatasetKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// A dense feed-forward network `R^d -> R^out` with per-layer activation taps.
///
/// `widths[0]` is the input dimension, the rest are hidden widths; the final
/// affine layer maps to `num_classes` raw logits (no output activation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub seed: u64,
}

pub fn init_classifier(widths: &[usize], num_classes: usize, seed: u64) -> Result<Classifier> {
    init_network(widths, num_classes, seed, Activation::Relu)
}

pub fn init_network(
    widths: &[usize],
    out_dim: usize,
    seed: u64,
    activation: Activation,
) -> Result<Classifier> {
    if widths.is_empty() {
        return Err(Error::invalid("widths must be non-empty"));
    }
    if out_dim < 1 {
        return Err(Error::invalid("output dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims: Vec<usize> = widths.to_vec();
    dims.push(out_dim);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        weights.push(Tensor::matrix(fan_out, fan_in, w)?);
        biases.push(Tensor::vector(vec![0.0; fan_out]));
    }
    Ok(Classifier {
        widths: widths.to_vec(),
        num_classes: out_dim,
        activation,
        weights,
        biases,
        seed,
    })
}

impl Classifier {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn activate(&self, v: f64) -> f64 {
        match self.activation {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Plain forward pass; no tape, no counters.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_taps(x).0
    }

    /// Forward pass returning logits and every hidden activation (post
    /// nonlinearity), in layer order.
    pub fn forward_taps(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut h = x.clone();
        let mut taps = Vec::new();
        let last = self.num_layers() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; m];
            for r in 0..m {
                let row = &w.data()[r * n..(r + 1) * n];
                out[r] = row.iter().zip(h.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[r];
            }
            h = Tensor::vector(out);
            if i < last {
                h = h.map(|v| self.activate(v));
                taps.push(h.clone());
            }
        }
        (h, taps)
    }

    pub fn predict(&self, x: &Tensor) -> usize {
        self.forward(x).argmax() + 1
    }

    /// Appends the network to a graph with parameters baked in as constants.
    pub fn graph_logits(&self, b: &mut GraphBuilder, x: NodeId) -> NodeId {
        self.graph_logits_taps(b, x).0
    }

    pub fn graph_logits_taps(&self, b: &mut GraphBuilder, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let mut h = x;
        let mut taps = Vec::new();
        let last = self.num_layers() - 1;
        for (i, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wc = b.constant(w.clone());
            let bc = b.constant(bias.clone());
            h = b.affine(h, wc, bc);
            if i < last {
                h = match self.activation {
                    Activation::Relu => b.relu(h),
                    Activation::Tanh => b.tanh(h),
                };
                taps.push(h);
            }
        }
        (h, taps)
    }

    /// Hidden-layer widths, one per tapped activation.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..]
    }

    /// Appends the network with an additive offset node applied to each
    /// hidden activation before it feeds the next layer. Returns the logits
    /// node and the offset-applied activation nodes, in layer order.
    pub fn graph_logits_with_offsets(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        offsets: &[NodeId],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let taps = self.num_layers() - 1;
        if offsets.len() != taps {
            return Err(Error::invalid(format!(
                "expected {taps} activation offsets, got {}",
                offsets.len()
            )));
        }
        let mut h = x;
        let mut controlled = Vec::with_capacity(taps);
        for (i, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wc = b.constant(w.clone());
            let bc = b.constant(bias.clone());
            h = b.affine(h, wc, bc);
            if i < taps {
                h = match self.activation {
                    Activation::Relu => b.relu(h),
                    Activation::Tanh => b.tanh(h),
                };
                h = b.add(h, offsets[i]);
                controlled.push(h);
            }
        }
        Ok((h, controlled))
    }

    /// Appends the network with parameters as graph inputs (for training).
    /// Returns the logits node and the param input nodes in update order.
    pub fn graph_logits_param_inputs(&self, b: &mut GraphBuilder, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let mut h = x;
        let mut params = Vec::new();
        let last = self.num_layers() - 1;
        for (i, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wn = b.input(w.shape().to_vec());
            let bn = b.input(bias.shape().to_vec());
            params.push(wn);
            params.push(bn);
            h = b.affine(h, wn, bn);
            if i < last {
                h = match self.activation {
                    Activation::Relu => b.relu(h),
                    Activation::Tanh => b.tanh(h),
                };
            }
        }
        (h, params)
    }

    /// Parameter tensors in the same order as `graph_logits_param_inputs`.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        for (i, chunk) in params.chunks(2).enumerate() {
            self.weights[i] = chunk[0].clone();
            self.biases[i] = chunk[1].clone();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscriminatorMode {
    /// Single output: probability that the input is adversarially perturbed.
    Aid,
    /// K+1 outputs: index 0 flags adversarial inputs, 1..=K are class logits.
    Atld,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Classifier,
    pub mode: DiscriminatorMode,
}

impl Discriminator {
    /// Scalar "adversarialness" logit (AID) or logit of output 0 (ATLD).
    pub fn adversarial_logit(&self, x: &Tensor) -> f64 {
        self.net.forward(x).data()[0]
    }

    pub fn adversarial_probability(&self, x: &Tensor) -> f64 {
        match self.mode {
            DiscriminatorMode::Aid => sigmoid(self.adversarial_logit(x)),
            DiscriminatorMode::Atld => {
                let z = self.net.forward(x);
                let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.data().iter().map(|v| (v - m).exp()).collect();
                exps[0] / exps.iter().sum::<f64>()
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Denoising score network `s: R^d -> R^d` trained at noise scale `sigma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreNetwork {
    pub net: Classifier,
    pub sigma: f64,
}

impl ScoreNetwork {
    pub fn score(&self, x: &Tensor) -> Tensor {
        self.net.forward(x)
    }
}

/// Orthonormal top-r principal subspace of a set of activations.
///
/// `rows` holds the r principal directions as orthonormal rows (r x d);
/// decoding uses the transpose, so decode . encode is the orthogonal
/// projection onto the subspace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearEmbedding {
    pub mean: Tensor,
    pub rows: Tensor,
}

impl LinearEmbedding {
    pub fn rank(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn encode(&self, h: &Tensor) -> Tensor {
        let centered = h.sub(&self.mean);
        let (r, d) = (self.rank(), self.dim());
        let mut z = vec![0.0; r];
        for i in 0..r {
            z[i] = self.rows.data()[i * d..(i + 1) * d]
                .iter()
                .zip(centered.data())
                .map(|(a, b)| a * b)
                .sum();
        }
        Tensor::vector(z)
    }

    pub fn decode(&self, z: &Tensor) -> Tensor {
        let (r, d) = (self.rank(), self.dim());
        let mut h = self.mean.data().to_vec();
        for i in 0..r {
            let zi = z.data()[i];
            for j in 0..d {
                h[j] += self.rows.data()[i * d + j] * zi;
            }
        }
        Tensor::vector(h)
    }

    pub fn reconstruct(&self, h: &Tensor) -> Tensor {
        self.decode(&self.encode(h))
    }
}

/// Principal directions of centered activations, via a dense symmetric
/// eigendecomposition of the covariance.
pub fn fit_pca_embedding(activations: &[Tensor], r: usize) -> Result<LinearEmbedding> {
    if activations.is_empty() {
        return Err(Error::invalid("no activations provided"));
    }
    let d = activations[0].len();
    let n = activations.len();
    if r > d {
        return Err(Error::invalid(format!("rank {r} exceeds dimension {d}")));
    }
    if n < r {
        return Err(Error::invalid(format!("need at least {r} samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for a in activations {
        for (m, &v) in mean.iter_mut().zip(a.data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for a in activations {
        let c: Vec<f64> = a.data().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j] / n as f64;
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-10 * top.max(1e-30);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if r > rank {
        return Err(Error::invalid(format!(
            "requested rank {r} exceeds numerical rank {rank} of the activations"
        )));
    }
    let mut rows = vec![0.0; r * d];
    for (out_row, &col) in order.iter().take(r).enumerate() {
        for j in 0..d {
            rows[out_row * d + j] = eig.eigenvectors[(j, col)];
        }
    }
    Ok(LinearEmbedding { mean: Tensor::vector(mean), rows: Tensor::matrix(r, d, rows)? })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Inner-attack budget for adversarial training (steps of size eps/4).
    pub inner_attack_steps: usize,
}

impl TrainConfig {
    pub fn quick(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            seed,
            inner_attack_steps: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

mod checkpoint {
    use super::*;
    use serde::de::DeserializeOwned;
    use std::path::Path;

    pub const CHECKPOINT_VERSION: u32 = 1;

    /// Versioned JSON model record; round-trips bit-exactly.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Checkpoint<T> {
        pub version: u32,
        pub config_digest: String,
        pub model: T,
    }

    pub fn save_checkpoint<T: Serialize>(path: &Path, model: &T, digest: &str) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_digest: digest.to_string(),
            model,
        };
        let json = serde_json::to_string_pretty(&ck)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<Checkpoint<T>> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint<T> = serde_json::from_str(&json)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }
}

mod train;
pub use train::{
    clean_accuracy, train_adversarial, train_discriminator, train_score_network, train_standard,
    TrainedDiscriminator, TrainedScore,
};
