//! Encoder, attention and decoder with exact reverse-mode gradients.
//!
//! Layout of one forward pass over a document of `N` tokens:
//!
//! ```text
//! w_1..w_N (frozen word vectors, dropout)
//!   -> forward GRU f_t and backward GRU b_t, h_t = [f_t; b_t]   (2H)
//! s_0 = tanh(W_b [f_N; b_1] + b_b)                               (H)
//! step j: a_j = attend(h, s_j, cv_j)                             (2H)
//!         s_{j+1} = GRU([E(y_{j-1}); a_j] with dropout, s_j)     (H)
//!         logits = W_o [s_{j+1}; a_j] + b_o, masked to level j   (V)
//! ```
//!
//! `cv_j` is the definition vector of the class emitted at step `j - 1`
//! (zeros at step 0) when parent-node conditioning is on.

mod attention;
mod checkpoint;
mod gru;
mod kernels;
mod model;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use kernels::{add_dot_t, add_outer, dot_t, matvec};

pub use attention::{AttentionParams, AttentionStep};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gru::{GruCellParams, GruStep};
pub use model::{masked_log_softmax, Encoded, EncoderState, LossCache, StepCache, StepOutput};

/// Random source for initialization and dropout.
pub type ModelRng = ChaCha8Rng;

pub fn model_rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word vector (and class embedding / CDV) dimension.
    pub word_dim: usize,
    /// GRU hidden units per direction.
    pub hidden: usize,
    /// Width of the attention score space.
    pub attention_dim: usize,
    /// Size of the union class vocabulary.
    pub num_classes: usize,
    /// Parent-node conditioning.
    pub pnc: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(word_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            word_dim,
            hidden,
            attention_dim: hidden,
            num_classes,
            pnc: false,
            dropout: 0.3,
        }
    }

    pub fn with_pnc(mut self, pnc: bool) -> Self {
        self.pnc = pnc;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    /// Row of the class embedding table used for the start symbol.
    pub fn start_index(&self) -> usize {
        self.num_classes
    }
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    fn matrix(name: String, m: &'a Array2<f64>) -> Self {
        Self {
            name,
            shape: m.shape().to_vec(),
            data: m.as_slice().expect("standard layout"),
        }
    }

    fn vector(name: String, v: &'a Array1<f64>) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v.as_slice().expect("standard layout"),
        }
    }
}

pub(crate) trait ParamSet {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);
}

/// Every trainable tensor. Also used as the gradient accumulator and for
/// Adam moments, since those share the parameters' shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// One row per class plus a final start-symbol row.
    pub class_embeddings: Array2<f64>,
    pub encoder_forward: GruCellParams,
    pub encoder_backward: GruCellParams,
    /// Maps `[f_N; b_1]` to the initial decoder state.
    pub bridge_w: Array2<f64>,
    pub bridge_b: Array1<f64>,
    pub attention: AttentionParams,
    pub decoder: GruCellParams,
    pub output_w: Array2<f64>,
    pub output_b: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let ModelConfig {
            word_dim: d,
            hidden: h,
            attention_dim: a,
            num_classes: v,
            pnc,
            ..
        } = config;
        Self {
            config,
            class_embeddings: Array2::zeros((v + 1, d)),
            encoder_forward: GruCellParams::zeros(d, h),
            encoder_backward: GruCellParams::zeros(d, h),
            bridge_w: Array2::zeros((h, 2 * h)),
            bridge_b: Array1::zeros(h),
            attention: AttentionParams::zeros(a, 2 * h, h, if pnc { d } else { 0 }),
            decoder: GruCellParams::zeros(d + 2 * h, h),
            output_w: Array2::zeros((v, 3 * h)),
            output_b: Array1::zeros(v),
        }
    }

    /// Uniform initialization in `[-1/√H, 1/√H]` for every tensor.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(config);
        let bound = 1.0 / (config.hidden as f64).sqrt();
        for slice in params.slices_mut() {
            for v in slice.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        out.push(TensorRef::matrix("class_embeddings".into(), &self.class_embeddings));
        self.encoder_forward.tensors("encoder.forward", &mut out);
        self.encoder_backward.tensors("encoder.backward", &mut out);
        out.push(TensorRef::matrix("bridge.w".into(), &self.bridge_w));
        out.push(TensorRef::vector("bridge.b".into(), &self.bridge_b));
        self.attention.tensors("attention", &mut out);
        self.decoder.tensors("decoder", &mut out);
        out.push(TensorRef::matrix("output.w".into(), &self.output_w));
        out.push(TensorRef::vector("output.b".into(), &self.output_b));
        out
    }

    /// Mutable flat views in the same order as [`ModelParams::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.push(self.class_embeddings.as_slice_mut().expect("standard layout"));
        self.encoder_forward.slices_mut(&mut out);
        self.encoder_backward.slices_mut(&mut out);
        out.push(self.bridge_w.as_slice_mut().expect("standard layout"));
        out.push(self.bridge_b.as_slice_mut().expect("standard layout"));
        self.attention.slices_mut(&mut out);
        self.decoder.slices_mut(&mut out);
        out.push(self.output_w.as_slice_mut().expect("standard layout"));
        out.push(self.output_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
