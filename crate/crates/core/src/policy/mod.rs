//! A small causal-attention policy over a vision-prefix token layout, with
//! hand-written reverse-mode gradients, Adam and checkpoint persistence.
//!
//! Parameters live in one flat `f64` buffer; [`Layout`] hands out typed views.
//! Masks and output rows are indexed by the *predicted* position: row `r` of
//! the logits is the distribution of token `r + 1`, and a blocked pair
//! `(q, key)` stops the prediction of token `q` from seeing token `key`.

mod checkpoint;
mod model;
mod optim;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use model::{
    backward, forward, grad, AttentionMaskSpec, ForwardCache, ForwardOptions, LossItem, LossSpec,
};
pub use optim::{Adam, AdamState};
pub use sample::{sample_token, Temperature};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("sequence length {len} exceeds max_len {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("token {0} outside the vocabulary")]
    InvalidToken(usize),
    #[error("mask pair ({0}, {1}) outside the sequence")]
    InvalidMask(usize, usize),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 32,
            d_ff: 64,
            n_layers: 2,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerBlocks {
    wq: Block,
    wk: Block,
    wv: Block,
    wo: Block,
    w1: Block,
    b1: Block,
    w2: Block,
    b2: Block,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub config: ModelConfig,
    embed: Block,
    pos: Block,
    layers: Vec<LayerBlocks>,
    w_out: Block,
    b_out: Block,
    total: usize,
}

impl Layout {
    pub fn new(config: ModelConfig) -> Self {
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let (v, d, f) = (config.vocab, config.d_model, config.d_ff);
        let embed = take(v, d);
        let pos = take(config.max_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerBlocks {
                wq: take(d, d),
                wk: take(d, d),
                wv: take(d, d),
                wo: take(d, d),
                w1: take(d, f),
                b1: take(1, f),
                w2: take(f, d),
                b2: take(1, d),
            })
            .collect();
        let w_out = take(d, v);
        let b_out = take(1, v);
        Self {
            config,
            embed,
            pos,
            layers,
            w_out,
            b_out,
            total: offset,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    /// Flat index range of one token's embedding row.
    pub fn embedding_row(&self, token: usize) -> std::ops::Range<usize> {
        let start = self.embed.offset + token * self.embed.cols;
        start..start + self.embed.cols
    }

    /// Flat index range of a layer's attention output projection.
    pub fn attention_output(&self, layer: usize) -> std::ops::Range<usize> {
        let b = self.layers[layer].wo;
        b.offset..b.offset + b.len()
    }

    /// Flat ranges of bias vectors (initialized to zero).
    fn biases(&self) -> Vec<Block> {
        let mut out: Vec<Block> = self.layers.iter().flat_map(|l| [l.b1, l.b2]).collect();
        out.push(self.b_out);
        out
    }
}

/// Flat parameter (or gradient) buffer plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let layout = Layout::new(config);
        let data = vec![0.0; layout.total];
        Self { layout, data }
    }

    /// Gaussian(0, INIT_STD) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for x in p.data.iter_mut() {
            *x = normal.sample(rng);
        }
        for b in p.layout.biases() {
            p.data[b.offset..b.offset + b.len()].fill(0.0);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.layout.config
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    fn mat(&self, b: Block) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((b.rows, b.cols), &self.data[b.offset..b.offset + b.len()])
            .expect("layout block")
    }

    fn vec(&self, b: Block) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[b.offset..b.offset + b.len()])
    }

    fn mat_mut(&mut self, b: Block) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut self.data[b.offset..b.offset + b.len()])
            .expect("layout block")
    }

    fn vec_mut(&mut self, b: Block) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[b.offset..b.offset + b.len()])
    }
}
