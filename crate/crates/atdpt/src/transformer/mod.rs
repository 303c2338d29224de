//! Compact causal sequence model with exact reverse-mode gradients and an
//! adaptive-moment optimizer; shared by the in-context victim policy and the
//! adaptive attacker.

mod adam;
mod checkpoint;
mod encode;
mod model;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::{load_params, load_tensors, save_params, save_tensors};
pub use encode::{
    encode_context, encode_entry, encode_query, token_width, ContextEntry, TokenBatch,
    TokenSequence,
};
pub use model::{backward, forward, nll_loss, nll_loss_backward, ForwardCache, InferenceState};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Maximum number of context transitions; sequences carry one extra
    /// query token in front.
    pub context_capacity: usize,
    pub input_width: usize,
    pub output_width: usize,
}

impl TransformerConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        embed_dim: usize,
        context_capacity: usize,
        input_width: usize,
        output_width: usize,
    ) -> Self {
        assert!(embed_dim % num_heads == 0, "embed_dim must divide into heads");
        assert!(context_capacity >= 1);
        Self {
            num_layers,
            num_heads,
            embed_dim,
            context_capacity,
            input_width,
            output_width,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn max_seq_len(&self) -> usize {
        self.context_capacity + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Named, shaped tensor set for the causal transformer. Gradient buffers and
/// optimizer moments reuse the same layout via `zeros_like`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: TransformerConfig,
    pub tok_w: Vec<f64>,
    pub tok_b: Vec<f64>,
    pub pos: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ModelParams {
    /// Scaled-normal initialization (std 0.02), ones for norm gains, zero
    /// output head so the initial action distribution is uniform.
    pub fn init(cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut rand_vec = |n: usize| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: rand_vec(d * d),
                wk: rand_vec(d * d),
                wv: rand_vec(d * d),
                wo: rand_vec(d * d),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: rand_vec(4 * d * d),
                b1: vec![0.0; 4 * d],
                w2: rand_vec(d * 4 * d),
                b2: vec![0.0; d],
            })
            .collect();
        ModelParams {
            cfg,
            tok_w: rand_vec(d * cfg.input_width),
            tok_b: vec![0.0; d],
            pos: rand_vec(cfg.max_seq_len() * d),
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head_w: vec![0.0; cfg.output_width * d],
            head_b: vec![0.0; cfg.output_width],
        }
    }

    pub fn zeros_like(cfg: TransformerConfig) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_g: vec![0.0; d],
                ln1_b: vec![0.0; d],
                wq: vec![0.0; d * d],
                wk: vec![0.0; d * d],
                wv: vec![0.0; d * d],
                wo: vec![0.0; d * d],
                ln2_g: vec![0.0; d],
                ln2_b: vec![0.0; d],
                w1: vec![0.0; 4 * d * d],
                b1: vec![0.0; 4 * d],
                w2: vec![0.0; d * 4 * d],
                b2: vec![0.0; d],
            })
            .collect();
        ModelParams {
            cfg,
            tok_w: vec![0.0; d * cfg.input_width],
            tok_b: vec![0.0; d],
            pos: vec![0.0; cfg.max_seq_len() * d],
            layers,
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            head_w: vec![0.0; cfg.output_width * d],
            head_b: vec![0.0; cfg.output_width],
        }
    }

    /// Tensor dims for checkpointing; order defines the canonical layout.
    pub fn named_shapes(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let mut out = vec![
            ("tok_w".into(), vec![d, cfg.input_width]),
            ("tok_b".into(), vec![d]),
            ("pos".into(), vec![cfg.max_seq_len(), d]),
        ];
        for i in 0..cfg.num_layers {
            for (suffix, dims) in [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w1", vec![4 * d, d]),
                ("b1", vec![4 * d]),
                ("w2", vec![d, 4 * d]),
                ("b2", vec![d]),
            ] {
                out.push((format!("layer{i}.{suffix}"), dims));
            }
        }
        out.push(("lnf_g".into(), vec![d]));
        out.push(("lnf_b".into(), vec![d]));
        out.push(("head_w".into(), vec![cfg.output_width, d]));
        out.push(("head_b".into(), vec![cfg.output_width]));
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_w, &self.tok_b, &self.pos];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1,
                &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_w, &mut self.tok_b, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn accumulate(&mut self, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every tensor (used for gradient clipping).
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
    }
}
