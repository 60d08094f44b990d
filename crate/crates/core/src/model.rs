//! Decoder-only transformer: pre-norm residual blocks with RMS
//! normalization, rotary position encoding on q/k, causal attention, and a
//! SiLU two-matrix MLP. There is no final normalization before the lm_head,
//! so a model whose blocks are all zeros maps token embeddings straight
//! through to `embedding · lm_head^T`.
//!
//! Weights are stored output-major (rows = output channels); every linear
//! layer may independently be dense f32 or group-quantized, and the forward
//! pass is identical either way. All paths are sequential and
//! allocation-deterministic: the same weights and tokens produce bit-equal
//! logits on every call.

use crate::error::{Error, Result};
use crate::matrix::{rms_norm, silu, softmax_in_place, Matrix};
use crate::quant::{quantized_matmul_nt, QuantizedTensor};
use crate::tokenizer;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Rotary position encoding base.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "head dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        // Three blocks are protected from pruning; fewer leaves nothing to do.
        if self.n_layers < 3 {
            return Err(Error::InvalidConfig(format!(
                "n_layers {} < 3",
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A linear layer's weights: dense f32 or bit-packed quantized. Both apply
/// as `y = x W^T` with W output-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Dense(Matrix),
    Quantized(QuantizedTensor),
}

/// Callback receiving each linear layer's input matrix, keyed by layer name.
pub type LayerHook<'a> = &'a mut dyn FnMut(&str, &Matrix);

impl Weight {
    pub fn out_dim(&self) -> usize {
        match self {
            Weight::Dense(m) => m.rows(),
            Weight::Quantized(q) => q.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Weight::Dense(m) => m.cols(),
            Weight::Quantized(q) => q.cols(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Weight::Quantized(_))
    }

    pub fn param_count(&self) -> u64 {
        (self.out_dim() * self.in_dim()) as u64
    }

    /// `x (t x in) -> (t x out)`.
    pub fn apply_nt(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Weight::Dense(m) => x.matmul_nt(m),
            Weight::Quantized(q) => quantized_matmul_nt(x, q),
        }
    }

    /// Dense view; error on quantized weights so callers that need raw
    /// floats (training, re-quantization) fail loudly.
    pub fn as_dense(&self) -> Result<&Matrix> {
        match self {
            Weight::Dense(m) => Ok(m),
            Weight::Quantized(_) => Err(Error::QuantizedUnsupported(
                "dense weight access".into(),
            )),
        }
    }

    /// Sum of |w| over the weight's effective (dequantized) values.
    pub fn abs_sum(&self) -> f64 {
        match self {
            Weight::Dense(m) => m.abs_sum(),
            Weight::Quantized(q) => q.dequantize().abs_sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub wq: Weight,
    pub wk: Weight,
    pub wv: Weight,
    pub wo: Weight,
    pub w_up: Weight,
    pub w_down: Weight,
    pub norm_attn: Vec<f32>,
    pub norm_mlp: Vec<f32>,
}

impl TransformerBlock {
    /// Block with every projection zeroed: contributes exactly the identity
    /// on the residual stream.
    pub fn pass_through(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        TransformerBlock {
            wq: Weight::Dense(Matrix::zeros(d, d)),
            wk: Weight::Dense(Matrix::zeros(d, d)),
            wv: Weight::Dense(Matrix::zeros(d, d)),
            wo: Weight::Dense(Matrix::zeros(d, d)),
            w_up: Weight::Dense(Matrix::zeros(cfg.d_ff, d)),
            w_down: Weight::Dense(Matrix::zeros(d, cfg.d_ff)),
            norm_attn: vec![1.0; d],
            norm_mlp: vec![1.0; d],
        }
    }

    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        TransformerBlock {
            wq: rand_proj(d, d, rng),
            wk: rand_proj(d, d, rng),
            wv: rand_proj(d, d, rng),
            wo: rand_proj(d, d, rng),
            w_up: rand_proj(cfg.d_ff, d, rng),
            w_down: rand_proj(d, cfg.d_ff, rng),
            norm_attn: vec![1.0; d],
            norm_mlp: vec![1.0; d],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let checks = [
            ("wq", self.wq.out_dim(), d, self.wq.in_dim(), d),
            ("wk", self.wk.out_dim(), d, self.wk.in_dim(), d),
            ("wv", self.wv.out_dim(), d, self.wv.in_dim(), d),
            ("wo", self.wo.out_dim(), d, self.wo.in_dim(), d),
            ("w_up", self.w_up.out_dim(), cfg.d_ff, self.w_up.in_dim(), d),
            (
                "w_down",
                self.w_down.out_dim(),
                d,
                self.w_down.in_dim(),
                cfg.d_ff,
            ),
        ];
        for (name, got_out, want_out, got_in, want_in) in checks {
            if got_out != want_out || got_in != want_in {
                return Err(Error::Shape(format!(
                    "{name}: {got_out}x{got_in}, expected {want_out}x{want_in}"
                )));
            }
        }
        if self.norm_attn.len() != d || self.norm_mlp.len() != d {
            return Err(Error::Shape("norm vector length != d_model".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
            + self.w_up.param_count()
            + self.w_down.param_count()
            + (self.norm_attn.len() + self.norm_mlp.len()) as u64
    }

    pub fn abs_sum(&self) -> f64 {
        self.wq.abs_sum()
            + self.wk.abs_sum()
            + self.wv.abs_sum()
            + self.wo.abs_sum()
            + self.w_up.abs_sum()
            + self.w_down.abs_sum()
            + self.norm_attn.iter().map(|v| v.abs() as f64).sum::<f64>()
            + self.norm_mlp.iter().map(|v| v.abs() as f64).sum::<f64>()
    }

    /// Linear-layer weights with their positional names under block `idx`.
    pub fn linears(&self, idx: usize) -> [(String, &Weight); 6] {
        [
            (format!("block{idx}.attn.q"), &self.wq),
            (format!("block{idx}.attn.k"), &self.wk),
            (format!("block{idx}.attn.v"), &self.wv),
            (format!("block{idx}.attn.o"), &self.wo),
            (format!("block{idx}.mlp.up"), &self.w_up),
            (format!("block{idx}.mlp.down"), &self.w_down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// vocab x d_model lookup table; never quantized.
    pub token_embedding: Matrix,
    pub blocks: Vec<TransformerBlock>,
    pub lm_head: Weight,
    /// Original index of each surviving block; strictly increasing.
    pub block_ids: Vec<usize>,
}

impl ModelCheckpoint {
    pub fn random(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let token_embedding = Matrix::random(cfg.vocab_size, cfg.d_model, 0.1, rng);
        let blocks: Vec<TransformerBlock> =
            (0..cfg.n_layers).map(|_| TransformerBlock::random(&cfg, rng)).collect();
        let lm_head = Weight::Dense(Matrix::random(
            cfg.vocab_size,
            cfg.d_model,
            1.0 / (cfg.d_model as f32).sqrt(),
            rng,
        ));
        let model = ModelCheckpoint {
            block_ids: (0..cfg.n_layers).collect(),
            config: cfg,
            token_embedding,
            blocks,
            lm_head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} blocks but n_layers = {}",
                self.blocks.len(),
                self.config.n_layers
            )));
        }
        if self.block_ids.len() != self.blocks.len()
            || !self.block_ids.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::InvalidConfig(
                "block_ids must be strictly increasing, one per block".into(),
            ));
        }
        if self.token_embedding.rows() != self.config.vocab_size
            || self.token_embedding.cols() != self.config.d_model
        {
            return Err(Error::Shape("token embedding shape".into()));
        }
        if self.lm_head.out_dim() != self.config.vocab_size
            || self.lm_head.in_dim() != self.config.d_model
        {
            return Err(Error::Shape("lm_head shape".into()));
        }
        for b in &self.blocks {
            b.validate(&self.config)?;
        }
        Ok(())
    }

    /// Block indices that may never be pruned: first, second, last.
    pub fn protected_blocks(&self) -> BTreeSet<usize> {
        [0, 1, self.blocks.len() - 1].into_iter().collect()
    }

    pub fn param_count(&self) -> u64 {
        (self.token_embedding.rows() * self.token_embedding.cols()) as u64
            + self.blocks.iter().map(|b| b.param_count()).sum::<u64>()
            + self.lm_head.param_count()
    }

    /// Names of all quantizable linear layers in forward order.
    pub fn linear_layer_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.blocks.len() * 6 + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            names.extend(b.linears(i).map(|(n, _)| n));
        }
        names.push("lm_head".into());
        names
    }

    pub fn is_quantized(&self) -> bool {
        self.lm_head.is_quantized()
            || self.blocks.iter().any(|b| {
                b.linears(0).iter().any(|(_, w)| w.is_quantized())
            })
    }

    pub(crate) fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &id) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.token_embedding.row(id as usize));
        }
        x
    }

    /// Full forward pass. `capture` collects the residual stream entering
    /// block 0 and leaving every block (n_layers + 1 states); `hook`
    /// receives the input matrix of every linear layer by name.
    fn forward_inner(
        &self,
        tokens: &[u32],
        capture: bool,
        mut hook: Option<LayerHook>,
    ) -> Result<(Matrix, Option<Vec<Matrix>>)> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let (t, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let inv_sqrt_hd = 1.0 / (hd as f32).sqrt();
        let inv_freq: Vec<f64> = (0..hd / 2)
            .map(|p| ROPE_BASE.powf(-2.0 * p as f64 / hd as f64))
            .collect();

        let mut x = self.embed(tokens);
        let mut captured = capture.then(|| vec![x.clone()]);

        let mut normed = Matrix::zeros(t, d);
        for (bi, block) in self.blocks.iter().enumerate() {
            for i in 0..t {
                rms_norm(x.row(i), &block.norm_attn, normed.row_mut(i));
            }
            if let Some(h) = hook.as_deref_mut() {
                h(&format!("block{bi}.attn.q"), &normed);
                h(&format!("block{bi}.attn.k"), &normed);
                h(&format!("block{bi}.attn.v"), &normed);
            }
            let mut q = block.wq.apply_nt(&normed)?;
            let mut k = block.wk.apply_nt(&normed)?;
            let v = block.wv.apply_nt(&normed)?;
            apply_rope(&mut q, hd, &inv_freq);
            apply_rope(&mut k, hd, &inv_freq);

            // Causal attention, one query row at a time.
            let mut ctx = Matrix::zeros(t, d);
            let mut scores = vec![0.0f32; t];
            for h in 0..cfg.n_heads {
                let lo = h * hd;
                for i in 0..t {
                    let qi = &q.row(i)[lo..lo + hd];
                    for j in 0..=i {
                        let kj = &k.row(j)[lo..lo + hd];
                        scores[j] = qi
                            .iter()
                            .zip(kj.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f32>()
                            * inv_sqrt_hd;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    for j in 0..=i {
                        let p = scores[j];
                        let vj = &v.row(j)[lo..lo + hd];
                        let out = &mut ctx.row_mut(i)[lo..lo + hd];
                        for (o, &vv) in out.iter_mut().zip(vj.iter()) {
                            *o += p * vv;
                        }
                    }
                }
            }
            if let Some(h) = hook.as_deref_mut() {
                h(&format!("block{bi}.attn.o"), &ctx);
            }
            let o = block.wo.apply_nt(&ctx)?;
            x = x.add(&o)?;

            for i in 0..t {
                rms_norm(x.row(i), &block.norm_mlp, normed.row_mut(i));
            }
            if let Some(h) = hook.as_deref_mut() {
                h(&format!("block{bi}.mlp.up"), &normed);
            }
            let mut up = block.w_up.apply_nt(&normed)?;
            for vv in up.data_mut() {
                *vv = silu(*vv);
            }
            if let Some(h) = hook.as_deref_mut() {
                h(&format!("block{bi}.mlp.down"), &up);
            }
            let down = block.w_down.apply_nt(&up)?;
            x = x.add(&down)?;

            if let Some(c) = captured.as_mut() {
                c.push(x.clone());
            }
        }

        if let Some(h) = hook {
            h("lm_head", &x);
        }
        let logits = self.lm_head.apply_nt(&x)?;
        Ok((logits, captured))
    }

    /// Logits for a token sequence, shape seq_len x vocab.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_inner(tokens, false, None)?.0)
    }

    /// Logits plus the residual-stream states entering block 0 and leaving
    /// each block (n_layers + 1 matrices).
    pub fn forward_captured(&self, tokens: &[u32]) -> Result<(Matrix, Vec<Matrix>)> {
        let (logits, captured) = self.forward_inner(tokens, true, None)?;
        Ok((logits, captured.unwrap()))
    }

    /// Forward pass that reports every linear layer's input matrix to
    /// `hook`, keyed by layer name. Drives activation-statistics capture.
    pub fn forward_recorded(&self, tokens: &[u32], hook: LayerHook) -> Result<Matrix> {
        Ok(self.forward_inner(tokens, false, Some(hook))?.0)
    }

    /// Greedy decoding with optional end-of-sequence stopping. Generation
    /// also stops silently at max_seq_len. Ties break to the lowest id.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        max_new: usize,
        stop_at_eos: bool,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt".into()));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.forward(&seq)?;
            let last = logits.row(logits.rows() - 1);
            let mut best = 0usize;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            seq.push(best as u32);
            if stop_at_eos && best as u32 == tokenizer::EOS {
                break;
            }
        }
        Ok(seq)
    }

    /// Greedy decoding, stopping at EOS or after `max_new` tokens.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.generate_greedy(prompt, max_new, true)
    }

    /// New checkpoint with the given (current-position) blocks deleted.
    /// The first two and last blocks are protected; the input is untouched.
    pub fn remove_blocks(&self, indices: &BTreeSet<usize>) -> Result<ModelCheckpoint> {
        let protected = self.protected_blocks();
        for &idx in indices {
            if idx >= self.blocks.len() {
                return Err(Error::UnknownBlock(idx));
            }
            if protected.contains(&idx) {
                return Err(Error::ProtectedBlock(idx));
            }
        }
        let keep: Vec<usize> = (0..self.blocks.len())
            .filter(|i| !indices.contains(i))
            .collect();
        if keep.is_empty() {
            return Err(Error::DegenerateModel);
        }
        let mut config = self.config;
        config.n_layers = keep.len();
        let model = ModelCheckpoint {
            config,
            token_embedding: self.token_embedding.clone(),
            blocks: keep.iter().map(|&i| self.blocks[i].clone()).collect(),
            lm_head: self.lm_head.clone(),
            block_ids: keep.iter().map(|&i| self.block_ids[i]).collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

fn rand_proj(out: usize, inp: usize, rng: &mut impl Rng) -> Weight {
    let scale = 1.0 / (inp as f32).sqrt();
    Weight::Dense(Matrix::random(out, inp, scale, rng))
}

/// Rotate q/k pairs in place: position i, pair p gets angle
/// i * ROPE_BASE^(-2p/head_dim).
pub(crate) fn apply_rope(m: &mut Matrix, head_dim: usize, inv_freq: &[f64]) {
    let cols = m.cols();
    let n_heads = cols / head_dim;
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        for (p, &f) in inv_freq.iter().enumerate() {
            let angle = i as f64 * f;
            let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
            for h in 0..n_heads {
                let a = row[h * head_dim + 2 * p];
                let b = row[h * head_dim + 2 * p + 1];
                row[h * head_dim + 2 * p] = a * cos - b * sin;
                row[h * head_dim + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}
