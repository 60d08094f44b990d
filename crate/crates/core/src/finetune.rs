//! Low-rank adapter fine-tuning and full-weight pretraining.
//!
//! Training runs in a private f64 engine with hand-written backprop so
//! analytic gradients can be verified against central finite differences.
//! Adapters follow W_eff = W + (alpha/rank) * B * A with B zero-initialized,
//! which leaves the adapted forward pass bit-identical to the base model
//! until the first optimizer step. Merging folds the product back into the
//! dense weights; the usual recovery recipe is prune, fine-tune, merge,
//! then quantize.

use crate::error::{Error, Result};
use crate::matrix::{rms_norm, silu, softmax_in_place, Matrix, RMS_EPS};
use crate::model::{apply_rope, ModelCheckpoint, ModelConfig, Weight, ROPE_BASE};
use crate::tokenizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    /// Layer-name suffixes to adapt ("attn.q", "mlp.down", ...);
    /// None adapts every block linear.
    pub targets: Option<Vec<String>>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 8.0,
            targets: None,
            lr: 1e-2,
            steps: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    /// Alternate preset: lower rank, stronger scaling.
    pub fn preset_r8_alpha32() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 32.0,
            ..AdapterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig("adapter alpha must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    fn wants(&self, layer: &str) -> bool {
        match &self.targets {
            None => true,
            Some(ts) => ts.iter().any(|t| layer.ends_with(t.as_str())),
        }
    }
}

/// Full-weight training settings (pretraining a toy model from scratch).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            steps: 500,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Batch loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// One low-rank pair. `a` is rank x in, `b` is out x rank, and the delta
/// applied to the layer is `scale * b * a`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f32,
}

/// A dense model plus unmerged adapters, keyed by layer name.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub base: ModelCheckpoint,
    pub adapters: BTreeMap<String, Adapter>,
}

/// Attach zero-initialized adapters to the targeted block linears.
/// A is random (uniform, 1/sqrt(in) half-width), B is zero.
pub fn attach_adapters(model: &ModelCheckpoint, cfg: &AdapterConfig) -> Result<AdaptedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapters = BTreeMap::new();
    for (i, block) in model.blocks.iter().enumerate() {
        for (name, w) in block.linears(i) {
            if !cfg.wants(&name) {
                continue;
            }
            let dense = w.as_dense().map_err(|_| {
                Error::QuantizedUnsupported(format!("adapter target {name} is quantized"))
            })?;
            let (out, inp) = (dense.rows(), dense.cols());
            if cfg.rank > out.min(inp) {
                return Err(Error::InvalidConfig(format!(
                    "rank {} exceeds layer {name} ({out}x{inp})",
                    cfg.rank
                )));
            }
            let half_width = 1.0 / (inp as f32).sqrt();
            adapters.insert(
                name,
                Adapter {
                    a: Matrix::random(cfg.rank, inp, half_width, &mut rng),
                    b: Matrix::zeros(out, cfg.rank),
                    scale: cfg.alpha / cfg.rank as f32,
                },
            );
        }
    }
    if adapters.is_empty() {
        return Err(Error::InvalidConfig("no layers matched adapter targets".into()));
    }
    Ok(AdaptedModel {
        base: model.clone(),
        adapters,
    })
}

impl AdaptedModel {
    fn apply_site(&self, name: &str, w: &Weight, x: &Matrix) -> Result<Matrix> {
        let mut y = w.apply_nt(x)?;
        if let Some(ad) = self.adapters.get(name) {
            let xa = x.matmul_nt(&ad.a)?;
            let delta = xa.matmul_nt(&ad.b)?;
            // Element-wise skip of exact zeros keeps a zero-initialized
            // adapter from perturbing the base output in any bit.
            for (yv, &dv) in y.data_mut().iter_mut().zip(delta.data()) {
                if dv != 0.0 {
                    *yv += ad.scale * dv;
                }
            }
        }
        Ok(y)
    }

    /// Forward pass with adapter deltas added at each adapted layer.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        let model = &self.base;
        model.validate_tokens(tokens)?;
        let cfg = &model.config;
        let (t, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let inv_sqrt_hd = 1.0 / (hd as f32).sqrt();
        let inv_freq: Vec<f64> = (0..hd / 2)
            .map(|p| ROPE_BASE.powf(-2.0 * p as f64 / hd as f64))
            .collect();

        let mut x = model.embed(tokens);
        let mut normed = Matrix::zeros(t, d);
        for (bi, block) in model.blocks.iter().enumerate() {
            for i in 0..t {
                rms_norm(x.row(i), &block.norm_attn, normed.row_mut(i));
            }
            let mut q = self.apply_site(&format!("block{bi}.attn.q"), &block.wq, &normed)?;
            let mut k = self.apply_site(&format!("block{bi}.attn.k"), &block.wk, &normed)?;
            let v = self.apply_site(&format!("block{bi}.attn.v"), &block.wv, &normed)?;
            apply_rope(&mut q, hd, &inv_freq);
            apply_rope(&mut k, hd, &inv_freq);

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
            let o = self.apply_site(&format!("block{bi}.attn.o"), &block.wo, &ctx)?;
            x = x.add(&o)?;

            for i in 0..t {
                rms_norm(x.row(i), &block.norm_mlp, normed.row_mut(i));
            }
            let mut up = self.apply_site(&format!("block{bi}.mlp.up"), &block.w_up, &normed)?;
            for vv in up.data_mut() {
                *vv = silu(*vv);
            }
            let down = self.apply_site(&format!("block{bi}.mlp.down"), &block.w_down, &up)?;
            x = x.add(&down)?;
        }
        model.lm_head.apply_nt(&x)
    }

    /// Fold every adapter into its base weight: W + scale * B * A.
    /// Exact-zero deltas are skipped so an untrained adapter merges to the
    /// original weights bit for bit.
    pub fn merge(&self) -> Result<ModelCheckpoint> {
        let mut out = self.base.clone();
        for i in 0..out.blocks.len() {
            let names: Vec<String> = out.blocks[i]
                .linears(i)
                .iter()
                .map(|(n, _)| n.clone())
                .collect();
            let b = &mut out.blocks[i];
            for (w, name) in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w_up, &mut b.w_down,
            ]
            .into_iter()
            .zip(names.iter())
            {
                let Some(ad) = self.adapters.get(name) else {
                    continue;
                };
                let mut dense = w.as_dense()?.clone();
                let delta = ad.b.matmul(&ad.a)?;
                for (wv, &dv) in dense.data_mut().iter_mut().zip(delta.data()) {
                    if dv != 0.0 {
                        *wv += ad.scale * dv;
                    }
                }
                *w = Weight::Dense(dense);
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Encode corpus lines for next-token training: BOS + bytes + EOS,
/// truncated to the context window. Lines shorter than one transition
/// are dropped.
fn prepare_data(corpus: &[String], max_seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let mut data = Vec::new();
    for line in corpus {
        let mut toks = tokenizer::encode_with_eos(line);
        toks.truncate(max_seq_len);
        if toks.len() >= 2 {
            data.push(toks);
        }
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training corpus".into()));
    }
    Ok(data)
}

/// Fine-tune adapters on the corpus and return the merged model plus the
/// per-step loss log. The base weights stay frozen.
pub fn finetune(
    model: &ModelCheckpoint,
    corpus: &[String],
    cfg: &AdapterConfig,
) -> Result<(ModelCheckpoint, TrainingLog)> {
    let adapted = attach_adapters(model, cfg)?;
    let data = prepare_data(corpus, model.config.max_seq_len)?;
    let mut state = TrainState::from_adapted(&adapted)?;
    let log = train_loop(&mut state, &data, cfg.lr, cfg.steps, cfg.batch_size, cfg.seed)?;
    let trained = state.export_adapters(&adapted);
    Ok((trained.merge()?, log))
}

/// Train every weight (embedding, norms, linears, output head) from the
/// current initialization. Used to make toy models that actually model
/// their corpus.
pub fn pretrain(
    model: &ModelCheckpoint,
    corpus: &[String],
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainingLog)> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let data = prepare_data(corpus, model.config.max_seq_len)?;
    let mut state = TrainState::from_model(model, true)?;
    let log = train_loop(&mut state, &data, cfg.lr, cfg.steps, cfg.batch_size, cfg.seed)?;
    Ok((state.export_model(model), log))
}

/// Max relative error between analytic gradients and central finite
/// differences when training every weight. `max_params` caps how many
/// randomly chosen parameters are probed (None checks all of them).
pub fn gradient_check_full(
    model: &ModelCheckpoint,
    data: &[Vec<u32>],
    h: f64,
    max_params: Option<usize>,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut state = TrainState::from_model(model, true)?;
    finite_difference_check(&mut state, data, h, max_params, seed)
}

/// Same check for adapter-only training. A and B are randomized first:
/// with B at its zero init the A gradient vanishes identically and the
/// comparison would be vacuous.
pub fn gradient_check_adapters(
    model: &ModelCheckpoint,
    cfg: &AdapterConfig,
    data: &[Vec<u32>],
    h: f64,
    max_params: Option<usize>,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut adapted = attach_adapters(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for ad in adapted.adapters.values_mut() {
        ad.b = Matrix::random(ad.b.rows(), ad.b.cols(), 0.3, &mut rng);
        ad.a = Matrix::random(ad.a.rows(), ad.a.cols(), 0.3, &mut rng);
    }
    let mut state = TrainState::from_adapted(&adapted)?;
    finite_difference_check(&mut state, data, h, max_params, seed)
}

// ---------------------------------------------------------------------
// f64 training engine
// ---------------------------------------------------------------------

#[derive(Clone)]
struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn from_f32(m: &Matrix) -> Self {
        Mat64 {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn to_f32(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("engine tensors are finite")
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// self (n x k) times w^T (w is m x k) -> n x m.
    fn matmul_nt(&self, w: &Mat64) -> Mat64 {
        assert_eq!(self.cols, w.cols);
        let mut out = Mat64::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let xi = self.row(i);
            let oi = out.row_mut(i);
            for (o, ov) in oi.iter_mut().enumerate() {
                let wo = w.row(o);
                *ov = xi.iter().zip(wo.iter()).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// self (n x k) times b (k x m) -> n x m.
    fn matmul(&self, b: &Mat64) -> Mat64 {
        assert_eq!(self.cols, b.rows);
        let mut out = Mat64::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *ov += a * bv;
                }
            }
        }
        out
    }

    /// self (out x in) += c * dy^T * x, with dy (t x out) and x (t x in).
    fn add_tn(&mut self, dy: &Mat64, x: &Mat64, c: f64) {
        assert_eq!(dy.rows, x.rows);
        assert_eq!((self.rows, self.cols), (dy.cols, x.cols));
        for t in 0..dy.rows {
            let dyt = dy.row(t);
            let xt = x.row(t);
            for (o, &dv) in dyt.iter().enumerate() {
                let f = c * dv;
                if f == 0.0 {
                    continue;
                }
                let srow = &mut self.data[o * self.cols..(o + 1) * self.cols];
                for (sv, &xv) in srow.iter_mut().zip(xt.iter()) {
                    *sv += f * xv;
                }
            }
        }
    }

    fn add_assign(&mut self, other: &Mat64) {
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    fn add_scaled(&mut self, other: &Mat64, c: f64) {
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

struct Adapter64 {
    a: Mat64,
    b: Mat64,
    scale: f64,
}

struct Site64 {
    w: Mat64,
    adapter: Option<Adapter64>,
}

impl Site64 {
    fn zeros_like(&self) -> Site64 {
        Site64 {
            w: Mat64::zeros(self.w.rows, self.w.cols),
            adapter: self.adapter.as_ref().map(|ad| Adapter64 {
                a: Mat64::zeros(ad.a.rows, ad.a.cols),
                b: Mat64::zeros(ad.b.rows, ad.b.cols),
                scale: ad.scale,
            }),
        }
    }
}

struct Block64 {
    wq: Site64,
    wk: Site64,
    wv: Site64,
    wo: Site64,
    w_up: Site64,
    w_down: Site64,
    norm_attn: Vec<f64>,
    norm_mlp: Vec<f64>,
}

struct TrainState {
    cfg: ModelConfig,
    emb: Mat64,
    blocks: Vec<Block64>,
    lm_head: Site64,
    /// True trains the base weights; false trains only adapter pairs.
    train_base: bool,
}

fn site_from(w: &Weight, adapter: Option<&Adapter>) -> Result<Site64> {
    Ok(Site64 {
        w: Mat64::from_f32(w.as_dense()?),
        adapter: adapter.map(|ad| Adapter64 {
            a: Mat64::from_f32(&ad.a),
            b: Mat64::from_f32(&ad.b),
            scale: ad.scale as f64,
        }),
    })
}

impl TrainState {
    fn from_model(model: &ModelCheckpoint, train_base: bool) -> Result<TrainState> {
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            blocks.push(Block64 {
                wq: site_from(&b.wq, None)?,
                wk: site_from(&b.wk, None)?,
                wv: site_from(&b.wv, None)?,
                wo: site_from(&b.wo, None)?,
                w_up: site_from(&b.w_up, None)?,
                w_down: site_from(&b.w_down, None)?,
                norm_attn: b.norm_attn.iter().map(|&v| v as f64).collect(),
                norm_mlp: b.norm_mlp.iter().map(|&v| v as f64).collect(),
            });
        }
        Ok(TrainState {
            cfg: model.config,
            emb: Mat64::from_f32(&model.token_embedding),
            blocks,
            lm_head: site_from(&model.lm_head, None)?,
            train_base,
        })
    }

    fn from_adapted(adapted: &AdaptedModel) -> Result<TrainState> {
        let model = &adapted.base;
        let mut state = TrainState::from_model(model, false)?;
        for (i, b) in model.blocks.iter().enumerate() {
            let names: Vec<String> =
                b.linears(i).iter().map(|(n, _)| n.clone()).collect();
            let sb = &mut state.blocks[i];
            for (site, name) in [
                &mut sb.wq, &mut sb.wk, &mut sb.wv, &mut sb.wo, &mut sb.w_up, &mut sb.w_down,
            ]
            .into_iter()
            .zip(names.iter())
            {
                if let Some(ad) = adapted.adapters.get(name) {
                    site.adapter = Some(Adapter64 {
                        a: Mat64::from_f32(&ad.a),
                        b: Mat64::from_f32(&ad.b),
                        scale: ad.scale as f64,
                    });
                }
            }
        }
        Ok(state)
    }

    /// Copy trained adapter pairs back beside the untouched base.
    fn export_adapters(&self, adapted: &AdaptedModel) -> AdaptedModel {
        let mut out = adapted.clone();
        for (i, sb) in self.blocks.iter().enumerate() {
            let names: Vec<String> = adapted.base.blocks[i]
                .linears(i)
                .iter()
                .map(|(n, _)| n.clone())
                .collect();
            for (site, name) in [
                &sb.wq, &sb.wk, &sb.wv, &sb.wo, &sb.w_up, &sb.w_down,
            ]
            .into_iter()
            .zip(names.iter())
            {
                if let (Some(ad64), Some(ad)) = (&site.adapter, out.adapters.get_mut(name)) {
                    ad.a = ad64.a.to_f32();
                    ad.b = ad64.b.to_f32();
                }
            }
        }
        out
    }

    /// Write the (fully trained) f64 weights back into a checkpoint.
    fn export_model(&self, template: &ModelCheckpoint) -> ModelCheckpoint {
        let mut out = template.clone();
        out.token_embedding = self.emb.to_f32();
        for (b, sb) in out.blocks.iter_mut().zip(self.blocks.iter()) {
            b.wq = Weight::Dense(sb.wq.w.to_f32());
            b.wk = Weight::Dense(sb.wk.w.to_f32());
            b.wv = Weight::Dense(sb.wv.w.to_f32());
            b.wo = Weight::Dense(sb.wo.w.to_f32());
            b.w_up = Weight::Dense(sb.w_up.w.to_f32());
            b.w_down = Weight::Dense(sb.w_down.w.to_f32());
            b.norm_attn = sb.norm_attn.iter().map(|&v| v as f32).collect();
            b.norm_mlp = sb.norm_mlp.iter().map(|&v| v as f32).collect();
        }
        out.lm_head = Weight::Dense(self.lm_head.w.to_f32());
        out
    }

    fn zeros_like(&self) -> TrainState {
        TrainState {
            cfg: self.cfg,
            emb: Mat64::zeros(self.emb.rows, self.emb.cols),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block64 {
                    wq: b.wq.zeros_like(),
                    wk: b.wk.zeros_like(),
                    wv: b.wv.zeros_like(),
                    wo: b.wo.zeros_like(),
                    w_up: b.w_up.zeros_like(),
                    w_down: b.w_down.zeros_like(),
                    norm_attn: vec![0.0; b.norm_attn.len()],
                    norm_mlp: vec![0.0; b.norm_mlp.len()],
                })
                .collect(),
            lm_head: self.lm_head.zeros_like(),
            train_base: self.train_base,
        }
    }

    /// Trainable tensors in a fixed traversal order, shared between the
    /// parameter state and its gradient mirror.
    fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let train_base = self.train_base;
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        if train_base {
            out.push(&mut self.emb.data);
        }
        for b in &mut self.blocks {
            let Block64 {
                wq, wk, wv, wo, w_up, w_down, norm_attn, norm_mlp,
            } = b;
            for s in [wq, wk, wv, wo, w_up, w_down] {
                if train_base {
                    out.push(&mut s.w.data);
                }
                if let Some(ad) = &mut s.adapter {
                    out.push(&mut ad.a.data);
                    out.push(&mut ad.b.data);
                }
            }
            if train_base {
                out.push(norm_attn);
                out.push(norm_mlp);
            }
        }
        if train_base {
            out.push(&mut self.lm_head.w.data);
        }
        out
    }
}

struct BlockCache {
    x_in: Mat64,
    h1: Mat64,
    r1: Vec<f64>,
    q: Mat64,
    k: Mat64,
    v: Mat64,
    probs: Vec<Mat64>,
    ctx: Mat64,
    x2: Mat64,
    h2: Mat64,
    r2: Vec<f64>,
    u: Mat64,
    s: Mat64,
    /// Cached x * A^T per site, in wq..w_down order.
    xa: [Option<Mat64>; 6],
}

struct Cache {
    blocks: Vec<BlockCache>,
    x_final: Mat64,
    xa_head: Option<Mat64>,
    logits: Mat64,
}

fn rms_row64(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|&v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xv), &gv) in out.iter_mut().zip(x.iter()).zip(g.iter()) {
        *o = xv * r * gv;
    }
    r
}

fn rms_backward64(
    dy: &Mat64,
    x: &Mat64,
    g: &[f64],
    r: &[f64],
    dx: &mut Mat64,
    mut dg: Option<&mut Vec<f64>>,
) {
    let d = x.cols as f64;
    for i in 0..x.rows {
        let (dyi, xi, ri) = (dy.row(i), x.row(i), r[i]);
        let common: f64 = dyi
            .iter()
            .zip(g.iter())
            .zip(xi.iter())
            .map(|((&dv, &gv), &xv)| dv * gv * xv)
            .sum();
        let c = ri * ri * ri * common / d;
        let dxi = dx.row_mut(i);
        for j in 0..xi.len() {
            dxi[j] += dyi[j] * g[j] * ri - xi[j] * c;
        }
        if let Some(dg) = dg.as_deref_mut() {
            for j in 0..xi.len() {
                dg[j] += dyi[j] * xi[j] * ri;
            }
        }
    }
}

fn softmax_row64(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad64(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

fn rope64(m: &mut Mat64, head_dim: usize, inv_freq: &[f64], inverse: bool) {
    let n_heads = m.cols / head_dim;
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for (p, &f) in inv_freq.iter().enumerate() {
            let angle = i as f64 * f;
            let (mut sin, cos) = (angle.sin(), angle.cos());
            if inverse {
                sin = -sin;
            }
            for h in 0..n_heads {
                let a = row[h * head_dim + 2 * p];
                let b = row[h * head_dim + 2 * p + 1];
                row[h * head_dim + 2 * p] = a * cos - b * sin;
                row[h * head_dim + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

fn site_forward(site: &Site64, x: &Mat64) -> (Mat64, Option<Mat64>) {
    let mut y = x.matmul_nt(&site.w);
    let xa = site.adapter.as_ref().map(|ad| {
        let xa = x.matmul_nt(&ad.a);
        let delta = xa.matmul_nt(&ad.b);
        y.add_scaled(&delta, ad.scale);
        xa
    });
    (y, xa)
}

/// Backprop through one linear site. Returns dL/dx and accumulates weight
/// and adapter gradients into `grad`.
fn site_backward(
    site: &Site64,
    grad: &mut Site64,
    dy: &Mat64,
    x: &Mat64,
    xa: Option<&Mat64>,
    train_base: bool,
) -> Mat64 {
    let mut dx = dy.matmul(&site.w);
    if train_base {
        grad.w.add_tn(dy, x, 1.0);
    }
    if let (Some(ad), Some(xa)) = (&site.adapter, xa) {
        let g = grad.adapter.as_mut().expect("grad mirrors state shape");
        g.b.add_tn(dy, xa, ad.scale);
        let mut dxa = dy.matmul(&ad.b);
        dxa.scale_in_place(ad.scale);
        g.a.add_tn(&dxa, x, 1.0);
        dx.add_assign(&dxa.matmul(&ad.a));
    }
    dx
}

fn forward_seq(state: &TrainState, tokens: &[u32]) -> Cache {
    let cfg = &state.cfg;
    let (t, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let inv_freq: Vec<f64> = (0..hd / 2)
        .map(|p| ROPE_BASE.powf(-2.0 * p as f64 / hd as f64))
        .collect();

    let mut x = Mat64::zeros(t, d);
    for (i, &id) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(state.emb.row(id as usize));
    }

    let mut blocks = Vec::with_capacity(state.blocks.len());
    for block in &state.blocks {
        let x_in = x.clone();
        let mut h1 = Mat64::zeros(t, d);
        let mut r1 = vec![0.0; t];
        for i in 0..t {
            r1[i] = rms_row64(x_in.row(i), &block.norm_attn, h1.row_mut(i));
        }
        let (mut q, xa_q) = site_forward(&block.wq, &h1);
        let (mut k, xa_k) = site_forward(&block.wk, &h1);
        let (v, xa_v) = site_forward(&block.wv, &h1);
        rope64(&mut q, hd, &inv_freq, false);
        rope64(&mut k, hd, &inv_freq, false);

        let mut ctx = Mat64::zeros(t, d);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let lo = h * hd;
            let mut p = Mat64::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(i)[lo..lo + hd];
                {
                    let prow = p.row_mut(i);
                    for j in 0..=i {
                        let kj = &k.row(j)[lo..lo + hd];
                        prow[j] = qi
                            .iter()
                            .zip(kj.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * inv_sqrt_hd;
                    }
                    softmax_row64(&mut prow[..=i]);
                }
                for j in 0..=i {
                    let pij = p.row(i)[j];
                    let vj = &v.row(j)[lo..lo + hd];
                    let crow = &mut ctx.row_mut(i)[lo..lo + hd];
                    for (c, &vv) in crow.iter_mut().zip(vj.iter()) {
                        *c += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let (o, xa_o) = site_forward(&block.wo, &ctx);
        let mut x2 = x_in.clone();
        x2.add_assign(&o);

        let mut h2 = Mat64::zeros(t, d);
        let mut r2 = vec![0.0; t];
        for i in 0..t {
            r2[i] = rms_row64(x2.row(i), &block.norm_mlp, h2.row_mut(i));
        }
        let (u, xa_up) = site_forward(&block.w_up, &h2);
        let mut s = u.clone();
        for v in &mut s.data {
            *v = silu64(*v);
        }
        let (m, xa_down) = site_forward(&block.w_down, &s);
        let mut x3 = x2.clone();
        x3.add_assign(&m);

        blocks.push(BlockCache {
            x_in,
            h1,
            r1,
            q,
            k,
            v,
            probs,
            ctx,
            x2,
            h2,
            r2,
            u,
            s,
            xa: [xa_q, xa_k, xa_v, xa_o, xa_up, xa_down],
        });
        x = x3;
    }

    let (logits, xa_head) = site_forward(&state.lm_head, &x);
    Cache {
        blocks,
        x_final: x,
        xa_head,
        logits,
    }
}

/// Per-sequence mean next-token cross-entropy and its logit gradient,
/// already scaled by `weight`.
fn ce_loss(logits: &Mat64, tokens: &[u32], weight: f64) -> (f64, Mat64) {
    let t = tokens.len();
    let n_pred = (t - 1) as f64;
    let mut dlogits = Mat64::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for i in 0..t - 1 {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let target = tokens[i + 1] as usize;
        loss += lse - row[target];
        let drow = dlogits.row_mut(i);
        let c = weight / n_pred;
        for (j, &v) in row.iter().enumerate() {
            drow[j] = ((v - lse).exp() - if j == target { 1.0 } else { 0.0 }) * c;
        }
    }
    (loss / n_pred, dlogits)
}

/// Forward, loss, and full backward for one sequence. Gradients are
/// accumulated into `grads` scaled by `weight`.
fn loss_and_grads_seq(
    state: &TrainState,
    tokens: &[u32],
    weight: f64,
    grads: &mut TrainState,
) -> f64 {
    let cfg = &state.cfg;
    let (t, hd) = (tokens.len(), cfg.head_dim());
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let inv_freq: Vec<f64> = (0..hd / 2)
        .map(|p| ROPE_BASE.powf(-2.0 * p as f64 / hd as f64))
        .collect();
    let train_base = state.train_base;

    let cache = forward_seq(state, tokens);
    let (loss, dlogits) = ce_loss(&cache.logits, tokens, weight);

    let mut dx = site_backward(
        &state.lm_head,
        &mut grads.lm_head,
        &dlogits,
        &cache.x_final,
        cache.xa_head.as_ref(),
        train_base,
    );

    for (bi, block) in state.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // MLP branch: x3 = x2 + down(silu(up(h2))).
        let ds = site_backward(
            &block.w_down,
            &mut gb.w_down,
            &dx,
            &bc.s,
            bc.xa[5].as_ref(),
            train_base,
        );
        let mut du = ds;
        for (dv, &uv) in du.data.iter_mut().zip(bc.u.data.iter()) {
            *dv *= silu_grad64(uv);
        }
        let dh2 = site_backward(
            &block.w_up,
            &mut gb.w_up,
            &du,
            &bc.h2,
            bc.xa[4].as_ref(),
            train_base,
        );
        let mut dx2 = dx;
        rms_backward64(
            &dh2,
            &bc.x2,
            &block.norm_mlp,
            &bc.r2,
            &mut dx2,
            train_base.then_some(&mut gb.norm_mlp),
        );

        // Attention branch: x2 = x_in + wo(ctx).
        let dctx = site_backward(
            &block.wo,
            &mut gb.wo,
            &dx2,
            &bc.ctx,
            bc.xa[3].as_ref(),
            train_base,
        );
        let mut dq = Mat64::zeros(t, cfg.d_model);
        let mut dk = Mat64::zeros(t, cfg.d_model);
        let mut dv = Mat64::zeros(t, cfg.d_model);
        let mut dp = vec![0.0f64; t];
        for h in 0..cfg.n_heads {
            let lo = h * hd;
            let p = &bc.probs[h];
            for i in 0..t {
                let dctxi = &dctx.row(i)[lo..lo + hd];
                let prow = p.row(i);
                for (j, d) in dp[..=i].iter_mut().enumerate() {
                    let vj = &bc.v.row(j)[lo..lo + hd];
                    *d = dctxi.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
                }
                for j in 0..=i {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    let dvj = &mut dv.row_mut(j)[lo..lo + hd];
                    for (d, &cv) in dvj.iter_mut().zip(dctxi.iter()) {
                        *d += pij * cv;
                    }
                }
                let inner: f64 = dp[..=i]
                    .iter()
                    .zip(prow[..=i].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let qi = &bc.q.row(i)[lo..lo + hd];
                for j in 0..=i {
                    let dsij = prow[j] * (dp[j] - inner) * inv_sqrt_hd;
                    if dsij == 0.0 {
                        continue;
                    }
                    let kj = &bc.k.row(j)[lo..lo + hd];
                    {
                        let dqi = &mut dq.row_mut(i)[lo..lo + hd];
                        for (d, &kv) in dqi.iter_mut().zip(kj.iter()) {
                            *d += dsij * kv;
                        }
                    }
                    let dkj = &mut dk.row_mut(j)[lo..lo + hd];
                    for (d, &qv) in dkj.iter_mut().zip(qi.iter()) {
                        *d += dsij * qv;
                    }
                }
            }
        }
        // Undo the rotation (it is orthogonal per pair).
        rope64(&mut dq, hd, &inv_freq, true);
        rope64(&mut dk, hd, &inv_freq, true);

        let mut dh1 = site_backward(
            &block.wq,
            &mut gb.wq,
            &dq,
            &bc.h1,
            bc.xa[0].as_ref(),
            train_base,
        );
        dh1.add_assign(&site_backward(
            &block.wk,
            &mut gb.wk,
            &dk,
            &bc.h1,
            bc.xa[1].as_ref(),
            train_base,
        ));
        dh1.add_assign(&site_backward(
            &block.wv,
            &mut gb.wv,
            &dv,
            &bc.h1,
            bc.xa[2].as_ref(),
            train_base,
        ));
        let mut dx_in = dx2;
        rms_backward64(
            &dh1,
            &bc.x_in,
            &block.norm_attn,
            &bc.r1,
            &mut dx_in,
            train_base.then_some(&mut gb.norm_attn),
        );
        dx = dx_in;
    }

    if train_base {
        for (i, &id) in tokens.iter().enumerate() {
            let gr = grads.emb.row_mut(id as usize);
            for (g, &d) in gr.iter_mut().zip(dx.row(i).iter()) {
                *g += d;
            }
        }
    }
    loss
}

fn batch_loss(state: &TrainState, batch: &[&Vec<u32>]) -> f64 {
    let w = 1.0 / batch.len() as f64;
    batch
        .iter()
        .map(|seq| {
            let cache = forward_seq(state, seq);
            w * ce_loss(&cache.logits, seq, w).0
        })
        .sum()
}

/// Second-moment adaptive optimizer: v = beta*v + (1-beta)*g^2, then
/// theta -= lr * g / (sqrt(v) + eps). No first moment, no bias correction.
struct MomentOpt {
    lr: f64,
    beta: f64,
    eps: f64,
    v: Vec<Vec<f64>>,
}

impl MomentOpt {
    fn new(lr: f64) -> Self {
        MomentOpt {
            lr,
            beta: 0.99,
            eps: 1e-8,
            v: Vec::new(),
        }
    }

    fn step(&mut self, mut params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        if self.v.is_empty() {
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                v[i] = self.beta * v[i] + (1.0 - self.beta) * g[i] * g[i];
                p[i] -= self.lr * g[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

fn validate_sequences(cfg: &ModelConfig, data: &[Vec<u32>]) -> Result<()> {
    for seq in data {
        if seq.len() < 2 {
            return Err(Error::InvalidConfig("sequences need at least 2 tokens".into()));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

fn train_loop(
    state: &mut TrainState,
    data: &[Vec<u32>],
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainingLog> {
    validate_sequences(&state.cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    let mut opt = MomentOpt::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if pos >= order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(&data[order[pos]]);
            pos += 1;
        }
        let mut grads = state.zeros_like();
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for seq in &batch {
            loss += w * loss_and_grads_seq(state, seq, w, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(state.trainable_mut(), grads.trainable_mut().into_iter().map(|g| &*g).collect());
        losses.push(loss);
    }
    // A step can blow up the weights without the (pre-update) loss ever
    // going non-finite; refuse to export such a state.
    if state
        .trainable_mut()
        .iter()
        .any(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Diverged {
            step: steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainingLog { losses })
}

fn finite_difference_check(
    state: &mut TrainState,
    data: &[Vec<u32>],
    h: f64,
    max_params: Option<usize>,
    seed: u64,
) -> Result<(f64, usize)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("gradient check batch".into()));
    }
    validate_sequences(&state.cfg, data)?;
    let batch: Vec<&Vec<u32>> = data.iter().collect();
    let w = 1.0 / batch.len() as f64;
    let mut grads = state.zeros_like();
    for seq in &batch {
        loss_and_grads_seq(state, seq, w, &mut grads);
    }

    let lens: Vec<usize> = state.trainable_mut().iter().map(|p| p.len()).collect();
    let total: usize = lens.iter().sum();
    let picks: Vec<usize> = match max_params {
        Some(cap) if cap < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, cap).into_vec()
        }
        _ => (0..total).collect(),
    };

    let locate = |flat: usize| -> (usize, usize) {
        let mut rest = flat;
        for (ti, &len) in lens.iter().enumerate() {
            if rest < len {
                return (ti, rest);
            }
            rest -= len;
        }
        unreachable!("flat index in range");
    };

    let mut max_rel = 0.0f64;
    for &flat in &picks {
        let (ti, off) = locate(flat);
        let old = state.trainable_mut()[ti][off];
        state.trainable_mut()[ti][off] = old + h;
        let lp = batch_loss(state, &batch);
        state.trainable_mut()[ti][off] = old - h;
        let lm = batch_loss(state, &batch);
        state.trainable_mut()[ti][off] = old;
        let fd = (lp - lm) / (2.0 * h);
        let g = grads.trainable_mut()[ti][off];
        // Floored denominator: for near-zero gradients this is effectively
        // an absolute tolerance of h * 1e-3 rather than a blow-up.
        let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok((max_rel, picks.len()))
}
