//! Activation-aware group quantization of whole models.
//!
//! Round-to-nearest is the baseline. The activation-aware search scales
//! each input channel by s_j = m_j^alpha (m_j = mean |activation| of the
//! channel), quantizes the scaled weights, and folds 1/s_j back in at
//! dequantization. alpha is picked per layer by grid search on the
//! reconstruction error against cached calibration activations; alpha = 0
//! is always in the grid, so the search never loses to the baseline.

use crate::calibration::CalibrationRecord;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelCheckpoint, Weight};
use crate::quant::{quantize_with_channel_scale, quantized_matmul_nt, SUPPORTED_BITS};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    Rtn,
    Awq,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Number of evenly spaced alpha values on [0, 1], endpoints included.
    pub alpha_grid: usize,
    pub method: QuantMethod,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 64,
            alpha_grid: 20,
            method: QuantMethod::Awq,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "unsupported bit width {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be positive".into()));
        }
        if self.method == QuantMethod::Awq && self.alpha_grid < 2 {
            return Err(Error::InvalidConfig(
                "alpha grid needs at least 2 points".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of the per-layer alpha search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AwqSearchResult {
    pub layer: String,
    pub best_alpha: f32,
    pub best_loss: f64,
    /// Loss at alpha = 0, i.e. plain round-to-nearest.
    pub rtn_loss: f64,
    pub loss_curve: Vec<(f32, f64)>,
}

impl AwqSearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search result serialize")
    }
}

fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// Per-channel scales m_j^alpha. alpha = 0 gives exact ones.
pub fn channel_scales(mean_abs: &[f32], alpha: f32) -> Vec<f32> {
    mean_abs.iter().map(|&m| m.powf(alpha)).collect()
}

/// Reconstruction error of quantizing `w` with channel scales `s`:
/// the Frobenius norm of `x_cal * dequantize(Q(w, s))^T - x_cal * w^T`.
pub fn awq_loss(w: &Matrix, x_cal: &Matrix, s: &[f32], cfg: &QuantConfig) -> Result<f64> {
    let reference = x_cal.matmul_nt(w)?;
    quantized_loss(w, x_cal, &reference, s, cfg)
}

fn quantized_loss(
    w: &Matrix,
    x_cal: &Matrix,
    reference: &Matrix,
    s: &[f32],
    cfg: &QuantConfig,
) -> Result<f64> {
    let q = quantize_with_channel_scale(w, cfg.bits, cfg.group_size, Some(s))?;
    let approx = quantized_matmul_nt(x_cal, &q)?;
    Ok(frobenius_diff(&approx, reference))
}

/// Grid-search alpha for one layer. `mean_abs` must be strictly positive
/// (the calibration stats are floored upstream).
pub fn awq_search(
    layer: &str,
    w: &Matrix,
    x_cal: &Matrix,
    mean_abs: &[f32],
    cfg: &QuantConfig,
) -> Result<AwqSearchResult> {
    cfg.validate()?;
    if x_cal.rows() == 0 {
        return Err(Error::EmptyInput(format!("calibration rows for {layer}")));
    }
    if x_cal.cols() != w.cols() || mean_abs.len() != w.cols() {
        return Err(Error::Shape(format!(
            "layer {layer}: weights {}x{}, activations {}x{}, {} stats",
            w.rows(),
            w.cols(),
            x_cal.rows(),
            x_cal.cols(),
            mean_abs.len()
        )));
    }
    let reference = x_cal.matmul_nt(w)?;
    let points = cfg.alpha_grid.max(2);
    let mut curve = Vec::with_capacity(points);
    let (mut best_alpha, mut best_loss) = (0.0f32, f64::INFINITY);
    for i in 0..points {
        let alpha = i as f32 / (points - 1) as f32;
        let s = channel_scales(mean_abs, alpha);
        let loss = quantized_loss(w, x_cal, &reference, &s, cfg)?;
        // Strict improvement only, so ties keep the lowest alpha.
        if loss < best_loss {
            best_alpha = alpha;
            best_loss = loss;
        }
        curve.push((alpha, loss));
    }
    Ok(AwqSearchResult {
        layer: layer.to_string(),
        best_alpha,
        best_loss,
        rtn_loss: curve[0].1,
        loss_curve: curve,
    })
}

fn quantize_weight(
    w: &Weight,
    scales: Option<&[f32]>,
    cfg: &QuantConfig,
    layer: &str,
) -> Result<Weight> {
    let dense = w.as_dense().map_err(|_| {
        Error::QuantizedUnsupported(format!("layer {layer} is already quantized"))
    })?;
    let q = quantize_with_channel_scale(dense, cfg.bits, cfg.group_size, scales)?;
    Ok(Weight::Quantized(q))
}

/// Quantize every linear projection (block attention/MLP weights and the
/// output head). Token embedding and norm gains stay in f32. The
/// activation-aware method needs a calibration record; round-to-nearest
/// runs without one and returns an empty search list.
pub fn quantize_model(
    model: &ModelCheckpoint,
    record: Option<&CalibrationRecord>,
    cfg: &QuantConfig,
) -> Result<(ModelCheckpoint, Vec<AwqSearchResult>)> {
    cfg.validate()?;
    if model.is_quantized() {
        return Err(Error::QuantizedUnsupported(
            "model already contains quantized layers".into(),
        ));
    }
    let mut out = model.clone();
    let mut results = Vec::new();
    match cfg.method {
        QuantMethod::Rtn => {
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
                    *w = quantize_weight(w, None, cfg, name)?;
                }
            }
            out.lm_head = quantize_weight(&out.lm_head, None, cfg, "lm_head")?;
        }
        QuantMethod::Awq => {
            let record = record.ok_or_else(|| {
                Error::InvalidConfig("activation-aware method needs a calibration record".into())
            })?;
            let search_one = |name: &str, w: &Weight| -> Result<(Weight, AwqSearchResult)> {
                let dense = w.as_dense().map_err(|_| {
                    Error::QuantizedUnsupported(format!("layer {name} is already quantized"))
                })?;
                let mean_abs = record.stats.floored(name)?;
                let x_cal = record
                    .samples
                    .get(name)
                    .ok_or_else(|| Error::MissingStats(format!("no cached inputs for {name}")))?;
                let result = awq_search(name, dense, x_cal, &mean_abs, cfg)?;
                let s = channel_scales(&mean_abs, result.best_alpha);
                let q = quantize_weight(w, Some(&s), cfg, name)?;
                Ok((q, result))
            };
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
                    let (q, result) = search_one(name, w)?;
                    *w = q;
                    results.push(result);
                }
            }
            let (q, result) = search_one("lm_head", &out.lm_head)?;
            out.lm_head = q;
            results.push(result);
        }
    }
    Ok((out, results))
}
