//! Calibration inputs and per-layer activation statistics.
//!
//! The calibration set is a seeded without-replacement sample of corpus
//! lines. Statistics are collected on the *inputs* of each linear layer
//! (that is what channel scaling acts on): per input channel, the mean of
//! |activation| over every token of every calibration sample, accumulated
//! in f64. Alongside the means, a seeded reservoir keeps up to a fixed
//! number of raw input rows per layer for the quantization-scale search.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelCheckpoint;
use crate::tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<u32>>,
    pub seed: u64,
    /// Fingerprint of the corpus the samples were drawn from.
    pub source: String,
}

/// Draw `n` lines uniformly without replacement, tokenize (BOS + bytes),
/// and truncate to `max_len` tokens. Deterministic per seed.
pub fn build_calibration_set(
    corpus: &[String],
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("calibration corpus".into()));
    }
    if n == 0 || max_len == 0 {
        return Err(Error::InvalidConfig(
            "calibration needs n >= 1 and max_len >= 1".into(),
        ));
    }
    if n > corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot draw {n} samples from {} lines without replacement",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, corpus.len(), n);
    let samples = picked
        .iter()
        .map(|i| {
            let mut ids = tokenizer::encode(&corpus[i]);
            ids.truncate(max_len);
            ids
        })
        .collect();
    let fingerprint = crc32fast::hash(corpus.join("\n").as_bytes());
    Ok(CalibrationSet {
        samples,
        seed,
        source: format!("{} lines, crc32 {fingerprint:08x}", corpus.len()),
    })
}

/// Per-layer mean absolute input magnitude per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: BTreeMap<String, Vec<f32>>,
    /// Calibration sequences contributing.
    pub sample_count: usize,
    /// Tokens contributing (every layer sees every token once).
    pub token_count: usize,
}

impl ActivationStats {
    /// Stats vector for one layer with dead channels floored to the
    /// smallest positive recorded value x 1e-4, so channel scales stay
    /// strictly positive. Errors if the layer is missing or saw no signal
    /// at all.
    pub fn floored(&self, layer: &str) -> Result<Vec<f32>> {
        let v = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::MissingStats(layer.into()))?;
        let min_positive = v
            .iter()
            .copied()
            .filter(|&x| x > 0.0)
            .fold(f32::INFINITY, f32::min);
        if !min_positive.is_finite() {
            return Err(Error::MissingStats(format!(
                "{layer}: all channels recorded zero activation"
            )));
        }
        let floor = min_positive * 1e-4;
        Ok(v.iter().map(|&x| if x > 0.0 { x } else { floor }).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Running mean-absolute accumulator; f64 sums keep the reduction
/// commutative and associative to well below test tolerances.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    sums: BTreeMap<String, Vec<f64>>,
    token_count: usize,
    sample_count: usize,
}

impl StatsAccumulator {
    /// Fold one layer-input matrix (rows = tokens) into the sums.
    pub fn record(&mut self, layer: &str, x: &Matrix) {
        let sums = self
            .sums
            .entry(layer.to_string())
            .or_insert_with(|| vec![0.0; x.cols()]);
        for i in 0..x.rows() {
            for (s, &v) in sums.iter_mut().zip(x.row(i).iter()) {
                *s += v.abs() as f64;
            }
        }
    }

    /// Token/sample bookkeeping, once per sequence.
    pub fn finish_sample(&mut self, tokens: usize) {
        self.token_count += tokens;
        self.sample_count += 1;
    }

    pub fn finalize(self) -> ActivationStats {
        let n = self.token_count.max(1) as f64;
        ActivationStats {
            layers: self
                .sums
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().map(|s| (s / n) as f32).collect()))
                .collect(),
            sample_count: self.sample_count,
            token_count: self.token_count,
        }
    }
}

fn check_float_model(model: &ModelCheckpoint) -> Result<()> {
    if model.is_quantized() {
        return Err(Error::QuantizedUnsupported(
            "activation statistics require a float-precision model".into(),
        ));
    }
    Ok(())
}

/// Mean |input| per channel for every linear layer over the calibration
/// set. Sequential and deterministic.
pub fn collect_activation_stats(
    model: &ModelCheckpoint,
    cal: &CalibrationSet,
) -> Result<ActivationStats> {
    check_float_model(model)?;
    if cal.samples.is_empty() {
        return Err(Error::EmptyInput("calibration set".into()));
    }
    let mut acc = StatsAccumulator::default();
    for sample in &cal.samples {
        model.forward_recorded(sample, &mut |name, x| acc.record(name, x))?;
        acc.finish_sample(sample.len());
    }
    Ok(acc.finalize())
}

/// Activation stats plus up to `cap` raw input rows per layer, reservoir
/// sampled with the given seed. The full input to the quantization search.
#[derive(Clone, Debug)]
pub struct CalibrationRecord {
    pub stats: ActivationStats,
    pub samples: BTreeMap<String, Matrix>,
    pub cap: usize,
    pub seed: u64,
}

struct Reservoir {
    rows: Vec<Vec<f32>>,
    seen: usize,
}

/// One instrumented pass producing both the statistics and the per-layer
/// sample reservoirs.
pub fn collect_calibration_record(
    model: &ModelCheckpoint,
    cal: &CalibrationSet,
    cap: usize,
    seed: u64,
) -> Result<CalibrationRecord> {
    check_float_model(model)?;
    if cal.samples.is_empty() {
        return Err(Error::EmptyInput("calibration set".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidConfig("sample cap must be >= 1".into()));
    }
    let mut acc = StatsAccumulator::default();
    let mut reservoirs: BTreeMap<String, Reservoir> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sample in &cal.samples {
        model.forward_recorded(sample, &mut |name, x| {
            acc.record(name, x);
            let r = reservoirs.entry(name.to_string()).or_insert(Reservoir {
                rows: Vec::new(),
                seen: 0,
            });
            for i in 0..x.rows() {
                r.seen += 1;
                if r.rows.len() < cap {
                    r.rows.push(x.row(i).to_vec());
                } else {
                    let j = rng.gen_range(0..r.seen);
                    if j < cap {
                        r.rows[j] = x.row(i).to_vec();
                    }
                }
            }
        })?;
        acc.finish_sample(sample.len());
    }
    let samples = reservoirs
        .into_iter()
        .map(|(name, r)| {
            let cols = r.rows[0].len();
            let data: Vec<f32> = r.rows.into_iter().flatten().collect();
            let rows = data.len() / cols;
            (name, Matrix::from_vec(rows, cols, data).expect("reservoir rows"))
        })
        .collect();
    Ok(CalibrationRecord {
        stats: acc.finalize(),
        samples,
        cap,
        seed,
    })
}
