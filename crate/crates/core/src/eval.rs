//! Quality and cost metrics for compressed models.
//!
//! Perplexity is exp of the mean next-token cross-entropy over all
//! predicted tokens. The similarity score embeds greedy continuations of
//! the candidate and a reference model for the same prompts, averages the
//! cosine, and maps it to 0..100 via (s + 1) / 2 * 100. Latency is a
//! median of repeated wall-clock runs behind a process-wide lock so
//! parallel tests cannot distort each other's timings.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::matrix::cosine_similarity;
use crate::model::ModelCheckpoint;
use crate::pruner::EmbeddingFunction;
use crate::tokenizer;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;
use std::time::Instant;

/// Canonical compression-ladder rows, in report order.
pub const LADDER_IDS: [&str; 6] = [
    "original",
    "prune",
    "prune_sft",
    "quant",
    "prune_quant",
    "prune_sft_quant",
];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Continuation length for similarity and latency runs.
    pub gen_tokens: usize,
    pub latency_repeats: usize,
    /// How many of the eval prompts the latency runs decode.
    pub latency_prompts: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            gen_tokens: 32,
            latency_repeats: 5,
            latency_prompts: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub perplexity: f64,
    pub similarity_score: f64,
    pub param_count: u64,
    pub serialized_bytes: u64,
    pub latency_ms_per_token: f64,
    pub latency_runs: Vec<f64>,
}

impl EvalReport {
    /// Equality over everything except the wall-clock fields; timing is
    /// the one part of a report that may differ between identical runs.
    pub fn matches_excluding_latency(&self, other: &EvalReport) -> bool {
        self.model_id == other.model_id
            && self.perplexity.to_bits() == other.perplexity.to_bits()
            && self.similarity_score.to_bits() == other.similarity_score.to_bits()
            && self.param_count == other.param_count
            && self.serialized_bytes == other.serialized_bytes
    }
}

/// exp(mean cross-entropy) over every next-token prediction in the
/// corpus. Lines are encoded with BOS and EOS and truncated to the
/// context window; lines with no transition are skipped.
pub fn perplexity(model: &ModelCheckpoint, corpus: &[String]) -> Result<f64> {
    let mut total_ce = 0.0f64;
    let mut total_tokens = 0usize;
    for line in corpus {
        let mut toks = tokenizer::encode_with_eos(line);
        toks.truncate(model.config.max_seq_len);
        if toks.len() < 2 {
            continue;
        }
        let logits = model.forward(&toks)?;
        for i in 0..toks.len() - 1 {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            total_ce += lse - row[toks[i + 1] as usize] as f64;
            total_tokens += 1;
        }
    }
    if total_tokens == 0 {
        return Err(Error::EmptyInput("perplexity corpus".into()));
    }
    Ok((total_ce / total_tokens as f64).exp())
}

fn continuation(model: &ModelCheckpoint, prompt: &[u32], gen_tokens: usize) -> Result<Vec<u32>> {
    let budget = model.config.max_seq_len.saturating_sub(gen_tokens).max(1);
    let prompt = &prompt[..prompt.len().min(budget)];
    let full = model.generate(prompt, gen_tokens)?;
    Ok(full[prompt.len()..].to_vec())
}

/// Mean raw cosine between embedded continuations of the two models.
pub fn generation_similarity(
    model: &ModelCheckpoint,
    reference: &ModelCheckpoint,
    prompts: &[String],
    g: &dyn EmbeddingFunction,
    gen_tokens: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("similarity prompts".into()));
    }
    let mut total = 0.0f64;
    for prompt in prompts {
        let toks = tokenizer::encode(prompt);
        let a = continuation(model, &toks, gen_tokens)?;
        let b = continuation(reference, &toks, gen_tokens)?;
        total += cosine_similarity(&g.embed(&a)?, &g.embed(&b)?)? as f64;
    }
    Ok(total / prompts.len() as f64)
}

/// Generation similarity mapped onto 0..100.
pub fn similarity_score(
    model: &ModelCheckpoint,
    reference: &ModelCheckpoint,
    prompts: &[String],
    g: &dyn EmbeddingFunction,
    gen_tokens: usize,
) -> Result<f64> {
    let s = generation_similarity(model, reference, prompts, g, gen_tokens)?;
    Ok((s + 1.0) / 2.0 * 100.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyReport {
    pub median_ms_per_token: f64,
    pub ms_per_token_runs: Vec<f64>,
}

// Timing runs take this lock so concurrent evaluations queue up instead
// of fighting for cores.
static LATENCY_GATE: Mutex<()> = Mutex::new(());

/// Median wall-clock milliseconds per generated token across repeated
/// greedy-decoding runs over the prompts. At least 3 repeats.
pub fn measure_latency(
    model: &ModelCheckpoint,
    prompts: &[String],
    gen_tokens: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if repeats < 3 {
        return Err(Error::InvalidConfig("latency needs at least 3 repeats".into()));
    }
    if prompts.is_empty() || gen_tokens == 0 {
        return Err(Error::EmptyInput("latency workload".into()));
    }
    let encoded: Vec<Vec<u32>> = prompts.iter().map(|p| tokenizer::encode(p)).collect();
    let _exclusive = LATENCY_GATE.lock().unwrap_or_else(|e| e.into_inner());
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let mut new_tokens = 0usize;
        for toks in &encoded {
            let budget = model.config.max_seq_len.saturating_sub(gen_tokens).max(1);
            let prompt = &toks[..toks.len().min(budget)];
            let out = model.generate_greedy(prompt, gen_tokens, false)?;
            new_tokens += out.len() - prompt.len();
        }
        if new_tokens == 0 {
            return Err(Error::EmptyInput("no tokens generated".into()));
        }
        runs.push(start.elapsed().as_secs_f64() * 1e3 / new_tokens as f64);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Ok(LatencyReport {
        median_ms_per_token: median,
        ms_per_token_runs: runs,
    })
}

/// Full report card for one model against a reference.
pub fn evaluate(
    model_id: &str,
    model: &ModelCheckpoint,
    reference: &ModelCheckpoint,
    corpus: &[String],
    prompts: &[String],
    g: &dyn EmbeddingFunction,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let ppl = perplexity(model, corpus)?;
    let sim = similarity_score(model, reference, prompts, g, settings.gen_tokens)?;
    let n_latency = settings.latency_prompts.min(prompts.len()).max(1);
    let latency = measure_latency(
        model,
        &prompts[..n_latency],
        settings.gen_tokens,
        settings.latency_repeats,
    )?;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        perplexity: ppl,
        similarity_score: sim,
        param_count: model.param_count(),
        serialized_bytes: checkpoint::serialized_bytes(model),
        latency_ms_per_token: latency.median_ms_per_token,
        latency_runs: latency.ms_per_token_runs,
    })
}

pub fn reports_to_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("report serialize")
}

/// Render reports as an aligned text table. Canonical ladder rows come
/// first in their fixed order; a canonical id missing from a non-empty
/// input renders as a gap row; unknown ids follow in input order.
pub fn build_report_table(reports: &[EvalReport]) -> String {
    let header = format!(
        "| {:<16} | {:>10} | {:>12} | {:>10} | {:>10} | {:>9} |\n\
         |{:-<18}|{:->12}|{:->14}|{:->12}|{:->12}|{:->11}|\n",
        "model", "params", "bytes", "perplexity", "similarity", "ms/token",
        "", "", "", "", "", ""
    );
    let mut out = header;
    if reports.is_empty() {
        return out;
    }
    let row = |r: &EvalReport| {
        format!(
            "| {:<16} | {:>10} | {:>12} | {:>10.3} | {:>10.2} | {:>9.3} |\n",
            r.model_id, r.param_count, r.serialized_bytes, r.perplexity,
            r.similarity_score, r.latency_ms_per_token
        )
    };
    let gap = |id: &str| {
        format!(
            "| {:<16} | {:>10} | {:>12} | {:>10} | {:>10} | {:>9} |\n",
            id, "-", "-", "-", "-", "-"
        )
    };
    for id in LADDER_IDS {
        match reports.iter().find(|r| r.model_id == id) {
            Some(r) => out.push_str(&row(r)),
            None => out.push_str(&gap(id)),
        }
    }
    for r in reports {
        if !LADDER_IDS.contains(&r.model_id.as_str()) {
            out.push_str(&row(r));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::model::{ModelConfig, TransformerBlock, Weight};
    use crate::pruner::MeanHiddenEmbedding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm_config() -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 64,
        }
    }

    fn lm_model(seed: u64) -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelCheckpoint::random(lm_config(), &mut rng).unwrap()
    }

    fn small_corpus() -> Vec<String> {
        (0..6).map(|i| format!("line {i} of the corpus")).collect()
    }

    fn small_prompts() -> Vec<String> {
        (0..4).map(|i| format!("Q: prompt {i}? A:")).collect()
    }

    #[test]
    fn uniform_logits_give_vocab_size_perplexity() {
        let cfg = lm_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ModelCheckpoint::random(cfg, &mut rng).unwrap();
        for b in &mut model.blocks {
            *b = TransformerBlock::pass_through(&cfg);
        }
        model.lm_head = Weight::Dense(Matrix::zeros(cfg.vocab_size, cfg.d_model));
        let ppl = perplexity(&model, &small_corpus()).unwrap();
        assert!(
            (ppl - tokenizer::VOCAB_SIZE as f64).abs() < 1e-6,
            "ppl = {ppl}"
        );
    }

    #[test]
    fn perplexity_matches_direct_recompute_on_one_line() {
        let model = lm_model(2);
        let corpus = vec!["ab".to_string()];
        let ppl = perplexity(&model, &corpus).unwrap();

        let toks = tokenizer::encode_with_eos("ab");
        let logits = model.forward(&toks).unwrap();
        let mut ce = 0.0f64;
        for i in 0..toks.len() - 1 {
            let row = logits.row(i);
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            ce += -(exps[toks[i + 1] as usize] / z).ln();
        }
        let oracle = (ce / (toks.len() - 1) as f64).exp();
        assert!((ppl - oracle).abs() < 1e-9 * oracle, "{ppl} vs {oracle}");
    }

    #[test]
    fn perplexity_needs_at_least_one_transition() {
        let model = lm_model(3);
        assert!(matches!(
            perplexity(&model, &[]),
            Err(Error::EmptyInput(_))
        ));
        // A degenerate corpus whose every line encodes below 2 tokens is
        // impossible: BOS + EOS alone is a transition. Empty lines still
        // count via the EOS target.
        let ppl = perplexity(&model, &["".to_string()]).unwrap();
        assert!(ppl.is_finite());
    }

    #[test]
    fn self_similarity_is_perfect_score() {
        let model = lm_model(4);
        let g = MeanHiddenEmbedding { model: &model };
        let s = similarity_score(&model, &model, &small_prompts(), &g, 8).unwrap();
        assert!((s - 100.0).abs() < 1e-6, "score = {s}");
    }

    #[test]
    fn similarity_score_stays_in_range() {
        let a = lm_model(5);
        let b = lm_model(6);
        let g = MeanHiddenEmbedding { model: &a };
        let s = similarity_score(&a, &b, &small_prompts(), &g, 8).unwrap();
        assert!((0.0..=100.0).contains(&s), "score = {s}");
    }

    #[test]
    fn latency_median_is_positive_and_repeats_enforced() {
        let model = lm_model(7);
        assert!(matches!(
            measure_latency(&model, &small_prompts(), 4, 2),
            Err(Error::InvalidConfig(_))
        ));
        let rep = measure_latency(&model, &small_prompts()[..2], 4, 3).unwrap();
        assert_eq!(rep.ms_per_token_runs.len(), 3);
        assert!(rep.median_ms_per_token > 0.0);
        assert!(rep.median_ms_per_token.is_finite());
    }

    #[test]
    fn evaluate_fills_every_field() {
        let model = lm_model(8);
        let g = MeanHiddenEmbedding { model: &model };
        let settings = EvalSettings {
            gen_tokens: 6,
            latency_repeats: 3,
            latency_prompts: 2,
        };
        let r = evaluate(
            "original",
            &model,
            &model,
            &small_corpus(),
            &small_prompts(),
            &g,
            &settings,
        )
        .unwrap();
        assert_eq!(r.model_id, "original");
        assert!(r.perplexity.is_finite() && r.perplexity > 0.0);
        assert!((r.similarity_score - 100.0).abs() < 1e-6);
        assert_eq!(r.param_count, model.param_count());
        assert!(r.serialized_bytes > 0);
        assert_eq!(r.latency_runs.len(), 3);
    }

    fn fake_report(id: &str, ppl: f64) -> EvalReport {
        EvalReport {
            model_id: id.to_string(),
            perplexity: ppl,
            similarity_score: 90.0,
            param_count: 1000,
            serialized_bytes: 4000,
            latency_ms_per_token: 0.5,
            latency_runs: vec![0.5, 0.5, 0.5],
        }
    }

    #[test]
    fn table_orders_canonical_rows_and_marks_gaps() {
        let reports = vec![
            fake_report("prune", 12.0),
            fake_report("original", 10.0),
            fake_report("custom_run", 11.0),
        ];
        let table = build_report_table(&reports);
        let lines: Vec<&str> = table.lines().collect();
        // header + separator + 6 canonical + 1 extra
        assert_eq!(lines.len(), 9);
        assert!(lines[2].starts_with("| original"));
        assert!(lines[3].starts_with("| prune "));
        assert!(lines[4].contains("prune_sft") && lines[4].contains(" - "));
        assert!(lines[8].starts_with("| custom_run"));

        let empty = build_report_table(&[]);
        assert_eq!(empty.lines().count(), 2);
    }

    #[test]
    fn reports_round_trip_through_json() {
        let reports = vec![fake_report("original", 10.0), fake_report("quant", 14.5)];
        let back: Vec<EvalReport> =
            serde_json::from_str(&reports_to_json(&reports)).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].matches_excluding_latency(&reports[0]));
        assert_eq!(back[1].perplexity, 14.5);
    }

    #[test]
    fn latency_never_breaks_quality_match() {
        let a = fake_report("quant", 14.0);
        let mut b = fake_report("quant", 14.0);
        b.latency_ms_per_token = 99.0;
        b.latency_runs = vec![99.0];
        assert!(a.matches_excluding_latency(&b));
        b.perplexity = 14.000001;
        assert!(!a.matches_excluding_latency(&b));
    }
}
