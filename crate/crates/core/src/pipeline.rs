//! End-to-end compression runs driven by a TOML config.
//!
//! A pipeline executes prune, fine-tune, and quantize stages in that fixed
//! order (each optional), persisting a checkpoint after every stage, then
//! evaluates the result against the original. The ladder variant builds
//! all six canonical configurations that share one pruning plan and one
//! fine-tuned model, so report rows are directly comparable.
//!
//! Errors escaping a stage are wrapped with the stage name; the CLI turns
//! those into a distinct exit code. Setting SHRINK_OUTPUT_ROOT redirects
//! all artifacts, replacing the configured output directory.

use crate::calibration::{build_calibration_set, collect_calibration_record, CalibrationSet};
use crate::checkpoint;
use crate::corpus;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, EvalSettings};
use crate::finetune::{finetune, pretrain, AdapterConfig, TrainConfig};
use crate::model::{ModelCheckpoint, ModelConfig};
use crate::pruner::{
    execute_plan, make_plan, make_plan_recompute, rank_blocks, ImportanceCriterion,
    MeanHiddenEmbedding, PlanStrategy,
};
use crate::quantizer::{quantize_model, QuantConfig, QuantMethod};
use crate::tokenizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable that, when set, replaces the configured output
/// directory.
pub const OUTPUT_ROOT_VAR: &str = "SHRINK_OUTPUT_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub pruning: Option<PruningSection>,
    #[serde(default)]
    pub sft: Option<AdapterConfig>,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Load an existing checkpoint...
    pub checkpoint: Option<PathBuf>,
    /// ...or initialize (and optionally pretrain) a fresh one.
    pub fresh: Option<FreshModel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreshModel {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Read training lines from a file instead of generating them.
    pub path: Option<PathBuf>,
    pub lines: usize,
    /// Optional prompt file; the built-in generator is used otherwise.
    pub prompts_path: Option<PathBuf>,
    pub prompt_count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            path: None,
            lines: 256,
            prompts_path: None,
            prompt_count: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub samples: usize,
    pub max_len: usize,
    /// Reservoir cap on cached activation rows per layer.
    pub cap: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            samples: 16,
            max_len: 64,
            cap: 2048,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub k: usize,
    pub criterion: ImportanceCriterion,
    pub strategy: PlanStrategy,
    pub gen_tokens: usize,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            k: 2,
            criterion: ImportanceCriterion::AblationSimilarity,
            strategy: PlanStrategy::OneShot,
            gen_tokens: 32,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model.checkpoint, &self.model.fresh) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "model supplies both checkpoint and fresh init".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "model needs a checkpoint path or a fresh init".into(),
                ))
            }
            _ => {}
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        if let Some(s) = &self.sft {
            s.validate()?;
        }
        if self.calibration.samples == 0 || self.calibration.max_len == 0 {
            return Err(Error::InvalidConfig("empty calibration settings".into()));
        }
        Ok(())
    }

    /// The directory artifacts go to, honoring the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model_id: String,
    pub reports: Vec<EvalReport>,
    pub table: String,
    pub output_dir: PathBuf,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

struct Workspace {
    out: PathBuf,
    corpus: Vec<String>,
    prompts: Vec<String>,
    original: ModelCheckpoint,
    cal: CalibrationSet,
}

fn setup(cfg: &PipelineConfig) -> Result<Workspace> {
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;

    let corpus_lines = match &cfg.corpus.path {
        Some(p) => corpus::load_corpus(p)?,
        None => {
            let lines = corpus::generate_corpus(cfg.corpus.lines, cfg.seed);
            corpus::write_corpus(&out.join("corpus.txt"), &lines)?;
            lines
        }
    };
    let prompts = match &cfg.corpus.prompts_path {
        Some(p) => corpus::load_corpus(p)?,
        None => {
            let prompts = corpus::generate_prompts(cfg.corpus.prompt_count, cfg.seed);
            corpus::write_corpus(&out.join("prompts.txt"), &prompts)?;
            prompts
        }
    };

    let original = match (&cfg.model.checkpoint, &cfg.model.fresh) {
        (Some(path), None) => checkpoint::load(path)?,
        (None, Some(fresh)) => {
            let mc = ModelConfig {
                vocab_size: tokenizer::VOCAB_SIZE,
                d_model: fresh.d_model,
                n_layers: fresh.n_layers,
                n_heads: fresh.n_heads,
                d_ff: fresh.d_ff,
                max_seq_len: fresh.max_seq_len,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = ModelCheckpoint::random(mc, &mut rng)?;
            match &fresh.pretrain {
                Some(tc) => {
                    let (trained, log) = pretrain(&model, &corpus_lines, tc)?;
                    fs::write(
                        out.join("pretrain_log.json"),
                        serde_json::to_string_pretty(&log).expect("log serialize"),
                    )?;
                    trained
                }
                None => model,
            }
        }
        _ => unreachable!("validate enforces exactly one source"),
    };
    checkpoint::save(&original, &out.join("original.shrk"))?;

    let n = cfg.calibration.samples.min(corpus_lines.len());
    // Calibration text longer than the context window can never be fed to
    // the model, so the configured cap is bounded by it.
    let max_len = cfg.calibration.max_len.min(original.config.max_seq_len);
    let cal = build_calibration_set(&corpus_lines, n, max_len, cfg.seed)?;

    Ok(Workspace {
        out,
        corpus: corpus_lines,
        prompts,
        original,
        cal,
    })
}

fn prune_stage(
    ws: &Workspace,
    model: &ModelCheckpoint,
    section: &PruningSection,
    seed: u64,
) -> Result<ModelCheckpoint> {
    let g = MeanHiddenEmbedding { model: &ws.original };
    let plan = match section.strategy {
        PlanStrategy::OneShot => {
            let report = rank_blocks(
                model,
                section.criterion,
                &ws.cal,
                &g,
                section.gen_tokens,
                seed,
            )?;
            fs::write(ws.out.join("importance.json"), report.to_json())?;
            make_plan(&report, section.k)?
        }
        PlanStrategy::Recompute => {
            if section.criterion != ImportanceCriterion::AblationSimilarity {
                return Err(Error::InvalidConfig(
                    "iterative rescoring only works with the ablation criterion".into(),
                ));
            }
            make_plan_recompute(model, &ws.cal, &g, section.k, section.gen_tokens, seed)?
        }
    };
    fs::write(
        ws.out.join("plan.json"),
        serde_json::to_string_pretty(&plan).expect("plan serialize"),
    )?;
    let pruned = execute_plan(model, &plan)?;
    checkpoint::save(&pruned, &ws.out.join("pruned.shrk"))?;
    Ok(pruned)
}

fn sft_stage(
    ws: &Workspace,
    model: &ModelCheckpoint,
    cfg: &AdapterConfig,
) -> Result<ModelCheckpoint> {
    let (tuned, log) = finetune(model, &ws.corpus, cfg)?;
    fs::write(
        ws.out.join("sft_log.json"),
        serde_json::to_string_pretty(&log).expect("log serialize"),
    )?;
    checkpoint::save(&tuned, &ws.out.join("sft.shrk"))?;
    Ok(tuned)
}

fn quant_stage(
    ws: &Workspace,
    model: &ModelCheckpoint,
    cfg: &QuantConfig,
    cap: usize,
    seed: u64,
    artifact: &str,
) -> Result<ModelCheckpoint> {
    let record = match cfg.method {
        QuantMethod::Awq => Some(collect_calibration_record(model, &ws.cal, cap, seed)?),
        QuantMethod::Rtn => None,
    };
    let (quantized, results) = quantize_model(model, record.as_ref(), cfg)?;
    if !results.is_empty() {
        fs::write(
            ws.out.join(format!("{artifact}_awq.json")),
            serde_json::to_string_pretty(&results).expect("results serialize"),
        )?;
    }
    checkpoint::save(&quantized, &ws.out.join(format!("{artifact}.shrk")))?;
    Ok(quantized)
}

/// Run the configured stages in prune -> fine-tune -> quantize order and
/// evaluate the outcome against the original model.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let ws = stage("setup", setup(cfg))?;

    let mut model = ws.original.clone();
    let mut id_parts: Vec<&str> = Vec::new();
    if let Some(section) = &cfg.pruning {
        model = stage("prune", prune_stage(&ws, &model, section, cfg.seed))?;
        id_parts.push("prune");
    }
    if let Some(section) = &cfg.sft {
        model = stage("sft", sft_stage(&ws, &model, section))?;
        id_parts.push("sft");
    }
    if let Some(section) = &cfg.quant {
        model = stage(
            "quantize",
            quant_stage(&ws, &model, section, cfg.calibration.cap, cfg.seed, "quant"),
        )?;
        id_parts.push("quant");
    }
    let model_id = if id_parts.is_empty() {
        "original".to_string()
    } else {
        id_parts.join("_")
    };

    let g = MeanHiddenEmbedding { model: &ws.original };
    let mut reports = vec![stage(
        "eval",
        eval::evaluate(
            "original",
            &ws.original,
            &ws.original,
            &ws.corpus,
            &ws.prompts,
            &g,
            &cfg.eval,
        ),
    )?];
    if model_id != "original" {
        reports.push(stage(
            "eval",
            eval::evaluate(
                &model_id,
                &model,
                &ws.original,
                &ws.corpus,
                &ws.prompts,
                &g,
                &cfg.eval,
            ),
        )?);
    }
    let table = eval::build_report_table(&reports);
    fs::write(ws.out.join("reports.json"), eval::reports_to_json(&reports))?;
    fs::write(ws.out.join("report_table.txt"), &table)?;

    Ok(PipelineOutcome {
        model_id,
        reports,
        table,
        output_dir: ws.out,
    })
}

/// Build and evaluate all six canonical variants. One pruning plan and
/// one fine-tuned model are shared across rows, so `prune`,
/// `prune_quant`, and `prune_sft_quant` all descend from the same
/// decisions and the whole ladder is reproducible from the config alone.
pub fn run_ladder(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let ws = stage("setup", setup(cfg))?;
    let pruning = cfg.pruning.clone().unwrap_or_default();
    let sft = cfg.sft.clone().unwrap_or_default();
    let quant = cfg.quant.unwrap_or_default();
    let cap = cfg.calibration.cap;

    let pruned = stage("prune", prune_stage(&ws, &ws.original, &pruning, cfg.seed))?;
    let tuned = stage("sft", sft_stage(&ws, &pruned, &sft))?;
    let q_original = stage(
        "quantize",
        quant_stage(&ws, &ws.original, &quant, cap, cfg.seed, "quant"),
    )?;
    let q_pruned = stage(
        "quantize",
        quant_stage(&ws, &pruned, &quant, cap, cfg.seed, "prune_quant"),
    )?;
    let q_tuned = stage(
        "quantize",
        quant_stage(&ws, &tuned, &quant, cap, cfg.seed, "prune_sft_quant"),
    )?;

    let variants: [(&str, &ModelCheckpoint); 6] = [
        ("original", &ws.original),
        ("prune", &pruned),
        ("prune_sft", &tuned),
        ("quant", &q_original),
        ("prune_quant", &q_pruned),
        ("prune_sft_quant", &q_tuned),
    ];
    let g = MeanHiddenEmbedding { model: &ws.original };
    let mut reports = Vec::with_capacity(variants.len());
    for (id, model) in variants {
        reports.push(stage(
            "eval",
            eval::evaluate(id, model, &ws.original, &ws.corpus, &ws.prompts, &g, &cfg.eval),
        )?);
    }
    let table = eval::build_report_table(&reports);
    fs::write(ws.out.join("reports.json"), eval::reports_to_json(&reports))?;
    fs::write(ws.out.join("report_table.txt"), &table)?;

    Ok(PipelineOutcome {
        model_id: "ladder".to_string(),
        reports,
        table,
        output_dir: ws.out,
    })
}
