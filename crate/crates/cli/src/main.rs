//! `shrink`: compress toy transformer checkpoints from the shell.
//!
//! Exit codes: 0 on success, 1 for bad usage or invalid configuration,
//! 2 when a pipeline stage fails partway.

use clap::{Args, Parser, Subcommand, ValueEnum};
use shrink_core::calibration::{build_calibration_set, collect_calibration_record};
use shrink_core::checkpoint;
use shrink_core::corpus;
use shrink_core::error::Error;
use shrink_core::eval::{self, EvalSettings};
use shrink_core::finetune::{finetune, pretrain, AdapterConfig, TrainConfig};
use shrink_core::model::{ModelCheckpoint, ModelConfig};
use shrink_core::pipeline::{run_ladder, run_pipeline, PipelineConfig};
use shrink_core::pruner::{
    execute_plan, make_plan, make_plan_recompute, rank_blocks, ImportanceCriterion,
    MeanHiddenEmbedding,
};
use shrink_core::quantizer::{quantize_model, QuantConfig, QuantMethod};
use shrink_core::tokenizer;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "shrink", version, about = "Depth-prune, fine-tune, and quantize toy transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic Q/A corpus and matching prompts.
    GenCorpus(GenCorpusArgs),
    /// Initialize a fresh model and train every weight on a corpus.
    Pretrain(PretrainArgs),
    /// Rank block importance under one criterion.
    Score(ScoreArgs),
    /// Remove the least important blocks.
    Prune(PruneArgs),
    /// Train low-rank adapters and merge them.
    Finetune(FinetuneArgs),
    /// Group-quantize the linear layers.
    Quantize(QuantizeArgs),
    /// Report perplexity, similarity, size, and latency.
    Eval(EvalArgs),
    /// Run prune/fine-tune/quantize stages from a TOML config.
    Pipeline(ConfigArgs),
    /// Build and evaluate all six canonical variants.
    Ladder(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Ablation,
    Magnitude,
    IoCosine,
}

impl From<CriterionArg> for ImportanceCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Ablation => ImportanceCriterion::AblationSimilarity,
            CriterionArg::Magnitude => ImportanceCriterion::WeightMagnitude,
            CriterionArg::IoCosine => ImportanceCriterion::IoCosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    OneShot,
    Recompute,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rtn,
    Awq,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 256)]
    lines: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many eval prompts next to the corpus.
    #[arg(long)]
    prompts_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    prompt_count: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    d_model: usize,
    #[arg(long, default_value_t = 6)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 96)]
    d_ff: usize,
    #[arg(long, default_value_t = 96)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalArgs {
    #[arg(long, default_value_t = 16)]
    cal_samples: usize,
    #[arg(long, default_value_t = 64)]
    cal_max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Ablation)]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 32)]
    gen_tokens: usize,
    #[command(flatten)]
    cal: CalArgs,
    /// Write the report JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Ablation)]
    criterion: CriterionArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::OneShot)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 32)]
    gen_tokens: usize,
    #[command(flatten)]
    cal: CalArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 8.0)]
    alpha: f32,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Calibration corpus; required for the activation-aware method.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    #[arg(long, default_value_t = 20)]
    alpha_grid: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Awq)]
    method: MethodArg,
    #[arg(long, default_value_t = 2048)]
    cap: usize,
    #[command(flatten)]
    cal: CalArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reference model for the similarity score; defaults to the model
    /// itself (score 100).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    prompt_count: usize,
    #[arg(long, default_value_t = 32)]
    gen_tokens: usize,
    #[arg(long, default_value_t = 5)]
    latency_repeats: usize,
    #[arg(long, default_value_t = 4)]
    latency_prompts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model")]
    id: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Usage problems are validation failures, exit code 1.
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version land here; they are not failures.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Stage { stage, source }) => {
            eprintln!("error in {stage} stage: {source}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_model(path: &Path) -> Result<ModelCheckpoint, Error> {
    checkpoint::load(path)
}

fn calibration_for(
    model: &ModelCheckpoint,
    lines: &[String],
    cal: &CalArgs,
) -> Result<shrink_core::calibration::CalibrationSet, Error> {
    let n = cal.cal_samples.min(lines.len());
    // Samples longer than the context window would be unusable.
    let max_len = cal.cal_max_len.min(model.config.max_seq_len);
    build_calibration_set(lines, n, max_len, cal.seed)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenCorpus(a) => {
            let lines = corpus::generate_corpus(a.lines, a.seed);
            corpus::write_corpus(&a.out, &lines)?;
            println!("wrote {} lines to {}", lines.len(), a.out.display());
            if let Some(p) = a.prompts_out {
                let prompts = corpus::generate_prompts(a.prompt_count, a.seed);
                corpus::write_corpus(&p, &prompts)?;
                println!("wrote {} prompts to {}", prompts.len(), p.display());
            }
            Ok(())
        }
        Cmd::Pretrain(a) => {
            let lines = corpus::load_corpus(&a.corpus)?;
            let cfg = ModelConfig {
                vocab_size: tokenizer::VOCAB_SIZE,
                d_model: a.d_model,
                n_layers: a.n_layers,
                n_heads: a.n_heads,
                d_ff: a.d_ff,
                max_seq_len: a.max_seq_len,
            };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
            let model = ModelCheckpoint::random(cfg, &mut rng)?;
            let tc = TrainConfig {
                lr: a.lr,
                steps: a.steps,
                batch_size: a.batch_size,
                seed: a.seed,
            };
            let (trained, log) = pretrain(&model, &lines, &tc)?;
            checkpoint::save(&trained, &a.out)?;
            println!(
                "pretrained {} params for {} steps (loss {:.4} -> {:.4}), saved to {}",
                trained.param_count(),
                a.steps,
                log.losses.first().copied().unwrap_or(f64::NAN),
                log.final_loss().unwrap_or(f64::NAN),
                a.out.display()
            );
            Ok(())
        }
        Cmd::Score(a) => {
            let model = load_model(&a.model)?;
            let lines = corpus::load_corpus(&a.corpus)?;
            let cal = calibration_for(&model, &lines, &a.cal)?;
            let g = MeanHiddenEmbedding { model: &model };
            let report = rank_blocks(
                &model,
                a.criterion.into(),
                &cal,
                &g,
                a.gen_tokens,
                a.cal.seed,
            )?;
            let json = report.to_json();
            if let Some(out) = a.out {
                std::fs::write(&out, &json)?;
                println!("wrote report to {}", out.display());
            }
            println!("{json}");
            Ok(())
        }
        Cmd::Prune(a) => {
            let model = load_model(&a.model)?;
            let lines = corpus::load_corpus(&a.corpus)?;
            let cal = calibration_for(&model, &lines, &a.cal)?;
            let g = MeanHiddenEmbedding { model: &model };
            let plan = match a.strategy {
                StrategyArg::OneShot => {
                    let report = rank_blocks(
                        &model,
                        a.criterion.into(),
                        &cal,
                        &g,
                        a.gen_tokens,
                        a.cal.seed,
                    )?;
                    make_plan(&report, a.k)?
                }
                StrategyArg::Recompute => {
                    make_plan_recompute(&model, &cal, &g, a.k, a.gen_tokens, a.cal.seed)?
                }
            };
            let pruned = execute_plan(&model, &plan)?;
            checkpoint::save(&pruned, &a.out)?;
            println!(
                "removed blocks {:?}; {} -> {} params; saved to {}",
                plan.remove,
                model.param_count(),
                pruned.param_count(),
                a.out.display()
            );
            Ok(())
        }
        Cmd::Finetune(a) => {
            let model = load_model(&a.model)?;
            let lines = corpus::load_corpus(&a.corpus)?;
            let cfg = AdapterConfig {
                rank: a.rank,
                alpha: a.alpha,
                targets: None,
                lr: a.lr,
                steps: a.steps,
                batch_size: a.batch_size,
                seed: a.seed,
            };
            let (merged, log) = finetune(&model, &lines, &cfg)?;
            checkpoint::save(&merged, &a.out)?;
            println!(
                "fine-tuned for {} steps (loss {:.4} -> {:.4}), merged model saved to {}",
                a.steps,
                log.losses.first().copied().unwrap_or(f64::NAN),
                log.final_loss().unwrap_or(f64::NAN),
                a.out.display()
            );
            Ok(())
        }
        Cmd::Quantize(a) => {
            let cfg = QuantConfig {
                bits: a.bits,
                group_size: a.group_size,
                alpha_grid: a.alpha_grid,
                method: match a.method {
                    MethodArg::Rtn => QuantMethod::Rtn,
                    MethodArg::Awq => QuantMethod::Awq,
                },
            };
            let corpus_path = match (cfg.method, a.corpus) {
                (QuantMethod::Awq, None) => {
                    return Err(Error::InvalidConfig(
                        "activation-aware quantization needs --corpus".into(),
                    ))
                }
                (QuantMethod::Awq, Some(p)) => Some(p),
                (QuantMethod::Rtn, _) => None,
            };
            let model = load_model(&a.model)?;
            let record = match corpus_path {
                Some(path) => {
                    let lines = corpus::load_corpus(&path)?;
                    let cal = calibration_for(&model, &lines, &a.cal)?;
                    Some(collect_calibration_record(&model, &cal, a.cap, a.cal.seed)?)
                }
                None => None,
            };
            let (quantized, results) = quantize_model(&model, record.as_ref(), &cfg)?;
            checkpoint::save(&quantized, &a.out)?;
            let before = checkpoint::fp16_equivalent_bytes(&model);
            let after = checkpoint::serialized_bytes(&quantized);
            println!(
                "quantized {} layers at {} bits (checkpoint {:.2}x the fp16-equivalent size), saved to {}",
                if results.is_empty() {
                    model.linear_layer_names().len()
                } else {
                    results.len()
                },
                cfg.bits,
                after as f64 / before as f64,
                a.out.display()
            );
            Ok(())
        }
        Cmd::Eval(a) => {
            let model = load_model(&a.model)?;
            let reference = match &a.reference {
                Some(p) => load_model(p)?,
                None => model.clone(),
            };
            let lines = corpus::load_corpus(&a.corpus)?;
            let prompts = match &a.prompts {
                Some(p) => corpus::load_corpus(p)?,
                None => corpus::generate_prompts(a.prompt_count, a.seed),
            };
            let settings = EvalSettings {
                gen_tokens: a.gen_tokens,
                latency_repeats: a.latency_repeats,
                latency_prompts: a.latency_prompts,
            };
            let g = MeanHiddenEmbedding { model: &reference };
            let report =
                eval::evaluate(&a.id, &model, &reference, &lines, &prompts, &g, &settings)?;
            if let Some(out) = a.out {
                std::fs::write(&out, eval::reports_to_json(std::slice::from_ref(&report)))?;
                println!("wrote report to {}", out.display());
            }
            print!("{}", eval::build_report_table(std::slice::from_ref(&report)));
            Ok(())
        }
        Cmd::Pipeline(a) => {
            let cfg = PipelineConfig::from_file(&a.config)?;
            let outcome = run_pipeline(&cfg)?;
            println!("pipeline finished: {}", outcome.model_id);
            println!("artifacts in {}", outcome.output_dir.display());
            print!("{}", outcome.table);
            Ok(())
        }
        Cmd::Ladder(a) => {
            let cfg = PipelineConfig::from_file(&a.config)?;
            let outcome = run_ladder(&cfg)?;
            println!("artifacts in {}", outcome.output_dir.display());
            print!("{}", outcome.table);
            Ok(())
        }
    }
}
