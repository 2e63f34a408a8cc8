use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tinydrive_core::gradcheck::run_suite;
use tinydrive_core::router::{normalize_scores, score_tokens, select_top_k, TokenizedText};
use tinydrive_pipeline::checkpoint::Checkpoint;
use tinydrive_pipeline::config::TrainConfig;
use tinydrive_pipeline::data::{load_dataset, load_image};
use tinydrive_pipeline::eval::{evaluate, vision_embeddings};
use tinydrive_pipeline::model::{flop_counts, param_counts, Models};
use tinydrive_pipeline::run::{run_training, CHECKPOINT_FILE, REPORT_FILE};
use tinydrive_pipeline::synth::{class_names, synth_corpus, SynthSpec};
use tinydrive_pipeline::train::{classify_frames, prepare_samples, route_questions, Sample};
use tinydrive_pipeline::{PipelineError, Result};

#[derive(Parser)]
#[command(name = "tinydrive", version, about = "Compact multi-view vision-language training pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic sign corpus.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of frames.
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        views: usize,
        /// Total question/answer pairs (default 10 per frame).
        #[arg(long)]
        qas: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training phases and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a split and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Answer one question about one set of views.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        image: Vec<PathBuf>,
        #[arg(long)]
        question: String,
    },
    /// Show routing scores and kept tokens for a question.
    Route {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        question: String,
    },
    /// List buffer records by priority.
    InspectBuffer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Parameter and FLOP counts for a configuration.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary size assumed for the sequence model.
        #[arg(long, default_value_t = 200)]
        vocab: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::SynthData { seed, size, views, qas, out } => {
            let summary = synth_corpus(&SynthSpec { seed, size, n_views: views, qa_total: qas }, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = run_training(&cfg, &data, Some(&out), &mut |m| eprintln!("{m}"))?;
            print!("{}", outcome.report.summary());
            println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(REPORT_FILE).display());
        }
        Cmd::Eval { checkpoint, data, split, report } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data, &ck.config)?;
            let samples = prepare_samples(&ds, &ck.vocab, &ck.config);
            let rep = evaluate(&mut ck.models, &ck.config, &ds, &ck.vocab, &samples, &split)?;
            print!("{}", rep.table());
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
        }
        Cmd::Infer { checkpoint, image, question } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let cfg = ck.config.clone();
            if image.len() != cfg.n_views {
                return Err(PipelineError::Config(format!("expected {} images, got {}", cfg.n_views, image.len())));
            }
            let views = image.iter().map(|p| load_image(p, cfg.image_resolution)).collect::<Result<Vec<_>>>()?;
            let pixels = tinydrive_core::Tensor::stack(&views)?;
            let (ids, mask) = ck.vocab.encode_padded(&question, cfg.question_max_len);
            let sample = Sample {
                record: 0,
                frame: 0,
                question: ids,
                mask,
                target: Vec::new(),
            };
            let routed = route_questions(&ck.models, &cfg, &[&sample])?;
            let x = tinydrive_core::Tensor::stack(std::slice::from_ref(&pixels))?;
            let emb = vision_embeddings(&mut ck.models, &x)?;
            let Models { store, seq, .. } = &mut ck.models;
            let out = seq.generate(store, &emb, &routed, cfg.answer_max_len)?;
            let answer = ck.vocab.decode(&out[0]);
            let mut result = json!({ "question": question, "answer": answer });
            if ck.models.has_head() {
                let frame = tinydrive_pipeline::data::Frame {
                    id: "input".into(),
                    paths: Vec::new(),
                    pixels,
                    label: None,
                };
                let pred = classify_frames(&mut ck.models, std::slice::from_ref(&frame), &[0], &[None])?;
                result["class"] = json!(class_names().get(pred[0]).copied().unwrap_or("unknown"));
            }
            println!("{}", serde_json::to_string_pretty(&result).expect("json"));
        }
        Cmd::Route { checkpoint, question } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.config;
            let (ids, mask) = ck.vocab.encode_padded(&question, cfg.question_max_len);
            if !mask.iter().any(|&m| m) {
                return Err(PipelineError::Config("question has no tokens".into()));
            }
            let table = ck.models.store.value(ck.models.seq.embed.table);
            let seq = TokenizedText::new(ids.clone(), mask.clone(), table.select_rows(&ids)?)?;
            let raw = score_tokens(&seq, cfg.lambda_m, cfg.lambda_p)?;
            let norm = normalize_scores(&raw, &mask);
            let kept = select_top_k(&raw, &mask, cfg.k);
            for (pos, ((&id, &m), (&r, &n))) in ids.iter().zip(&mask).zip(raw.iter().zip(&norm)).enumerate() {
                if !m {
                    continue;
                }
                let line = json!({
                    "position": pos,
                    "token": ck.vocab.tokens()[id],
                    "raw_score": r,
                    "score": n,
                    "kept": kept.binary_search(&pos).is_ok(),
                });
                println!("{line}");
            }
        }
        Cmd::InspectBuffer { checkpoint, top } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let buf = ck.buffer.ok_or_else(|| PipelineError::Checkpoint("no buffer section".into()))?;
            println!("{}", json!({ "records": buf.len(), "beta": buf.beta(), "total_mass": buf.total_mass() }));
            for r in buf.records_by_priority().into_iter().take(top) {
                let line = json!({
                    "seq_id": r.seq_id,
                    "priority": r.priority,
                    "probability": buf.probability(r.seq_id),
                    "components": r.components,
                    "last_updated": r.last_updated,
                    "sample_count": r.sample_count,
                });
                println!("{line}");
            }
        }
        Cmd::Gradcheck { op, seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let reports = run_suite(&seeds, op.as_deref())?;
            if reports.is_empty() {
                return Err(PipelineError::Config(format!("no gradient check matches {:?}", op.unwrap_or_default())));
            }
            let mut failed = 0;
            println!("{:<28} {:>12} {:>10} {:>6}", "case", "worst", "tolerance", "ok");
            for r in &reports {
                failed += usize::from(!r.passed());
                println!("{:<28} {:>12.3e} {:>10.0e} {:>6}", r.name, r.worst(), r.tolerance, r.passed());
            }
            println!("{} checks, {failed} failed", reports.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Count { config, vocab } => {
            let cfg = load_config(config.as_deref())?;
            let models = Models::build(&cfg, vocab)?;
            let out = json!({
                "params": param_counts(&models.store),
                "flops_per_sample": flop_counts(&models, &cfg),
                "vision_embedding_width": cfg.encoder_config().embed_dim(),
                "max_fused_length": 1 + cfg.k.min(cfg.question_max_len),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
