//! End-to-end training run: load, build, both phases, attention report and
//! checkpoint.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tinydrive_core::optim::AdamW;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{PipelineError, Result};
use crate::model::{flop_counts, param_counts, FlopCounts, Models, ParamCounts};
use crate::tokenizer::Vocab;
use crate::train::{
    attention_report, initial_buffer, prepare_samples, train_language_phase, train_vision_phase, AttentionReport,
    LanguageLog, LanguageState, Progress, Sample, VisionLog,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.tdck";
pub const REPORT_FILE: &str = "train_report.json";
pub const ATTENTION_DIR: &str = "attention";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: usize,
    pub frames: usize,
    pub vocab_size: usize,
    pub split_sizes: [usize; 3],
    pub params: ParamCounts,
    pub flops: FlopCounts,
    pub language: LanguageLog,
    pub vision: Option<VisionLog>,
    pub attention: Option<AttentionReport>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let l = &self.language;
        let _ = writeln!(s, "records {} frames {} vocab {}", self.records, self.frames, self.vocab_size);
        let _ = writeln!(
            s,
            "language: {} steps, probe loss {:.4} -> {:.4}, head frozen: {}",
            l.steps,
            l.probe_initial,
            l.probe_final,
            l.head_frozen()
        );
        if let Some(v) = &self.vision {
            let _ = writeln!(
                s,
                "vision: {} steps, accuracy train {:.4} held-out {:.4} ({} frames), backbone frozen: {}",
                v.steps,
                v.train_accuracy,
                v.heldout_accuracy,
                v.heldout_frames,
                v.backbone_frozen()
            );
        }
        if let Some(a) = &self.attention {
            let _ = writeln!(
                s,
                "attention in box: {:.4} -> {:.4}, improved on {:.1}% of {} frames",
                a.mean_before,
                a.mean_after,
                100.0 * a.improved_fraction,
                a.frames.len()
            );
        }
        let _ = writeln!(s, "params {} flops/sample {} time {:.1}s", self.params.total, self.flops.total, self.seconds);
        s
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub dataset: Dataset,
    pub samples: Vec<Sample>,
}

/// Vocabulary over the questions and answers of the training split.
pub fn build_vocab(ds: &Dataset) -> Result<Vocab> {
    let texts = ds.split.train.iter().flat_map(|&i| {
        let r = &ds.records[i];
        [r.question.as_str(), r.answer.as_str()]
    });
    Vocab::build(texts)
}

/// Trains on `data` and, when `out` is given, writes the checkpoint, the
/// report and attention maps there.
pub fn run_training(cfg: &TrainConfig, data: &Path, out: Option<&Path>, progress: Progress) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let ds = load_dataset(data, cfg)?;
    let vocab = build_vocab(&ds)?;
    let samples = prepare_samples(&ds, &vocab, cfg);
    let mut models = Models::build(cfg, vocab.len())?;
    let initial = models.store.clone();
    progress(&format!(
        "{} records, {} frames, split {}/{}/{}, vocab {}",
        ds.records.len(),
        ds.frames.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        vocab.len()
    ));

    let mut state = LanguageState {
        optimizer: AdamW::new(cfg.weight_decay),
        buffer: initial_buffer(cfg, &ds.split.train)?,
    };
    let language = train_language_phase(cfg, &ds, &samples, &mut models, &mut state, progress)?;

    let labelled = !ds.frame_split.train.is_empty();
    let (vision, optimizer) = if models.has_head() && labelled {
        let mut opt = AdamW::new(cfg.weight_decay);
        let log = train_vision_phase(cfg, &ds, &mut models, &mut opt, progress)?;
        (Some(log), opt)
    } else {
        progress("vision phase skipped: no head or no labelled frames");
        (None, state.optimizer)
    };

    let attention = if labelled {
        let dir = out.map(|o| o.join(ATTENTION_DIR));
        Some(attention_report(cfg, &ds, &initial, &mut models, dir.as_deref())?)
    } else {
        None
    };

    let report = TrainReport {
        records: ds.records.len(),
        frames: ds.frames.len(),
        vocab_size: vocab.len(),
        split_sizes: [ds.split.train.len(), ds.split.val.len(), ds.split.test.len()],
        params: param_counts(&models.store),
        flops: flop_counts(&models, cfg),
        language,
        vision,
        attention,
        seconds: start.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        vocab,
        models,
        optimizer: Some(optimizer),
        buffer: Some(state.buffer),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        let p = dir.join(REPORT_FILE);
        std::fs::write(&p, json).map_err(|e| PipelineError::io(&p, e))?;
    }
    Ok(TrainOutcome {
        report,
        checkpoint,
        dataset: ds,
        samples,
    })
}
