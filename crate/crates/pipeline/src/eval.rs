//! Greedy decoding over a split and the metric report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tinydrive_core::nn::Graph;
use tinydrive_core::Tensor;

use crate::config::TrainConfig;
use crate::data::{Category, Dataset};
use crate::error::{PipelineError, Result};
use crate::metrics::Scores;
use crate::model::{flop_counts, param_counts, FlopCounts, Models, ParamCounts};
use crate::tokenizer::{tokenize, Vocab};
use crate::train::{frame_batch, route_questions, Sample};

pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub category: Category,
    pub question: String,
    pub reference: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub overall: Scores,
    pub per_category: BTreeMap<String, Scores>,
    pub params: ParamCounts,
    pub flops: FlopCounts,
    pub predictions: Vec<Prediction>,
}

/// Vision embeddings `[b, n, 3 c_p]` in evaluation mode.
pub fn vision_embeddings(models: &mut Models, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let Models { store, vision, .. } = models;
    let mut g = Graph::new(store, false, 0);
    let enc = vision.encode_views(&mut g, x)?;
    Ok(g.tape.value(enc.embedding).clone())
}

/// Greedy answers for the given samples.
pub fn answer_samples(models: &mut Models, cfg: &TrainConfig, ds: &Dataset, vocab: &Vocab, samples: &[&Sample]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let routed = route_questions(models, cfg, chunk)?;
        let x = frame_batch(&ds.frames, chunk.iter().map(|s| s.frame))?;
        let emb = vision_embeddings(models, &x)?;
        let Models { store, seq, .. } = models;
        let ids = seq.generate(store, &emb, &routed, cfg.answer_max_len)?;
        out.extend(ids.iter().map(|a| vocab.decode(a)));
    }
    Ok(out)
}

pub fn evaluate(models: &mut Models, cfg: &TrainConfig, ds: &Dataset, vocab: &Vocab, samples: &[Sample], split: &str) -> Result<MetricReport> {
    let idx = ds.split.get(split)?;
    if idx.is_empty() {
        return Err(PipelineError::Dataset(format!("split {split} is empty")));
    }
    let chosen: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let answers = answer_samples(models, cfg, ds, vocab, &chosen)?;
    let predictions: Vec<Prediction> = chosen
        .iter()
        .zip(answers)
        .map(|(s, candidate)| {
            let r = &ds.records[s.record];
            Prediction {
                id: r.id.clone(),
                category: r.category,
                question: r.question.clone(),
                reference: r.answer.clone(),
                candidate,
            }
        })
        .collect();
    let pairs = |filter: Option<Category>| -> Vec<(Vec<String>, Vec<String>)> {
        predictions
            .iter()
            .filter(|p| filter.is_none_or(|c| c == p.category))
            .map(|p| (tokenize(&p.candidate), tokenize(&p.reference)))
            .collect()
    };
    let mut per_category = BTreeMap::new();
    for c in Category::ALL {
        let ps = pairs(Some(c));
        if !ps.is_empty() {
            per_category.insert(c.name().to_string(), Scores::compute(&ps));
        }
    }
    Ok(MetricReport {
        split: split.to_string(),
        overall: Scores::compute(&pairs(None)),
        per_category,
        params: param_counts(&models.store),
        flops: flop_counts(models, cfg),
        predictions,
    })
}

impl MetricReport {
    /// Human-readable table; BLEU-4 and ROUGE-L are shown ×100.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}", self.split);
        let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8} {:>8} {:>18}", "category", "n", "BLEU-4", "ROUGE-L", "CIDEr", "meteor_simplified");
        let mut row = |name: &str, sc: &Scores| {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>8.2} {:>8.2} {:>8.3} {:>18.4}",
                name,
                sc.n,
                100.0 * sc.bleu4,
                100.0 * sc.rouge_l,
                sc.cider,
                sc.meteor_simplified
            );
        };
        for (name, sc) in &self.per_category {
            row(name, sc);
        }
        row("overall", &self.overall);
        let _ = writeln!(
            s,
            "params: {} (backbone {}, head {}, language {})",
            self.params.total, self.params.vision_backbone, self.params.vision_head, self.params.language
        );
        let _ = writeln!(
            s,
            "flops/sample: {} (backbone {}, head {}, language {})",
            self.flops.total, self.flops.vision_backbone, self.flops.vision_head, self.flops.language
        );
        s
    }
}
