//! The vision encoder and sequence model sharing one parameter store.

use tinydrive_core::nn::{seeded_rng, Group, ParamStore};
use tinydrive_core::seq_model::SeqModel;
use tinydrive_core::vision::VisionEncoder;

use crate::config::TrainConfig;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Models {
    pub store: ParamStore<f32>,
    pub vision: VisionEncoder,
    pub seq: SeqModel,
}

impl Models {
    /// Deterministic initialisation from the configured seed.
    pub fn build(cfg: &TrainConfig, vocab: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed);
        let vision = VisionEncoder::new(&mut store, cfg.encoder_config(), &mut rng)?;
        let seq = SeqModel::new(&mut store, cfg.model_config(vocab), &mut rng)?;
        Ok(Self { store, vision, seq })
    }

    pub fn has_head(&self) -> bool {
        self.vision.head.is_some()
    }
}

/// Trainable parameter counts per group and in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub vision_backbone: usize,
    pub vision_head: usize,
    pub language: usize,
    pub total: usize,
}

pub fn param_counts(store: &ParamStore<f32>) -> ParamCounts {
    let vb = store.count(&[Group::VisionBackbone]);
    let vh = store.count(&[Group::VisionHead]);
    let l = store.count(&[Group::Language]);
    ParamCounts {
        vision_backbone: vb,
        vision_head: vh,
        language: l,
        total: vb + vh + l,
    }
}

/// Forward FLOPs for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopCounts {
    /// Backbone over all views.
    pub vision_backbone: u64,
    /// Local-global block and head for one view.
    pub vision_head: u64,
    /// Sequence model at the maximum routed source length and answer length.
    pub language: u64,
    pub total: u64,
}

pub fn flop_counts(m: &Models, cfg: &TrainConfig) -> FlopCounts {
    let n = cfg.n_views as u64;
    let backbone = n * m.vision.flops(false);
    let head = if m.has_head() { m.vision.flops(true) - m.vision.flops(false) } else { 0 };
    let src = 1 + cfg.k.min(cfg.question_max_len);
    let language = m.seq.flops(src, cfg.answer_max_len);
    FlopCounts {
        vision_backbone: backbone,
        vision_head: head,
        language,
        total: backbone + head + language,
    }
}
