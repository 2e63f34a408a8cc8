use std::path::Path;

use tinydrive_pipeline::data::{load_dataset, load_labels, load_records};
use tinydrive_pipeline::model::{flop_counts, param_counts, Models};
use tinydrive_pipeline::synth::{audit, synth_corpus, SynthSpec, NUM_CLASSES};
use tinydrive_pipeline::TrainConfig;

fn spec(seed: u64, size: usize) -> SynthSpec {
    SynthSpec {
        seed,
        size,
        n_views: 1,
        qa_total: None,
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn synthesis_is_byte_identical_for_a_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_corpus(&spec(3, 15), a.path()).unwrap();
    synth_corpus(&spec(3, 15), b.path()).unwrap();
    synth_corpus(&spec(4, 15), c.path()).unwrap();
    for name in ["qa.jsonl", "labels.jsonl", "images/f00000.png", "images/f00014.png"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    assert_ne!(read(a.path(), "images/f00000.png"), read(c.path(), "images/f00000.png"));
}

#[test]
fn synthetic_answers_agree_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_corpus(&spec(1, 33), dir.path()).unwrap();
    assert_eq!(s.classes, NUM_CLASSES);
    let records = load_records(&dir.path().join("qa.jsonl")).unwrap();
    let labels = load_labels(&dir.path().join("labels.jsonl")).unwrap();
    assert_eq!(records.len(), 330);
    assert_eq!(labels.len(), 33);
    assert!(audit(&records, &labels).is_empty());
}

#[test]
fn requested_question_total_is_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_corpus(
        &SynthSpec {
            qa_total: Some(2279),
            ..spec(2, 165)
        },
        dir.path(),
    )
    .unwrap();
    assert_eq!(s.records, 2279);
    let mut cfg = TrainConfig::default();
    cfg.image_resolution = 32;
    let ds = load_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(ds.records.len(), 2279);
    assert_eq!(ds.frames.len(), 165);
    let split = &ds.split;
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), 2279);
    assert_eq!(ds.frame_split.train.len(), 115);
}

#[test]
fn multi_view_corpus_loads_six_views() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(
        &SynthSpec {
            n_views: 6,
            ..spec(5, 4)
        },
        dir.path(),
    )
    .unwrap();
    let mut cfg = TrainConfig::multi_view();
    cfg.image_resolution = 32;
    let ds = load_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(ds.frames.len(), 4);
    assert_eq!(ds.frames[0].pixels.shape(), &[6, 3, 32, 32]);
}

#[test]
fn resolution_scales_convolution_flops_not_parameters() {
    let mut small = TrainConfig::default();
    small.image_resolution = 64;
    let mut large = small.clone();
    large.image_resolution = 128;
    let (a, b) = (Models::build(&small, 120).unwrap(), Models::build(&large, 120).unwrap());
    assert_eq!(param_counts(&a.store), param_counts(&b.store));
    let (fa, fb) = (flop_counts(&a, &small), flop_counts(&b, &large));
    let ratio = fb.vision_backbone as f64 / fa.vision_backbone as f64;
    assert!((3.95..=4.0).contains(&ratio), "backbone flop ratio {ratio}");
    assert_eq!(fa.language, fb.language);
}

#[test]
fn vision_encoder_is_compact() {
    let cfg = TrainConfig::default();
    let m = Models::build(&cfg, 200).unwrap();
    let p = param_counts(&m.store);
    assert!(p.vision_backbone + p.vision_head < 100_000, "{p:?}");
    assert_eq!(p.total, p.vision_backbone + p.vision_head + p.language);
    let multi = Models::build(&TrainConfig::multi_view(), 200).unwrap();
    let f1 = flop_counts(&m, &cfg).vision_backbone;
    let f6 = flop_counts(&multi, &TrainConfig::multi_view()).vision_backbone;
    assert_eq!(f6, 6 * f1);
    assert_eq!(param_counts(&multi.store).vision_head, 0);
}
