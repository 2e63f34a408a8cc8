//! The two training phases: the language phase with prioritized sequence
//! sampling (classification head frozen) followed by the head phase (vision
//! backbone frozen).

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tinydrive_core::buffer::{
    compute_diversity, compute_uncertainty, normalize_losses, Components, PriorityBuffer,
};
use tinydrive_core::nn::{Graph, Group, ParamStore};
use tinydrive_core::optim::{AdamW, ExponentialLr};
use tinydrive_core::router::{route_top_k, TokenizedText};
use tinydrive_core::seq_model::weighted_loss;
use tinydrive_core::vision::{attention_to_gray, Scale};
use tinydrive_core::{Tensor, Var};

use crate::config::{Sampler, TrainConfig};
use crate::data::{Dataset, Frame};
use crate::error::{PipelineError, Result};
use crate::model::Models;
use crate::synth::SYNTH_RESOLUTION;
use crate::tokenizer::Vocab;

/// A record ready for the sequence model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: usize,
    pub frame: usize,
    /// Question ids padded to the configured maximum.
    pub question: Vec<usize>,
    pub mask: Vec<bool>,
    /// Answer ids followed by the end token.
    pub target: Vec<usize>,
}

pub fn prepare_samples(ds: &Dataset, vocab: &Vocab, cfg: &TrainConfig) -> Vec<Sample> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (question, mask) = vocab.encode_padded(&r.question, cfg.question_max_len);
            Sample {
                record: i,
                frame: ds.record_frame[i],
                question,
                mask,
                target: vocab.encode_target(&r.answer, cfg.answer_max_len),
            }
        })
        .collect()
}

/// `[b, n, 3, r, r]` stacked from the frames of the given samples.
pub fn frame_batch(frames: &[Frame], idx: impl IntoIterator<Item = usize>) -> Result<Tensor<f32>> {
    let views: Vec<Tensor<f32>> = idx.into_iter().map(|f| frames[f].pixels.clone()).collect();
    Ok(Tensor::stack(&views)?)
}

/// Routed question ids, using the current input embedding table for the
/// norm term.
pub fn route_questions(models: &Models, cfg: &TrainConfig, samples: &[&Sample]) -> Result<Vec<Vec<usize>>> {
    let table = models.store.value(models.seq.embed.table);
    let router = cfg.router_config();
    samples
        .iter()
        .map(|s| {
            if !s.mask.iter().any(|&m| m) {
                return Ok(Vec::new());
            }
            let emb = table.select_rows(&s.question)?;
            let seq = TokenizedText::new(s.question.clone(), s.mask.clone(), emb)?;
            Ok(route_top_k(&seq, &router)?.kept_ids)
        })
        .collect()
}

fn step_seed(seed: u64, phase: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (phase << 56) ^ step
}

pub type Progress<'a> = &'a mut dyn FnMut(&str);

// ------------------------------------------------------------------ language

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageLog {
    pub sampler: Sampler,
    pub steps: u64,
    pub steps_per_epoch: u64,
    /// Mean unweighted per-sequence loss of every epoch, in training mode.
    pub epoch_losses: Vec<f64>,
    /// Language learning rate used in every epoch.
    pub epoch_lr: Vec<f64>,
    /// Mean loss on the fixed probe set before and after the phase, in
    /// evaluation mode.
    pub probe_initial: f64,
    pub probe_final: f64,
    pub probe_size: usize,
    pub head_checksum_before: u64,
    pub head_checksum_after: u64,
    pub beta_final: f64,
    pub buffer_writes: u64,
    pub seconds: f64,
}

impl LanguageLog {
    pub fn head_frozen(&self) -> bool {
        self.head_checksum_before == self.head_checksum_after
    }
}

/// Mean per-sequence loss over `samples` without dropout.
pub fn probe_loss(models: &mut Models, cfg: &TrainConfig, ds: &Dataset, samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.lang_batch_size.max(8)) {
        let routed = route_questions(models, cfg, chunk)?;
        let x = frame_batch(&ds.frames, chunk.iter().map(|s| s.frame))?;
        let targets: Vec<Vec<usize>> = chunk.iter().map(|s| s.target.clone()).collect();
        let Models { store, vision, seq } = models;
        let mut g = Graph::new(store, false, 0);
        let enc = vision.encode_views(&mut g, &x)?;
        let fused = seq.fuse(&mut g, enc.embedding, &routed)?;
        let out = seq.forward(&mut g, &fused, &targets)?;
        total += g.tape.value(out.loss).data().iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}

pub struct LanguageState {
    pub optimizer: AdamW<f32>,
    pub buffer: PriorityBuffer,
}

/// Buffer pre-filled with every training record at the maximum priority.
pub fn initial_buffer(cfg: &TrainConfig, train: &[usize]) -> Result<PriorityBuffer> {
    let mut buffer = PriorityBuffer::new(cfg.buffer_config())?;
    for &id in train {
        buffer.insert_fresh(id)?;
    }
    Ok(buffer)
}

pub fn train_language_phase(
    cfg: &TrainConfig,
    ds: &Dataset,
    samples: &[Sample],
    models: &mut Models,
    state: &mut LanguageState,
    progress: Progress,
) -> Result<LanguageLog> {
    let start = Instant::now();
    let train = &ds.split.train;
    if train.is_empty() {
        return Err(PipelineError::Dataset("training split is empty".into()));
    }
    models.store.set_trainable(Group::VisionBackbone, true);
    models.store.set_trainable(Group::Language, true);
    models.store.set_trainable(Group::VisionHead, false);
    let head_before = models.store.checksum(&[Group::VisionHead]);

    let probe: Vec<&Sample> = train.iter().take(256).map(|&i| &samples[i]).collect();
    let probe_initial = probe_loss(models, cfg, ds, &probe)?;

    let b = cfg.lang_batch_size;
    let steps_per_epoch = train.len().div_ceil(b) as u64;
    let lang_lr = ExponentialLr { base: cfg.lang_lr, gamma: cfg.lr_gamma };
    let vis_lr = ExponentialLr { base: cfg.vision_lr, gamma: cfg.lr_gamma };
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 1, 0));
    let mut step = 0u64;
    let mut writes = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.lang_epochs);
    let mut epoch_lr = Vec::with_capacity(cfg.lang_epochs);
    for epoch in 0..cfg.lang_epochs {
        let (lr_l, lr_v) = (lang_lr.at(epoch), vis_lr.at(epoch));
        epoch_lr.push(lr_l);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..steps_per_epoch {
            step += 1;
            let (ids, weights) = match cfg.sampler {
                Sampler::Prioritized => {
                    let draws = state.buffer.sample(b, &mut rng)?;
                    let probs: Vec<f64> = draws.iter().map(|d| d.probability).collect();
                    let w = state.buffer.importance_weights(&probs)?;
                    (draws.iter().map(|d| d.seq_id).collect::<Vec<_>>(), w)
                }
                Sampler::Uniform => {
                    let ids = (0..b).map(|_| train[rng.random_range(0..train.len())]).collect();
                    (ids, vec![1.0; b])
                }
            };
            let batch: Vec<&Sample> = ids.iter().map(|&i| &samples[i]).collect();
            let routed = route_questions(models, cfg, &batch)?;
            let x = frame_batch(&ds.frames, batch.iter().map(|s| s.frame))?;
            let targets: Vec<Vec<usize>> = batch.iter().map(|s| s.target.clone()).collect();

            let Models { store, vision, seq } = models;
            let mut g = Graph::new(store, true, step_seed(cfg.seed, 2, step));
            let enc = vision.encode_views(&mut g, &x)?;
            let fused = seq.fuse(&mut g, enc.embedding, &routed)?;
            let out = seq.forward(&mut g, &fused, &targets)?;
            let losses: Vec<f64> = g.tape.value(out.loss).data().iter().map(|&v| v as f64).collect();
            if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
                return Err(PipelineError::Diverged {
                    step,
                    msg: format!("per-sequence loss {bad} in epoch {epoch}; batch ids {ids:?}"),
                });
            }
            let total = weighted_loss(&mut g, out.loss, &weights)?;
            let grads = g.backward(total)?;
            state.optimizer.step(store, &grads, |grp| match grp {
                Group::Language => lr_l,
                Group::VisionBackbone => lr_v,
                Group::VisionHead => 0.0,
            });
            sum += losses.iter().sum::<f64>();
            count += losses.len();

            if cfg.sampler == Sampler::Prioritized {
                state.buffer.anneal_beta();
                let norm = normalize_losses(&losses);
                let mut stats = Vec::with_capacity(b);
                for (i, &id) in ids.iter().enumerate() {
                    let c = Components {
                        loss: norm[i],
                        uncertainty: compute_uncertainty(&out.max_probs[i])?,
                        diversity: compute_diversity(&out.encoder_mean, i)?,
                    };
                    let e = out.encoder_mean[i].iter().map(|&v| v as f32).collect();
                    stats.push((id, c, e));
                }
                if state.buffer.refresh_scores(&stats, step)? {
                    writes += 1;
                }
            }
            if step % 200 == 0 {
                progress(&format!(
                    "language epoch {}/{} step {step}: loss {:.4}",
                    epoch + 1,
                    cfg.lang_epochs,
                    sum / count as f64
                ));
            }
        }
        let mean = sum / count.max(1) as f64;
        progress(&format!("language epoch {}/{}: mean loss {mean:.4}, lr {lr_l:.3e}", epoch + 1, cfg.lang_epochs));
        epoch_losses.push(mean);
    }
    let probe_final = probe_loss(models, cfg, ds, &probe)?;
    Ok(LanguageLog {
        sampler: cfg.sampler,
        steps: step,
        steps_per_epoch,
        epoch_losses,
        epoch_lr,
        probe_initial,
        probe_final,
        probe_size: probe.len(),
        head_checksum_before: head_before,
        head_checksum_after: models.store.checksum(&[Group::VisionHead]),
        beta_final: state.buffer.beta(),
        buffer_writes: writes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ------------------------------------------------------------------ vision

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionLog {
    pub epochs: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// Accuracy on the held-out (validation and test) labelled frames.
    pub heldout_accuracy: f64,
    pub heldout_frames: usize,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
    pub language_checksum_before: u64,
    pub language_checksum_after: u64,
    pub seconds: f64,
}

impl VisionLog {
    pub fn backbone_frozen(&self) -> bool {
        self.backbone_checksum_before == self.backbone_checksum_after
            && self.language_checksum_before == self.language_checksum_after
    }
}

/// Fused front-view map `[24, r, r]` of a frame under the frozen backbone.
fn fused_map(models: &mut Models, frame: &Frame) -> Result<Tensor<f32>> {
    let s = frame.pixels.shape().to_vec();
    let front = Tensor::new(&[1, s[1], s[2], s[3]], frame.pixels.data()[..s[1] * s[2] * s[3]].to_vec())?;
    let Models { store, vision, .. } = models;
    let mut g = Graph::new(store, false, 0);
    let x = g.input(front);
    let enc = vision.encode_flat(&mut g, x)?;
    let f = g.tape.value(enc.fused).clone();
    let fs = f.shape().to_vec();
    Ok(f.reshape(&fs[1..])?)
}

/// Translates a `[c, h, w]` map by `(dy, dx)`, filling uncovered cells with
/// each channel's mean.
fn shift_map(map: &Tensor<f32>, dy: isize, dx: isize) -> Result<Tensor<f32>> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let src = map.data();
    let plane = (h * w) as usize;
    let mut out = Vec::with_capacity(src.len());
    for ch in src.chunks(plane).take(c) {
        let mean = ch.iter().sum::<f32>() / plane as f32;
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y - dy, x - dx);
                out.push(if (0..h).contains(&sy) && (0..w).contains(&sx) { ch[(sy * w + sx) as usize] } else { mean });
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

fn label_of(frame: &Frame) -> Result<usize> {
    frame
        .label
        .as_ref()
        .map(|l| l.class)
        .ok_or_else(|| PipelineError::Dataset(format!("frame {} has no label", frame.id)))
}

/// Class predictions for labelled frames, batched, in evaluation mode.
pub fn classify_frames(models: &mut Models, frames: &[Frame], idx: &[usize], cache: &[Option<Tensor<f32>>]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(32) {
        let maps = chunk
            .iter()
            .map(|&f| match &cache[f] {
                Some(t) => Ok(t.clone()),
                None => fused_map(models, &frames[f]),
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&maps)?;
        let Models { store, vision, .. } = models;
        let mut g = Graph::new(store, false, 0);
        let xv = g.input(x);
        let logits = vision.classify(&mut g, xv)?;
        let lv = g.tape.value(logits);
        let c = lv.shape()[1];
        for row in lv.data().chunks(c) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn accuracy(models: &mut Models, frames: &[Frame], idx: &[usize], cache: &[Option<Tensor<f32>>]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let pred = classify_frames(models, frames, idx, cache)?;
    let mut hits = 0;
    for (&f, &p) in idx.iter().zip(&pred) {
        hits += usize::from(label_of(&frames[f])? == p);
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Largest fused-map cache kept in memory, in bytes.
const FUSED_CACHE_LIMIT: usize = 1 << 30;

pub fn train_vision_phase(
    cfg: &TrainConfig,
    ds: &Dataset,
    models: &mut Models,
    optimizer: &mut AdamW<f32>,
    progress: Progress,
) -> Result<VisionLog> {
    let start = Instant::now();
    if !models.has_head() {
        return Err(PipelineError::Config("the vision phase needs num_classes > 0".into()));
    }
    let train = &ds.frame_split.train;
    if train.is_empty() {
        return Err(PipelineError::Dataset("no labelled training frames".into()));
    }
    models.store.set_trainable(Group::VisionBackbone, false);
    models.store.set_trainable(Group::Language, false);
    models.store.set_trainable(Group::VisionHead, true);
    let backbone_before = models.store.checksum(&[Group::VisionBackbone]);
    let language_before = models.store.checksum(&[Group::Language]);

    let r = cfg.image_resolution;
    let labelled: Vec<usize> = ds.frame_split.train.iter().chain(&ds.frame_split.val).chain(&ds.frame_split.test).copied().collect();
    let mut cache: Vec<Option<Tensor<f32>>> = vec![None; ds.frames.len()];
    if labelled.len() * models.vision.cfg.view_dim() * r * r * 4 <= FUSED_CACHE_LIMIT {
        for &f in &labelled {
            cache[f] = Some(fused_map(models, &ds.frames[f])?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 3, 0));
    let mut order = train.clone();
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.vision_epochs);
    for epoch in 0..cfg.vision_epochs {
        let lr = cfg.head_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.vision_epochs as f64).cos());
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.vision_batch_size) {
            step += 1;
            let maps = chunk
                .iter()
                .map(|&f| {
                    let map = match &cache[f] {
                        Some(t) => t.clone(),
                        None => fused_map(models, &ds.frames[f])?,
                    };
                    let reach = (cfg.head_shift * map.shape()[1] as f64) as i64;
                    if reach == 0 {
                        return Ok(map);
                    }
                    let (dy, dx) = (rng.random_range(-reach..=reach), rng.random_range(-reach..=reach));
                    shift_map(&map, dy as isize, dx as isize)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = chunk
                .iter()
                .map(|&f| label_of(&ds.frames[f]).map(Some))
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&maps)?;
            let Models { store, vision, .. } = models;
            let mut g = Graph::new(store, true, step_seed(cfg.seed, 4, step));
            let xv = g.input(x);
            let logits = vision.classify(&mut g, xv)?;
            let ce = g.tape.cross_entropy(logits, &labels)?;
            let total = g.tape.sum(ce);
            let loss = g.tape.scale(total, 1.0 / chunk.len() as f32);
            let lv = g.tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(PipelineError::Diverged {
                    step,
                    msg: format!("classification loss {lv} in epoch {epoch}"),
                });
            }
            sum += lv * chunk.len() as f64;
            let grads = g.backward(loss)?;
            optimizer.step(store, &grads, |grp| if grp == Group::VisionHead { lr } else { 0.0 });
        }
        let mean = sum / train.len() as f64;
        epoch_losses.push(mean);
        if (epoch + 1) % 10 == 0 || epoch == 0 {
            progress(&format!("vision epoch {}/{}: mean loss {mean:.4}, lr {lr:.3e}", epoch + 1, cfg.vision_epochs));
        }
    }
    let heldout: Vec<usize> = ds.frame_split.val.iter().chain(&ds.frame_split.test).copied().collect();
    let train_accuracy = accuracy(models, &ds.frames, train, &cache)?;
    let heldout_accuracy = accuracy(models, &ds.frames, &heldout, &cache)?;
    Ok(VisionLog {
        epochs: cfg.vision_epochs,
        steps: step,
        epoch_losses,
        train_accuracy,
        heldout_accuracy,
        heldout_frames: heldout.len(),
        backbone_checksum_before: backbone_before,
        backbone_checksum_after: models.store.checksum(&[Group::VisionBackbone]),
        language_checksum_before: language_before,
        language_checksum_after: models.store.checksum(&[Group::Language]),
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ------------------------------------------------------------------ attention

/// Spatial attention maps `[h, w]` of the front view at the three scales.
pub fn attention_maps(store: &mut ParamStore<f32>, models: &Models, frame: &Frame) -> Result<Vec<Tensor<f32>>> {
    let s = frame.pixels.shape().to_vec();
    let front = Tensor::new(&[1, s[1], s[2], s[3]], frame.pixels.data()[..s[1] * s[2] * s[3]].to_vec())?;
    let mut g = Graph::new(store, false, 0);
    let x = g.input(front);
    let enc = models.vision.encode_flat(&mut g, x)?;
    enc.attention
        .iter()
        .map(|&a: &Var| {
            let t = g.tape.value(a).clone();
            let sh = t.shape().to_vec();
            Ok(t.reshape(&sh[2..])?)
        })
        .collect()
}

/// Fraction of the attention mass of `map` that falls inside `bbox`, given
/// in pixels of the source frame.
pub fn mass_in_box(map: &Tensor<f32>, bbox: [u32; 4], source: u32) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let sx = w as f64 / source as f64;
    let sy = h as f64 / source as f64;
    let x0 = (bbox[0] as f64 * sx).floor() as usize;
    let x1 = (((bbox[2] + 1) as f64 * sx).ceil() as usize).min(w);
    let y0 = (bbox[1] as f64 * sy).floor() as usize;
    let y1 = (((bbox[3] + 1) as f64 * sy).ceil() as usize).min(h);
    let d = map.data();
    let total: f64 = d.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            inside += d[y * w + x] as f64;
        }
    }
    inside / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAttention {
    pub frame_id: String,
    /// Mean over scales of the in-box mass fraction.
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub frames: Vec<FrameAttention>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Share of frames whose in-box mass increased.
    pub improved_fraction: f64,
}

fn mean_mass(maps: &[Tensor<f32>], bbox: [u32; 4]) -> f64 {
    maps.iter().map(|m| mass_in_box(m, bbox, SYNTH_RESOLUTION)).sum::<f64>() / maps.len() as f64
}

/// Compares in-box attention of the initial and trained weights on the
/// validation frames and writes grayscale maps for the first few.
pub fn attention_report(
    cfg: &TrainConfig,
    ds: &Dataset,
    initial: &ParamStore<f32>,
    models: &mut Models,
    export_dir: Option<&Path>,
) -> Result<AttentionReport> {
    let mut init = initial.clone();
    let mut frames = Vec::new();
    if let Some(dir) = export_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    for (k, &f) in ds.frame_split.val.iter().enumerate() {
        let frame = &ds.frames[f];
        let Some(label) = &frame.label else { continue };
        let before = attention_maps(&mut init, models, frame)?;
        let mut trained = std::mem::take(&mut models.store);
        let after = attention_maps(&mut trained, models, frame);
        models.store = trained;
        let after = after?;
        if let Some(dir) = export_dir.filter(|_| k < cfg.attention_exports) {
            for (stage, maps) in [("pre", &before), ("post", &after)] {
                for (scale, m) in Scale::ALL.iter().zip(maps.iter()) {
                    save_map(&dir.join(format!("{}.{}.{stage}.png", frame.id, scale.name())), m)?;
                }
            }
        }
        frames.push(FrameAttention {
            frame_id: frame.id.clone(),
            before: mean_mass(&before, label.bbox),
            after: mean_mass(&after, label.bbox),
        });
    }
    let n = frames.len().max(1) as f64;
    Ok(AttentionReport {
        mean_before: frames.iter().map(|f| f.before).sum::<f64>() / n,
        mean_after: frames.iter().map(|f| f.after).sum::<f64>() / n,
        improved_fraction: frames.iter().filter(|f| f.after > f.before).count() as f64 / n,
        frames,
    })
}

pub fn save_map(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = (map.shape()[0] as u32, map.shape()[1] as u32);
    let img = image::GrayImage::from_raw(w, h, attention_to_gray(map.data()))
        .ok_or_else(|| PipelineError::Dataset("attention map size mismatch".into()))?;
    img.save(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
