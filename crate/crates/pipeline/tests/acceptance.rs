//! Acceptance suite. Every criterion prints one PASS/FAIL line on stderr
//! (bypassing output capture) and the test fails if any criterion fails.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinydrive_core::buffer::{BufferConfig, PriorityBuffer, SequenceRecord};
use tinydrive_core::gradcheck::run_suite;
use tinydrive_core::nn::Graph;
use tinydrive_core::router::{normalize_scores, route_top_k, select_top_k, RouterConfig, TokenizedText};
use tinydrive_core::Tensor;
use tinydrive_pipeline::checkpoint::Checkpoint;
use tinydrive_pipeline::eval::{evaluate, MetricReport};
use tinydrive_pipeline::metrics::{bleu4, cider, rouge_l};
use tinydrive_pipeline::model::Models;
use tinydrive_pipeline::run::{run_training, TrainOutcome, TrainReport, CHECKPOINT_FILE};
use tinydrive_pipeline::synth::{synth_corpus, SynthSpec, NUM_CLASSES};
use tinydrive_pipeline::tokenizer::tokenize;
use tinydrive_pipeline::TrainConfig;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn emit(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

// ------------------------------------------------------------------ 1

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let reports = match run_suite(&seeds, None) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:.2e})", r.name, r.worst())).collect();
    let encoder = reports.iter().filter(|r| r.name.contains("encoder")).count();
    let ok = failed.is_empty() && encoder == seeds.len() && elapsed < Duration::from_secs(120);
    verdict(
        ok,
        format!(
            "{} checks over {} seeds ({} composed-encoder), {} failed {:?}, {:.1}s",
            reports.len(),
            seeds.len(),
            encoder,
            failed.len(),
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 2

fn fused_shape(cfg: &TrainConfig) -> tinydrive_core::Result<(usize, Vec<usize>)> {
    let mut models = Models::build(cfg, 100).expect("model builds");
    let Models { store, vision, seq } = &mut models;
    let r = cfg.image_resolution;
    let x = Tensor::<f32>::zeros(&[1, cfg.n_views, 3, r, r]);
    // a full-length question routed down to K tokens
    let len = cfg.question_max_len;
    let ids: Vec<usize> = (0..len).map(|i| 3 + i % 90).collect();
    let rows = store.value(seq.embed.table).select_rows(&ids)?;
    let text = TokenizedText::new(ids, vec![true; len], rows)?;
    let routed = route_top_k(&text, &cfg.router_config())?;
    let mut g = Graph::new(store, false, 0);
    let enc = vision.encode_views(&mut g, &x)?;
    let width: usize = g.tape.shape(enc.embedding)[1..].iter().product();
    let fused = seq.fuse(&mut g, enc.embedding, &[routed.kept_ids])?;
    Ok((width, g.tape.shape(fused.x).to_vec()))
}

fn shape_conformance() -> Verdict {
    let mut multi = TrainConfig::multi_view();
    multi.image_resolution = 32;
    let mut single = TrainConfig::default();
    single.image_resolution = 32;
    match (fused_shape(&multi), fused_shape(&single)) {
        (Ok((w6, f6)), Ok((w1, _))) => {
            let ok = w6 == 144 && f6[1] <= 65 && f6[2] == 256 && w1 == 24 && multi.encoder_config().embed_dim() == 144;
            verdict(ok, format!("n=6 embedding {w6}, fused {f6:?}; n=1 embedding {w1}"))
        }
        (a, b) => verdict(false, format!("forward failed: {:?} {:?}", a.err(), b.err())),
    }
}

// ------------------------------------------------------------------ 3

fn router_properties() -> Verdict {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..=80, 1usize..=80, any::<u64>(), prop::bool::ANY);
    let result = runner.run(&strategy, |(len, k, seed, coarse)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        let first = rng.random_range(0..len);
        mask[first] = true;
        let ids: Vec<usize> = mask.iter().map(|&m| if m { rng.random_range(3..200) } else { 0 }).collect();
        // coarse embeddings produce many exact score ties
        let data: Vec<f64> = (0..len * d)
            .map(|_| if coarse { rng.random_range(0..2) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let text = TokenizedText::new(ids, mask.clone(), Tensor::new(&[len, d], data).unwrap()).unwrap();
        let cfg = RouterConfig {
            k,
            lambda_m: 1.0,
            lambda_p: 1.0,
        };
        let routed = route_top_k(&text, &cfg).unwrap();
        let real = mask.iter().filter(|&&m| m).count();
        prop_assert!(routed.kept_positions.iter().all(|&p| mask[p]), "padding routed");
        prop_assert_eq!(routed.kept_positions.len(), k.min(real));
        prop_assert!(routed.kept_positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(routed.scores.iter().zip(&mask).all(|(&s, &m)| m || s == 0.0));

        let raw = tinydrive_core::router::score_tokens(&text, 1.0, 1.0).unwrap();
        for f in [|s: f64| 3.0 * s + 7.0, |s: f64| (s / 2.0).exp(), |s: f64| s.powi(3) - 11.0] {
            let t: Vec<f64> = raw.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(&select_top_k(&t, &mask, k), &routed.kept_positions, "monotone transform changed selection");
        }
        prop_assert_eq!(&select_top_k(&normalize_scores(&raw, &mask), &mask, k), &routed.kept_positions);
        prop_assert_eq!(&route_top_k(&text, &cfg).unwrap().kept_positions, &routed.kept_positions);
        // ties resolve to the earlier position
        for &i in &routed.kept_positions {
            for j in 0..i {
                if mask[j] && raw[j] == raw[i] && routed.kept_positions.binary_search(&j).is_err() {
                    return Err(TestCaseError::fail(format!("tie at {j} lost to later {i}")));
                }
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => verdict(true, "10000 sequences, 0 violations"),
        Err(e) => verdict(false, format!("violation: {e}")),
    }
}

// ------------------------------------------------------------------ 4

fn buffer_statistics() -> Verdict {
    let start = Instant::now();
    let alpha = 0.6;
    let cfg = BufferConfig {
        capacity: 10,
        alpha,
        ..BufferConfig::default()
    };
    let priorities = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 3.0];
    let mut buf = PriorityBuffer::new(cfg).unwrap();
    for (i, &p) in priorities.iter().enumerate() {
        buf.insert_or_update(SequenceRecord::new(i, p)).unwrap();
    }
    let denom: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
    let expected: Vec<f64> = priorities.iter().map(|p| p.powf(alpha) / denom).collect();
    let draws = 100_000;
    let mut counts = [0usize; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut probs = Vec::new();
    for d in buf.sample(draws, &mut rng).unwrap() {
        counts[d.seq_id] += 1;
        probs.push(d.probability);
    }
    let worst = counts.iter().zip(&expected).map(|(&c, &e)| (c as f64 / draws as f64 - e).abs()).fold(0.0, f64::max);

    let w = buf.importance_weights(&probs[..16]).unwrap();
    let max_norm = w.iter().copied().fold(0.0, f64::max) == 1.0 && w.iter().all(|&x| x > 0.0 && x <= 1.0);

    let mut flat = PriorityBuffer::new(cfg).unwrap();
    for i in 0..10 {
        flat.insert_or_update(SequenceRecord::new(i, 0.7)).unwrap();
    }
    let uniform: Vec<f64> = flat.sample(32, &mut rng).unwrap().iter().map(|d| d.probability).collect();
    let uniform_ok = flat.raw_importance_weights(&uniform).unwrap().iter().all(|&x| (x - 1.0).abs() < 1e-12)
        && flat.importance_weights(&uniform).unwrap().iter().all(|&x| (x - 1.0).abs() < 1e-12);

    let mut beta_ok = true;
    for (beta0, rate) in [(0.4, 0.001), (0.4, 0.07), (0.5, 0.25), (0.1, 0.3)] {
        let mut b = PriorityBuffer::new(BufferConfig {
            beta0,
            beta_rate: rate,
            ..cfg
        })
        .unwrap();
        let steps = ((1.0 - beta0) / rate - 1e-9).ceil() as u64;
        for _ in 0..steps - 1 {
            b.anneal_beta();
        }
        let before = b.beta();
        b.anneal_beta();
        beta_ok &= before < 1.0 && b.beta() == 1.0 && b.steps_to_full_beta() == steps;
    }
    let elapsed = start.elapsed();
    let ok = worst <= 0.01 && max_norm && uniform_ok && beta_ok && elapsed < Duration::from_secs(30);
    verdict(
        ok,
        format!(
            "max |freq - p| {worst:.4} over {draws} draws, max-normalized {max_norm}, uniform w=1 {uniform_ok}, beta schedule {beta_ok}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 5

fn bias_correction() -> Verdict {
    // squared-error regression y ~ theta * x on three frozen records
    let xs = [0.5, -1.25, 2.0];
    let ys = [1.0, 0.75, -3.5];
    let theta = 0.3;
    let grad = |i: usize| 2.0 * (theta * xs[i] - ys[i]) * xs[i];
    let uniform: f64 = (0..3).map(grad).sum::<f64>() / 3.0;

    let mut buf = PriorityBuffer::new(BufferConfig {
        capacity: 3,
        beta0: 0.4,
        beta_rate: 0.05,
        ..BufferConfig::default()
    })
    .unwrap();
    for (i, p) in [0.2, 1.7, 0.9].into_iter().enumerate() {
        buf.insert_or_update(SequenceRecord::new(i, p)).unwrap();
    }
    for _ in 0..buf.steps_to_full_beta() {
        buf.anneal_beta();
    }
    let probs: Vec<f64> = (0..3).map(|i| buf.probability(i).unwrap()).collect();
    let weights = buf.raw_importance_weights(&probs).unwrap();
    let weighted: f64 = (0..3).map(|i| probs[i] * weights[i] * grad(i)).sum();
    let err = (weighted - uniform).abs();
    verdict(
        buf.beta() == 1.0 && err <= 1e-10,
        format!("E_P[w g] = {weighted:.12}, uniform mean = {uniform:.12}, |diff| {err:.1e}"),
    )
}

// ------------------------------------------------------------------ 7

fn metric_oracle() -> Verdict {
    let corpus = [
        ("the cat sat on the mat", "the cat is on the mat"),
        ("the red stop sign", "the red stop sign ahead"),
        ("go left", "turn left now"),
    ];
    let pairs: Vec<_> = corpus.iter().map(|(c, r)| (tokenize(c), tokenize(r))).collect();

    // clipped n-gram matches / candidate n-grams, orders 1..4:
    // 10/12, 6/9, 3/6, 1/4; add-one above order 1; lengths 12 vs 14
    let bleu_ref = (-1.0f64 / 6.0).exp() * (10.0 / 12.0 * 7.0 / 10.0 * 4.0 / 7.0 * 2.0 / 5.0f64).powf(0.25);
    // LCS 5, 4, 1
    let f = |p: f64, r: f64| 2.44 * p * r / (r + 1.44 * p);
    let rouge_ref = (f(5.0 / 6.0, 5.0 / 6.0) + f(1.0, 0.8) + f(0.5, 1.0 / 3.0)) / 3.0;
    // "the" appears in two of three references, everything else in at most one
    let a2 = (1.5f64).ln().powi(2);
    let b2 = (3.0f64).ln().powi(2);
    let pair1 = (4.0 * a2 + 3.0 * b2) / (4.0 * a2 + 4.0 * b2) + 3.0 / 5.0 + 1.0 / 4.0;
    let pair2 = ((a2 + 3.0 * b2) / (a2 + 4.0 * b2)).sqrt() + 3f64.sqrt() / 2.0 + (2.0f64 / 3.0).sqrt() + 0.5f64.sqrt();
    let pair3 = 1.0 / 6f64.sqrt();
    let cider_ref = 10.0 * (pair1 + pair2 + pair3) / 12.0;

    let (b, r, c) = (bleu4(&pairs), rouge_l(&pairs), cider(&pairs));
    let same: Vec<_> = corpus.iter().map(|(_, r)| (tokenize(r), tokenize(r))).collect();
    let (bi, ri) = (bleu4(&same), rouge_l(&same));
    let ok = (b - bleu_ref).abs() <= 1e-6
        && (r - rouge_ref).abs() <= 1e-6
        && (c - cider_ref).abs() <= 1e-6
        && (bi - 1.0).abs() <= 1e-12
        && (ri - 1.0).abs() <= 1e-12;
    verdict(
        ok,
        format!(
            "BLEU-4 {b:.8} (hand {bleu_ref:.8}), ROUGE-L {r:.8} (hand {rouge_ref:.8}), CIDEr {c:.8} (hand {cider_ref:.8}); identical pairs BLEU-4 {bi}, ROUGE-L {ri}"
        ),
    )
}

// ------------------------------------------------------------------ 6, 8

fn synth(dir: &Path, seed: u64, size: usize, qa_total: Option<usize>) -> tinydrive_pipeline::synth::SynthSummary {
    synth_corpus(
        &SynthSpec {
            seed,
            size,
            n_views: 1,
            qa_total,
        },
        dir,
    )
    .expect("synthetic corpus")
}

fn end_to_end(dir: &Path) -> (Verdict, Option<TrainReport>) {
    let start = Instant::now();
    let data = dir.join("data");
    let summary = synth(&data, 0, 1000, Some(5000));
    let mut cfg = TrainConfig::default();
    cfg.image_resolution = 64;
    let progress = &mut |m: &str| {
        if m.contains("mean loss") {
            emit(&format!("    {m}"));
        }
    };
    let outcome = match run_training(&cfg, &data, Some(&dir.join("run")), progress) {
        Ok(o) => o,
        Err(e) => return (verdict(false, format!("run failed: {e}")), None),
    };
    let elapsed = start.elapsed();
    let rep = outcome.report;
    let l = &rep.language;
    let Some(v) = rep.vision.as_ref() else {
        return (verdict(false, "vision phase did not run"), Some(rep));
    };
    let checksums = l.head_frozen() && v.backbone_frozen() && v.language_checksum_before == v.language_checksum_after;
    let ok = summary.images >= 500
        && summary.classes == NUM_CLASSES
        && (4500..=5500).contains(&summary.records)
        && cfg.lang_epochs == 15
        && cfg.lang_batch_size == 4
        && cfg.vision_epochs == 100
        && cfg.vision_batch_size == 16
        && elapsed < Duration::from_secs(2 * 3600)
        && l.probe_final < 0.5 * l.probe_initial
        && v.heldout_accuracy >= 0.99
        && checksums;
    let detail = format!(
        "{} images, {} classes, {} QAs; language loss {:.4} -> {:.4} (ratio {:.3}); held-out accuracy {:.4} on {} frames (train {:.4}); freeze checksums {}; {:.1} min",
        summary.images,
        summary.classes,
        summary.records,
        l.probe_initial,
        l.probe_final,
        l.probe_final / l.probe_initial,
        v.heldout_accuracy,
        v.heldout_frames,
        v.train_accuracy,
        checksums,
        elapsed.as_secs_f64() / 60.0
    );
    (verdict(ok, detail), Some(rep))
}

fn attention_mass(rep: Option<&TrainReport>) -> Verdict {
    let Some(a) = rep.and_then(|r| r.attention.as_ref()) else {
        return verdict(false, "no attention report");
    };
    let improved = a.frames.iter().filter(|f| f.after > f.before).count();
    verdict(
        !a.frames.is_empty() && improved as f64 >= 0.9 * a.frames.len() as f64,
        format!(
            "in-box mass {:.4} -> {:.4}; increased on {improved}/{} validation images ({:.1}%)",
            a.mean_before,
            a.mean_after,
            a.frames.len(),
            100.0 * improved as f64 / a.frames.len() as f64
        ),
    )
}

// ------------------------------------------------------------------ 9

fn reduced_run(data: &Path, cfg: &TrainConfig, out: &Path) -> tinydrive_pipeline::Result<(TrainOutcome, MetricReport)> {
    let mut o = run_training(cfg, data, Some(out), &mut |_| {})?;
    let m = evaluate(&mut o.checkpoint.models, cfg, &o.dataset, &o.checkpoint.vocab, &o.samples, "test")?;
    Ok((o, m))
}

/// Parts of two metric reports that differ.
fn metric_differences(a: &MetricReport, b: &MetricReport) -> Vec<&'static str> {
    let mut out = Vec::new();
    if a.overall != b.overall {
        out.push("overall");
    }
    if a.per_category != b.per_category {
        out.push("per-category");
    }
    if a.predictions != b.predictions {
        out.push("predictions");
    }
    out
}

fn training_trace(r: &TrainReport) -> String {
    let mut r = r.clone();
    r.seconds = 0.0;
    r.language.seconds = 0.0;
    if let Some(v) = r.vision.as_mut() {
        v.seconds = 0.0;
    }
    serde_json::to_string(&r).expect("report serializes")
}

fn determinism(dir: &Path) -> Verdict {
    let data = dir.join("small");
    synth(&data, 5, 66, None);
    let mut cfg = TrainConfig::default();
    cfg.image_resolution = 32;
    cfg.lang_epochs = 2;
    cfg.vision_epochs = 3;
    cfg.seed = 11;
    let first = reduced_run(&data, &cfg, &dir.join("a"));
    let second = reduced_run(&data, &cfg, &dir.join("b"));
    let ((o1, m1), (o2, m2)) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return verdict(false, format!("run failed: {:?} {:?}", a.err(), b.err())),
    };
    let differing = metric_differences(&m1, &m2);
    let identical = differing.is_empty();
    let trace = training_trace(&o1.report) == training_trace(&o2.report);
    let bytes_equal = std::fs::read(dir.join("a").join(CHECKPOINT_FILE)).ok() == std::fs::read(dir.join("b").join(CHECKPOINT_FILE)).ok();

    let mut loaded = match Checkpoint::load(&dir.join("a").join(CHECKPOINT_FILE)) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("checkpoint load failed: {e}")),
    };
    let m3 = evaluate(&mut loaded.models, &loaded.config, &o1.dataset, &loaded.vocab, &o1.samples, "test").expect("evaluation");
    let diffs = [
        (m1.overall.bleu4 - m3.overall.bleu4).abs(),
        (m1.overall.rouge_l - m3.overall.rouge_l).abs(),
        (m1.overall.cider - m3.overall.cider).abs(),
        (m1.overall.meteor_simplified - m3.overall.meteor_simplified).abs(),
    ];
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    let round_trip = worst <= 1e-6 && loaded.config == cfg;
    verdict(
        identical && trace && bytes_equal && round_trip,
        format!(
            "two fixed-seed runs: metrics bit-identical {identical}{}, training logs identical {trace}, checkpoints byte-identical {bytes_equal}; reload max metric diff {worst:.1e} (BLEU-4 {:.6}, CIDEr {:.6})",
            if identical { String::new() } else { format!(" (differ in {})", differing.join(", ")) },
            m1.overall.bleu4,
            m1.overall.cider
        ),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut run = |id: u8, name: &'static str, v: Verdict| {
        emit(&format!("[{}] {id}. {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail));
        results.push((id, name, v));
    };
    run(1, "gradient suite", gradient_suite());
    run(2, "shape conformance", shape_conformance());
    run(3, "token router properties", router_properties());
    run(4, "buffer sampling statistics", buffer_statistics());
    run(5, "bias-correction oracle", bias_correction());
    run(7, "metric oracle", metric_oracle());
    run(9, "determinism and persistence", determinism(dir.path()));
    let (v6, report) = end_to_end(dir.path());
    run(6, "end-to-end desk-scale run", v6);
    run(8, "attention mass in sign boxes", attention_mass(report.as_ref()));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.passed).map(|r| format!("{}. {}", r.0, r.1)).collect();
    emit(&format!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
