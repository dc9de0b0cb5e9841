//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use anchorsum_core::config::ExperimentConfig;
use anchorsum_core::evalkit::{benchmark_complexity, rouge, AblationMode, AblationSpec, BenchConfig, TruncationSide};
use anchorsum_core::pipeline::{self, stages, Dataset, InputMode, Selection};
use anchorsum_core::rpb::{assign_buckets, compress_sequence, relative_bucket};
use anchorsum_core::scoring::{AnchorSet, Indicator};
use anchorsum_core::seq2seq::{AttentionPerturbation, EncoderInput, ModelConfig, Seq2Seq};
use anchorsum_core::summarizer::{Summarizer, SummarizerConfig};
use anchorsum_core::synth::generate_corpus;
use anchorsum_core::tokenizer::TokenId;
use anchorsum_core::transcript::Transcript;
use ndarray::Array2;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1. Relative buckets against exact integer arithmetic.

/// Largest `s` with `s · ln(d/e) <= span · ln(dist/e)`, i.e. `d^s · e^(span-s) <= dist^span`.
fn oracle_bucket(r: i64, b: usize, thresholds: &[BigUint]) -> usize {
    let half = b / 2;
    let exact = half / 2;
    let offset = if r > 0 { half } else { 0 };
    let dist = r.unsigned_abs() as usize;
    if dist < exact {
        return offset + dist;
    }
    let span = (half - exact) as u32;
    let lhs = BigUint::from(dist).pow(span);
    let steps = thresholds.partition_point(|t| *t <= lhs) - 1;
    offset + (exact + steps).min(half - 1)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut mismatches) = (0usize, 0usize);
    for b in [8usize, 16, 32, 64, 128, 1024] {
        for d in [b, 2 * b, 128, 16384] {
            if 4 * d <= b {
                continue;
            }
            let exact = b / 4;
            let span = (b / 2 - exact) as u32;
            // thresholds[s] = d^s · e^(span - s) for s in 0..=span, increasing in s.
            let thresholds: Vec<BigUint> = (0..=span)
                .map(|s| BigUint::from(d).pow(s) * BigUint::from(exact).pow(span - s))
                .collect();
            let mut by_dist = vec![usize::MAX; d + 9];
            for r in -(d as i64) - 8..=(d as i64) + 8 {
                let dist = r.unsigned_abs() as usize;
                if by_dist[dist] == usize::MAX {
                    by_dist[dist] = oracle_bucket(-(dist as i64), b, &thresholds);
                }
                let side = if r > 0 { b / 2 } else { 0 };
                let want = by_dist[dist] + side;
                checked += 1;
                if relative_bucket(r, b, d).unwrap() != want {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0,
        format!("{checked} positions, {mismatches} mismatches, {secs:.2}s"),
    )
}

// 2. Structural suite over random bucketing instances.

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = rng.gen_range(1..=5000usize);
        let c = [64usize, 256, 1024][rng.gen_range(0..3)];
        let max_k = ((0.064 * n as f64).floor() as usize).min(c / 4).max(1);
        let k = rng.gen_range(1..=max_k);
        let anchors = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let mut anchors = anchors;
        anchors.sort_unstable();
        let a = match assign_buckets(n, &anchors, c) {
            Ok(a) => a,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        if a.n_buckets != c.min(n) {
            failures.push(format!("case {case}: {} buckets, want {}", a.n_buckets, c.min(n)));
        }
        let mut first_seen = vec![usize::MAX; a.n_buckets];
        let mut last_seen = vec![0usize; a.n_buckets];
        let mut count = vec![0usize; a.n_buckets];
        for (p, &bk) in a.bucket_of.iter().enumerate() {
            first_seen[bk] = first_seen[bk].min(p);
            last_seen[bk] = p;
            count[bk] += 1;
        }
        if (0..a.n_buckets).any(|bk| count[bk] == 0 || last_seen[bk] - first_seen[bk] + 1 != count[bk]) {
            failures.push(format!("case {case}: non-contiguous or empty bucket"));
        }
        let d_model = 4;
        let x = Array2::from_shape_fn((n, d_model), |_| rng.gen_range(-1.0..1.0));
        let pooled = compress_sequence(x.view(), &a).unwrap().embeddings;
        for &p in &anchors {
            let bk = a.bucket_of[p];
            if count[bk] != 1 || pooled.row(bk).iter().zip(x.row(p)).any(|(u, v)| u.to_bits() != v.to_bits()) {
                failures.push(format!("case {case}: anchor {p} not preserved"));
            }
        }
        // Naive gather-and-mean.
        let mut sums = Array2::<f64>::zeros((a.n_buckets, d_model));
        for (p, &bk) in a.bucket_of.iter().enumerate() {
            for j in 0..d_model {
                sums[[bk, j]] += x[[p, j]];
            }
        }
        for bk in 0..a.n_buckets {
            for j in 0..d_model {
                if (sums[[bk, j]] / count[bk] as f64 - pooled[[bk, j]]).abs() > 1e-12 {
                    failures.push(format!("case {case}: pooled row {bk} differs"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let first = failures.first().cloned().unwrap_or_default();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!("1000 instances, {} failures, {secs:.2}s {first}", failures.len()),
    )
}

// 3. Attention gradients against central finite differences.

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::new(40).with_width(32, 4);
    cfg.n_layers = 2;
    cfg.seed = 3;
    let model = Seq2Seq::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for pair in 0..20 {
        let ctx: Vec<TokenId> = (0..rng.gen_range(3..12)).map(|_| rng.gen_range(4..40)).collect();
        let resp: Vec<TokenId> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..40)).collect();
        let out = model
            .forward_teacher_forced(pair, &ctx, &resp)
            .unwrap()
            .backward_scaled_attention()
            .unwrap();
        for trace in &out.traces {
            let g = trace.grads.as_ref().unwrap();
            for row in 0..resp.len() {
                for col in 0..ctx.len() {
                    let yhat = |delta| {
                        let p = AttentionPerturbation { head: trace.head, row, col, delta };
                        model.forward(pair, EncoderInput::plain(&ctx), &resp, Some(p)).unwrap().yhat()
                    };
                    let fd = (yhat(eps) - yhat(-eps)) / (2.0 * eps);
                    let an = g[[row, col]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    worst = worst.max(rel);
                    entries += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 120.0,
        format!("{entries} attention entries, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

// 4. All-singleton buckets leave the backbone untouched.

fn criterion_4() -> Outcome {
    let mut backbone = ModelConfig::new(50).with_width(32, 4);
    backbone.seed = 4;
    let s = Summarizer::new(SummarizerConfig {
        backbone,
        bucket_budget: 1024,
        init_from_reconstructor: false,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(1..200);
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(4..50)).collect();
        let targets: Vec<TokenId> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(4..50)).collect();
        let anchors: Vec<usize> = (0..n).step_by(7).collect();
        let a = s.assignment(n, &anchors).unwrap();
        let via = s.logits(&tokens, &a, &targets).unwrap();
        let plain = s.model.forward(0, EncoderInput::plain(&tokens), &targets, None).unwrap().logits();
        let diff = via.iter().zip(&plain).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(if a.is_identity() { diff } else { f64::INFINITY });
    }
    outcome(worst <= 1e-10, format!("10 inputs, max |logit diff| {worst:.2e}"))
}

// 5-7. The learned pipeline on the planted corpus.

struct Trained {
    cfg: ExperimentConfig,
    ds: Dataset,
    recon: Seq2Seq,
    summ: Summarizer,
    anchors: BTreeMap<String, AnchorSet>,
    random_anchors: BTreeMap<String, AnchorSet>,
    planted: BTreeMap<String, Vec<usize>>,
    train_r1: f64,
    test_r1: f64,
    truncated_r1: f64,
    elapsed: Duration,
}

fn anchor_map(scored: Vec<pipeline::Scored>) -> BTreeMap<String, AnchorSet> {
    scored.into_iter().map(|s| (s.meeting_id, s.anchors)).collect()
}

fn train_pipeline() -> Trained {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        buckets: 128,
        synth_train: 100,
        synth_test: 20,
        ..ExperimentConfig::default()
    };
    let raw = pipeline::synth_corpus(&cfg).unwrap();
    let ds = Dataset::build(&raw.meetings, &raw.gold, raw.split.clone(), &cfg).unwrap();
    let (recon, _) = pipeline::train_reconstructor(&cfg, &ds).unwrap();
    let all: Vec<&Transcript> = ds.transcripts.iter().collect();
    let sel = Selection::from_config(&cfg);
    let anchors = anchor_map(pipeline::score_meetings(&recon, &all, cfg.window, sel).unwrap());
    let random = Selection {
        indicator: Indicator::Random,
        ..sel
    };
    let random_anchors = anchor_map(pipeline::score_meetings(&recon, &all, cfg.window, random).unwrap());
    let planted = generate_corpus(&cfg.synth())
        .unwrap()
        .iter()
        .map(|m| {
            let id = m.raw.meeting_id.clone();
            let pos = m.planted_positions(ds.transcript(&id).unwrap(), &ds.tokenizer);
            (id, pos)
        })
        .collect();

    let vocab = ds.tokenizer.len();
    let probe = Summarizer::new(cfg.summarizer_config(vocab)).unwrap();
    let fit = |mode: InputMode| {
        let ex = pipeline::examples_for(&probe, &ds, &ds.split.train, &anchors, mode, cfg.seed).unwrap();
        let (summ, _) = pipeline::train_summarizer(&cfg, vocab, &ex, Some(&recon)).unwrap();
        let train = pipeline::summarize_and_score(&summ, &ex, &ds, cfg.max_summary_len).unwrap();
        let test_ex = pipeline::examples_for(&summ, &ds, &ds.split.test, &anchors, mode, cfg.seed).unwrap();
        let test = pipeline::summarize_and_score(&summ, &test_ex, &ds, cfg.max_summary_len).unwrap();
        (summ, train.r1, test.r1)
    };
    let (summ, train_r1, test_r1) = fit(InputMode::Bucketed);
    let (_, _, truncated_r1) = fit(InputMode::Truncated(TruncationSide::Right));
    Trained {
        cfg,
        ds,
        recon,
        summ,
        anchors,
        random_anchors,
        planted,
        train_r1,
        test_r1,
        truncated_r1,
        elapsed: start.elapsed(),
    }
}

fn criterion_5(t: &Trained) -> Outcome {
    let gap = t.test_r1 - t.truncated_r1;
    let mins = t.elapsed.as_secs_f64() / 60.0;
    outcome(
        t.train_r1 >= 0.9 && t.cfg.summ_steps <= 2000 && gap >= 0.05 && mins < 30.0,
        format!(
            "train R1 {:.3} after {} steps; test R1 bucketed {:.3} vs right truncation {:.3} (gap {gap:+.3}); {mins:.1} min",
            t.train_r1, t.cfg.summ_steps, t.test_r1, t.truncated_r1
        ),
    )
}

fn mean_recall(anchors: &BTreeMap<String, AnchorSet>, planted: &BTreeMap<String, Vec<usize>>) -> f64 {
    let total: f64 = planted.iter().map(|(id, p)| pipeline::recall(&anchors[id], p)).sum();
    total / planted.len() as f64
}

fn criterion_6(t: &Trained) -> Outcome {
    let scaled = mean_recall(&t.anchors, &t.planted);
    let random = mean_recall(&t.random_anchors, &t.planted);
    outcome(
        scaled >= 2.0 * random,
        format!("recall scaled attention {scaled:.3} vs random {random:.3} ({:.1}x)", scaled / random),
    )
}

fn criterion_7(t: &Trained) -> Outcome {
    let cfg = &t.cfg;
    let (mut top, mut bottom) = (Vec::new(), Vec::new());
    for seed in [0u64, 1, 2] {
        // A fresh test corpus per seed, scored by the trained reconstructor.
        let eval_cfg = ExperimentConfig {
            seed: 1000 + seed,
            synth_train: 0,
            synth_dev: 0,
            synth_test: 20,
            ..cfg.clone()
        };
        let raw = pipeline::synth_corpus(&eval_cfg).unwrap();
        let ds = Dataset::with_tokenizer(t.ds.tokenizer.clone(), &raw.meetings, &raw.gold, raw.split, cfg).unwrap();
        let all: Vec<&Transcript> = ds.transcripts.iter().collect();
        let anchors = anchor_map(
            pipeline::score_meetings(&t.recon, &all, cfg.window, Selection::from_config(cfg)).unwrap(),
        );
        let ids = &ds.split.test;
        let run = |lo: f64, hi: f64| {
            let spec = AblationSpec {
                mode: AblationMode::DeleteSortedFraction { lo, hi },
                ratio: 0.0,
                seed,
            };
            pipeline::run_ablation(cfg, &t.summ, &ds, ids, &anchors, &spec, &[], None).unwrap().r1
        };
        top.push(run(0.0, 0.25));
        bottom.push(run(0.75, 1.0));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, mb) = (mean(&top), mean(&bottom));
    outcome(
        mt < mb,
        format!("mean test R1 over 3 seeds: top quartile deleted {mt:.3} vs bottom quartile deleted {mb:.3}"),
    )
}

// 8. Attention cost against input length.

fn criterion_8() -> Outcome {
    let report = benchmark_complexity(&BenchConfig::default()).unwrap();
    let e = report.uncompressed_exponent;
    let r = report.compressed_max_ratio;
    outcome(
        (e - 2.0).abs() <= 0.3 && r < 1.3,
        format!("uncompressed exponent {e:.3}; compressed time ratio per doubling max {r:.3}"),
    )
}

// 9. Hand-computed ROUGE values.

fn criterion_9() -> Outcome {
    // (candidate, reference, sentence split, r1, r2, rl)
    let cases: [(&str, &str, bool, f64, f64, f64); 10] = [
        ("the cat sat", "the cat", false, 0.8, 2.0 / 3.0, 0.8),
        ("a b c d", "a b c d", false, 1.0, 1.0, 1.0),
        ("a b", "c d", false, 0.0, 0.0, 0.0),
        ("the the the", "the cat", false, 0.4, 0.0, 0.4),
        ("a b c d e", "a c e", false, 0.75, 0.0, 0.75),
        ("b a", "a b", false, 1.0, 0.0, 0.5),
        ("The Cat, sat!", "the cat sat", false, 1.0, 1.0, 1.0),
        ("a b a b", "a b", false, 2.0 / 3.0, 0.5, 2.0 / 3.0),
        (
            "w1 w2 w6 w7 w8. w1 w3 w8 w9 w5.",
            "w1 w2 w3 w4 w5.",
            true,
            8.0 / 15.0,
            2.0 / 13.0,
            8.0 / 15.0,
        ),
        ("x", "x y z", false, 0.5, 0.0, 0.5),
    ];
    let mut bad = Vec::new();
    for (i, (c, r, split, r1, r2, rl)) in cases.iter().enumerate() {
        let s = rouge(c, r, *split).unwrap();
        if (s.r1 - r1).abs() > 1e-6 || (s.r2 - r2).abs() > 1e-6 || (s.rl - rl).abs() > 1e-6 {
            bad.push(format!("case {} got ({:.6}, {:.6}, {:.6})", i + 1, s.r1, s.r2, s.rl));
        }
    }
    outcome(bad.is_empty(), format!("10 cases, {} mismatches {}", bad.len(), bad.join("; ")))
}

// 10. Byte-identical reports from two runs.

fn read_reports(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn criterion_10() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        data_dir: root.path().join("data"),
        checkpoint_dir: root.path().join("checkpoints"),
        report_dir: root.path().join("reports"),
        synth_train: 6,
        synth_test: 3,
        synth_sentences: 16,
        synth_decisions: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 1,
        recon_warmup_steps: 10,
        recon_steps: 10,
        summ_steps: 10,
        buckets: 48,
        max_summary_len: 12,
        ablation_ratios: vec![0.5],
        sweep_ratios: vec![0.032, 0.064],
        ..ExperimentConfig::default()
    };
    let run = || {
        let _ = std::fs::remove_dir_all(root.path().join("data"));
        let _ = std::fs::remove_dir_all(root.path().join("checkpoints"));
        let _ = std::fs::remove_dir_all(root.path().join("reports"));
        stages::run_all(&cfg).unwrap();
        stages::ablate(&cfg).unwrap();
        stages::sweep(&cfg).unwrap();
        read_reports(&cfg.report_dir)
    };
    let first = run();
    let second = run();
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    outcome(
        first.len() >= 6 && first.keys().eq(second.keys()) && differing.is_empty(),
        format!("{} report files compared, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "bucket oracle equivalence", criterion_1()),
        (2, "bucketing structure", criterion_2()),
        (3, "attention gradient fidelity", criterion_3()),
        (4, "backbone equivalence", criterion_4()),
    ];
    let trained = train_pipeline();
    results.push((5, "end-to-end learning", criterion_5(&trained)));
    results.push((6, "indicator ordering", criterion_6(&trained)));
    results.push((7, "ablation direction", criterion_7(&trained)));
    results.push((8, "complexity", criterion_8()));
    results.push((9, "rouge correctness", criterion_9()));
    results.push((10, "determinism", criterion_10()));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("{} criterion {n:>2} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
