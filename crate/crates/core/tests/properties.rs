use std::collections::{BTreeMap, BTreeSet};

use anchorsum_core::evalkit::{ablate_anchors, rouge, truncate_input, AblationMode, AblationSpec, TruncationSide};
use anchorsum_core::rpb::{assign_buckets, compress_sequence, relative_bucket, BucketAssignment};
use anchorsum_core::scoring::{aggregate, aggregate_average, AnchorSet, Aggregation, PairScores, TokenScoreMatrix};
use anchorsum_core::tokenizer::Tokenizer;
use anchorsum_core::transcript::{
    clean_text, load_raw_meetings, split_pairs, write_raw_meetings, RawMeeting, RawSentence, Response, Transcript,
    TranscriptOptions,
};
use ndarray::Array2;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

const WORDS: &[&str] = &["we", "will", "use", "rubber", "okay", "so", "the", "button", "it's", "fine"];

fn sentence_text() -> impl Strategy<Value = String> {
    (prop::collection::vec(0..WORDS.len(), 1..8), prop::sample::select(vec![".", "?", "!", ""]))
        .prop_map(|(ws, end)| {
            let body: Vec<&str> = ws.into_iter().map(|i| WORDS[i]).collect();
            format!("{}{end}", body.join(" "))
        })
}

fn meeting(id: usize) -> impl Strategy<Value = RawMeeting> {
    prop::collection::vec((prop::sample::select(vec!["A", "B", "C"]), sentence_text()), 2..12).prop_map(
        move |ss| RawMeeting {
            meeting_id: format!("m{id}"),
            sentences: ss
                .into_iter()
                .map(|(s, text)| RawSentence {
                    speaker: s.to_string(),
                    text,
                })
                .collect(),
        },
    )
}

fn transcript_of(raw: &RawMeeting) -> Transcript {
    let mut tok = Tokenizer::new(None);
    Transcript::from_raw_extend(raw, &mut tok, TranscriptOptions::default()).unwrap()
}

proptest! {
    #[test]
    fn clean_text_is_idempotent(s in "[ a-z.,!?\t\n]{0,40}") {
        let once = clean_text(&s);
        prop_assert_eq!(clean_text(&once), once);
    }

    #[test]
    fn pair_count_and_coverage(raw in meeting(0), w in 1usize..12) {
        let t = transcript_of(&raw);
        let m = t.sentences.len();
        let pairs = split_pairs(&t, w).unwrap();
        prop_assert_eq!(pairs.len(), m);
        let mut as_response = vec![0usize; m];
        let mut as_context = vec![0usize; m];
        for p in &pairs {
            if let Response::Sentence(i) = p.response {
                as_response[i] += 1;
            }
            for c in p.context.clone() {
                as_context[c] += 1;
            }
        }
        prop_assert_eq!(as_response[0], 0);
        prop_assert!(as_response[1..].iter().all(|&c| c == 1));
        prop_assert!(as_context.iter().all(|&c| c <= w));
        prop_assert!(matches!(pairs.last().unwrap().response, Response::EndOfMeeting));
    }

    #[test]
    fn tokenizer_round_trips(text in "[a-z']{1,6}( [a-z']{1,6}){0,6}[.?]?") {
        let tok = Tokenizer::fit([text.as_str()], None).unwrap();
        let ids = tok.encode(&text).unwrap();
        prop_assert_eq!(tok.decode(&ids), text);
    }
}

#[test]
fn twenty_transcripts_round_trip_through_jsonl() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let meetings: Vec<RawMeeting> = (0..20)
        .map(|i| meeting(i).new_tree(&mut runner).unwrap().current())
        .collect();
    let mut tok = Tokenizer::new(None);
    let ts: Vec<Transcript> = meetings
        .iter()
        .map(|m| Transcript::from_raw_extend(m, &mut tok, TranscriptOptions::default()).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut buf = Vec::new();
    write_raw_meetings(&mut buf, &ts.iter().map(Transcript::to_raw).collect::<Vec<_>>()).unwrap();
    std::fs::write(&path, buf).unwrap();
    let back: Vec<Transcript> = load_raw_meetings(&path)
        .unwrap()
        .iter()
        .map(|r| Transcript::from_raw(r, &tok, TranscriptOptions::default()).unwrap())
        .collect();
    assert_eq!(back, ts);
}

// Relative buckets.

proptest! {
    #[test]
    fn buckets_monotone_and_saturating(b in (2usize..64).prop_map(|h| 2 * h), extra in 1usize..200, r in -400i64..400) {
        let d = b / 4 + extra;
        let id = relative_bucket(r, b, d).unwrap();
        prop_assert!(id < b);
        let half = b / 2;
        let side = if r > 0 { half } else { 0 };
        prop_assert!(id >= side && id < side + half);
        let further = if r > 0 { r + 1 } else { r - 1 };
        prop_assert!(relative_bucket(further, b, d).unwrap() >= id);
        if r.unsigned_abs() as usize >= d {
            prop_assert_eq!(id, side + half - 1);
        }
    }
}

fn anchors_strategy() -> impl Strategy<Value = (usize, Vec<usize>, usize)> {
    (1usize..3000, prop::sample::select(vec![64usize, 256, 1024])).prop_flat_map(|(n, c)| {
        let max_k = ((0.064 * n as f64) as usize).min(c / 4).max(1);
        (Just(n), prop::collection::btree_set(0..n, 1..=max_k), Just(c))
            .prop_map(|(n, a, c)| (n, a.into_iter().collect(), c))
    })
}

/// Independent structural check of a bucket map.
fn check_assignment(a: &BucketAssignment, n: usize, anchors: &[usize], c: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.bucket_of.len(), n);
    prop_assert_eq!(a.n_buckets, c.min(n));
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (p, &b) in a.bucket_of.iter().enumerate() {
        members.entry(b).or_default().push(p);
    }
    prop_assert_eq!(members.keys().copied().collect::<Vec<_>>(), (0..a.n_buckets).collect::<Vec<_>>());
    let mut last_first = None;
    for ps in members.values() {
        prop_assert_eq!(ps.last().unwrap() - ps[0] + 1, ps.len(), "non-contiguous bucket");
        prop_assert!(last_first.is_none_or(|f| ps[0] > f));
        last_first = Some(ps[0]);
    }
    for &p in anchors {
        prop_assert_eq!(members[&a.bucket_of[p]].len(), 1, "anchor {} shares a bucket", p);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_invariants((n, anchors, c) in anchors_strategy()) {
        let a = assign_buckets(n, &anchors, c).unwrap();
        check_assignment(&a, n, &anchors, c)?;
    }

    #[test]
    fn pooling_preserves_anchors_and_is_linear((n, anchors, c) in anchors_strategy(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let n = n.min(600);
        let anchors: Vec<usize> = anchors.into_iter().filter(|&p| p < n).collect();
        prop_assume!(!anchors.is_empty());
        let a = assign_buckets(n, &anchors, c).unwrap();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64 / 3.0 - 2.0);
        let y = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 5 + j * 11) % 19) as f64 / 7.0);
        let cx = compress_sequence(x.view(), &a).unwrap().embeddings;
        let cy = compress_sequence(y.view(), &a).unwrap().embeddings;
        let mix = &x * alpha + &y * beta;
        let cm = compress_sequence(mix.view(), &a).unwrap().embeddings;
        let expect = &cx * alpha + &cy * beta;
        for (u, v) in cm.iter().zip(&expect) {
            prop_assert!((u - v).abs() < 1e-10);
        }
        for &p in &anchors {
            let row = cx.row(a.bucket_of[p]);
            prop_assert!(row.iter().zip(x.row(p)).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

// Aggregation.

fn score_matrix() -> impl Strategy<Value = TokenScoreMatrix> {
    (2usize..500).prop_flat_map(|n| {
        let row = (0..n, 1usize..40, any::<u64>()).prop_map(move |(start, len, seed)| {
            let end = (start + len).min(n);
            let positions: Vec<usize> = (start..end).collect();
            let scores = positions
                .iter()
                .map(|&p| (((p as u64 + 1).wrapping_mul(seed | 1) >> 11) % 1000) as f64 / 100.0 - 3.0)
                .collect();
            (positions, scores)
        });
        prop::collection::vec(row, 1..12).prop_map(move |rows| TokenScoreMatrix {
            meeting_id: "m".into(),
            n_tokens: n,
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (positions, scores))| PairScores {
                    pair_index: i,
                    positions,
                    scores,
                })
                .collect(),
        })
    })
}

/// Mean per rated position; rated beat unrated, then higher mean, then earlier position.
fn average_oracle(m: &TokenScoreMatrix, k: usize) -> Vec<usize> {
    let mut sums = vec![(0.0, 0usize); m.n_tokens];
    for row in &m.rows {
        for (&p, &s) in row.positions.iter().zip(&row.scores) {
            sums[p].0 += s;
            sums[p].1 += 1;
        }
    }
    let mut keyed: Vec<(bool, f64, usize)> = sums
        .iter()
        .enumerate()
        .map(|(p, &(s, c))| (c == 0, if c == 0 { 0.0 } else { s / c as f64 }, p))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut top: Vec<usize> = keyed.into_iter().take(k.min(m.n_tokens)).map(|t| t.2).collect();
    top.sort_unstable();
    top
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn average_matches_oracle(m in score_matrix(), k in 1usize..40) {
        let got = aggregate_average(&m, k).unwrap();
        prop_assert_eq!(got.positions, average_oracle(&m, k));
    }

    #[test]
    fn selections_are_scale_invariant_and_sorted(m in score_matrix(), k in 1usize..40, scale in 0.01f64..100.0) {
        for how in [Aggregation::Average, Aggregation::MultiviewVote] {
            let a = aggregate(&m, k, how).unwrap();
            let b = aggregate(&m.scaled(scale), k, how).unwrap();
            prop_assert_eq!(&a.positions, &b.positions);
            prop_assert_eq!(a.len(), k.min(m.n_tokens));
            prop_assert!(a.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(a.positions.iter().all(|&p| p < m.n_tokens));
        }
    }
}

// Evaluation helpers.

fn anchor_set(n: usize, k: usize) -> AnchorSet {
    let positions: Vec<usize> = (0..k).map(|i| (2 * i + 1) * n / (2 * k)).collect();
    let scores = (0..k).map(|i| ((i * 37) % 11) as f64).collect();
    AnchorSet {
        positions,
        scores,
        ratio: k as f64 / n as f64,
    }
}

proptest! {
    #[test]
    fn rouge_of_self_is_one(text in "[a-z]{1,5}( [a-z]{1,5}){0,10}", pad in "[ \t]{0,3}") {
        let s = rouge(&text, &text, false).unwrap();
        prop_assert_eq!((s.r1, s.rl), (1.0, 1.0));
        let padded = rouge(&format!("{pad}{text}{pad}"), &text, true).unwrap();
        prop_assert_eq!(padded.r1, s.r1);
        prop_assert_eq!(padded.r2, s.r2);
    }

    #[test]
    fn ablations_change_advertised_count(k in 1usize..60, ratio in 0.0f64..=1.0, seed in any::<u64>(), mode in 0usize..4) {
        let n = 20 * k;
        let anchors = anchor_set(n, k);
        let tokens: Vec<u32> = (0..n as u32).map(|i| 4 + i % 50).collect();
        let mode = [
            AblationMode::SubstituteRandom,
            AblationMode::SubstituteHighFrequency,
            AblationMode::DeleteRandom,
            AblationMode::DeleteSortedFraction { lo: 0.0, hi: ratio },
        ][mode];
        let spec = AblationSpec { mode, ratio, seed };
        let out = ablate_anchors(&anchors, &tokens, &spec, &[4, 5, 6]).unwrap();
        let expect = (ratio * k as f64 - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(out.changed.len(), expect);
        let diff: Vec<usize> = (0..n).filter(|&p| tokens[p] != out.tokens[p]).collect();
        let kept: BTreeSet<usize> = out.anchors.positions.iter().copied().collect();
        match mode {
            AblationMode::SubstituteRandom | AblationMode::SubstituteHighFrequency => {
                prop_assert_eq!(diff, out.changed.clone());
                prop_assert_eq!(out.anchors.positions, anchors.positions);
            }
            _ => {
                prop_assert!(diff.is_empty());
                prop_assert_eq!(kept.len(), k - expect);
                prop_assert!(out.changed.iter().all(|p| !kept.contains(p)));
            }
        }
    }

    #[test]
    fn truncation_lengths(n in 1usize..400, c in 1usize..200, k in 1usize..40, seed in any::<u64>()) {
        let k = k.min(n);
        let anchors = anchor_set(n, k);
        for side in TruncationSide::ALL {
            let kept = truncate_input(n, c, side, Some(&anchors), seed).unwrap();
            let expect = if side == TruncationSide::HardAnchor { (3 * k / 10).min(c) } else { c.min(n) };
            prop_assert_eq!(kept.len(), expect, "{:?}", side);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(kept.iter().all(|&p| p < n));
        }
    }
}
