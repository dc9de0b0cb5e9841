//! End-to-end orchestration: corpus → reconstructor → anchors → bucketed
//! summarizer → summaries → ROUGE, plus the ablation and sweep harnesses.
//!
//! Everything here works on in-memory values; [`stages`] wraps it with the
//! on-disk artifact layout used by the command-line tool.

pub mod stages;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalkit::{ablate_anchors, mean_score, rouge, truncate_input, AblationSpec, RougeScore, TruncationSide};
use crate::rpb::BucketAssignment;
use crate::scoring::{select_anchors, Aggregation, AnchorSet, Indicator, TokenScoreMatrix};
use crate::seq2seq::{train, LossCurve, Seq2Seq, TrainConfig};
use crate::summarizer::{Summarizer, SummaryExample, SummaryRecord};
use crate::synth::{generate_corpus, split_manifest};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::transcript::{split_pairs, RawMeeting, SplitManifest, Transcript};

/// Reference summary of one meeting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub meeting_id: String,
    pub summary: String,
}

/// Planted keywords of a synthetic meeting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub meeting_id: String,
    pub keywords: Vec<String>,
    pub decision_sentences: Vec<usize>,
}

/// Raw synthetic corpus with its references and split.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub meetings: Vec<RawMeeting>,
    pub gold: Vec<GoldRecord>,
    pub planted: Vec<PlantedRecord>,
    pub split: SplitManifest,
}

/// Generates the planted-saliency corpus described by `cfg`.
pub fn synth_corpus(cfg: &ExperimentConfig) -> Result<RawCorpus> {
    let meetings = generate_corpus(&cfg.synth())?;
    let split = split_manifest(&meetings, cfg.synth_train, cfg.synth_dev);
    Ok(RawCorpus {
        gold: meetings
            .iter()
            .map(|m| GoldRecord {
                meeting_id: m.raw.meeting_id.clone(),
                summary: m.summary.clone(),
            })
            .collect(),
        planted: meetings
            .iter()
            .map(|m| PlantedRecord {
                meeting_id: m.raw.meeting_id.clone(),
                keywords: m.keywords.clone(),
                decision_sentences: m.decision_sentences.clone(),
            })
            .collect(),
        meetings: meetings.into_iter().map(|m| m.raw).collect(),
        split,
    })
}

/// Tokenized corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub transcripts: Vec<Transcript>,
    /// Tokenized reference summaries by meeting id.
    pub gold: BTreeMap<String, (String, Vec<TokenId>)>,
    pub split: SplitManifest,
}

impl Dataset {
    /// Builds the vocabulary over all transcripts, then all references.
    pub fn build(
        meetings: &[RawMeeting],
        gold: &[GoldRecord],
        split: SplitManifest,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let mut tokenizer = Tokenizer::new(cfg.vocab_limit);
        let opts = cfg.transcript_options();
        let transcripts = meetings
            .iter()
            .map(|m| Transcript::from_raw_extend(m, &mut tokenizer, opts))
            .collect::<Result<Vec<_>>>()?;
        let gold = gold
            .iter()
            .map(|g| Ok((g.meeting_id.clone(), (g.summary.clone(), tokenizer.encode_extend(&g.summary)?))))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            tokenizer,
            transcripts,
            gold,
            split,
        })
    }

    /// Re-tokenizes with a frozen vocabulary.
    pub fn with_tokenizer(
        tokenizer: Tokenizer,
        meetings: &[RawMeeting],
        gold: &[GoldRecord],
        split: SplitManifest,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let opts = cfg.transcript_options();
        let transcripts = meetings
            .iter()
            .map(|m| Transcript::from_raw(m, &tokenizer, opts))
            .collect::<Result<Vec<_>>>()?;
        let gold = gold
            .iter()
            .map(|g| Ok((g.meeting_id.clone(), (g.summary.clone(), tokenizer.encode(&g.summary)?))))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            tokenizer,
            transcripts,
            gold,
            split,
        })
    }

    pub fn transcript(&self, id: &str) -> Result<&Transcript> {
        self.transcripts
            .iter()
            .find(|t| t.meeting_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown meeting {id}")))
    }

    /// Transcripts listed in `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&Transcript>> {
        ids.iter().map(|id| self.transcript(id)).collect()
    }

    pub fn reference(&self, id: &str) -> Result<&(String, Vec<TokenId>)> {
        self.gold
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference summary for {id}")))
    }
}

/// Every `(context, response)` token pair of the given transcripts.
pub fn reconstruction_pairs(ts: &[&Transcript], window: usize) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let mut out = Vec::new();
    for t in ts {
        for p in split_pairs(t, window)? {
            out.push((p.context_tokens(t), p.response_tokens(t)));
        }
    }
    Ok(out)
}

/// Warm-up pairs: each context window paired with one of its own
/// sentences, picked by `seed`. Rebuilding a sentence that is in view
/// teaches the cross-attention to retrieve tokens from long contexts.
pub fn copy_pairs(ts: &[&Transcript], window: usize, seed: u64) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in ts {
        for p in split_pairs(t, window)? {
            let pick = rng.gen_range(p.context.clone());
            out.push((p.context_tokens(t), t.sentences[pick].tokens.clone()));
        }
    }
    Ok(out)
}

/// Optional copy warm-up, then next-sentence reconstruction on the
/// training split. The returned curve spans both phases.
pub fn train_reconstructor(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Seq2Seq, LossCurve)> {
    let train_set = ds.subset(&ds.split.train)?;
    let mut model = Seq2Seq::new(cfg.model_config(ds.tokenizer.len()))?;
    let mut curve = LossCurve::default();
    if cfg.recon_warmup_steps > 0 {
        let pairs = copy_pairs(&train_set, cfg.window, cfg.seed)?;
        let tc = TrainConfig {
            steps: cfg.recon_warmup_steps,
            ..cfg.recon_train()
        };
        curve.losses.extend(train(&mut model, &pairs, &tc)?.losses);
    }
    let pairs = reconstruction_pairs(&train_set, cfg.window)?;
    log::info!("reconstructor: {} pairs from {} meetings", pairs.len(), train_set.len());
    curve.losses.extend(train(&mut model, &pairs, &cfg.recon_train())?.losses);
    Ok((model, curve))
}

/// Anchors and ratings of one meeting.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub meeting_id: String,
    pub anchors: AnchorSet,
    pub matrix: TokenScoreMatrix,
}

/// Anchor selection settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub indicator: Indicator,
    pub aggregation: Aggregation,
    pub ratio: f64,
    pub seed: u64,
}

impl Selection {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Selection {
            indicator: cfg.indicator,
            aggregation: cfg.aggregation,
            ratio: cfg.anchor_ratio,
            seed: cfg.seed,
        }
    }
}

pub fn score_meetings(model: &Seq2Seq, ts: &[&Transcript], window: usize, sel: Selection) -> Result<Vec<Scored>> {
    ts.iter()
        .map(|t| {
            let (anchors, matrix) =
                select_anchors(t, model, window, sel.indicator, sel.aggregation, sel.ratio, sel.seed)?;
            Ok(Scored {
                meeting_id: t.meeting_id.clone(),
                anchors,
                matrix,
            })
        })
        .collect()
}

/// How the summarizer sees a transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "side")]
pub enum InputMode {
    /// All tokens, pooled into `c` anchor-guided buckets.
    Bucketed,
    /// At most `c` tokens kept by a truncation rule, no pooling.
    Truncated(TruncationSide),
}

impl InputMode {
    pub fn label(&self) -> String {
        match self {
            InputMode::Bucketed => "bucketing".into(),
            InputMode::Truncated(side) => format!("truncate_{}", side.as_str()),
        }
    }
}

/// Builds the summarizer input for one meeting.
pub fn make_example(
    summ: &Summarizer,
    meeting_id: &str,
    tokens: Vec<TokenId>,
    anchors: &AnchorSet,
    summary: Vec<TokenId>,
    mode: InputMode,
    seed: u64,
) -> Result<SummaryExample> {
    match mode {
        InputMode::Bucketed => summ.example(meeting_id, tokens, &anchors.positions, summary),
        InputMode::Truncated(side) => {
            let keep = truncate_input(tokens.len(), summ.config.bucket_budget, side, Some(anchors), seed)?;
            if keep.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{meeting_id}: {} truncation kept no tokens",
                    side.as_str()
                )));
            }
            let kept: Vec<TokenId> = keep.iter().map(|&p| tokens[p]).collect();
            let n = kept.len();
            Ok(SummaryExample {
                meeting_id: meeting_id.to_string(),
                tokens: kept,
                assignment: BucketAssignment::identity(n, &[]),
                summary,
            })
        }
    }
}

/// Summarizer examples for `ids`, using each meeting's anchors.
pub fn examples_for(
    summ: &Summarizer,
    ds: &Dataset,
    ids: &[String],
    anchors: &BTreeMap<String, AnchorSet>,
    mode: InputMode,
    seed: u64,
) -> Result<Vec<SummaryExample>> {
    ids.iter()
        .map(|id| {
            let t = ds.transcript(id)?;
            let a = anchors
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no anchors for {id}")))?;
            let (_, gold) = ds.reference(id)?;
            make_example(summ, id, t.flat_tokens(), a, gold.clone(), mode, seed)
        })
        .collect()
}

pub fn train_summarizer(
    cfg: &ExperimentConfig,
    vocab_size: usize,
    examples: &[SummaryExample],
    reconstructor: Option<&Seq2Seq>,
) -> Result<(Summarizer, LossCurve)> {
    let scfg = cfg.summarizer_config(vocab_size);
    let mut summ = match reconstructor {
        Some(r) => Summarizer::with_reconstructor(scfg, r)?,
        None => Summarizer::new(scfg)?,
    };
    let curve = summ.train(examples, &cfg.summ_train())?;
    Ok((summ, curve))
}

pub fn generate_summaries(
    summ: &Summarizer,
    examples: &[SummaryExample],
    tok: &Tokenizer,
    max_len: usize,
) -> Result<Vec<SummaryRecord>> {
    examples
        .iter()
        .map(|ex| {
            let ids = summ.generate(&ex.tokens, &ex.assignment, max_len)?;
            Ok(SummaryRecord {
                meeting_id: ex.meeting_id.clone(),
                summary: tok.decode(&ids).trim().to_string(),
                n_tokens_in: ex.assignment.n_tokens(),
                n_buckets: ex.assignment.n_buckets,
            })
        })
        .collect()
}

/// Per-meeting ROUGE; `rl` is computed without and `rlsum` with sentence
/// splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeRow {
    pub meeting_id: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub rlsum: f64,
}

pub fn evaluate(records: &[SummaryRecord], ds: &Dataset) -> Result<(Vec<RougeRow>, RougeScore)> {
    let mut rows = Vec::with_capacity(records.len());
    let mut plain = Vec::with_capacity(records.len());
    for r in records {
        let (reference, _) = ds.reference(&r.meeting_id)?;
        let s = rouge(&r.summary, reference, false)?;
        let split = rouge(&r.summary, reference, true)?;
        rows.push(RougeRow {
            meeting_id: r.meeting_id.clone(),
            r1: s.r1,
            r2: s.r2,
            rl: s.rl,
            rlsum: split.rl,
        });
        plain.push(s);
    }
    Ok((rows, mean_score(&plain)))
}

/// Generates for `examples` and returns mean ROUGE.
pub fn summarize_and_score(
    summ: &Summarizer,
    examples: &[SummaryExample],
    ds: &Dataset,
    max_len: usize,
) -> Result<RougeScore> {
    let records = generate_summaries(summ, examples, &ds.tokenizer, max_len)?;
    Ok(evaluate(&records, ds)?.1)
}

/// One ablation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub seed: u64,
    pub retrained: bool,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

/// Applies `spec` to every meeting in `ids` and re-evaluates the summarizer
/// (or retrains one on the ablated training split when `retrain_on` is set).
pub fn run_ablation(
    cfg: &ExperimentConfig,
    summ: &Summarizer,
    ds: &Dataset,
    ids: &[String],
    anchors: &BTreeMap<String, AnchorSet>,
    spec: &AblationSpec,
    high_frequency: &[TokenId],
    retrain_on: Option<&[String]>,
) -> Result<AblationRow> {
    let ablated_examples = |summ: &Summarizer, ids: &[String]| -> Result<Vec<SummaryExample>> {
        ids.iter()
            .map(|id| {
                let t = ds.transcript(id)?;
                let a = &anchors[id];
                let (_, gold) = ds.reference(id)?;
                let out = ablate_anchors(a, &t.flat_tokens(), spec, high_frequency)?;
                make_example(summ, id, out.tokens, &out.anchors, gold.clone(), InputMode::Bucketed, spec.seed)
            })
            .collect()
    };
    let retrained;
    let model = match retrain_on {
        Some(train_ids) => {
            let train_ex = ablated_examples(summ, train_ids)?;
            retrained = train_summarizer(cfg, ds.tokenizer.len(), &train_ex, None)?.0;
            &retrained
        }
        None => summ,
    };
    let score = summarize_and_score(model, &ablated_examples(model, ids)?, ds, cfg.max_summary_len)?;
    Ok(AblationRow {
        ablation: spec.label(),
        seed: spec.seed,
        retrained: retrain_on.is_some(),
        r1: score.r1,
        r2: score.r2,
        rl: score.rl,
    })
}

/// One point of an anchor-ratio curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub indicator: Indicator,
    /// `ok`, or why the point could not be evaluated.
    pub status: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

/// Anchor-ratio curves: select → compress → summarize → ROUGE for each
/// `(ratio, indicator)`, re-using one trained summarizer. Points whose
/// anchors cannot fit the bucket budget are reported, not evaluated.
pub fn sweep_anchor_ratio(
    cfg: &ExperimentConfig,
    recon: &Seq2Seq,
    summ: &Summarizer,
    ds: &Dataset,
    ids: &[String],
    ratios: &[f64],
    indicators: &[Indicator],
) -> Result<Vec<SweepRow>> {
    let ts = ds.subset(ids)?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        for &indicator in indicators {
            let sel = Selection {
                indicator,
                aggregation: cfg.aggregation,
                ratio,
                seed: cfg.seed,
            };
            let scored = score_meetings(recon, &ts, cfg.window, sel)?;
            let anchors: BTreeMap<_, _> = scored.into_iter().map(|s| (s.meeting_id, s.anchors)).collect();
            let row = match examples_for(summ, ds, ids, &anchors, InputMode::Bucketed, cfg.seed) {
                Ok(ex) => {
                    let s = summarize_and_score(summ, &ex, ds, cfg.max_summary_len)?;
                    SweepRow {
                        ratio,
                        indicator,
                        status: "ok".into(),
                        r1: s.r1,
                        r2: s.r2,
                        rl: s.rl,
                    }
                }
                Err(Error::InfeasibleBudget { .. }) => SweepRow {
                    ratio,
                    indicator,
                    status: "infeasible_budget".into(),
                    r1: f64::NAN,
                    r2: f64::NAN,
                    rl: f64::NAN,
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Fraction of `planted` positions that are anchors.
pub fn recall(anchors: &AnchorSet, planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    let set: std::collections::BTreeSet<usize> = anchors.positions.iter().copied().collect();
    planted.iter().filter(|p| set.contains(p)).count() as f64 / planted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            synth_train: 3,
            synth_test: 2,
            synth_sentences: 12,
            synth_decisions: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_layers: 1,
            recon_warmup_steps: 2,
            recon_steps: 3,
            summ_steps: 3,
            recon_batch: 2,
            summ_batch: 2,
            buckets: 32,
            max_summary_len: 6,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_pipeline_runs() {
        let cfg = tiny();
        let raw = synth_corpus(&cfg).unwrap();
        let ds = Dataset::build(&raw.meetings, &raw.gold, raw.split.clone(), &cfg).unwrap();
        assert_eq!(ds.split.train.len(), 3);
        let (recon, curve) = train_reconstructor(&cfg, &ds).unwrap();
        assert_eq!(curve.losses.len(), 5);
        let all: Vec<String> = ds.transcripts.iter().map(|t| t.meeting_id.clone()).collect();
        let scored = score_meetings(&recon, &ds.subset(&all).unwrap(), cfg.window, Selection::from_config(&cfg)).unwrap();
        let anchors: BTreeMap<_, _> = scored.into_iter().map(|s| (s.meeting_id, s.anchors)).collect();
        let scfg = cfg.summarizer_config(ds.tokenizer.len());
        let probe = Summarizer::new(scfg).unwrap();
        let train_ex = examples_for(&probe, &ds, &ds.split.train, &anchors, InputMode::Bucketed, 0).unwrap();
        assert!(train_ex.iter().all(|e| e.assignment.n_buckets == 32));
        let (summ, _) = train_summarizer(&cfg, ds.tokenizer.len(), &train_ex, None).unwrap();
        let test_ex = examples_for(&summ, &ds, &ds.split.test, &anchors, InputMode::Bucketed, 0).unwrap();
        let recs = generate_summaries(&summ, &test_ex, &ds.tokenizer, 6).unwrap();
        let (rows, mean) = evaluate(&recs, &ds).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((0.0..=1.0).contains(&mean.r1));

        let trunc = examples_for(&summ, &ds, &ds.split.test, &anchors, InputMode::Truncated(TruncationSide::Right), 0).unwrap();
        assert!(trunc.iter().all(|e| e.tokens.len() == 32 && e.assignment.is_identity()));
    }

    #[test]
    fn recall_counts_hits() {
        let a = AnchorSet {
            positions: vec![1, 5, 9],
            scores: vec![1.0; 3],
            ratio: 0.1,
        };
        assert_eq!(recall(&a, &[5, 6]), 0.5);
        assert_eq!(recall(&a, &[]), 0.0);
    }
}
