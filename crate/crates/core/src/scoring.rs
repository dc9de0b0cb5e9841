//! Token importance scores from reconstruction traces, their aggregation
//! across the pairs that rate each token, and anchor selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::seq2seq::{ReconstructionOutput, Seq2Seq};
use crate::transcript::{split_pairs, ContextResponsePair, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    ScaledAttention,
    Attention,
    Gradient,
    TokenwiseLoss,
    Random,
}

impl Indicator {
    pub const ALL: [Indicator; 5] = [
        Indicator::ScaledAttention,
        Indicator::Attention,
        Indicator::Gradient,
        Indicator::TokenwiseLoss,
        Indicator::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Indicator::ScaledAttention => "scaled_attention",
            Indicator::Attention => "attention",
            Indicator::Gradient => "gradient",
            Indicator::TokenwiseLoss => "tokenwise_loss",
            Indicator::Random => "random",
        }
    }

    fn needs_grads(self) -> bool {
        matches!(self, Indicator::ScaledAttention | Indicator::Gradient)
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Indicator::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown indicator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Average,
    MultiviewVote,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Average => "average",
            Aggregation::MultiviewVote => "multiview_vote",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Aggregation::Average),
            "multiview_vote" | "multi_view_vote" | "vote" => Ok(Aggregation::MultiviewVote),
            _ => Err(Error::InvalidArgument(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Scores one pair assigned to flat token positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub pair_index: usize,
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Per-cell importance, `[response_len × context_len]`, summed over heads.
pub fn pair_heatmap(output: &ReconstructionOutput, indicator: Indicator) -> Result<Mat> {
    let first = output.traces.first().ok_or(Error::IndicatorMismatch {
        indicator: indicator.to_string(),
        missing: "attention traces",
    })?;
    let mut acc = Mat::zeros(first.weights.dim());
    for trace in &output.traces {
        let grads = match (indicator.needs_grads(), &trace.grads) {
            (true, None) => {
                return Err(Error::IndicatorMismatch {
                    indicator: indicator.to_string(),
                    missing: "attention gradients (run the reverse sweep first)",
                })
            }
            (_, g) => g.as_ref(),
        };
        match indicator {
            Indicator::ScaledAttention => acc += &(&trace.weights * grads.unwrap()),
            Indicator::Attention => acc += &trace.weights,
            Indicator::Gradient => acc += grads.unwrap(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{indicator} has no attention heatmap"
                )))
            }
        }
    }
    Ok(acc)
}

/// Seed for the random indicator of one pair.
fn random_stream(seed: u64, meeting_id: &str, pair_index: usize) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in meeting_id.bytes() {
        h = h.rotate_left(5) ^ u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ (pair_index as u64).wrapping_mul(0xff51_afd7_ed55_8ccd))
}

/// Scores the tokens a pair rates.
///
/// Attention-family indicators rate the context tokens (sum over heads and
/// response tokens); `tokenwise_loss` rates the response tokens with their
/// own loss; `random` draws uniform scores from `seed`.
pub fn score_pair(
    t: &Transcript,
    pair: &ContextResponsePair,
    output: Option<&ReconstructionOutput>,
    indicator: Indicator,
    seed: u64,
) -> Result<PairScores> {
    let context = pair.context_span(t);
    let (positions, scores): (Vec<usize>, Vec<f64>) = match indicator {
        Indicator::Random => {
            let mut rng = random_stream(seed, &t.meeting_id, pair.pair_index);
            context.map(|p| (p, rng.gen::<f64>())).unzip()
        }
        Indicator::TokenwiseLoss => {
            let output = output.ok_or(Error::IndicatorMismatch {
                indicator: indicator.to_string(),
                missing: "a reconstruction output",
            })?;
            match pair.response_span(t) {
                Some(span) => {
                    if span.len() != output.token_losses.len() {
                        return Err(Error::shape(
                            "score_pair",
                            format!("{} losses for {} response tokens", output.token_losses.len(), span.len()),
                        ));
                    }
                    span.zip(output.token_losses.iter().copied()).unzip()
                }
                None => (Vec::new(), Vec::new()),
            }
        }
        _ => {
            let output = output.ok_or(Error::IndicatorMismatch {
                indicator: indicator.to_string(),
                missing: "a reconstruction output",
            })?;
            let heat = pair_heatmap(output, indicator)?;
            if heat.ncols() != context.len() {
                return Err(Error::shape(
                    "score_pair",
                    format!("{} attention columns for {} context tokens", heat.ncols(), context.len()),
                ));
            }
            let sums = heat.sum_axis(ndarray::Axis(0));
            context.zip(sums.iter().copied()).unzip()
        }
    };
    Ok(PairScores {
        pair_index: pair.pair_index,
        positions,
        scores,
    })
}

/// All ratings of one transcript, one row per rating pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreMatrix {
    pub meeting_id: String,
    pub n_tokens: usize,
    pub rows: Vec<PairScores>,
}

impl TokenScoreMatrix {
    /// Mean rating per rated position.
    pub fn means(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for row in &self.rows {
            for (&p, &s) in row.positions.iter().zip(&row.scores) {
                let e = acc.entry(p).or_insert((0.0, 0));
                e.0 += s;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect()
    }

    /// Multiplies every score by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            row.scores.iter_mut().for_each(|s| *s *= k);
        }
        out
    }

    /// JSON lines `{"meeting_id", "pair_index", "positions", "scores"}`.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            meeting_id: &'a str,
            pair_index: usize,
            positions: &'a [usize],
            scores: &'a [f64],
        }
        let mut s = String::new();
        for row in &self.rows {
            s.push_str(&serde_json::to_string(&Line {
                meeting_id: &self.meeting_id,
                pair_index: row.pair_index,
                positions: &row.positions,
                scores: &row.scores,
            })?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Selected anchor positions, sorted, with their aggregated scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    pub ratio: f64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn from_selection(mut sel: Vec<(usize, f64)>, n_tokens: usize) -> Self {
        sel.sort_by_key(|&(p, _)| p);
        let k = sel.len();
        let (positions, scores) = sel.into_iter().unzip();
        AnchorSet {
            positions,
            scores,
            ratio: if n_tokens == 0 { 0.0 } else { k as f64 / n_tokens as f64 },
        }
    }

    /// Anchor positions ordered by descending score, earlier position first on ties.
    pub fn by_score(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = self.positions.iter().copied().zip(self.scores.iter().copied()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Number of anchors for `ratio` of `n_tokens`, at least one.
pub fn anchor_count(ratio: f64, n_tokens: usize) -> usize {
    ((ratio * n_tokens as f64).round() as usize).max(1)
}

fn clamp_k(k: usize, n_tokens: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > n_tokens {
        log::warn!("k = {k} exceeds {n_tokens} tokens; clamping");
    }
    Ok(k.min(n_tokens))
}

/// Descending by score, earlier position first on ties.
fn rank(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Rated positions by mean score, then unrated positions (score 0) in order.
fn ranked_means(m: &TokenScoreMatrix) -> Vec<(usize, f64)> {
    let means = m.means();
    let mut rated: Vec<(usize, f64)> = means.iter().map(|(&p, &s)| (p, s)).collect();
    rank(&mut rated);
    rated.extend((0..m.n_tokens).filter(|p| !means.contains_key(p)).map(|p| (p, 0.0)));
    rated
}

/// Top-`k` tokens by mean rating.
pub fn aggregate_average(m: &TokenScoreMatrix, k: usize) -> Result<AnchorSet> {
    let k = clamp_k(k, m.n_tokens)?;
    let ranked = ranked_means(m);
    Ok(AnchorSet::from_selection(ranked.into_iter().take(k).collect(), m.n_tokens))
}

/// Each pair nominates its top-`⌈k/P⌉` tokens; the deduplicated union is
/// trimmed by best nominated score or backfilled by mean score to `k`.
pub fn aggregate_multiview_vote(m: &TokenScoreMatrix, k: usize) -> Result<AnchorSet> {
    let k = clamp_k(k, m.n_tokens)?;
    let voters: Vec<&PairScores> = m.rows.iter().filter(|r| !r.positions.is_empty()).collect();
    if voters.is_empty() {
        return Err(Error::InvalidArgument("no rated pairs to vote".into()));
    }
    let quota = k.div_ceil(voters.len());
    let mut nominated: BTreeMap<usize, f64> = BTreeMap::new();
    for row in voters {
        let mut v: Vec<(usize, f64)> = row.positions.iter().copied().zip(row.scores.iter().copied()).collect();
        rank(&mut v);
        for (p, s) in v.into_iter().take(quota) {
            let e = nominated.entry(p).or_insert(f64::NEG_INFINITY);
            *e = e.max(s);
        }
    }
    let mut chosen: Vec<(usize, f64)> = nominated.into_iter().collect();
    rank(&mut chosen);
    chosen.truncate(k);
    if chosen.len() < k {
        let have: std::collections::BTreeSet<usize> = chosen.iter().map(|&(p, _)| p).collect();
        let fill: Vec<_> = ranked_means(m)
            .into_iter()
            .filter(|(p, _)| !have.contains(p))
            .take(k - chosen.len())
            .collect();
        chosen.extend(fill);
    }
    Ok(AnchorSet::from_selection(chosen, m.n_tokens))
}

pub fn aggregate(m: &TokenScoreMatrix, k: usize, how: Aggregation) -> Result<AnchorSet> {
    match how {
        Aggregation::Average => aggregate_average(m, k),
        Aggregation::MultiviewVote => aggregate_multiview_vote(m, k),
    }
}

/// Runs the reconstructor over every pair of `t` and scores with `indicator`.
pub fn score_transcript(
    t: &Transcript,
    model: &Seq2Seq,
    window: usize,
    indicator: Indicator,
    seed: u64,
) -> Result<TokenScoreMatrix> {
    let pairs = split_pairs(t, window)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let output = match indicator {
            Indicator::Random => None,
            _ => {
                let ctx = pair.context_tokens(t);
                let resp = pair.response_tokens(t);
                let pass = model.forward_teacher_forced(pair.pair_index, &ctx, &resp)?;
                Some(if indicator.needs_grads() {
                    pass.backward_scaled_attention()?
                } else {
                    pass.output()
                })
            }
        };
        rows.push(score_pair(t, pair, output.as_ref(), indicator, seed)?);
    }
    Ok(TokenScoreMatrix {
        meeting_id: t.meeting_id.clone(),
        n_tokens: t.n_tokens,
        rows,
    })
}

/// Score, aggregate, and keep `max(1, round(ratio · n))` anchors.
pub fn select_anchors(
    t: &Transcript,
    model: &Seq2Seq,
    window: usize,
    indicator: Indicator,
    aggregation: Aggregation,
    ratio: f64,
    seed: u64,
) -> Result<(AnchorSet, TokenScoreMatrix)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("anchor ratio {ratio} not in (0, 1]")));
    }
    let matrix = score_transcript(t, model, window, indicator, seed)?;
    let anchors = aggregate(&matrix, anchor_count(ratio, t.n_tokens), aggregation)?;
    Ok((anchors, matrix))
}

/// On-disk anchor record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFile {
    pub meeting_id: String,
    pub ratio: f64,
    pub indicator: Indicator,
    pub aggregation: Aggregation,
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl AnchorFile {
    pub fn new(meeting_id: &str, indicator: Indicator, aggregation: Aggregation, a: &AnchorSet) -> Self {
        AnchorFile {
            meeting_id: meeting_id.to_string(),
            ratio: a.ratio,
            indicator,
            aggregation,
            positions: a.positions.clone(),
            scores: a.scores.clone(),
        }
    }

    pub fn anchor_set(&self) -> AnchorSet {
        AnchorSet {
            positions: self.positions.clone(),
            scores: self.scores.clone(),
            ratio: self.ratio,
        }
    }
}

/// Writes one anchor record per line.
pub fn save_anchors(path: &Path, files: &[AnchorFile]) -> Result<()> {
    let mut s = String::new();
    for f in files {
        s.push_str(&serde_json::to_string(f)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_anchors(path: &Path) -> Result<Vec<AnchorFile>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                line: i + 1,
                field: "<anchor record>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_scores(path: &Path, matrices: &[TokenScoreMatrix]) -> Result<()> {
    let mut s = String::new();
    for m in matrices {
        s.push_str(&m.to_jsonl()?);
    }
    write_atomic(path, s.as_bytes())
}
