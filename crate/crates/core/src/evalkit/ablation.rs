//! Anchor substitution/deletion and input truncation baselines.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::AnchorSet;
use crate::tokenizer::{TokenId, EOM_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AblationMode {
    SubstituteRandom,
    SubstituteHighFrequency,
    DeleteRandom,
    /// Removes the `[lo, hi)` fraction of anchors ranked by descending score.
    DeleteSortedFraction { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mode: AblationMode,
    /// Fraction of anchors affected by the random modes.
    pub ratio: f64,
    pub seed: u64,
}

impl AblationSpec {
    pub fn label(&self) -> String {
        match self.mode {
            AblationMode::SubstituteRandom => format!("substitute_random_{}", self.ratio),
            AblationMode::SubstituteHighFrequency => format!("substitute_high_frequency_{}", self.ratio),
            AblationMode::DeleteRandom => format!("delete_random_{}", self.ratio),
            AblationMode::DeleteSortedFraction { lo, hi } => format!("delete_sorted_{lo}-{hi}"),
        }
    }
}

/// Tokens and anchors after an ablation, plus what changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablated {
    pub tokens: Vec<TokenId>,
    pub anchors: AnchorSet,
    /// Token positions rewritten (substitution) or anchors dropped (deletion).
    pub changed: Vec<usize>,
}

/// The `limit` most frequent tokens, most frequent first, never `[EOM]`.
pub fn high_frequency_pool<'a>(corpus: impl IntoIterator<Item = &'a [TokenId]>, limit: usize) -> Vec<TokenId> {
    let mut counts = std::collections::BTreeMap::<TokenId, usize>::new();
    for doc in corpus {
        for &t in doc {
            if t != EOM_ID {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(limit).map(|(t, _)| t).collect()
}

fn affected(ratio: f64, len: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ablation ratio {ratio} outside [0, 1]")));
    }
    Ok(((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize)
}

fn without(anchors: &AnchorSet, drop: &BTreeSet<usize>) -> AnchorSet {
    let (positions, scores) = anchors
        .positions
        .iter()
        .zip(&anchors.scores)
        .filter(|(p, _)| !drop.contains(p))
        .map(|(&p, &s)| (p, s))
        .unzip();
    AnchorSet {
        positions,
        scores,
        ratio: anchors.ratio,
    }
}

fn substitute(
    tokens: &[TokenId],
    targets: &[usize],
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng, TokenId) -> Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let mut out = tokens.to_vec();
    for &p in targets {
        out[p] = draw(rng, tokens[p]).ok_or_else(|| {
            Error::InvalidArgument(format!("no replacement differing from the token at {p}"))
        })?;
    }
    Ok(out)
}

/// Applies `spec` to a transcript's flat tokens and its anchors.
pub fn ablate_anchors(
    anchors: &AnchorSet,
    tokens: &[TokenId],
    spec: &AblationSpec,
    high_frequency: &[TokenId],
) -> Result<Ablated> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_anchors = anchors.len();
    let pick_random = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
        let mut v: Vec<usize> = sample(rng, n_anchors, k).into_iter().map(|i| anchors.positions[i]).collect();
        v.sort_unstable();
        v
    };
    match spec.mode {
        AblationMode::SubstituteRandom | AblationMode::SubstituteHighFrequency => {
            let k = affected(spec.ratio, n_anchors)?;
            let targets = pick_random(&mut rng, k);
            let new_tokens = if spec.mode == AblationMode::SubstituteRandom {
                substitute(tokens, &targets, &mut rng, |rng, old| {
                    let candidates: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != old).collect();
                    (!candidates.is_empty()).then(|| candidates[rng.gen_range(0..candidates.len())])
                })?
            } else {
                substitute(tokens, &targets, &mut rng, |rng, old| {
                    let candidates: Vec<TokenId> = high_frequency.iter().copied().filter(|&t| t != old).collect();
                    (!candidates.is_empty()).then(|| candidates[rng.gen_range(0..candidates.len())])
                })?
            };
            Ok(Ablated {
                tokens: new_tokens,
                anchors: anchors.clone(),
                changed: targets,
            })
        }
        AblationMode::DeleteRandom => {
            let k = affected(spec.ratio, n_anchors)?;
            let drop: BTreeSet<usize> = pick_random(&mut rng, k).into_iter().collect();
            Ok(Ablated {
                tokens: tokens.to_vec(),
                anchors: without(anchors, &drop),
                changed: drop.into_iter().collect(),
            })
        }
        AblationMode::DeleteSortedFraction { lo, hi } => {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "fraction window [{lo}, {hi}] outside [0, 1]"
                )));
            }
            let ranked = anchors.by_score();
            let start = affected(lo, n_anchors)?;
            let end = affected(hi, n_anchors)?;
            let drop: BTreeSet<usize> = ranked[start..end].iter().map(|&(p, _)| p).collect();
            Ok(Ablated {
                tokens: tokens.to_vec(),
                anchors: without(anchors, &drop),
                changed: drop.into_iter().collect(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSide {
    /// Keep the last `c` tokens.
    Left,
    /// Keep the first `c` tokens.
    Right,
    /// Keep both ends, drop the centre.
    Middle,
    /// A contiguous window at a seeded offset.
    Random,
    /// Only the top 30% of anchors by score.
    HardAnchor,
}

impl TruncationSide {
    pub const ALL: [TruncationSide; 5] = [
        TruncationSide::Left,
        TruncationSide::Right,
        TruncationSide::Middle,
        TruncationSide::Random,
        TruncationSide::HardAnchor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TruncationSide::Left => "left",
            TruncationSide::Right => "right",
            TruncationSide::Middle => "middle",
            TruncationSide::Random => "random",
            TruncationSide::HardAnchor => "hard_anchor",
        }
    }
}

/// Positions kept from a length-`n` input.
pub fn truncate_input(
    n: usize,
    limit: usize,
    side: TruncationSide,
    anchors: Option<&AnchorSet>,
    seed: u64,
) -> Result<Vec<usize>> {
    if limit == 0 {
        return Err(Error::InvalidArgument("truncation limit must be >= 1".into()));
    }
    if side == TruncationSide::HardAnchor {
        let anchors = anchors.ok_or_else(|| Error::InvalidArgument("hard_anchor truncation needs anchors".into()))?;
        let keep = (3 * anchors.len() / 10).min(limit);
        let mut kept: Vec<usize> = anchors.by_score().into_iter().take(keep).map(|(p, _)| p).collect();
        kept.sort_unstable();
        return Ok(kept);
    }
    if n <= limit {
        return Ok((0..n).collect());
    }
    Ok(match side {
        TruncationSide::Right => (0..limit).collect(),
        TruncationSide::Left => (n - limit..n).collect(),
        TruncationSide::Middle => {
            let front = limit.div_ceil(2);
            let back = limit / 2;
            (0..front).chain(n - back..n).collect()
        }
        TruncationSide::Random => {
            let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..=n - limit);
            (start..start + limit).collect()
        }
        TruncationSide::HardAnchor => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchors(n: usize) -> AnchorSet {
        AnchorSet {
            positions: (0..n).map(|i| i * 3).collect(),
            scores: (0..n).map(|i| i as f64).collect(),
            ratio: 0.3,
        }
    }

    #[test]
    fn half_substitution_changes_five() {
        let a = anchors(10);
        let tokens: Vec<TokenId> = (0..30).map(|i| 10 + (i % 7) as TokenId).collect();
        let pool = high_frequency_pool([tokens.as_slice()], 50);
        for mode in [AblationMode::SubstituteRandom, AblationMode::SubstituteHighFrequency] {
            let spec = AblationSpec { mode, ratio: 0.5, seed: 3 };
            let out = ablate_anchors(&a, &tokens, &spec, &pool).unwrap();
            let diff = tokens.iter().zip(&out.tokens).filter(|(x, y)| x != y).count();
            assert_eq!(diff, 5);
            assert_eq!(out.changed.len(), 5);
            assert_eq!(out, ablate_anchors(&a, &tokens, &spec, &pool).unwrap());
        }
    }

    #[test]
    fn sorted_quartile_deletes_top_three() {
        let a = anchors(10);
        let tokens = vec![5; 30];
        let spec = AblationSpec {
            mode: AblationMode::DeleteSortedFraction { lo: 0.0, hi: 0.25 },
            ratio: 0.0,
            seed: 0,
        };
        let out = ablate_anchors(&a, &tokens, &spec, &[]).unwrap();
        // Highest scores sit at the last three positions.
        assert_eq!(out.changed, vec![21, 24, 27]);
        assert_eq!(out.anchors.len(), 7);
        let bad = AblationSpec {
            mode: AblationMode::DeleteSortedFraction { lo: 0.5, hi: 1.5 },
            ..spec
        };
        assert!(ablate_anchors(&a, &tokens, &bad, &[]).is_err());
    }

    #[test]
    fn quartiles_partition_the_anchors() {
        let a = anchors(10);
        let mut total = 0;
        for q in 0..4 {
            let spec = AblationSpec {
                mode: AblationMode::DeleteSortedFraction { lo: q as f64 / 4.0, hi: (q + 1) as f64 / 4.0 },
                ratio: 0.0,
                seed: 0,
            };
            total += ablate_anchors(&a, &[0; 30], &spec, &[]).unwrap().changed.len();
        }
        assert_eq!(total, 10);
    }

    #[test]
    fn random_deletion_counts() {
        let a = anchors(8);
        let spec = AblationSpec { mode: AblationMode::DeleteRandom, ratio: 0.25, seed: 1 };
        let out = ablate_anchors(&a, &[0; 24], &spec, &[]).unwrap();
        assert_eq!(out.anchors.len(), 6);
    }

    #[test]
    fn truncation_sides() {
        assert_eq!(truncate_input(10, 4, TruncationSide::Middle, None, 0).unwrap(), vec![0, 1, 8, 9]);
        assert_eq!(truncate_input(10, 4, TruncationSide::Right, None, 0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(truncate_input(10, 4, TruncationSide::Left, None, 0).unwrap(), vec![6, 7, 8, 9]);
        assert_eq!(truncate_input(10, 3, TruncationSide::Middle, None, 0).unwrap(), vec![0, 1, 9]);
        let r = truncate_input(10, 4, TruncationSide::Random, None, 9).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.windows(2).all(|w| w[1] == w[0] + 1));
        for side in [TruncationSide::Left, TruncationSide::Right, TruncationSide::Middle, TruncationSide::Random] {
            assert_eq!(truncate_input(5, 8, side, None, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn hard_anchor_keeps_top_thirty_percent() {
        let a = anchors(10);
        assert_eq!(truncate_input(30, 1024, TruncationSide::HardAnchor, Some(&a), 0).unwrap(), vec![21, 24, 27]);
        assert!(truncate_input(30, 10, TruncationSide::HardAnchor, None, 0).is_err());
    }
}
