//! ROUGE-1/2/L F-measures (β = 1, no stemming, no stopword removal).

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub with_sentence_split: bool,
}

/// Lowercased alphanumeric words.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn sentences(text: &str) -> Vec<Vec<String>> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[^.!?\n]+[.!?]*").unwrap());
    re.find_iter(text)
        .map(|m| rouge_tokens(m.as_str()))
        .filter(|s| !s.is_empty())
        .collect()
}

fn f1(hits: usize, cand: usize, reference: usize) -> f64 {
    if hits == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = hits as f64 / cand as f64;
    let r = hits as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits: usize = r
        .iter()
        .map(|(g, &rc)| rc.min(c.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |x: &[String]| x.len().saturating_sub(n - 1);
    f1(hits, total(cand), total(reference))
}

/// LCS table, `(a.len()+1) × (b.len()+1)`.
fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices into `reference` of one LCS with `cand`.
fn lcs_indices(reference: &[String], cand: &[String]) -> Vec<usize> {
    let t = lcs_table(reference, cand);
    let (mut i, mut j) = (reference.len(), cand.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == cand[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

pub fn rouge_l(cand: &[String], reference: &[String]) -> f64 {
    f1(lcs_len(cand, reference), cand.len(), reference.len())
}

/// Summary-level ROUGE-L over sentence lists using union LCS with clipped
/// token counts.
pub fn rouge_lsum(cand: &[Vec<String>], reference: &[Vec<String>]) -> f64 {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in reference.iter().flatten() {
        *ref_counts.entry(w).or_insert(0) += 1;
    }
    for w in cand.iter().flatten() {
        *cand_counts.entry(w).or_insert(0) += 1;
    }
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = cand.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let w = r[i].as_str();
            let (rc, cc) = (ref_counts.get_mut(w).unwrap(), cand_counts.get_mut(w));
            if let Some(cc) = cc {
                if *rc > 0 && *cc > 0 {
                    hits += 1;
                    *rc -= 1;
                    *cc -= 1;
                }
            }
        }
    }
    let cand_len = cand.iter().map(Vec::len).sum();
    let ref_len = reference.iter().map(Vec::len).sum();
    f1(hits, cand_len, ref_len)
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of `candidate` against `reference`.
pub fn rouge(candidate: &str, reference: &str, sentence_split: bool) -> Result<RougeScore> {
    let r = rouge_tokens(reference);
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    let c = rouge_tokens(candidate);
    let rl = if sentence_split {
        rouge_lsum(&sentences(candidate), &sentences(reference))
    } else {
        rouge_l(&c, &r)
    };
    Ok(RougeScore {
        r1: rouge_n(&c, &r, 1),
        r2: rouge_n(&c, &r, 2),
        rl,
        with_sentence_split: sentence_split,
    })
}

/// Component-wise mean.
pub fn mean_score(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len().max(1) as f64;
    RougeScore {
        r1: scores.iter().map(|s| s.r1).sum::<f64>() / n,
        r2: scores.iter().map(|s| s.r2).sum::<f64>() / n,
        rl: scores.iter().map(|s| s.rl).sum::<f64>() / n,
        with_sentence_split: scores.first().is_some_and(|s| s.with_sentence_split),
    }
}
