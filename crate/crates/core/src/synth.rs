//! Synthetic meetings with planted salient content.
//!
//! Each meeting is mostly filler chatter drawn from a generic vocabulary. A
//! few "decision" sentences name two keywords from a disjoint vocabulary, and
//! two short acknowledgements follow each decision, the first repeating one
//! keyword and the second the other.
//! The gold summary is exactly the decision sentences, so the keywords are
//! the tokens a good importance scorer should find.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;
use crate::transcript::{RawMeeting, RawSentence, SplitManifest, Transcript};

const FILLER: &[&str] = &[
    "yeah", "okay", "so", "um", "uh", "i", "think", "maybe", "we", "could", "just", "like", "that",
    "this", "is", "was", "really", "kind", "of", "sort", "mean", "know", "right", "well", "then",
    "about", "what", "there", "it", "they", "you", "some", "more", "less", "good", "bad", "thing",
    "stuff", "time", "next", "last", "week", "people", "user", "look", "see", "said", "say", "too",
    "very", "quite", "actually", "probably", "anyway", "sure", "hmm", "fine", "also", "still",
    "again",
];

const KEYWORDS: &[&str] = &[
    "rubber", "titanium", "solar", "battery", "kinetic", "scroll", "button", "joystick", "voice",
    "speech", "lcd", "display", "plastic", "wooden", "fruity", "spongy", "yellow", "curved",
    "flat", "double", "chip", "sensor", "infrared", "bluetooth", "trendy", "fancy", "simple",
    "premium", "budget", "logo", "slogan", "colour", "shape", "case", "cover", "grip", "light",
    "sound", "menu", "teletext",
];

const SPEAKERS: &[&str] = &["A", "B", "C", "D"];

/// Generator settings for the planted-saliency corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_meetings: usize,
    pub sentences_per_meeting: usize,
    pub decisions_per_meeting: usize,
    pub filler_words_min: usize,
    pub filler_words_max: usize,
    /// Number of filler words in use (at most the built-in list).
    pub filler_vocab: usize,
    /// Number of keyword types in use (at most the built-in list).
    pub keyword_vocab: usize,
    /// Size of the fixed pool of filler sentences; 0 draws every filler
    /// sentence word by word instead.
    pub filler_templates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_meetings: 120,
            sentences_per_meeting: 45,
            decisions_per_meeting: 3,
            filler_words_min: 6,
            filler_words_max: 10,
            filler_vocab: FILLER.len(),
            keyword_vocab: KEYWORDS.len(),
            filler_templates: 32,
            seed: 17,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.filler_vocab == 0 || self.filler_vocab > FILLER.len() {
            return bad("filler_vocab out of range");
        }
        if self.keyword_vocab < 2 * self.decisions_per_meeting || self.keyword_vocab > KEYWORDS.len() {
            return bad("keyword_vocab out of range");
        }
        if self.filler_words_min == 0 || self.filler_words_min > self.filler_words_max {
            return bad("filler word bounds invalid");
        }
        if self.sentences_per_meeting < 4 * self.decisions_per_meeting.max(1) {
            return bad("too few sentences for the requested decisions");
        }
        Ok(())
    }
}

/// A generated meeting and its planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeeting {
    pub raw: RawMeeting,
    pub summary: String,
    pub decision_sentences: Vec<usize>,
    pub keywords: Vec<String>,
}

impl SynthMeeting {
    /// Flat positions of the planted keywords in the tokenized transcript.
    pub fn planted_positions(&self, t: &Transcript, tok: &Tokenizer) -> Vec<usize> {
        let keys: BTreeSet<&str> = self.keywords.iter().map(String::as_str).collect();
        let mut out = Vec::new();
        for &i in &self.decision_sentences {
            let s = &t.sentences[i];
            for (off, &id) in s.tokens.iter().enumerate() {
                if keys.contains(tok.display_piece(id)) {
                    out.push(s.token_span.start + off);
                }
            }
        }
        out
    }
}

/// Seed of the filler pool; fixed so corpora drawn with different seeds
/// share the same chatter.
const TEMPLATE_SEED: u64 = 0x5eed_f111;

fn filler_pool(cfg: &SynthConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    (0..cfg.filler_templates).map(|_| random_filler(&mut rng, cfg)).collect()
}

fn random_filler(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let n = rng.gen_range(cfg.filler_words_min..=cfg.filler_words_max);
    let words: Vec<&str> = (0..n).map(|_| FILLER[rng.gen_range(0..cfg.filler_vocab)]).collect();
    format!("{} .", words.join(" "))
}

pub fn decision_text(k1: &str, k2: &str) -> String {
    format!("decision : we will use {k1} and {k2} .")
}

fn echo_text(k1: &str) -> String {
    format!("agreed , we use {k1} .")
}

fn second_echo_text(k2: &str) -> String {
    format!("yes , and {k2} too .")
}

/// Generates one meeting.
pub fn generate_meeting(meeting_id: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthMeeting> {
    cfg.validate()?;
    let m = cfg.sentences_per_meeting;
    let d = cfg.decisions_per_meeting;
    // One decision per block, leaving room for its acknowledgements.
    let block = m / d.max(1);
    let mut decision_sentences = Vec::with_capacity(d);
    for j in 0..d {
        let lo = j * block;
        let hi = ((j + 1) * block).min(m) - 3;
        decision_sentences.push(rng.gen_range(lo..=hi.max(lo)));
    }
    let mut kw: Vec<&str> = KEYWORDS[..cfg.keyword_vocab].to_vec();
    kw.shuffle(rng);
    let keywords: Vec<String> = kw[..2 * d].iter().map(|s| s.to_string()).collect();

    let pool = filler_pool(cfg);
    let mut texts: Vec<String> = (0..m)
        .map(|_| {
            if pool.is_empty() {
                random_filler(rng, cfg)
            } else {
                pool[rng.gen_range(0..pool.len())].clone()
            }
        })
        .collect();
    let mut summary = Vec::with_capacity(d);
    for (j, &i) in decision_sentences.iter().enumerate() {
        let (k1, k2) = (&keywords[2 * j], &keywords[2 * j + 1]);
        texts[i] = decision_text(k1, k2);
        texts[i + 1] = echo_text(k1);
        texts[i + 2] = second_echo_text(k2);
        summary.push(decision_text(k1, k2));
    }
    let sentences = texts
        .into_iter()
        .map(|text| RawSentence {
            speaker: SPEAKERS[rng.gen_range(0..SPEAKERS.len())].to_string(),
            text,
        })
        .collect();
    Ok(SynthMeeting {
        raw: RawMeeting {
            meeting_id: meeting_id.to_string(),
            sentences,
        },
        summary: summary.join(" "),
        decision_sentences,
        keywords,
    })
}

/// Generates `cfg.n_meetings` meetings with ids `synth-0000`, `synth-0001`, ...
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<SynthMeeting>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_meetings)
        .map(|i| generate_meeting(&format!("synth-{i:04}"), cfg, &mut rng))
        .collect()
}

/// Every token the generator can emit, for building a closed vocabulary.
pub fn vocabulary_text() -> String {
    let body = format!(
        "{} {} {} {} {}",
        FILLER.join(" "),
        KEYWORDS.join(" "),
        decision_text("x", "x"),
        echo_text("x"),
        second_echo_text("x")
    );
    SPEAKERS
        .iter()
        .map(|s| format!("{s}: {body}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits meeting ids into train/dev/test by count, in order.
pub fn split_manifest(meetings: &[SynthMeeting], n_train: usize, n_dev: usize) -> SplitManifest {
    let ids: Vec<String> = meetings.iter().map(|m| m.raw.meeting_id.clone()).collect();
    let n_train = n_train.min(ids.len());
    let n_dev = n_dev.min(ids.len() - n_train);
    SplitManifest {
        train: ids[..n_train].to_vec(),
        dev: ids[n_train..n_train + n_dev].to_vec(),
        test: ids[n_train + n_dev..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::TranscriptOptions;

    #[test]
    fn meetings_have_planted_decisions() {
        let cfg = SynthConfig {
            n_meetings: 5,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.len(), 5);
        let mut tok = Tokenizer::default();
        tok.encode_extend(&vocabulary_text()).unwrap();
        let frozen = tok.clone();
        for m in &corpus {
            let t = Transcript::from_raw(&m.raw, &frozen, TranscriptOptions::default()).unwrap();
            assert_eq!(t.sentences.len(), cfg.sentences_per_meeting);
            let planted = m.planted_positions(&t, &frozen);
            assert_eq!(planted.len(), 2 * cfg.decisions_per_meeting);
            let words: Vec<&str> = m.summary.split(' ').collect();
            assert_eq!(words.len(), 9 * cfg.decisions_per_meeting);
            assert!(t.n_tokens > 350 && t.n_tokens < 650, "{}", t.n_tokens);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig {
            n_meetings: 3,
            ..SynthConfig::default()
        };
        assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 18, ..cfg.clone() };
        assert_ne!(generate_corpus(&cfg).unwrap(), generate_corpus(&other).unwrap());
    }
}
