//! Meeting transcripts and the windowed context-response pairs built from them.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer, EOM_ID};

/// Collapses whitespace runs to one space and runs of one punctuation mark
/// to a single mark, then trims.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut prev: Option<char> = None;
    for c in raw.chars() {
        let c = if c.is_whitespace() { ' ' } else { c };
        if let Some(p) = prev {
            if p == c && (c == ' ' || c.is_ascii_punctuation()) {
                continue;
            }
        }
        out.push(c);
        prev = Some(c);
    }
    out.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSentence {
    pub speaker: String,
    pub text: String,
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMeeting {
    pub meeting_id: String,
    pub sentences: Vec<RawSentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub speaker: String,
    /// Cleaned text, without the speaker prefix.
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Offsets into the flat transcript token stream.
    pub token_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub meeting_id: String,
    pub sentences: Vec<Sentence>,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptOptions {
    /// Prepend `"<speaker>: "` to each sentence before tokenizing.
    pub prepend_speaker: bool,
}

impl Default for TranscriptOptions {
    fn default() -> Self {
        TranscriptOptions {
            prepend_speaker: true,
        }
    }
}

fn surface(speaker: &str, text: &str, opts: TranscriptOptions) -> String {
    if opts.prepend_speaker && !speaker.is_empty() {
        format!("{speaker}: {text}")
    } else {
        text.to_string()
    }
}

impl Transcript {
    /// Cleans and tokenizes a raw meeting. Sentences empty after cleaning are
    /// dropped and the rest re-indexed.
    pub fn from_raw(raw: &RawMeeting, tok: &Tokenizer, opts: TranscriptOptions) -> Result<Self> {
        Self::build(raw, opts, |s| tok.encode(s))
    }

    /// Like [`Transcript::from_raw`] but grows the vocabulary as needed.
    pub fn from_raw_extend(
        raw: &RawMeeting,
        tok: &mut Tokenizer,
        opts: TranscriptOptions,
    ) -> Result<Self> {
        Self::build(raw, opts, |s| tok.encode_extend(s))
    }

    fn build(
        raw: &RawMeeting,
        opts: TranscriptOptions,
        mut encode: impl FnMut(&str) -> Result<Vec<TokenId>>,
    ) -> Result<Self> {
        let mut sentences = Vec::with_capacity(raw.sentences.len());
        let mut offset = 0;
        for (raw_index, rs) in raw.sentences.iter().enumerate() {
            let text = clean_text(&rs.text);
            if text.is_empty() {
                log::warn!(
                    "{}: dropping sentence {raw_index} (empty after cleaning)",
                    raw.meeting_id
                );
                continue;
            }
            let speaker = clean_text(&rs.speaker);
            let tokens = encode(&surface(&speaker, &text, opts))?;
            let span = offset..offset + tokens.len();
            offset = span.end;
            sentences.push(Sentence {
                index: sentences.len(),
                speaker,
                text,
                tokens,
                token_span: span,
            });
        }
        Ok(Transcript {
            meeting_id: raw.meeting_id.clone(),
            sentences,
            n_tokens: offset,
        })
    }

    pub fn to_raw(&self) -> RawMeeting {
        RawMeeting {
            meeting_id: self.meeting_id.clone(),
            sentences: self
                .sentences
                .iter()
                .map(|s| RawSentence {
                    speaker: s.speaker.clone(),
                    text: s.text.clone(),
                })
                .collect(),
        }
    }

    /// The flat token stream.
    pub fn flat_tokens(&self) -> Vec<TokenId> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect()
    }

    /// Index of the sentence containing flat position `pos`.
    pub fn sentence_at(&self, pos: usize) -> Option<usize> {
        let i = self.sentences.partition_point(|s| s.token_span.end <= pos);
        (i < self.sentences.len()).then_some(i)
    }
}

/// The sentence to be reconstructed from a context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Sentence(usize),
    EndOfMeeting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextResponsePair {
    pub pair_index: usize,
    /// Sentence indices `[max(0, i - w), i)`.
    pub context: Range<usize>,
    pub response: Response,
    pub window: usize,
}

impl ContextResponsePair {
    /// Flat token positions covered by the context sentences.
    pub fn context_span(&self, t: &Transcript) -> Range<usize> {
        let first = &t.sentences[self.context.start];
        let last = &t.sentences[self.context.end - 1];
        first.token_span.start..last.token_span.end
    }

    pub fn context_tokens(&self, t: &Transcript) -> Vec<TokenId> {
        t.sentences[self.context.clone()]
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect()
    }

    pub fn response_tokens(&self, t: &Transcript) -> Vec<TokenId> {
        match self.response {
            Response::Sentence(i) => t.sentences[i].tokens.clone(),
            Response::EndOfMeeting => vec![EOM_ID],
        }
    }

    /// Flat positions of the response, `None` for the end-of-meeting pair.
    pub fn response_span(&self, t: &Transcript) -> Option<Range<usize>> {
        match self.response {
            Response::Sentence(i) => Some(t.sentences[i].token_span.clone()),
            Response::EndOfMeeting => None,
        }
    }
}

/// Builds the `m` context-response pairs of a transcript: responses
/// `S1..S(m-1)` plus a final end-of-meeting pair.
pub fn split_pairs(t: &Transcript, window: usize) -> Result<Vec<ContextResponsePair>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let m = t.sentences.len();
    if m < 2 {
        return Err(Error::TooFewSentences {
            meeting_id: t.meeting_id.clone(),
            sentences: m,
        });
    }
    let pair = |i: usize, response| ContextResponsePair {
        pair_index: i - 1,
        context: i.saturating_sub(window)..i,
        response,
        window,
    };
    let mut pairs: Vec<_> = (1..m).map(|i| pair(i, Response::Sentence(i))).collect();
    pairs.push(pair(m, Response::EndOfMeeting));
    Ok(pairs)
}

fn field<'a>(v: &'a Value, name: &str, line: usize) -> Result<&'a Value> {
    v.get(name).ok_or_else(|| Error::Malformed {
        line,
        field: name.to_string(),
        message: "missing".into(),
    })
}

fn string_field(v: &Value, name: &str, line: usize, path: &str) -> Result<String> {
    v.get(name)
        .ok_or_else(|| Error::Malformed {
            line,
            field: path.to_string(),
            message: "missing".into(),
        })?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Malformed {
            line,
            field: path.to_string(),
            message: "expected a string".into(),
        })
}

fn parse_meeting(line_text: &str, line: usize) -> Result<RawMeeting> {
    let v: Value = serde_json::from_str(line_text).map_err(|e| Error::Malformed {
        line,
        field: "<record>".into(),
        message: e.to_string(),
    })?;
    let meeting_id = string_field(&v, "meeting_id", line, "meeting_id")?;
    let arr = field(&v, "sentences", line)?
        .as_array()
        .ok_or_else(|| Error::Malformed {
            line,
            field: "sentences".into(),
            message: "expected an array".into(),
        })?;
    let sentences = arr
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(RawSentence {
                speaker: string_field(s, "speaker", line, &format!("sentences[{i}].speaker"))?,
                text: string_field(s, "text", line, &format!("sentences[{i}].text"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RawMeeting {
        meeting_id,
        sentences,
    })
}

/// Reads a JSON-lines transcript file. Blank lines are skipped.
pub fn load_raw_meetings(path: &Path) -> Result<Vec<RawMeeting>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_meeting(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_transcripts(
    path: &Path,
    tok: &Tokenizer,
    opts: TranscriptOptions,
) -> Result<Vec<Transcript>> {
    load_raw_meetings(path)?
        .iter()
        .map(|r| Transcript::from_raw(r, tok, opts))
        .collect()
}

pub fn write_raw_meetings(mut w: impl Write, meetings: &[RawMeeting]) -> Result<()> {
    for m in meetings {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<()> {
    let raws: Vec<_> = transcripts.iter().map(Transcript::to_raw).collect();
    let mut buf = Vec::new();
    write_raw_meetings(&mut buf, &raws)?;
    crate::io::write_atomic(path, &buf)
}

/// Train/dev/test meeting ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
