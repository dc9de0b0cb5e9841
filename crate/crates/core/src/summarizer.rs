//! Summarizer: token embeddings are bucketed and mean-pooled before the
//! first encoder layer; everything after that is the plain backbone.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::rpb::{assign_buckets, BucketAssignment};
use crate::seq2seq::{train_loop, EncoderInput, LossCurve, ModelConfig, Seq2Seq, TrainConfig};
use crate::tokenizer::{TokenId, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerConfig {
    pub backbone: ModelConfig,
    pub bucket_budget: usize,
    /// Start from the reconstructor's weights instead of a fresh init.
    pub init_from_reconstructor: bool,
}

impl SummarizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.bucket_budget == 0 || self.bucket_budget > self.backbone.max_positions {
            return Err(Error::InvalidArgument(format!(
                "bucket budget {} must be in [1, max_positions = {}]",
                self.bucket_budget, self.backbone.max_positions
            )));
        }
        Ok(())
    }
}

/// Source tokens with their bucket map, plus the gold summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryExample {
    pub meeting_id: String,
    pub tokens: Vec<TokenId>,
    pub assignment: BucketAssignment,
    pub summary: Vec<TokenId>,
}

impl SummaryExample {
    fn input(&self) -> EncoderInput<'_> {
        if self.assignment.is_identity() {
            EncoderInput::plain(&self.tokens)
        } else {
            EncoderInput::pooled(&self.tokens, &self.assignment.bucket_of, self.assignment.n_buckets)
        }
    }

    /// Gold summary followed by `[EOS]`.
    pub fn targets(&self) -> Vec<TokenId> {
        let mut t = self.summary.clone();
        t.push(EOS_ID);
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summarizer {
    pub config: SummarizerConfig,
    pub model: Seq2Seq,
}

impl Summarizer {
    pub fn new(config: SummarizerConfig) -> Result<Self> {
        config.validate()?;
        let model = Seq2Seq::new(config.backbone.clone())?;
        Ok(Summarizer { config, model })
    }

    /// Builds a summarizer, copying the reconstructor's parameters when the
    /// config asks for it and the shapes agree.
    pub fn with_reconstructor(config: SummarizerConfig, reconstructor: &Seq2Seq) -> Result<Self> {
        let mut s = Self::new(config)?;
        if s.config.init_from_reconstructor {
            if reconstructor.names != s.model.names
                || reconstructor
                    .params
                    .iter()
                    .zip(&s.model.params)
                    .any(|(a, b)| a.dim() != b.dim())
            {
                return Err(Error::InvalidArgument(
                    "reconstructor and summarizer backbones differ in shape".into(),
                ));
            }
            s.model.params = reconstructor.params.clone();
        }
        Ok(s)
    }

    /// Bucket map for a transcript of `n` tokens with the given anchors.
    pub fn assignment(&self, n: usize, anchors: &[usize]) -> Result<BucketAssignment> {
        assign_buckets(n, anchors, self.config.bucket_budget)
    }

    pub fn example(
        &self,
        meeting_id: &str,
        tokens: Vec<TokenId>,
        anchors: &[usize],
        summary: Vec<TokenId>,
    ) -> Result<SummaryExample> {
        let assignment = self.assignment(tokens.len(), anchors)?;
        Ok(SummaryExample {
            meeting_id: meeting_id.to_string(),
            tokens,
            assignment,
            summary,
        })
    }

    /// Encoder states of the compressed sequence, `[n_buckets × d_model]`.
    pub fn encode_compressed(&self, tokens: &[TokenId], assignment: &BucketAssignment) -> Result<Mat> {
        self.model.encode(Self::input(tokens, assignment))
    }

    fn input<'a>(tokens: &'a [TokenId], assignment: &'a BucketAssignment) -> EncoderInput<'a> {
        if assignment.is_identity() {
            EncoderInput::plain(tokens)
        } else {
            EncoderInput::pooled(tokens, &assignment.bucket_of, assignment.n_buckets)
        }
    }

    /// Teacher-forced logits for `targets` given the compressed input.
    pub fn logits(&self, tokens: &[TokenId], assignment: &BucketAssignment, targets: &[TokenId]) -> Result<Mat> {
        Ok(self.model.forward(0, Self::input(tokens, assignment), targets, None)?.logits())
    }

    pub fn loss_and_grads(&self, ex: &SummaryExample) -> Result<(f64, Vec<Option<Mat>>)> {
        self.model.loss_and_grads(ex.input(), &ex.targets())
    }

    pub fn train(&mut self, corpus: &[SummaryExample], cfg: &TrainConfig) -> Result<LossCurve> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty summarization corpus".into()));
        }
        for ex in corpus {
            if ex.assignment.n_tokens() != ex.tokens.len() {
                return Err(Error::shape("train_summarizer", format!("{}: assignment/token length mismatch", ex.meeting_id)));
            }
        }
        train_loop(&mut self.model, corpus.len(), cfg, |m, i| {
            let ex = &corpus[i];
            m.loss_and_grads(ex.input(), &ex.targets())
        })
    }

    /// Greedy summary of at most `max_len` tokens.
    pub fn generate(&self, tokens: &[TokenId], assignment: &BucketAssignment, max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        self.model.generate(Self::input(tokens, assignment), max_len)
    }
}

/// One line of the summary output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub meeting_id: String,
    pub summary: String,
    pub n_tokens_in: usize,
    pub n_buckets: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(c: usize) -> SummarizerConfig {
        let mut backbone = ModelConfig::new(20).with_width(16, 2);
        backbone.n_layers = 1;
        backbone.max_positions = 256;
        SummarizerConfig {
            backbone,
            bucket_budget: c,
            init_from_reconstructor: false,
        }
    }

    #[test]
    fn budget_must_fit_positions() {
        assert!(Summarizer::new(config(512)).is_err());
        assert!(Summarizer::new(config(0)).is_err());
    }

    #[test]
    fn zero_length_generation() {
        let s = Summarizer::new(config(8)).unwrap();
        let toks: Vec<TokenId> = (4..20).collect();
        let a = s.assignment(toks.len(), &[3, 10]).unwrap();
        assert_eq!(a.n_buckets, 8);
        assert!(s.generate(&toks, &a, 0).unwrap().is_empty());
    }

    #[test]
    fn greedy_is_deterministic() {
        let s = Summarizer::new(config(8)).unwrap();
        let toks: Vec<TokenId> = (4..20).chain(4..20).collect();
        let a = s.assignment(toks.len(), &[5, 20]).unwrap();
        assert_eq!(s.generate(&toks, &a, 6).unwrap(), s.generate(&toks, &a, 6).unwrap());
        assert_eq!(s.encode_compressed(&toks, &a).unwrap().nrows(), 8);
    }

    #[test]
    fn weight_reuse_copies_parameters() {
        let mut cfg = config(8);
        cfg.init_from_reconstructor = true;
        let mut recon_cfg = cfg.backbone.clone();
        recon_cfg.seed = 99;
        let recon = Seq2Seq::new(recon_cfg).unwrap();
        let s = Summarizer::with_reconstructor(cfg.clone(), &recon).unwrap();
        assert_eq!(s.model.params, recon.params);
        cfg.init_from_reconstructor = false;
        let fresh = Summarizer::with_reconstructor(cfg, &recon).unwrap();
        assert_ne!(fresh.model.params, recon.params);
    }
}
