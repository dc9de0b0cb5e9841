//! Experiment configuration: one flat record, hashed into every report.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::TruncationSide;
use crate::scoring::{Aggregation, Indicator};
use crate::seq2seq::{ModelConfig, TrainConfig};
use crate::summarizer::SummarizerConfig;
use crate::synth::SynthConfig;
use crate::transcript::TranscriptOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,

    pub seed: u64,
    /// Seeds for repeated evaluation (test-corpus resampling in ablations).
    pub eval_seeds: Vec<u64>,

    pub window: usize,
    pub anchor_ratio: f64,
    pub buckets: usize,
    pub indicator: Indicator,
    pub aggregation: Aggregation,
    pub prepend_speaker: bool,
    pub vocab_limit: Option<usize>,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,

    /// Copy warm-up steps run before reconstruction training.
    pub recon_warmup_steps: usize,
    pub recon_steps: usize,
    pub recon_lr: f64,
    pub recon_batch: usize,
    pub summ_steps: usize,
    pub summ_lr: f64,
    pub summ_batch: usize,
    pub warmup: usize,
    pub init_from_reconstructor: bool,
    pub max_summary_len: usize,

    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,
    pub synth_sentences: usize,
    pub synth_decisions: usize,
    pub synth_filler_min: usize,
    pub synth_filler_max: usize,
    pub synth_filler_vocab: usize,
    pub synth_keyword_vocab: usize,
    pub synth_filler_templates: usize,

    /// Retrain the summarizer per ablation instead of re-evaluating.
    pub ablation_retrain: bool,
    pub ablation_ratios: Vec<f64>,
    /// Truncation baseline compared against bucketing.
    pub baseline_truncation: TruncationSide,
    pub sweep_ratios: Vec<f64>,
    pub sweep_indicators: Vec<Indicator>,

    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        ExperimentConfig {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            seed: 0,
            eval_seeds: vec![0, 1, 2],
            window: 8,
            anchor_ratio: 0.064,
            buckets: 1024,
            indicator: Indicator::ScaledAttention,
            aggregation: Aggregation::MultiviewVote,
            prepend_speaker: true,
            vocab_limit: None,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 1024,
            recon_warmup_steps: 1500,
            recon_steps: 1000,
            recon_lr: 2e-3,
            recon_batch: 8,
            summ_steps: 600,
            summ_lr: 2e-3,
            summ_batch: 8,
            warmup: 100,
            init_from_reconstructor: true,
            max_summary_len: 64,
            synth_train: 100,
            synth_dev: 0,
            synth_test: 20,
            synth_sentences: synth.sentences_per_meeting,
            synth_decisions: synth.decisions_per_meeting,
            synth_filler_min: synth.filler_words_min,
            synth_filler_max: synth.filler_words_max,
            synth_filler_vocab: synth.filler_vocab,
            synth_keyword_vocab: synth.keyword_vocab,
            synth_filler_templates: synth.filler_templates,
            ablation_retrain: false,
            ablation_ratios: vec![0.25, 0.5, 0.75],
            baseline_truncation: TruncationSide::Right,
            sweep_ratios: vec![0.016, 0.032, 0.064, 0.128],
            sweep_indicators: vec![Indicator::ScaledAttention, Indicator::Random],
            bench_sizes: vec![256, 512, 1024, 2048],
            bench_repeats: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if !(self.anchor_ratio > 0.0 && self.anchor_ratio <= 1.0) {
            return bad(format!("anchor_ratio {} not in (0, 1]", self.anchor_ratio));
        }
        if self.buckets == 0 {
            return bad("buckets must be >= 1".into());
        }
        if self.eval_seeds.is_empty() {
            return bad("eval_seeds must not be empty".into());
        }
        if self.synth_train == 0 {
            return bad("synth_train must be >= 1".into());
        }
        if let Some(r) = self.sweep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("sweep ratio {r} not in (0, 1]"));
        }
        self.model_config(10).validate()?;
        self.summarizer_config(10).validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_k: self.d_model / self.n_heads.max(1),
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            seed: self.seed,
        }
    }

    pub fn summarizer_config(&self, vocab_size: usize) -> SummarizerConfig {
        let mut backbone = self.model_config(vocab_size);
        backbone.seed = self.seed.wrapping_add(1);
        SummarizerConfig {
            backbone,
            bucket_budget: self.buckets,
            init_from_reconstructor: self.init_from_reconstructor,
        }
    }

    pub fn recon_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.recon_steps,
            lr: self.recon_lr,
            batch: self.recon_batch,
            warmup: self.warmup,
            seed: self.seed,
        }
    }

    pub fn summ_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.summ_steps,
            lr: self.summ_lr,
            batch: self.summ_batch,
            warmup: self.warmup,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_meetings: self.synth_train + self.synth_dev + self.synth_test,
            sentences_per_meeting: self.synth_sentences,
            decisions_per_meeting: self.synth_decisions,
            filler_words_min: self.synth_filler_min,
            filler_words_max: self.synth_filler_max,
            filler_vocab: self.synth_filler_vocab,
            keyword_vocab: self.synth_keyword_vocab,
            filler_templates: self.synth_filler_templates,
            seed: self.seed,
        }
    }

    pub fn transcript_options(&self) -> TranscriptOptions {
        TranscriptOptions {
            prepend_speaker: self.prepend_speaker,
        }
    }
}
