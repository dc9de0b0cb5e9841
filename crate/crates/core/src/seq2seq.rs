//! A small pre-norm encoder-decoder transformer on the [`Tape`] engine.
//!
//! The decoder's last cross-attention layer is instrumented: every head's
//! post-softmax weight matrix is kept as a tape node so the exact gradient
//! of the prediction score with respect to it can be read back after a
//! reverse sweep.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, write_atomic};
use crate::optim::Adam;
use crate::tokenizer::{TokenId, BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Layers in the encoder and, separately, in the decoder.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_k: 16,
            d_ff: 128,
            vocab_size,
            max_positions: 1024,
            seed: 0,
        }
    }

    /// Sets `d_model` and `n_heads`, deriving `d_k` and `d_ff`.
    pub fn with_width(mut self, d_model: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.d_k = d_model / n_heads.max(1);
        self.d_ff = 2 * d_model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::InvalidArgument(format!(
                "d_model {} != n_heads {} x d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross_attn: AttnIdx,
    ln3: NormIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    enc: Vec<EncLayer>,
    enc_ln: NormIdx,
    dec: Vec<DecLayer>,
    dec_ln: NormIdx,
    out_bias: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, (fan_in, fan_out), Init::Normal(1.0 / (fan_in as f64).sqrt()))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.linear(format!("{prefix}.wq"), d, d),
            wk: self.linear(format!("{prefix}.wk"), d, d),
            wv: self.linear(format!("{prefix}.wv"), d, d),
            wo: self.linear(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.linear(format!("{prefix}.w1"), d, f),
            b1: self.add(format!("{prefix}.b1"), (1, f), Init::Zeros),
            w2: self.linear(format!("{prefix}.w2"), f, d),
            b2: self.add(format!("{prefix}.b2"), (1, d), Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embed = b.add("embed".into(), (cfg.vocab_size, d), Init::Normal(1.0));
    let enc = (0..cfg.n_layers)
        .map(|l| EncLayer {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_ff),
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec = (0..cfg.n_layers)
        .map(|l| DecLayer {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross"), d),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_ff),
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    let out_bias = b.add("out.bias".into(), (1, cfg.vocab_size), Init::Zeros);
    (
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_bias,
        },
        b,
    )
}

/// Sinusoidal position table, `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `softmax(Q Kᵀ / √d_k) V` on plain matrices, returning the output and the
/// attention weights.
pub fn cross_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<(Mat, Mat)> {
    let d_k = q.ncols();
    if d_k == 0 {
        return Err(Error::shape("cross_attention", "d_k must be > 0"));
    }
    if k.ncols() != d_k || k.nrows() != v.nrows() {
        return Err(Error::shape(
            "cross_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.dim(), k.dim(), v.dim()),
        ));
    }
    let scores = q.dot(&k.t()) / (d_k as f64).sqrt();
    let a = softmax_rows(scores.view());
    Ok((a.dot(v), a))
}

/// Additive perturbation of one entry of the instrumented attention weights,
/// used by finite-difference checks.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPerturbation {
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

/// How the encoder consumes source tokens.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub tokens: &'a [TokenId],
    /// `(group of each token, number of groups)`; rows are mean-pooled by
    /// group before positions are added.
    pub pooling: Option<(&'a [usize], usize)>,
}

impl<'a> EncoderInput<'a> {
    pub fn plain(tokens: &'a [TokenId]) -> Self {
        EncoderInput {
            tokens,
            pooling: None,
        }
    }

    pub fn pooled(tokens: &'a [TokenId], group: &'a [usize], n_groups: usize) -> Self {
        EncoderInput {
            tokens,
            pooling: Some((group, n_groups)),
        }
    }

    fn encoder_len(&self) -> usize {
        self.pooling.map_or(self.tokens.len(), |(_, n)| n)
    }
}

/// Last-layer cross-attention of one head for one context-response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    /// `[response_len × context_len]`, rows sum to one.
    pub weights: Mat,
    /// `∂ŷ/∂weights`, filled by the reverse sweep.
    pub grads: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionOutput {
    pub pair_index: usize,
    pub loss: f64,
    pub token_losses: Vec<f64>,
    pub traces: Vec<AttentionTrace>,
}

/// A forward pass with every intermediate retained on its tape.
pub struct ForwardPass<'m> {
    tape: Tape<'m>,
    n_params: usize,
    log_probs: Var,
    /// ŷ: summed gold-token log-probability.
    yhat: Var,
    /// Mean token negative log-likelihood.
    loss: Var,
    logits: Var,
    encoder_states: Var,
    source_rows: Var,
    cross_attn: Vec<Var>,
    last_layer: usize,
    pair_index: usize,
}

impl<'m> ForwardPass<'m> {
    pub fn loss(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    pub fn yhat(&self) -> f64 {
        self.tape.scalar(self.yhat)
    }

    pub fn token_losses(&self) -> Vec<f64> {
        self.tape.value(self.log_probs).iter().map(|lp| -lp).collect()
    }

    pub fn logits(&self) -> Mat {
        self.tape.value(self.logits).to_owned()
    }

    pub fn encoder_states(&self) -> Mat {
        self.tape.value(self.encoder_states).to_owned()
    }

    /// Output with attention weights but no gradients.
    pub fn output(&self) -> ReconstructionOutput {
        ReconstructionOutput {
            pair_index: self.pair_index,
            loss: self.loss(),
            token_losses: self.token_losses(),
            traces: self
                .cross_attn
                .iter()
                .enumerate()
                .map(|(head, &v)| AttentionTrace {
                    layer: self.last_layer,
                    head,
                    weights: self.tape.value(v).to_owned(),
                    grads: None,
                })
                .collect(),
        }
    }

    /// Reverse sweep from `seed · ŷ`; returns the output with `∂(seed·ŷ)/∂a`
    /// filled in for every head.
    pub fn backward_scaled_attention_seeded(&self, seed: f64) -> Result<ReconstructionOutput> {
        let grads = self.tape.backward(self.yhat, seed)?;
        let mut out = self.output();
        for (trace, &v) in out.traces.iter_mut().zip(&self.cross_attn) {
            trace.grads = Some(
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(trace.weights.dim())),
            );
        }
        Ok(out)
    }

    pub fn backward_scaled_attention(&self) -> Result<ReconstructionOutput> {
        self.backward_scaled_attention_seeded(1.0)
    }

    /// Parameter gradients of the mean token loss.
    pub fn loss_gradients(&self) -> Result<Vec<Option<Mat>>> {
        let g = self.tape.backward(self.loss, 1.0)?;
        Ok(self.collect_param_grads(&g))
    }

    /// Gradient of the mean token loss with respect to the token embedding
    /// rows fed to the encoder (before pooling and positions).
    pub fn source_embedding_grad(&self) -> Result<Mat> {
        let g = self.tape.backward(self.loss, 1.0)?;
        Ok(g.get(self.source_rows).cloned().unwrap_or_default())
    }

    fn collect_param_grads(&self, g: &Gradients) -> Vec<Option<Mat>> {
        (0..self.n_params).map(|i| g.param(i).cloned()).collect()
    }
}

/// Encoder-decoder model with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: Vec<Mat>,
    pub names: Vec<String>,
    layout_cache: LayoutCache,
}

#[derive(Debug, Clone)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Checkpoint header stored alongside the parameter payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(&shape, init)| match init {
                Init::Zeros => Mat::zeros(shape),
                Init::Ones => Mat::ones(shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, *std).expect("finite std");
                    Mat::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
            })
            .collect();
        Ok(Seq2Seq {
            config,
            params,
            names: builder.names,
            layout_cache: LayoutCache(layout),
        })
    }

    fn layout(&self) -> &Layout {
        &self.layout_cache.0
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_len(&self, pair_index: usize, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Overlong {
                pair_index,
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        xq: Var,
        xkv: Var,
        idx: AttnIdx,
        causal: bool,
        mut capture: Option<&mut Vec<Var>>,
        perturb: Option<AttentionPerturbation>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (wq, wk, wv, wo) = (
            tape.param(idx.wq),
            tape.param(idx.wk),
            tape.param(idx.wv),
            tape.param(idx.wo),
        );
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let scale = 1.0 / (cfg.d_k as f64).sqrt();
        let mask = if causal {
            let n = tape.value(xq).nrows();
            Some(tape.input(Mat::from_shape_fn((n, n), |(i, j)| {
                if j > i {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            })))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = (h * cfg.d_k, (h + 1) * cfg.d_k);
            let qh = tape.slice_cols(q, cols.0, cols.1)?;
            let kh = tape.slice_cols(k, cols.0, cols.1)?;
            let vh = tape.slice_cols(v, cols.0, cols.1)?;
            let mut scores = tape.matmul_t(qh, kh)?;
            scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let mut a = tape.softmax(scores);
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(a);
            }
            if let Some(p) = perturb.filter(|p| p.head == h) {
                let mut delta = Mat::zeros(tape.value(a).dim());
                delta[[p.row, p.col]] = p.delta;
                let d = tape.input(delta);
                a = tape.add(a, d)?;
            }
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, wo)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, idx: NormIdx) -> Result<Var> {
        let (g, b) = (tape.param(idx.gain), tape.param(idx.bias));
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape<'_>, x: Var, idx: FfnIdx) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(idx.w1),
            tape.param(idx.b1),
            tape.param(idx.w2),
            tape.param(idx.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    fn with_positions(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.value(x).nrows();
        let pe = tape.input(sinusoidal_positions(n, self.config.d_model));
        tape.add(x, pe)
    }

    /// Token embedding rows (before pooling and positions), and the encoder
    /// output.
    fn encode_on(&self, tape: &mut Tape<'_>, input: EncoderInput<'_>) -> Result<(Var, Var)> {
        let layout = self.layout();
        let embed = tape.param(layout.embed);
        let rows = tape.gather(embed, input.tokens)?;
        let pooled = match input.pooling {
            Some((group, n)) => tape.mean_pool(rows, group, n)?,
            None => rows,
        };
        let mut x = self.with_positions(tape, pooled)?;
        for layer in &layout.enc {
            let h = self.norm(tape, x, layer.ln1)?;
            let a = self.attention(tape, h, h, layer.attn, false, None, None)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.ln2)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            x = tape.add(x, f)?;
        }
        Ok((rows, self.norm(tape, x, layout.enc_ln)?))
    }

    fn decode_on(
        &self,
        tape: &mut Tape<'_>,
        memory: Var,
        dec_in: &[TokenId],
        capture: &mut Vec<Var>,
        perturb: Option<AttentionPerturbation>,
    ) -> Result<Var> {
        let layout = self.layout();
        let embed = tape.param(layout.embed);
        let y = tape.gather(embed, dec_in)?;
        let mut y = self.with_positions(tape, y)?;
        let last = layout.dec.len() - 1;
        for (l, layer) in layout.dec.iter().enumerate() {
            let h = self.norm(tape, y, layer.ln1)?;
            let a = self.attention(tape, h, h, layer.self_attn, true, None, None)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, y, layer.ln2)?;
            let (cap, pert) = if l == last {
                (Some(&mut *capture), perturb)
            } else {
                (None, None)
            };
            let a = self.attention(tape, h, memory, layer.cross_attn, false, cap, pert)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, y, layer.ln3)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, y, layout.dec_ln)?;
        let logits = tape.matmul_t(y, embed)?;
        let logits = tape.scale(logits, 1.0 / (self.config.d_model as f64).sqrt());
        let bias = tape.param(layout.out_bias);
        tape.add_row(logits, bias)
    }

    /// Teacher-forced pass: the decoder reads `[BOS] + targets[..len-1]` and
    /// predicts `targets`.
    pub fn forward(
        &self,
        pair_index: usize,
        input: EncoderInput<'_>,
        targets: &[TokenId],
        perturb: Option<AttentionPerturbation>,
    ) -> Result<ForwardPass<'_>> {
        if input.tokens.is_empty() || targets.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pair {pair_index}: empty source or target"
            )));
        }
        self.check_len(pair_index, input.encoder_len())?;
        self.check_len(pair_index, targets.len())?;
        let mut tape = Tape::new(&self.params);
        let (source_rows, memory) = self.encode_on(&mut tape, input)?;
        let dec_in: Vec<TokenId> = std::iter::once(BOS_ID)
            .chain(targets[..targets.len() - 1].iter().copied())
            .collect();
        let mut cross_attn = Vec::new();
        let logits = self.decode_on(&mut tape, memory, &dec_in, &mut cross_attn, perturb)?;
        let log_probs = tape.gold_log_prob(logits, targets)?;
        let yhat = tape.sum(log_probs);
        let loss = tape.scale(yhat, -1.0 / targets.len() as f64);
        Ok(ForwardPass {
            tape,
            n_params: self.params.len(),
            log_probs,
            yhat,
            loss,
            logits,
            encoder_states: memory,
            source_rows,
            cross_attn,
            last_layer: self.config.n_layers - 1,
            pair_index,
        })
    }

    /// Reconstruction of one response from its context.
    pub fn forward_teacher_forced(
        &self,
        pair_index: usize,
        context: &[TokenId],
        response: &[TokenId],
    ) -> Result<ForwardPass<'_>> {
        self.forward(pair_index, EncoderInput::plain(context), response, None)
    }

    /// Mean-loss and parameter gradients for one example.
    pub fn loss_and_grads(
        &self,
        input: EncoderInput<'_>,
        targets: &[TokenId],
    ) -> Result<(f64, Vec<Option<Mat>>)> {
        let pass = self.forward(0, input, targets, None)?;
        Ok((pass.loss(), pass.loss_gradients()?))
    }

    /// Encoder output only.
    pub fn encode(&self, input: EncoderInput<'_>) -> Result<Mat> {
        self.check_len(0, input.encoder_len())?;
        let mut tape = Tape::new(&self.params);
        let (_, memory) = self.encode_on(&mut tape, input)?;
        Ok(tape.value(memory).to_owned())
    }

    /// Greedy decoding until `[EOS]` or `max_len` tokens.
    pub fn generate(&self, input: EncoderInput<'_>, max_len: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        if max_len == 0 {
            return Ok(out);
        }
        self.check_len(0, input.encoder_len())?;
        let max_len = max_len.min(self.config.max_positions);
        let mut tape = Tape::new(&self.params);
        let (_, memory) = self.encode_on(&mut tape, input)?;
        let memory_value = tape.value(memory).to_owned();
        while out.len() < max_len {
            // Fresh tape per step; the encoder output is reused as an input.
            let mut step = Tape::new(&self.params);
            let mem = step.input(memory_value.clone());
            let dec_in: Vec<TokenId> = std::iter::once(BOS_ID).chain(out.iter().copied()).collect();
            let logits = self.decode_on(&mut step, mem, &dec_in, &mut Vec::new(), None)?;
            let lv = step.value(logits);
            let last = lv.row(lv.nrows() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best as TokenId == EOS_ID {
                break;
            }
            out.push(best as TokenId);
        }
        Ok(out)
    }

    pub fn checkpoint_header(&self, step: usize) -> CheckpointHeader {
        CheckpointHeader {
            config: self.config.clone(),
            seed: self.config.seed,
            step,
            names: self.names.clone(),
            shapes: self.params.iter().map(|p| p.dim()).collect(),
        }
    }

    pub fn to_bytes(&self, step: usize) -> Result<Vec<u8>> {
        let payload: Vec<f64> = self.params.iter().flat_map(|p| p.iter().copied()).collect();
        encode_container(&self.checkpoint_header(step), &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let (header, payload): (CheckpointHeader, Vec<f64>) = decode_container(bytes)?;
        let mut model = Seq2Seq::new(header.config.clone())?;
        if header.names != model.names {
            return Err(Error::Checkpoint("parameter names do not match config".into()));
        }
        let mut offset = 0;
        for (p, &shape) in model.params.iter_mut().zip(&header.shapes) {
            if p.dim() != shape {
                return Err(Error::Checkpoint(format!("shape mismatch {:?} vs {shape:?}", p.dim())));
            }
            let n = shape.0 * shape.1;
            let chunk = payload
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint("payload too short".into()))?;
            *p = Mat::from_shape_vec(shape, chunk.to_vec()).expect("shape checked");
            offset += n;
        }
        if offset != payload.len() {
            return Err(Error::Checkpoint("trailing payload".into()));
        }
        Ok((model, header))
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        write_atomic(path, &self.to_bytes(step)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            batch: 8,
            warmup: 50,
            seed: 0,
        }
    }
}

/// Per-step mean batch loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.17e}\n"));
        }
        s
    }
}

/// Generic minibatch loop. `example` returns loss and gradients for sample
/// `i` under the current parameters.
pub fn train_loop<F>(
    model: &mut Seq2Seq,
    n_samples: usize,
    cfg: &TrainConfig,
    mut example: F,
) -> Result<LossCurve>
where
    F: FnMut(&Seq2Seq, usize) -> Result<(f64, Vec<Option<Mat>>)>,
{
    use rand::Rng;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut curve = LossCurve::default();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut sum: Vec<Option<Mat>> = vec![None; model.params.len()];
        let mut loss = 0.0;
        for _ in 0..batch {
            let i = rng.gen_range(0..n_samples);
            let (l, grads) = example(model, i)?;
            loss += l;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => *a += &g,
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for g in sum.iter_mut().flatten() {
            g.mapv_inplace(|v| v / batch as f64);
        }
        let warm = if cfg.warmup > 0 {
            ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
        } else {
            1.0
        };
        opt.step(&mut model.params, &sum, warm);
        curve.losses.push(loss);
    }
    Ok(curve)
}

/// Trains a reconstructor on `(context, response)` token pairs.
pub fn train(
    model: &mut Seq2Seq,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    train_loop(model, pairs.len(), cfg, |m, i| {
        let (ctx, resp) = &pairs[i];
        m.loss_and_grads(EncoderInput::plain(ctx), resp)
    })
}
