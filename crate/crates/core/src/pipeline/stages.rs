//! File-backed pipeline stages. Each stage reads its inputs from the
//! directories named in the config, refuses to run when an upstream artifact
//! is missing, and writes new files atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::*;
use crate::evalkit::bench::{benchmark_complexity, BenchConfig};
use crate::evalkit::report::{to_csv, version_string, write_report, ReportMeta};
use crate::evalkit::{high_frequency_pool, AblationMode};
use crate::io::write_atomic;
use crate::rpb::{assign_buckets, compress_sequence};
use crate::scoring::{load_anchors, save_anchors, save_scores, AnchorFile};
use crate::transcript::load_raw_meetings;

/// Artifact locations.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout {
            data: cfg.data_dir.clone(),
            checkpoints: cfg.checkpoint_dir.clone(),
            reports: cfg.report_dir.clone(),
        }
    }

    pub fn transcripts(&self) -> PathBuf {
        self.data.join("transcripts.jsonl")
    }
    pub fn gold(&self) -> PathBuf {
        self.data.join("gold.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.data.join("split.json")
    }
    pub fn planted(&self) -> PathBuf {
        self.data.join("planted.jsonl")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.data.join("tokenizer.json")
    }
    pub fn tokenized(&self) -> PathBuf {
        self.data.join("tokenized.jsonl")
    }
    pub fn scores(&self) -> PathBuf {
        self.data.join("scores.jsonl")
    }
    pub fn anchors(&self) -> PathBuf {
        self.data.join("anchors.jsonl")
    }
    pub fn compressed(&self) -> PathBuf {
        self.data.join("compressed")
    }
    pub fn reconstructor(&self) -> PathBuf {
        self.checkpoints.join("reconstructor.bin")
    }
    pub fn summarizer(&self) -> PathBuf {
        self.checkpoints.join("summarizer.bin")
    }
    pub fn lock(&self) -> PathBuf {
        self.checkpoints.join(".lock")
    }
    pub fn summaries(&self) -> PathBuf {
        self.reports.join("summaries.jsonl")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.reports.join(name)
    }
}

/// Advisory lock on a checkpoint directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is locked by another process (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn meta(cfg: &ExperimentConfig, report: &str, notes: Vec<String>) -> ReportMeta {
    ReportMeta {
        report: report.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: version_string(),
        notes,
    }
}

fn report_csv<T: Serialize>(cfg: &ExperimentConfig, layout: &Layout, name: &str, rows: &[T], notes: Vec<String>) -> Result<PathBuf> {
    ensure_dir(&layout.reports)?;
    let path = layout.report(name);
    write_report(&path, &to_csv(rows)?, &meta(cfg, name, notes))?;
    Ok(path)
}

/// `synth-data`: planted-saliency transcripts, references and split.
pub fn synth_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    ensure_dir(&layout.data)?;
    let corpus = synth_corpus(cfg)?;
    write_jsonl(&layout.transcripts(), &corpus.meetings)?;
    write_jsonl(&layout.gold(), &corpus.gold)?;
    write_jsonl(&layout.planted(), &corpus.planted)?;
    corpus.split.save(&layout.split())?;
    Ok(vec![layout.transcripts(), layout.gold(), layout.planted(), layout.split()])
}

fn load_raw(layout: &Layout) -> Result<(Vec<RawMeeting>, Vec<GoldRecord>, SplitManifest)> {
    for p in [layout.transcripts(), layout.gold(), layout.split()] {
        require(&p, "synth-data")?;
    }
    Ok((
        load_raw_meetings(&layout.transcripts())?,
        read_jsonl(&layout.gold())?,
        SplitManifest::load(&layout.split())?,
    ))
}

/// `preprocess`: fits the vocabulary and writes cleaned transcripts.
pub fn preprocess(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let (meetings, gold, split) = load_raw(&layout)?;
    let ds = Dataset::build(&meetings, &gold, split, cfg)?;
    write_atomic(&layout.tokenizer(), ds.tokenizer.to_json()?.as_bytes())?;
    crate::transcript::save_transcripts(&layout.tokenized(), &ds.transcripts)?;
    Ok(vec![layout.tokenizer(), layout.tokenized()])
}

/// Loads the tokenized corpus written by `preprocess`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let layout = Layout::new(cfg);
    require(&layout.tokenizer(), "preprocess")?;
    require(&layout.tokenized(), "preprocess")?;
    let (_, gold, split) = load_raw(&layout)?;
    let tok = Tokenizer::from_json(&fs::read_to_string(layout.tokenizer()).map_err(|e| Error::io(layout.tokenizer(), e))?)?;
    let meetings = load_raw_meetings(&layout.tokenized())?;
    Dataset::with_tokenizer(tok, &meetings, &gold, split, cfg)
}

/// `train-recon`: trains the reconstructor on the training split.
pub fn train_recon(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let _lock = DirLock::acquire(&layout.checkpoints)?;
    let (model, curve) = train_reconstructor(cfg, &ds)?;
    model.save(&layout.reconstructor(), cfg.recon_steps)?;
    ensure_dir(&layout.reports)?;
    let loss = layout.report("recon_loss.csv");
    write_report(&loss, &curve.to_csv(), &meta(cfg, "recon_loss.csv", vec![]))?;
    Ok(vec![layout.reconstructor(), loss])
}

fn load_reconstructor(layout: &Layout) -> Result<Seq2Seq> {
    require(&layout.reconstructor(), "train-recon")?;
    Ok(Seq2Seq::load(&layout.reconstructor())?.0)
}

/// `score`: rates every meeting and selects anchors.
pub fn score(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let model = load_reconstructor(&layout)?;
    let all: Vec<&Transcript> = ds.transcripts.iter().collect();
    let scored = score_meetings(&model, &all, cfg.window, Selection::from_config(cfg))?;
    let files: Vec<AnchorFile> = scored
        .iter()
        .map(|s| AnchorFile::new(&s.meeting_id, cfg.indicator, cfg.aggregation, &s.anchors))
        .collect();
    let matrices: Vec<TokenScoreMatrix> = scored.into_iter().map(|s| s.matrix).collect();
    save_scores(&layout.scores(), &matrices)?;
    save_anchors(&layout.anchors(), &files)?;
    Ok(vec![layout.scores(), layout.anchors()])
}

fn load_anchor_map(layout: &Layout) -> Result<BTreeMap<String, AnchorSet>> {
    require(&layout.anchors(), "score")?;
    Ok(load_anchors(&layout.anchors())?
        .into_iter()
        .map(|f| (f.meeting_id.clone(), f.anchor_set()))
        .collect())
}

/// `compress`: bucket maps and pooled reconstructor embeddings per meeting.
pub fn compress(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let model = load_reconstructor(&layout)?;
    let anchors = load_anchor_map(&layout)?;
    let embed = &model.params[model.param_index("embed").expect("backbone has an embedding table")];
    let dir = layout.compressed();
    ensure_dir(&dir)?;
    let mut out = Vec::new();
    for t in &ds.transcripts {
        let a = anchors
            .get(&t.meeting_id)
            .ok_or_else(|| Error::MissingArtifact { path: layout.anchors(), command: "score" })?;
        let assignment = assign_buckets(t.n_tokens, &a.positions, cfg.buckets)?;
        let rows: Vec<usize> = t.flat_tokens().iter().map(|&id| id as usize).collect();
        let gathered = embed.select(ndarray::Axis(0), &rows);
        let seq = compress_sequence(gathered.view(), &assignment)?;
        let csv_path = dir.join(format!("{}.csv", t.meeting_id));
        let bin_path = dir.join(format!("{}.bin", t.meeting_id));
        write_atomic(&csv_path, assignment.to_csv()?.as_bytes())?;
        seq.save(&bin_path)?;
        out.push(csv_path);
        out.push(bin_path);
    }
    Ok(out)
}

/// Summary of a stand-alone bucketing of `n` tokens with evenly spaced
/// anchors at the configured ratio.
pub fn compress_synthetic(n: usize, c: usize, ratio: f64) -> Result<(BucketAssignment, String)> {
    let k = if n == 0 { 0 } else { crate::scoring::anchor_count(ratio, n).min(n) };
    let anchors: Vec<usize> = (0..k).map(|i| (2 * i + 1) * n / (2 * k)).collect();
    let a = assign_buckets(n, &anchors, c)?;
    let kind = if a.is_identity() {
        "identity (n <= c)"
    } else if a.uniform_fallback {
        "uniform fallback"
    } else {
        "anchor-guided"
    };
    let msg = format!("n={n} c={c} anchors={} buckets={} compression={kind}", anchors.len(), a.n_buckets);
    Ok((a, msg))
}

fn load_summarizer(cfg: &ExperimentConfig, layout: &Layout) -> Result<Summarizer> {
    require(&layout.summarizer(), "train-summ")?;
    let (model, _) = Seq2Seq::load(&layout.summarizer())?;
    let mut config = cfg.summarizer_config(model.config.vocab_size);
    config.backbone = model.config.clone();
    config.validate()?;
    Ok(Summarizer { config, model })
}

/// `train-summ`: trains the bucketed summarizer on the training split.
pub fn train_summ(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let anchors = load_anchor_map(&layout)?;
    let recon = if cfg.init_from_reconstructor {
        Some(load_reconstructor(&layout)?)
    } else {
        None
    };
    let _lock = DirLock::acquire(&layout.checkpoints)?;
    let probe = Summarizer::new(cfg.summarizer_config(ds.tokenizer.len()))?;
    let examples = examples_for(&probe, &ds, &ds.split.train, &anchors, InputMode::Bucketed, cfg.seed)?;
    let (summ, curve) = train_summarizer(cfg, ds.tokenizer.len(), &examples, recon.as_ref())?;
    summ.model.save(&layout.summarizer(), cfg.summ_steps)?;
    ensure_dir(&layout.reports)?;
    let loss = layout.report("summ_loss.csv");
    write_report(&loss, &curve.to_csv(), &meta(cfg, "summ_loss.csv", vec![]))?;
    Ok(vec![layout.summarizer(), loss])
}

/// `generate`: summaries for the test split.
pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let anchors = load_anchor_map(&layout)?;
    let summ = load_summarizer(cfg, &layout)?;
    let examples = examples_for(&summ, &ds, &ds.split.test, &anchors, InputMode::Bucketed, cfg.seed)?;
    let records = generate_summaries(&summ, &examples, &ds.tokenizer, cfg.max_summary_len)?;
    ensure_dir(&layout.reports)?;
    write_jsonl(&layout.summaries(), &records)?;
    Ok(vec![layout.summaries()])
}

/// `evaluate`: per-meeting ROUGE of the generated summaries plus a mean row.
pub fn evaluate_stage(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    require(&layout.summaries(), "generate")?;
    let records: Vec<SummaryRecord> = read_jsonl(&layout.summaries())?;
    let (mut rows, mean) = evaluate(&records, &ds)?;
    rows.push(RougeRow {
        meeting_id: "mean".into(),
        r1: mean.r1,
        r2: mean.r2,
        rl: mean.rl,
        rlsum: rows.iter().map(|r| r.rlsum).sum::<f64>() / rows.len().max(1) as f64,
    });
    Ok(vec![report_csv(cfg, &layout, "rouge.csv", &rows, vec![])?])
}

/// The ablation grid: random and sorted-quartile deletion, random and
/// high-frequency substitution at each configured ratio, per eval seed.
pub fn ablation_specs(cfg: &ExperimentConfig) -> Vec<AblationSpec> {
    let mut specs = Vec::new();
    for &seed in &cfg.eval_seeds {
        for q in 0..4 {
            specs.push(AblationSpec {
                mode: AblationMode::DeleteSortedFraction {
                    lo: q as f64 / 4.0,
                    hi: (q + 1) as f64 / 4.0,
                },
                ratio: 0.0,
                seed,
            });
        }
        for &ratio in &cfg.ablation_ratios {
            for mode in [
                AblationMode::DeleteRandom,
                AblationMode::SubstituteRandom,
                AblationMode::SubstituteHighFrequency,
            ] {
                specs.push(AblationSpec { mode, ratio, seed });
            }
        }
    }
    specs
}

/// `ablate`: anchor ablations and truncation baselines on the test split.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let anchors = load_anchor_map(&layout)?;
    let summ = load_summarizer(cfg, &layout)?;
    let train_docs: Vec<Vec<TokenId>> = ds.subset(&ds.split.train)?.iter().map(|t| t.flat_tokens()).collect();
    let pool = high_frequency_pool(train_docs.iter().map(Vec::as_slice), 50);
    let retrain = cfg.ablation_retrain.then_some(ds.split.train.as_slice());
    let test = &ds.split.test;

    let mut rows = Vec::new();
    let base = summarize_and_score(
        &summ,
        &examples_for(&summ, &ds, test, &anchors, InputMode::Bucketed, cfg.seed)?,
        &ds,
        cfg.max_summary_len,
    )?;
    rows.push(AblationRow {
        ablation: InputMode::Bucketed.label(),
        seed: cfg.seed,
        retrained: false,
        r1: base.r1,
        r2: base.r2,
        rl: base.rl,
    });
    for spec in ablation_specs(cfg) {
        rows.push(run_ablation(cfg, &summ, &ds, test, &anchors, &spec, &pool, retrain)?);
    }
    for side in TruncationSide::ALL {
        let mode = InputMode::Truncated(side);
        let model;
        let used = if cfg.ablation_retrain {
            let ex = examples_for(&summ, &ds, &ds.split.train, &anchors, mode, cfg.seed)?;
            model = train_summarizer(cfg, ds.tokenizer.len(), &ex, None)?.0;
            &model
        } else {
            &summ
        };
        let s = summarize_and_score(used, &examples_for(used, &ds, test, &anchors, mode, cfg.seed)?, &ds, cfg.max_summary_len)?;
        rows.push(AblationRow {
            ablation: mode.label(),
            seed: cfg.seed,
            retrained: cfg.ablation_retrain,
            r1: s.r1,
            r2: s.r2,
            rl: s.rl,
        });
    }
    let note = if cfg.ablation_retrain {
        "summarizer retrained per ablation"
    } else {
        "summarizer re-evaluated, not retrained, per ablation"
    };
    Ok(vec![report_csv(cfg, &layout, "ablation.csv", &rows, vec![note.into()])?])
}

/// `sweep`: anchor-ratio curves on the test split.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(cfg)?;
    let recon = load_reconstructor(&layout)?;
    let summ = load_summarizer(cfg, &layout)?;
    let rows = sweep_anchor_ratio(cfg, &recon, &summ, &ds, &ds.split.test, &cfg.sweep_ratios, &cfg.sweep_indicators)?;
    Ok(vec![report_csv(
        cfg,
        &layout,
        "sweep.csv",
        &rows,
        vec!["summarizer re-evaluated, not retrained, per point".into()],
    )?])
}

/// `bench`: complexity timings, a CSV of rows and a JSON summary.
pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let bc = BenchConfig {
        sizes: cfg.bench_sizes.clone(),
        budget: cfg.buckets.min(*cfg.bench_sizes.first().unwrap_or(&cfg.buckets)).max(16),
        d_model: cfg.d_model,
        repeats: cfg.bench_repeats,
        seed: cfg.seed,
        ..BenchConfig::default()
    };
    let report = benchmark_complexity(&bc)?;
    for a in &report.advice {
        log::warn!("{a}");
    }
    let notes = vec![
        format!("uncompressed_exponent={:.4}", report.uncompressed_exponent),
        format!("compressed_exponent={:.4}", report.compressed_exponent),
        format!("compressed_max_ratio={:.4}", report.compressed_max_ratio),
        format!(
            "machine: {} core(s), {}/{}, {}",
            report.machine.cores, report.machine.os, report.machine.arch, report.machine.frequency_note
        ),
    ];
    let csv = report_csv(cfg, &layout, "bench.csv", &report.rows, notes)?;
    let summary = layout.report("bench_summary.json");
    write_atomic(&summary, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(vec![csv, summary])
}

/// Runs every stage except the benchmark, in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !Layout::new(cfg).transcripts().exists() {
        out.extend(synth_data(cfg)?);
    }
    out.extend(preprocess(cfg)?);
    out.extend(train_recon(cfg)?);
    out.extend(score(cfg)?);
    out.extend(train_summ(cfg)?);
    out.extend(generate(cfg)?);
    out.extend(evaluate_stage(cfg)?);
    Ok(out)
}
