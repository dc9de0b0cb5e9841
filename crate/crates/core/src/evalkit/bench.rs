//! Wall-clock scaling of uncompressed attention, compressed attention and
//! the reconstruction pass.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::rpb::{assign_buckets, compress_sequence};
use crate::seq2seq::{cross_attention, ModelConfig, Seq2Seq};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Input lengths `n`, ascending.
    pub sizes: Vec<usize>,
    pub budget: usize,
    /// Reconstruction pairs `r`.
    pub pairs: usize,
    /// Reconstruction context length.
    pub context_len: usize,
    pub d_model: usize,
    pub repeats: usize,
    /// Coefficient of variation above which a rerun is advised.
    pub max_cv: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 512, 1024, 2048],
            budget: 128,
            pairs: 8,
            context_len: 96,
            d_model: 64,
            repeats: 5,
            max_cv: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub n: usize,
    /// Fastest of the repeats.
    pub seconds: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cores: usize,
    pub arch: String,
    pub os: String,
    pub frequency_note: String,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let mhz = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("cpu MHz"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| format!("{} MHz reported, boost/scaling not controlled", v.trim()))
            })
            .unwrap_or_else(|| "unknown; frequency scaling not controlled".into());
        MachineInfo {
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            frequency_note: mhz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub machine: MachineInfo,
    pub rows: Vec<BenchRow>,
    /// Fitted exponent of uncompressed attention time in `n`.
    pub uncompressed_exponent: f64,
    pub compressed_exponent: f64,
    /// Largest time ratio of compressed attention between consecutive sizes.
    pub compressed_max_ratio: f64,
    pub advice: Vec<String>,
}

impl BenchReport {
    pub fn rows_csv(&self) -> Result<String> {
        super::report::to_csv(&self.rows)
    }
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn fit_power_law(ns: &[usize], ts: &[f64]) -> Result<f64> {
    if ns.len() != ts.len() || ns.len() < 2 {
        return Err(Error::InvalidArgument("power-law fit needs two or more points".into()));
    }
    if ts.iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidArgument("non-positive timing".into()));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * 0.1)
}

/// Fastest time over `repeats` runs, and the coefficient of variation.
fn time_it(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    f()?;
    let mut ts = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        ts.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    let mean = ts.iter().sum::<f64>() / ts.len() as f64;
    let var = ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / ts.len() as f64;
    let min = ts.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, var.sqrt() / mean))
}

/// Times (a) reconstruction over `r` pairs, (b) attention over the `c`
/// pooled buckets, (c) attention over all `n` tokens, and fits exponents.
///
/// Pooling is excluded from the compressed timer; only the attention over
/// the compressed sequence is measured.
pub fn benchmark_complexity(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.len() < 2 || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sizes must be two or more ascending lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let mut rows = Vec::new();
    let mut push = |stage: &str, n: usize, (seconds, cv): (f64, f64)| {
        rows.push(BenchRow {
            stage: stage.into(),
            n,
            seconds,
            cv,
        })
    };

    for &n in &cfg.sizes {
        let x = random_mat(&mut rng, n, d);
        push(
            "uncompressed_attention",
            n,
            time_it(cfg.repeats, || cross_attention(&x, &x, &x).map(drop))?,
        );

        let n_anchors = ((0.064 * n as f64).round() as usize).clamp(1, cfg.budget / 4);
        let mut anchors: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_anchors).into_vec();
        anchors.sort_unstable();
        let assignment = assign_buckets(n, &anchors, cfg.budget)?;
        let pooled = compress_sequence(x.view(), &assignment)?.embeddings;
        push(
            "compressed_attention",
            n,
            time_it(cfg.repeats, || cross_attention(&pooled, &pooled, &pooled).map(drop))?,
        );
    }

    let mut mc = ModelConfig::new(64).with_width(d.min(64), 4);
    mc.n_layers = 1;
    mc.seed = cfg.seed;
    let model = Seq2Seq::new(mc)?;
    let samples: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..cfg.pairs)
        .map(|_| {
            let ctx = (0..cfg.context_len).map(|_| rng.gen_range(4..64)).collect();
            let resp = (0..12).map(|_| rng.gen_range(4..64)).collect();
            (ctx, resp)
        })
        .collect();
    push(
        "reconstruction",
        cfg.pairs * cfg.context_len,
        time_it(cfg.repeats.min(3), || {
            for (i, (c, r)) in samples.iter().enumerate() {
                model.forward_teacher_forced(i, c, r)?.backward_scaled_attention()?;
            }
            Ok(())
        })?,
    );

    let series = |stage: &str| -> Vec<f64> {
        rows.iter().filter(|r| r.stage == stage).map(|r| r.seconds).collect()
    };
    let unc = series("uncompressed_attention");
    let comp = series("compressed_attention");
    let uncompressed_exponent = fit_power_law(&cfg.sizes, &unc)?;
    let compressed_exponent = fit_power_law(&cfg.sizes, &comp)?;
    let compressed_max_ratio = comp
        .windows(2)
        .map(|w| (w[1] / w[0]).max(w[0] / w[1]))
        .fold(1.0, f64::max);
    let advice = rows
        .iter()
        .filter(|r| r.cv > cfg.max_cv)
        .map(|r| {
            format!(
                "{} at n={} has cv {:.2} > {:.2}; rerun on an idle machine or raise repeats",
                r.stage, r.n, r.cv, cfg.max_cv
            )
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        machine: MachineInfo::detect(),
        rows,
        uncompressed_exponent,
        compressed_exponent,
        compressed_max_ratio,
        advice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_recovers_exponent() {
        let ns = [100, 200, 400, 800];
        let ts: Vec<f64> = ns.iter().map(|&n| 3e-9 * (n as f64).powf(2.0)).collect();
        assert!((fit_power_law(&ns, &ts).unwrap() - 2.0).abs() < 1e-12);
        assert!(fit_power_law(&ns[..1], &ts[..1]).is_err());
    }

    #[test]
    fn small_benchmark_runs() {
        let cfg = BenchConfig {
            sizes: vec![64, 128],
            budget: 32,
            pairs: 2,
            context_len: 16,
            d_model: 16,
            repeats: 2,
            ..BenchConfig::default()
        };
        let r = benchmark_complexity(&cfg).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.machine.cores >= 1);
        assert!(r.rows_csv().unwrap().starts_with("stage,n,seconds,cv\n"));
    }
}
