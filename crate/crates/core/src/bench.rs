//! Per-epoch training time of each fusion variant under one configuration.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::dualchannel::{train_fusion, FusionConfig, FusionModel, FusionTrainConfig, Variant};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::textdata::LabeledCorpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Architecture shared by every variant; the variant field is ignored.
    pub model: FusionConfig,
    pub embedding_dim: usize,
    /// Timed epochs, after `warmup` untimed ones.
    pub epochs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: FusionConfig::default(),
            embedding_dim: 50,
            epochs: 3,
            warmup: 1,
            batch: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 || self.warmup < 1 {
            return Err(Error::InvalidArgument(
                "benchmarks need at least one warmup and two timed epochs".into(),
            ));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub n: usize,
    pub d: usize,
    pub corpus: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: Variant,
    pub epochs: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    pub tokens_per_sec: f64,
    pub final_loss: f64,
    pub fingerprint: Fingerprint,
    /// Set when the variant failed to train; timings are then zero.
    pub error: Option<String>,
}

fn stats(times: &[f64]) -> (f64, f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, median, var.sqrt())
}

fn bench_variant(
    corpus: &LabeledCorpus,
    variant: Variant,
    config: &BenchConfig,
) -> Result<BenchResult> {
    let model_config = FusionConfig {
        variant,
        ..config.model.clone()
    };
    let embeddings = EmbeddingMatrix::<f64>::init_gaussian(
        corpus.vocab.len(),
        config.embedding_dim,
        config.seed,
    );
    let mut model = FusionModel::new(model_config, embeddings, config.seed)?;
    let train = FusionTrainConfig {
        epochs: config.warmup + config.epochs,
        batch: config.batch,
        lr: config.lr,
        seed: config.seed,
        parallel: false,
        ..FusionTrainConfig::default()
    };
    let history = train_fusion(&mut model, corpus, &train, |_| {})?;
    let timed: Vec<f64> = history.epochs[config.warmup..]
        .iter()
        .map(|e| e.millis.max(1e-9))
        .collect();
    let (mean_ms, median_ms, stddev_ms) = stats(&timed);
    let tokens = history.epochs[0].tokens as f64;
    Ok(BenchResult {
        variant,
        epochs: timed.len(),
        mean_ms,
        median_ms,
        stddev_ms,
        tokens_per_sec: tokens / (mean_ms / 1e3),
        final_loss: history.final_loss().unwrap_or(f64::NAN),
        fingerprint: fingerprint(corpus, config),
        error: None,
    })
}

fn fingerprint(corpus: &LabeledCorpus, config: &BenchConfig) -> Fingerprint {
    Fingerprint {
        n: config.embedding_dim,
        d: config.model.hidden,
        corpus: corpus.len(),
        seed: config.seed,
    }
}

/// Trains each variant in turn (single-threaded) and times every epoch
/// after the warmup. Successful results come first, fastest first; a
/// variant that fails is reported with its error.
pub fn run_bench(
    corpus: &LabeledCorpus,
    variants: &[Variant],
    config: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    config.validate()?;
    let mut results: Vec<BenchResult> = variants
        .iter()
        .map(|&v| {
            bench_variant(corpus, v, config).unwrap_or_else(|e| BenchResult {
                variant: v,
                epochs: 0,
                mean_ms: 0.0,
                median_ms: 0.0,
                stddev_ms: 0.0,
                tokens_per_sec: 0.0,
                final_loss: f64::NAN,
                fingerprint: fingerprint(corpus, config),
                error: Some(e.to_string()),
            })
        })
        .collect();
    results.sort_by(|a, b| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(a.mean_ms.total_cmp(&b.mean_ms))
    });
    Ok(results)
}

/// Aligned `model | time/ms` table.
pub fn bench_table(results: &[BenchResult]) -> String {
    let mut out = format!(
        "{:<12}  {:>12}  {:>10}  {:>12}\n",
        "model", "time/ms", "stddev", "tokens/s"
    );
    for r in results {
        match &r.error {
            None => writeln!(
                out,
                "{:<12}  {:>12.1}  {:>10.1}  {:>12.0}",
                r.variant.label(),
                r.mean_ms,
                r.stddev_ms,
                r.tokens_per_sec
            ),
            Some(e) => writeln!(out, "{:<12}  failed: {e}", r.variant.label()),
        }
        .expect("writing to a String");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCsvRow {
    pub variant: Variant,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    pub tokens_per_sec: f64,
    pub n: usize,
    pub d: usize,
    pub corpus: usize,
    pub seed: u64,
}

impl From<&BenchResult> for BenchCsvRow {
    fn from(r: &BenchResult) -> Self {
        Self {
            variant: r.variant,
            mean_ms: r.mean_ms,
            median_ms: r.median_ms,
            stddev_ms: r.stddev_ms,
            tokens_per_sec: r.tokens_per_sec,
            n: r.fingerprint.n,
            d: r.fingerprint.d,
            corpus: r.fingerprint.corpus,
            seed: r.fingerprint.seed,
        }
    }
}

/// CSV of the successful results; failed variants are omitted.
pub fn write_bench_csv<W: io::Write>(results: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let rows = results
        .iter()
        .filter(|r| r.error.is_none())
        .map(BenchCsvRow::from);
    let mut any = false;
    for row in rows {
        w.serialize(row)?;
        any = true;
    }
    if !any {
        w.write_record([
            "variant",
            "mean_ms",
            "median_ms",
            "stddev_ms",
            "tokens_per_sec",
            "n",
            "d",
            "corpus",
            "seed",
        ])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })
}
