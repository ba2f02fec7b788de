use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use sentiment_core::bench::{bench_table, run_bench, write_bench_csv, BenchConfig};
use sentiment_core::checkpoint::{Checkpoint, Model};
use sentiment_core::dualchannel::{self, FusionModel};
use sentiment_core::embeddings::{load_glove, EmbeddingMatrix};
use sentiment_core::optim::{GradCheckConfig, GradCheckReport};
use sentiment_core::rae::{self, greedy_build_tree, sentence_leaves, RaeParams};
use sentiment_core::textdata::{
    bundled_toy_corpus, load_corpus, make_splits, tokenize, LabeledCorpus, Split, SplitSpec,
};

use crate::config::{EmbeddingSource, ModelFamily, RunConfig};

pub fn output_file(config: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok(config.output_dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn corpus(config: &RunConfig) -> Result<LabeledCorpus> {
    let corpus = match (config.dataset.format.corpus_format(), &config.dataset.path) {
        (None, _) => bundled_toy_corpus(),
        (Some(format), Some(path)) => {
            let mut c = load_corpus(path, format)?;
            if config.dataset.min_count > 1 {
                let texts = c
                    .examples
                    .iter()
                    .map(|e| (e.raw_text.clone(), e.label))
                    .collect();
                let rebuilt = LabeledCorpus::from_texts(
                    c.name.clone(),
                    texts,
                    c.num_classes,
                    config.dataset.min_count,
                )?;
                c = c.with_vocab(&rebuilt.vocab);
            }
            c
        }
        (Some(_), None) => bail!("dataset.path is required"),
    };
    let corpus = match config.dataset.sample {
        Some(n) if n < corpus.len() => corpus.sample(n, config.seed),
        _ => corpus,
    };
    let stats = corpus.stats();
    info!(
        "corpus {}: {} examples, mean length {:.1}, labels {:?}",
        corpus.name, stats.size, stats.average_length, stats.label_counts
    );
    Ok(corpus)
}

pub fn embeddings(
    config: &RunConfig,
    corpus: &LabeledCorpus,
    dim: usize,
) -> Result<EmbeddingMatrix<f64>> {
    let mut emb = match config.embeddings.source {
        EmbeddingSource::Random => {
            EmbeddingMatrix::init_gaussian(corpus.vocab.len(), dim, config.seed)
        }
        EmbeddingSource::Glove => {
            let path = config
                .embeddings
                .glove_file(dim)
                .context("embeddings.glove_path is required for glove embeddings")?;
            load_glove(&path, &corpus.vocab, dim, config.seed)?.embeddings
        }
    };
    emb.trainable = config.embeddings.trainable;
    Ok(emb)
}

#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub family: ModelFamily,
    pub variant: Option<String>,
    pub dim: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains the configured model, streaming one metrics line per epoch (or
/// L-BFGS iteration) into `metrics`.
pub fn fit(
    config: &RunConfig,
    train: &LabeledCorpus,
    emb: EmbeddingMatrix<f64>,
    metrics: &mut dyn Write,
) -> Result<(Model<f64>, usize, f64)> {
    match config.model {
        ModelFamily::Fusion => {
            let mut model =
                FusionModel::new(config.fusion_config(train.num_classes), emb, config.seed)?;
            let mut sink_err = None;
            let history =
                dualchannel::train_fusion(&mut model, train, &config.fusion_train(), |record| {
                    if sink_err.is_none() {
                        if let Err(e) = serde_json::to_writer(&mut *metrics, record)
                            .map_err(anyhow::Error::from)
                            .and_then(|_| Ok(writeln!(metrics)?))
                        {
                            sink_err = Some(e);
                        }
                    }
                })?;
            if let Some(e) = sink_err {
                return Err(e.context("writing metrics"));
            }
            let loss = history.final_loss().unwrap_or(f64::NAN);
            Ok((Model::Fusion(model), history.epochs.len(), loss))
        }
        ModelFamily::Rae => {
            let mut p = RaeParams::new(emb, config.rae_hyper(train.num_classes), config.seed)?;
            let outcome = rae::train_lbfgs(&mut p, train, &config.rae.lbfgs)?;
            for entry in &outcome.trace {
                serde_json::to_writer(&mut *metrics, entry)?;
                writeln!(metrics)?;
            }
            info!(
                "l-bfgs stopped after {} iterations: {:?}",
                outcome.iterations, outcome.stop
            );
            Ok((Model::Rae(p), outcome.iterations, outcome.f))
        }
    }
}

fn checkpoint(model: &Model<f64>, corpus: &LabeledCorpus) -> Checkpoint {
    match model {
        Model::Rae(p) => Checkpoint::from_rae(p, &corpus.vocab),
        Model::Fusion(m) => Checkpoint::from_fusion(m, &corpus.vocab),
    }
}

/// Train/test split: the corpus's own fixed split, otherwise the first of
/// `folds` cross-validation folds held out.
pub fn holdout(config: &RunConfig, corpus: &LabeledCorpus) -> Result<Split> {
    let spec = match &corpus.split_spec {
        fixed @ SplitSpec::Fixed { .. } => fixed.clone(),
        SplitSpec::CrossValidation { .. } => SplitSpec::CrossValidation {
            k: config.folds,
            seed: config.seed,
        },
    };
    Ok(make_splits(corpus, &spec)?.swap_remove(0))
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub classes: Vec<ClassReport>,
}

pub fn evaluate(model: &Model<f64>, corpus: &LabeledCorpus) -> Result<EvalReport> {
    if corpus.is_empty() {
        bail!("cannot evaluate on an empty dataset");
    }
    let k = model.num_classes();
    let predictions: Vec<usize> = corpus
        .examples
        .par_iter()
        .map(|e| model.predict(&e.tokens))
        .collect::<Result<_, _>>()?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, e) in predictions.iter().zip(&corpus.examples) {
        if e.label >= k {
            bail!("label {} exceeds the model's {k} classes", e.label);
        }
        confusion[e.label][*p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let classes = (0..k)
        .map(|c| {
            let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            ClassReport {
                class: c,
                precision: ratio(confusion[c][c], predicted),
                recall: ratio(confusion[c][c], support),
                support,
            }
        })
        .collect();
    Ok(EvalReport {
        examples: corpus.len(),
        accuracy: correct as f64 / corpus.len() as f64,
        classes,
    })
}

fn accuracy(model: &Model<f64>, corpus: &LabeledCorpus) -> Result<f64> {
    Ok(evaluate(model, corpus)?.accuracy)
}

fn variant_name(config: &RunConfig) -> Option<String> {
    (config.model == ModelFamily::Fusion).then(|| config.variant.to_string())
}

fn fit_and_score(
    config: &RunConfig,
    corpus: &LabeledCorpus,
    split: &Split,
    dim: usize,
    metrics: &mut dyn Write,
) -> Result<(Model<f64>, FitSummary)> {
    let train = corpus.subset(&split.train);
    let test = (!split.test.is_empty()).then(|| corpus.subset(&split.test));
    let emb = embeddings(config, corpus, dim)?;
    let (model, steps, final_loss) = fit(config, &train, emb, metrics)?;
    let summary = FitSummary {
        family: config.model,
        variant: variant_name(config),
        dim,
        train_examples: train.len(),
        test_examples: test.as_ref().map_or(0, LabeledCorpus::len),
        steps,
        final_loss,
        train_accuracy: accuracy(&model, &train)?,
        test_accuracy: test.as_ref().map(|t| accuracy(&model, t)).transpose()?,
    };
    Ok((model, summary))
}

pub fn train(config: &RunConfig) -> Result<FitSummary> {
    let corpus = corpus(config)?;
    let split = holdout(config, &corpus)?;
    fs::write(output_file(config, "config.toml")?, config.to_toml())?;
    let metrics_path = output_file(config, "metrics.jsonl")?;
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let (model, summary) =
        fit_and_score(config, &corpus, &split, config.embeddings.dim, &mut metrics)?;
    metrics.flush()?;
    checkpoint(&model, &corpus).save(output_file(config, "checkpoint.json")?)?;
    write_json(&output_file(config, "summary.json")?, &summary)?;
    println!(
        "train accuracy {:.4}  test accuracy {}  ({} steps, final loss {:.6})",
        summary.train_accuracy,
        summary
            .test_accuracy
            .map_or("-".into(), |a| format!("{a:.4}")),
        summary.steps,
        summary.final_loss
    );
    println!("outputs written to {}", config.output_dir.display());
    Ok(summary)
}

pub fn eval(config: &RunConfig, checkpoint_path: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let model = ckpt.to_model::<f64>()?;
    let data = corpus(config)?.with_vocab(&ckpt.vocab);
    if data.num_classes != model.num_classes() {
        bail!(
            "dataset has {} classes but the checkpoint model has {}",
            data.num_classes,
            model.num_classes()
        );
    }
    let report = evaluate(&model, &data)?;
    println!(
        "accuracy {:.4} on {} examples",
        report.accuracy, report.examples
    );
    println!(
        "{:>5}  {:>9}  {:>9}  {:>7}",
        "class", "precision", "recall", "support"
    );
    for c in &report.classes {
        println!(
            "{:>5}  {:>9.4}  {:>9.4}  {:>7}",
            c.class, c.precision, c.recall, c.support
        );
    }
    write_json(&output_file(config, "eval.json")?, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub folds: Vec<FitSummary>,
    pub mean_accuracy: f64,
    pub stddev_accuracy: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cv(config: &RunConfig) -> Result<CvReport> {
    let corpus = corpus(config)?;
    let splits = make_splits(
        &corpus,
        &SplitSpec::CrossValidation {
            k: config.folds,
            seed: config.seed,
        },
    )?;
    fs::write(output_file(config, "config.toml")?, config.to_toml())?;
    let run_fold = |(i, split): (usize, &Split)| -> Result<FitSummary> {
        let path = output_file(config, &format!("fold-{i}.metrics.jsonl"))?;
        let mut metrics = BufWriter::new(File::create(&path)?);
        let (_, summary) =
            fit_and_score(config, &corpus, split, config.embeddings.dim, &mut metrics)?;
        metrics.flush()?;
        info!(
            "fold {i}: test accuracy {:.4}",
            summary.test_accuracy.unwrap_or(f64::NAN)
        );
        Ok(summary)
    };
    let folds: Vec<FitSummary> = if config.parallel_folds {
        splits
            .par_iter()
            .enumerate()
            .map(run_fold)
            .collect::<Result<_>>()?
    } else {
        splits
            .iter()
            .enumerate()
            .map(run_fold)
            .collect::<Result<_>>()?
    };
    let accs: Vec<f64> = folds
        .iter()
        .map(|f| f.test_accuracy.unwrap_or(0.0))
        .collect();
    let (mean_accuracy, stddev_accuracy) = mean_std(&accs);

    let mut csv = csv::Writer::from_path(output_file(config, "cv.csv")?)?;
    csv.write_record(["fold", "accuracy"])?;
    println!("{:>6}  {:>8}", "fold", "accuracy");
    for (i, a) in accs.iter().enumerate() {
        csv.write_record([i.to_string(), a.to_string()])?;
        println!("{i:>6}  {a:>8.4}");
    }
    csv.write_record(["mean".to_string(), mean_accuracy.to_string()])?;
    csv.flush()?;
    println!("{:>6}  {mean_accuracy:>8.4} ± {stddev_accuracy:.4}", "mean");
    let report = CvReport {
        folds,
        mean_accuracy,
        stddev_accuracy,
    };
    write_json(&output_file(config, "cv.json")?, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub dim: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn sweep_dim(config: &RunConfig, dims: &[usize]) -> Result<Vec<SweepRow>> {
    let corpus = corpus(config)?;
    let split = holdout(config, &corpus)?;
    let mut rows = Vec::new();
    for &dim in dims {
        if config.embeddings.source == EmbeddingSource::Glove {
            match config.embeddings.glove_file(dim) {
                Some(p) if p.exists() => {}
                other => {
                    warn!(
                        "skipping dimension {dim}: no embedding file{}",
                        other
                            .map(|p| format!(" at {}", p.display()))
                            .unwrap_or_default()
                    );
                    continue;
                }
            }
        }
        let path = output_file(config, &format!("sweep-{dim}.metrics.jsonl"))?;
        let mut metrics = BufWriter::new(File::create(&path)?);
        let (_, s) = fit_and_score(config, &corpus, &split, dim, &mut metrics)?;
        metrics.flush()?;
        rows.push(SweepRow {
            dim,
            train_accuracy: s.train_accuracy,
            test_accuracy: s.test_accuracy.unwrap_or(f64::NAN),
        });
    }
    let mut csv = csv::Writer::from_path(output_file(config, "sweep.csv")?)?;
    println!("{:>5}  {:>9}  {:>9}", "dim", "train", "test");
    for r in &rows {
        csv.serialize(r)?;
        println!(
            "{:>5}  {:>9.4}  {:>9.4}",
            r.dim, r.train_accuracy, r.test_accuracy
        );
    }
    csv.flush()?;
    Ok(rows)
}

pub fn gradcheck(config: &RunConfig) -> Result<GradCheckReport> {
    let full = corpus(config)?;
    let n = config.gradcheck.sentences.min(full.len());
    let small = full.sample(n, config.seed);
    let emb = embeddings(config, &full, config.embeddings.dim)?;
    let check = GradCheckConfig::default();
    let samples = config.gradcheck.samples;
    let report = match config.model {
        ModelFamily::Rae => {
            let p = RaeParams::new(emb, config.rae_hyper(full.num_classes), config.seed)?;
            rae::check_gradient(&small, &p, samples, config.seed, &check)?
        }
        ModelFamily::Fusion => {
            let m = FusionModel::new(config.fusion_config(full.num_classes), emb, config.seed)?;
            dualchannel::check_gradient(&m, &small, samples, config.seed, &check)?
        }
    };
    println!("{report}");
    fs::write(output_file(config, "gradcheck.json")?, report.to_json()?)?;
    if !report.passed() {
        bail!(
            "gradient check flagged {} coordinates",
            report.flagged.len()
        );
    }
    Ok(report)
}

pub fn tree(config: &RunConfig, sentence: &str, checkpoint_path: Option<&Path>) -> Result<String> {
    let words = tokenize(sentence);
    if words.is_empty() {
        bail!("the sentence has no tokens");
    }
    let (p, vocab) = match checkpoint_path {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            match ckpt.to_model::<f64>()? {
                Model::Rae(p) => (p, ckpt.vocab),
                Model::Fusion(_) => bail!(
                    "{} holds a fusion model; trees need an RAE checkpoint",
                    path.display()
                ),
            }
        }
        None => {
            let corpus = corpus(config)?;
            let emb = embeddings(config, &corpus, config.embeddings.dim)?;
            (
                RaeParams::new(emb, config.rae_hyper(corpus.num_classes), config.seed)?,
                corpus.vocab,
            )
        }
    };
    let tokens: Vec<usize> = words.iter().map(|w| vocab.index(w)).collect();
    let tree = greedy_build_tree(&sentence_leaves(&tokens, &p)?, &p)?;
    let rendered = tree.render(&words);
    println!("{rendered}");
    Ok(rendered)
}

pub fn bench(config: &RunConfig) -> Result<()> {
    let corpus = corpus(config)?;
    let bench_config = BenchConfig {
        model: config.fusion_config(corpus.num_classes),
        embedding_dim: config.embeddings.dim,
        epochs: config.bench.epochs,
        warmup: config.bench.warmup,
        batch: config.fusion.batch,
        lr: config.fusion.lr,
        seed: config.seed,
    };
    let results = run_bench(&corpus, &config.bench.variants, &bench_config)?;
    print!("{}", bench_table(&results));
    write_bench_csv(&results, File::create(output_file(config, "bench.csv")?)?)?;
    write_json(&output_file(config, "bench.json")?, &results)?;
    Ok(())
}
