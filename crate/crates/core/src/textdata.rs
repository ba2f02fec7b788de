//! Tokenization, vocabularies, labeled corpora and train/test splits.
//!
//! Two on-disk layouts are supported:
//!
//! * two-file polarity: `<stem>.pos` and `<stem>.neg`, one sentence per line
//!   (labels 1 and 0);
//! * labeled TSV: `label<TAB>sentence` lines, either a single file or a
//!   fixed split stored as `<stem>.train.tsv`, optional `<stem>.dev.tsv`, and
//!   `<stem>.test.tsv`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_INDEX: usize = 0;
pub const DEFAULT_CV_FOLDS: usize = 10;

const TOY_POS: &str = include_str!("../data/toy.pos");
const TOY_NEG: &str = include_str!("../data/toy.neg");

/// Lowercases, splits on whitespace, and splits every punctuation character
/// off into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Bijective token/index map with the unknown token at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Indexes every token seen at least `min_count` times, most frequent
    /// first and lexicographically within equal counts.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument(
                "min_count must be at least 1".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::InvalidArgument(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: the unknown token is present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unknown tokens map to [`UNK_INDEX`].
    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.index(t)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub raw_text: String,
    /// Unlabeled examples contribute reconstruction error only.
    pub labeled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    TwoFilePolarity,
    LabeledTsv,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-file-polarity" => Ok(Self::TwoFilePolarity),
            "labeled-tsv" => Ok(Self::LabeledTsv),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format {other:?}"
            ))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoFilePolarity => "two-file-polarity",
            Self::LabeledTsv => "labeled-tsv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitSpec {
    CrossValidation {
        k: usize,
        seed: u64,
    },
    Fixed {
        train: Vec<usize>,
        dev: Vec<usize>,
        test: Vec<usize>,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::CrossValidation {
            k: DEFAULT_CV_FOLDS,
            seed: 0,
        }
    }
}

/// One train/test round over corpus indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub size: usize,
    /// Mean token count under [`tokenize`].
    pub average_length: f64,
    pub label_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub name: String,
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub vocab: Vocabulary,
    pub split_spec: SplitSpec,
}

impl LabeledCorpus {
    /// Builds a corpus (and its vocabulary) from `(text, label)` pairs.
    /// Texts without any token are dropped.
    pub fn from_texts(
        name: impl Into<String>,
        texts: Vec<(String, usize)>,
        num_classes: usize,
        min_count: usize,
    ) -> Result<Self> {
        let vocab = Vocabulary::build(texts.iter().map(|(t, _)| t.as_str()), min_count)?;
        Self::with_vocab_from_texts(name, texts, num_classes, vocab)
    }

    fn with_vocab_from_texts(
        name: impl Into<String>,
        texts: Vec<(String, usize)>,
        num_classes: usize,
        vocab: Vocabulary,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let mut examples = Vec::with_capacity(texts.len());
        for (raw_text, label) in texts {
            if label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            let tokens = vocab.encode(&raw_text);
            if tokens.is_empty() {
                continue;
            }
            examples.push(LabeledExample {
                tokens,
                label,
                raw_text,
                labeled: true,
            });
        }
        Ok(Self {
            name: name.into(),
            examples,
            num_classes,
            vocab,
            split_spec: SplitSpec::default(),
        })
    }

    /// Re-encodes every example against another vocabulary (for instance one
    /// stored in a checkpoint).
    pub fn with_vocab(&self, vocab: &Vocabulary) -> Self {
        let examples = self
            .examples
            .iter()
            .map(|e| LabeledExample {
                tokens: vocab.encode(&e.raw_text),
                ..e.clone()
            })
            .collect();
        Self {
            examples,
            vocab: vocab.clone(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Corpus restricted to `indices`, in that order; the vocabulary is kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            vocab: self.vocab.clone(),
            split_spec: SplitSpec::default(),
        }
    }

    /// First `n` examples after a seeded shuffle, keeping the vocabulary.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.subset(&idx)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut label_counts = vec![0; self.num_classes];
        let mut tokens = 0usize;
        for e in &self.examples {
            label_counts[e.label] += 1;
            tokens += e.tokens.len();
        }
        CorpusStats {
            size: self.len(),
            average_length: if self.is_empty() {
                0.0
            } else {
                tokens as f64 / self.len() as f64
            },
            label_counts,
        }
    }

    /// Writes `label<TAB>sentence` lines.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&format!("{}\t{}\n", e.label, one_line(&e.raw_text)));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.pos` / `<stem>.neg`; binary corpora only.
    pub fn write_two_file(&self, stem: impl AsRef<Path>) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::InvalidArgument(
                "two-file layout needs exactly two classes".into(),
            ));
        }
        let stem = stem.as_ref();
        for (ext, label) in [("pos", 1), ("neg", 0)] {
            let path = with_suffix(stem, ext);
            let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for e in self.examples.iter().filter(|e| e.label == label) {
                writeln!(file, "{}", one_line(&e.raw_text)).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn corpus_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads a corpus and builds its vocabulary (min count 1).
///
/// For [`CorpusFormat::TwoFilePolarity`] `path` is the stem shared by the
/// `.pos` and `.neg` files. For [`CorpusFormat::LabeledTsv`] it is either a
/// single file (cross-validated) or the stem of a fixed train/dev/test split.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let name = corpus_name(path);
    match format {
        CorpusFormat::TwoFilePolarity => {
            let mut texts = Vec::new();
            for (ext, label) in [("neg", 0), ("pos", 1)] {
                let file = with_suffix(path, ext);
                let content = read_lossy(&file)?;
                texts.extend(
                    content
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| (l.trim().to_string(), label)),
                );
            }
            LabeledCorpus::from_texts(name, texts, 2, 1)
        }
        CorpusFormat::LabeledTsv if path.is_file() => {
            let rows = read_tsv(path)?;
            let classes = class_count(&rows);
            LabeledCorpus::from_texts(name, rows, classes, 1)
        }
        CorpusFormat::LabeledTsv => {
            let train_path = with_suffix(path, "train.tsv");
            let dev_path = with_suffix(path, "dev.tsv");
            let test_path = with_suffix(path, "test.tsv");
            if !train_path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!(
                            "neither a file nor a split stem with {}",
                            train_path.display()
                        ),
                    ),
                ));
            }
            let train = read_tsv(&train_path)?;
            let dev = if dev_path.is_file() {
                read_tsv(&dev_path)?
            } else {
                Vec::new()
            };
            let test = read_tsv(&test_path)?;
            let (n_train, n_dev, n_test) = (train.len(), dev.len(), test.len());
            let rows: Vec<(String, usize)> = train.into_iter().chain(dev).chain(test).collect();
            let classes = class_count(&rows);
            let mut corpus = LabeledCorpus::from_texts(name, rows, classes, 1)?;
            if corpus.len() != n_train + n_dev + n_test {
                return Err(Error::InvalidArgument(
                    "fixed-split corpus contains sentences without tokens".into(),
                ));
            }
            corpus.split_spec = SplitSpec::Fixed {
                train: (0..n_train).collect(),
                dev: (n_train..n_train + n_dev).collect(),
                test: (n_train + n_dev..n_train + n_dev + n_test).collect(),
            };
            Ok(corpus)
        }
    }
}

fn class_count(rows: &[(String, usize)]) -> usize {
    rows.iter().map(|(_, l)| l + 1).max().unwrap_or(0).max(2)
}

fn parse_label(token: &str) -> Option<usize> {
    match token.trim().to_ascii_lowercase().as_str() {
        "pos" | "positive" => Some(1),
        "neg" | "negative" => Some(0),
        t => t.parse().ok(),
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(String, usize)>> {
    let content = read_lossy(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected label<TAB>sentence".into()))?;
        let label =
            parse_label(label).ok_or_else(|| parse_err(format!("unknown label {label:?}")))?;
        rows.push((text.trim().to_string(), label));
    }
    Ok(rows)
}

/// Train/test rounds for `spec`.
///
/// Cross-validation shuffles with the seed and deals the indices into `k`
/// contiguous folds whose sizes differ by at most one; round `i` tests on
/// fold `i`.
pub fn make_splits(corpus: &LabeledCorpus, spec: &SplitSpec) -> Result<Vec<Split>> {
    match spec {
        SplitSpec::CrossValidation { k, seed } => {
            let n = corpus.len();
            if *k < 2 {
                return Err(Error::InvalidArgument(format!(
                    "cross-validation needs k >= 2, got {k}"
                )));
            }
            if *k > n {
                return Err(Error::InvalidArgument(format!(
                    "cannot make {k} folds from {n} examples"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let (base, extra) = (n / k, n % k);
            let mut folds = Vec::with_capacity(*k);
            let mut start = 0;
            for i in 0..*k {
                let size = base + usize::from(i < extra);
                folds.push(&order[start..start + size]);
                start += size;
            }
            Ok((0..*k)
                .map(|i| Split {
                    train: folds
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .flat_map(|(_, f)| f.iter().copied())
                        .collect(),
                    test: folds[i].to_vec(),
                })
                .collect())
        }
        SplitSpec::Fixed { train, test, .. } => {
            if let Some(&bad) = train.iter().chain(test).find(|&&i| i >= corpus.len()) {
                return Err(Error::InvalidArgument(format!(
                    "split index {bad} out of range"
                )));
            }
            Ok(vec![Split {
                train: train.clone(),
                test: test.clone(),
            }])
        }
    }
}

/// The bundled 40-sentence two-class corpus used by tests and demos.
pub fn bundled_toy_corpus() -> LabeledCorpus {
    let texts = TOY_NEG
        .lines()
        .map(|l| (l.to_string(), 0))
        .chain(TOY_POS.lines().map(|l| (l.to_string(), 1)))
        .filter(|(l, _)| !l.trim().is_empty())
        .collect();
    let mut corpus =
        LabeledCorpus::from_texts("toy", texts, 2, 1).expect("bundled corpus is well formed");
    corpus.split_spec = SplitSpec::CrossValidation { k: 5, seed: 0 };
    corpus
}
