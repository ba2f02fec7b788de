//! Run configuration: TOML file, flag overrides and validation.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentiment_core::dualchannel::{FusionConfig, FusionTrainConfig, Variant};
use sentiment_core::optim::LbfgsConfig;
use sentiment_core::rae::RaeHyper;
use sentiment_core::textdata::CorpusFormat;

/// Overrides the configured output directory (flags still win).
pub const OUTPUT_DIR_ENV: &str = "SENTIMENT_OUTPUT_DIR";

pub const EMBEDDING_DIMS: [usize; 4] = [50, 100, 200, 300];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// The bundled 40-sentence corpus; `path` is ignored.
    Toy,
    TwoFilePolarity,
    LabeledTsv,
}

impl DatasetFormat {
    pub fn corpus_format(self) -> Option<CorpusFormat> {
        match self {
            DatasetFormat::Toy => None,
            DatasetFormat::TwoFilePolarity => Some(CorpusFormat::TwoFilePolarity),
            DatasetFormat::LabeledTsv => Some(CorpusFormat::LabeledTsv),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Rae,
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    Random,
    Glove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub min_count: usize,
    /// Use a seeded random subset of this many examples.
    pub sample: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::Toy,
            min_count: 1,
            sample: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub source: EmbeddingSource,
    /// GloVe text file. `{dim}` is replaced by the dimension, which lets
    /// dimension sweeps pick the matching file.
    pub glove_path: Option<String>,
    pub dim: usize,
    pub trainable: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            source: EmbeddingSource::Random,
            glove_path: None,
            dim: 50,
            trainable: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn glove_file(&self, dim: usize) -> Option<PathBuf> {
        self.glove_path
            .as_ref()
            .map(|p| PathBuf::from(p.replace("{dim}", &dim.to_string())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub kernels: Vec<(usize, usize)>,
    pub hidden: usize,
    pub attention: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Evaluate the examples of a batch in parallel.
    pub parallel: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        let arch = FusionConfig::default();
        let train = FusionTrainConfig::default();
        Self {
            kernels: arch.kernels,
            hidden: arch.hidden,
            attention: arch.attention,
            epochs: train.epochs,
            batch: train.batch,
            lr: train.lr,
            momentum: train.momentum,
            parallel: train.parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaeSettings {
    pub theta: f64,
    pub mu: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for RaeSettings {
    fn default() -> Self {
        Self {
            theta: 0.2,
            mu: 1e-4,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    /// Coordinates sampled per check.
    pub samples: usize,
    /// Sentences taken from the corpus.
    pub sentences: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            samples: 200,
            sentences: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub epochs: usize,
    pub warmup: usize,
    pub variants: Vec<Variant>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            epochs: 3,
            warmup: 1,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelFamily,
    pub variant: Variant,
    pub embeddings: EmbeddingConfig,
    pub fusion: FusionSettings,
    pub rae: RaeSettings,
    pub gradcheck: GradCheckSettings,
    pub bench: BenchSettings,
    /// Cross-validation folds, also used to hold out a test fold when the
    /// corpus has no fixed split.
    pub folds: usize,
    pub parallel_folds: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelFamily::Fusion,
            variant: Variant::Full,
            embeddings: EmbeddingConfig::default(),
            fusion: FusionSettings::default(),
            rae: RaeSettings::default(),
            gradcheck: GradCheckSettings::default(),
            bench: BenchSettings::default(),
            folds: 10,
            parallel_folds: false,
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// One violated field.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationError(pub Vec<Violation>);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for v in &self.0 {
            writeln!(f, "  {}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Number of values on the first non-empty line of a GloVe file.
fn glove_width(path: &Path) -> std::io::Result<Option<usize>> {
    let reader = BufReader::new(fs::File::open(path)?);
    for line in reader.split(b'\n') {
        let line = line?;
        let text = String::from_utf8_lossy(&line);
        if !text.trim().is_empty() {
            return Ok(Some(
                text.trim_end()
                    .split(' ')
                    .skip(1)
                    .filter(|f| !f.is_empty())
                    .count(),
            ));
        }
    }
    Ok(None)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))
    }

    pub fn fusion_config(&self, num_classes: usize) -> FusionConfig {
        FusionConfig {
            variant: self.variant,
            kernels: self.fusion.kernels.clone(),
            hidden: self.fusion.hidden,
            attention: self.fusion.attention,
            num_classes,
        }
    }

    pub fn fusion_train(&self) -> FusionTrainConfig {
        FusionTrainConfig {
            epochs: self.fusion.epochs,
            batch: self.fusion.batch,
            lr: self.fusion.lr,
            momentum: self.fusion.momentum,
            seed: self.seed,
            parallel: self.fusion.parallel,
        }
    }

    pub fn rae_hyper(&self, num_classes: usize) -> RaeHyper {
        RaeHyper {
            theta: self.rae.theta,
            mu: self.rae.mu,
            num_classes,
        }
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut v = Vec::new();
        let mut bad = |field: &'static str, message: String| v.push(Violation { field, message });

        if self.dataset.format != DatasetFormat::Toy {
            match &self.dataset.path {
                None => bad(
                    "dataset.path",
                    "required unless dataset.format is \"toy\"".into(),
                ),
                Some(p) => {
                    let exists = match self.dataset.format {
                        DatasetFormat::TwoFilePolarity => {
                            p.with_extension("pos").exists() && p.with_extension("neg").exists()
                        }
                        _ => {
                            p.exists() || Path::new(&format!("{}.train.tsv", p.display())).exists()
                        }
                    };
                    if !exists {
                        bad(
                            "dataset.path",
                            format!("no corpus found at {}", p.display()),
                        );
                    }
                }
            }
        }
        if self.dataset.min_count == 0 {
            bad("dataset.min_count", "must be at least 1".into());
        }
        if self.dataset.sample == Some(0) {
            bad("dataset.sample", "must be positive".into());
        }
        if !EMBEDDING_DIMS.contains(&self.embeddings.dim) {
            bad(
                "embeddings.dim",
                format!(
                    "must be one of {EMBEDDING_DIMS:?}, got {}",
                    self.embeddings.dim
                ),
            );
        }
        if self.embeddings.source == EmbeddingSource::Glove {
            match self.embeddings.glove_file(self.embeddings.dim) {
                None => bad(
                    "embeddings.glove_path",
                    "required when embeddings.source is \"glove\"".into(),
                ),
                Some(p) => match glove_width(&p) {
                    Err(e) => bad("embeddings.glove_path", format!("{}: {e}", p.display())),
                    Ok(None) => bad("embeddings.glove_path", format!("{} is empty", p.display())),
                    Ok(Some(w)) if w != self.embeddings.dim => bad(
                        "embeddings.dim",
                        format!(
                            "{} holds {w}-dimensional vectors, not {}",
                            p.display(),
                            self.embeddings.dim
                        ),
                    ),
                    Ok(Some(_)) => {}
                },
            }
        }
        if self.model == ModelFamily::Fusion {
            if let Err(e) = self.fusion_config(2).validate() {
                bad("fusion", e.to_string());
            }
            if let Err(e) = self.fusion_train().validate() {
                bad("fusion", e.to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.rae.theta) {
            bad(
                "rae.theta",
                format!("must lie in [0, 1], got {}", self.rae.theta),
            );
        }
        if !(self.rae.mu >= 0.0) {
            bad(
                "rae.mu",
                format!("must be non-negative, got {}", self.rae.mu),
            );
        }
        if self.rae.lbfgs.history == 0 {
            bad("rae.lbfgs.history", "must be positive".into());
        }
        if self.folds < 2 {
            bad(
                "folds",
                format!("need at least 2 folds, got {}", self.folds),
            );
        }
        if self.gradcheck.samples == 0 || self.gradcheck.sentences == 0 {
            bad("gradcheck", "samples and sentences must be positive".into());
        }
        if self.bench.epochs < 2 || self.bench.warmup < 1 {
            bad(
                "bench",
                "need at least one warmup and two timed epochs".into(),
            );
        }
        if self.bench.variants.is_empty() {
            bad("bench.variants", "list at least one variant".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ValidationError(v))
        }
    }
}
