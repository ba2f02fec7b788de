//! JSON checkpoints holding a model's configuration, vocabulary and every
//! tensor by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualchannel::{self, FusionConfig, FusionModel};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rae::{self, RaeHyper, RaeParams};
use crate::scalar::Scalar;
use crate::textdata::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSpec {
    Rae {
        hyper: RaeHyper,
        dim: usize,
        trainable_embeddings: bool,
    },
    Fusion {
        config: FusionConfig,
        dim: usize,
        trainable_embeddings: bool,
    },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Rae { .. } => "rae",
            ModelSpec::Fusion { .. } => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelSpec,
    pub vocab: Vocabulary,
    pub tensors: Vec<NamedTensor>,
}

/// A restored model of either family.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Rae(RaeParams<T>),
    Fusion(FusionModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn num_classes(&self) -> usize {
        match self {
            Model::Rae(p) => p.num_classes(),
            Model::Fusion(m) => m.config.num_classes,
        }
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        match self {
            Model::Rae(p) => rae::predict_sentence(tokens, p),
            Model::Fusion(m) => dualchannel::predict(m, tokens),
        }
    }
}

fn dump<T: Scalar>(state: Vec<(String, &Tensor<T>)>) -> Vec<NamedTensor> {
    state
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

fn restore<T: Scalar>(
    targets: Vec<(String, &mut Tensor<T>)>,
    tensors: &[NamedTensor],
) -> Result<()> {
    if targets.len() != tensors.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            targets.len()
        )));
    }
    for (name, target) in targets {
        let src = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name:?}")))?;
        if src.shape != target.shape() || src.data.len() != target.len() {
            return Err(Error::Contract(format!(
                "tensor {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                src.shape,
                target.shape()
            )));
        }
        for (d, &s) in target.data_mut().iter_mut().zip(&src.data) {
            *d = T::lit(s);
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_rae<T: Scalar>(p: &RaeParams<T>, vocab: &Vocabulary) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Rae {
                hyper: p.hyper.clone(),
                dim: p.dim(),
                trainable_embeddings: p.embeddings.trainable,
            },
            vocab: vocab.clone(),
            tensors: dump(
                p.state()
                    .into_iter()
                    .map(|(n, t)| (n.to_string(), t))
                    .collect(),
            ),
        }
    }

    pub fn from_fusion<T: Scalar>(m: &FusionModel<T>, vocab: &Vocabulary) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Fusion {
                config: m.config.clone(),
                dim: m.embeddings.dim(),
                trainable_embeddings: m.embeddings.trainable,
            },
            vocab: vocab.clone(),
            tensors: dump(m.state()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model described by the checkpoint and restores every
    /// tensor, checking names and shapes.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let embeddings = |dim: usize, trainable: bool| {
            EmbeddingMatrix::new(Tensor::zeros(&[dim, self.vocab.len()]), trainable)
        };
        match &self.model {
            ModelSpec::Rae {
                hyper,
                dim,
                trainable_embeddings,
            } => {
                let mut p =
                    RaeParams::new(embeddings(*dim, *trainable_embeddings)?, hyper.clone(), 0)?;
                restore(
                    p.state_mut()
                        .into_iter()
                        .map(|(n, t)| (n.to_string(), t))
                        .collect(),
                    &self.tensors,
                )?;
                Ok(Model::Rae(p))
            }
            ModelSpec::Fusion {
                config,
                dim,
                trainable_embeddings,
            } => {
                let mut m =
                    FusionModel::new(config.clone(), embeddings(*dim, *trainable_embeddings)?, 0)?;
                restore(m.state_mut(), &self.tensors)?;
                Ok(Model::Fusion(m))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualchannel::Variant;
    use crate::textdata::bundled_toy_corpus;

    #[test]
    fn round_trips_both_families() {
        let corpus = bundled_toy_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");

        let hyper = RaeHyper {
            theta: 0.3,
            mu: 1e-4,
            num_classes: 2,
        };
        let mut emb = EmbeddingMatrix::<f64>::init_gaussian(corpus.vocab.len(), 5, 1);
        emb.trainable = false;
        let p = RaeParams::new(emb, hyper, 2).unwrap();
        Checkpoint::from_rae(&p, &corpus.vocab).save(&path).unwrap();
        let Model::Rae(q) = Checkpoint::load(&path).unwrap().to_model::<f64>().unwrap() else {
            panic!("wrong family")
        };
        assert_eq!(p, q);

        let config = FusionConfig {
            variant: Variant::BiLstm,
            kernels: vec![(2, 3)],
            hidden: 2,
            attention: 2,
            num_classes: 2,
        };
        let m = FusionModel::new(
            config,
            EmbeddingMatrix::<f64>::init_gaussian(corpus.vocab.len(), 4, 3),
            3,
        )
        .unwrap();
        let ckpt = Checkpoint::from_fusion(&m, &corpus.vocab);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let Model::Fusion(n) = loaded.to_model::<f64>().unwrap() else {
            panic!("wrong family")
        };
        assert_eq!(m, n);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let corpus = bundled_toy_corpus();
        let m = FusionModel::new(
            FusionConfig {
                kernels: vec![(2, 3)],
                hidden: 2,
                attention: 2,
                ..FusionConfig::default()
            },
            EmbeddingMatrix::<f64>::init_gaussian(corpus.vocab.len(), 4, 3),
            3,
        )
        .unwrap();
        let mut ckpt = Checkpoint::from_fusion(&m, &corpus.vocab);
        if let ModelSpec::Fusion { config, .. } = &mut ckpt.model {
            config.hidden = 3;
        }
        assert!(ckpt.to_model::<f64>().is_err());
    }
}
