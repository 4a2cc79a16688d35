use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClusterMap, Vocab};
use crate::heads::PointEstimator;
use crate::model::{Model, ModelConfig, ModelParams, TimeScales};
use crate::tensor::Tensor;

use super::{Result, TrainConfig, TrainError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-contained JSON document holding a model and how it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epochs_completed: usize,
    pub marks: Vocab,
    pub goals: Vocab,
    pub clusters: ClusterMap,
    pub scales: TimeScales,
    pub eos_gap: f64,
    pub estimator: PointEstimator,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<TrainConfig>, epochs_completed: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config,
            train,
            epochs_completed,
            marks: model.marks.clone(),
            goals: model.goals.clone(),
            clusters: model.clusters.clone(),
            scales: model.scales,
            eos_gap: model.eos_gap,
            estimator: model.estimator,
            params: model
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.clusters.assignment.len() != self.marks.len() {
            return Err(TrainError::Checkpoint(
                "cluster assignment does not cover the mark vocabulary".into(),
            ));
        }
        let mut params = ModelParams::init(&self.config, self.marks.len(), self.goals.len(), 0)?;
        let entries = self
            .params
            .into_iter()
            .map(|n| Ok((n.name, Tensor::new(&n.shape, n.values)?)))
            .collect::<Result<Vec<_>>>()?;
        params.load_named(entries)?;
        if !params.is_finite() {
            return Err(TrainError::Checkpoint("parameters contain non-finite values".into()));
        }
        Ok(Model {
            config: self.config,
            params,
            marks: self.marks,
            goals: self.goals,
            clusters: self.clusters,
            scales: self.scales,
            eos_gap: self.eos_gap,
            estimator: self.estimator,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self, None, 0).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{fixtures, synth_generate};
    use crate::encoder;
    use crate::model::ModelConfig;
    use crate::training::initialize;

    fn model() -> Model {
        let data = synth_generate(&fixtures::goal_chains(0.1), 6, 0).unwrap();
        let cfg = ModelConfig {
            dim: 4,
            blocks: 1,
            heads: 1,
            max_len: 8,
            clusters: 2,
            ..Default::default()
        };
        let mut m = initialize(&data, cfg, 3).unwrap();
        // awkward decimals exercise the float round trip
        for v in m.params.heads.w_mu.values_mut() {
            *v = 0.1 + 0.2 + *v / 3.0;
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let seq = synth_generate(&fixtures::goal_chains(0.1), 1, 9).unwrap().sequences[0].clone();
        let a = encoder::history(seq.events(), &m.scales, &m.params.encoder, &m.config).unwrap();
        let b = encoder::history(seq.events(), &back.scales, &back.params.encoder, &back.config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_documents_are_rejected() {
        let m = model();
        let mut c = Checkpoint::from_model(&m, None, 0);
        c.version = 99;
        assert!(c.clone().into_model().is_err());
        c.version = CHECKPOINT_VERSION;
        c.params[0].shape = vec![1];
        assert!(c.clone().into_model().is_err());
        let mut c = Checkpoint::from_model(&m, None, 0);
        c.params.pop();
        assert!(c.into_model().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(Model::load(&path), Err(TrainError::Checkpoint(_))));
    }
}
