//! One weights container for all downstream estimators. The task tag and the
//! architecture hyperparameters ride along in the parameter store's metadata
//! so a saved estimator is a single self-describing file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tacgen_nn::ParamStore;

use crate::error::{Result, TaskError};
use crate::vit::VitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskTag {
    Force,
    Pose,
    CnnClassifier,
    VitClassifier,
}

impl TaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Force => "force",
            TaskTag::Pose => "pose",
            TaskTag::CnnClassifier => "classifier.cnn",
            TaskTag::VitClassifier => "classifier.vit",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub task: TaskTag,
    /// Expected input frame, (h, w).
    pub input: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<VitConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    /// Rotational symmetry period of the pose target, degrees.
    #[serde(default)]
    pub symmetry_deg: f64,
    /// Pose angle head: circular (sin, cos) when true, raw degrees when false.
    #[serde(default)]
    pub circular: bool,
    #[serde(default)]
    pub lambda_aux: f64,
}

#[derive(Debug)]
pub struct EstimatorWeights {
    pub store: ParamStore,
    pub meta: EstimatorMeta,
}

impl EstimatorWeights {
    pub fn new(store: ParamStore, meta: EstimatorMeta) -> Self {
        Self { store, meta }
    }

    pub fn expect_task(&self, expected: TaskTag) -> Result<()> {
        if self.meta.task != expected {
            return Err(TaskError::TaskMismatch {
                expected: expected.as_str(),
                actual: self.meta.task.as_str().to_string(),
            });
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.store.clone();
        store.meta.insert(
            "estimator".into(),
            serde_json::to_string(&self.meta).expect("meta serializes"),
        );
        store.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let raw = store
            .meta
            .get("estimator")
            .ok_or_else(|| TaskError::Invalid(format!("{} is not an estimator file", path.display())))?;
        let meta: EstimatorMeta = serde_json::from_str(raw)
            .map_err(|e| TaskError::Invalid(format!("bad estimator metadata: {e}")))?;
        Ok(Self { store, meta })
    }
}

/// Shared optimizer and batching knobs for estimator training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Auxiliary-decoder loss weight; 0 disables the decoder entirely.
    pub lambda_aux: f64,
    pub vit: VitConfig,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch: 8,
            lr_start: 3e-4,
            lr_end: 3e-5,
            weight_decay: 1e-4,
            lambda_aux: 0.5,
            vit: VitConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrips_meta() {
        let mut store = ParamStore::new();
        store.add("head.w", ndarray::Array2::<f64>::zeros((4, 3)));
        let meta = EstimatorMeta {
            task: TaskTag::Pose,
            input: (64, 64),
            vit: Some(VitConfig::default()),
            classes: vec![],
            symmetry_deg: 180.0,
            circular: true,
            lambda_aux: 0.5,
        };
        let w = EstimatorWeights::new(store, meta);
        let dir = std::env::temp_dir().join(format!("tacgen-est-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pose.params");
        w.save(&path).unwrap();
        let back = EstimatorWeights::load(&path).unwrap();
        assert_eq!(back.meta.task, TaskTag::Pose);
        assert_eq!(back.meta.symmetry_deg, 180.0);
        assert_eq!(back.fingerprint(), w.fingerprint());
        assert!(back.expect_task(TaskTag::Force).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
