//! Versioned JSON model checkpoints. Floats are written in shortest
//! round-trip form and parsed exactly, so parameters survive bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BiRecurrentModel, LogisticModel, ModelShape, RecurrentShape, ResponseModel, LAG_BUCKETS,
};
use crate::datagen::GroundTruth;
use crate::error::{IngestError, ModelError};
use crate::types::{ImpressionSource, PriceSeries, UserFeatures};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "mta-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Logistic {
        shape: ModelShape,
        /// Inclusive lag ranges of the own-impression features.
        lag_buckets: Vec<(u32, u32)>,
        feature_map: String,
        params: Vec<f64>,
    },
    BiRecurrent {
        shape: ModelShape,
        recurrent: RecurrentShape,
        feature_map: String,
        params: Vec<f64>,
    },
    GroundTruth {
        truth: GroundTruth,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Payload,
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Logistic(LogisticModel),
    BiRecurrent(BiRecurrentModel),
    GroundTruth(GroundTruth),
}

impl ResponseModel for AnyModel {
    fn shape(&self) -> ModelShape {
        match self {
            AnyModel::Logistic(m) => m.shape(),
            AnyModel::BiRecurrent(m) => m.shape(),
            AnyModel::GroundTruth(m) => m.shape(),
        }
    }

    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError> {
        match self {
            AnyModel::Logistic(m) => m.predict(x, prices, features, brand, day),
            AnyModel::BiRecurrent(m) => m.predict(x, prices, features, brand, day),
            AnyModel::GroundTruth(m) => m.predict(x, prices, features, brand, day),
        }
    }
}

impl From<&AnyModel> for Checkpoint {
    fn from(model: &AnyModel) -> Self {
        use super::Trainable;
        let payload = match model {
            AnyModel::Logistic(m) => Payload::Logistic {
                shape: m.shape(),
                lag_buckets: LAG_BUCKETS.to_vec(),
                feature_map: "per brand: log1p own impressions by (position, lag bucket); \
                              log1p cumulative impressions of other brands; prices; user features; intercept"
                    .into(),
                params: m.params().to_vec(),
            },
            AnyModel::BiRecurrent(m) => Payload::BiRecurrent {
                shape: m.shape(),
                recurrent: m.recurrent_shape(),
                feature_map: "per day: log1p impressions at brand*K+position, then B prices".into(),
                params: m.params().to_vec(),
            },
            AnyModel::GroundTruth(t) => Payload::GroundTruth { truth: t.clone() },
        };
        Checkpoint {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: payload,
        }
    }
}

impl TryFrom<Checkpoint> for AnyModel {
    type Error = ModelError;

    fn try_from(ck: Checkpoint) -> Result<Self, ModelError> {
        if ck.format != FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::ShapeMismatch(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(match ck.model {
            Payload::Logistic {
                shape,
                lag_buckets,
                params,
                ..
            } => {
                if lag_buckets != LAG_BUCKETS {
                    return Err(ModelError::ShapeMismatch("lag buckets differ".into()));
                }
                AnyModel::Logistic(LogisticModel::from_params(shape, params)?)
            }
            Payload::BiRecurrent {
                shape,
                recurrent,
                params,
                ..
            } => AnyModel::BiRecurrent(BiRecurrentModel::from_params(shape, recurrent, params)?),
            Payload::GroundTruth { truth } => AnyModel::GroundTruth(truth),
        })
    }
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<(), IngestError> {
    let ck = Checkpoint::from(model);
    let text = serde_json::to_string(&ck).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| IngestError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| IngestError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    AnyModel::try_from(ck).map_err(|e| IngestError::Format {
        path: path.into(),
        message: e.to_string(),
    })
}
