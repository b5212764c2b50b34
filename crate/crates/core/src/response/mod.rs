//! Response models `σ(x_{1:T}, p_{1:T}, d; Ω)` mapping an impression history,
//! prices and user characteristics to a purchase probability per brand and day.
//!
//! Two trainable implementations are provided: a lag-bucketed
//! [`LogisticModel`] baseline and the bidirectional LSTM [`BiRecurrentModel`].
//! Any type implementing [`ResponseModel`] can drive Shapley attribution.

mod checkpoint;
mod init;
mod logistic;
mod lstm;
mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AnyModel, Checkpoint, Payload, CHECKPOINT_VERSION,
};
pub use init::{orthogonal, truncated_normal, InitSpec, TRUNCATION_SIGMAS};
pub use logistic::{LogisticModel, LAG_BUCKETS};
pub use lstm::{BiRecurrentModel, RecurrentShape};
pub use train::{train, Adam, TrainConfig, TrainLog, TrainStep};

use crate::error::ModelError;
use crate::types::{Dims, ImpressionSource, ImpressionTensor, PriceSeries, UserFeatures};

/// Predictions are clamped this far from 0 and 1 before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Input extents a model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub brands: u32,
    pub positions: u32,
    pub days: u32,
    pub features: u32,
}

impl ModelShape {
    pub fn new(dims: Dims, features: usize) -> Self {
        ModelShape {
            brands: dims.brands,
            positions: dims.positions,
            days: dims.days,
            features: features as u32,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            brands: self.brands,
            positions: self.positions,
            days: self.days,
        }
    }

    /// Validates one prediction request against this shape.
    pub fn check(
        &self,
        x: Dims,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<(), ModelError> {
        if x != self.dims() {
            return Err(ModelError::ShapeMismatch(format!(
                "impressions are {}x{}x{}, model expects {}x{}x{}",
                x.brands, x.positions, x.days, self.brands, self.positions, self.days
            )));
        }
        if prices.brands() != self.brands || prices.days() != self.days {
            return Err(ModelError::ShapeMismatch(format!(
                "prices are {}x{}, model expects {}x{}",
                prices.brands(),
                prices.days(),
                self.brands,
                self.days
            )));
        }
        if features.len() != self.features as usize {
            return Err(ModelError::ShapeMismatch(format!(
                "{} user features, model expects {}",
                features.len(),
                self.features
            )));
        }
        if brand >= self.brands || day >= self.days {
            return Err(ModelError::ShapeMismatch(format!(
                "brand {brand} / day {day} outside {}x{}",
                self.brands, self.days
            )));
        }
        Ok(())
    }
}

/// A purchase-probability model. Evaluation is pure and never mutates
/// parameters, so a single instance can be shared across worker threads.
pub trait ResponseModel: Send + Sync {
    fn shape(&self) -> ModelShape;

    /// `E[Y_{i,brand,day}]`, strictly inside `(0, 1)`.
    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError>;
}

impl<M: ResponseModel + ?Sized> ResponseModel for &M {
    fn shape(&self) -> ModelShape {
        (**self).shape()
    }

    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError> {
        (**self).predict(x, prices, features, brand, day)
    }
}

impl<M: ResponseModel + ?Sized> ResponseModel for std::sync::Arc<M> {
    fn shape(&self) -> ModelShape {
        (**self).shape()
    }

    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError> {
        (**self).predict(x, prices, features, brand, day)
    }
}

/// One user's training record: impressions, features and the day-major
/// `T·B` label vector `Y_{ibt}`.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tensor: &'a ImpressionTensor,
    pub features: &'a UserFeatures,
    pub labels: &'a [u8],
}

/// Inverted dropout on non-recurrent connections.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub keep: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    /// Returns `0` or `1/keep`.
    pub fn draw(&mut self) -> f64 {
        if self.keep >= 1.0 || self.rng.random::<f64>() < self.keep {
            1.0 / self.keep
        } else {
            0.0
        }
    }
}

/// Models trained by gradient ascent on the log-likelihood.
pub trait Trainable: ResponseModel + Clone {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Adds `∂L/∂θ` for one user's labels into `grad` and returns that
    /// user's log-likelihood contribution `L`.
    fn accumulate_gradient(
        &self,
        example: &Example<'_>,
        prices: &PriceSeries,
        grad: &mut [f64],
        dropout: Option<&mut Dropout>,
    ) -> f64;

    /// Predictions for every `(day, brand)` of one user, day-major.
    fn predict_all(&self, example: &Example<'_>, prices: &PriceSeries) -> Vec<f64>;
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of one label under prediction `p`, clamped.
#[inline]
pub fn bernoulli_log_likelihood(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// `Σ [Y log Ŷ + (1−Y) log(1−Ŷ)]` with predictions clamped by [`PROB_EPS`].
pub fn log_likelihood(predictions: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bernoulli_log_likelihood(p, y != 0))
        .sum()
}

/// Log-likelihood of a model over a batch of users.
pub fn model_log_likelihood<M: Trainable>(
    model: &M,
    batch: &[Example<'_>],
    prices: &PriceSeries,
) -> f64 {
    batch
        .iter()
        .map(|ex| log_likelihood(&model.predict_all(ex, prices), ex.labels))
        .sum()
}

/// Same-shape check for every example in a batch.
pub(crate) fn check_example(shape: &ModelShape, ex: &Example<'_>) {
    assert_eq!(ex.tensor.dims(), shape.dims(), "example dims");
    assert_eq!(
        ex.features.len(),
        shape.features as usize,
        "example features"
    );
    assert_eq!(
        ex.labels.len(),
        (shape.days * shape.brands) as usize,
        "example labels"
    );
}

/// A compact sparse vector used for per-day impression inputs.
pub(crate) type SparseInput = Vec<(usize, f64)>;

/// Per-day network inputs: `log1p` impression counts at offset
/// `brand·K + position`, followed by the `B` price indices at offset `K·B`.
pub(crate) fn encode_days(
    x: &dyn ImpressionSource,
    prices: &PriceSeries,
    days: usize,
) -> Vec<SparseInput> {
    let dims = x.dims();
    let k = dims.positions as usize;
    let b = dims.brands as usize;
    let mut out: Vec<SparseInput> = (0..days).map(|_| Vec::new()).collect();
    x.for_each_nonzero(&mut |cell, n| {
        let t = cell.day as usize;
        if t < days {
            out[t].push((
                cell.brand as usize * k + cell.position as usize,
                (n as f64).ln_1p(),
            ));
        }
    });
    for (t, row) in out.iter_mut().enumerate() {
        for (brand, &p) in prices.day(t as u32).iter().enumerate() {
            row.push((k * b + brand, p));
        }
    }
    out
}
