use super::{
    check_example, logistic, Dropout, Example, ModelShape, ResponseModel, Trainable, PROB_EPS,
};
use crate::error::ModelError;
use crate::types::{ImpressionSource, PriceSeries, UserFeatures};

/// Inclusive day-lag ranges for own-brand impression features; the last
/// bucket is open-ended.
pub const LAG_BUCKETS: [(u32, u32); 5] = [(0, 0), (1, 1), (2, 3), (4, 7), (8, u32::MAX)];

fn lag_bucket(lag: u32) -> usize {
    LAG_BUCKETS
        .iter()
        .position(|&(lo, hi)| lag >= lo && lag <= hi)
        .expect("buckets cover every lag")
}

/// Per-brand logistic regression on a fixed feature map.
///
/// For brand `b` on day `t` the features are, in order:
/// `log1p` own impressions per `(position, lag bucket)`, `log1p` cumulative
/// impressions of every other brand, all brands' prices on day `t`, and the
/// user features. Each brand has its own weight vector and intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    shape: ModelShape,
    params: Vec<f64>,
}

impl LogisticModel {
    /// All-zero weights (predicts 0.5 everywhere).
    pub fn new(shape: ModelShape) -> Self {
        let len = shape.brands as usize * (Self::feature_len_for(&shape) + 1);
        LogisticModel {
            shape,
            params: vec![0.0; len],
        }
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self, ModelError> {
        let expected = shape.brands as usize * (Self::feature_len_for(&shape) + 1);
        if params.len() != expected {
            return Err(ModelError::ShapeMismatch(format!(
                "logistic model needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(LogisticModel { shape, params })
    }

    fn feature_len_for(shape: &ModelShape) -> usize {
        let (b, k, r) = (
            shape.brands as usize,
            shape.positions as usize,
            shape.features as usize,
        );
        k * LAG_BUCKETS.len() + (b - 1) + b + r
    }

    pub fn feature_len(&self) -> usize {
        Self::feature_len_for(&self.shape)
    }

    fn block(&self, brand: u32) -> usize {
        brand as usize * (self.feature_len() + 1)
    }

    pub fn weights(&self, brand: u32) -> &[f64] {
        let start = self.block(brand);
        &self.params[start..start + self.feature_len()]
    }

    pub fn weights_mut(&mut self, brand: u32) -> &mut [f64] {
        let start = self.block(brand);
        let f = self.feature_len();
        &mut self.params[start..start + f]
    }

    pub fn intercept(&self, brand: u32) -> f64 {
        self.params[self.block(brand) + self.feature_len()]
    }

    pub fn set_intercept(&mut self, brand: u32, value: f64) {
        let i = self.block(brand) + self.feature_len();
        self.params[i] = value;
    }

    /// Offset of the own-impression feature for `(position, bucket)`.
    pub fn own_index(&self, position: u32, bucket: usize) -> usize {
        position as usize * LAG_BUCKETS.len() + bucket
    }

    /// Offset of the feature for competitor `other` as seen by `brand`.
    pub fn competitor_index(&self, brand: u32, other: u32) -> Option<usize> {
        if other == brand {
            return None;
        }
        let slot = if other < brand { other } else { other - 1 };
        Some(self.shape.positions as usize * LAG_BUCKETS.len() + slot as usize)
    }

    pub fn price_index(&self, brand: u32) -> usize {
        let k = self.shape.positions as usize;
        let b = self.shape.brands as usize;
        k * LAG_BUCKETS.len() + (b - 1) + brand as usize
    }

    pub fn user_index(&self, feature: usize) -> usize {
        let k = self.shape.positions as usize;
        let b = self.shape.brands as usize;
        k * LAG_BUCKETS.len() + (b - 1) + b + feature
    }

    /// Writes the feature vector for `(brand, day)` into `out`.
    pub fn features(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        user: &UserFeatures,
        brand: u32,
        day: u32,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.feature_len());
        out.iter_mut().for_each(|v| *v = 0.0);
        let own_end = self.shape.positions as usize * LAG_BUCKETS.len();
        x.for_each_nonzero(&mut |cell, n| {
            if cell.day > day {
                return;
            }
            if cell.brand == brand {
                out[self.own_index(cell.position, lag_bucket(day - cell.day))] += n as f64;
            } else {
                let slot = if cell.brand < brand {
                    cell.brand
                } else {
                    cell.brand - 1
                };
                out[own_end + slot as usize] += n as f64;
            }
        });
        let comp_end = own_end + self.shape.brands as usize - 1;
        for v in &mut out[..comp_end] {
            *v = v.ln_1p();
        }
        let b = self.shape.brands as usize;
        out[comp_end..comp_end + b].copy_from_slice(prices.day(day));
        out[comp_end + b..].copy_from_slice(user.as_slice());
    }

    fn logit(&self, phi: &[f64], brand: u32) -> f64 {
        let w = self.weights(brand);
        self.intercept(brand) + w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl ResponseModel for LogisticModel {
    fn shape(&self) -> ModelShape {
        self.shape
    }

    fn predict(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> Result<f64, ModelError> {
        self.shape.check(x.dims(), prices, features, brand, day)?;
        let mut phi = vec![0.0; self.feature_len()];
        self.features(x, prices, features, brand, day, &mut phi);
        Ok(logistic(self.logit(&phi, brand)).clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

impl Trainable for LogisticModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_gradient(
        &self,
        ex: &Example<'_>,
        prices: &PriceSeries,
        grad: &mut [f64],
        _dropout: Option<&mut Dropout>,
    ) -> f64 {
        check_example(&self.shape, ex);
        let f = self.feature_len();
        let mut phi = vec![0.0; f];
        let mut ll = 0.0;
        for day in 0..self.shape.days {
            for brand in 0..self.shape.brands {
                self.features(ex.tensor, prices, ex.features, brand, day, &mut phi);
                let p = logistic(self.logit(&phi, brand));
                let y = ex.labels[(day * self.shape.brands + brand) as usize] != 0;
                ll += super::bernoulli_log_likelihood(p, y);
                let dz = if y { 1.0 - p } else { -p };
                let start = self.block(brand);
                for (g, v) in grad[start..start + f].iter_mut().zip(&phi) {
                    *g += dz * v;
                }
                grad[start + f] += dz;
            }
        }
        ll
    }

    fn predict_all(&self, ex: &Example<'_>, prices: &PriceSeries) -> Vec<f64> {
        check_example(&self.shape, ex);
        let mut phi = vec![0.0; self.feature_len()];
        let mut out = Vec::with_capacity((self.shape.days * self.shape.brands) as usize);
        for day in 0..self.shape.days {
            for brand in 0..self.shape.brands {
                self.features(ex.tensor, prices, ex.features, brand, day, &mut phi);
                out.push(logistic(self.logit(&phi, brand)).clamp(PROB_EPS, 1.0 - PROB_EPS));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Cell, Dims, ImpressionTensor};

    fn shape() -> ModelShape {
        ModelShape::new(Dims::new(3, 4, 10).unwrap(), 2)
    }

    #[test]
    fn zero_weights_predict_half() {
        let m = LogisticModel::new(shape());
        let x = ImpressionTensor::from_entries(shape().dims(), [(Cell::new(1, 2, 3), 9)]).unwrap();
        let p = PriceSeries::constant(3, 10, 1.3);
        let d = UserFeatures::new(vec![0.4, -2.0]).unwrap();
        for day in 0..10 {
            assert_eq!(m.predict(&x, &p, &d, 1, day).unwrap(), 0.5);
        }
    }

    #[test]
    fn feature_layout() {
        let m = LogisticModel::new(shape());
        assert_eq!(m.feature_len(), 4 * 5 + 2 + 3 + 2);
        let x = ImpressionTensor::from_entries(
            shape().dims(),
            [
                (Cell::new(0, 1, 9), 3),
                (Cell::new(0, 1, 5), 1),
                (Cell::new(0, 3, 0), 2),
                (Cell::new(2, 0, 4), 6),
            ],
        )
        .unwrap();
        let p = PriceSeries::constant(3, 10, 2.0);
        let d = UserFeatures::new(vec![0.5, 0.25]).unwrap();
        let mut phi = vec![0.0; m.feature_len()];
        m.features(&x, &p, &d, 0, 9, &mut phi);
        assert_eq!(phi[m.own_index(1, 0)], 3f64.ln_1p());
        assert_eq!(phi[m.own_index(1, 3)], 1f64.ln_1p());
        assert_eq!(phi[m.own_index(3, 4)], 2f64.ln_1p());
        assert_eq!(phi[m.competitor_index(0, 2).unwrap()], 6f64.ln_1p());
        assert_eq!(phi[m.competitor_index(0, 1).unwrap()], 0.0);
        assert_eq!(phi[m.price_index(2)], 2.0);
        assert_eq!(phi[m.user_index(1)], 0.25);
        // day 4 sees neither the day-5 nor the day-9 own impressions
        m.features(&x, &p, &d, 0, 4, &mut phi);
        assert_eq!(phi[m.own_index(1, 0)] + phi[m.own_index(1, 3)], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = LogisticModel::new(shape());
        let x = ImpressionTensor::empty(Dims::new(3, 4, 9).unwrap());
        let p = PriceSeries::constant(3, 10, 1.0);
        let d = UserFeatures::zeros(2);
        assert!(matches!(
            m.predict(&x, &p, &d, 0, 0),
            Err(ModelError::ShapeMismatch(_))
        ));
        let x = ImpressionTensor::empty(shape().dims());
        assert!(m.predict(&x, &p, &UserFeatures::zeros(3), 0, 0).is_err());
        assert!(m.predict(&x, &p, &d, 0, 10).is_err());
    }
}
