//! Synthetic attribution windows with a known response function.
//!
//! Purchases are drawn from a decay-stock logistic ground truth `σ*`:
//!
//! ```text
//! a_bk(t) = Σ_{s ≤ t} λ^(t−s) x_bks
//! logit   = α_b + Σ_k w_bk·log1p(a_bk) + Σ_{b'≠b} c_bb'·log1p(Σ_k a_b'k)
//!           + γ_b·p_bt + Σ_r θ_br·d_r
//! ```
//!
//! Users carry a latent affinity (feature 0) that raises purchase odds and,
//! through `targeting_bias`, the number of impressions they are served.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClickRecord, Dataset, UserRecord};
use crate::error::{DataError, ModelError};
use crate::par;
use crate::response::{logistic, ModelShape, ResponseModel, PROB_EPS};
use crate::seed;
use crate::types::{
    Cell, Dims, ImpressionSource, ImpressionTensor, Order, PriceSeries, UserFeatures,
};

const SHARD_USERS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub brands: u32,
    pub positions: u32,
    pub days: u32,
    /// Number of user features `R`; feature 0 is the latent affinity.
    pub features: usize,
    /// Stock decay `λ` in `(0, 1]`.
    pub decay: f64,
    /// Baseline purchase logit.
    pub base_logit: f64,
    /// Own-position weights are drawn `N(mean, spread²)`.
    pub own_weight_mean: f64,
    pub own_weight_spread: f64,
    /// Competitor cross-effects are drawn `N(mean, spread²)`.
    pub competitor_weight_mean: f64,
    pub competitor_weight_spread: f64,
    pub price_weight: f64,
    /// Purchase-logit effect of the affinity feature.
    pub affinity_effect: f64,
    /// Spread of the weights on the remaining user features.
    pub feature_weight_spread: f64,
    /// Mean chance a (brand, position, day) cell is served to an average user.
    pub exposure_rate: f64,
    /// Mean extra impressions in a served cell beyond the first.
    pub burst: f64,
    /// Log-normal sigma of per-user browsing activity.
    pub activity_spread: f64,
    /// Exposure multiplier `exp(bias · affinity)`.
    pub targeting_bias: f64,
    pub click_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 10_000,
            brands: 3,
            positions: 10,
            days: 15,
            features: 3,
            decay: 0.7,
            base_logit: -4.0,
            own_weight_mean: 0.4,
            own_weight_spread: 0.4,
            competitor_weight_mean: -0.1,
            competitor_weight_spread: 0.1,
            price_weight: -0.5,
            affinity_effect: 0.5,
            feature_weight_spread: 0.3,
            exposure_rate: 0.03,
            burst: 1.5,
            activity_spread: 0.5,
            targeting_bias: 0.0,
            click_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn dims(&self) -> Result<Dims, DataError> {
        Dims::new(self.brands, self.positions, self.days)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.dims()?;
        if self.users == 0 {
            return Err(DataError::EmptyDimension("users"));
        }
        if self.features == 0 {
            return Err(DataError::EmptyDimension("features"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(DataError::InvalidValue("decay"));
        }
        if !(self.exposure_rate >= 0.0 && self.burst >= 0.0 && self.activity_spread >= 0.0) {
            return Err(DataError::InvalidValue("exposure parameters"));
        }
        if !(0.0..=1.0).contains(&self.click_rate) {
            return Err(DataError::InvalidValue("click rate"));
        }
        Ok(())
    }
}

/// The stored ground-truth response function `σ*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub shape: ModelShape,
    pub decay: f64,
    /// `α_b`
    pub intercepts: Vec<f64>,
    /// `w_bk`, laid out `b·K + k`
    pub position_weights: Vec<f64>,
    /// `c_bb'`, laid out `b·B + b'`; the diagonal is zero
    pub competitor_weights: Vec<f64>,
    /// `γ_b`
    pub price_weights: Vec<f64>,
    /// `θ_br`, laid out `b·R + r`
    pub feature_weights: Vec<f64>,
}

impl GroundTruth {
    pub fn position_weight(&self, brand: u32, position: u32) -> f64 {
        self.position_weights[(brand * self.shape.positions + position) as usize]
    }

    pub fn competitor_weight(&self, brand: u32, other: u32) -> f64 {
        self.competitor_weights[(brand * self.shape.brands + other) as usize]
    }

    pub fn feature_weight(&self, brand: u32, feature: usize) -> f64 {
        self.feature_weights[brand as usize * self.shape.features as usize + feature]
    }

    /// Purchase logit for `(brand, day)`.
    pub fn logit(
        &self,
        x: &dyn ImpressionSource,
        prices: &PriceSeries,
        features: &UserFeatures,
        brand: u32,
        day: u32,
    ) -> f64 {
        let k = self.shape.positions as usize;
        let nb = self.shape.brands as usize;
        let mut buf = [0.0f64; 96];
        let mut heap;
        let stock: &mut [f64] = if k + nb <= buf.len() {
            &mut buf[..k + nb]
        } else {
            heap = vec![0.0; k + nb];
            &mut heap
        };
        let decay = self.decay;
        x.for_each_nonzero(&mut |cell, n| {
            if cell.day > day {
                return;
            }
            let w = decay.powi((day - cell.day) as i32) * n as f64;
            if cell.brand == brand {
                stock[cell.position as usize] += w;
            } else {
                stock[k + cell.brand as usize] += w;
            }
        });
        let b = brand as usize;
        let mut z = self.intercepts[b] + self.price_weights[b] * prices.get(brand, day);
        for (pos, a) in stock[..k].iter().enumerate() {
            if *a > 0.0 {
                z += self.position_weights[b * k + pos] * a.ln_1p();
            }
        }
        for (other, a) in stock[k..].iter().enumerate() {
            if *a > 0.0 {
                z += self.competitor_weights[b * nb + other] * a.ln_1p();
            }
        }
        let r = self.shape.features as usize;
        let theta = &self.feature_weights[b * r..(b + 1) * r];
        z + theta
            .iter()
            .zip(features.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }
}

impl ResponseModel for GroundTruth {
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
        Ok(logistic(self.logit(x, prices, features, brand, day)).clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// A generated window together with the truth that produced it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Draws the ground-truth parameters and the price series.
fn draw_globals(spec: &SynthSpec, dims: Dims) -> (GroundTruth, PriceSeries, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[spec.seed, 0x91]));
    let (nb, nk, r) = (dims.brands as usize, dims.positions as usize, spec.features);
    let normal = |rng: &mut ChaCha8Rng, mean: f64, sd: f64| -> f64 {
        mean + sd * {
            let z: f64 = StandardNormal.sample(rng);
            z
        }
    };
    let intercepts = (0..nb)
        .map(|_| spec.base_logit + 0.2 * normal(&mut rng, 0.0, 1.0))
        .collect();
    let position_weights = (0..nb * nk)
        .map(|_| normal(&mut rng, spec.own_weight_mean, spec.own_weight_spread))
        .collect();
    let competitor_weights = (0..nb * nb)
        .map(|i| {
            let w = normal(
                &mut rng,
                spec.competitor_weight_mean,
                spec.competitor_weight_spread,
            );
            if i / nb == i % nb {
                0.0
            } else {
                w
            }
        })
        .collect();
    let price_weights = (0..nb)
        .map(|_| spec.price_weight * (1.0 + 0.1 * normal(&mut rng, 0.0, 1.0)))
        .collect();
    let feature_weights = (0..nb * r)
        .map(|i| {
            if i % r == 0 {
                spec.affinity_effect
            } else {
                normal(&mut rng, 0.0, spec.feature_weight_spread)
            }
        })
        .collect();
    let price_noise = Normal::<f64>::new(1.0, 0.1).expect("valid normal");
    let prices = (0..dims.days as usize * nb)
        .map(|_| price_noise.sample(&mut rng).max(0.0))
        .collect();
    let prices = PriceSeries::new(dims.brands, dims.days, prices).expect("prices are finite");
    // position popularity decreases with slot index, mean 1
    let pop: Vec<f64> = (0..nk)
        .map(|k| 2.0 * (nk - k) as f64 / (nk + 1) as f64)
        .collect();
    // brand share ∝ 1/sqrt(b+1), mean 1
    let raw: Vec<f64> = (0..nb).map(|b| 1.0 / ((b + 1) as f64).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    let share = raw.iter().map(|v| v * nb as f64 / total).collect();
    let truth = GroundTruth {
        shape: ModelShape::new(dims, r),
        decay: spec.decay,
        intercepts,
        position_weights,
        competitor_weights,
        price_weights,
        feature_weights,
    };
    (truth, prices, pop, share)
}

struct ShardOut {
    users: Vec<UserRecord>,
    orders: Vec<Order>,
    clicks: Vec<ClickRecord>,
}

#[allow(clippy::too_many_arguments)]
fn generate_shard(
    spec: &SynthSpec,
    dims: Dims,
    truth: &GroundTruth,
    prices: &PriceSeries,
    pop: &[f64],
    share: &[f64],
    shard: usize,
) -> ShardOut {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[spec.seed, 0x5a, shard as u64]));
    let start = shard * SHARD_USERS;
    let end = ((shard + 1) * SHARD_USERS).min(spec.users);
    let activity = LogNormal::new(
        -spec.activity_spread * spec.activity_spread / 2.0,
        spec.activity_spread,
    )
    .expect("valid log-normal");
    let burst = (spec.burst > 0.0).then(|| Poisson::new(spec.burst).expect("valid poisson"));
    let mut out = ShardOut {
        users: Vec::with_capacity(end - start),
        orders: Vec::new(),
        clicks: Vec::new(),
    };
    for id in start..end {
        let features: Vec<f64> = (0..spec.features)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let affinity = features[0];
        let intensity = activity.sample(&mut rng) * (spec.targeting_bias * affinity).exp();
        let mut entries = Vec::new();
        for t in 0..dims.days {
            for b in 0..dims.brands {
                for k in 0..dims.positions {
                    let rate = spec.exposure_rate * pop[k as usize] * share[b as usize] * intensity;
                    let p_serve = 1.0 - (-rate).exp();
                    if rng.random::<f64>() < p_serve {
                        let extra = burst.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                        let n = 1 + extra as u32;
                        entries.push((Cell::new(b, k, t), n));
                        if spec.click_rate > 0.0 {
                            let ctr = (spec.click_rate * pop[k as usize]).min(1.0);
                            let c = Binomial::new(n as u64, ctr)
                                .expect("valid binomial")
                                .sample(&mut rng);
                            if c > 0 {
                                out.clicks.push(ClickRecord {
                                    user_id: id as u64,
                                    brand: b,
                                    position: k,
                                    day: t,
                                    clicks: c as u32,
                                });
                            }
                        }
                    }
                }
            }
        }
        let impressions =
            ImpressionTensor::from_entries(dims, entries).expect("generated cells are valid");
        let features = UserFeatures::new(features).expect("finite features");
        for t in 0..dims.days {
            for b in 0..dims.brands {
                let p = truth
                    .predict(&impressions, prices, &features, b, t)
                    .expect("shapes agree");
                if rng.random::<f64>() < p {
                    out.orders.push(Order {
                        user_id: id as u64,
                        brand: b,
                        day: t,
                    });
                }
            }
        }
        out.users.push(UserRecord {
            id: id as u64,
            impressions,
            features,
        });
    }
    out
}

/// Generates a dataset and its ground truth. Output depends only on `spec`
/// (including its seed), not on the number of worker threads.
pub fn generate(spec: &SynthSpec, workers: usize) -> Result<Synthetic, DataError> {
    spec.validate()?;
    let dims = spec.dims()?;
    let (truth, prices, pop, share) = draw_globals(spec, dims);
    let shards: Vec<usize> = (0..spec.users.div_ceil(SHARD_USERS)).collect();
    let parts = par::map_ordered(&shards, workers, |&s| {
        generate_shard(spec, dims, &truth, &prices, &pop, &share, s)
    });
    let mut users = Vec::with_capacity(spec.users);
    let mut orders = Vec::new();
    let mut clicks = Vec::new();
    for p in parts {
        users.extend(p.users);
        orders.extend(p.orders);
        clicks.extend(p.clicks);
    }
    let clicks = (spec.click_rate > 0.0).then_some(clicks);
    Ok(Synthetic {
        dataset: Dataset::new(dims, spec.features, users, prices, orders, clicks),
        truth,
    })
}
