//! Per-order Shapley credit over ad-position-day tuples.
//!
//! The players are the tuples of an order's exposure set `N`. A coalition
//! `S ⊆ N` is valued through the response model on the counterfactual
//! history that keeps only `S` for the order's brand:
//! `w(S) = σ(Γ_b(x, S)) − σ(Γ_b(x, ∅))`, so `w(∅) = 0` and `w(N) = Δ`.
//!
//! Small exposure sets are enumerated exactly; larger ones are estimated
//! from uniformly sampled permutations. Either way the credits are rescaled
//! by `Δ / Σ credits` and summed across days into per-position credit.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, ShapleyError};
use crate::masking::{Coalition, FocalIndex};
use crate::response::ResponseModel;
use crate::types::{ExposureSet, ImpressionTensor, Order, PriceSeries, TupleCredit, UserFeatures};

/// How credits are computed for an order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Always enumerate the power set.
    Exact,
    /// Always sample permutations.
    MonteCarlo,
    /// Exact up to the cutoff, sampled above it.
    Mixed,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(Strategy::Exact),
            "mc" | "approx" | "approximate" => Ok(Strategy::MonteCarlo),
            "mixed" => Ok(Strategy::Mixed),
            other => Err(format!(
                "unknown method `{other}` (expected exact, mc or mixed)"
            )),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Exact => "exact",
            Strategy::MonteCarlo => "mc",
            Strategy::Mixed => "mixed",
        })
    }
}

/// The kernel actually used for one order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    /// Largest `|N|` handled by exact enumeration under [`Strategy::Mixed`].
    pub exact_cutoff: usize,
    /// Permutations drawn per order by the sampling kernel.
    pub mc_permutations: usize,
    /// Global seed; each order derives its own stream from it.
    pub seed: u64,
    /// Maximum number of coalition evaluations for exact enumeration.
    pub evaluation_budget: u64,
    pub strategy: Strategy,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            exact_cutoff: 12,
            mc_permutations: 1000,
            seed: 0,
            evaluation_budget: 1 << 24,
            strategy: Strategy::Mixed,
        }
    }
}

impl ShapleyConfig {
    pub fn validate(&self) -> Result<(), ShapleyError> {
        if self.exact_cutoff == 0 {
            return Err(ShapleyError::InvalidConfig(
                "exact_cutoff must be at least 1".into(),
            ));
        }
        if self.mc_permutations == 0 {
            return Err(ShapleyError::InvalidConfig(
                "mc_permutations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn uses_exact(&self, tuples: usize) -> bool {
        match self.strategy {
            Strategy::Exact => true,
            Strategy::MonteCarlo => false,
            Strategy::Mixed => tuples <= self.exact_cutoff,
        }
    }
}

/// Everything needed to value coalitions of one order.
#[derive(Debug, Clone)]
pub struct OrderContext<'a> {
    pub tensor: &'a ImpressionTensor,
    pub prices: &'a PriceSeries,
    pub features: &'a UserFeatures,
    pub brand: u32,
    pub day: u32,
    index: FocalIndex,
}

impl<'a> OrderContext<'a> {
    /// The exposure set covers the order brand's tuples on days `..= day`.
    pub fn new(
        tensor: &'a ImpressionTensor,
        prices: &'a PriceSeries,
        features: &'a UserFeatures,
        brand: u32,
        day: u32,
    ) -> Self {
        OrderContext {
            tensor,
            prices,
            features,
            brand,
            day,
            index: FocalIndex::new(tensor, brand, day),
        }
    }

    pub fn exposure(&self) -> &ExposureSet {
        self.index.exposure()
    }

    pub fn len(&self) -> usize {
        self.exposure().cardinality()
    }

    pub fn is_empty(&self) -> bool {
        self.exposure().is_empty()
    }

    pub fn empty_coalition(&self) -> Coalition {
        Coalition::empty(self.len())
    }

    pub fn full_coalition(&self) -> Coalition {
        Coalition::full(self.len())
    }

    /// `σ(Γ_b(x, S), p, d)`
    pub fn sigma<M: ResponseModel + ?Sized>(
        &self,
        model: &M,
        coalition: &Coalition,
    ) -> Result<f64, ModelError> {
        let view = self.index.view(self.tensor, coalition);
        model.predict(&view, self.prices, self.features, self.brand, self.day)
    }
}

/// `w(S) = σ(Γ(x, S)) − σ(Γ(x, ∅))`; exactly zero for the empty coalition.
pub fn marginal_value<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
    coalition: &Coalition,
) -> Result<f64, ModelError> {
    if coalition.is_empty() {
        return Ok(0.0);
    }
    Ok(ctx.sigma(model, coalition)? - ctx.sigma(model, &ctx.empty_coalition())?)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact Shapley values by a single pass over the power set.
///
/// Each coalition `S` is valued once; its value enters the credit of every
/// member with weight `(n−|S|)!(|S|−1)!/n!` and of every non-member with
/// weight `−|S|!(n−|S|−1)!/n!`, which regroups to the usual sum of weighted
/// marginal contributions.
pub fn shapley_exact<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
    budget: u64,
) -> Result<TupleCredit, ShapleyError> {
    let n = ctx.len();
    if n == 0 {
        return Ok(TupleCredit::default());
    }
    if n >= 63 || (1u64 << n) > budget {
        return Err(ShapleyError::CoalitionOverflow { tuples: n, budget });
    }
    // weight_in[s] for members of a size-s coalition, weight_out[s] for non-members
    let weight_in: Vec<f64> = (0..=n)
        .map(|s| {
            if s == 0 {
                0.0
            } else {
                1.0 / (n as f64 * binomial(n - 1, s - 1))
            }
        })
        .collect();
    let weight_out: Vec<f64> = (0..=n)
        .map(|s| {
            if s == n {
                0.0
            } else {
                1.0 / (n as f64 * binomial(n - 1, s))
            }
        })
        .collect();

    let mut coalition = ctx.empty_coalition();
    let base = ctx.sigma(model, &coalition)?;
    let mut credit = vec![0.0; n];
    for mask in 1u64..(1u64 << n) {
        coalition.set_mask(mask);
        let w = ctx.sigma(model, &coalition)? - base;
        let s = mask.count_ones() as usize;
        let (win, wout) = (weight_in[s] * w, weight_out[s] * w);
        for (j, c) in credit.iter_mut().enumerate() {
            if mask >> j & 1 == 1 {
                *c += win;
            } else {
                *c -= wout;
            }
        }
    }
    Ok(TupleCredit::from_values(ctx.exposure(), credit))
}

/// Monte Carlo estimate with per-tuple standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub credits: TupleCredit,
    /// Standard error of each credit (sample std of marginal contributions / √m).
    pub std_errors: Vec<f64>,
    /// Distinct coalitions evaluated.
    pub evaluations: usize,
}

const MC_CACHE_LIMIT: usize = 1 << 16;

/// Permutation-sampling Shapley estimate from `m` seeded draws.
pub fn shapley_mc<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
    m: usize,
    seed: u64,
) -> Result<TupleCredit, ShapleyError> {
    Ok(shapley_mc_with_stats(model, ctx, m, seed)?.credits)
}

/// As [`shapley_mc`], also reporting standard errors.
///
/// For each drawn permutation the tuples are added one at a time; a tuple's
/// sample is the change in `σ` when it joins its predecessors. Coalition
/// values are memoized within the order.
pub fn shapley_mc_with_stats<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
    m: usize,
    seed: u64,
) -> Result<McEstimate, ShapleyError> {
    if m == 0 {
        return Err(ShapleyError::InvalidConfig(
            "mc_permutations must be at least 1".into(),
        ));
    }
    let n = ctx.len();
    if n == 0 {
        return Ok(McEstimate {
            credits: TupleCredit::default(),
            std_errors: Vec::new(),
            evaluations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<Coalition, f64> = HashMap::new();
    let mut coalition = ctx.empty_coalition();
    let empty = ctx.sigma(model, &coalition)?;
    let full = ctx.sigma(model, &ctx.full_coalition())?;
    let mut evaluations = 2;
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..m {
        perm.shuffle(&mut rng);
        coalition.clear();
        let mut prev = empty;
        for (step, &j) in perm.iter().enumerate() {
            coalition.insert(j);
            let cur = if step + 1 == n {
                full
            } else if let Some(&v) = cache.get(&coalition) {
                v
            } else {
                let v = ctx.sigma(model, &coalition)?;
                evaluations += 1;
                if cache.len() < MC_CACHE_LIMIT {
                    cache.insert(coalition.clone(), v);
                }
                v
            };
            let d = cur - prev;
            sum[j] += d;
            sum_sq[j] += d * d;
            prev = cur;
        }
    }
    let mf = m as f64;
    let credits: Vec<f64> = sum.iter().map(|s| s / mf).collect();
    let std_errors = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, sq)| {
            if m < 2 {
                return f64::INFINITY;
            }
            let var = ((sq - s * s / mf) / (mf - 1.0)).max(0.0);
            (var / mf).sqrt()
        })
        .collect();
    Ok(McEstimate {
        credits: TupleCredit::from_values(ctx.exposure(), credits),
        std_errors,
        evaluations,
    })
}

/// Credits of one order after normalization and per-position aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderAttribution {
    pub tuple_credits: TupleCredit,
    /// `ϱ_k = Σ_t ϱ_{k,t}`
    pub position_credits: BTreeMap<u32, f64>,
    /// `Δ = σ(full) − σ(∅)`
    pub delta: f64,
    pub sigma_full: f64,
    pub sigma_empty: f64,
    /// `SA`, the credit total before rescaling.
    pub raw_sum: f64,
    /// `None` when the exposure set is empty.
    pub method: Option<Method>,
}

impl OrderAttribution {
    /// Share of the predicted purchase probability due to the brand's ads.
    pub fn incrementality_ratio(&self) -> f64 {
        if self.sigma_full > 0.0 {
            self.delta / self.sigma_full
        } else {
            0.0
        }
    }
}

/// Rescales raw credits so they sum to `delta`.
pub fn normalize_credits(raw: &mut [f64], delta: f64) -> Result<f64, ShapleyError> {
    let sa: f64 = raw.iter().sum();
    if sa == 0.0 {
        if delta == 0.0 {
            raw.iter_mut().for_each(|c| *c = 0.0);
            return Ok(sa);
        }
        return Err(ShapleyError::DegenerateAllocation { delta });
    }
    let factor = delta / sa;
    raw.iter_mut().for_each(|c| *c *= factor);
    Ok(sa)
}

/// Sums tuple credits across days for each position.
pub fn position_credits(credits: &TupleCredit) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for (t, v) in credits.iter() {
        *out.entry(t.position).or_insert(0.0) += v;
    }
    out
}

/// Full per-order attribution: choose a kernel, compute `Δ`, rescale credits
/// by `Δ / SA` and aggregate per position.
pub fn attribute_order<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
    order: &Order,
    config: &ShapleyConfig,
) -> Result<OrderAttribution, ShapleyError> {
    config.validate()?;
    let n = ctx.len();
    let sigma_full = ctx.sigma(model, &ctx.full_coalition())?;
    let sigma_empty = if n == 0 {
        sigma_full
    } else {
        ctx.sigma(model, &ctx.empty_coalition())?
    };
    let delta = sigma_full - sigma_empty;
    if n == 0 {
        return Ok(OrderAttribution {
            tuple_credits: TupleCredit::default(),
            position_credits: BTreeMap::new(),
            delta,
            sigma_full,
            sigma_empty,
            raw_sum: 0.0,
            method: None,
        });
    }
    let (mut credits, method) = if config.uses_exact(n) {
        (
            shapley_exact(model, ctx, config.evaluation_budget)?,
            Method::Exact,
        )
    } else {
        let seed = crate::seed::order_seed(config.seed, order.user_id, order.brand, order.day);
        (
            shapley_mc(model, ctx, config.mc_permutations, seed)?,
            Method::Approximate,
        )
    };
    let mut raw: Vec<f64> = credits.values().collect();
    let raw_sum = normalize_credits(&mut raw, delta)?;
    if method == Method::Exact && delta.abs() > 1e-9 && raw_sum != 0.0 {
        let ratio = delta / raw_sum;
        if (ratio - 1.0).abs() > 1e-6 {
            log::warn!(
                "order {:?}: exact credits sum to {raw_sum}, delta is {delta}",
                order
            );
        }
    }
    credits = TupleCredit::new(credits.iter().map(|(t, _)| t).zip(raw).collect());
    Ok(OrderAttribution {
        position_credits: position_credits(&credits),
        tuple_credits: credits,
        delta,
        sigma_full,
        sigma_empty,
        raw_sum,
        method: Some(method),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::ModelShape;
    use crate::types::{Cell, Dims, ImpressionSource, Tuple};

    /// σ = base + Σ effect(k,t) over kept own-brand cells, plus one pairwise
    /// interaction.
    struct TableModel {
        shape: ModelShape,
        effects: Vec<f64>,
        interaction: (usize, usize, f64),
    }

    impl ResponseModel for TableModel {
        fn shape(&self) -> ModelShape {
            self.shape
        }

        fn predict(
            &self,
            x: &dyn ImpressionSource,
            _p: &PriceSeries,
            _d: &UserFeatures,
            brand: u32,
            _day: u32,
        ) -> Result<f64, ModelError> {
            let dims = x.dims();
            let mut on = vec![false; (dims.positions * dims.days) as usize];
            x.for_each_nonzero(&mut |c, _| {
                if c.brand == brand {
                    on[(c.day * dims.positions + c.position) as usize] = true;
                }
            });
            let mut v = 0.1;
            for (i, &o) in on.iter().enumerate() {
                if o {
                    v += self.effects[i];
                }
            }
            let (a, b, w) = self.interaction;
            if on[a] && on[b] {
                v += w;
            }
            Ok(v)
        }
    }

    fn fixture(n_cells: u32) -> (ImpressionTensor, PriceSeries, UserFeatures, TableModel) {
        let dims = Dims::new(1, n_cells, 1).unwrap();
        let x =
            ImpressionTensor::from_entries(dims, (0..n_cells).map(|k| (Cell::new(0, k, 0), 1 + k)))
                .unwrap();
        let effects = (0..n_cells).map(|k| 0.01 * (k + 1) as f64).collect();
        let model = TableModel {
            shape: ModelShape::new(dims, 0),
            effects,
            interaction: (0, 1, 0.05),
        };
        (
            x,
            PriceSeries::constant(1, 1, 1.0),
            UserFeatures::zeros(0),
            model,
        )
    }

    #[test]
    fn exact_splits_interaction_evenly() {
        let (x, p, d, m) = fixture(3);
        let ctx = OrderContext::new(&x, &p, &d, 0, 0);
        let c = shapley_exact(&m, &ctx, 1 << 20).unwrap();
        let v: Vec<f64> = c.values().collect();
        assert!((v[0] - 0.035).abs() < 1e-15);
        assert!((v[1] - 0.045).abs() < 1e-15);
        assert!((v[2] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn empty_and_full_coalitions() {
        let (x, p, d, m) = fixture(4);
        let ctx = OrderContext::new(&x, &p, &d, 0, 0);
        assert_eq!(
            marginal_value(&m, &ctx, &ctx.empty_coalition()).unwrap(),
            0.0
        );
        let full = marginal_value(&m, &ctx, &ctx.full_coalition()).unwrap();
        assert!((full - (0.1 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn budget_overflow() {
        let (x, p, d, m) = fixture(12);
        let ctx = OrderContext::new(&x, &p, &d, 0, 0);
        assert_eq!(
            shapley_exact(&m, &ctx, 1024).unwrap_err(),
            ShapleyError::CoalitionOverflow {
                tuples: 12,
                budget: 1024
            }
        );
    }

    #[test]
    fn mc_telescopes_and_is_seeded() {
        let (x, p, d, m) = fixture(6);
        let ctx = OrderContext::new(&x, &p, &d, 0, 0);
        let a = shapley_mc(&m, &ctx, 7, 3).unwrap();
        let b = shapley_mc(&m, &ctx, 7, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.sum() - (0.21 + 0.05)).abs() < 1e-12);
        assert!(shapley_mc(&m, &ctx, 0, 3).is_err());
    }

    #[test]
    fn normalization_edge_cases() {
        let mut zero = vec![0.0, 0.0];
        assert_eq!(normalize_credits(&mut zero, 0.0).unwrap(), 0.0);
        let mut cancel = vec![0.5, -0.5];
        assert_eq!(
            normalize_credits(&mut cancel, 0.2).unwrap_err(),
            ShapleyError::DegenerateAllocation { delta: 0.2 }
        );
        let mut v = vec![1.0, 3.0];
        normalize_credits(&mut v, 2.0).unwrap();
        assert_eq!(v, vec![0.5, 1.5]);
    }

    #[test]
    fn order_without_exposure() {
        let (x, p, d, m) = fixture(2);
        let ctx = OrderContext::new(&x, &p, &d, 0, 0);
        let empty = ImpressionTensor::empty(x.dims());
        let ctx_empty = OrderContext::new(&empty, &p, &d, 0, 0);
        let order = Order {
            user_id: 1,
            brand: 0,
            day: 0,
        };
        let a = attribute_order(&m, &ctx_empty, &order, &ShapleyConfig::default()).unwrap();
        assert!(a.tuple_credits.is_empty() && a.method.is_none());
        assert_eq!(a.delta, 0.0);
        let a = attribute_order(&m, &ctx, &order, &ShapleyConfig::default()).unwrap();
        assert_eq!(a.method, Some(Method::Exact));
        assert_eq!(a.position_credits.len(), 2);
        assert_eq!(
            a.tuple_credits.get(Tuple::new(1, 0)),
            a.position_credits.get(&1).copied()
        );
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("mixed".parse::<Strategy>().unwrap(), Strategy::Mixed);
        assert_eq!("mc".parse::<Strategy>().unwrap(), Strategy::MonteCarlo);
        assert!("fast".parse::<Strategy>().is_err());
    }
}
