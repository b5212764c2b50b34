#![allow(dead_code)]

use mta_core::datagen::GroundTruth;
use mta_core::response::{Dropout, Example, ModelShape, Trainable};
use mta_core::shapley::OrderContext;
use mta_core::{Cell, Dims, ImpressionTensor, Order, PriceSeries, ResponseModel, UserFeatures};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shapley values straight from the definition: the average marginal
/// contribution over all `n!` orderings.
pub fn brute_force_shapley<M: ResponseModel + ?Sized>(
    model: &M,
    ctx: &OrderContext<'_>,
) -> Vec<f64> {
    let n = ctx.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut credit = vec![0.0; n];
    let mut count = 0u64;
    loop {
        let mut coalition = ctx.empty_coalition();
        let mut prev = ctx.sigma(model, &coalition).unwrap();
        for &j in &perm {
            coalition.insert(j);
            let v = ctx.sigma(model, &coalition).unwrap();
            credit[j] += v - prev;
            prev = v;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    credit.iter().map(|c| c / count as f64).collect()
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// A ground truth with every parameter drawn from `rng`.
pub fn random_truth(rng: &mut ChaCha8Rng, dims: Dims, features: usize) -> GroundTruth {
    let (b, k) = (dims.brands as usize, dims.positions as usize);
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let mut competitor = draw(b * b, -0.5, 0.5);
    for i in 0..b {
        competitor[i * b + i] = 0.0;
    }
    GroundTruth {
        shape: ModelShape::new(dims, features),
        decay: 0.7,
        intercepts: draw(b, -3.0, 0.0),
        position_weights: draw(b * k, -0.5, 1.5),
        competitor_weights: competitor,
        price_weights: draw(b, -1.0, 0.0),
        feature_weights: draw(b * features, -0.5, 0.5),
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference check of `accumulate_gradient` on `samples` randomly
/// chosen parameters with nonzero gradient, step `h`.
pub fn gradient_check<M: Trainable>(
    model: &M,
    examples: &[Example<'_>],
    prices: &PriceSeries,
    samples: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let loss = |m: &M| -> f64 {
        examples
            .iter()
            .map(|ex| {
                let mut g = vec![0.0; m.params().len()];
                m.accumulate_gradient(ex, prices, &mut g, None::<&mut Dropout>)
            })
            .sum()
    };
    let mut grad = vec![0.0; model.params().len()];
    for ex in examples {
        model.accumulate_gradient(ex, prices, &mut grad, None);
    }
    let mut candidates: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-7).collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    candidates.truncate(samples);
    let mut worst = (0.0, 0);
    let mut probe = model.clone();
    for &i in &candidates {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(grad[i], numeric, 1e-8);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    GradCheck {
        checked: candidates.len(),
        max_relative_error: worst.0,
        worst_index: worst.1,
    }
}

pub fn instance_dims() -> Dims {
    Dims::new(3, 4, 5).unwrap()
}

/// A random ground truth and one brand-0 order on the last day.
pub struct Instance {
    pub truth: GroundTruth,
    pub tensor: ImpressionTensor,
    pub prices: PriceSeries,
    pub features: UserFeatures,
    pub order: Order,
}

impl Instance {
    pub fn ctx(&self) -> OrderContext<'_> {
        OrderContext::new(
            &self.tensor,
            &self.prices,
            &self.features,
            self.order.brand,
            self.order.day,
        )
    }
}

/// `n` brand-0 tuples spread over all days, plus a few competitor
/// impressions.
pub fn instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = instance_dims();
    let truth = random_truth(&mut rng, d, 2);
    let mut slots: Vec<(u32, u32)> = (0..d.positions)
        .flat_map(|k| (0..d.days).map(move |t| (k, t)))
        .collect();
    slots.shuffle(&mut rng);
    let mut entries: Vec<(Cell, u32)> = slots[..n]
        .iter()
        .map(|&(k, t)| (Cell::new(0, k, t), rng.random_range(1..5)))
        .collect();
    entries.push((Cell::new(1, 2, 1), 3));
    entries.push((Cell::new(2, 0, 4), 1));
    Instance {
        truth,
        tensor: ImpressionTensor::from_entries(d, entries).unwrap(),
        prices: PriceSeries::constant(d.brands, d.days, 1.0),
        features: UserFeatures::new(vec![
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ])
        .unwrap(),
        order: Order {
            user_id: seed,
            brand: 0,
            day: d.days - 1,
        },
    }
}
