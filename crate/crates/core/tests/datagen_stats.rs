use mta_core::datagen::{generate, SynthSpec};
use mta_core::metrics::correlation;
use mta_core::{ImpressionSource, ResponseModel};

#[test]
fn no_ad_effect_means_no_correlation() {
    let spec = SynthSpec {
        users: 100_000,
        own_weight_mean: 0.0,
        own_weight_spread: 0.0,
        competitor_weight_mean: 0.0,
        competitor_weight_spread: 0.0,
        targeting_bias: 0.0,
        seed: 21,
        ..Default::default()
    };
    let syn = generate(&spec, 1).unwrap();
    let ds = &syn.dataset;
    let labels = ds.label_matrix();
    let nb = ds.dims.brands;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (u, l) in ds.users.iter().zip(&labels) {
        for b in 0..nb {
            x.push(u.impressions.brand_total(b) as f64);
            let bought = (0..ds.dims.days).any(|t| l[(t * nb + b) as usize] != 0);
            y.push(if bought { 1.0 } else { 0.0 });
        }
    }
    let rho = correlation(&x, &y).unwrap();
    assert!(rho.abs() < 0.02, "correlation {rho}");
}

#[test]
fn purchase_rate_rises_with_exposure() {
    let spec = SynthSpec {
        users: 50_000,
        own_weight_mean: 0.5,
        own_weight_spread: 0.1,
        targeting_bias: 0.0,
        seed: 22,
        ..Default::default()
    };
    let syn = generate(&spec, 1).unwrap();
    assert!(syn.truth.position_weights.iter().all(|&w| w > 0.0));
    let ds = &syn.dataset;
    let labels = ds.label_matrix();
    let nb = ds.dims.brands;
    let mut pairs: Vec<(u64, bool)> = Vec::new();
    for (u, l) in ds.users.iter().zip(&labels) {
        for b in 0..nb {
            let bought = (0..ds.dims.days).any(|t| l[(t * nb + b) as usize] != 0);
            pairs.push((u.impressions.brand_total(b), bought));
        }
    }
    pairs.sort_by_key(|p| p.0);
    // decile edges by value, so equal counts never straddle two groups
    let mut edges: Vec<u64> = (1..10).map(|i| pairs[i * pairs.len() / 10].0).collect();
    edges.dedup();
    let group = |c: u64| edges.iter().filter(|&&e| c >= e).count();
    let mut hits = vec![(0u64, 0u64); edges.len() + 1];
    for (c, bought) in &pairs {
        let g = &mut hits[group(*c)];
        g.0 += *bought as u64;
        g.1 += 1;
    }
    let rates: Vec<f64> = hits.iter().map(|(h, n)| *h as f64 / *n as f64).collect();
    assert!(rates.len() >= 5, "{rates:?}");
    assert!(rates.windows(2).all(|w| w[1] > w[0]), "{rates:?}");
}

#[test]
fn label_rate_matches_ground_truth_mean() {
    let syn = generate(
        &SynthSpec {
            users: 20_000,
            targeting_bias: 0.5,
            seed: 23,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let ds = &syn.dataset;
    let (mut expected, mut var, mut n) = (0.0, 0.0, 0usize);
    for u in &ds.users {
        for t in 0..ds.dims.days {
            for b in 0..ds.dims.brands {
                let p = syn
                    .truth
                    .predict(&u.impressions, &ds.prices, &u.features, b, t)
                    .unwrap();
                expected += p;
                var += p * (1.0 - p);
                n += 1;
            }
        }
    }
    let observed = ds.orders.len() as f64;
    let se = var.sqrt();
    assert!(
        (observed - expected).abs() <= 3.0 * se,
        "{observed} vs {expected} ± {se} over {n}"
    );
    assert_eq!(ds.users[0].impressions.dims(), ds.dims);
}
