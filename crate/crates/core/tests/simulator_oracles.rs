use molcomm::channel::f_ideal;
use molcomm::simulator::{self, simulate};
use molcomm::{ChannelGeometry, ErfcKernel, SimulationConfig};

fn terminal(geom: ChannelGeometry, seed: u64, dt_us: f64, t_end: f64) -> f64 {
    let mut cfg = SimulationConfig::new(geom, seed);
    cfg.dt_us = dt_us;
    cfg.t_end = t_end;
    simulate(&cfg).unwrap().last_value()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

// A 1 µm transmitter barely reflects anything back, so the hitting
// probability of a point source applies.
#[test]
fn small_tx_terminal_fraction_matches_point_source() {
    let g = ChannelGeometry::new(10.0, 5.0, 1.0, 100.0, 3000).unwrap();
    let runs: Vec<f64> = (0..20).map(|s| terminal(g, 1000 + s, 50.0, 1.0)).collect();
    let (mean, _) = mean_sd(&runs);
    let oracle = f_ideal(&g, 1.0, ErfcKernel::Exact).unwrap();
    assert!((mean - oracle).abs() <= 0.03, "simulated {mean}, analytic {oracle}");
}

// Release is on the Tx surface facing the Rx; a bigger reflecting Tx blocks
// more of the escape routes behind it.
#[test]
fn larger_reflecting_tx_raises_hits() {
    let small = ChannelGeometry::new(6.0, 5.0, 1.0, 100.0, 3000).unwrap();
    let large = ChannelGeometry::new(6.0, 5.0, 5.0, 100.0, 3000).unwrap();
    let a: f64 = (0..3).map(|s| terminal(small, s, 50.0, 0.5)).sum();
    let b: f64 = (0..3).map(|s| terminal(large, s, 50.0, 0.5)).sum();
    assert!(b > a, "r=1 gives {a}, r=5 gives {b}");
}

// Standard error scales as 1/sqrt(n_tx): doubling n_tx shrinks it by sqrt(2).
#[test]
fn standard_error_scales_with_molecule_count() {
    let sd = |n: u32| {
        let g = ChannelGeometry::new(2.0, 5.0, 5.0, 100.0, n).unwrap();
        let runs: Vec<f64> = (0..50).map(|s| terminal(g, 7000 + s, 50.0, 0.2)).collect();
        mean_sd(&runs).1
    };
    let ratio = sd(500) / sd(1000);
    assert!((1.1..1.8).contains(&ratio), "sd ratio {ratio}");
}

#[test]
fn halving_dt_stays_within_noise() {
    let g = ChannelGeometry::new(6.0, 5.0, 5.0, 100.0, 3000).unwrap();
    let seeds = 3;
    let coarse: f64 = (0..seeds).map(|s| terminal(g, 300 + s, 50.0, 1.0)).sum::<f64>() / seeds as f64;
    let fine: f64 = (0..seeds).map(|s| terminal(g, 400 + s, 25.0, 1.0)).sum::<f64>() / seeds as f64;
    let n = (seeds * 3000) as f64;
    let p = 0.5 * (coarse + fine);
    let se = (2.0 * p * (1.0 - p) / n).sqrt();
    assert!((fine - coarse).abs() < 2.0 * se, "coarse {coarse}, fine {fine}, se {se}");
}

#[test]
fn observations_partition_the_curve() {
    let g = ChannelGeometry::new(4.0, 5.0, 5.0, 100.0, 3000).unwrap();
    let curve = simulate(&SimulationConfig::new(g, 5)).unwrap();
    for m in [2, 5, 15, 30] {
        let obs = simulator::observe_increments(&curve, 3000, 0.02, m, 1.0).unwrap();
        let total: f64 = obs.counts().iter().sum();
        assert_eq!(total, (curve.last_value() * 3000.0).round());
        assert!(obs.counts().iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
    }
}

#[test]
fn curve_ends_exactly_at_horizon() {
    let g = ChannelGeometry::new(4.0, 5.0, 5.0, 100.0, 100).unwrap();
    let curve = simulate(&SimulationConfig::new(g, 1)).unwrap();
    assert_eq!(*curve.times().last().unwrap(), 1.0);
    assert_eq!(curve.len(), 20_000);
}

// About twenty minutes on one core: `cargo test -- --ignored slot_means`.
#[test]
#[ignore]
fn slot_means_match_fitted_model() {
    use molcomm::estimator::slot_means;
    use molcomm::{ChannelModel, ModelOptions, PsoConfig};

    let g = ChannelGeometry::new(4.0, 5.0, 5.0, 100.0, 3000).unwrap();
    let train = simulate(&SimulationConfig::new(g, 0)).unwrap().subsample(100);
    let cfg = PsoConfig {
        seed: 1,
        model: ModelOptions::consistent(),
        ..PsoConfig::default()
    };
    let fitted = molcomm::pso::fit(&g, &train, &cfg).unwrap();
    let model = ChannelModel::new(g, fitted.params, ModelOptions::consistent());
    let times = simulator::sample_grid(0.02, 15, 1.0).unwrap();
    let lambda = slot_means(&model, &times).unwrap();

    let seeds = 1000;
    let mut sum = vec![0.0; 15];
    let mut sq = vec![0.0; 15];
    for s in 0..seeds {
        let curve = simulate(&SimulationConfig::new(g, 10_000 + s)).unwrap();
        let obs = simulator::observe_increments(&curve, 3000, 0.02, 15, 1.0).unwrap();
        for (i, c) in obs.counts().iter().enumerate() {
            sum[i] += c;
            sq[i] += c * c;
        }
    }
    let n = seeds as f64;
    let mut bad = Vec::new();
    for i in 0..15 {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean) / (n - 1.0)).sqrt();
        let z = (mean - lambda[i]) / se;
        eprintln!("slot {i}: empirical {mean:.3}, model {:.3}, z {z:.2}", lambda[i]);
        if z.abs() > 3.0 {
            bad.push(i);
        }
    }
    assert!(bad.is_empty(), "slots beyond 3 standard errors: {bad:?}");
}
