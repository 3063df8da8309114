mod common;

use common::*;
use fedmn::routing::{relax, ConcreteNoise};
use fedmn::{RoutingProbs, TemperatureSchedule};

#[test]
fn fraction_above_half_equals_the_probability() {
    for (i, pi) in [0.1, 0.5, 0.7, 0.9].into_iter().enumerate() {
        for (j, tau) in [1.0, 0.1].into_iter().enumerate() {
            let f = concrete_fraction(pi, tau, 100_000, (10 * i + j) as u64);
            assert!((f - pi).abs() <= 0.01, "pi {pi} tau {tau}: {f}");
        }
    }
}

fn entropy(v: f64) -> f64 {
    let v = v.clamp(1e-15, 1.0 - 1e-15);
    -(v * v.ln() + (1.0 - v) * (1.0 - v).ln())
}

#[test]
fn cooling_lowers_mean_entropy_of_relaxed_samples() {
    let schedule = TemperatureSchedule::new(1.0, 0.1, 10).unwrap();
    let probs = RoutingProbs(vec![0.2, 0.5, 0.7, 0.95]);
    let mut prev = f64::INFINITY;
    for t in 1..=10 {
        let tau = schedule.at(t).unwrap();
        let mut total = 0.0;
        let draws = 10_000;
        for k in 0..draws {
            let noise = ConcreteNoise::draw(probs.len(), &mut rng(k));
            let v = relax(&probs, tau, &noise).unwrap();
            total += v.values().iter().map(|&x| entropy(x)).sum::<f64>();
        }
        let mean = total / (draws * probs.len() as u64) as f64;
        assert!(mean <= prev, "round {t}: {mean} > {prev}");
        prev = mean;
    }
}
