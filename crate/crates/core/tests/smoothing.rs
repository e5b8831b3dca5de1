//! Smoothing-parameter selection and the fitted correlation on simulated data.

use causaltm_core::data::{Column, DataSet};
use causaltm_core::design::{DesignBundle, ModelSpec, Term};
use causaltm_core::optimizer::{fit, FitOptions};
use causaltm_core::simulate::{generate, DgpConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent errors, a binary instrument, and `log T = e1 - 0.5 d - g(w)`
/// censored uniformly on `(0, 8)`.
fn smooth_data(n: usize, seed: u64, g: fn(f64) -> f64) -> DataSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut time, mut event, mut treat, mut w, mut z) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let wi: f64 = rng.gen();
        let zi = usize::from(rng.gen::<bool>());
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let d = -0.3 + 1.5 * zi as f64 + e2 > 0.0;
        let t = (e1 - 0.5 * f64::from(u8::from(d)) - g(wi)).exp();
        let c = 8.0 * rng.gen::<f64>();
        time.push(t.min(c).max(1e-8));
        event.push(t <= c);
        treat.push(d);
        w.push(wi);
        z.push(zi);
    }
    let cols = vec![Column::numeric("w", w), Column::categorical("z", &z, vec!["0".into(), "1".into()])];
    DataSet::new("t", "d", time, event, treat, cols).unwrap()
}

fn smooth_spec() -> ModelSpec {
    ModelSpec {
        outcome: vec![
            Term::Monotone { basis_size: 8 },
            Term::Smooth { column: "w".into(), basis_size: 10 },
            Term::Treatment,
        ],
        selection: vec![Term::Parametric { column: "z".into() }],
        instruments: vec!["z".into()],
    }
}

fn smooth_edf(data: &DataSet) -> f64 {
    let b = DesignBundle::assemble(&smooth_spec(), data).unwrap();
    let f = fit(&b, &FitOptions::default()).unwrap();
    assert!(f.convergence.converged);
    let k = b.layout.terms.iter().position(|t| t.label == "s(w)").unwrap();
    f.term_edf[k]
}

/// AIC keeps one extra degree of freedom whenever it gains more than 2 in
/// deviance, so on pure noise the selected smooth stays within 2 edf with
/// probability near `P(chi2_1 <= 2) = 0.843`, not 0.9.
#[test]
fn noise_smooth_mostly_selects_at_most_two_edf() {
    let replicates = 100u64;
    let small = (0..replicates).filter(|&r| smooth_edf(&smooth_data(500, 100 + r, |_| 0.0)) <= 2.0).count() as u64;
    println!("{small} of {replicates} null replicates with edf <= 2");
    assert!(small >= 75, "{small} of {replicates} replicates with edf <= 2");
}

#[test]
fn cubic_signal_selects_at_least_three_edf() {
    // 1.5 T3(2w - 1): two turning points inside (0, 1)
    let g = |w: f64| {
        let u = 2.0 * w - 1.0;
        1.5 * (4.0 * u * u * u - 3.0 * u)
    };
    for seed in [1, 2, 3] {
        let edf = smooth_edf(&smooth_data(1000, seed, g));
        assert!(edf >= 3.0, "seed {seed}: edf {edf}");
    }
}

#[test]
fn correlation_estimate_centres_on_zero_without_confounding() {
    let config = DgpConfig::with_rho(500, 0.0);
    let spec = config.model_spec(6);
    let estimates: Vec<f64> = (0..100)
        .map(|r| {
            let b = DesignBundle::assemble(&spec, &generate(&config, 500 + r).unwrap()).unwrap();
            let f = fit(&b, &FitOptions::default()).unwrap();
            assert!(f.convergence.converged);
            f.delta[b.layout.rho_index()]
        })
        .collect();
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let sd = (estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    assert!(mean.abs() <= 2.0 * sd / m.sqrt(), "mean rho* {mean}, sd {sd}");
}

