use lgp::basis::MeanSpec;
use lgp::data::ResponseValue;
use lgp::fit::{FitMethod, FitResult};
use lgp::kernels::KernelSpec;
use lgp::measurement::{Item, LinearFactorItem, MeasurementSpec, ProbitItem};
use lgp::model::{ConstraintSet, GroupPrior, ModelSpec};
use lgp::posterior::PosteriorCurve;
use lgp::simulate::{
    curve_recovery, mse_report, sample_schedule, simulate_dataset, GroupShare, PerDay, SimConfig,
};
use lgp::LgpError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linear(alpha: f64, c2: f64, kappa: f64, sigma2: f64) -> ModelSpec {
    ModelSpec::shared(
        MeanSpec::constant(alpha),
        KernelSpec::se(c2.sqrt(), kappa),
        vec![Item::Linear(LinearFactorItem { a: 1.0, b: 0.0, sigma2 })],
        ConstraintSet::default(),
    )
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn continuous_values(r: &[ResponseValue]) -> f64 {
    match r[0] {
        ResponseValue::Continuous(y) => y,
        other => panic!("expected a continuous response, got {other:?}"),
    }
}

/// Mean over individuals of a per-individual statistic, with its standard error.
fn mean_and_se(per_individual: &[f64]) -> (f64, f64) {
    let n = per_individual.len() as f64;
    let m = per_individual.iter().sum::<f64>() / n;
    let v = per_individual.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

proptest! {
    #[test]
    fn schedules_respect_day_bins(min in 1usize..5, extra in 0usize..4, days in 1usize..10, seed in any::<u64>()) {
        let mut cfg = SimConfig::new(1, days, 1, linear(0.0, 1.0, 0.3, 0.1), 0);
        cfg.per_day = PerDay::Range { min, max: min + extra };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_schedule(&cfg, 0, &mut rng);
        prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
        for d in 0..days {
            let k = t.iter().filter(|&&x| x >= d as f64 && x < (d + 1) as f64).count();
            prop_assert!(k >= min && k <= min + extra, "day {} has {} prompts", d, k);
        }
        prop_assert!(t.iter().all(|&x| x >= 0.0 && x < days as f64));
    }
}

#[test]
fn fixed_schedule_has_exact_counts() {
    let sim = simulate_dataset(&SimConfig::new(20, 7, 3, linear(1.5, 0.4, 0.3, 0.1), 4)).unwrap();
    for (s, truth) in sim.dataset.individuals.iter().zip(&sim.truth) {
        assert_eq!(s.times.len(), 21);
        assert_eq!(truth.theta_obs.len(), 21);
        assert_eq!(truth.theta_grid.len(), sim.grid.len());
    }
    assert_eq!(sim.grid.first(), Some(&0.0));
    assert_eq!(sim.grid.last(), Some(&7.0));
}

#[test]
fn linear_indicator_variance_is_signal_plus_noise() {
    let sim = simulate_dataset(&SimConfig::new(400, 25, 4, linear(1.5, 0.4, 0.3, 0.1), 7)).unwrap();
    let per: Vec<f64> = sim
        .dataset
        .individuals
        .iter()
        .map(|s| s.responses.iter().map(|r| (continuous_values(r) - 1.5).powi(2)).sum::<f64>() / s.times.len() as f64)
        .collect();
    let (m, se) = mean_and_se(&per);
    assert!((m - 0.5).abs() < 3.0 * se, "Var(Y) {m} ± {se}");
}

#[test]
fn probit_category_frequencies_match_marginal_law() {
    let (alpha, c2, a, d): (f64, f64, f64, [f64; 2]) = (-0.79, 1.27, 1.0, [0.0, 1.84]);
    let model = ModelSpec::shared(
        MeanSpec::constant(alpha),
        KernelSpec::se(c2.sqrt(), 0.3),
        vec![Item::Probit(ProbitItem { a, thresholds: d.to_vec() })],
        ConstraintSet::default(),
    );
    let sim = simulate_dataset(&SimConfig::new(400, 25, 4, model, 8)).unwrap();
    // Y* = −aθ + ε with θ ~ N(α, c²): P(Y* < b) = Φ((b + aα) / √(1 + a²c²))
    let s = (1.0 + a * a * c2).sqrt();
    let below = |b: f64| phi((b + a * alpha) / s);
    let want = [below(d[0]), below(d[1]) - below(d[0]), 1.0 - below(d[1])];
    for (level, p) in want.iter().enumerate() {
        let per: Vec<f64> = sim
            .dataset
            .individuals
            .iter()
            .map(|s| {
                let hits = s.responses.iter().filter(|r| r[0] == ResponseValue::Ordinal(level as u32)).count();
                hits as f64 / s.times.len() as f64
            })
            .collect();
        let (m, se) = mean_and_se(&per);
        assert!((m - p).abs() < 3.0 * se, "level {level}: {m} ± {se} vs {p}");
    }
}

#[test]
fn negligible_kernel_scale_pins_curve_to_mean() {
    let model = ModelSpec::shared(
        MeanSpec::constant(0.8),
        KernelSpec::se(1e-6, 0.3),
        vec![Item::Linear(LinearFactorItem { a: 1.0, b: 0.0, sigma2: 0.1 })],
        ConstraintSet::default(),
    );
    let sim = simulate_dataset(&SimConfig::new(10, 3, 4, model, 1)).unwrap();
    for t in &sim.truth {
        assert!(t.theta_obs.iter().chain(&t.theta_grid).all(|x| (x - 0.8).abs() < 1e-4));
    }
}

#[test]
fn grid_covariance_matches_kernel() {
    let (c2, kappa) = (0.6, 0.4);
    let mut cfg = SimConfig::new(10_000, 2, 1, linear(0.0, c2, kappa, 0.1), 12);
    cfg.grid_points = 5;
    let sim = simulate_dataset(&cfg).unwrap();
    let g = &sim.grid;
    let n = sim.truth.len() as f64;
    let p = g.len();
    let k = |a: usize, b: usize| c2 * (-(g[a] - g[b]).powi(2) / (2.0 * kappa * kappa)).exp();
    let mut err2 = 0.0;
    let mut expected2 = 0.0;
    for a in 0..p {
        for b in 0..p {
            let s_ab = sim.truth.iter().map(|t| t.theta_grid[a] * t.theta_grid[b]).sum::<f64>() / n;
            err2 += (s_ab - k(a, b)).powi(2);
            expected2 += (k(a, a) * k(b, b) + k(a, b).powi(2)) / n;
        }
    }
    assert!(err2.sqrt() < 3.0 * expected2.sqrt(), "{} vs bound {}", err2.sqrt(), 3.0 * expected2.sqrt());
}

#[test]
fn group_moments_follow_their_priors() {
    let prior = |label: &str, alpha: f64, c2: f64| GroupPrior {
        label: Some(label.into()),
        mean: MeanSpec::constant(alpha),
        kernel: KernelSpec::se(c2.sqrt(), 0.25),
    };
    let model = ModelSpec {
        priors: vec![prior("a", 1.0, 0.2), prior("b", 2.0, 0.8)],
        measurement: MeasurementSpec {
            items: vec![Item::Linear(LinearFactorItem { a: 1.0, b: 0.0, sigma2: 0.1 })],
        },
        constraints: ConstraintSet::default(),
    };
    let mut cfg = SimConfig::new(600, 10, 4, model, 3);
    cfg.group_mix = Some(vec![
        GroupShare { label: "a".into(), share: 1.0 },
        GroupShare { label: "b".into(), share: 2.0 },
    ]);
    let sim = simulate_dataset(&cfg).unwrap();
    assert_eq!(sim.dataset.groups, vec!["a".to_string(), "b".to_string()]);
    for (label, alpha, c2, size) in [("a", 1.0, 0.2, 200), ("b", 2.0, 0.8, 400)] {
        let members: Vec<_> = sim
            .dataset
            .individuals
            .iter()
            .filter(|s| s.covariates.group.as_deref() == Some(label))
            .collect();
        assert_eq!(members.len(), size);
        let means: Vec<f64> = members
            .iter()
            .map(|s| s.responses.iter().map(|r| continuous_values(r)).sum::<f64>() / s.times.len() as f64)
            .collect();
        let (m, se) = mean_and_se(&means);
        assert!((m - alpha).abs() < 3.0 * se, "group {label} mean {m} ± {se}");
        let spread: Vec<f64> = members
            .iter()
            .map(|s| s.responses.iter().map(|r| (continuous_values(r) - alpha).powi(2)).sum::<f64>() / s.times.len() as f64)
            .collect();
        let (v, se) = mean_and_se(&spread);
        assert!((v - c2 - 0.1).abs() < 3.0 * se, "group {label} variance {v} ± {se}");
    }
}

#[test]
fn simulation_is_a_function_of_the_seed() {
    let cfg = SimConfig::new(15, 3, 4, linear(1.5, 0.4, 0.3, 0.1), 77);
    assert_eq!(simulate_dataset(&cfg).unwrap(), simulate_dataset(&cfg).unwrap());
    let other = SimConfig { seed: 78, ..cfg.clone() };
    assert_ne!(simulate_dataset(&cfg).unwrap().truth, simulate_dataset(&other).unwrap().truth);
}

#[test]
fn invalid_designs_are_rejected() {
    let base = SimConfig::new(5, 2, 2, linear(1.5, 0.4, 0.3, 0.1), 1);
    for bad in [
        SimConfig { n: 0, ..base.clone() },
        SimConfig { days: 0, ..base.clone() },
        SimConfig { per_day: PerDay::Range { min: 3, max: 2 }, ..base.clone() },
    ] {
        assert!(matches!(simulate_dataset(&bad), Err(LgpError::InvalidModel(_))));
    }
}

fn fit_at(model: &ModelSpec) -> FitResult {
    FitResult {
        method: FitMethod::Em,
        psi_hat: model.clone(),
        param_names: model.report_names(),
        fixed: model.fixed_mask(),
        loglik: 0.0,
        trace: Vec::new(),
        iterations: 0,
        m0: None,
        m: None,
        converged: true,
        reason: String::new(),
    }
}

#[test]
fn mse_report_scores_free_parameters() {
    let truth = linear(1.5, 0.4, 0.3, 0.1);
    let exact = mse_report(&truth, &[fit_at(&truth), fit_at(&truth)]).unwrap();
    assert_eq!(exact.get("alpha0"), Some(0.0));
    assert_eq!(exact.get("a1"), None);
    assert_eq!(exact.get("b1"), None);
    let off = mse_report(&truth, &[fit_at(&linear(1.7, 0.4, 0.3, 0.1)), fit_at(&linear(1.5, 0.4, 0.3, 0.1))]).unwrap();
    assert!((off.get("alpha0").unwrap() - 0.02).abs() < 1e-12);
    assert_eq!(off.replications, 2);
    assert!(mse_report(&truth, &[]).is_err());
}

fn curve(grid: &[f64], mean: Vec<f64>) -> PosteriorCurve {
    PosteriorCurve {
        grid: grid.to_vec(),
        mean,
        quantiles: Vec::new(),
        n_samples: 0,
        mc_se: None,
    }
}

#[test]
fn curve_recovery_on_known_curves() {
    let grid = [0.0, 0.5, 1.0];
    let truth = vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]];
    let curves = vec![curve(&grid, vec![1.0, 2.0, 3.0]), curve(&grid, vec![0.5, 0.5, 0.5])];
    let r = curve_recovery(&grid, &truth, &curves, &[vec![0.0; 3]]).unwrap();
    assert_eq!(r.d[0], 0.0);
    assert!((r.d[1] - 0.5).abs() < 1e-12);
    assert!(r.ratio[1].is_nan());
    assert_eq!(r.share_below_one, 1.0);

    let shifted = vec![curve(&[0.0, 0.4, 1.0], vec![1.0, 2.0, 3.0]), curves[1].clone()];
    assert!(curve_recovery(&grid, &truth, &shifted, &[vec![0.0; 3]]).is_err());
    assert!(curve_recovery(&grid, &truth, &curves[..1], &[vec![0.0; 3]]).is_err());
}
