//! Monte Carlo checks against synthetic DGPs with known answers.

use ccacr::learners::boost::BoostSpec;
use ccacr::learners::causal_forest::{fit_causal_forest, CausalForestSpec};
use ccacr::learners::forest::ForestSpec;
use ccacr::learners::lasso::LassoSpec;
use ccacr::learners::{select_learner, Learner, LearnerSpec};
use ccacr::limtest::{assemble_gamma, LimTestConfig};
use ccacr::rng;
use ccacr::sim::{run_monte_carlo, violated_with_defier_share};
use ccacr::stats::{mean, sample_variance};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn step_data(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut r = rng::stream(seed, &[]);
    let x = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
    let y = x.column(0).mapv(|v| f64::from(u8::from(v > 0.0)));
    (x, y)
}

fn rmse(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn boosting_halves_the_error_of_the_mean_on_a_step() {
    let (x, y) = step_data(2000, 1);
    let (xt, yt) = step_data(2000, 2);
    let spec = BoostSpec { n_trees: 300, depth: 2, shrinkage: 0.1, ..Default::default() };
    let fit = spec.fit(x.view(), y.view(), 3).unwrap();
    let boosted = rmse(&fit.predict(xt.view()), &yt);
    let baseline = rmse(&Array1::from_elem(yt.len(), mean(&y.to_vec())), &yt);
    assert!(boosted <= 0.5 * baseline, "boost {boosted} vs mean {baseline}");
}

#[test]
fn lasso_wins_cv_on_linear_designs() {
    let candidates = [
        LearnerSpec::Lasso(LassoSpec::default()),
        LearnerSpec::Forest(ForestSpec { n_trees: 100, ..Default::default() }),
    ];
    let beta = [1.0, -0.8, 0.6, 0.5, -0.4, 0.3, 0.0, 0.0, 0.0, 0.0];
    let mut wins = 0;
    for trial in 0..50u64 {
        let mut r = rng::stream(trial, &[0x1a55]);
        let x = Array2::from_shape_fn((500, 10), |_| StandardNormal.sample(&mut r));
        let y = Array1::from_iter((0..500).map(|i| {
            let signal: f64 = (0..10).map(|k| beta[k] * x[[i, k]]).sum();
            let noise: f64 = StandardNormal.sample(&mut r);
            signal + noise
        }));
        let (_, report) = select_learner(&candidates, x.view(), y.view(), 5, trial).unwrap();
        wins += usize::from(report.rmse[0] <= report.rmse[1]);
    }
    assert!(wins >= 40, "lasso won {wins} of 50");
}

#[test]
fn causal_forest_oob_mean_is_unbiased_for_the_ate() {
    let n = 1000;
    let spec = CausalForestSpec { n_trees: 200, min_leaf: 10, ..Default::default() };
    let mut deviations = Vec::new();
    let mut within = 0;
    for seed in 0..50u64 {
        let mut r = rng::stream(seed, &[0xca05]);
        let x = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut r));
        let w = Array1::from_iter((0..n).map(|_| f64::from(u8::from(r.random::<f64>() < 0.5))));
        let tau: Vec<f64> = (0..n).map(|i| 1.0 + x[[i, 0]]).collect();
        let y = Array1::from_iter((0..n).map(|i| {
            let e: f64 = StandardNormal.sample(&mut r);
            x[[i, 1]] + tau[i] * w[i] + e
        }));
        let fit = fit_causal_forest(x.view(), w.view(), y.view(), &spec, seed).unwrap();
        let ate = mean(&tau);
        let dev = mean(&fit.tau_oob) - ate;
        let (y1, y0): (Vec<f64>, Vec<f64>) = {
            let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| w[i] == 1.0);
            (a.iter().map(|&i| y[i]).collect(), b.iter().map(|&i| y[i]).collect())
        };
        let se = (sample_variance(&y1) / y1.len() as f64 + sample_variance(&y0) / y0.len() as f64).sqrt();
        within += usize::from(dev.abs() <= 3.0 * se);
        deviations.push(dev);
    }
    assert!(within >= 48, "{within} of 50 seeds within 3 SE");
    let bias = mean(&deviations);
    let bias_se = (sample_variance(&deviations) / 50.0).sqrt();
    assert!(bias.abs() <= 3.0 * bias_se.max(1e-3), "bias {bias} se {bias_se}");
}

/// Binary pseudo-outcome with a known instrument propensity; the outcome
/// regression is deliberately wrong.
fn dr_replication(n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, &[0xd0b1]);
    let mut x = Array2::zeros((n, 2));
    let (mut z, mut q, mut e) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        x[[i, 0]] = f64::from(u8::from(r.random::<f64>() < 0.5));
        x[[i, 1]] = f64::from(u8::from(r.random::<f64>() < 0.4));
        e[i] = 0.3 + 0.4 * x[[i, 0]];
        z[i] = f64::from(u8::from(r.random::<f64>() < e[i]));
        let base = 0.5 + 0.2 * x[[i, 0]];
        let tau = -0.2 + 0.3 * x[[i, 1]];
        q[i] = f64::from(u8::from(r.random::<f64>() < base + tau * z[i]));
    }
    let spec = CausalForestSpec { n_trees: 100, min_leaf: 10, ..Default::default() };
    let cf = fit_causal_forest(x.view(), Array1::from(z.clone()).view(), Array1::from(q.clone()).view(), &spec, seed).unwrap();
    let mu_wrong = vec![0.9; n];
    let gamma = assemble_gamma(&q, &z, &cf.tau_oob, &mu_wrong, &e);
    (mean(&gamma), (sample_variance(&gamma) / n as f64).sqrt())
}

#[test]
fn aipw_score_survives_a_misspecified_outcome_model() {
    let truth = -0.2 + 0.3 * 0.4;
    let mut within = 0;
    for seed in 0..10 {
        let (m, se) = dr_replication(4000, seed);
        within += usize::from((m - truth).abs() <= 3.0 * se);
    }
    assert!(within >= 9, "{within} of 10");
}

#[test]
fn rejections_do_not_fall_as_defiers_grow() {
    let test = LimTestConfig {
        forest: ForestSpec { n_trees: 100, min_leaf: 10, ..Default::default() },
        causal_forest: CausalForestSpec { n_trees: 100, min_leaf: 10, ..Default::default() },
        ..Default::default()
    };
    let reps = 100;
    let mild = run_monte_carlo(&violated_with_defier_share(0.05).unwrap(), reps, &test).unwrap();
    let severe = run_monte_carlo(&violated_with_defier_share(0.15).unwrap(), reps, &test).unwrap();
    let (a, b) = (mild.margins[0].rejections, severe.margins[0].rejections);
    assert!(b >= a, "defier share 0.05: {a} rejections, 0.15: {b}");
}
