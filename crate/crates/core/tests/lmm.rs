mod common;

use common::{anova_reml, ols, one_way_model, random_groups, timing_rows, TRUE_AI_EFFECTS, TRUE_SIGMA_U2};
use rand::Rng;
use reader_bench::design::Arm;
use reader_bench::rng;
use reader_bench::stats::lmm::{
    fit_lmm, fit_lmm_without_random_intercept, lmm_round_effects, RandomInterceptModel, TimingRow, METHOD_AI,
};

#[test]
fn balanced_one_way_matches_anova_oracle() {
    for seed in 0..20 {
        let groups = random_groups(seed, 12, 6, 3.0 + seed as f64 % 4.0, 5.0);
        let (su, se) = anova_reml(&groups);
        let fit = one_way_model(&groups).fit().unwrap();
        assert!(fit.converged, "{}", fit.diagnostics);
        assert!((fit.sigma_u2 - su).abs() < 1e-6, "seed {seed}: {} vs {su}", fit.sigma_u2);
        assert!((fit.sigma_e2 - se).abs() < 1e-6, "seed {seed}: {} vs {se}", fit.sigma_e2);
    }
}

#[test]
fn negative_anova_estimate_lands_on_boundary() {
    // Group means nearly identical, large within-group spread.
    let groups = vec![
        vec![10.0, 30.0, 20.0],
        vec![11.0, 29.0, 20.5],
        vec![9.0, 31.0, 19.5],
        vec![12.0, 28.0, 20.0],
    ];
    let (su, se) = anova_reml(&groups);
    assert_eq!(su, 0.0);
    let fit = one_way_model(&groups).fit().unwrap();
    assert!(fit.boundary);
    assert!((fit.sigma_e2 - se).abs() < 1e-9);
}

#[test]
fn zero_ratio_reproduces_ols() {
    let rows = timing_rows(4, 6, 5, 100.0, 15.0, TRUE_AI_EFFECTS);
    let fit = fit_lmm_without_random_intercept(&rows).unwrap();
    let beta = ols(&rows);
    for (c, b) in fit.coefficients.iter().zip(&beta) {
        assert!((c.estimate - b).abs() < 1e-9, "{}: {} vs {b}", c.name, c.estimate);
    }
    assert_eq!(fit.sigma_u2, 0.0);
}

#[test]
fn no_between_clinician_spread_gives_ols() {
    // Every clinician has the identical set of observations, so clinician means agree.
    let template = timing_rows(8, 1, 4, 0.0, 15.0, TRUE_AI_EFFECTS);
    let mut rows = Vec::new();
    for c in 0..5 {
        for r in &template {
            rows.push(TimingRow {
                clinician_id: format!("C{c}"),
                ..r.clone()
            });
        }
    }
    let fit = fit_lmm(&rows).unwrap();
    assert!(fit.sigma_u2.abs() < 1e-9);
    for (c, b) in fit.coefficients.iter().zip(ols(&rows)) {
        assert!((c.estimate - b).abs() < 1e-6);
    }
}

#[test]
fn reml_is_stationary_at_optimum() {
    for seed in 0..5 {
        let rows = timing_rows(seed, 24, 3, TRUE_SIGMA_U2, 15.0, TRUE_AI_EFFECTS);
        let fit = fit_lmm(&rows).unwrap();
        assert!(fit.converged && !fit.boundary);
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        for r in &rows {
            let ai = (r.method == Arm::ManualPlusAI) as u8 as f64;
            let mut row = vec![1.0];
            row.extend((2..=4).map(|k| (r.round == k) as u8 as f64));
            row.push(ai);
            row.extend((2..=4).map(|k| ai * (r.round == k) as u8 as f64));
            x.push(row);
            y.push(r.seconds);
            g.push(r.clinician_id.clone());
        }
        let names = fit.coefficients.iter().map(|c| c.name.clone()).collect();
        let model = RandomInterceptModel::new(&x, &y, &g, names).unwrap();
        let t = fit.variance_ratio.ln();
        let h = 1e-5;
        let d = (model.profiled_reml((t + h).exp()).unwrap() - model.profiled_reml((t - h).exp()).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-3, "seed {seed}: derivative {d}");
        assert!((model.profiled_reml(fit.variance_ratio).unwrap() - fit.reml_loglik).abs() < 1e-9);
    }
}

#[test]
fn round_one_effect_is_method_coefficient() {
    let rows = timing_rows(2, 10, 4, 50.0, 15.0, TRUE_AI_EFFECTS);
    let fit = fit_lmm(&rows).unwrap();
    let effects = lmm_round_effects(&fit).unwrap();
    let m = fit.coefficient(METHOD_AI).unwrap();
    assert_eq!(effects[0].estimate, m.estimate);
    assert_eq!(effects[0].std_error, m.std_error);
    for c in &fit.coefficients {
        assert!((c.ci_high - c.estimate - 1.96 * c.std_error).abs() < 1e-12);
    }
}

#[test]
fn homogeneous_interaction_gives_similar_round_effects() {
    let rows = timing_rows(6, 24, 20, TRUE_SIGMA_U2, 15.0, [-5.0; 4]);
    let fit = fit_lmm(&rows).unwrap();
    for e in lmm_round_effects(&fit).unwrap() {
        assert!((e.estimate + 5.0).abs() < 3.0 * e.std_error, "round {}: {}", e.round, e.estimate);
    }
}

#[test]
fn random_design_unbalanced_groups_fit() {
    let mut r = rng::stream(1, "unbalanced");
    let mut groups = Vec::new();
    for _ in 0..8 {
        let n = r.random_range(2..9);
        let u: f64 = r.random_range(-5.0..5.0);
        groups.push((0..n).map(|_| 20.0 + u + r.random_range(-2.0..2.0)).collect::<Vec<f64>>());
    }
    let fit = one_way_model(&groups).fit().unwrap();
    assert!(fit.converged);
    assert!(fit.sigma_u2 > 0.0 && fit.sigma_e2 > 0.0);
}
