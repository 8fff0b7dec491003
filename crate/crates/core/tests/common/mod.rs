//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use reader_bench::design::Arm;
use reader_bench::rng;
use reader_bench::stats::lmm::{RandomInterceptModel, TimingRow, INTERCEPT};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Simplified severity scale written out field by field from the published
/// scoring rules: late AMD in either eye is level 5; otherwise one point per
/// eye for large drusen, one per eye for pigment abnormality, one point for
/// medium drusen in both eyes when neither has large drusen, capped at 4.
pub fn severity_oracle(l: (u8, u8, u8), r: (u8, u8, u8)) -> u8 {
    if l.2 == 1 || r.2 == 1 {
        return 5;
    }
    let mut points = 0u8;
    for eye in [l, r] {
        if eye.0 == 2 {
            points += 1;
        }
        if eye.1 == 1 {
            points += 1;
        }
    }
    if l.0 == 1 && r.0 == 1 {
        points += 1;
    }
    points.min(4)
}

/// Exact two-sided rank-sum p-value by enumerating every split of ranks 1..=n.
pub fn enumerated_rank_sum_p(x_ranks: &[usize], n: usize) -> f64 {
    let k = x_ranks.len();
    let w: usize = x_ranks.iter().sum();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let s: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        total += 1;
        if s <= w {
            le += 1;
        }
        if s >= w {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Closed-form REML for a balanced one-way random-intercept layout.
pub fn anova_reml(groups: &[Vec<f64>]) -> (f64, f64) {
    let k = groups.len() as f64;
    let n = groups[0].len() as f64;
    let grand = groups.iter().flatten().sum::<f64>() / (k * n);
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
    let ssb: f64 = means.iter().map(|m| n * (m - grand).powi(2)).sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let msb = ssb / (k - 1.0);
    let msw = ssw / (k * (n - 1.0));
    if msb > msw {
        ((msb - msw) / n, msw)
    } else {
        (0.0, (ssb + ssw) / (k * n - 1.0))
    }
}

pub fn one_way_model(groups: &[Vec<f64>]) -> RandomInterceptModel {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for (i, vals) in groups.iter().enumerate() {
        for v in vals {
            x.push(vec![1.0]);
            y.push(*v);
            g.push(format!("g{i:02}"));
        }
    }
    RandomInterceptModel::new(&x, &y, &g, vec![INTERCEPT.into()]).unwrap()
}

pub fn random_groups(seed: u64, k: usize, n: usize, sd_u: f64, sd_e: f64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "oneway");
    let nu = Normal::new(0.0, sd_u).unwrap();
    let ne = Normal::new(0.0, sd_e).unwrap();
    (0..k)
        .map(|_| {
            let u = nu.sample(&mut r);
            (0..n).map(|_| 40.0 + u + ne.sample(&mut r)).collect()
        })
        .collect()
}

pub const MANUAL_ROUND: [f64; 4] = [0.0, -12.0, -13.0, -14.0];
pub const TRUE_INTERCEPT: f64 = 39.8;
pub const TRUE_AI_EFFECTS: [f64; 4] = [-10.3, -3.3, -2.5, -1.7];
pub const TRUE_SIGMA_U2: f64 = 108.3;

/// Timing rows from the random-intercept generator: `per_cell` cases per
/// clinician, round and arm.
pub fn timing_rows(
    seed: u64,
    clinicians: usize,
    per_cell: usize,
    sigma_u2: f64,
    sigma_e: f64,
    ai_effects: [f64; 4],
) -> Vec<TimingRow> {
    let mut r = rng::stream(seed, "timing");
    let nu = Normal::new(0.0, sigma_u2.sqrt()).unwrap();
    let ne = Normal::new(0.0, sigma_e).unwrap();
    let mut rows = Vec::new();
    for c in 0..clinicians {
        let u = if sigma_u2 > 0.0 { nu.sample(&mut r) } else { 0.0 };
        for round in 1..=4u8 {
            for method in [Arm::Manual, Arm::ManualPlusAI] {
                for _ in 0..per_cell {
                    let mut mu = TRUE_INTERCEPT + MANUAL_ROUND[(round - 1) as usize] + u;
                    if method == Arm::ManualPlusAI {
                        mu += ai_effects[(round - 1) as usize];
                    }
                    rows.push(TimingRow {
                        clinician_id: format!("C{c:02}"),
                        round,
                        method,
                        seconds: mu + ne.sample(&mut r),
                    });
                }
            }
        }
    }
    rows
}

/// Ordinary least squares on the treatment-coded timing design
/// (intercept, rounds 2–4, method, method × rounds 2–4).
pub fn ols(rows: &[TimingRow]) -> Vec<f64> {
    let x = DMatrix::from_fn(rows.len(), 8, |i, j| {
        let r = &rows[i];
        let ai = f64::from(u8::from(r.method == Arm::ManualPlusAI));
        match j {
            0 => 1.0,
            1..=3 => f64::from(u8::from(r.round == j as u8 + 1)),
            4 => ai,
            _ => ai * f64::from(u8::from(r.round == (j - 3) as u8)),
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.seconds));
    let sol = x.svd(true, true).solve(&y, 1e-12).unwrap();
    sol.iter().copied().collect()
}
