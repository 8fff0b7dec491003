//! Estimates how often the timing model's estimates land within 2 SE of the
//! generating values, over many seeded replications.
//!
//! Usage: lmm_coverage <replications> <cases per cell> <residual sd> [first seed]

use rand_distr::{Distribution, Normal};
use reader_bench::design::Arm;
use reader_bench::rng;
use reader_bench::simulation::TimingModel;
use reader_bench::stats::lmm::{fit_lmm, lmm_round_effects, TimingRow, INTERCEPT};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let reps: u64 = args[0].parse().unwrap();
    let per_cell: usize = args[1].parse().unwrap();
    let sigma_e: f64 = args[2].parse().unwrap();
    let first: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let truth = TimingModel::default();
    let nu = Normal::new(0.0, truth.sigma_u2.sqrt()).unwrap();
    let ne = Normal::new(0.0, sigma_e).unwrap();
    let mut hits = [0u64; 5];
    for seed in first..first + reps {
        let mut r = rng::stream(seed, "timing");
        let mut rows = Vec::new();
        for c in 0..24 {
            let u = nu.sample(&mut r);
            for round in 1..=4u8 {
                for method in [Arm::Manual, Arm::ManualPlusAI] {
                    for _ in 0..per_cell {
                        rows.push(TimingRow {
                            clinician_id: format!("C{c:02}"),
                            round,
                            method,
                            seconds: truth.mean(round, method) + u + ne.sample(&mut r),
                        });
                    }
                }
            }
        }
        let fit = fit_lmm(&rows).unwrap();
        let b0 = fit.coefficient(INTERCEPT).unwrap();
        hits[0] += u64::from((b0.estimate - truth.intercept).abs() <= 2.0 * b0.std_error);
        for e in lmm_round_effects(&fit).unwrap() {
            let t = truth.ai_effect[(e.round - 1) as usize];
            hits[e.round as usize] += u64::from((e.estimate - t).abs() <= 2.0 * e.std_error);
        }
    }
    let rates: Vec<String> = hits.iter().map(|h| format!("{:.2}%", 100.0 * *h as f64 / reps as f64)).collect();
    println!("beta0 / round 1-4 AI effects within 2 SE: {}", rates.join(" "));
}
