//! Prints simulated-study accuracy summaries over a few seeds; used to tune
//! the calibrated defaults of the simulator.

use reader_bench::design::PatientRecord;
use reader_bench::grading::EventLog;
use reader_bench::predictor::{predict, SimulatedPredictor};
use reader_bench::severity::SeverityRuleTable;
use reader_bench::simulation::{design_study, run_simulated_study, synthetic_manifest, SimulationConfig};
use reader_bench::stats::metrics::macro_f1;
use reader_bench::stats::paired::{paired_grader_comparison, GoldLabels, GradingTarget};

fn ai_alone(cohort: &[PatientRecord], config: &SimulationConfig, rules: &SeverityRuleTable) -> f64 {
    let ai = SimulatedPredictor::new(config.ai_spec()).unwrap();
    let gold: Vec<u8> = cohort.iter().map(|r| r.gold_severity.value()).collect();
    let pred: Vec<u8> = cohort
        .iter()
        .map(|r| predict(&ai, "x", r, rules).unwrap().severity.value())
        .collect();
    macro_f1(&gold, &pred, &[0, 1, 2, 3, 4, 5]).unwrap()
}

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let rules = SeverityRuleTable::default();
    let mut base = SimulationConfig::default();
    if args.len() >= 7 {
        base.ai_accuracy = [args[0], args[1], args[2]];
        base.manual_accuracy = [args[3], args[4], args[5]];
        base.trust = args[6];
    }
    if args.len() >= 8 {
        base.wrong_adoption = args[7];
    }
    for seed in (0..8u64).chain([2024]) {
        let config = SimulationConfig { seed, ..base.clone() };
        let manifest = synthetic_manifest(config.patients_per_level, seed, &rules);
        let (cohort, schedule) = design_study(&manifest, &config).unwrap();
        let out = run_simulated_study(&schedule, &cohort, &config, &rules, EventLog::in_memory()).unwrap();
        let gold = GoldLabels::from_schedule(&schedule, &cohort).unwrap();
        let mut line = format!("seed {seed}: ai {:.4}", ai_alone(&cohort, &config, &rules));
        for t in GradingTarget::ALL {
            let c = paired_grader_comparison(&out.events, &gold, t).unwrap();
            line += &format!(
                " | {} {:.2}->{:.2} imp {} p {:.1e}",
                t.as_str(),
                100.0 * c.manual.mean_f1,
                100.0 * c.manual_plus_ai.mean_f1,
                c.improved,
                c.p_two_sided
            );
        }
        println!("{line}");
        if std::env::var("DETAIL").is_ok() {
            let c = paired_grader_comparison(&out.events, &gold, GradingTarget::Severity).unwrap();
            for (cc, p) in c.clinicians.iter().zip(&out.profiles) {
                println!("  {} trust {:.2} acc {:.3} manual {:.3} ai {:.3} delta {:+.3}", p.clinician_id, p.trust, p.manual_accuracy[0], cc.manual_f1, cc.manual_plus_ai_f1, cc.delta);
            }
        }
    }
}
