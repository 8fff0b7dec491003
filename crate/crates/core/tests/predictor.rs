use proptest::prelude::*;
use reader_bench::predictor::{
    parse_response, patient_draw_index, simulate_predictor, FeaturePrediction, SimulatedPredictorSpec,
    CALIBRATED_AI_ACCURACY,
};
use reader_bench::severity::{EyeGrade, PatientGrade, SeverityRuleTable};

const DRAWS: u64 = 10_000;

fn gold(d: u8, p: u8, l: u8) -> PatientGrade {
    let e = EyeGrade::new(d, p, l).unwrap();
    PatientGrade::new(e, e)
}

#[test]
fn uniform_spec_draws_each_class_evenly() {
    let spec = SimulatedPredictorSpec::uniform(11);
    let mut drusen = [0u32; 3];
    let mut pigment = [0u32; 2];
    for i in 0..DRAWS {
        let p = simulate_predictor(&spec, &gold(1, 0, 0), i).unwrap();
        drusen[p.left.drusen as usize] += 1;
        pigment[p.right.pigment as usize] += 1;
    }
    for c in drusen {
        assert!((f64::from(c) / DRAWS as f64 - 1.0 / 3.0).abs() < 0.02, "{drusen:?}");
    }
    for c in pigment {
        assert!((f64::from(c) / DRAWS as f64 - 0.5).abs() < 0.02, "{pigment:?}");
    }
}

#[test]
fn calibrated_spec_hits_its_accuracies_and_only_errs_to_neighbours() {
    let spec = SimulatedPredictorSpec::calibrated_ai(3);
    let mut correct = [0u32; 3];
    for i in 0..DRAWS {
        let p = simulate_predictor(&spec, &gold(0, 1, 0), i).unwrap();
        assert!(p.left.drusen <= 1, "drusen 0 can only move to 1");
        correct[0] += u32::from(p.left.drusen == 0);
        correct[1] += u32::from(p.left.pigment == 1);
        correct[2] += u32::from(p.left.late_amd == 0);
    }
    for (c, want) in correct.iter().zip(CALIBRATED_AI_ACCURACY) {
        assert!((f64::from(*c) / DRAWS as f64 - want).abs() < 0.02, "{correct:?}");
    }
}

#[test]
fn draws_depend_on_patient_not_on_order() {
    let spec = SimulatedPredictorSpec::calibrated_ai(5);
    let ids = ["P001", "P002", "P003", "P004"];
    let forward: Vec<_> = ids
        .iter()
        .map(|id| simulate_predictor(&spec, &gold(2, 1, 0), patient_draw_index(id)).unwrap())
        .collect();
    let backward: Vec<_> = ids
        .iter()
        .rev()
        .map(|id| simulate_predictor(&spec, &gold(2, 1, 0), patient_draw_index(id)).unwrap())
        .collect();
    assert!(forward.iter().eq(backward.iter().rev()));
    assert_ne!(patient_draw_index("P001"), patient_draw_index("P002"));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SimulatedPredictorSpec::identity(1);
    spec.drusen[0] = vec![0.5, 0.6, 0.0];
    assert!(simulate_predictor(&spec, &gold(0, 0, 0), 0).is_err());
    let mut spec = SimulatedPredictorSpec::identity(1);
    spec.late_amd.pop();
    assert!(simulate_predictor(&spec, &gold(0, 0, 0), 0).is_err());
}

fn eye() -> impl Strategy<Value = EyeGrade> {
    (0u8..3, 0u8..2, 0u8..2).prop_map(|(d, p, l)| EyeGrade::new(d, p, l).unwrap())
}

proptest! {
    #[test]
    fn wire_round_trip_recomputes_severity(l in eye(), r in eye(), claimed in 0u8..6) {
        let grades = PatientGrade::new(l, r);
        let mut wire = serde_json::to_value(FeaturePrediction::from_grades(&grades)).unwrap();
        wire["severity"] = claimed.into();
        let rules = SeverityRuleTable::default();
        let s = parse_response(&wire.to_string(), &rules).unwrap();
        prop_assert_eq!(s.grades(), grades);
        prop_assert_eq!(s.severity, rules.level(&grades));
    }
}
