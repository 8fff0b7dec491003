//! Simulated clinicians driving the grading service through a full study.
//!
//! Unassisted grading draws each per-eye field from a clinician-specific
//! confusion matrix, once per clinician and patient. With AI assistance the
//! clinician switches disagreeing fields to the suggestion with a
//! clinician-specific trust probability, less readily when the suggestion
//! is wrong. Per-case times follow the random-intercept timing model. All
//! randomness comes from named streams of one root seed.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::{
    apply_washout, build_crossover_schedule, partition_batches, stratified_sample, Arm, EyeImages,
    PartitionOptions, PatientRecord, Schedule, ScheduleOptions, CANONICAL_BATCHES,
};
use crate::error::{Error, Result};
use crate::grading::{
    audit_manual_payload, EventLog, GradingEvent, GradingService, ManualClock, NextCase, Submission, ROUNDS,
};
use crate::predictor::{
    patient_draw_index, precompute_suggestions, sample_prediction, SimulatedPredictor, SimulatedPredictorSpec, SuggestionCache,
    CALIBRATED_AI_ACCURACY,
};
use crate::rng;
use crate::severity::{enumerate_rule_table, PatientGrade, SeverityRuleTable};
use crate::stats::lmm::TimingRow;

/// Generator for per-case grading times, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    /// Round-1 Manual mean.
    pub intercept: f64,
    /// Manual shift per round relative to round 1.
    pub manual_round: [f64; 4],
    /// ManualPlusAI minus Manual, per round.
    pub ai_effect: [f64; 4],
    pub sigma_u2: f64,
    pub sigma_e: f64,
    /// Times are floored here so a case never takes zero or negative time.
    pub min_seconds: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            intercept: 39.8,
            manual_round: [0.0, -12.0, -13.0, -14.0],
            ai_effect: [-10.3, -3.3, -2.5, -1.7],
            sigma_u2: 108.3,
            sigma_e: 8.0,
            min_seconds: 1.0,
        }
    }
}

impl TimingModel {
    pub fn mean(&self, round: u8, arm: Arm) -> f64 {
        let r = (round - 1) as usize;
        let ai = if arm == Arm::ManualPlusAI { self.ai_effect[r] } else { 0.0 };
        self.intercept + self.manual_round[r] + ai
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_u2.is_finite() && self.sigma_u2 >= 0.0 && self.sigma_e.is_finite() && self.sigma_e >= 0.0) {
            return Err(Error::validation("timing", "variances must be finite and nonnegative"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(self.intercept.is_finite() && finite(&self.manual_round) && finite(&self.ai_effect)) {
            return Err(Error::validation("timing", "means must be finite"));
        }
        Ok(())
    }
}

/// Times drawn from the timing model alone: `per_cell` cases for every
/// clinician, round and arm, each clinician with its own random intercept.
/// Unlike study times these are not floored at `min_seconds`.
pub fn simulate_timing_rows(model: &TimingModel, clinicians: usize, per_cell: usize, seed: u64) -> Result<Vec<TimingRow>> {
    model.validate()?;
    let mut rng = rng::stream(seed, "timing-rows");
    let between = Normal::new(0.0, model.sigma_u2.sqrt()).expect("validated");
    let within = Normal::new(0.0, model.sigma_e).expect("validated");
    let mut rows = Vec::with_capacity(clinicians * 8 * per_cell);
    for id in clinician_ids(clinicians) {
        let u = between.sample(&mut rng);
        for round in ROUNDS {
            for arm in [Arm::Manual, Arm::ManualPlusAI] {
                for _ in 0..per_cell {
                    rows.push(TimingRow {
                        clinician_id: id.clone(),
                        round,
                        method: arm,
                        seconds: model.mean(round, arm) + u + within.sample(&mut rng),
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub clinicians: usize,
    pub patients_per_level: usize,
    /// Drusen, pigment and late-AMD accuracy of the simulated model.
    pub ai_accuracy: [f64; 3],
    /// Mean unassisted accuracy per feature.
    pub manual_accuracy: [f64; 3],
    /// Standard deviation of a clinician's accuracy shift (shared by all features).
    pub accuracy_spread: f64,
    /// Mean probability of switching a field to a correct AI suggestion.
    pub trust: f64,
    /// Factor applied to `trust` when the suggested field is wrong.
    pub wrong_adoption: f64,
    pub trust_spread: f64,
    pub timing: TimingModel,
    /// Clinicians whose times are lost for one whole round.
    pub missing_time_clinicians: usize,
    pub schedule: ScheduleOptions,
}

impl Default for SimulationConfig {
    /// Tuned so severity macro-F1 averages about 0.377 unassisted and 0.455 assisted.
    fn default() -> Self {
        SimulationConfig {
            seed: rng::DEFAULT_SEED,
            clinicians: 24,
            patients_per_level: 40,
            ai_accuracy: CALIBRATED_AI_ACCURACY,
            manual_accuracy: CALIBRATED_MANUAL_ACCURACY,
            accuracy_spread: 0.03,
            trust: CALIBRATED_TRUST,
            wrong_adoption: CALIBRATED_WRONG_ADOPTION,
            trust_spread: 0.1,
            timing: TimingModel::default(),
            missing_time_clinicians: 5,
            schedule: ScheduleOptions::default(),
        }
    }
}

pub const CALIBRATED_MANUAL_ACCURACY: [f64; 3] = [0.70, 0.72, 0.85];
pub const CALIBRATED_TRUST: f64 = 0.4;
pub const CALIBRATED_WRONG_ADOPTION: f64 = 0.5;

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clinicians < 2 {
            return Err(Error::validation("clinicians", "at least two clinicians are needed"));
        }
        if self.patients_per_level == 0 || !(6 * self.patients_per_level).is_multiple_of(CANONICAL_BATCHES) {
            return Err(Error::validation(
                "patients_per_level",
                format!("6 x {} patients cannot be split into {CANONICAL_BATCHES} equal batches", self.patients_per_level),
            ));
        }
        for (name, v) in [
            ("ai_accuracy", &self.ai_accuracy),
            ("manual_accuracy", &self.manual_accuracy),
        ] {
            if v.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::validation(name, "accuracies must be in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.trust) {
            return Err(Error::validation("trust", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.wrong_adoption) {
            return Err(Error::validation("wrong_adoption", "must be in [0, 1]"));
        }
        if self.missing_time_clinicians > self.clinicians {
            return Err(Error::validation("missing_time_clinicians", "exceeds the number of clinicians"));
        }
        self.timing.validate()?;
        Ok(())
    }

    pub fn ai_spec(&self) -> SimulatedPredictorSpec {
        let [d, p, l] = self.ai_accuracy;
        SimulatedPredictorSpec::with_accuracy(d, p, l, self.seed)
    }
}

/// `C01`, `C02`, ...
pub fn clinician_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("C{i:02}")).collect()
}

/// Manifest with `per_level` patients per severity level, each drawn
/// uniformly from the grade combinations at that level.
pub fn synthetic_manifest(per_level: usize, seed: u64, rules: &SeverityRuleTable) -> Vec<PatientRecord> {
    let mut by_level: [Vec<PatientGrade>; 6] = Default::default();
    for (g, l) in enumerate_rule_table(rules) {
        by_level[l.value() as usize].push(g);
    }
    let mut r = rng::stream(seed, "synthetic-manifest");
    let mut out = Vec::with_capacity(6 * per_level);
    for grades in &by_level {
        for _ in 0..per_level {
            let g = grades[r.random_range(0..grades.len())];
            let id = format!("P{:04}", out.len() + 1);
            let images = EyeImages {
                left: format!("{id}_L.jpg"),
                right: format!("{id}_R.jpg"),
            };
            out.push(PatientRecord::new(id, g, images, rules).expect("enumerated grades are valid"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicianProfile {
    pub clinician_id: String,
    pub manual_accuracy: [f64; 3],
    pub trust: f64,
    /// The clinician's random intercept, in seconds.
    pub speed_offset: f64,
    /// Round whose times are lost, if any.
    pub missing_time_round: Option<u8>,
}

pub fn clinician_profiles(config: &SimulationConfig, clinicians: &[String]) -> Vec<ClinicianProfile> {
    let mut r = rng::stream(config.seed, "clinician-profiles");
    let shift = Normal::new(0.0, config.accuracy_spread.max(0.0)).expect("finite spread");
    let trust = Normal::new(0.0, config.trust_spread.max(0.0)).expect("finite spread");
    let speed = Normal::new(0.0, config.timing.sigma_u2.sqrt()).expect("finite variance");
    let mut profiles: Vec<ClinicianProfile> = clinicians
        .iter()
        .map(|id| {
            let s = shift.sample(&mut r);
            ClinicianProfile {
                clinician_id: id.clone(),
                manual_accuracy: config.manual_accuracy.map(|a| (a + s).clamp(0.0, 1.0)),
                trust: (config.trust + trust.sample(&mut r)).clamp(0.0, 1.0),
                speed_offset: speed.sample(&mut r),
                missing_time_round: None,
            }
        })
        .collect();
    let mut m = rng::stream(config.seed, "missing-times");
    let picked = rand::seq::index::sample(&mut m, profiles.len(), config.missing_time_clinicians);
    for i in picked {
        profiles[i].missing_time_round = Some(m.random_range(1..=4));
    }
    profiles
}

/// Field by field, a clinician who disagrees with the suggestion switches to
/// it with probability `trust`, scaled by `wrong_adoption` when the
/// suggestion is wrong.
pub fn assisted_grades<R: Rng>(
    own: &PatientGrade,
    suggestion: &PatientGrade,
    gold: &PatientGrade,
    trust: f64,
    wrong_adoption: f64,
    rng: &mut R,
) -> PatientGrade {
    let mut out = *own;
    let eyes = [
        (&mut out.left, &suggestion.left, &gold.left),
        (&mut out.right, &suggestion.right, &gold.right),
    ];
    for (o, s, g) in eyes {
        for (field, sug, truth) in [
            (&mut o.drusen, s.drusen, g.drusen),
            (&mut o.pigment, s.pigment, g.pigment),
            (&mut o.late_amd, s.late_amd, g.late_amd),
        ] {
            if *field != sug {
                let p = if sug == truth { trust } else { trust * wrong_adoption };
                if rng.random_bool(p) {
                    *field = sug;
                }
            }
        }
    }
    out
}

/// Cohort selection, batching, rounds 1–2 and the washout, all from `config.seed`.
pub fn design_study(
    manifest: &[PatientRecord],
    config: &SimulationConfig,
) -> Result<(Vec<PatientRecord>, Schedule)> {
    config.validate()?;
    let cohort = stratified_sample(manifest, config.patients_per_level, config.seed)?;
    let batches = partition_batches(&cohort, CANONICAL_BATCHES, config.seed, PartitionOptions::default())?;
    let schedule = build_crossover_schedule(
        &batches,
        &clinician_ids(config.clinicians),
        config.seed,
        config.schedule.clone(),
    )?;
    Ok((cohort, apply_washout(&schedule, config.seed)?))
}

/// Blinding check over every case payload served during a simulated study.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadAudit {
    pub manual_payloads: usize,
    pub assisted_payloads: usize,
    /// Predictor-field paths found in Manual-arm payloads.
    pub violations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub profiles: Vec<ClinicianProfile>,
    pub suggestions: SuggestionCache,
    pub events: Vec<GradingEvent>,
    pub payload_audit: PayloadAudit,
}

/// Runs every clinician through every round of `schedule` via the grading
/// service, appending to `log`.
pub fn run_simulated_study(
    schedule: &Schedule,
    records: &[PatientRecord],
    config: &SimulationConfig,
    rules: &SeverityRuleTable,
    log: EventLog,
) -> Result<SimulationOutput> {
    config.validate()?;
    if !log.is_empty() {
        return Err(Error::Protocol("simulation needs an empty event log".into()));
    }
    let ai = SimulatedPredictor::new(config.ai_spec())?;
    let suggestions = precompute_suggestions(&ai, schedule, records, rules);
    if let Some((pid, why)) = suggestions.failures.iter().next() {
        return Err(Error::PredictorUnavailable(format!("{pid}: {why}")));
    }
    let clock = Arc::new(ManualClock::at_epoch());
    let service = GradingService::new(
        schedule.clone(),
        records.to_vec(),
        rules.clone(),
        suggestions.clone(),
        log,
        clock.clone(),
    )?;
    let profiles = clinician_profiles(config, &schedule.clinicians);
    let gold_of: HashMap<&str, PatientGrade> = records.iter().map(|r| (r.patient_id.as_str(), r.gold)).collect();
    let noise = Normal::new(0.0, config.timing.sigma_e).expect("finite sigma");

    let mut grading_rng: Vec<_> = profiles
        .iter()
        .map(|p| rng::stream(config.seed, &format!("grading/{}", p.clinician_id)))
        .collect();
    let mut timing_rng: Vec<_> = profiles
        .iter()
        .map(|p| rng::stream(config.seed, &format!("timing/{}", p.clinician_id)))
        .collect();
    let specs: Vec<SimulatedPredictorSpec> = profiles
        .iter()
        .map(|p| {
            let [d, pg, l] = p.manual_accuracy;
            SimulatedPredictorSpec::with_accuracy(d, pg, l, config.seed)
        })
        .collect();

    let mut payload_audit = PayloadAudit::default();
    for round in ROUNDS {
        if round == 3 {
            clock.advance(f64::from(config.schedule.washout_days) * 86_400.0);
        }
        for (ci, profile) in profiles.iter().enumerate() {
            let session = service.start_session(&profile.clinician_id, round)?;
            loop {
                let next = service.next_case(&session.session_id)?;
                let view = match next {
                    NextCase::Case(ref v) => v.clone(),
                    NextCase::EndOfRound { .. } => break,
                };
                if view.arm == Arm::Manual {
                    payload_audit.manual_payloads += 1;
                    let payload = serde_json::to_value(&next)?;
                    payload_audit.violations.extend(audit_manual_payload(&payload));
                } else {
                    payload_audit.assisted_payloads += 1;
                }
                let pid = schedule
                    .patient_of(&view.patient_alias)
                    .ok_or_else(|| Error::InvariantViolation(format!("alias {} unmapped", view.patient_alias)))?;
                let gold = *gold_of
                    .get(pid)
                    .ok_or_else(|| Error::InvariantViolation(format!("patient {pid} missing")))?;
                // A clinician's own reading of a patient is the same in both
                // periods, so the arms differ only where the suggestion is adopted.
                let mut reading = rng::indexed_stream(
                    config.seed,
                    &format!("reading/{}", profile.clinician_id),
                    patient_draw_index(pid),
                );
                let own = sample_prediction(&specs[ci], &gold, &mut reading).grades();
                let grades = match &view.ai_suggestion {
                    Some(s) => assisted_grades(&own, &s.grades(), &gold, profile.trust, config.wrong_adoption, &mut grading_rng[ci]),
                    None => own,
                };
                let mean = config.timing.mean(round, view.arm) + profile.speed_offset;
                let seconds = (mean + noise.sample(&mut timing_rng[ci])).max(config.timing.min_seconds);
                if profile.missing_time_round == Some(round) {
                    service.abandon_case(&session.session_id)?;
                }
                clock.advance(seconds);
                service.submit(
                    &session.session_id,
                    Submission {
                        patient_alias: view.patient_alias,
                        grades,
                        client_elapsed_seconds: None,
                    },
                )?;
                // Short pause before the next case is requested.
                clock.advance(1.0);
            }
            clock.advance(3600.0);
        }
    }
    let events = service.log().events();
    Ok(SimulationOutput {
        profiles,
        suggestions,
        events,
        payload_audit,
    })
}
