//! Manual vs Manual+AI comparison of clinicians' grades.
//!
//! Each clinician is scored separately in each arm on the same patients;
//! the per-clinician F1 vectors of the two arms are then compared with the
//! rank-sum test.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::design::{Arm, PatientRecord, Schedule};
use crate::error::{Error, Result};
use crate::grading::GradingEvent;
use crate::severity::{PatientGrade, SeverityLevel};
use crate::stats::bootstrap::percentile;
use crate::stats::metrics::{confusion, per_class_metrics, F1Average};
use crate::stats::wilcoxon::{wilcoxon_rank_sum, WilcoxonResult};

/// What is being scored: the patient-level severity or one per-eye risk feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingTarget {
    Severity,
    Drusen,
    Pigment,
    LateAmd,
}

impl GradingTarget {
    pub const ALL: [GradingTarget; 4] = [
        GradingTarget::Severity,
        GradingTarget::Drusen,
        GradingTarget::Pigment,
        GradingTarget::LateAmd,
    ];

    pub fn classes(self) -> Vec<u8> {
        match self {
            GradingTarget::Severity => (0..=SeverityLevel::MAX).collect(),
            GradingTarget::Drusen => vec![0, 1, 2],
            GradingTarget::Pigment | GradingTarget::LateAmd => vec![0, 1],
        }
    }

    /// Multi-class targets use macro-F1; the two presence/absence features
    /// score the "present" class.
    pub fn average(self) -> F1Average {
        match self {
            GradingTarget::Severity | GradingTarget::Drusen => F1Average::Macro,
            GradingTarget::Pigment | GradingTarget::LateAmd => F1Average::Binary { positive: 1 },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GradingTarget::Severity => "severity",
            GradingTarget::Drusen => "drusen",
            GradingTarget::Pigment => "pigment",
            GradingTarget::LateAmd => "late_amd",
        }
    }

    /// Labels contributed by one patient: one for severity, one per eye for features.
    pub fn labels(self, grade: &PatientGrade, severity: SeverityLevel) -> Vec<u8> {
        match self {
            GradingTarget::Severity => vec![severity.value()],
            GradingTarget::Drusen => vec![grade.left.drusen, grade.right.drusen],
            GradingTarget::Pigment => vec![grade.left.pigment, grade.right.pigment],
            GradingTarget::LateAmd => vec![grade.left.late_amd, grade.right.late_amd],
        }
    }
}

/// Gold labels keyed by alias, covering both study periods.
#[derive(Debug, Clone, Default)]
pub struct GoldLabels {
    by_alias: HashMap<String, (String, PatientGrade, SeverityLevel)>,
}

impl GoldLabels {
    pub fn from_schedule(schedule: &Schedule, records: &[PatientRecord]) -> Result<Self> {
        let by_id: HashMap<&str, &PatientRecord> = records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let mut by_alias = HashMap::new();
        for (alias, pid) in &schedule.aliases {
            let r = by_id
                .get(pid.as_str())
                .ok_or_else(|| Error::validation("manifest", format!("patient {pid} is scheduled but not in the manifest")))?;
            by_alias.insert(alias.clone(), (pid.clone(), r.gold, r.gold_severity));
        }
        Ok(GoldLabels { by_alias })
    }

    /// Returns (patient_id, gold grade, gold severity).
    pub fn get(&self, alias: &str) -> Option<(&str, &PatientGrade, SeverityLevel)> {
        self.by_alias.get(alias).map(|(p, g, s)| (p.as_str(), g, *s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleF1 {
    pub class: u8,
    pub manual: f64,
    pub manual_plus_ai: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicianComparison {
    pub clinician_id: String,
    pub patients: usize,
    pub manual_f1: f64,
    pub manual_plus_ai_f1: f64,
    pub delta: f64,
    pub per_scale: Vec<ScaleF1>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedClinician {
    pub clinician_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean_f1: f64,
    /// 2.5th and 97.5th percentiles of the per-clinician F1s.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub target: GradingTarget,
    pub clinicians: Vec<ClinicianComparison>,
    pub excluded: Vec<ExcludedClinician>,
    pub manual: ArmSummary,
    pub manual_plus_ai: ArmSummary,
    pub improved: usize,
    pub test: WilcoxonResult,
    pub p_two_sided: f64,
    /// Mean per-class F1 over included clinicians.
    pub per_scale: Vec<ScaleF1>,
}

fn arm_summary(values: &[f64]) -> ArmSummary {
    ArmSummary {
        mean_f1: values.iter().sum::<f64>() / values.len() as f64,
        ci_low: percentile(values, 0.025),
        ci_high: percentile(values, 0.975),
    }
}

type ArmLabels = BTreeMap<String, (Vec<u8>, Vec<u8>)>;

/// Compares the two arms for every clinician in `events`.
///
/// A clinician whose Manual and Manual+AI gradings do not cover the same
/// patients exactly once each is excluded and listed with the reason.
pub fn paired_grader_comparison(
    events: &[GradingEvent],
    gold: &GoldLabels,
    target: GradingTarget,
) -> Result<PairedComparison> {
    // clinician -> arm -> patient -> (gold labels, graded labels)
    let mut by: BTreeMap<&str, BTreeMap<Arm, ArmLabels>> = BTreeMap::new();
    let mut duplicates: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for e in events {
        let (pid, g, s) = gold
            .get(&e.patient_alias)
            .ok_or_else(|| Error::validation("patient_alias", format!("{} has no gold label", e.patient_alias)))?;
        let entry = by.entry(&e.clinician_id).or_default().entry(e.arm).or_default();
        let labels = (target.labels(g, s), target.labels(&e.submitted, e.derived_severity));
        if entry.insert(pid.to_string(), labels).is_some() {
            duplicates.entry(&e.clinician_id).or_default().insert(pid.to_string());
        }
    }

    let classes = target.classes();
    let average = target.average();
    let mut clinicians = Vec::new();
    let mut excluded = Vec::new();
    for (cid, arms) in &by {
        let empty = BTreeMap::new();
        let manual = arms.get(&Arm::Manual).unwrap_or(&empty);
        let assisted = arms.get(&Arm::ManualPlusAI).unwrap_or(&empty);
        let reason = if let Some(d) = duplicates.get(cid) {
            Some(format!("{} patient(s) graded more than once in one arm", d.len()))
        } else if manual.is_empty() || assisted.is_empty() {
            Some("one arm has no gradings".to_string())
        } else if !manual.keys().eq(assisted.keys()) {
            let only_m = manual.keys().filter(|k| !assisted.contains_key(*k)).count();
            let only_a = assisted.keys().filter(|k| !manual.contains_key(*k)).count();
            Some(format!(
                "arms cover different patients ({only_m} only in Manual, {only_a} only in ManualPlusAI)"
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            excluded.push(ExcludedClinician {
                clinician_id: cid.to_string(),
                reason,
            });
            continue;
        }
        let score = |arm: &ArmLabels| -> Result<_> {
            let (g, p): (Vec<u8>, Vec<u8>) = arm
                .values()
                .flat_map(|(g, p)| g.iter().copied().zip(p.iter().copied()))
                .unzip();
            let m = per_class_metrics(&confusion(&g, &p, &classes)?)?;
            Ok((average.score(&m), m))
        };
        let (mf1, mm) = score(manual)?;
        let (af1, am) = score(assisted)?;
        let per_scale = mm
            .per_class
            .iter()
            .zip(&am.per_class)
            .filter(|(m, _)| m.support > 0)
            .map(|(m, a)| ScaleF1 {
                class: m.class,
                manual: m.f1,
                manual_plus_ai: a.f1,
            })
            .collect();
        clinicians.push(ClinicianComparison {
            clinician_id: cid.to_string(),
            patients: manual.len(),
            manual_f1: mf1,
            manual_plus_ai_f1: af1,
            delta: af1 - mf1,
            per_scale,
        });
    }
    if clinicians.is_empty() {
        return Err(Error::Argument(format!(
            "no clinician has complete gradings in both arms ({} excluded)",
            excluded.len()
        )));
    }

    let m: Vec<f64> = clinicians.iter().map(|c| c.manual_f1).collect();
    let a: Vec<f64> = clinicians.iter().map(|c| c.manual_plus_ai_f1).collect();
    let test = wilcoxon_rank_sum(&m, &a)?;
    let mut scale_sums: BTreeMap<u8, (f64, f64, usize)> = BTreeMap::new();
    for c in &clinicians {
        for s in &c.per_scale {
            let e = scale_sums.entry(s.class).or_default();
            e.0 += s.manual;
            e.1 += s.manual_plus_ai;
            e.2 += 1;
        }
    }
    Ok(PairedComparison {
        target,
        improved: clinicians.iter().filter(|c| c.delta > 0.0).count(),
        manual: arm_summary(&m),
        manual_plus_ai: arm_summary(&a),
        p_two_sided: test.p_two_sided,
        test,
        per_scale: scale_sums
            .into_iter()
            .map(|(class, (sm, sa, n))| ScaleF1 {
                class,
                manual: sm / n as f64,
                manual_plus_ai: sa / n as f64,
            })
            .collect(),
        clinicians,
        excluded,
    })
}
